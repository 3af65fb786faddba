//! Scene-file ingestion, experiment execution, metric and artifact emission,
//! parameter sweeps, and the multi-scene suite runner. All outputs are
//! byte-identical for identical inputs.

use crate::attention::ConceptSpec;
use crate::autodiff::{DetachCtx, GradCheckReport, NodeId, Tape};
use crate::energy::{total_energy, EnergyParams};
use crate::field::{NormBox, ScalarField};
use crate::sim::{
    run_sampling, Baseline, GuidanceConfig, SimError, SimLatent, SimModel, StepReport,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("no trajectory rows to summarize")]
    MissingRun,
    #[error("unknown sweep parameter {0}")]
    UnknownParam(String),
}

impl HarnessError {
    /// Process exit code contract: 2 validation/parse, 3 numerical, 4 io.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Parse { .. }
            | HarnessError::Validation(_)
            | HarnessError::UnknownParam(_)
            | HarnessError::MissingRun => 2,
            HarnessError::Sim(SimError::NonFiniteGradient { .. }) => 3,
            HarnessError::Sim(_) => 2,
            HarnessError::Io { .. } => 4,
        }
    }
}

fn io_err(path: &Path, source: std::io::Error) -> HarnessError {
    HarnessError::Io { path: path.display().to_string(), source }
}

// ---------------------------------------------------------------------------
// scene files

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneJson {
    seed: u64,
    n_tokens: usize,
    dim: usize,
    base_resolution: [usize; 2],
    layer_factors: Vec<usize>,
    agg_resolution: [usize; 2],
    concepts: Vec<ConceptJson>,
    #[serde(default)]
    config: ConfigJson,
}

#[derive(Serialize, Deserialize, Clone)]
#[serde(deny_unknown_fields)]
struct ConceptJson {
    name: String,
    tokens: Vec<usize>,
    #[serde(rename = "box")]
    bbox: [f64; 4],
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct ConfigJson {
    lambda: Option<f64>,
    lambda_s: Option<f64>,
    lambda_a: Option<f64>,
    eta_g: Option<f64>,
    sharpness: Option<f64>,
    total_steps: Option<usize>,
    guidance_steps: Option<usize>,
    noise_scale: Option<f64>,
    grad_clip_norm: Option<f64>,
}

/// A fully validated scene: shapes, concepts, and the effective config after
/// defaults.
#[derive(Debug, Clone)]
pub struct SceneFile {
    pub seed: u64,
    pub n_tokens: usize,
    pub dim: usize,
    pub base_resolution: (usize, usize),
    pub layer_factors: Vec<usize>,
    pub agg_resolution: (usize, usize),
    pub concepts: Vec<ConceptSpec>,
    pub config: GuidanceConfig,
}

pub fn load_scene(path: &Path) -> Result<SceneFile, HarnessError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let raw: SceneJson = serde_json::from_str(&text).map_err(|e| HarnessError::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    scene_from_json(raw)
}

fn scene_from_json(raw: SceneJson) -> Result<SceneFile, HarnessError> {
    if raw.concepts.is_empty() {
        return Err(HarnessError::Validation("at least one concept required".into()));
    }
    let mut seen_tokens = std::collections::HashSet::new();
    let mut seen_names = std::collections::HashSet::new();
    let mut concepts = Vec::with_capacity(raw.concepts.len());
    for c in &raw.concepts {
        if c.name.is_empty() || !c.name.chars().all(|ch| ch.is_ascii_alphanumeric() || ch == '_') {
            return Err(HarnessError::Validation(format!(
                "concept name {:?} must be non-empty [A-Za-z0-9_]",
                c.name
            )));
        }
        if !seen_names.insert(c.name.clone()) {
            return Err(HarnessError::Validation(format!("duplicate concept name {:?}", c.name)));
        }
        if c.tokens.is_empty() {
            return Err(HarnessError::Validation(format!("concept {:?} has no tokens", c.name)));
        }
        for &t in &c.tokens {
            if t >= raw.n_tokens {
                return Err(HarnessError::Validation(format!(
                    "concept {:?} token index {t} out of range (n_tokens = {})",
                    c.name, raw.n_tokens
                )));
            }
            if !seen_tokens.insert(t) {
                return Err(HarnessError::Validation(format!(
                    "token index {t} assigned to more than one concept"
                )));
            }
        }
        let bbox = NormBox::new(c.bbox[0], c.bbox[1], c.bbox[2], c.bbox[3])
            .map_err(|e| HarnessError::Validation(format!("concept {:?}: {e}", c.name)))?;
        concepts.push(ConceptSpec { name: c.name.clone(), token_indices: c.tokens.clone(), bbox });
    }
    if raw.agg_resolution[0] == 0 || raw.agg_resolution[1] == 0 {
        return Err(HarnessError::Validation("agg_resolution must be positive".into()));
    }
    let d = GuidanceConfig::default();
    let cfg = &raw.config;
    let config = GuidanceConfig {
        lambda: cfg.lambda.unwrap_or(d.lambda),
        lambda_s: cfg.lambda_s.unwrap_or(d.lambda_s),
        lambda_a: cfg.lambda_a.unwrap_or(d.lambda_a),
        eta_g: cfg.eta_g.unwrap_or(d.eta_g),
        sharpness: cfg.sharpness.unwrap_or(d.sharpness),
        total_steps: cfg.total_steps.unwrap_or(d.total_steps),
        guidance_steps: cfg.guidance_steps.unwrap_or(d.guidance_steps),
        noise_scale: cfg.noise_scale.unwrap_or(d.noise_scale),
        grad_clip_norm: cfg.grad_clip_norm,
        ..d
    };
    config.validate().map_err(|e| HarnessError::Validation(e.to_string()))?;
    // resolution invariants are enforced by the simulator constructors; probe
    // them now so a bad scene fails before any output is produced
    SimModel::new(
        raw.seed,
        raw.n_tokens,
        raw.dim,
        raw.base_resolution[0],
        raw.base_resolution[1],
        &raw.layer_factors,
    )
    .map_err(|e| HarnessError::Validation(e.to_string()))?;
    Ok(SceneFile {
        seed: raw.seed,
        n_tokens: raw.n_tokens,
        dim: raw.dim,
        base_resolution: (raw.base_resolution[0], raw.base_resolution[1]),
        layer_factors: raw.layer_factors,
        agg_resolution: (raw.agg_resolution[0], raw.agg_resolution[1]),
        concepts,
        config,
    })
}

// ---------------------------------------------------------------------------
// ablation variants

/// Applies one ablation flag to a config. Accepted flags: `fixed_threshold`,
/// `no_ste`, `no_region`, `no_boundary`, `layout_guidance`, `zest`.
pub fn apply_ablation(config: &mut GuidanceConfig, flag: &str) -> Result<(), HarnessError> {
    match flag {
        "fixed_threshold" => config.fixed_threshold = Some(0.5),
        "no_ste" => config.no_ste = true,
        "no_region" => config.no_region = true,
        "no_boundary" => config.no_boundary = true,
        "layout_guidance" => config.baseline = Baseline::LayoutGuidance,
        "zest" => config.baseline = Baseline::Zest,
        "rnb" => {}
        other => {
            return Err(HarnessError::Validation(format!("unknown ablation flag {other:?}")))
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// metrics

/// Mean of per-concept final IoUs.
pub fn miou_metric(ious: &[f64]) -> Result<f64, HarnessError> {
    if ious.is_empty() {
        return Err(HarnessError::MissingRun);
    }
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub final_miou: f64,
    pub steps_to_iou_0_5: Option<usize>,
    pub variant: String,
    #[serde(skip)]
    pub wall_time: Duration,
}

#[derive(Debug)]
pub struct RunReport {
    pub rows: Vec<StepReport>,
    pub summary: RunSummary,
}

fn summarize(rows: &[StepReport], variant: &str, wall_time: Duration) -> Result<RunSummary, HarnessError> {
    let last = rows.last().ok_or(HarnessError::MissingRun)?;
    let final_miou = miou_metric(&last.per_concept.iter().map(|c| c.iou).collect::<Vec<_>>())?;
    let steps_to_iou_0_5 = rows.iter().find_map(|r| {
        let m = r.per_concept.iter().map(|c| c.iou).sum::<f64>() / r.per_concept.len() as f64;
        (m >= 0.5).then_some(r.step)
    });
    Ok(RunSummary {
        final_miou,
        steps_to_iou_0_5,
        variant: variant.to_string(),
        wall_time,
    })
}

fn metrics_csv(scene: &SceneFile, rows: &[StepReport]) -> String {
    let mut out = String::from("step,g,lr,lb");
    for c in &scene.concepts {
        let _ = write!(out, ",iou_{},tau_{}", c.name, c.name);
    }
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{},{},{},{}", r.step, r.g, r.region_sum, r.boundary_sum);
        for c in &r.per_concept {
            let _ = write!(out, ",{},{}", c.iou, c.tau);
        }
        out.push('\n');
    }
    out
}

#[derive(Serialize)]
struct ReportJson<'a> {
    variant: &'a str,
    summary: &'a RunSummary,
    config: &'a GuidanceConfig,
    scene: SceneEcho,
    miou_protocol: &'static str,
}

#[derive(Serialize)]
struct SceneEcho {
    seed: u64,
    n_tokens: usize,
    dim: usize,
    base_resolution: [usize; 2],
    layer_factors: Vec<usize>,
    agg_resolution: [usize; 2],
    concepts: Vec<ConceptJson>,
}

const MIOU_PROTOCOL: &str = "mean IoU of the minimum bounding rectangle of each concept's \
thresholded attention map against its rasterized target box; no external detector is involved";

fn scene_echo(scene: &SceneFile) -> SceneEcho {
    SceneEcho {
        seed: scene.seed,
        n_tokens: scene.n_tokens,
        dim: scene.dim,
        base_resolution: [scene.base_resolution.0, scene.base_resolution.1],
        layer_factors: scene.layer_factors.clone(),
        agg_resolution: [scene.agg_resolution.0, scene.agg_resolution.1],
        concepts: scene
            .concepts
            .iter()
            .map(|c| ConceptJson {
                name: c.name.clone(),
                tokens: c.token_indices.clone(),
                bbox: [c.bbox.x0, c.bbox.y0, c.bbox.x1, c.bbox.y1],
            })
            .collect(),
    }
}

/// Writes bytes to `path` atomically (temp file in the same directory, then
/// rename), so failures never leave partial output.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), HarnessError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

/// Binary PGM (P5) dump, min-max scaled to 0..=255; a constant field maps to
/// all zeros.
pub fn dump_pgm(field: &ScalarField, path: &Path) -> Result<(), HarnessError> {
    let (h, w) = field.shape();
    let (mn, mx) = (field.min(), field.max());
    let span = mx - mn;
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.reserve(h * w);
    for &v in field.values() {
        let b = if span > 0.0 {
            ((v - mn) / span * 255.0).round() as u8
        } else {
            0
        };
        bytes.push(b);
    }
    write_atomic(path, &bytes)
}

// ---------------------------------------------------------------------------
// experiment execution

/// Runs the sampling loop in memory only.
pub fn execute_scene(scene: &SceneFile, config: &GuidanceConfig) -> Result<Vec<StepReport>, HarnessError> {
    let model = SimModel::new(
        scene.seed,
        scene.n_tokens,
        scene.dim,
        scene.base_resolution.0,
        scene.base_resolution.1,
        &scene.layer_factors,
    )?;
    let latent = SimLatent::init(
        scene.seed,
        scene.dim,
        scene.base_resolution.0,
        scene.base_resolution.1,
        1.0,
    )?;
    Ok(run_sampling(
        latent,
        &model,
        &scene.concepts,
        config,
        scene.agg_resolution.0,
        scene.agg_resolution.1,
    )?)
}

/// Runs one scene under one variant tag and emits `metrics.csv`,
/// `report.json`, and optionally per-step map dumps under `out_dir`.
pub fn run_experiment(
    scene: &SceneFile,
    out_dir: &Path,
    dump_maps: bool,
    ablations: &[String],
) -> Result<RunReport, HarnessError> {
    let mut config = scene.config.clone();
    for flag in ablations {
        apply_ablation(&mut config, flag)?;
    }
    let variant = if ablations.is_empty() { "rnb".to_string() } else { ablations.join("+") };
    let started = Instant::now();
    let rows = execute_scene(scene, &config)?;
    let summary = summarize(&rows, &variant, started.elapsed())?;
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    write_atomic(&out_dir.join("metrics.csv"), metrics_csv(scene, &rows).as_bytes())?;
    let report = ReportJson {
        variant: &variant,
        summary: &summary,
        config: &config,
        scene: scene_echo(scene),
        miou_protocol: MIOU_PROTOCOL,
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_atomic(&out_dir.join("report.json"), json.as_bytes())?;
    if dump_maps {
        let maps_dir = out_dir.join("maps");
        fs::create_dir_all(&maps_dir).map_err(|e| io_err(&maps_dir, e))?;
        for r in &rows {
            for (c, map) in scene.concepts.iter().zip(&r.norm_maps) {
                let name = format!("step_{:03}_{}.pgm", r.step, c.name);
                dump_pgm(map, &maps_dir.join(name))?;
            }
        }
    }
    Ok(RunReport { rows, summary })
}

// ---------------------------------------------------------------------------
// sweeps

/// Runs the scene once per value of a numeric config parameter (shared seed)
/// and reports `(value, final_miou)` pairs.
pub fn sweep(
    scene: &SceneFile,
    param: &str,
    values: &[f64],
) -> Result<Vec<(f64, f64)>, HarnessError> {
    let mut out = Vec::with_capacity(values.len());
    for &v in values {
        let mut config = scene.config.clone();
        set_param(&mut config, param, v)?;
        config.validate().map_err(|e| HarnessError::Validation(e.to_string()))?;
        let rows = execute_scene(scene, &config)?;
        let last = rows.last().ok_or(HarnessError::MissingRun)?;
        let miou = miou_metric(&last.per_concept.iter().map(|c| c.iou).collect::<Vec<_>>())?;
        out.push((v, miou));
    }
    Ok(out)
}

fn set_param(config: &mut GuidanceConfig, param: &str, v: f64) -> Result<(), HarnessError> {
    match param {
        "lambda" => config.lambda = v,
        "lambda_s" => config.lambda_s = v,
        "lambda_a" => config.lambda_a = v,
        "eta_g" => config.eta_g = v,
        "sharpness" => config.sharpness = v,
        "noise_scale" => config.noise_scale = v,
        "grad_clip_norm" => config.grad_clip_norm = Some(v),
        other => return Err(HarnessError::UnknownParam(other.to_string())),
    }
    Ok(())
}

pub fn sweep_csv(param: &str, table: &[(f64, f64)]) -> String {
    let mut out = format!("{param},final_miou\n");
    for (v, m) in table {
        let _ = writeln!(out, "{v},{m}");
    }
    out
}

// ---------------------------------------------------------------------------
// suite

#[derive(Debug)]
pub struct SuiteEntry {
    pub scene: String,
    pub variant: String,
    pub final_miou: f64,
}

#[derive(Debug)]
pub struct SuiteSummary {
    pub entries: Vec<SuiteEntry>,
}

impl SuiteSummary {
    /// Mean final mIoU across scenes for one variant.
    pub fn mean_miou(&self, variant: &str) -> Option<f64> {
        let v: Vec<f64> = self
            .entries
            .iter()
            .filter(|e| e.variant == variant)
            .map(|e| e.final_miou)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Runs every `*.json` scene in `scenes_dir` (sorted by file name) under each
/// variant, writing per-run artifacts to `out_dir/<scene>/<variant>/` and an
/// overall `summary.csv`.
pub fn run_suite(
    scenes_dir: &Path,
    out_dir: &Path,
    variants: &[String],
) -> Result<SuiteSummary, HarnessError> {
    let mut scene_paths: Vec<PathBuf> = fs::read_dir(scenes_dir)
        .map_err(|e| io_err(scenes_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    scene_paths.sort();
    if scene_paths.is_empty() {
        return Err(HarnessError::Validation(format!(
            "no .json scenes found in {}",
            scenes_dir.display()
        )));
    }
    let mut entries = Vec::new();
    for path in &scene_paths {
        let scene = load_scene(path)?;
        let stem = path.file_stem().unwrap().to_string_lossy().to_string();
        for variant in variants {
            let ablations: Vec<String> = if variant == "rnb" {
                Vec::new()
            } else {
                vec![variant.clone()]
            };
            let run_dir = out_dir.join(&stem).join(variant);
            let report = run_experiment(&scene, &run_dir, false, &ablations)?;
            entries.push(SuiteEntry {
                scene: stem.clone(),
                variant: variant.clone(),
                final_miou: report.summary.final_miou,
            });
        }
    }
    let mut csv = String::from("scene,variant,final_miou\n");
    for e in &entries {
        let _ = writeln!(csv, "{},{},{}", e.scene, e.variant, e.final_miou);
    }
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    write_atomic(&out_dir.join("summary.csv"), csv.as_bytes())?;
    Ok(SuiteSummary { entries })
}

// ---------------------------------------------------------------------------
// gradient checking on full scenes

/// Builds a seeded random desk-scale scene (8x8 base, 4 tokens, 4 channels,
/// 2 disjoint concepts) and finite-difference checks the full guidance energy
/// against the tape gradient at the latent.
pub fn gradcheck_scene(seed: u64, probes: usize) -> GradCheckReport {
    let dim = 4;
    let model = SimModel::new(seed, 4, dim, 8, 8, &[1, 2]).expect("valid shapes");
    let latent = SimLatent::init(seed, dim, 8, 8, 1.0).expect("valid shapes");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5bd1_e995);
    let mut rand_box = |x_lo: f64, x_hi: f64| {
        let y0 = rng.gen_range(0.0..0.4);
        let y1 = rng.gen_range(y0 + 0.3..1.0);
        NormBox::new(x_lo, y0, x_hi, y1).expect("constructed valid")
    };
    let concepts = vec![
        ConceptSpec { name: "a".into(), token_indices: vec![0], bbox: rand_box(0.0, 0.45) },
        ConceptSpec { name: "b".into(), token_indices: vec![1], bbox: rand_box(0.55, 1.0) },
    ];
    let config = GuidanceConfig::default();
    let params = config_map_params(&config, 8, 8);
    let energy_params = EnergyParams {
        lambda_s: config.lambda_s,
        lambda_a: config.lambda_a,
        use_region: true,
        use_boundary: true,
    };
    let build = move |tape: &mut Tape, leaves: &[NodeId], ctx: &mut DetachCtx| {
        let stack = crate::sim::render_attention(tape, leaves, &model);
        let cms: Vec<_> = concepts
            .iter()
            .map(|c| {
                crate::attention::build_concept_maps(tape, &stack, c, &params, ctx)
                    .expect("fixture boxes are valid")
            })
            .collect();
        let (g, _) = total_energy(tape, &cms, &energy_params, ctx);
        g
    };
    crate::autodiff::gradcheck(build, &latent.channels, probes, 1e-4, 1e-3, seed)
}

fn config_map_params(
    config: &GuidanceConfig,
    agg_h: usize,
    agg_w: usize,
) -> crate::attention::ConceptMapParams {
    crate::attention::ConceptMapParams {
        lambda: config.lambda,
        sharpness: config.sharpness,
        fixed_threshold: config.fixed_threshold,
        use_ste: !config.no_ste,
        agg_h,
        agg_w,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_scene_json() -> String {
        r#"{
            "seed": 1,
            "n_tokens": 4,
            "dim": 4,
            "base_resolution": [8, 8],
            "layer_factors": [1, 2],
            "agg_resolution": [8, 8],
            "concepts": [
                {"name": "a", "tokens": [0], "box": [0.0, 0.0, 0.5, 0.5]}
            ]
        }"#
        .to_string()
    }

    fn write_scene(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn minimal_scene_gets_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_scene(dir.path(), "s.json", &minimal_scene_json());
        let scene = load_scene(&p).unwrap();
        assert_eq!(scene.config.lambda, 0.4);
        assert_eq!(scene.config.lambda_s, 1.5);
        assert_eq!(scene.config.lambda_a, 1.0);
        assert_eq!(scene.config.eta_g, 70.0);
        assert_eq!(scene.config.total_steps, 50);
        assert_eq!(scene.config.guidance_steps, 10);
        assert_eq!(scene.config.grad_clip_norm, None);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let bad = minimal_scene_json().replace("\"seed\": 1,", "\"seed\": 1, \"sede\": 2,");
        let p = write_scene(dir.path(), "s.json", &bad);
        let e = load_scene(&p).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().contains("sede"), "{e}");
    }

    #[test]
    fn overlapping_tokens_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let bad = minimal_scene_json().replace(
            r#"{"name": "a", "tokens": [0], "box": [0.0, 0.0, 0.5, 0.5]}"#,
            r#"{"name": "a", "tokens": [0], "box": [0.0, 0.0, 0.5, 0.5]},
               {"name": "b", "tokens": [0], "box": [0.5, 0.5, 1.0, 1.0]}"#,
        );
        let p = write_scene(dir.path(), "s.json", &bad);
        let e = load_scene(&p).unwrap_err();
        assert!(matches!(e, HarnessError::Validation(_)), "{e}");
    }

    #[test]
    fn inverted_box_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let bad = minimal_scene_json().replace("[0.0, 0.0, 0.5, 0.5]", "[0.2, 0.2, 0.1, 0.9]");
        let p = write_scene(dir.path(), "s.json", &bad);
        let e = load_scene(&p).unwrap_err();
        assert!(matches!(e, HarnessError::Validation(_)), "{e}");
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn miou_metric_mean_and_empty() {
        assert!((miou_metric(&[1.0 / 7.0, 1.0]).unwrap() - 4.0 / 7.0).abs() < 1e-15);
        assert_eq!(miou_metric(&[1.0]).unwrap(), 1.0);
        assert!(matches!(miou_metric(&[]), Err(HarnessError::MissingRun)));
    }

    #[test]
    fn pgm_format_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let f = ScalarField::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]);
        let p = dir.path().join("m.pgm");
        dump_pgm(&f, &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes, b"P5\n2 2\n255\n\x00\xff\xff\x00");
        let c = ScalarField::constant(2, 2, 3.7);
        dump_pgm(&c, &p).unwrap();
        assert_eq!(&fs::read(&p).unwrap()[..], b"P5\n2 2\n255\n\x00\x00\x00\x00");
    }

    fn fast_scene(dir: &Path) -> SceneFile {
        let text = minimal_scene_json().replace(
            "\"concepts\"",
            "\"config\": {\"total_steps\": 6, \"guidance_steps\": 3, \"eta_g\": 0.5},\n\"concepts\"",
        );
        let p = write_scene(dir, "fast.json", &text);
        load_scene(&p).unwrap()
    }

    #[test]
    fn run_experiment_row_count_and_columns() {
        let dir = tempfile::tempdir().unwrap();
        let scene = fast_scene(dir.path());
        let out = dir.path().join("out");
        let report = run_experiment(&scene, &out, false, &[]).unwrap();
        assert_eq!(report.rows.len(), 7);
        let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "step,g,lr,lb,iou_a,tau_a");
        assert_eq!(lines.count(), 7);
        let json = fs::read_to_string(out.join("report.json")).unwrap();
        assert!(json.contains("\"variant\": \"rnb\""));
        assert!(json.contains("final_miou"));
        assert!(!json.contains("wall_time"));
    }

    #[test]
    fn rerun_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let scene = fast_scene(dir.path());
        let out1 = dir.path().join("o1");
        let out2 = dir.path().join("o2");
        run_experiment(&scene, &out1, false, &[]).unwrap();
        run_experiment(&scene, &out2, false, &[]).unwrap();
        assert_eq!(fs::read(out1.join("metrics.csv")).unwrap(), fs::read(out2.join("metrics.csv")).unwrap());
        assert_eq!(fs::read(out1.join("report.json")).unwrap(), fs::read(out2.join("report.json")).unwrap());
    }

    #[test]
    fn dump_maps_emits_per_step_files() {
        let dir = tempfile::tempdir().unwrap();
        let scene = fast_scene(dir.path());
        let out = dir.path().join("out");
        run_experiment(&scene, &out, true, &[]).unwrap();
        let maps: Vec<_> = fs::read_dir(out.join("maps")).unwrap().collect();
        // 7 rows x 1 concept
        assert_eq!(maps.len(), 7);
    }

    #[test]
    fn ablation_variant_recorded() {
        let dir = tempfile::tempdir().unwrap();
        let scene = fast_scene(dir.path());
        let out = dir.path().join("out");
        let report = run_experiment(&scene, &out, false, &["no_ste".to_string()]).unwrap();
        assert_eq!(report.summary.variant, "no_ste");
        let json = fs::read_to_string(out.join("report.json")).unwrap();
        assert!(json.contains("\"variant\": \"no_ste\""));
        assert!(json.contains("\"no_ste\": true"));
    }

    #[test]
    fn unknown_ablation_flag_rejected() {
        let mut c = GuidanceConfig::default();
        assert!(apply_ablation(&mut c, "no_step").is_err());
        assert!(apply_ablation(&mut c, "zest").is_ok());
        assert_eq!(c.baseline, Baseline::Zest);
    }

    #[test]
    fn sweep_degenerate_matches_run() {
        let dir = tempfile::tempdir().unwrap();
        let scene = fast_scene(dir.path());
        let table = sweep(&scene, "eta_g", &[scene.config.eta_g]).unwrap();
        let out = dir.path().join("out");
        let report = run_experiment(&scene, &out, false, &[]).unwrap();
        assert_eq!(table.len(), 1);
        assert_eq!(table[0].1, report.summary.final_miou);
    }

    #[test]
    fn sweep_unknown_param_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let scene = fast_scene(dir.path());
        let e = sweep(&scene, "eta", &[1.0]).unwrap_err();
        assert!(matches!(e, HarnessError::UnknownParam(_)));
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn lambda_sweep_stays_finite_and_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let scene = fast_scene(dir.path());
        let a = sweep(&scene, "lambda", &[0.2, 0.4, 0.8]).unwrap();
        let b = sweep(&scene, "lambda", &[0.2, 0.4, 0.8]).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|(_, m)| m.is_finite()));
    }

    #[test]
    fn suite_runs_variants_and_summarizes() {
        let dir = tempfile::tempdir().unwrap();
        let scenes = dir.path().join("scenes");
        fs::create_dir_all(&scenes).unwrap();
        let text = minimal_scene_json().replace(
            "\"concepts\"",
            "\"config\": {\"total_steps\": 4, \"guidance_steps\": 2, \"eta_g\": 0.5},\n\"concepts\"",
        );
        write_scene(&scenes, "s1.json", &text);
        write_scene(&scenes, "s2.json", &text.replace("\"seed\": 1", "\"seed\": 2"));
        let out = dir.path().join("out");
        let variants = vec!["rnb".to_string(), "no_ste".to_string()];
        let summary = run_suite(&scenes, &out, &variants).unwrap();
        assert_eq!(summary.entries.len(), 4);
        assert!(summary.mean_miou("rnb").is_some());
        assert!(summary.mean_miou("no_ste").is_some());
        assert!(summary.mean_miou("zest").is_none());
        let csv = fs::read_to_string(out.join("summary.csv")).unwrap();
        assert!(csv.starts_with("scene,variant,final_miou\n"));
        assert_eq!(csv.lines().count(), 5);
        assert!(out.join("s1/rnb/metrics.csv").exists());
        assert!(out.join("s2/no_ste/report.json").exists());
    }

    #[test]
    fn gradcheck_scene_small_probe_run() {
        let r = gradcheck_scene(5, 40);
        assert!(r.num_compared > 0);
        assert!(
            r.max_rel_error <= 1e-3,
            "rel {} over {} coords ({} skipped)",
            r.max_rel_error,
            r.num_compared,
            r.num_skipped_nonsmooth
        );
    }
}
