use clap::{Parser, Subcommand};
use rnb::harness::{
    self, gradcheck_scene, load_scene, run_experiment, run_suite, sweep_csv, HarnessError,
};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "rnb",
    about = "Region-and-boundary attention guidance on a synthetic denoiser",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scene and emit metrics.csv / report.json
    Run {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// also dump per-step normalized attention maps as PGM
        #[arg(long)]
        dump_maps: bool,
        /// ablation flag (repeatable): fixed_threshold, no_ste, no_region,
        /// no_boundary, layout_guidance, zest
        #[arg(long)]
        ablate: Vec<String>,
    },
    /// Finite-difference check of the full guidance energy on a seeded scene
    Gradcheck {
        #[arg(long)]
        seed: u64,
        /// number of coordinate probes
        #[arg(long, default_value_t = 100)]
        probes: usize,
    },
    /// Run one scene across several values of a numeric config parameter
    Sweep {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        param: String,
        /// comma-separated list, e.g. 0.5,5,50
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
    },
    /// Run every scene in a directory under one or more variants
    Suite {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// comma-separated subset of rnb,no_ste,layout_guidance,zest
        #[arg(long, value_delimiter = ',', default_value = "rnb")]
        variants: Vec<String>,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, HarnessError> {
    match cli.command {
        Command::Run { scene, out, dump_maps, ablate } => {
            let scene = load_scene(&scene)?;
            let report = run_experiment(&scene, &out, dump_maps, &ablate)?;
            println!(
                "variant={} final_miou={} steps_to_iou_0.5={}",
                report.summary.variant,
                report.summary.final_miou,
                report
                    .summary
                    .steps_to_iou_0_5
                    .map_or_else(|| "never".to_string(), |s| s.to_string()),
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck { seed, probes } => {
            let r = gradcheck_scene(seed, probes);
            println!(
                "compared={} skipped_nonsmooth={} max_abs_error={:e} max_rel_error={:e}",
                r.num_compared, r.num_skipped_nonsmooth, r.max_abs_error, r.max_rel_error
            );
            if r.max_rel_error > 1e-3 {
                eprintln!("error: max relative error exceeds 1e-3");
                return Ok(ExitCode::from(3));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep { scene, param, values } => {
            if values.is_empty() {
                return Err(HarnessError::Validation("at least one sweep value required".into()));
            }
            let scene = load_scene(&scene)?;
            let table = harness::sweep(&scene, &param, &values)?;
            print!("{}", sweep_csv(&param, &table));
            Ok(ExitCode::SUCCESS)
        }
        Command::Suite { scenes, out, variants } => {
            let summary = run_suite(&scenes, &out, &variants)?;
            for v in &variants {
                if let Some(m) = summary.mean_miou(v) {
                    println!("variant={v} mean_final_miou={m}");
                }
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
