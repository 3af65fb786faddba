//! The guidance energies: IoU, the region-aware and boundary-aware losses,
//! their total, the two formula-specified baselines, and the closed-form
//! region gradient used as a test oracle.

use crate::attention::ConceptMaps;
use crate::autodiff::{DetachCtx, NodeId, Tape};
use crate::field::{BinaryMask, ScalarField, SOBEL_EPS};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EnergyError {
    #[error("IoU of two empty masks is undefined")]
    ZeroUnion,
}

/// Per-concept loss terms and the reconciled total.
#[derive(Debug, Clone)]
pub struct ConceptLossTerms {
    pub iou: f64,
    pub region: f64,
    pub boundary: f64,
}

#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub per_concept: Vec<ConceptLossTerms>,
    pub total: f64,
}

/// Intersection over union with the union written as
/// `|pred| + |(1 - pred) * gt|`.
pub fn box_iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64, EnergyError> {
    assert_eq!(pred.shape(), gt.shape());
    let intersection = pred.intersect(gt).count();
    let union = pred.count() + pred.complement().intersect(gt).count();
    if union == 0 {
        return Err(EnergyError::ZeroUnion);
    }
    Ok(intersection as f64 / union as f64)
}

/// Guard threshold for a "structureless" edge map: the smoothed Sobel
/// magnitude of a constant field sits at `sqrt(SOBEL_EPS)` per pixel, so the
/// tolerance is that floor plus a small absolute slack.
fn edge_energy_floor(pixels: usize) -> f64 {
    pixels as f64 * SOBEL_EPS.sqrt() + 1e-8
}

/// Region-aware loss of one concept. `(1 - IoU)` is a detached scale; the
/// forward fractions run through the STE masks, so they evaluate on the hard
/// MBR numerics while the backward reaches the soft maps.
pub fn region_loss(
    tape: &mut Tape,
    cm: &ConceptMaps,
    lambda_s: f64,
    lambda_a: f64,
    ctx: &mut DetachCtx,
) -> NodeId {
    let c = 1.0 - box_iou(&cm.mbr, &cm.gt_mask).expect("mbr is never empty");
    let gt = cm.gt_mask.to_field();
    let mut terms: Vec<(NodeId, f64)> = Vec::new();
    let mut bias = 0.0;
    for (branch, lam) in [(cm.b_shape, lambda_s), (cm.b_appear, lambda_a)] {
        let denom_val = tape.field(branch).sum();
        if ctx.branch(denom_val.abs() < 1e-12) {
            // soft map collapsed (no_ste + degenerate): fraction defined as 0
            bias += c * lam;
            continue;
        }
        let num = tape.dot_const(branch, gt.clone());
        let den = tape.sum(branch);
        let frac = tape.div_ss(num, den);
        terms.push((frac, -c * lam));
        bias += c * lam;
    }
    tape.scalar_lin(&terms, bias)
}

/// Analytic gradient of the appearance branch of the region loss with respect
/// to the appearance map: `-c * (gt / m - n / m^2)` with `m = |MBR|`,
/// `n = |MBR ∩ GT|`, `c = lambda_a * (1 - IoU)`.
pub fn closed_form_region_grad(cm: &ConceptMaps, lambda_a: f64) -> ScalarField {
    let c = lambda_a * (1.0 - box_iou(&cm.mbr, &cm.gt_mask).expect("mbr is never empty"));
    let m = cm.mbr.count() as f64;
    let n = cm.mbr.intersect(&cm.gt_mask).count() as f64;
    ScalarField::from_fn(cm.mbr.height(), cm.mbr.width(), |h, w| {
        let gt = if cm.gt_mask.get(h, w) { 1.0 } else { 0.0 };
        -c * (gt / m - n / (m * m))
    })
}

/// Boundary-aware loss of one concept: the Sobel edge energy of the raw
/// aggregated map falling outside the target box, scaled by the detached
/// `(1 - IoU)`. A structureless map takes the maximal penalty.
pub fn boundary_loss(tape: &mut Tape, cm: &ConceptMaps, ctx: &mut DetachCtx) -> NodeId {
    let c = 1.0 - box_iou(&cm.mbr, &cm.gt_mask).expect("mbr is never empty");
    let edges = tape.sobel_magnitude(cm.m_agg);
    let total_val = tape.field(edges).sum();
    let pixels = tape.field(edges).len();
    if ctx.branch(total_val <= edge_energy_floor(pixels)) {
        return tape.const_scalar(c);
    }
    let inside = tape.dot_const(edges, cm.gt_mask.to_field());
    let total = tape.sum(edges);
    let frac = tape.div_ss(inside, total);
    tape.scalar_lin(&[(frac, -c)], c)
}

/// Knobs of the total guidance energy.
#[derive(Debug, Clone, Copy)]
pub struct EnergyParams {
    pub lambda_s: f64,
    pub lambda_a: f64,
    pub use_region: bool,
    pub use_boundary: bool,
}

/// `g = sum_i (L_r^i + L_b^i)` in concept order, plus the per-concept
/// breakdown with a reconciling total.
pub fn total_energy(
    tape: &mut Tape,
    cms: &[ConceptMaps],
    params: &EnergyParams,
    ctx: &mut DetachCtx,
) -> (NodeId, LossBreakdown) {
    assert!(!cms.is_empty());
    let mut terms: Vec<(NodeId, f64)> = Vec::new();
    let mut per_concept = Vec::with_capacity(cms.len());
    for cm in cms {
        let iou = box_iou(&cm.mbr, &cm.gt_mask).expect("mbr is never empty");
        let l_r = if params.use_region {
            region_loss(tape, cm, params.lambda_s, params.lambda_a, ctx)
        } else {
            tape.const_scalar(0.0)
        };
        let l_b = if params.use_boundary {
            boundary_loss(tape, cm, ctx)
        } else {
            tape.const_scalar(0.0)
        };
        per_concept.push(ConceptLossTerms {
            iou,
            region: tape.scalar(l_r),
            boundary: tape.scalar(l_b),
        });
        terms.push((l_r, 1.0));
        terms.push((l_b, 1.0));
    }
    let g = tape.scalar_lin(&terms, 0.0);
    let breakdown = LossBreakdown { per_concept, total: tape.scalar(g) };
    (g, breakdown)
}

/// The Layout-guidance baseline energy: squared out-of-box attention ratio
/// per token and layer, averaged over a concept's tokens and layers, summed
/// over concepts. Operates on the raw per-layer attention, with the box
/// rasterized at each layer's resolution.
pub fn layout_guidance_energy(
    tape: &mut Tape,
    stack: &crate::attention::AttentionStack,
    concepts: &[crate::attention::ConceptSpec],
) -> Result<NodeId, crate::field::FieldError> {
    let mut terms: Vec<(NodeId, f64)> = Vec::new();
    for concept in concepts {
        let layer_count = stack.layers.len();
        let token_count = concept.token_indices.len();
        let weight = 1.0 / (layer_count * token_count) as f64;
        for layer in &stack.layers {
            let box_mask =
                crate::field::rasterize_box(&concept.bbox, layer.height, layer.width)?;
            let box_field = box_mask.to_field();
            for &j in &concept.token_indices {
                let channel = layer.channels[j];
                let inside = tape.dot_const(channel, box_field.clone());
                let total = tape.sum(channel);
                let ratio = tape.div_ss(inside, total);
                let deficit = tape.scalar_lin(&[(ratio, -1.0)], 1.0);
                let squared = tape.mul_ss(deficit, deficit);
                terms.push((squared, weight));
            }
        }
    }
    Ok(tape.scalar_lin(&terms, 0.0))
}

/// The Zest baseline: per-concept BCE of the normalized map against the box
/// mask, plus the BCE of the max-rescaled map.
pub fn zest_energy(tape: &mut Tape, cms: &[ConceptMaps], ctx: &mut DetachCtx) -> NodeId {
    let mut terms: Vec<(NodeId, f64)> = Vec::new();
    for cm in cms {
        let target = cm.gt_mask.to_field();
        let first = tape.bce_mean(cm.m_norm, target.clone());
        terms.push((first, 1.0));
        let mx = tape.field(cm.m_norm).max();
        let rescaled = if ctx.branch(mx.abs() < 1e-12) {
            cm.m_norm
        } else {
            let inv = 1.0 / ctx.detach_scalar(mx);
            tape.affine(cm.m_norm, inv, 0.0)
        };
        let second = tape.bce_mean(rescaled, target);
        terms.push((second, 1.0));
    }
    tape.scalar_lin(&terms, 0.0)
}
