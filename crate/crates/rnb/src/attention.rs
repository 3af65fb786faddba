//! From query/key tensors to differentiable box masks: cross-attention,
//! multi-layer aggregation, dynamic thresholding, MBR box selection and the
//! two soft attention variants with their straight-through attachments.

use crate::autodiff::{DetachCtx, NodeId, Tape};
use crate::field::{
    masked_mean, minmax_normalize, rasterize_box, BinaryMask, FieldError, NormBox, ScalarField,
    NORM_EPS,
};

/// Per-layer token attention maps living on a tape. Each layer holds one
/// field node per token; at every spatial location the token channels sum
/// to 1.
pub struct AttentionStack {
    pub layers: Vec<AttentionLayer>,
}

pub struct AttentionLayer {
    pub height: usize,
    pub width: usize,
    /// One field node per token, all at this layer's resolution.
    pub channels: Vec<NodeId>,
}

impl AttentionStack {
    pub fn token_count(&self) -> usize {
        self.layers.first().map_or(0, |l| l.channels.len())
    }

    /// Largest per-location deviation of the token-channel sum from 1.
    pub fn max_token_sum_deviation(&self, tape: &Tape) -> f64 {
        let mut worst: f64 = 0.0;
        for layer in &self.layers {
            let mut sums = vec![0.0; layer.height * layer.width];
            for &ch in &layer.channels {
                for (s, v) in sums.iter_mut().zip(tape.field(ch).values()) {
                    *s += v;
                }
            }
            for s in sums {
                worst = worst.max((s - 1.0).abs());
            }
        }
        worst
    }
}

/// A grounded concept: token indices plus the target box.
#[derive(Debug, Clone)]
pub struct ConceptSpec {
    pub name: String,
    pub token_indices: Vec<usize>,
    pub bbox: NormBox,
}

/// All intermediate maps of one concept after the threshold/box pipeline.
pub struct ConceptMaps {
    pub m_agg: NodeId,
    pub m_norm: NodeId,
    pub m_shape: NodeId,
    pub m_appear: NodeId,
    pub tau: f64,
    pub fg_mask: BinaryMask,
    pub mbr: BinaryMask,
    pub b_shape: NodeId,
    pub b_appear: NodeId,
    pub gt_mask: BinaryMask,
}

/// Parameters consumed by [`build_concept_maps`].
#[derive(Debug, Clone)]
pub struct ConceptMapParams {
    pub lambda: f64,
    pub sharpness: f64,
    /// `Some(v)` replaces the dynamic threshold with the fixed value `v`.
    pub fixed_threshold: Option<f64>,
    /// When false the box masks fall back to the soft maps (no STE).
    pub use_ste: bool,
    pub agg_h: usize,
    pub agg_w: usize,
}

/// Softmax attention over the token axis. `query_channels` holds one field
/// node per feature dimension at the layer resolution; `keys` is the fixed
/// `N x d` key matrix. Returns one attention field node per token.
pub fn cross_attention(tape: &mut Tape, query_channels: &[NodeId], keys: &[Vec<f64>]) -> Vec<NodeId> {
    let d = query_channels.len();
    assert!(d >= 1);
    let scale = 1.0 / (d as f64).sqrt();
    let logits: Vec<NodeId> = keys
        .iter()
        .map(|k| {
            assert_eq!(k.len(), d, "key dimension mismatch");
            let terms: Vec<(NodeId, f64)> = query_channels
                .iter()
                .zip(k)
                .map(|(&q, &kc)| (q, kc * scale))
                .collect();
            tape.lin_comb(&terms)
        })
        .collect();
    tape.softmax_fields(&logits)
}

/// Layer-averaged, token-summed attention for one concept at the aggregation
/// resolution: sum the concept's token channels per layer, upsample, then
/// average over layers.
pub fn aggregate(
    tape: &mut Tape,
    stack: &AttentionStack,
    concept: &ConceptSpec,
    agg_h: usize,
    agg_w: usize,
) -> NodeId {
    let layer_count = stack.layers.len();
    assert!(layer_count >= 1);
    let per_layer: Vec<NodeId> = stack
        .layers
        .iter()
        .map(|layer| {
            assert!(agg_h >= layer.height && agg_w >= layer.width);
            let terms: Vec<(NodeId, f64)> = concept
                .token_indices
                .iter()
                .map(|&j| (layer.channels[j], 1.0))
                .collect();
            let summed = tape.lin_comb(&terms);
            if (layer.height, layer.width) == (agg_h, agg_w) {
                summed
            } else {
                tape.upsample(summed, agg_h, agg_w)
            }
        })
        .collect();
    let avg_terms: Vec<(NodeId, f64)> = per_layer
        .iter()
        .map(|&n| (n, 1.0 / layer_count as f64))
        .collect();
    tape.lin_comb(&avg_terms)
}

/// Threshold as the lambda-weighted mean of activations inside vs outside the
/// target box, and the resulting foreground mask (`>=` comparator, so the
/// maximum entry is always foreground).
pub fn dynamic_threshold(
    m_norm: &ScalarField,
    gt_mask: &BinaryMask,
    lambda: f64,
) -> (f64, BinaryMask) {
    assert!((0.0..=1.0).contains(&lambda));
    assert_eq!(m_norm.shape(), gt_mask.shape());
    let inside = masked_mean(m_norm, gt_mask);
    let outside = masked_mean(m_norm, &gt_mask.complement());
    // algebraically lambda*inside + (1-lambda)*outside, written so a uniform
    // map yields tau == v exactly
    let tau = outside + lambda * (inside - outside);
    (tau, threshold_mask(m_norm, tau))
}

fn threshold_mask(m_norm: &ScalarField, tau: f64) -> BinaryMask {
    BinaryMask::from_fn(m_norm.height(), m_norm.width(), |h, w| m_norm.get(h, w) >= tau)
}

/// Filled rectangle over the row/column extents of all foreground pixels.
pub fn minimum_bounding_rectangle(fg: &BinaryMask) -> Result<BinaryMask, FieldError> {
    let (mut min_h, mut max_h, mut min_w, mut max_w) = (usize::MAX, 0, usize::MAX, 0);
    for h in 0..fg.height() {
        for w in 0..fg.width() {
            if fg.get(h, w) {
                min_h = min_h.min(h);
                max_h = max_h.max(h);
                min_w = min_w.min(w);
                max_w = max_w.max(w);
            }
        }
    }
    if min_h == usize::MAX {
        return Err(FieldError::EmptyMask);
    }
    Ok(BinaryMask::from_fn(fg.height(), fg.width(), |h, w| {
        (min_h..=max_h).contains(&h) && (min_w..=max_w).contains(&w)
    }))
}

/// Min-max renormalization with detached extremes; a (near-)constant input
/// collapses to the all-zeros field.
pub fn normalize_detached(tape: &mut Tape, a: NodeId, ctx: &mut DetachCtx) -> NodeId {
    let v = tape.field(a);
    let (mn, mx) = (v.min(), v.max());
    let (h, w) = v.shape();
    if ctx.branch(mx - mn < NORM_EPS) {
        return tape.const_field(ScalarField::zeros(h, w));
    }
    let mn = ctx.detach_scalar(mn);
    let mx = ctx.detach_scalar(mx);
    let scale = 1.0 / (mx - mn);
    tape.affine(a, scale, -mn * scale)
}

/// Shape-aware soft mask: renormalized `sigmoid(s * (m_norm - tau))`.
pub fn shape_variant(
    tape: &mut Tape,
    m_norm: NodeId,
    tau: f64,
    sharpness: f64,
    ctx: &mut DetachCtx,
) -> NodeId {
    assert!(sharpness > 0.0);
    let shifted = tape.affine(m_norm, sharpness, -sharpness * tau);
    let sg = tape.sigmoid(shifted);
    normalize_detached(tape, sg, ctx)
}

/// Appearance-aware map: the min-max renormalization of the raw aggregated
/// map, kept as its own node for the appearance branch of the region loss.
pub fn appearance_variant(tape: &mut Tape, m_agg: NodeId, ctx: &mut DetachCtx) -> NodeId {
    normalize_detached(tape, m_agg, ctx)
}

/// Runs the whole per-concept chain: aggregate, normalize, threshold, MBR,
/// soft variants, straight-through attachment.
pub fn build_concept_maps(
    tape: &mut Tape,
    stack: &AttentionStack,
    concept: &ConceptSpec,
    params: &ConceptMapParams,
    ctx: &mut DetachCtx,
) -> Result<ConceptMaps, FieldError> {
    let gt_mask = rasterize_box(&concept.bbox, params.agg_h, params.agg_w)?;
    let m_agg = aggregate(tape, stack, concept, params.agg_h, params.agg_w);
    let m_norm = normalize_detached(tape, m_agg, ctx);

    let tau = match params.fixed_threshold {
        Some(v) => ctx.detach_scalar(v),
        None => {
            let (fresh, _) = dynamic_threshold(tape.field(m_norm), &gt_mask, params.lambda);
            ctx.detach_scalar(fresh)
        }
    };
    let fg_mask = ctx.hard_mask(threshold_mask(tape.field(m_norm), tau));
    let mbr = minimum_bounding_rectangle(&fg_mask)?;

    let m_shape = shape_variant(tape, m_norm, tau, params.sharpness, ctx);
    let m_appear = appearance_variant(tape, m_agg, ctx);

    let (b_shape, b_appear) = if params.use_ste {
        (
            tape.ste_attach(&mbr, m_shape, ctx),
            tape.ste_attach(&mbr, m_appear, ctx),
        )
    } else {
        (m_shape, m_appear)
    };

    Ok(ConceptMaps {
        m_agg,
        m_norm,
        m_shape,
        m_appear,
        tau,
        fg_mask,
        mbr,
        b_shape,
        b_appear,
        gt_mask,
    })
}

/// Convenience forward-only normalization (used by tests and the harness).
pub fn normalize_values(f: &ScalarField) -> ScalarField {
    minmax_normalize(f)
}
