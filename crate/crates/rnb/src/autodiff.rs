//! A minimal reverse-mode tape over scalar fields and scalars.
//!
//! The op set is exactly what the guidance energy graph needs (softmax pieces,
//! resampling, Sobel magnitude, straight-through attachment, reductions) so
//! every adjoint stays hand-verifiable. Data-dependent constants that the
//! energy treats as detached (thresholds, normalization extremes, IoU scales,
//! STE residuals) are routed through a [`DetachCtx`], which can record them at
//! a base point and replay them during finite-difference probes. Under replay
//! the evaluated function is the smooth surrogate whose gradient the tape
//! actually computes, which is what makes `gradcheck` meaningful for a graph
//! containing stopgrad.

use crate::field::{
    apply_taps_adjoint, avg_pool2, avg_pool2_adjoint, bilinear_taps, conv3_replicate_adjoint,
    sobel_parts, BinaryMask, ScalarField,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::rc::Rc;
use thiserror::Error;

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

/// Prediction clamp for the BCE reduction.
pub const BCE_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("backward requires a scalar loss node")]
    NonScalarLoss,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
pub enum Value {
    Field(ScalarField),
    Scalar(f64),
}

impl Value {
    pub fn as_field(&self) -> &ScalarField {
        match self {
            Value::Field(f) => f,
            Value::Scalar(_) => panic!("expected field value"),
        }
    }

    pub fn as_scalar(&self) -> f64 {
        match self {
            Value::Scalar(s) => *s,
            Value::Field(_) => panic!("expected scalar value"),
        }
    }
}

enum Op {
    LeafField,
    ConstField,
    ConstScalar,
    /// Weighted sum of field parents (all same shape).
    LinComb(Vec<(NodeId, f64)>),
    MulFF(NodeId, NodeId),
    DivFF(NodeId, NodeId),
    ExpF(NodeId),
    SigmoidF(NodeId),
    AvgPool2(NodeId),
    Upsample {
        a: NodeId,
        taps: Rc<Vec<Vec<(usize, f64)>>>,
        in_h: usize,
        in_w: usize,
    },
    SobelMag {
        a: NodeId,
        gx: ScalarField,
        gy: ScalarField,
    },
    /// Forward takes the hard mask (or, under replay, soft + frozen residual);
    /// backward is the identity into the soft parent.
    Ste(NodeId),
    SumF(NodeId),
    /// `sum(a * w)` with a constant weight field.
    DotConst(NodeId, ScalarField),
    /// Per-pixel mean binary cross-entropy against a constant target.
    BceMean(NodeId, ScalarField),
    /// Affine combination of scalar parents.
    ScalarLin(Vec<(NodeId, f64)>),
    MulSS(NodeId, NodeId),
    DivSS(NodeId, NodeId),
}

struct Node {
    value: Value,
    op: Op,
}

/// One reverse-mode computation graph. Nodes are appended in topological
/// order; backward walks them once in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Value, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Value {
        &self.nodes[id.0].value
    }

    pub fn field(&self, id: NodeId) -> &ScalarField {
        self.nodes[id.0].value.as_field()
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.as_scalar()
    }

    pub fn leaf(&mut self, f: ScalarField) -> NodeId {
        self.push(Value::Field(f), Op::LeafField)
    }

    pub fn const_field(&mut self, f: ScalarField) -> NodeId {
        self.push(Value::Field(f), Op::ConstField)
    }

    pub fn const_scalar(&mut self, s: f64) -> NodeId {
        self.push(Value::Scalar(s), Op::ConstScalar)
    }

    /// Forward value identical to `x`, zero gradient contribution.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        match self.value(x).clone() {
            Value::Field(f) => self.const_field(f),
            Value::Scalar(s) => self.const_scalar(s),
        }
    }

    /// Weighted sum of field nodes, all of equal shape.
    pub fn lin_comb(&mut self, terms: &[(NodeId, f64)]) -> NodeId {
        assert!(!terms.is_empty());
        let shape = self.field(terms[0].0).shape();
        let mut out = ScalarField::zeros(shape.0, shape.1);
        for &(id, c) in terms {
            let f = self.field(id);
            assert_eq!(f.shape(), shape);
            for (o, v) in out.values_mut().iter_mut().zip(f.values()) {
                *o += c * v;
            }
        }
        self.push(Value::Field(out), Op::LinComb(terms.to_vec()))
    }

    /// `a * scale + offset`, with detached scalar coefficients.
    pub fn affine(&mut self, a: NodeId, scale: f64, offset: f64) -> NodeId {
        if offset == 0.0 {
            return self.lin_comb(&[(a, scale)]);
        }
        let (h, w) = self.field(a).shape();
        let off = self.const_field(ScalarField::constant(h, w, offset));
        self.lin_comb(&[(a, scale), (off, 1.0)])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.field(a).zip(self.field(b), |x, y| x * y);
        self.push(Value::Field(v), Op::MulFF(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.field(a).zip(self.field(b), |x, y| x / y);
        self.push(Value::Field(v), Op::DivFF(a, b))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.field(a).map(f64::exp);
        self.push(Value::Field(v), Op::ExpF(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.field(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(Value::Field(v), Op::SigmoidF(a))
    }

    pub fn avg_pool2(&mut self, a: NodeId) -> NodeId {
        let v = avg_pool2(self.field(a)).expect("even dimensions");
        self.push(Value::Field(v), Op::AvgPool2(a))
    }

    pub fn upsample(&mut self, a: NodeId, out_h: usize, out_w: usize) -> NodeId {
        let (in_h, in_w) = self.field(a).shape();
        let taps = Rc::new(bilinear_taps(in_h, in_w, out_h, out_w));
        let v = crate::field::apply_taps(&taps, self.field(a).values(), out_h, out_w);
        self.push(Value::Field(v), Op::Upsample { a, taps, in_h, in_w })
    }

    pub fn sobel_magnitude(&mut self, a: NodeId) -> NodeId {
        let parts = sobel_parts(self.field(a)).expect("field at least 3x3");
        self.push(
            Value::Field(parts.magnitude),
            Op::SobelMag { a, gx: parts.gx, gy: parts.gy },
        )
    }

    /// Straight-through attachment: forward equals `hard` exactly, backward
    /// passes the incoming gradient unchanged into `soft`. Under replay the
    /// forward becomes `soft + residual` with the residual frozen at the
    /// recording point, which is the smooth surrogate of the same gradient.
    pub fn ste_attach(&mut self, hard: &BinaryMask, soft: NodeId, ctx: &mut DetachCtx) -> NodeId {
        let soft_val = self.field(soft).clone();
        assert_eq!(hard.shape(), soft_val.shape(), "ste shape mismatch");
        let hard_f = hard.to_field();
        let value = match ctx.ste_residual(&hard_f, &soft_val) {
            None => hard_f,
            Some(residual) => soft_val.add(&residual),
        };
        self.push(Value::Field(value), Op::Ste(soft))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.field(a).sum();
        self.push(Value::Scalar(s), Op::SumF(a))
    }

    /// `sum(a * w)` for a constant weight field (typically a mask).
    pub fn dot_const(&mut self, a: NodeId, w: ScalarField) -> NodeId {
        assert_eq!(self.field(a).shape(), w.shape());
        let s = self.field(a).dot(&w);
        self.push(Value::Scalar(s), Op::DotConst(a, w))
    }

    /// Per-pixel mean BCE of `pred` against a constant `{0,1}` target, with
    /// predictions clamped to `[BCE_EPS, 1 - BCE_EPS]`.
    pub fn bce_mean(&mut self, pred: NodeId, target: ScalarField) -> NodeId {
        let p = self.field(pred);
        assert_eq!(p.shape(), target.shape());
        let n = p.len() as f64;
        let s: f64 = p
            .values()
            .iter()
            .zip(target.values())
            .map(|(&p, &t)| {
                let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum();
        self.push(Value::Scalar(s / n), Op::BceMean(pred, target))
    }

    /// Affine combination of scalar nodes.
    pub fn scalar_lin(&mut self, terms: &[(NodeId, f64)], bias: f64) -> NodeId {
        let s: f64 = terms.iter().map(|&(id, c)| c * self.scalar(id)).sum::<f64>() + bias;
        self.push(Value::Scalar(s), Op::ScalarLin(terms.to_vec()))
    }

    pub fn mul_ss(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let s = self.scalar(a) * self.scalar(b);
        self.push(Value::Scalar(s), Op::MulSS(a, b))
    }

    pub fn div_ss(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let s = self.scalar(a) / self.scalar(b);
        self.push(Value::Scalar(s), Op::DivSS(a, b))
    }

    /// Numerically stable softmax across a list of equally-shaped logit
    /// fields (the token axis). The per-location shift is a detached constant
    /// so the gradient is exact.
    pub fn softmax_fields(&mut self, logits: &[NodeId]) -> Vec<NodeId> {
        assert!(!logits.is_empty());
        let (h, w) = self.field(logits[0]).shape();
        let mut shift = ScalarField::constant(h, w, f64::NEG_INFINITY);
        for &l in logits {
            let f = self.field(l);
            for (m, &v) in shift.values_mut().iter_mut().zip(f.values()) {
                *m = m.max(v);
            }
        }
        let neg_shift = self.const_field(shift.scale(-1.0));
        let exps: Vec<NodeId> = logits
            .iter()
            .map(|&l| {
                let shifted = self.lin_comb(&[(l, 1.0), (neg_shift, 1.0)]);
                self.exp(shifted)
            })
            .collect();
        let denom_terms: Vec<(NodeId, f64)> = exps.iter().map(|&e| (e, 1.0)).collect();
        let denom = self.lin_comb(&denom_terms);
        exps.into_iter().map(|e| self.div(e, denom)).collect()
    }

    /// Reverse accumulation from a scalar loss. Nodes are visited in reverse
    /// creation order, which is a fixed topological order of the graph.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, TapeError> {
        if !matches!(self.value(loss), Value::Scalar(_)) {
            return Err(TapeError::NonScalarLoss);
        }
        let mut grads: Vec<Option<Value>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Value::Scalar(1.0));
        for i in (0..self.nodes.len()).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &Value, grads: &mut [Option<Value>]) {
        let add_field = |grads: &mut [Option<Value>], id: NodeId, delta: ScalarField| {
            match &mut grads[id.0] {
                Some(Value::Field(acc)) => {
                    for (a, d) in acc.values_mut().iter_mut().zip(delta.values()) {
                        *a += d;
                    }
                }
                Some(Value::Scalar(_)) => unreachable!("field/scalar gradient mix"),
                slot @ None => *slot = Some(Value::Field(delta)),
            }
        };
        let add_scalar = |grads: &mut [Option<Value>], id: NodeId, delta: f64| {
            match &mut grads[id.0] {
                Some(Value::Scalar(acc)) => *acc += delta,
                Some(Value::Field(_)) => unreachable!("field/scalar gradient mix"),
                slot @ None => *slot = Some(Value::Scalar(delta)),
            }
        };
        match &self.nodes[i].op {
            Op::LeafField | Op::ConstField | Op::ConstScalar => {}
            Op::LinComb(terms) => {
                let g = g.as_field();
                for &(id, c) in terms {
                    add_field(grads, id, g.scale(c));
                }
            }
            Op::MulFF(a, b) => {
                let g = g.as_field();
                add_field(grads, *a, g.zip(self.field(*b), |g, b| g * b));
                add_field(grads, *b, g.zip(self.field(*a), |g, a| g * a));
            }
            Op::DivFF(a, b) => {
                let g = g.as_field();
                let bv = self.field(*b);
                let av = self.field(*a);
                add_field(grads, *a, g.zip(bv, |g, b| g / b));
                let gb = ScalarField::from_fn(bv.height(), bv.width(), |h, w| {
                    -g.get(h, w) * av.get(h, w) / (bv.get(h, w) * bv.get(h, w))
                });
                add_field(grads, *b, gb);
            }
            Op::ExpF(a) => {
                let out = self.nodes[i].value.as_field();
                add_field(grads, *a, g.as_field().zip(out, |g, e| g * e));
            }
            Op::SigmoidF(a) => {
                let out = self.nodes[i].value.as_field();
                add_field(grads, *a, g.as_field().zip(out, |g, s| g * s * (1.0 - s)));
            }
            Op::AvgPool2(a) => {
                add_field(grads, *a, avg_pool2_adjoint(g.as_field()));
            }
            Op::Upsample { a, taps, in_h, in_w } => {
                add_field(grads, *a, apply_taps_adjoint(taps, g.as_field(), *in_h, *in_w));
            }
            Op::SobelMag { a, gx, gy } => {
                let g = g.as_field();
                let mag = self.nodes[i].value.as_field();
                let wx = ScalarField::from_fn(g.height(), g.width(), |h, w| {
                    g.get(h, w) * gx.get(h, w) / mag.get(h, w)
                });
                let wy = ScalarField::from_fn(g.height(), g.width(), |h, w| {
                    g.get(h, w) * gy.get(h, w) / mag.get(h, w)
                });
                let delta = conv3_replicate_adjoint(&wx, &SOBEL_X)
                    .add(&conv3_replicate_adjoint(&wy, &SOBEL_Y));
                add_field(grads, *a, delta);
            }
            Op::Ste(soft) => {
                add_field(grads, *soft, g.as_field().clone());
            }
            Op::SumF(a) => {
                let gs = g.as_scalar();
                let (h, w) = self.field(*a).shape();
                add_field(grads, *a, ScalarField::constant(h, w, gs));
            }
            Op::DotConst(a, w) => {
                add_field(grads, *a, w.scale(g.as_scalar()));
            }
            Op::BceMean(pred, target) => {
                let gs = g.as_scalar();
                let p = self.field(*pred);
                let n = p.len() as f64;
                let delta = ScalarField::from_fn(p.height(), p.width(), |h, w| {
                    let pv = p.get(h, w);
                    if !(BCE_EPS..=1.0 - BCE_EPS).contains(&pv) {
                        return 0.0; // clamped: constant region
                    }
                    let t = target.get(h, w);
                    gs * (-t / pv + (1.0 - t) / (1.0 - pv)) / n
                });
                add_field(grads, *pred, delta);
            }
            Op::ScalarLin(terms) => {
                let gs = g.as_scalar();
                for &(id, c) in terms {
                    add_scalar(grads, id, c * gs);
                }
            }
            Op::MulSS(a, b) => {
                let gs = g.as_scalar();
                add_scalar(grads, *a, gs * self.scalar(*b));
                add_scalar(grads, *b, gs * self.scalar(*a));
            }
            Op::DivSS(a, b) => {
                let gs = g.as_scalar();
                let (av, bv) = (self.scalar(*a), self.scalar(*b));
                add_scalar(grads, *a, gs / bv);
                add_scalar(grads, *b, -gs * av / (bv * bv));
            }
        }
    }
}

/// Result of a backward pass: one accumulator per node, populated for every
/// node the loss depends on.
pub struct Gradients {
    grads: Vec<Option<Value>>,
}

impl Gradients {
    /// Gradient of the loss with respect to a field node; zero if the loss
    /// does not depend on it.
    pub fn field(&self, tape: &Tape, id: NodeId) -> ScalarField {
        match &self.grads[id.0] {
            Some(Value::Field(f)) => f.clone(),
            Some(Value::Scalar(_)) => panic!("scalar gradient for field node"),
            None => {
                let (h, w) = tape.field(id).shape();
                ScalarField::zeros(h, w)
            }
        }
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        match &self.grads[id.0] {
            Some(Value::Scalar(s)) => *s,
            Some(Value::Field(_)) => panic!("field gradient for scalar node"),
            None => 0.0,
        }
    }
}

// ---------------------------------------------------------------------------
// Detach context
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
enum Rec {
    Scalar(f64),
    Mask(BinaryMask),
    Residual(ScalarField),
    Branch(bool),
}

enum CtxMode {
    Record,
    Replay { pos: usize },
}

/// Records the values of every detached quantity along one construction of
/// the energy graph, and can replay them so a re-evaluation at a perturbed
/// input computes the frozen smooth surrogate. Structural mismatches between
/// the fresh and recorded discrete decisions (mask flips, branch changes) are
/// flagged as crossings.
pub struct DetachCtx {
    mode: CtxMode,
    log: Vec<Rec>,
    crossed: bool,
    /// Relative drift in a replayed detached scalar above which the probe is
    /// treated as having crossed a decision surface.
    smooth_margin: f64,
}

impl DetachCtx {
    pub fn record() -> Self {
        Self { mode: CtxMode::Record, log: Vec::new(), crossed: false, smooth_margin: f64::INFINITY }
    }

    /// Replay of a previously recorded log; `smooth_margin` bounds acceptable
    /// drift of detached scalars between the fresh and recorded evaluation.
    pub fn replay(&self, smooth_margin: f64) -> Self {
        assert!(matches!(self.mode, CtxMode::Record));
        Self {
            mode: CtxMode::Replay { pos: 0 },
            log: self.log.clone(),
            crossed: false,
            smooth_margin,
        }
    }

    pub fn crossed(&self) -> bool {
        self.crossed
    }

    fn next(&mut self) -> Rec {
        match &mut self.mode {
            CtxMode::Record => unreachable!(),
            CtxMode::Replay { pos } => {
                let r = self.log[*pos].clone();
                *pos += 1;
                r
            }
        }
    }

    /// A data-dependent scalar the graph treats as a constant.
    pub fn detach_scalar(&mut self, fresh: f64) -> f64 {
        match self.mode {
            CtxMode::Record => {
                self.log.push(Rec::Scalar(fresh));
                fresh
            }
            CtxMode::Replay { .. } => match self.next() {
                Rec::Scalar(recorded) => {
                    if (fresh - recorded).abs() > self.smooth_margin * (1.0 + recorded.abs()) {
                        self.crossed = true;
                    }
                    recorded
                }
                other => panic!("detach log out of sync: expected scalar, got {other:?}"),
            },
        }
    }

    /// A hard mask decision (thresholded foreground, MBR). Replay returns the
    /// recorded mask and flags a crossing when the fresh one differs.
    pub fn hard_mask(&mut self, fresh: BinaryMask) -> BinaryMask {
        match self.mode {
            CtxMode::Record => {
                self.log.push(Rec::Mask(fresh.clone()));
                fresh
            }
            CtxMode::Replay { .. } => match self.next() {
                Rec::Mask(recorded) => {
                    if fresh != recorded {
                        self.crossed = true;
                    }
                    recorded
                }
                other => panic!("detach log out of sync: expected mask, got {other:?}"),
            },
        }
    }

    /// A structural branch decision (e.g. the degenerate-constant fallback).
    pub fn branch(&mut self, fresh: bool) -> bool {
        match self.mode {
            CtxMode::Record => {
                self.log.push(Rec::Branch(fresh));
                fresh
            }
            CtxMode::Replay { .. } => match self.next() {
                Rec::Branch(recorded) => {
                    if fresh != recorded {
                        self.crossed = true;
                    }
                    recorded
                }
                other => panic!("detach log out of sync: expected branch, got {other:?}"),
            },
        }
    }

    /// STE residual: `None` in record mode (forward takes the hard mask
    /// exactly), `Some(frozen residual)` under replay.
    fn ste_residual(&mut self, hard: &ScalarField, soft: &ScalarField) -> Option<ScalarField> {
        match self.mode {
            CtxMode::Record => {
                self.log.push(Rec::Residual(hard.zip(soft, |h, s| h - s)));
                None
            }
            CtxMode::Replay { .. } => match self.next() {
                Rec::Residual(r) => Some(r),
                other => panic!("detach log out of sync: expected residual, got {other:?}"),
            },
        }
    }
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    pub num_compared: usize,
    pub num_skipped_nonsmooth: usize,
}

/// Compares the analytic gradient of a loss graph against central finite
/// differences at deterministically sampled leaf coordinates.
///
/// `build` constructs the loss from leaf node ids; it is re-invoked for every
/// probe with a replaying [`DetachCtx`], so detached quantities stay frozen
/// at their base values. Probes whose perturbation flips a recorded discrete
/// decision are counted as `num_skipped_nonsmooth` rather than compared.
pub fn gradcheck<F>(
    build: F,
    leaves: &[ScalarField],
    probe_count: usize,
    h: f64,
    smooth_margin: f64,
    seed: u64,
) -> GradCheckReport
where
    F: Fn(&mut Tape, &[NodeId], &mut DetachCtx) -> NodeId,
{
    assert!(h > 0.0);
    let mut base_ctx = DetachCtx::record();
    let mut base_tape = Tape::new();
    let leaf_ids: Vec<NodeId> = leaves.iter().map(|f| base_tape.leaf(f.clone())).collect();
    let loss = build(&mut base_tape, &leaf_ids, &mut base_ctx);
    let grads = base_tape.backward(loss).expect("scalar loss");
    let analytic: Vec<ScalarField> = leaf_ids.iter().map(|&id| grads.field(&base_tape, id)).collect();

    let eval = |perturbed: &[ScalarField]| -> (f64, bool) {
        let mut ctx = base_ctx.replay(smooth_margin);
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = perturbed.iter().map(|f| tape.leaf(f.clone())).collect();
        let loss = build(&mut tape, &ids, &mut ctx);
        (tape.scalar(loss), ctx.crossed())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport::default();
    for _ in 0..probe_count {
        let li = rng.gen_range(0..leaves.len());
        let ci = rng.gen_range(0..leaves[li].len());

        let mut plus = leaves.to_vec();
        plus[li].values_mut()[ci] += h;
        let (fp, crossed_p) = eval(&plus);
        let mut minus = leaves.to_vec();
        minus[li].values_mut()[ci] -= h;
        let (fm, crossed_m) = eval(&minus);

        if crossed_p || crossed_m {
            report.num_skipped_nonsmooth += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * h);
        let exact = analytic[li].values()[ci];
        let abs = (numeric - exact).abs();
        let rel = abs / exact.abs().max(numeric.abs()).max(1e-8);
        report.max_abs_error = report.max_abs_error.max(abs);
        report.max_rel_error = report.max_rel_error.max(rel);
        report.num_compared += 1;
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn field(h: usize, w: usize, seed: u64) -> ScalarField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ScalarField::from_fn(h, w, |_, _| rand::Rng::gen_range(&mut rng, -1.0..1.0))
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(field(3, 3, 1));
        let d = t.detach(x);
        let loss = t.sum(d);
        let g = t.backward(loss).unwrap();
        assert!(g.field(&t, x).values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn detach_plus_identity_gives_ones() {
        let mut t = Tape::new();
        let x = t.leaf(field(3, 3, 2));
        let d = t.detach(x);
        let s = t.lin_comb(&[(d, 1.0), (x, 1.0)]);
        let loss = t.sum(s);
        let g = t.backward(loss).unwrap();
        assert!(g.field(&t, x).values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn detach_is_idempotent() {
        let mut t = Tape::new();
        let x = t.leaf(field(2, 2, 3));
        let d1 = t.detach(x);
        let d2 = t.detach(d1);
        assert_eq!(t.field(d1), t.field(d2));
        let loss = t.sum(d2);
        let g = t.backward(loss).unwrap();
        assert!(g.field(&t, x).values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ste_forward_is_hard_backward_is_identity() {
        let mut ctx = DetachCtx::record();
        let mut t = Tape::new();
        let soft = t.leaf(field(3, 3, 4).map(|v| 0.5 + 0.4 * v));
        let hard = BinaryMask::from_fn(3, 3, |h, w| (h + w) % 2 == 0);
        let b = t.ste_attach(&hard, soft, &mut ctx);
        assert_eq!(t.field(b), &hard.to_field());
        let loss = t.sum(b);
        let g = t.backward(loss).unwrap();
        assert!(g.field(&t, soft).values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn ste_gradient_matches_symbolic_substitution() {
        // loss = sum(w * ste(hard, m)); gradient wrt m must equal the gradient
        // of sum(w * m), i.e. w, regardless of the hard values.
        let w = field(3, 3, 5);
        let mut ctx = DetachCtx::record();
        let mut t = Tape::new();
        let m = t.leaf(field(3, 3, 6));
        let hard = BinaryMask::from_fn(3, 3, |h, _| h == 1);
        let b = t.ste_attach(&hard, m, &mut ctx);
        let loss = t.dot_const(b, w.clone());
        let g = t.backward(loss).unwrap();
        for (got, want) in g.field(&t, m).values().iter().zip(w.values()) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut t = Tape::new();
        let x = t.leaf(field(4, 4, 7));
        let loss = t.sum(x);
        let g = t.backward(loss).unwrap();
        assert!(g.field(&t, x).values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn backward_softmax_total_mass_is_constant() {
        // summing all softmax outputs yields 1 everywhere, so the gradient of
        // the total must vanish
        let mut t = Tape::new();
        let a = t.leaf(field(2, 3, 8));
        let b = t.leaf(field(2, 3, 9));
        let c = t.leaf(field(2, 3, 10));
        let probs = t.softmax_fields(&[a, b, c]);
        let total_terms: Vec<(NodeId, f64)> = probs.iter().map(|&p| (p, 1.0)).collect();
        let total = t.lin_comb(&total_terms);
        let loss = t.sum(total);
        let g = t.backward(loss).unwrap();
        for leaf in [a, b, c] {
            for &v in g.field(&t, leaf).values() {
                assert!(v.abs() < 1e-12, "softmax mass gradient leak: {v}");
            }
        }
    }

    #[test]
    fn backward_rejects_field_loss() {
        let mut t = Tape::new();
        let x = t.leaf(field(2, 2, 11));
        assert!(matches!(t.backward(x), Err(TapeError::NonScalarLoss)));
    }

    #[test]
    fn gradcheck_constant_loss_is_zero() {
        let report = gradcheck(
            |t, _ids, _ctx| t.const_scalar(3.25),
            &[field(3, 3, 12)],
            16,
            1e-4,
            1e-2,
            0,
        );
        assert_eq!(report.num_compared, 16);
        assert_eq!(report.max_abs_error, 0.0);
    }

    #[test]
    fn gradcheck_report_counts_reconcile() {
        let report = gradcheck(
            |t, ids, _ctx| {
                let sg = t.sigmoid(ids[0]);
                let e = t.sum(sg);
                let s2 = t.sum(ids[1]);
                let prod = t.mul_ss(e, s2);
                t.scalar_lin(&[(prod, 0.5), (e, 1.0)], 0.25)
            },
            &[field(4, 4, 15), field(4, 4, 16)],
            40,
            1e-4,
            1e-2,
            1,
        );
        assert_eq!(report.num_compared + report.num_skipped_nonsmooth, 40);
        assert!(report.max_rel_error <= 1e-5, "rel err {}", report.max_rel_error);
    }

    #[test]
    fn gradcheck_smooth_pipeline_tight() {
        let report = gradcheck(
            |t, ids, _ctx| {
                let probs = t.softmax_fields(ids);
                let up = t.upsample(probs[0], 8, 10);
                let e = t.sobel_magnitude(up);
                let pooled = t.avg_pool2(e);
                let s = t.sum(pooled);
                let d = t.sum(probs[1]);
                t.div_ss(s, d)
            },
            &[field(4, 5, 17), field(4, 5, 18), field(4, 5, 19)],
            60,
            1e-4,
            1e-2,
            2,
        );
        assert_eq!(report.num_skipped_nonsmooth, 0);
        assert!(report.max_rel_error <= 1e-5, "rel err {}", report.max_rel_error);
    }

    #[test]
    fn backward_is_deterministic_across_rebuilds() {
        let build = || {
            let mut t = Tape::new();
            let a = t.leaf(field(4, 4, 20));
            let b = t.leaf(field(4, 4, 21));
            let probs = t.softmax_fields(&[a, b]);
            let e = t.sobel_magnitude(probs[0]);
            let s = t.sum(e);
            let s2 = t.sum(probs[1]);
            let loss = t.mul_ss(s, s2);
            let g = t.backward(loss).unwrap();
            (g.field(&t, a), g.field(&t, b))
        };
        let (a1, b1) = build();
        let (a2, b2) = build();
        assert_eq!(a1.values(), a2.values());
        assert_eq!(b1.values(), b2.values());
    }

    proptest! {
        #[test]
        fn linear_ops_adjoint_property(seed in 0u64..500) {
            // <op(x), y> == <x, adjoint(y)> through the tape for upsample,
            // pool and the lin-comb
            let x = field(4, 4, seed);
            let y = field(8, 8, seed + 1000);
            let mut t = Tape::new();
            let xi = t.leaf(x.clone());
            let up = t.upsample(xi, 8, 8);
            let loss = t.dot_const(up, y.clone());
            let g = t.backward(loss).unwrap();
            let lhs = t.field(up).dot(&y);
            let rhs = x.dot(&g.field(&t, xi));
            prop_assert!((lhs - rhs).abs() < 1e-10);
        }

        #[test]
        fn ste_forward_stays_binary(seed in 0u64..200) {
            let mut ctx = DetachCtx::record();
            let mut t = Tape::new();
            let soft = t.leaf(field(3, 4, seed).map(|v| 0.5 + 0.49 * v));
            let hard = BinaryMask::from_fn(3, 4, |h, w| (h * 3 + w + seed as usize) % 3 == 0);
            let b = t.ste_attach(&hard, soft, &mut ctx);
            for &v in t.field(b).values() {
                prop_assert!(v == 0.0 || v == 1.0);
            }
        }
    }
}
