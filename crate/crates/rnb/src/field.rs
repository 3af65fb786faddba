//! Dense 2D scalar fields and the forward-only grid operations shared by the
//! rest of the crate: box rasterization, bilinear resampling, 2x2 pooling,
//! Sobel edge extraction and simple reductions.
//!
//! Everything here is a pure function over immutable value types. The linear
//! operators (`bilinear_upsample`, `avg_pool2`, the Sobel convolutions) also
//! expose their exact adjoints, which the reverse-mode tape relies on.

use thiserror::Error;

/// Smoothing constant added under the square root of the Sobel magnitude so
/// the edge map is differentiable at zero gradient.
pub const SOBEL_EPS: f64 = 1e-12;

/// Below this spread a field is treated as constant by min-max normalization.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum FieldError {
    #[error("box {0:?} covers no pixel center at {1}x{2}")]
    DegenerateBox(NormBox, usize, usize),
    #[error("avg_pool2 requires even dimensions, got {0}x{1}")]
    OddShape(usize, usize),
    #[error("sobel_edges requires at least 3x3, got {0}x{1}")]
    TooSmall(usize, usize),
    #[error("shape mismatch: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("invalid box coordinates [{0}, {1}, {2}, {3}]")]
    InvalidBox(f64, f64, f64, f64),
    #[error("minimum bounding rectangle of an empty mask")]
    EmptyMask,
}

/// A rectangular grid of real values, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), height * width, "value length must be h*w");
        Self { height, width, values }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::new(height, width, vec![0.0; height * width])
    }

    pub fn constant(height: usize, width: usize, c: f64) -> Self {
        Self::new(height, width, vec![c; height * width])
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(height * width);
        for h in 0..height {
            for w in 0..width {
                values.push(f(h, w));
            }
        }
        Self::new(height, width, values)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn get(&self, h: usize, w: usize) -> f64 {
        self.values[h * self.width + w]
    }

    pub fn set(&mut self, h: usize, w: usize, v: f64) {
        self.values[h * self.width + w] = v;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Elementwise map.
    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        Self::new(self.height, self.width, self.values.iter().map(|&v| f(v)).collect())
    }

    /// Elementwise combination with another field of the same shape.
    pub fn zip(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape(), other.shape());
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Self::new(self.height, self.width, values)
    }

    pub fn dot(&self, other: &Self) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| v * c)
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip(other, |a, b| a + b)
    }
}

/// A `{0, 1}`-valued field with the same shape contract as [`ScalarField`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), height * width);
        Self { height, width, bits }
    }

    pub fn filled(height: usize, width: usize, v: bool) -> Self {
        Self::new(height, width, vec![v; height * width])
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for h in 0..height {
            for w in 0..width {
                bits.push(f(h, w));
            }
        }
        Self::new(height, width, bits)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn get(&self, h: usize, w: usize) -> bool {
        self.bits[h * self.width + w]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Number of foreground pixels.
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn complement(&self) -> Self {
        Self::new(self.height, self.width, self.bits.iter().map(|b| !b).collect())
    }

    pub fn intersect(&self, other: &Self) -> Self {
        assert_eq!(self.shape(), other.shape());
        let bits = self.bits.iter().zip(&other.bits).map(|(&a, &b)| a && b).collect();
        Self::new(self.height, self.width, bits)
    }

    pub fn to_field(&self) -> ScalarField {
        let values = self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        ScalarField::new(self.height, self.width, values)
    }
}

/// An axis-aligned box in normalized image coordinates, `[0,1]` fractions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl NormBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self, FieldError> {
        let ok = (0.0..=1.0).contains(&x0)
            && (0.0..=1.0).contains(&x1)
            && (0.0..=1.0).contains(&y0)
            && (0.0..=1.0).contains(&y1)
            && x0 < x1
            && y0 < y1;
        if ok {
            Ok(Self { x0, y0, x1, y1 })
        } else {
            Err(FieldError::InvalidBox(x0, y0, x1, y1))
        }
    }
}

/// Rasterizes a normalized box onto a grid. A pixel is foreground iff its
/// center lies in the half-open region `[x0,x1) x [y0,y1)`.
pub fn rasterize_box(bx: &NormBox, height: usize, width: usize) -> Result<BinaryMask, FieldError> {
    assert!(height >= 1 && width >= 1);
    let mask = BinaryMask::from_fn(height, width, |h, w| {
        let cx = (w as f64 + 0.5) / width as f64;
        let cy = (h as f64 + 0.5) / height as f64;
        cx >= bx.x0 && cx < bx.x1 && cy >= bx.y0 && cy < bx.y1
    });
    if mask.count() == 0 {
        return Err(FieldError::DegenerateBox(*bx, height, width));
    }
    Ok(mask)
}

/// Per-output-pixel source taps of the bilinear resampler: `(index, weight)`
/// pairs into the row-major input. Shared by the forward and adjoint paths.
pub fn bilinear_taps(
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<Vec<(usize, f64)>> {
    let axis = |in_n: usize, out_n: usize, o: usize| -> [(usize, f64); 2] {
        // align-corners-false: map the output pixel center into input
        // coordinates and clamp at the borders.
        let src = (o as f64 + 0.5) * in_n as f64 / out_n as f64 - 0.5;
        let src = src.clamp(0.0, (in_n - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(in_n - 1);
        let t = src - lo as f64;
        [(lo, 1.0 - t), (hi, t)]
    };
    let mut taps = Vec::with_capacity(out_h * out_w);
    for oh in 0..out_h {
        let ys = axis(in_h, out_h, oh);
        for ow in 0..out_w {
            let xs = axis(in_w, out_w, ow);
            let mut entries: Vec<(usize, f64)> = Vec::with_capacity(4);
            for &(y, wy) in &ys {
                for &(x, wx) in &xs {
                    let w = wy * wx;
                    if w == 0.0 {
                        continue;
                    }
                    let idx = y * in_w + x;
                    if let Some(e) = entries.iter_mut().find(|e| e.0 == idx) {
                        e.1 += w;
                    } else {
                        entries.push((idx, w));
                    }
                }
            }
            taps.push(entries);
        }
    }
    taps
}

/// Bilinear upsampling with the align-corners-false convention.
pub fn bilinear_upsample(f: &ScalarField, out_h: usize, out_w: usize) -> ScalarField {
    assert!(out_h >= f.height() && out_w >= f.width());
    let taps = bilinear_taps(f.height(), f.width(), out_h, out_w);
    apply_taps(&taps, f.values(), out_h, out_w)
}

pub fn apply_taps(taps: &[Vec<(usize, f64)>], input: &[f64], out_h: usize, out_w: usize) -> ScalarField {
    let values = taps
        .iter()
        .map(|t| t.iter().map(|&(i, w)| input[i] * w).sum())
        .collect();
    ScalarField::new(out_h, out_w, values)
}

/// Adjoint of [`apply_taps`]: scatters an output-shaped gradient back onto the
/// input grid.
pub fn apply_taps_adjoint(taps: &[Vec<(usize, f64)>], grad: &ScalarField, in_h: usize, in_w: usize) -> ScalarField {
    let mut out = vec![0.0; in_h * in_w];
    for (g, t) in grad.values().iter().zip(taps) {
        for &(i, w) in t {
            out[i] += g * w;
        }
    }
    ScalarField::new(in_h, in_w, out)
}

/// 2x2 average pooling.
pub fn avg_pool2(f: &ScalarField) -> Result<ScalarField, FieldError> {
    let (h, w) = f.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(FieldError::OddShape(h, w));
    }
    let out = ScalarField::from_fn(h / 2, w / 2, |oh, ow| {
        let (h0, w0) = (oh * 2, ow * 2);
        0.25 * (f.get(h0, w0) + f.get(h0, w0 + 1) + f.get(h0 + 1, w0) + f.get(h0 + 1, w0 + 1))
    });
    Ok(out)
}

/// Adjoint of [`avg_pool2`]: each coarse gradient entry spreads evenly over
/// its 2x2 block.
pub fn avg_pool2_adjoint(grad: &ScalarField) -> ScalarField {
    ScalarField::from_fn(grad.height() * 2, grad.width() * 2, |h, w| grad.get(h / 2, w / 2) * 0.25)
}

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

/// 3x3 cross-correlation under replicate (edge-clamp) padding.
pub fn conv3_replicate(f: &ScalarField, kernel: &[[f64; 3]; 3]) -> ScalarField {
    let (h, w) = f.shape();
    ScalarField::from_fn(h, w, |ch, cw| {
        let mut acc = 0.0;
        for (dy, row) in kernel.iter().enumerate() {
            for (dx, &k) in row.iter().enumerate() {
                let sy = (ch as isize + dy as isize - 1).clamp(0, h as isize - 1) as usize;
                let sx = (cw as isize + dx as isize - 1).clamp(0, w as isize - 1) as usize;
                acc += k * f.get(sy, sx);
            }
        }
        acc
    })
}

/// Adjoint of [`conv3_replicate`] with the same kernel: scatters each output
/// gradient through the taps that produced it, folding replicated border taps
/// back onto their source pixels.
pub fn conv3_replicate_adjoint(grad: &ScalarField, kernel: &[[f64; 3]; 3]) -> ScalarField {
    let (h, w) = grad.shape();
    let mut out = vec![0.0; h * w];
    for ch in 0..h {
        for cw in 0..w {
            let g = grad.get(ch, cw);
            for (dy, row) in kernel.iter().enumerate() {
                for (dx, &k) in row.iter().enumerate() {
                    let sy = (ch as isize + dy as isize - 1).clamp(0, h as isize - 1) as usize;
                    let sx = (cw as isize + dx as isize - 1).clamp(0, w as isize - 1) as usize;
                    out[sy * w + sx] += k * g;
                }
            }
        }
    }
    ScalarField::new(h, w, out)
}

/// Intermediate products of the Sobel edge extraction, kept for the backward
/// pass.
pub struct SobelParts {
    pub gx: ScalarField,
    pub gy: ScalarField,
    pub magnitude: ScalarField,
}

/// Smoothed Sobel gradient magnitude `sqrt(gx^2 + gy^2 + eps)` under
/// replicate padding.
pub fn sobel_parts(f: &ScalarField) -> Result<SobelParts, FieldError> {
    let (h, w) = f.shape();
    if h < 3 || w < 3 {
        return Err(FieldError::TooSmall(h, w));
    }
    let gx = conv3_replicate(f, &SOBEL_X);
    let gy = conv3_replicate(f, &SOBEL_Y);
    let magnitude = gx.zip(&gy, |a, b| (a * a + b * b + SOBEL_EPS).sqrt());
    Ok(SobelParts { gx, gy, magnitude })
}

pub fn sobel_edges(f: &ScalarField) -> Result<ScalarField, FieldError> {
    Ok(sobel_parts(f)?.magnitude)
}

/// `(f - min) / (max - min)`; a (near-)constant field maps to all zeros.
pub fn minmax_normalize(f: &ScalarField) -> ScalarField {
    let (mn, mx) = (f.min(), f.max());
    if mx - mn < NORM_EPS {
        return ScalarField::zeros(f.height(), f.width());
    }
    f.map(|v| (v - mn) / (mx - mn))
}

/// Mean of `f` over the foreground of `m`; 0 when the mask is empty.
pub fn masked_mean(f: &ScalarField, m: &BinaryMask) -> f64 {
    assert_eq!(f.shape(), m.shape());
    let n = m.count();
    if n == 0 {
        return 0.0;
    }
    let s: f64 = f
        .values()
        .iter()
        .zip(m.bits())
        .filter(|(_, &b)| b)
        .map(|(&v, _)| v)
        .sum();
    s / n as f64
}
