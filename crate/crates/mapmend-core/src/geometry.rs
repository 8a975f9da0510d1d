//! Similarity transforms, the dense transform field, and differentiable
//! barycenter-anchored instance warping.
//!
//! A transform `t = (tx, ty, theta, scale)` acts on a point `q` as
//!
//! ```text
//! f(q) = R(theta) * scale * (q - c) + c + (tx, ty)
//! ```
//!
//! where `c` is the instance barycenter: scale and rotation are applied about
//! the barycenter, translation last. Warping is inverse-mapped — each output
//! pixel bilinearly samples the input at `f^-1(p)` — so the warp is
//! differentiable in all four parameters and gradients of any scalar loss on
//! the warped mask propagate back to them. Samples outside the input read 0.
//!
//! Mask values live on the integer pixel lattice (pixel `(r, c)` at point
//! `(x=c, y=r)`), matching the barycenter definition as the plain mean of
//! pixel coordinates. Bilinear sampling at integer coordinates is exact, so
//! an identity transform reproduces the input bit for bit.

use crate::raster::{Point, ProbabilityMask};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("scale must be positive, got {0}")]
    NonPositiveScale(f64),
    #[error("empty instance region")]
    EmptyRegion,
    #[error("region pixel ({0}, {1}) outside {2}x{3} field")]
    OutOfBounds(usize, usize, usize, usize),
    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("invalid transform field: {0}")]
    BadField(String),
    #[error("invalid calibration: {0}")]
    BadCalibration(String),
    #[error("affine map is not a similarity or is singular")]
    NotASimilarity,
}

/// One instance's alignment correction: translation in pixels, rotation in
/// radians, uniform positive scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTransform {
    pub tx: f64,
    pub ty: f64,
    pub theta: f64,
    pub scale: f64,
}

impl SimilarityTransform {
    pub fn new(tx: f64, ty: f64, theta: f64, scale: f64) -> Result<Self, GeometryError> {
        if !(scale > 0.0) {
            return Err(GeometryError::NonPositiveScale(scale));
        }
        Ok(SimilarityTransform { tx, ty, theta: wrap_angle(theta), scale })
    }

    pub fn identity() -> Self {
        SimilarityTransform { tx: 0.0, ty: 0.0, theta: 0.0, scale: 1.0 }
    }

    pub fn is_identity(&self) -> bool {
        self.tx == 0.0 && self.ty == 0.0 && self.theta == 0.0 && self.scale == 1.0
    }

    /// The affine map equivalent to this transform anchored at `c`.
    pub fn to_affine(&self, c: Point) -> AffineMap {
        let (sin, cos) = self.theta.sin_cos();
        let (a, b) = (self.scale * cos, -self.scale * sin);
        let (d, e) = (self.scale * sin, self.scale * cos);
        AffineMap {
            m: [
                a,
                b,
                self.tx + c.x - (a * c.x + b * c.y),
                d,
                e,
                self.ty + c.y - (d * c.x + e * c.y),
            ],
        }
    }

    /// Recover the anchored form from an affine map, if it is a similarity.
    pub fn from_affine(map: &AffineMap, c: Point) -> Result<Self, GeometryError> {
        let [a, b, ox, d, e, oy] = map.m;
        let scale = (a * a + d * d).sqrt();
        if !(scale > 0.0)
            || (a - e).abs() > 1e-9 * scale.max(1.0)
            || (b + d).abs() > 1e-9 * scale.max(1.0)
        {
            return Err(GeometryError::NotASimilarity);
        }
        let theta = d.atan2(a);
        let tx = ox - c.x + (a * c.x + b * c.y);
        let ty = oy - c.y + (d * c.x + e * c.y);
        SimilarityTransform::new(tx, ty, theta, scale)
    }
}

fn wrap_angle(theta: f64) -> f64 {
    let mut t = theta.rem_euclid(2.0 * std::f64::consts::PI);
    if t > std::f64::consts::PI {
        t -= 2.0 * std::f64::consts::PI;
    }
    t
}

/// Row-major 2x3 affine map: `x' = m0 x + m1 y + m2`, `y' = m3 x + m4 y + m5`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineMap {
    pub m: [f64; 6],
}

impl AffineMap {
    pub fn identity() -> Self {
        AffineMap { m: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0] }
    }

    pub fn apply(&self, p: Point) -> Point {
        Point::new(
            self.m[0] * p.x + self.m[1] * p.y + self.m[2],
            self.m[3] * p.x + self.m[4] * p.y + self.m[5],
        )
    }

    /// `self` after `inner`: `(self ∘ inner)(p) = self(inner(p))`.
    pub fn compose(&self, inner: &AffineMap) -> AffineMap {
        let a = &self.m;
        let b = &inner.m;
        AffineMap {
            m: [
                a[0] * b[0] + a[1] * b[3],
                a[0] * b[1] + a[1] * b[4],
                a[0] * b[2] + a[1] * b[5] + a[2],
                a[3] * b[0] + a[4] * b[3],
                a[3] * b[1] + a[4] * b[4],
                a[3] * b[2] + a[4] * b[5] + a[5],
            ],
        }
    }

    pub fn invert(&self) -> Result<AffineMap, GeometryError> {
        let [a, b, c, d, e, f] = self.m;
        let det = a * e - b * d;
        if det == 0.0 || !det.is_finite() {
            return Err(GeometryError::NotASimilarity);
        }
        let (ia, ib, id, ie) = (e / det, -b / det, -d / det, a / det);
        Ok(AffineMap { m: [ia, ib, -(ia * c + ib * f), id, ie, -(id * c + ie * f)] })
    }
}

/// Apply `t` (anchored at `barycenter`) to one point.
pub fn apply_to_point(t: &SimilarityTransform, p: Point, barycenter: Point) -> Point {
    let (sin, cos) = t.theta.sin_cos();
    let (ux, uy) = (p.x - barycenter.x, p.y - barycenter.y);
    Point::new(
        t.scale * (cos * ux - sin * uy) + barycenter.x + t.tx,
        t.scale * (sin * ux + cos * uy) + barycenter.y + t.ty,
    )
}

/// Invert `t`. The inverse is returned together with its own anchor: the
/// image of the original barycenter, `c + (tx, ty)`. With that anchor the
/// inverse is simply `(-tx, -ty, -theta, 1/scale)`, and
/// `apply(inv, apply(t, p))` is the identity.
pub fn invert(
    t: &SimilarityTransform,
    barycenter: Point,
) -> Result<(SimilarityTransform, Point), GeometryError> {
    if !(t.scale > 0.0) {
        return Err(GeometryError::NonPositiveScale(t.scale));
    }
    let inv = SimilarityTransform::new(-t.tx, -t.ty, -t.theta, 1.0 / t.scale)?;
    Ok((inv, Point::new(barycenter.x + t.tx, barycenter.y + t.ty)))
}

/// Dense per-pixel transform prediction, 4 channels `[tx, ty, theta, scale]`
/// in raw tanh range `[-1, 1]`, shape `[4, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformField {
    data: Array3<f64>,
}

pub const FIELD_CHANNELS: usize = 4;

impl TransformField {
    pub fn new(data: Array3<f64>) -> Result<Self, GeometryError> {
        if data.dim().0 != FIELD_CHANNELS {
            return Err(GeometryError::BadField(format!(
                "expected {} channels, got {}",
                FIELD_CHANNELS,
                data.dim().0
            )));
        }
        if data.iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(GeometryError::BadField("raw values outside [-1,1]".into()));
        }
        Ok(TransformField { data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        TransformField { data: Array3::zeros((FIELD_CHANNELS, height, width)) }
    }

    /// A spatially constant field.
    pub fn constant(raw: [f64; 4], height: usize, width: usize) -> Result<Self, GeometryError> {
        let mut data = Array3::zeros((FIELD_CHANNELS, height, width));
        for (ch, &v) in raw.iter().enumerate() {
            data.slice_mut(ndarray::s![ch, .., ..]).fill(v);
        }
        TransformField::new(data)
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<f64> {
        &mut self.data
    }
}

/// Maps raw tanh-range field values to physical units. Translation and
/// rotation scale linearly; scale maps exponentially so that raw 0 is exactly
/// scale 1 and up/down scaling is symmetric in log space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldCalibration {
    pub max_translation: f64,
    pub max_rotation: f64,
    pub max_log_scale: f64,
}

impl Default for FieldCalibration {
    fn default() -> Self {
        FieldCalibration {
            max_translation: 64.0,
            max_rotation: std::f64::consts::FRAC_PI_6,
            max_log_scale: 1.25f64.ln(),
        }
    }
}

impl FieldCalibration {
    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.max_translation > 0.0 && self.max_rotation > 0.0 && self.max_log_scale > 0.0 {
            Ok(())
        } else {
            Err(GeometryError::BadCalibration("all bounds must be strictly positive".into()))
        }
    }

    pub fn apply(&self, raw: [f64; 4]) -> Result<SimilarityTransform, GeometryError> {
        SimilarityTransform::new(
            raw[0] * self.max_translation,
            raw[1] * self.max_translation,
            raw[2] * self.max_rotation,
            (raw[3] * self.max_log_scale).exp(),
        )
    }
}

/// Average the field over an instance's pixels and calibrate the result
/// (channel order `tx, ty, theta, scale`).
pub fn pool_instance_transform(
    field: &TransformField,
    region: &crate::raster::InstanceRegion,
    cal: &FieldCalibration,
) -> Result<SimilarityTransform, GeometryError> {
    cal.validate()?;
    if region.pixels.is_empty() {
        return Err(GeometryError::EmptyRegion);
    }
    let (h, w) = (field.height(), field.width());
    let mut raw = [0.0f64; 4];
    for &(r, c) in &region.pixels {
        if r >= h || c >= w {
            return Err(GeometryError::OutOfBounds(r, c, h, w));
        }
        for (ch, acc) in raw.iter_mut().enumerate() {
            *acc += field.data()[[ch, r, c]];
        }
    }
    let n = region.pixels.len() as f64;
    for v in raw.iter_mut() {
        *v /= n;
    }
    cal.apply(raw)
}

/// Gradient of a loss with respect to the raw field, given its gradient with
/// respect to the pooled transform `t`. Every pixel of the region receives
/// `dL/draw / N`; the calibration chain is `tx = raw * T`, `theta = raw * R`,
/// `scale = exp(raw * L)`.
pub fn pool_backward(
    region: &crate::raster::InstanceRegion,
    cal: &FieldCalibration,
    pooled: &SimilarityTransform,
    d_transform: [f64; 4],
    d_field: &mut Array3<f64>,
) {
    let n = region.pixels.len() as f64;
    let d_raw = [
        d_transform[0] * cal.max_translation / n,
        d_transform[1] * cal.max_translation / n,
        d_transform[2] * cal.max_rotation / n,
        d_transform[3] * pooled.scale * cal.max_log_scale / n,
    ];
    for &(r, c) in &region.pixels {
        for (ch, &g) in d_raw.iter().enumerate() {
            d_field[[ch, r, c]] += g;
        }
    }
}

#[inline]
fn bilinear(src: &Array2<f64>, x: f64, y: f64) -> (f64, f64, f64) {
    let (h, w) = src.dim();
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (xi, yi) = (x0 as i64, y0 as i64);
    let at = |r: i64, c: i64| -> f64 {
        if r < 0 || c < 0 || r >= h as i64 || c >= w as i64 {
            0.0
        } else {
            src[[r as usize, c as usize]]
        }
    };
    let v00 = at(yi, xi);
    let v01 = at(yi, xi + 1);
    let v10 = at(yi + 1, xi);
    let v11 = at(yi + 1, xi + 1);
    let value = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11);
    let gx = (1.0 - fy) * (v01 - v00) + fy * (v11 - v10);
    let gy = (1.0 - fx) * (v10 - v00) + fx * (v11 - v01);
    (value, gx, gy)
}

/// A warped instance restricted to its output bounding box.
#[derive(Debug, Clone)]
pub(crate) struct WarpedPatch {
    pub row0: usize,
    pub col0: usize,
    pub values: Array2<f64>,
}

impl WarpedPatch {
    pub fn empty() -> Self {
        WarpedPatch { row0: 0, col0: 0, values: Array2::zeros((0, 0)) }
    }
}

/// Conservative output window of `f(support(src))`, clamped to the canvas.
fn output_window(
    src: &Array2<f64>,
    t: &SimilarityTransform,
    c: Point,
) -> Option<(usize, usize, usize, usize)> {
    let (h, w) = src.dim();
    let mut r_min = usize::MAX;
    let mut r_max = 0usize;
    let mut c_min = usize::MAX;
    let mut c_max = 0usize;
    let mut any = false;
    for ((r, cc), &v) in src.indexed_iter() {
        if v != 0.0 {
            any = true;
            r_min = r_min.min(r);
            r_max = r_max.max(r);
            c_min = c_min.min(cc);
            c_max = c_max.max(cc);
        }
    }
    if !any {
        return None;
    }
    let corners = [
        Point::new(c_min as f64, r_min as f64),
        Point::new(c_max as f64, r_min as f64),
        Point::new(c_min as f64, r_max as f64),
        Point::new(c_max as f64, r_max as f64),
    ];
    let mut x_lo = f64::INFINITY;
    let mut x_hi = f64::NEG_INFINITY;
    let mut y_lo = f64::INFINITY;
    let mut y_hi = f64::NEG_INFINITY;
    for p in corners {
        let q = apply_to_point(t, p, c);
        x_lo = x_lo.min(q.x);
        x_hi = x_hi.max(q.x);
        y_lo = y_lo.min(q.y);
        y_hi = y_hi.max(q.y);
    }
    // Two pixels of margin absorb the bilinear halo.
    let r0 = (y_lo - 2.0).floor().max(0.0) as usize;
    let c0 = (x_lo - 2.0).floor().max(0.0) as usize;
    let r1 = (y_hi + 2.0).ceil().min(h as f64 - 1.0).max(0.0) as usize;
    let c1 = (x_hi + 2.0).ceil().min(w as f64 - 1.0).max(0.0) as usize;
    if r0 > r1 || c0 > c1 || y_hi < 0.0 || x_hi < 0.0 {
        return None;
    }
    Some((r0, c0, r1, c1))
}

/// Warp `src` by `t` about `c`, producing only the affected window.
pub(crate) fn warp_to_patch(src: &Array2<f64>, t: &SimilarityTransform, c: Point) -> WarpedPatch {
    let Some((r0, c0, r1, c1)) = output_window(src, t, c) else {
        return WarpedPatch::empty();
    };
    let (sin, cos) = t.theta.sin_cos();
    let inv_s = 1.0 / t.scale;
    let mut values = Array2::zeros((r1 - r0 + 1, c1 - c0 + 1));
    for r in r0..=r1 {
        for cc in c0..=c1 {
            let ux = cc as f64 - c.x - t.tx;
            let uy = r as f64 - c.y - t.ty;
            // f^-1(p) = R(-theta)/s * (p - c - t) + c
            let qx = inv_s * (cos * ux + sin * uy) + c.x;
            let qy = inv_s * (-sin * ux + cos * uy) + c.y;
            values[[r - r0, cc - c0]] = bilinear(src, qx, qy).0;
        }
    }
    WarpedPatch { row0: r0, col0: c0, values }
}

/// Gradient of a scalar loss with respect to `(tx, ty, theta, scale)` given
/// `d_out` over the same window produced by [`warp_to_patch`].
pub(crate) fn warp_patch_gradients(
    src: &Array2<f64>,
    t: &SimilarityTransform,
    c: Point,
    patch: &WarpedPatch,
    d_out: &Array2<f64>,
) -> [f64; 4] {
    debug_assert_eq!(patch.values.dim(), d_out.dim());
    let (sin, cos) = t.theta.sin_cos();
    let inv_s = 1.0 / t.scale;
    let mut grad = [0.0f64; 4];
    for ((pr, pc), &g_out) in d_out.indexed_iter() {
        if g_out == 0.0 {
            continue;
        }
        let r = patch.row0 + pr;
        let cc = patch.col0 + pc;
        let ux = cc as f64 - c.x - t.tx;
        let uy = r as f64 - c.y - t.ty;
        let qx = inv_s * (cos * ux + sin * uy) + c.x;
        let qy = inv_s * (-sin * ux + cos * uy) + c.y;
        let (_, gx, gy) = bilinear(src, qx, qy);
        if gx == 0.0 && gy == 0.0 {
            continue;
        }
        // dq/dtx = -(1/s) (cos, -sin); dq/dty = -(1/s) (sin, cos)
        let d_tx = -inv_s * (gx * cos - gy * sin);
        let d_ty = -inv_s * (gx * sin + gy * cos);
        // dq/dtheta = (1/s) * d/dtheta R(-theta) u
        let d_qx_dth = inv_s * (-sin * ux + cos * uy);
        let d_qy_dth = inv_s * (-cos * ux - sin * uy);
        let d_th = gx * d_qx_dth + gy * d_qy_dth;
        // dq/ds = -(1/s^2) R(-theta) u
        let d_qx_ds = -inv_s * inv_s * (cos * ux + sin * uy);
        let d_qy_ds = -inv_s * inv_s * (-sin * ux + cos * uy);
        let d_s = gx * d_qx_ds + gy * d_qy_ds;
        grad[0] += g_out * d_tx;
        grad[1] += g_out * d_ty;
        grad[2] += g_out * d_th;
        grad[3] += g_out * d_s;
    }
    grad
}

/// Warp a single-instance mask by `t` about its `barycenter`. Output pixels
/// bilinearly sample the input at `f^-1(p)`; samples outside read 0.
pub fn warp_instance(
    instance_mask: &ProbabilityMask,
    t: &SimilarityTransform,
    barycenter: Point,
) -> Result<ProbabilityMask, GeometryError> {
    if !(t.scale > 0.0) {
        return Err(GeometryError::NonPositiveScale(t.scale));
    }
    let (h, w) = (instance_mask.height(), instance_mask.width());
    let patch = warp_to_patch(instance_mask.data(), t, barycenter);
    let mut out = ProbabilityMask::zeros(h, w);
    let (ph, pw) = patch.values.dim();
    for pr in 0..ph {
        for pc in 0..pw {
            // Clamp tiny bilinear round-off so the result stays a
            // probability mask.
            out.data_mut()[[patch.row0 + pr, patch.col0 + pc]] =
                patch.values[[pr, pc]].clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// Sum warped instances and clamp at 1 (`min(sum, 1)`), which reduces to a
/// logical OR for binary non-overlapping inputs.
pub fn compose_aligned_map(
    instances: &[(ProbabilityMask, SimilarityTransform, Point)],
) -> Result<ProbabilityMask, GeometryError> {
    let Some(first) = instances.first() else {
        return Err(GeometryError::BadField("no instances to compose".into()));
    };
    let (h, w) = (first.0.height(), first.0.width());
    let mut sum: Array2<f64> = Array2::zeros((h, w));
    for (mask, t, c) in instances {
        if mask.height() != h || mask.width() != w {
            return Err(GeometryError::DimensionMismatch(h, w, mask.height(), mask.width()));
        }
        let patch = warp_to_patch(mask.data(), t, *c);
        let (ph, pw) = patch.values.dim();
        for pr in 0..ph {
            for pc in 0..pw {
                sum[[patch.row0 + pr, patch.col0 + pc]] += patch.values[[pr, pc]];
            }
        }
    }
    Ok(ProbabilityMask::new(sum.mapv(|v| v.clamp(0.0, 1.0)))
        .expect("clamped values are valid probabilities"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{label_instances, BinaryMask, InstanceRegion};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn square_mask(h: usize, w: usize, r0: usize, c0: usize, side: usize) -> ProbabilityMask {
        let mut m = ProbabilityMask::zeros(h, w);
        for r in r0..r0 + side {
            for c in c0..c0 + side {
                m.data_mut()[[r, c]] = 1.0;
            }
        }
        m
    }

    fn region_of_mask(m: &ProbabilityMask) -> InstanceRegion {
        let bin = BinaryMask::new(m.data().mapv(|v| u8::from(v > 0.5))).unwrap();
        label_instances(&bin).region_of(1).unwrap()
    }

    #[test]
    fn pool_constant_zero_field_is_identity() {
        let field = TransformField::zeros(16, 16);
        let m = square_mask(16, 16, 3, 4, 5);
        let region = region_of_mask(&m);
        let t =
            pool_instance_transform(&field, &region, &FieldCalibration::default()).unwrap();
        assert!(t.is_identity());
    }

    #[test]
    fn pool_constant_half_tx_is_32_pixels() {
        let field = TransformField::constant([0.5, 0.0, 0.0, 0.0], 16, 16).unwrap();
        let m = square_mask(16, 16, 2, 2, 4);
        let region = region_of_mask(&m);
        let t =
            pool_instance_transform(&field, &region, &FieldCalibration::default()).unwrap();
        assert!((t.tx - 32.0).abs() < 1e-12);
        assert_eq!(t.ty, 0.0);
        assert_eq!(t.theta, 0.0);
        assert!((t.scale - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pool_matches_explicit_sum_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut data = Array3::zeros((4, 16, 16));
        for v in data.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let field = TransformField::new(data.clone()).unwrap();
        let pixels = [(2usize, 3usize), (2, 4), (3, 3), (3, 4), (4, 4)];
        let mut bin = BinaryMask::zeros(16, 16);
        for &(r, c) in &pixels {
            bin.set(r, c, 1);
        }
        let cal = FieldCalibration::default();
        let got = pool_instance_transform(
            &field,
            &label_instances(&bin).region_of(1).unwrap(),
            &cal,
        )
        .unwrap();
        // Brute-force sum oracle.
        let mut raw = [0.0f64; 4];
        for &(r, c) in &pixels {
            for (ch, acc) in raw.iter_mut().enumerate() {
                *acc += data[[ch, r, c]];
            }
        }
        for v in raw.iter_mut() {
            *v /= pixels.len() as f64;
        }
        let want = cal.apply(raw).unwrap();
        assert!((got.tx - want.tx).abs() < 1e-9);
        assert!((got.ty - want.ty).abs() < 1e-9);
        assert!((got.theta - want.theta).abs() < 1e-9);
        assert!((got.scale - want.scale).abs() < 1e-9);
    }

    #[test]
    fn pool_rejects_out_of_bounds_region() {
        let field = TransformField::zeros(8, 8);
        let region = InstanceRegion {
            label: 1,
            pixels: vec![(7, 7), (8, 7)],
            barycenter: Point::new(7.0, 7.5),
        };
        assert!(matches!(
            pool_instance_transform(&field, &region, &FieldCalibration::default()),
            Err(GeometryError::OutOfBounds(8, 7, 8, 8))
        ));
    }

    #[test]
    fn pool_rejects_empty_region() {
        let field = TransformField::zeros(8, 8);
        let region =
            InstanceRegion { label: 1, pixels: vec![], barycenter: Point::new(0.0, 0.0) };
        assert!(matches!(
            pool_instance_transform(&field, &region, &FieldCalibration::default()),
            Err(GeometryError::EmptyRegion)
        ));
    }

    #[test]
    fn pool_of_constant_field_is_region_shape_independent() {
        let raw = [0.25, -0.125, 0.5, -0.75];
        let field = TransformField::constant(raw, 24, 24).unwrap();
        let cal = FieldCalibration::default();
        let want = cal.apply(raw).unwrap();
        for mask in [
            square_mask(24, 24, 1, 1, 3),
            square_mask(24, 24, 10, 4, 7),
            {
                let mut m = ProbabilityMask::zeros(24, 24);
                for i in 0..10 {
                    m.data_mut()[[i + 4, 20]] = 1.0;
                }
                m
            },
        ] {
            let region = region_of_mask(&mask);
            let got = pool_instance_transform(&field, &region, &cal).unwrap();
            assert!((got.tx - want.tx).abs() < 1e-9);
            assert!((got.ty - want.ty).abs() < 1e-9);
            assert!((got.theta - want.theta).abs() < 1e-9);
            assert!((got.scale - want.scale).abs() < 1e-9);
        }
    }

    #[test]
    fn warp_identity_is_exact() {
        let m = square_mask(16, 16, 4, 5, 6);
        let region = region_of_mask(&m);
        let out = warp_instance(&m, &SimilarityTransform::identity(), region.barycenter).unwrap();
        assert_eq!(out, m);
    }

    #[test]
    fn warp_integer_translation_matches_shift_oracle() {
        let m = square_mask(20, 20, 6, 3, 5);
        let region = region_of_mask(&m);
        let t = SimilarityTransform::new(3.0, 0.0, 0.0, 1.0).unwrap();
        let out = warp_instance(&m, &t, region.barycenter).unwrap();
        for r in 0..20 {
            for c in 0..20 {
                let want = if c >= 3 { m.get(r, c - 3) } else { 0.0 };
                assert_eq!(out.get(r, c), want, "pixel ({r},{c})");
            }
        }
    }

    #[test]
    fn warp_quarter_turn_of_centered_square_is_symmetric() {
        let m = square_mask(17, 17, 6, 6, 5);
        let region = region_of_mask(&m);
        let t = SimilarityTransform::new(0.0, 0.0, std::f64::consts::FRAC_PI_2, 1.0).unwrap();
        let out = warp_instance(&m, &t, region.barycenter).unwrap();
        for r in 0..17 {
            for c in 0..17 {
                assert!((out.get(r, c) - m.get(r, c)).abs() < 1e-6, "pixel ({r},{c})");
            }
        }
    }

    #[test]
    fn warp_rejects_nonpositive_scale() {
        let m = square_mask(8, 8, 2, 2, 3);
        let t = SimilarityTransform { tx: 0.0, ty: 0.0, theta: 0.0, scale: 0.0 };
        assert!(warp_instance(&m, &t, Point::new(3.0, 3.0)).is_err());
    }

    #[test]
    fn apply_to_point_cases() {
        let id = SimilarityTransform::identity();
        let p = apply_to_point(&id, Point::new(3.0, 4.0), Point::new(0.0, 0.0));
        assert_eq!(p, Point::new(3.0, 4.0));

        // The barycenter is a fixed point of any zero-translation transform.
        let t = SimilarityTransform::new(0.0, 0.0, 1.1, 1.7).unwrap();
        let c = Point::new(5.5, -2.0);
        let q = apply_to_point(&t, c, c);
        assert!((q.x - c.x).abs() < 1e-12 && (q.y - c.y).abs() < 1e-12);

        let t = SimilarityTransform::new(0.0, 0.0, 0.0, 2.0).unwrap();
        let q = apply_to_point(&t, Point::new(1.0, 1.0), Point::new(0.0, 0.0));
        assert!((q.x - 2.0).abs() < 1e-12 && (q.y - 2.0).abs() < 1e-12);
    }

    #[test]
    fn invert_identity_and_pure_translation() {
        let c = Point::new(4.0, 4.0);
        let (inv, _) = invert(&SimilarityTransform::identity(), c).unwrap();
        assert!(inv.is_identity());
        let t = SimilarityTransform::new(5.0, 0.0, 0.0, 1.0).unwrap();
        let (inv, anchor) = invert(&t, c).unwrap();
        assert_eq!(inv.tx, -5.0);
        assert_eq!(anchor, Point::new(9.0, 4.0));
    }

    #[test]
    fn invert_round_trips_random_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let t = SimilarityTransform::new(
                rng.gen_range(-40.0..40.0),
                rng.gen_range(-40.0..40.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(0.5..2.0),
            )
            .unwrap();
            let c = Point::new(rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0));
            let (inv, inv_anchor) = invert(&t, c).unwrap();
            for _ in 0..5 {
                let p = Point::new(rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0));
                let q = apply_to_point(&t, p, c);
                let back = apply_to_point(&inv, q, inv_anchor);
                assert!((back.x - p.x).abs() < 1e-9 && (back.y - p.y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn affine_round_trip_matches_anchored_form() {
        let t = SimilarityTransform::new(3.0, -2.0, 0.7, 1.3).unwrap();
        let c = Point::new(8.0, 5.0);
        let map = t.to_affine(c);
        let back = SimilarityTransform::from_affine(&map, c).unwrap();
        assert!((back.tx - t.tx).abs() < 1e-9);
        assert!((back.ty - t.ty).abs() < 1e-9);
        assert!((back.theta - t.theta).abs() < 1e-9);
        assert!((back.scale - t.scale).abs() < 1e-9);
        let p = Point::new(-3.0, 12.0);
        let via_map = map.apply(p);
        let direct = apply_to_point(&t, p, c);
        assert!((via_map.x - direct.x).abs() < 1e-9 && (via_map.y - direct.y).abs() < 1e-9);
    }

    #[test]
    fn compose_single_instance_equals_warp() {
        let m = square_mask(16, 16, 2, 3, 4);
        let region = region_of_mask(&m);
        let t = SimilarityTransform::new(1.5, -0.5, 0.2, 1.05).unwrap();
        let composed = compose_aligned_map(&[(m.clone(), t, region.barycenter)]).unwrap();
        let warped = warp_instance(&m, &t, region.barycenter).unwrap();
        for r in 0..16 {
            for c in 0..16 {
                assert!((composed.get(r, c) - warped.get(r, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn compose_disjoint_identity_is_union() {
        let a = square_mask(16, 16, 1, 1, 3);
        let b = square_mask(16, 16, 9, 9, 4);
        let ra = region_of_mask(&a);
        let rb = region_of_mask(&b);
        let id = SimilarityTransform::identity();
        let composed = compose_aligned_map(&[
            (a.clone(), id, ra.barycenter),
            (b.clone(), id, rb.barycenter),
        ])
        .unwrap();
        for r in 0..16 {
            for c in 0..16 {
                assert_eq!(composed.get(r, c), a.get(r, c).max(b.get(r, c)));
            }
        }
    }

    #[test]
    fn compose_clamps_overlap_to_one() {
        let a = square_mask(16, 16, 4, 4, 4);
        let b = square_mask(16, 16, 4, 6, 4);
        let ra = region_of_mask(&a);
        let rb = region_of_mask(&b);
        let id = SimilarityTransform::identity();
        let composed =
            compose_aligned_map(&[(a, id, ra.barycenter), (b, id, rb.barycenter)]).unwrap();
        assert_eq!(composed.get(5, 6), 1.0);
        assert!(composed.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    /// Smooth random mask for finite-difference checks: a sum of Gaussian
    /// bumps, so bilinear kinks do not dominate the difference quotient.
    fn smooth_mask(h: usize, w: usize, seed: u64) -> ProbabilityMask {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = ProbabilityMask::zeros(h, w);
        for _ in 0..4 {
            let cx = rng.gen_range(4.0..w as f64 - 4.0);
            let cy = rng.gen_range(4.0..h as f64 - 4.0);
            let s2 = rng.gen_range(4.0..12.0);
            for r in 0..h {
                for c in 0..w {
                    let d2 = (c as f64 - cx).powi(2) + (r as f64 - cy).powi(2);
                    let v = m.get(r, c) + 0.5 * (-d2 / s2).exp();
                    m.data_mut()[[r, c]] = v.min(1.0);
                }
            }
        }
        m
    }

    #[test]
    fn warp_gradients_match_finite_differences() {
        let h = 24;
        let w = 24;
        let mask = smooth_mask(h, w, 3);
        let target = smooth_mask(h, w, 4);
        let c = Point::new(11.0, 12.5);
        let base = SimilarityTransform::new(1.3, -0.8, 0.15, 1.08).unwrap();

        let loss = |t: &SimilarityTransform| -> f64 {
            let out = warp_instance(&mask, t, c).unwrap();
            out.data()
                .iter()
                .zip(target.data().iter())
                .map(|(p, g)| (p - g) * (p - g))
                .sum()
        };

        // Analytic gradient through the warp.
        let patch = warp_to_patch(mask.data(), &base, c);
        let (ph, pw) = patch.values.dim();
        let mut d_out = Array2::zeros((ph, pw));
        for pr in 0..ph {
            for pc in 0..pw {
                let (r, cc) = (patch.row0 + pr, patch.col0 + pc);
                d_out[[pr, pc]] =
                    2.0 * (patch.values[[pr, pc]].clamp(0.0, 1.0) - target.get(r, cc));
            }
        }
        // Pixels outside the patch window contribute constant loss: the warp
        // is zero there for any nearby transform, so they drop out of the
        // derivative.
        let analytic = warp_patch_gradients(mask.data(), &base, c, &patch, &d_out);

        let hstep = 1e-3;
        let params = |t: &SimilarityTransform| [t.tx, t.ty, t.theta, t.scale];
        let with = |i: usize, v: f64| -> SimilarityTransform {
            let mut p = params(&base);
            p[i] = v;
            SimilarityTransform { tx: p[0], ty: p[1], theta: p[2], scale: p[3] }
        };
        for i in 0..4 {
            let p0 = params(&base)[i];
            let num = (loss(&with(i, p0 + hstep)) - loss(&with(i, p0 - hstep))) / (2.0 * hstep);
            let denom = num.abs().max(analytic[i].abs()).max(1e-6);
            let rel = (num - analytic[i]).abs() / denom;
            assert!(
                rel < 1e-2,
                "param {i}: analytic {} vs numeric {} (rel {rel})",
                analytic[i],
                num
            );
        }
    }

    #[test]
    fn warp_composition_approximates_composed_transform() {
        let m = square_mask(48, 48, 14, 14, 16);
        let region = region_of_mask(&m);
        let c = region.barycenter;
        let t1 = SimilarityTransform::new(3.0, -2.0, 0.2, 1.1).unwrap();
        let t2 = SimilarityTransform::new(-1.5, 2.5, -0.15, 0.95).unwrap();
        let double_warped = warp_instance(&warp_instance(&m, &t1, c).unwrap(), &t2, c).unwrap();
        let composed_affine = t2.to_affine(c).compose(&t1.to_affine(c));
        let t12 = SimilarityTransform::from_affine(&composed_affine, c).unwrap();
        let single = warp_instance(&m, &t12, c).unwrap();
        let a = double_warped.threshold(0.5);
        let b = single.threshold(0.5);
        assert!(crate::raster::iou(&a, &b).unwrap() >= 0.95);
    }

    #[test]
    fn warp_round_trip_recovers_instance() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for trial in 0..10 {
            // Canvas sized so the warped instance never leaves it: pixels
            // pushed off the edge read back as 0 and cannot be recovered.
            let side = rng.gen_range(10..28);
            let m = square_mask(224, 224, 100, 100, side);
            let region = region_of_mask(&m);
            let t = SimilarityTransform::new(
                rng.gen_range(-64.0..64.0),
                rng.gen_range(-64.0..64.0),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(0.8..1.25),
            )
            .unwrap();
            let warped = warp_instance(&m, &t, region.barycenter).unwrap();
            let (inv, anchor) = invert(&t, region.barycenter).unwrap();
            let back = warp_instance(&warped, &inv, anchor).unwrap();
            let score =
                crate::raster::iou(&back.threshold(0.5), &m.threshold(0.5)).unwrap();
            assert!(score >= 0.95, "trial {trial}: round-trip IoU {score}");
        }
    }
}
