//! Luminance-adjusted affine registration of a zoom pair.
//!
//! The HR frame is the reference. For every HR pixel the transform gives
//! the LR location to sample, so the aligned image is
//! `alpha * C(tau o lr) + beta` where `C` is the bilinear warp cropped to
//! the HR size. Both frames use center-relative coordinates: `(0, 0)` is the
//! middle of each image, so a focal-ratio scale needs no translation guess.
//!
//! The objective `sum |alpha C(tau o lr) + beta - hr|^p` is minimized by
//! alternating a closed-form mean/std luminance match with IRLS
//! Gauss-Newton steps on the six affine parameters, coarse to fine over a
//! Gaussian pyramid.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{sample_bilinear, ImagePlane};
use crate::pyramid::gaussian_pyramid;

/// Largest accepted condition number of the weighted normal matrix.
pub const MAX_CONDITION: f64 = 1e12;



/// Coarse pyramid levels stop before either side drops below this.
const MIN_LEVEL_SIDE: usize = 16;

/// Maps a center-relative HR coordinate `(x, y)` to the center-relative LR
/// coordinate `(a11 x + a12 y + tx, a21 x + a22 y + ty)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    pub a11: f64,
    pub a12: f64,
    pub a21: f64,
    pub a22: f64,
    pub tx: f64,
    pub ty: f64,
}

impl AffineTransform {
    pub const IDENTITY: Self = Self { a11: 1.0, a12: 0.0, a21: 0.0, a22: 1.0, tx: 0.0, ty: 0.0 };

    pub fn from_params(p: [f64; 6]) -> Self {
        Self { a11: p[0], a12: p[1], a21: p[2], a22: p[3], tx: p[4], ty: p[5] }
    }

    /// `[a11, a12, a21, a22, tx, ty]`, the Jacobian column order.
    pub fn params(&self) -> [f64; 6] {
        [self.a11, self.a12, self.a21, self.a22, self.tx, self.ty]
    }

    pub fn scaling(s: f64) -> Self {
        Self { a11: s, a22: s, ..Self::IDENTITY }
    }

    /// Initial guess for a pair whose HR frame is `zoom` times magnified
    /// relative to the LR frame (e.g. the focal-length ratio).
    pub fn from_zoom(zoom: f64) -> Self {
        Self::scaling(1.0 / zoom)
    }

    /// HR frame magnified by `zoom` and rotated by `theta` radians, with LR
    /// translation `(tx, ty)`.
    pub fn similarity(zoom: f64, theta: f64, tx: f64, ty: f64) -> Self {
        let (s, c) = theta.sin_cos();
        let k = 1.0 / zoom;
        Self { a11: k * c, a12: -k * s, a21: k * s, a22: k * c, tx, ty }
    }

    #[inline]
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (self.a11 * x + self.a12 * y + self.tx, self.a21 * x + self.a22 * y + self.ty)
    }

    pub fn det(&self) -> f64 {
        self.a11 * self.a22 - self.a12 * self.a21
    }

    pub fn validate(&self) -> Result<()> {
        if self.params().iter().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate("affine transform has non-finite parameters".into()));
        }
        if self.det().abs() <= 1e-8 {
            return Err(Error::Degenerate(format!("affine transform is not invertible (det {:.3e})", self.det())));
        }
        Ok(())
    }

    pub fn inverse(&self) -> Result<Self> {
        self.validate()?;
        let d = self.det();
        let (b11, b12, b21, b22) = (self.a22 / d, -self.a12 / d, -self.a21 / d, self.a11 / d);
        Ok(Self {
            a11: b11,
            a12: b12,
            a21: b21,
            a22: b22,
            tx: -(b11 * self.tx + b12 * self.ty),
            ty: -(b21 * self.tx + b22 * self.ty),
        })
    }

    fn add(&self, delta: &[f64; 6]) -> Self {
        let p = self.params();
        Self::from_params(std::array::from_fn(|i| p[i] + delta[i]))
    }

    /// Same mapping expressed on the next-coarser pyramid level, given the
    /// fine sizes of the HR and LR images.
    fn to_coarser(self, hr: (usize, usize), lr: (usize, usize)) -> Self {
        let (dhx, dhy) = level_offset(hr);
        let (dlx, dly) = level_offset(lr);
        Self {
            tx: (self.a11 * dhx + self.a12 * dhy + self.tx - dlx) / 2.0,
            ty: (self.a21 * dhx + self.a22 * dhy + self.ty - dly) / 2.0,
            ..self
        }
    }

    /// Inverse of [`Self::to_coarser`].
    fn to_finer(self, hr: (usize, usize), lr: (usize, usize)) -> Self {
        let (dhx, dhy) = level_offset(hr);
        let (dlx, dly) = level_offset(lr);
        Self {
            tx: 2.0 * self.tx - (self.a11 * dhx + self.a12 * dhy) + dlx,
            ty: 2.0 * self.ty - (self.a21 * dhx + self.a22 * dhy) + dly,
            ..self
        }
    }
}

/// Coarse sample `m` sits at fine index `2m`; returns `2 c_coarse - c_fine`
/// per axis `(x, y)` for an image of fine size `(h, w)`.
fn level_offset((h, w): (usize, usize)) -> (f64, f64) {
    let off = |n: usize| (n.div_ceil(2) as f64 - 1.0) - (n as f64 - 1.0) / 2.0;
    (off(w), off(h))
}

#[inline]
fn center((h, w): (usize, usize)) -> (f64, f64) {
    ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LuminanceParams {
    pub alpha: f64,
    pub beta: f64,
}

impl LuminanceParams {
    pub const IDENTITY: Self = Self { alpha: 1.0, beta: 0.0 };

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite() && self.beta.is_finite()) {
            return Err(Error::Degenerate(format!("invalid luminance gain {} / offset {}", self.alpha, self.beta)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationConfig {
    /// Norm exponent, `0 < p <= 1`.
    pub p: f64,
    /// IRLS weight regularizer, intensity units.
    pub irls_epsilon: f64,
    pub max_outer_iters: usize,
    pub max_irls_iters: usize,
    /// A level stops once an affine update is shorter than this.
    pub converge_tol: f64,
    pub pyramid_levels: usize,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self { p: 1.0, irls_epsilon: 1e-4, max_outer_iters: 10, max_irls_iters: 10, converge_tol: 1e-6, pyramid_levels: 3 }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(Error::config(format!("registration.p must be in (0, 1], got {}", self.p)));
        }
        self.validate_common()
    }

    /// Like [`Self::validate`] but also accepts the least-squares case
    /// `p = 2`, used as the non-robust baseline.
    fn validate_common(&self) -> Result<()> {
        if !(self.irls_epsilon > 0.0 && self.irls_epsilon.is_finite()) {
            return Err(Error::config("registration.irls_epsilon must be positive"));
        }
        if self.max_outer_iters == 0 || self.max_irls_iters == 0 || self.pyramid_levels == 0 {
            return Err(Error::config("registration iteration budgets and pyramid_levels must be at least 1"));
        }
        if !(self.converge_tol >= 0.0 && self.converge_tol.is_finite()) {
            return Err(Error::config("registration.converge_tol must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct RegistrationResult {
    pub tau: AffineTransform,
    pub lum: LuminanceParams,
    /// `alpha * C(tau o lr) + beta` at HR size.
    pub aligned: ImagePlane,
    /// Objective after each outer iteration at the finest level.
    pub residual_history: Vec<f64>,
    /// Outer alternations run at the finest level.
    pub outer_iters_used: usize,
    /// IRLS steps run at the finest level, summed over outer iterations.
    pub irls_iters_used: usize,
    /// Norm of the last accepted affine update at the finest level; zero
    /// when no damped step lowered the objective any further.
    pub final_step_norm: f64,
    /// Norm of the last undamped Gauss-Newton proposal at the finest level.
    pub final_proposed_norm: f64,
    /// Pyramid levels actually used.
    pub levels_used: usize,
}

impl RegistrationResult {
    /// Plain-text record: one `key values...` line per field.
    pub fn to_record(&self) -> String {
        let p = self.tau.params();
        let mut s = format!(
            "tau {:.12e} {:.12e} {:.12e} {:.12e} {:.12e} {:.12e}\n",
            p[0], p[1], p[2], p[3], p[4], p[5]
        );
        s += &format!("alpha {:.12e}\nbeta {:.12e}\n", self.lum.alpha, self.lum.beta);
        s += &format!("outer_iters {}\nirls_iters {}\n", self.outer_iters_used, self.irls_iters_used);
        s += &format!("final_step_norm {:.6e}\nfinal_proposed_norm {:.6e}\n", self.final_step_norm, self.final_proposed_norm);
        s += &format!("levels {}\n", self.levels_used);
        s += "residuals";
        for r in &self.residual_history {
            s += &format!(" {r:.9e}");
        }
        s.push('\n');
        s
    }
}

/// Reads `tau`, `alpha` and `beta` back from a record produced by
/// [`RegistrationResult::to_record`] (or a synth truth sidecar).
pub fn parse_record(text: &str) -> Result<(AffineTransform, LuminanceParams)> {
    let mut tau = None;
    let mut alpha = None;
    let mut beta = None;
    for line in text.lines() {
        let mut it = line.split_whitespace();
        let key = it.next().unwrap_or("");
        let nums: std::result::Result<Vec<f64>, _> = it.map(str::parse::<f64>).collect();
        let nums = nums.map_err(|e| Error::io(format!("bad number in record line '{line}': {e}")))?;
        match (key, nums.as_slice()) {
            ("tau", [a, b, c, d, e, f]) => tau = Some(AffineTransform::from_params([*a, *b, *c, *d, *e, *f])),
            ("alpha", [a]) => alpha = Some(*a),
            ("beta", [b]) => beta = Some(*b),
            _ => {}
        }
    }
    match (tau, alpha, beta) {
        (Some(tau), Some(alpha), Some(beta)) => Ok((tau, LuminanceParams { alpha, beta })),
        _ => Err(Error::io("record is missing tau, alpha or beta")),
    }
}

/// `C(tau o src)`: samples `src` at the transformed coordinate of every
/// pixel of an `out_h x out_w` grid.
pub fn warp_crop(src: &ImagePlane, tau: &AffineTransform, out_h: usize, out_w: usize) -> Result<ImagePlane> {
    tau.validate()?;
    let (ocx, ocy) = center((out_h, out_w));
    let (scx, scy) = center(src.dims());
    let mut data = Vec::with_capacity(out_h * out_w);
    for r in 0..out_h {
        let y = r as f64 - ocy;
        for c in 0..out_w {
            let (sx, sy) = tau.apply(c as f64 - ocx, y);
            data.push(sample_bilinear(src, sx + scx, sy + scy));
        }
    }
    ImagePlane::new(out_h, out_w, data)
}

/// Closed-form gain and offset giving `alpha * warped + beta` the mean and
/// (population) standard deviation of `target`.
pub fn estimate_luminance(warped: &ImagePlane, target: &ImagePlane) -> Result<LuminanceParams> {
    warped.ensure_same_dims(target, "estimate_luminance")?;
    let sw = warped.std();
    if sw < 1e-12 {
        return Err(Error::Degenerate("warped image has zero variance; luminance is undetermined".into()));
    }
    let alpha = target.std() / sw;
    Ok(LuminanceParams { alpha, beta: target.mean() - alpha * warped.mean() })
}

/// [`estimate_luminance`] with per-pixel weights on both moments. When
/// `target` is an exact gain/offset of `warped` any positive weighting gives
/// the same answer, while IRLS weights suppress outlying pixels.
pub fn estimate_luminance_weighted(warped: &ImagePlane, target: &ImagePlane, weights: &[f64]) -> Result<LuminanceParams> {
    warped.ensure_same_dims(target, "estimate_luminance_weighted")?;
    if weights.len() != warped.len() || weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
        return Err(Error::shape("weights must be finite, non-negative and one per pixel"));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::Degenerate("all luminance weights are zero".into()));
    }
    let moments = |img: &ImagePlane| {
        let mean = img.data().iter().zip(weights).map(|(v, w)| v * w).sum::<f64>() / total;
        let var = img.data().iter().zip(weights).map(|(v, w)| w * (v - mean) * (v - mean)).sum::<f64>() / total;
        (mean, var.sqrt())
    };
    let (mw, sw) = moments(warped);
    let (mt, st) = moments(target);
    if sw < 1e-12 {
        return Err(Error::Degenerate("warped image has zero weighted variance; luminance is undetermined".into()));
    }
    let alpha = st / sw;
    Ok(LuminanceParams { alpha, beta: mt - alpha * mw })
}

/// Central-difference gradients `(d/dx, d/dy)` with replicated edges.
pub fn image_gradients(src: &ImagePlane) -> (ImagePlane, ImagePlane) {
    let (h, w) = src.dims();
    let gx = ImagePlane::from_fn(h, w, |r, c| {
        let ci = c as isize;
        (src.get_clamped(r as isize, ci + 1) - src.get_clamped(r as isize, ci - 1)) / 2.0
    });
    let gy = ImagePlane::from_fn(h, w, |r, c| {
        let ri = r as isize;
        (src.get_clamped(ri + 1, c as isize) - src.get_clamped(ri - 1, c as isize)) / 2.0
    });
    (gx, gy)
}

/// One row per output pixel: the derivative of `C(tau o src)` at that pixel
/// with respect to `[a11, a12, a21, a22, tx, ty]`.
pub type Jacobian = Vec<[f64; 6]>;

pub fn image_jacobian(src: &ImagePlane, tau: &AffineTransform, out_h: usize, out_w: usize) -> Result<Jacobian> {
    tau.validate()?;
    let (gx, gy) = image_gradients(src);
    Ok(warp_with_jacobian(src, &gx, &gy, tau, out_h, out_w).1)
}

/// Visits every pixel of an `out_h x out_w` grid warped by `tau` into
/// `src`, handing the callback the pixel index, its center-relative
/// coordinate and the bilinear taps.
#[inline]
fn for_each_tap(src_dims: (usize, usize), tau: &AffineTransform, out_h: usize, out_w: usize, mut f: impl FnMut(usize, f64, f64, Taps)) {
    let (ocx, ocy) = center((out_h, out_w));
    let (scx, scy) = center(src_dims);
    let (sh, sw) = src_dims;
    let (max_x, max_y) = ((sw - 1) as f64, (sh - 1) as f64);
    let mut i = 0;
    for r in 0..out_h {
        let y = r as f64 - ocy;
        for c in 0..out_w {
            let x = c as f64 - ocx;
            let (sx, sy) = tau.apply(x, y);
            let px = (sx + scx).clamp(0.0, max_x);
            let py = (sy + scy).clamp(0.0, max_y);
            let (x0, y0) = (px.floor(), py.floor());
            let (fx, fy) = (px - x0, py - y0);
            let (c0, r0) = (x0 as usize, y0 as usize);
            let c1 = (c0 + 1).min(sw - 1);
            let r1 = (r0 + 1).min(sh - 1);
            let taps = Taps {
                idx: [r0 * sw + c0, r0 * sw + c1, r1 * sw + c0, r1 * sw + c1],
                wt: [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy],
            };
            f(i, x, y, taps);
            i += 1;
        }
    }
}

#[derive(Clone, Copy)]
struct Taps {
    idx: [usize; 4],
    wt: [f64; 4],
}

impl Taps {
    #[inline]
    fn sample(&self, d: &[f64]) -> f64 {
        (d[self.idx[0]] * self.wt[0] + d[self.idx[1]] * self.wt[1]) + (d[self.idx[2]] * self.wt[2] + d[self.idx[3]] * self.wt[3])
    }
}

#[inline]
fn jacobian_row(dx: f64, dy: f64, x: f64, y: f64) -> [f64; 6] {
    [dx * x, dx * y, dy * x, dy * y, dx, dy]
}

fn warp_with_jacobian(
    src: &ImagePlane,
    gx: &ImagePlane,
    gy: &ImagePlane,
    tau: &AffineTransform,
    out_h: usize,
    out_w: usize,
) -> (Vec<f64>, Jacobian) {
    let mut values = Vec::with_capacity(out_h * out_w);
    let mut jac = Vec::with_capacity(out_h * out_w);
    for_each_tap(src.dims(), tau, out_h, out_w, |_, x, y, t| {
        values.push(t.sample(src.data()));
        jac.push(jacobian_row(t.sample(gx.data()), t.sample(gy.data()), x, y));
    });
    (values, jac)
}

/// Upper-triangle accumulator for `A' W^2 A` and `A' W^2 b`.
struct NormalEquations<const N: usize> {
    m: [[f64; N]; N],
    v: [f64; N],
}

impl<const N: usize> NormalEquations<N> {
    fn new() -> Self {
        Self { m: [[0.0; N]; N], v: [0.0; N] }
    }

    #[inline]
    fn add(&mut self, row: &[f64; N], b: f64, w2: f64) {
        for i in 0..N {
            let wa = w2 * row[i];
            self.v[i] += wa * b;
            for j in i..N {
                self.m[i][j] += wa * row[j];
            }
        }
    }

    fn solve(&self) -> Result<[f64; N]> {
        let normal = DMatrix::<f64>::from_fn(N, N, |i, j| if i <= j { self.m[i][j] } else { self.m[j][i] });
        if normal.iter().chain(&self.v).any(|v| !v.is_finite()) {
            return Err(Error::Singular { condition: f64::INFINITY });
        }
        let eig = SymmetricEigen::new(normal.clone()).eigenvalues;
        let max = eig.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let min = eig.iter().fold(f64::INFINITY, |m, v| m.min(*v));
        let condition = if min > 0.0 { max / min } else { f64::INFINITY };
        if condition > MAX_CONDITION {
            return Err(Error::Singular { condition });
        }
        let rhs = DVector::from_column_slice(&self.v);
        let sol = normal.cholesky().ok_or(Error::Singular { condition })?.solve(&rhs);
        Ok(std::array::from_fn(|i| sol[i]))
    }
}

/// Weighted least squares `argmin || w . (A d - b) ||^2` through the
/// normal equations `(A' W^2 A) d = A' W^2 b`.
pub fn irls_solve(a: &[[f64; 6]], b: &[f64], w: &[f64]) -> Result<[f64; 6]> {
    if a.len() != b.len() || a.len() != w.len() {
        return Err(Error::shape(format!(
            "irls_solve: {} rows, {} residuals, {} weights",
            a.len(),
            b.len(),
            w.len()
        )));
    }
    let mut ne = NormalEquations::<6>::new();
    for ((row, &bi), &wi) in a.iter().zip(b).zip(w) {
        ne.add(row, bi, wi * wi);
    }
    ne.solve()
}

/// IRLS weights `(r^2 + eps^2)^((p - 2) / 4)`, so that `w^2 r^2` tracks
/// `|r|^p` once `|r| >> eps`.
pub fn irls_weights(residuals: &[f64], p: f64, eps: f64) -> Vec<f64> {
    let e = (p - 2.0) / 4.0;
    let eps2 = eps * eps;
    residuals.iter().map(|r| (r * r + eps2).powf(e)).collect()
}

/// Squares of [`irls_weights`] without the intermediate root.
#[inline]
fn irls_weight_sq(r: f64, p: f64, eps2: f64) -> f64 {
    let t = r * r + eps2;
    if p == 1.0 {
        1.0 / t.sqrt()
    } else if p == 2.0 {
        1.0
    } else {
        t.powf((p - 2.0) / 2.0)
    }
}

/// Regularizer tied to the typical residual size, floored at `floor`.
/// Keeps inlier weights within a narrow band so IRLS does not stall on the
/// few pixels that already fit exactly, while outliers stay downweighted.
fn adaptive_epsilon(residuals: &[f64], floor: f64) -> f64 {
    let mut mags: Vec<f64> = residuals.iter().map(|r| r.abs()).collect();
    if mags.is_empty() {
        return floor;
    }
    let mid = mags.len() / 2;
    let (_, median, _) = mags.select_nth_unstable_by(mid, f64::total_cmp);
    median.max(floor)
}

fn objective(residuals: &[f64], p: f64) -> f64 {
    if p == 2.0 {
        residuals.iter().map(|r| r * r).sum()
    } else if p == 1.0 {
        residuals.iter().map(|r| r.abs()).sum()
    } else {
        residuals.iter().map(|r| r.abs().powf(p)).sum()
    }
}

struct LevelOutcome {
    tau: AffineTransform,
    lum: LuminanceParams,
    history: Vec<f64>,
    outer_iters: usize,
    irls_iters: usize,
    last_step: f64,
    last_proposed: f64,
}

fn residuals(target: &ImagePlane, warped: &[f64], lum: &LuminanceParams) -> Vec<f64> {
    target.data().iter().zip(warped).map(|(t, v)| t - (lum.alpha * v + lum.beta)).collect()
}

fn step_norm(d: &[f64; 6]) -> f64 {
    d.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Halvings tried before an IRLS step that fails to lower the objective
/// is declared converged.
const MAX_BACKTRACK: usize = 12;

fn solve_level(lr: &ImagePlane, hr: &ImagePlane, mut tau: AffineTransform, cfg: &RegistrationConfig) -> Result<LevelOutcome> {
    let (h, w) = hr.dims();
    let (gx, gy) = image_gradients(lr);
    let warp = |tau: &AffineTransform| -> Vec<f64> {
        let mut out = Vec::with_capacity(h * w);
        for_each_tap(lr.dims(), tau, h, w, |_, _, _, t| out.push(t.sample(lr.data())));
        out
    };
    let score = |values: &[f64], lum: &LuminanceParams| objective(&residuals(hr, values, lum), cfg.p);

    let mut history: Vec<f64> = Vec::new();
    let mut lum: Option<LuminanceParams> = None;
    let mut irls_iters = 0;
    let mut outer_iters = 0;
    let mut last_step = f64::INFINITY;
    let mut last_proposed = f64::INFINITY;
    let mut increases = 0;
    let mut values = warp(&tau);

    for _ in 0..cfg.max_outer_iters {
        outer_iters += 1;
        let warped = ImagePlane::new(h, w, values.clone())?;
        let mut obj = match lum {
            Some(prev) => {
                let res = residuals(hr, &values, &prev);
                let keep = objective(&res, cfg.p);
                let eps = adaptive_epsilon(&res, cfg.irls_epsilon);
                let w2: Vec<f64> = res.iter().map(|&r| irls_weight_sq(r, cfg.p, eps * eps)).collect();
                let proposal = estimate_luminance_weighted(&warped, hr, &w2)?;
                // Moment matching does not minimize the objective itself, so
                // a proposal that does worse is discarded.
                let take = score(&values, &proposal);
                if take <= keep {
                    lum = Some(proposal);
                    take
                } else {
                    keep
                }
            }
            None => {
                let proposal = estimate_luminance(&warped, hr)?;
                lum = Some(proposal);
                score(&values, &proposal)
            }
        };
        let mut lum_now = lum.expect("set above");

        // Gain and offset are refined together with the warp: alternating
        // alone zig-zags when a shift can be traded for an offset (ramps).
        let mut first_step = None;
        for _ in 0..cfg.max_irls_iters {
            let b = residuals(hr, &values, &lum_now);
            let eps = adaptive_epsilon(&b, cfg.irls_epsilon);
            let mut ne = NormalEquations::<8>::new();
            for_each_tap(lr.dims(), &tau, h, w, |i, x, y, t| {
                let j = jacobian_row(t.sample(gx.data()), t.sample(gy.data()), x, y);
                let a = lum_now.alpha;
                let row = [a * j[0], a * j[1], a * j[2], a * j[3], a * j[4], a * j[5], values[i], 1.0];
                ne.add(&row, b[i], irls_weight_sq(b[i], cfg.p, eps * eps));
            });
            let mut delta = ne.solve()?;
            last_proposed = step_norm(&delta[..6].try_into().expect("six warp parameters"));
            irls_iters += 1;
            let mut accepted = None;
            for _ in 0..MAX_BACKTRACK {
                let trial = tau.add(&delta[..6].try_into().expect("six warp parameters"));
                let trial_lum = LuminanceParams { alpha: lum_now.alpha + delta[6], beta: lum_now.beta + delta[7] };
                if trial.validate().is_ok() && trial_lum.validate().is_ok() {
                    let trial_values = warp(&trial);
                    let trial_obj = score(&trial_values, &trial_lum);
                    if trial_obj <= obj {
                        accepted = Some((trial, trial_lum, trial_values, trial_obj));
                        break;
                    }
                }
                delta = delta.map(|v| 0.5 * v);
            }
            let step = match accepted {
                Some((trial, trial_lum, trial_values, trial_obj)) => {
                    tau = trial;
                    lum_now = trial_lum;
                    values = trial_values;
                    obj = trial_obj;
                    step_norm(&delta[..6].try_into().expect("six warp parameters"))
                }
                None => 0.0,
            };
            last_step = step;
            first_step.get_or_insert(step);
            if step < cfg.converge_tol {
                break;
            }
        }
        lum = Some(lum_now);

        if !obj.is_finite() {
            return Err(Error::Diverge("registration objective became non-finite".into()));
        }
        if let Some(&prev) = history.last() {
            if obj > prev {
                increases += 1;
                if increases >= 3 {
                    return Err(Error::Diverge(format!(
                        "objective increased for 3 consecutive outer iterations (last {obj:.6e})"
                    )));
                }
            } else {
                increases = 0;
            }
        }
        history.push(obj);
        if first_step.is_some_and(|s| s < cfg.converge_tol) {
            break;
        }
    }
    let lum = lum.expect("at least one outer iteration");
    Ok(LevelOutcome { tau, lum, history, outer_iters, irls_iters, last_step, last_proposed })
}

/// Aligns `lr` to the frame of `hr`, starting from `tau0`.
pub fn register(lr: &ImagePlane, hr: &ImagePlane, tau0: &AffineTransform, cfg: &RegistrationConfig) -> Result<RegistrationResult> {
    cfg.validate()?;
    register_unchecked_p(lr, hr, tau0, cfg)
}

/// [`register`] without the robust-norm restriction on `p`; `p = 2` gives
/// the plain least-squares baseline.
pub fn register_any_p(lr: &ImagePlane, hr: &ImagePlane, tau0: &AffineTransform, cfg: &RegistrationConfig) -> Result<RegistrationResult> {
    if !(cfg.p > 0.0 && cfg.p <= 2.0) {
        return Err(Error::config("p must be in (0, 2]"));
    }
    cfg.validate_common()?;
    register_unchecked_p(lr, hr, tau0, cfg)
}

fn register_unchecked_p(lr: &ImagePlane, hr: &ImagePlane, tau0: &AffineTransform, cfg: &RegistrationConfig) -> Result<RegistrationResult> {
    tau0.validate()?;
    let lr_pyr = gaussian_pyramid(lr, cfg.pyramid_levels, MIN_LEVEL_SIDE)?;
    let hr_pyr = gaussian_pyramid(hr, cfg.pyramid_levels, MIN_LEVEL_SIDE)?;
    let levels = lr_pyr.len().min(hr_pyr.len());

    let mut tau = *tau0;
    for l in 0..levels - 1 {
        tau = tau.to_coarser(hr_pyr[l].dims(), lr_pyr[l].dims());
    }

    let mut outcome = None;
    for l in (0..levels).rev() {
        if l + 1 < levels {
            tau = tau.to_finer(hr_pyr[l].dims(), lr_pyr[l].dims());
        }
        let out = solve_level(&lr_pyr[l], &hr_pyr[l], tau, cfg)?;
        tau = out.tau;
        outcome = Some(out);
    }
    let out = outcome.expect("at least one level");
    let (h, w) = hr.dims();
    let aligned = warp_crop(lr, &out.tau, h, w)?.map(|v| out.lum.alpha * v + out.lum.beta);
    Ok(RegistrationResult {
        tau: out.tau,
        lum: out.lum,
        aligned,
        residual_history: out.history,
        outer_iters_used: out.outer_iters,
        irls_iters_used: out.irls_iters,
        final_step_norm: out.last_step,
        final_proposed_norm: out.last_proposed,
        levels_used: levels,
    })
}

/// Reprojection error of the four corners of an `h x w` HR frame:
/// `|estimate(c) - truth(c)|`, in pixels of the source (LR) image the
/// corners project into.
pub fn corner_errors(estimate: &AffineTransform, truth: &AffineTransform, h: usize, w: usize) -> Result<[f64; 4]> {
    estimate.validate()?;
    truth.validate()?;
    let (cx, cy) = center((h, w));
    let corners = [(-cx, -cy), (cx, -cy), (-cx, cy), (cx, cy)];
    Ok(corners.map(|(x, y)| {
        let (ex, ey) = estimate.apply(x, y);
        let (tx, ty) = truth.apply(x, y);
        ((ex - tx).powi(2) + (ey - ty).powi(2)).sqrt()
    }))
}

/// The same corner discrepancy pulled back into the HR frame:
/// `|truth^-1(estimate(c)) - c|`, in HR pixels.
pub fn corner_errors_hr(estimate: &AffineTransform, truth: &AffineTransform, h: usize, w: usize) -> Result<[f64; 4]> {
    estimate.validate()?;
    let inv = truth.inverse()?;
    let (cx, cy) = center((h, w));
    let corners = [(-cx, -cy), (cx, -cy), (-cx, cy), (cx, cy)];
    Ok(corners.map(|(x, y)| {
        let (sx, sy) = estimate.apply(x, y);
        let (bx, by) = inv.apply(sx, sy);
        ((bx - x).powi(2) + (by - y).powi(2)).sqrt()
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pyramid::gauss_down;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn smooth(h: usize, w: usize) -> ImagePlane {
        ImagePlane::from_fn(h, w, |r, c| {
            let (x, y) = (c as f64, r as f64);
            120.0 + 50.0 * (x / 23.0).sin() * (y / 31.0).cos() + 30.0 * ((x + 2.0 * y) / 41.0).cos()
        })
    }

    #[test]
    fn warp_identity_is_exact() {
        let img = smooth(17, 20);
        assert_eq!(warp_crop(&img, &AffineTransform::IDENTITY, 17, 20).unwrap(), img);
    }

    #[test]
    fn warp_scaled_constant() {
        let img = ImagePlane::filled(9, 9, 77.0);
        let out = warp_crop(&img, &AffineTransform::scaling(2.0), 9, 9).unwrap();
        assert!(out.data().iter().all(|&v| v == 77.0));
    }

    #[test]
    fn warp_integer_translation() {
        let img = smooth(10, 12);
        let t = AffineTransform { tx: 1.0, ..AffineTransform::IDENTITY };
        let out = warp_crop(&img, &t, 10, 12).unwrap();
        for r in 0..10 {
            for c in 0..11 {
                assert!((out.get(r, c) - img.get(r, c + 1)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn singular_transform_rejected() {
        let img = smooth(8, 8);
        let t = AffineTransform { a11: 1.0, a12: 2.0, a21: 0.5, a22: 1.0, tx: 0.0, ty: 0.0 };
        assert!(warp_crop(&img, &t, 8, 8).is_err());
        assert!(image_jacobian(&img, &t, 8, 8).is_err());
    }

    #[test]
    fn luminance_closed_form() {
        let t = smooth(12, 12);
        let lum = estimate_luminance(&t, &t).unwrap();
        assert!((lum.alpha - 1.0).abs() < 1e-12 && lum.beta.abs() < 1e-9);

        // mean 0.4 std 0.1 against mean 0.5 std 0.2
        let warped = ImagePlane::new(1, 2, vec![0.3, 0.5]).unwrap();
        let target = ImagePlane::new(1, 2, vec![0.3, 0.7]).unwrap();
        let lum = estimate_luminance(&warped, &target).unwrap();
        assert!((lum.alpha - 2.0).abs() < 1e-12);
        assert!((lum.beta + 0.3).abs() < 1e-12);

        let warped = t.map(|v| 2.0 * v + 5.0);
        let lum = estimate_luminance(&warped, &t).unwrap();
        assert!((lum.alpha - 0.5).abs() < 1e-12);
        assert!((lum.beta + 2.5).abs() < 1e-9);

        assert!(matches!(estimate_luminance(&ImagePlane::filled(3, 3, 1.0), &t.crop(0, 0, 3, 3).unwrap()), Err(Error::Degenerate(_))));
    }

    #[test]
    fn luminance_matches_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let warped = ImagePlane::from_fn(15, 11, |_, _| rng.gen_range(0.0..90.0));
        let target = ImagePlane::from_fn(15, 11, |_, _| rng.gen_range(10.0..250.0));
        let lum = estimate_luminance(&warped, &target).unwrap();
        let adj = warped.map(|v| lum.alpha * v + lum.beta);
        assert!((adj.mean() - target.mean()).abs() <= 1e-9 * target.mean().abs());
        assert!((adj.std() - target.std()).abs() <= 1e-9 * target.std());
    }

    #[test]
    fn jacobian_constant_and_ramp() {
        let jac = image_jacobian(&ImagePlane::filled(6, 6, 3.0), &AffineTransform::IDENTITY, 6, 6).unwrap();
        assert!(jac.iter().flatten().all(|&v| v == 0.0));

        let ramp = ImagePlane::from_fn(7, 9, |_, c| c as f64);
        let jac = image_jacobian(&ramp, &AffineTransform::IDENTITY, 7, 9).unwrap();
        for r in 0..7 {
            for c in 1..8 {
                let (x, y) = (c as f64 - 4.0, r as f64 - 3.0);
                assert_eq!(jac[r * 9 + c], [x, y, 0.0, 0.0, 1.0, 0.0]);
            }
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let src = ImagePlane::from_fn(60, 70, |r, c| {
            let (x, y) = (c as f64, r as f64);
            120.0 + 50.0 * (x / 47.0).sin() * (y / 61.0).cos() + 30.0 * ((x + 2.0 * y) / 83.0).cos()
        });
        let tau = AffineTransform { a11: 0.52, a12: 0.01, a21: -0.02, a22: 0.49, tx: 0.7, ty: -1.3 };
        let (h, w) = (50, 56);
        let jac = image_jacobian(&src, &tau, h, w).unwrap();
        let step = 1e-4;
        for k in 0..6 {
            let mut pp = tau.params();
            pp[k] += step;
            let mut pm = tau.params();
            pm[k] -= step;
            let plus = warp_crop(&src, &AffineTransform::from_params(pp), h, w).unwrap();
            let minus = warp_crop(&src, &AffineTransform::from_params(pm), h, w).unwrap();
            let fd: Vec<f64> = plus.data().iter().zip(minus.data()).map(|(a, b)| (a - b) / (2.0 * step)).collect();
            let col: Vec<f64> = jac.iter().map(|row| row[k]).collect();
            // Directional derivative along the column vs the finite-difference column.
            let num: f64 = col.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let den: f64 = fd.iter().map(|b| b * b).sum::<f64>().sqrt();
            let proj: f64 = col.iter().zip(&fd).map(|(a, b)| a * b).sum::<f64>() / col.iter().map(|a| a * a).sum::<f64>();
            // Per-pixel error is dominated by the bilinear kink at cell edges,
            // which cancels in the projection onto the column.
            assert!(num / den < 0.05, "param {k}: column error {}", num / den);
            assert!((proj - 1.0).abs() < 1e-3, "param {k}: projection {proj}");
        }
    }

    #[test]
    fn irls_exactly_determined() {
        let a: Vec<[f64; 6]> = (0..6).map(|i| std::array::from_fn(|j| if i == j { 1.0 } else { 0.0 })).collect();
        let b = [1.0, -2.0, 3.5, 0.25, 7.0, -9.0];
        let d = irls_solve(&a, &b, &[1.0; 6]).unwrap();
        for i in 0..6 {
            assert!((d[i] - b[i]).abs() < 1e-12);
        }
    }

    /// Gaussian elimination on the explicitly formed `A' diag(w)^2 A`.
    fn dense_weighted_solve(a: &[[f64; 6]], b: &[f64], w: &[f64]) -> [f64; 6] {
        let mut m = [[0.0; 7]; 6];
        for i in 0..6 {
            for j in 0..6 {
                m[i][j] = (0..a.len()).map(|n| a[n][i] * w[n] * w[n] * a[n][j]).sum();
            }
            m[i][6] = (0..a.len()).map(|n| a[n][i] * w[n] * w[n] * b[n]).sum();
        }
        for col in 0..6 {
            let piv = (col..6).max_by(|&x, &y| m[x][col].abs().total_cmp(&m[y][col].abs())).unwrap();
            m.swap(col, piv);
            for row in 0..6 {
                if row != col {
                    let f = m[row][col] / m[col][col];
                    for k in col..7 {
                        m[row][k] -= f * m[col][k];
                    }
                }
            }
        }
        std::array::from_fn(|i| m[i][6] / m[i][i])
    }

    #[test]
    fn irls_matches_dense_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a: Vec<[f64; 6]> = (0..20).map(|_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0))).collect();
        let b: Vec<f64> = (0..20).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let w: Vec<f64> = (0..20).map(|_| rng.gen_range(0.2..2.0)).collect();
        let got = irls_solve(&a, &b, &w).unwrap();
        let want = dense_weighted_solve(&a, &b, &w);
        for i in 0..6 {
            assert!((got[i] - want[i]).abs() <= 1e-10 * want[i].abs().max(1.0));
        }
        let ols = irls_solve(&a, &b, &[1.0; 20]).unwrap();
        let want = dense_weighted_solve(&a, &b, &[1.0; 20]);
        for i in 0..6 {
            assert!((ols[i] - want[i]).abs() <= 1e-10 * want[i].abs().max(1.0));
        }
    }

    #[test]
    fn irls_singular_and_shape_errors() {
        let a = vec![[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]; 10];
        assert!(matches!(irls_solve(&a, &[1.0; 10], &[1.0; 10]), Err(Error::Singular { .. })));
        assert!(matches!(irls_solve(&a, &[1.0; 9], &[1.0; 10]), Err(Error::Shape(_))));
    }

    #[test]
    fn weight_formula() {
        assert!(irls_weights(&[0.0, 3.0, -1e6], 2.0, 1e-4).iter().all(|&w| w == 1.0));
        assert!((irls_weights(&[1.0], 1.0, 1e-9)[0] - 1.0).abs() < 1e-12);
        assert!((irls_weights(&[100.0], 1.0, 1e-4)[0] - 0.1).abs() < 1e-9);
        let r = 37.0;
        let w = irls_weights(&[r], 1.0, 1e-4)[0];
        assert!((w * w * r * r - r).abs() < 1e-6);
    }

    #[test]
    fn level_conversion_roundtrip() {
        let tau = AffineTransform { a11: 0.4, a12: 0.02, a21: -0.01, a22: 0.41, tx: 2.5, ty: -1.25 };
        for (hr, lr) in [((64, 48), (31, 27)), ((65, 49), (30, 26))] {
            let back = tau.to_coarser(hr, lr).to_finer(hr, lr);
            for (a, b) in back.params().iter().zip(tau.params()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn level_conversion_tracks_decimation() {
        // Warping the coarse LR with the coarse transform should match
        // decimating the fine warp.
        let lr = smooth(90, 110);
        let tau = AffineTransform::similarity(1.6, 0.01, 1.3, -0.7);
        let (h, w) = (120, 140);
        let fine = warp_crop(&lr, &tau, h, w).unwrap();
        let coarse_tau = tau.to_coarser((h, w), lr.dims());
        let coarse = warp_crop(&gauss_down(&lr).unwrap(), &coarse_tau, 60, 70).unwrap();
        let decimated = gauss_down(&fine).unwrap();
        let inner = |p: &ImagePlane| p.crop(5, 5, 50, 60).unwrap();
        assert!(inner(&coarse).max_abs_diff(&inner(&decimated)) < 1.0);
    }

    #[test]
    fn identity_pair_is_a_fixed_point() {
        let img = smooth(64, 64);
        let res = register(&img, &img, &AffineTransform::IDENTITY, &RegistrationConfig::default()).unwrap();
        for (a, b) in res.tau.params().iter().zip(AffineTransform::IDENTITY.params()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!((res.lum.alpha - 1.0).abs() < 1e-9);
        assert!(res.lum.beta.abs() < 1e-6);
    }

    #[test]
    fn record_roundtrip() {
        let img = smooth(32, 32);
        let res = register(&img, &img, &AffineTransform::IDENTITY, &RegistrationConfig::default()).unwrap();
        let (tau, lum) = parse_record(&res.to_record()).unwrap();
        assert!((tau.a11 - res.tau.a11).abs() < 1e-10);
        assert!((lum.alpha - res.lum.alpha).abs() < 1e-10);
        assert!(parse_record("alpha 1\n").is_err());
    }

    #[test]
    fn config_validation() {
        let bad = RegistrationConfig { p: 1.5, ..Default::default() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = RegistrationConfig { max_irls_iters: 0, ..Default::default() };
        assert!(bad.validate().is_err());
        let img = smooth(32, 32);
        let l2 = RegistrationConfig { p: 2.0, ..Default::default() };
        assert!(register(&img, &img, &AffineTransform::IDENTITY, &l2).is_err());
        assert!(register_any_p(&img, &img, &AffineTransform::IDENTITY, &l2).is_ok());
    }

    #[test]
    fn corner_error_of_truth_is_zero() {
        let t = AffineTransform::similarity(2.1, 0.005, 1.0, -2.0);
        assert!(corner_errors(&t, &t, 100, 80).unwrap().iter().all(|&e| e < 1e-10));
        assert!(corner_errors_hr(&t, &t, 100, 80).unwrap().iter().all(|&e| e < 1e-10));
        let shifted = AffineTransform { tx: t.tx + 0.1, ..t };
        assert!(corner_errors(&shifted, &t, 100, 80).unwrap().iter().all(|&e| (e - 0.1).abs() < 1e-12));
        // 0.1 LR px is 0.21 HR px at zoom 2.1
        assert!(corner_errors_hr(&shifted, &t, 100, 80).unwrap().iter().all(|&e| (e - 0.21).abs() < 1e-9));
    }
}
