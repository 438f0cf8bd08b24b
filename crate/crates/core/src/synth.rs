//! Synthetic zoom pairs with known ground truth.
//!
//! [`degrade`] turns an HR image into an LR observation by blurring with a
//! per-pixel Gaussian, resampling through the inverse of a known affine
//! transform, undoing a known gain/offset, and finally adding noise and
//! outliers. Registration and training tests check themselves against the
//! returned truth.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{sample_bilinear, ImagePlane};
use crate::registration::{AffineTransform, LuminanceParams};

#[derive(Clone, Debug, PartialEq)]
pub struct DegradationSpec {
    /// HR to LR coordinate map (see [`AffineTransform`]).
    pub tau_star: AffineTransform,
    /// Gain/offset such that `alpha * lr + beta` matches the HR intensities.
    pub lum_star: LuminanceParams,
    /// Per-pixel Gaussian sigma over the HR grid, in pixels.
    pub blur_sigma_map: ImagePlane,
    /// Additive Gaussian noise standard deviation.
    pub noise_sigma: f64,
    /// Fraction of LR pixels replaced by uniform values in `[0, 255]`.
    pub outlier_fraction: f64,
    pub seed: u64,
}

impl DegradationSpec {
    /// Geometric and photometric truth only: no blur, noise or outliers.
    pub fn clean(tau_star: AffineTransform, lum_star: LuminanceParams, hr_dims: (usize, usize), seed: u64) -> Self {
        Self {
            tau_star,
            lum_star,
            blur_sigma_map: ImagePlane::zeros(hr_dims.0, hr_dims.1),
            noise_sigma: 0.0,
            outlier_fraction: 0.0,
            seed,
        }
    }

    pub fn identity(hr_dims: (usize, usize)) -> Self {
        Self::clean(AffineTransform::IDENTITY, LuminanceParams::IDENTITY, hr_dims, 0)
    }

    pub fn validate(&self) -> Result<()> {
        self.tau_star.validate()?;
        self.lum_star.validate()?;
        if self.blur_sigma_map.data().iter().any(|&s| s < 0.0) {
            return Err(Error::config("blur sigma values must be non-negative"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise_sigma must be non-negative"));
        }
        if !(0.0..=0.5).contains(&self.outlier_fraction) {
            return Err(Error::config("outlier_fraction must lie in [0, 0.5]"));
        }
        Ok(())
    }
}

fn center((h, w): (usize, usize)) -> (f64, f64) {
    ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0)
}

/// Largest LR grid (same aspect as the HR grid) whose every pixel maps,
/// through `tau^-1`, inside the HR image.
pub fn lr_extent(hr_dims: (usize, usize), tau: &AffineTransform) -> Result<(usize, usize)> {
    let inv = tau.inverse()?;
    let (hh, hw) = hr_dims;
    let (hcx, hcy) = center(hr_dims);
    let fits = |lh: usize, lw: usize| {
        let (lcx, lcy) = center((lh, lw));
        [(-lcx, -lcy), (lcx, -lcy), (-lcx, lcy), (lcx, lcy)].iter().all(|&(u, v)| {
            let (x, y) = inv.apply(u, v);
            let (x, y) = (x + hcx, y + hcy);
            // Round-off slack keeps the identity map feasible.
            x >= -1e-9 && y >= -1e-9 && x <= hw as f64 - 1.0 + 1e-9 && y <= hh as f64 - 1.0 + 1e-9
        })
    };
    let gain = tau.params()[..4].iter().map(|v| v.abs()).sum::<f64>();
    let upper = ((hh.max(hw) as f64) * gain).ceil() as usize + 2;
    for lh in (4..=upper).rev() {
        let lw = ((lh as f64) * hw as f64 / hh as f64).round() as usize;
        if lw >= 4 && fits(lh, lw) {
            return Ok((lh, lw));
        }
    }
    Err(Error::shape(format!("HR image {hh}x{hw} is too small for the requested warp footprint")))
}

/// Gaussian blur whose sigma varies per pixel. Each output pixel is the
/// normalized Gaussian-weighted mean of its replicate-padded neighborhood,
/// truncated to a square of radius `ceil(3 sigma)`; `sigma = 0` copies.
pub fn spatially_varying_blur(img: &ImagePlane, sigma_map: &ImagePlane) -> Result<ImagePlane> {
    img.ensure_same_dims(sigma_map, "spatially_varying_blur")?;
    let (h, w) = img.dims();
    let mut out = Vec::with_capacity(h * w);
    let mut taps = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let sigma = sigma_map.get(r, c);
            if sigma <= 0.0 {
                out.push(img.get(r, c));
                continue;
            }
            let radius = (3.0 * sigma).ceil() as isize;
            let denom = 2.0 * sigma * sigma;
            taps.clear();
            taps.extend((-radius..=radius).map(|d| (-((d * d) as f64) / denom).exp()));
            let mut acc = 0.0;
            let mut norm = 0.0;
            for (i, dy) in (-radius..=radius).enumerate() {
                for (j, dx) in (-radius..=radius).enumerate() {
                    let wt = taps[i] * taps[j];
                    acc += wt * img.get_clamped(r as isize + dy, c as isize + dx);
                    norm += wt;
                }
            }
            out.push(acc / norm);
        }
    }
    ImagePlane::new(h, w, out)
}

/// Produces the LR observation of `hr` under `spec`. Returns the LR image
/// together with the truth it was generated from.
pub fn degrade(hr: &ImagePlane, spec: &DegradationSpec) -> Result<(ImagePlane, DegradationSpec)> {
    spec.validate()?;
    let blurred = spatially_varying_blur(hr, &spec.blur_sigma_map)?;
    let (lh, lw) = lr_extent(hr.dims(), &spec.tau_star)?;
    let inv = spec.tau_star.inverse()?;
    let (hcx, hcy) = center(hr.dims());
    let (lcx, lcy) = center((lh, lw));
    let LuminanceParams { alpha, beta } = spec.lum_star;
    let mut lr = ImagePlane::from_fn(lh, lw, |r, c| {
        let (x, y) = inv.apply(c as f64 - lcx, r as f64 - lcy);
        (sample_bilinear(&blurred, x + hcx, y + hcy) - beta) / alpha
    });

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::config(e.to_string()))?;
        for v in lr.data_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    let n = lr.len();
    let count = (spec.outlier_fraction * n as f64).round() as usize;
    if count > 0 {
        for i in sample(&mut rng, n, count).into_iter() {
            lr.data_mut()[i] = rng.gen_range(0.0..=255.0);
        }
    }
    Ok((lr, spec.clone()))
}

/// A registration problem cut from a synthetic pair.
#[derive(Clone, Debug)]
pub struct RegistrationCase {
    pub lr: ImagePlane,
    /// HR reference, cropped symmetrically so the warped LR covers it.
    pub target: ImagePlane,
    /// Ground-truth transform for `target`'s frame.
    pub truth: AffineTransform,
    pub lum: LuminanceParams,
}

/// Degrades `hr` and crops the HR reference by the smallest symmetric
/// margin for which every target pixel maps at least `slack` LR pixels
/// inside the LR image.
pub fn registration_case(hr: &ImagePlane, spec: &DegradationSpec, slack: f64) -> Result<RegistrationCase> {
    let (lr, truth) = degrade(hr, spec)?;
    let (lcx, lcy) = center(lr.dims());
    let (hh, hw) = hr.dims();
    for margin in 0..hh.min(hw) / 2 {
        let (th, tw) = (hh - 2 * margin, hw - 2 * margin);
        let (tcx, tcy) = center((th, tw));
        let inside = [(-tcx, -tcy), (tcx, -tcy), (-tcx, tcy), (tcx, tcy)].iter().all(|&(x, y)| {
            let (u, v) = truth.tau_star.apply(x, y);
            u.abs() <= lcx - slack && v.abs() <= lcy - slack
        });
        if inside && th >= 16 && tw >= 16 {
            return Ok(RegistrationCase {
                lr,
                target: hr.crop(margin, margin, th, tw)?,
                truth: truth.tau_star,
                lum: truth.lum_star,
            });
        }
    }
    Err(Error::shape("no HR crop fits inside the LR footprint"))
}

/// Parameters of a seeded batch of registration problems.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub count: usize,
    /// Side of the square HR source images.
    pub size: usize,
    pub corpus_seed: u64,
    /// Seed for the transform, luminance and degradation draws.
    pub seed: u64,
    pub scale_range: (f64, f64),
    pub max_rotation_deg: f64,
    /// Largest translation, LR pixels.
    pub max_translation: f64,
    pub alpha_range: (f64, f64),
    pub beta_range: (f64, f64),
    /// Blur sigma ramps diagonally across the HR image between these values.
    pub blur_sigma_range: (f64, f64),
    pub noise_sigma: f64,
    pub outlier_fraction: f64,
    /// How far inside the LR image every target pixel must map.
    pub slack: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 20,
            size: 512,
            corpus_seed: 11,
            seed: 7,
            scale_range: (1.9, 3.9),
            max_rotation_deg: 1.0,
            max_translation: 5.0,
            alpha_range: (0.7, 1.4),
            beta_range: (-20.0, 20.0),
            blur_sigma_range: (0.0, 0.0),
            noise_sigma: 0.0,
            outlier_fraction: 0.0,
            slack: 2.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let range_ok = |(a, b): (f64, f64)| a.is_finite() && b.is_finite() && a <= b;
        let ok = self.count > 0
            && self.size >= 16
            && range_ok(self.scale_range)
            && self.scale_range.0 > 0.0
            && range_ok(self.alpha_range)
            && self.alpha_range.0 > 0.0
            && range_ok(self.beta_range)
            && range_ok(self.blur_sigma_range)
            && self.blur_sigma_range.0 >= 0.0
            && self.max_rotation_deg >= 0.0
            && self.max_translation >= 0.0
            && self.slack >= 0.0;
        if !ok {
            return Err(Error::config(format!("invalid synth settings {self:?}")));
        }
        Ok(())
    }
}

/// One generated registration problem with the zoom it was drawn at.
#[derive(Clone, Debug)]
pub struct SuiteCase {
    pub case: RegistrationCase,
    pub zoom: f64,
    pub seed: u64,
}

fn draw(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

fn symmetric(rng: &mut ChaCha8Rng, max: f64) -> f64 {
    draw(rng, (-max, max))
}

/// Draws `count` registration problems from the corpus.
pub fn registration_suite(cfg: &SynthConfig) -> Result<Vec<SuiteCase>> {
    cfg.validate()?;
    let corpus = checker_and_ramp_corpus(cfg.count, cfg.size, cfg.corpus_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (lo, hi) = cfg.blur_sigma_range;
    let denom = (2 * (cfg.size - 1)) as f64;
    let sigma_map = ImagePlane::from_fn(cfg.size, cfg.size, |r, c| lo + (hi - lo) * (r + c) as f64 / denom);
    corpus
        .iter()
        .enumerate()
        .map(|(i, hr)| {
            let zoom = draw(&mut rng, cfg.scale_range);
            let theta = symmetric(&mut rng, cfg.max_rotation_deg).to_radians();
            let tx = symmetric(&mut rng, cfg.max_translation);
            let ty = symmetric(&mut rng, cfg.max_translation);
            let lum = LuminanceParams { alpha: draw(&mut rng, cfg.alpha_range), beta: draw(&mut rng, cfg.beta_range) };
            let seed = cfg.seed.wrapping_mul(1000).wrapping_add(i as u64);
            let spec = DegradationSpec {
                blur_sigma_map: sigma_map.clone(),
                noise_sigma: cfg.noise_sigma,
                outlier_fraction: cfg.outlier_fraction,
                ..DegradationSpec::clean(AffineTransform::similarity(zoom, theta, tx, ty), lum, hr.dims(), seed)
            };
            Ok(SuiteCase { case: registration_case(hr, &spec, cfg.slack)?, zoom, seed })
        })
        .collect()
}

/// Same-size super-resolution training pairs `(lr, hr)`: each HR image from
/// [`checker_and_ramp_corpus`] is blurred with a sigma that ramps
/// diagonally from `sigma_range.0` to `sigma_range.1`, plus Gaussian noise.
pub fn sr_training_pairs(
    n: usize,
    size: usize,
    sigma_range: (f64, f64),
    noise_sigma: f64,
    seed: u64,
) -> Result<Vec<(ImagePlane, ImagePlane)>> {
    let (lo, hi) = sigma_range;
    let denom = (2 * size.saturating_sub(1)).max(1) as f64;
    let sigma_map = ImagePlane::from_fn(size, size, |r, c| lo + (hi - lo) * (r + c) as f64 / denom);
    checker_and_ramp_corpus(n, size, seed)
        .into_iter()
        .enumerate()
        .map(|(i, hr)| {
            let spec = DegradationSpec {
                blur_sigma_map: sigma_map.clone(),
                noise_sigma,
                seed: seed.wrapping_add(i as u64 + 1),
                ..DegradationSpec::identity((size, size))
            };
            degrade(&hr, &spec).map(|(lr, _)| (lr, hr))
        })
        .collect()
}

/// Deterministic smooth test images in `[0, 255]`: soft checkerboards,
/// ramps with a cross-wave, and low-pass random-phase noise, cycling in
/// that order. Feature wavelengths scale with `size`, so the content stays
/// well resolved after the 2-4x zoom of a registration pair.
pub fn checker_and_ramp_corpus(n: usize, size: usize, seed: u64) -> Vec<ImagePlane> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    (0..n)
        .map(|i| match i % 3 {
            0 => soft_checker(size, s * rng.gen_range(0.6..0.9), rng.gen_range(0.0..std::f64::consts::PI), &mut rng),
            1 => ramp(size, &mut rng),
            _ => lowpass_noise(size, &mut rng),
        })
        .collect()
}

fn soft_checker(size: usize, period: f64, theta: f64, rng: &mut ChaCha8Rng) -> ImagePlane {
    let (st, ct) = theta.sin_cos();
    let k = 2.0 * std::f64::consts::PI / period;
    let (px, py) = (rng.gen_range(0.0..6.3), rng.gen_range(0.0..6.3));
    ImagePlane::from_fn(size, size, |r, c| {
        let (x, y) = (c as f64, r as f64);
        let u = ct * x + st * y;
        let v = -st * x + ct * y;
        128.0 + 80.0 * (k * u + px).sin() * (k * v + py).sin() + 20.0 * (0.5 * k * (u + v)).cos()
    })
}

fn ramp(size: usize, rng: &mut ChaCha8Rng) -> ImagePlane {
    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
    let (st, ct) = theta.sin_cos();
    let s = size as f64;
    let k = 2.0 * std::f64::consts::PI / (s * rng.gen_range(0.5..0.8));
    let (pu, pv) = (rng.gen_range(0.0..6.3), rng.gen_range(0.0..6.3));
    ImagePlane::from_fn(size, size, |r, c| {
        let (x, y) = (c as f64 - 0.5 * s, r as f64 - 0.5 * s);
        let u = ct * x + st * y;
        let v = -st * x + ct * y;
        128.0 + 60.0 * u / s + 60.0 * (k * u + pu).sin() * (k * v + pv).sin()
    })
}

fn lowpass_noise(size: usize, rng: &mut ChaCha8Rng) -> ImagePlane {
    let s = size as f64;
    let waves: Vec<(f64, f64, f64, f64)> = (0..12)
        .map(|_| {
            let theta = rng.gen_range(0.0..std::f64::consts::TAU);
            let k = 2.0 * std::f64::consts::PI / (s * rng.gen_range(0.4..0.8));
            (k * theta.cos(), k * theta.sin(), rng.gen_range(0.0..6.3), rng.gen_range(0.5..1.0))
        })
        .collect();
    let raw = ImagePlane::from_fn(size, size, |r, c| {
        let (x, y) = (c as f64, r as f64);
        waves.iter().map(|&(kx, ky, ph, amp)| amp * (kx * x + ky * y + ph).cos()).sum()
    });
    let (m, sd) = (raw.mean(), raw.std().max(1e-9));
    raw.map(|v| (128.0 + 40.0 * (v - m) / sd).clamp(0.0, 255.0))
}
