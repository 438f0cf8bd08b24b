//! PSNR and SSIM on the luma channel.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{crop_center, rgb_to_y_with, ImagePlane, LumaStandard, RgbImage};

/// Reported PSNR for (near-)identical images.
pub const PSNR_CAP: f64 = 100.0;

pub fn psnr(a: &ImagePlane, b: &ImagePlane, peak: f64) -> Result<f64> {
    a.ensure_same_dims(b, "psnr")?;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse < 1e-12 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SsimConfig {
    /// Side of the square Gaussian window; odd.
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self { window: 11, sigma: 1.5, k1: 0.01, k2: 0.03, dynamic_range: 255.0 }
    }
}

impl SsimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.window.is_multiple_of(2) {
            return Err(Error::config("SSIM window must be a positive odd size"));
        }
        if !(self.sigma > 0.0 && self.k1 > 0.0 && self.k2 > 0.0 && self.dynamic_range > 0.0) {
            return Err(Error::config("SSIM sigma, k1, k2 and dynamic range must be positive"));
        }
        Ok(())
    }

    /// Normalized 1-D taps; the 2-D window is their outer product.
    pub fn taps(&self) -> Vec<f64> {
        let r = (self.window / 2) as f64;
        let raw: Vec<f64> = (0..self.window)
            .map(|i| {
                let d = i as f64 - r;
                (-d * d / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / total).collect()
    }
}

/// Separable weighted sum over every window that fits inside the image.
fn filter_valid(img: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let n = taps.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        let line = &img[r * w..(r + 1) * w];
        for c in 0..ow {
            rows[r * ow + c] = taps.iter().zip(&line[c..c + n]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for (k, t) in taps.iter().enumerate() {
            let src = &rows[(r + k) * ow..(r + k + 1) * ow];
            for (o, v) in out[r * ow..(r + 1) * ow].iter_mut().zip(src) {
                *o += t * v;
            }
        }
    }
    out
}

/// Mean SSIM over all windows lying fully inside the image.
pub fn ssim(a: &ImagePlane, b: &ImagePlane, cfg: &SsimConfig) -> Result<f64> {
    cfg.validate()?;
    a.ensure_same_dims(b, "ssim")?;
    let (h, w) = a.dims();
    if h < cfg.window || w < cfg.window {
        return Err(Error::shape(format!("ssim needs at least {0}x{0} pixels, got {h}x{w}", cfg.window)));
    }
    let taps = cfg.taps();
    let (x, y) = (a.data(), b.data());
    let prod = |f: fn(f64, f64) -> f64| x.iter().zip(y).map(|(&p, &q)| f(p, q)).collect::<Vec<_>>();
    let mu_a = filter_valid(x, h, w, &taps);
    let mu_b = filter_valid(y, h, w, &taps);
    let e_aa = filter_valid(&prod(|p, _| p * p), h, w, &taps);
    let e_bb = filter_valid(&prod(|_, q| q * q), h, w, &taps);
    let e_ab = filter_valid(&prod(|p, q| p * q), h, w, &taps);
    let c1 = (cfg.k1 * cfg.dynamic_range).powi(2);
    let c2 = (cfg.k2 * cfg.dynamic_range).powi(2);
    let total: f64 = (0..mu_a.len())
        .map(|i| ssim_window(mu_a[i], mu_b[i], e_aa[i], e_bb[i], e_ab[i], c1, c2))
        .sum();
    Ok(total / mu_a.len() as f64)
}

/// SSIM of one window from its weighted first and second moments. The
/// symmetric form makes `a == b` evaluate to exactly one.
#[inline]
pub(crate) fn ssim_window(mu_a: f64, mu_b: f64, e_aa: f64, e_bb: f64, e_ab: f64, c1: f64, c2: f64) -> f64 {
    let var_a = e_aa - mu_a * mu_a;
    let var_b = e_bb - mu_b * mu_b;
    let cov = e_ab - mu_a * mu_b;
    ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)) / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    /// Pixels removed from every border before scoring; 0 keeps all.
    pub shave: usize,
    pub luma: LumaStandard,
    pub ssim: SsimConfig,
}

/// `(psnr, ssim)` of a prediction against ground truth on the Y channel.
pub fn evaluate_pair(pred: &RgbImage, gt: &RgbImage) -> Result<(f64, f64)> {
    evaluate_pair_with(pred, gt, &MetricsConfig::default())
}

pub fn evaluate_pair_with(pred: &RgbImage, gt: &RgbImage, cfg: &MetricsConfig) -> Result<(f64, f64)> {
    if pred.dims() != gt.dims() {
        return Err(Error::shape(format!("prediction is {:?} but ground truth is {:?}", pred.dims(), gt.dims())));
    }
    evaluate_planes(&rgb_to_y_with(pred, cfg.luma), &rgb_to_y_with(gt, cfg.luma), cfg)
}

/// Scores two luma planes, shaving `cfg.shave` pixels from each border.
pub fn evaluate_planes(pred: &ImagePlane, gt: &ImagePlane, cfg: &MetricsConfig) -> Result<(f64, f64)> {
    pred.ensure_same_dims(gt, "evaluate")?;
    let (h, w) = pred.dims();
    let (pred, gt) = if cfg.shave > 0 {
        let (sh, sw) = (h.saturating_sub(2 * cfg.shave), w.saturating_sub(2 * cfg.shave));
        if sh == 0 || sw == 0 {
            return Err(Error::shape(format!("shave {} leaves nothing of a {h}x{w} image", cfg.shave)));
        }
        (crop_center(pred, sh, sw)?, crop_center(gt, sh, sw)?)
    } else {
        (pred.clone(), gt.clone())
    };
    Ok((psnr(&pred, &gt, 255.0)?, ssim(&pred, &gt, &cfg.ssim)?))
}
