use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamConfig, AdamState};
use super::model::{lpkpn_backward, lpkpn_forward_traced, ForwardTrace, LpkpnParams, ModelConfig};
use crate::error::{Error, Result};
use crate::image::ImagePlane;
use crate::kpn::{apply_lp_kpn, apply_lp_kpn_grad, KernelTensor};
use crate::pyramid::{decompose, LaplacianPyramid};

/// Sum of squared differences and its gradient `2 (pred - target)`.
pub fn loss_l2(pred: &ImagePlane, target: &ImagePlane) -> Result<(f64, ImagePlane)> {
    pred.ensure_same_dims(target, "loss_l2")?;
    let loss = pred.data().iter().zip(target.data()).map(|(p, t)| (p - t) * (p - t)).sum();
    let grad = pred.zip_map(target, |p, t| 2.0 * (p - t))?;
    Ok((loss, grad))
}

struct Forward {
    tensors: [KernelTensor; 3],
    trace: ForwardTrace,
    pyramid: LaplacianPyramid,
    prediction: ImagePlane,
}

fn padded_dims(h: usize, w: usize, r: usize) -> (usize, usize) {
    (h.next_multiple_of(r).max(r), w.next_multiple_of(r).max(r))
}

fn forward(lr: &ImagePlane, cfg: &ModelConfig, params: &LpkpnParams) -> Result<Forward> {
    let (h, w) = lr.dims();
    let (ph, pw) = padded_dims(h, w, cfg.shuffle_factor);
    let padded = lr.pad_replicate(ph, pw)?;
    let (tensors, trace) = lpkpn_forward_traced(&padded, cfg, params)?;
    let pyramid = decompose(&padded)?;
    let [t0, t1, t2] = &tensors;
    let prediction = apply_lp_kpn(&pyramid, t0, t1, t2)?.crop(0, 0, h, w)?;
    Ok(Forward { tensors, trace, pyramid, prediction })
}

/// Runs the network on `lr`, filters its pyramid with the predicted kernels
/// and reconstructs. Inputs that are not a multiple of the shuffle factor
/// are replicate-padded and the result cropped back.
pub fn predict(lr: &ImagePlane, cfg: &ModelConfig, params: &LpkpnParams) -> Result<ImagePlane> {
    forward(lr, cfg, params).map(|f| f.prediction)
}

/// Loss for one pair, with parameter gradients added into `acc`.
fn pair_loss_grad(
    lr: &ImagePlane,
    hr: &ImagePlane,
    cfg: &ModelConfig,
    params: &LpkpnParams,
    acc: &mut LpkpnParams,
) -> Result<f64> {
    lr.ensure_same_dims(hr, "training pair")?;
    let f = forward(lr, cfg, params)?;
    let (loss, grad) = loss_l2(&f.prediction, hr)?;
    let (ph, pw) = f.pyramid.s0.dims();
    let mut padded = ImagePlane::zeros(ph, pw);
    for r in 0..grad.height() {
        padded.data_mut()[r * pw..r * pw + grad.width()].copy_from_slice(grad.row(r));
    }
    let [t0, t1, t2] = &f.tensors;
    let [g0, g1, g2] = apply_lp_kpn_grad(&f.pyramid, [t0, t1, t2], &padded)?;
    lpkpn_backward(&f.trace, cfg, params, [&g0, &g1, &g2], acc)?;
    Ok(loss)
}

/// Loss of `pairs` under `params` and its gradient.
pub fn loss_and_grad(
    pairs: &[(ImagePlane, ImagePlane)],
    cfg: &ModelConfig,
    params: &LpkpnParams,
) -> Result<(f64, LpkpnParams)> {
    let mut acc = params.zeros_like();
    let mut total = 0.0;
    for (lr, hr) in pairs {
        total += pair_loss_grad(lr, hr, cfg, params, &mut acc)?;
    }
    Ok((total, acc))
}

/// Mean per-pair L2 loss.
pub fn dataset_loss(pairs: &[(ImagePlane, ImagePlane)], cfg: &ModelConfig, params: &LpkpnParams) -> Result<f64> {
    let mut total = 0.0;
    for (lr, hr) in pairs {
        total += loss_l2(&predict(lr, cfg, params)?, hr)?.0;
    }
    Ok(total / pairs.len().max(1) as f64)
}

/// One of the eight rotations and flips of the square's symmetry group:
/// `d % 4` quarter turns, then a horizontal flip when `d >= 4`.
pub fn dihedral(img: &ImagePlane, d: u8) -> ImagePlane {
    let mut out = img.clone();
    for _ in 0..d % 4 {
        let (h, w) = out.dims();
        let src = out;
        out = ImagePlane::from_fn(w, h, |r, c| src.get(h - 1 - c, r));
    }
    if d >= 4 {
        let w = out.width();
        let src = out;
        out = ImagePlane::from_fn(src.height(), w, |r, c| src.get(r, w - 1 - c));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iters: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Random rotations and flips of each sampled pair.
    pub augment: bool,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { iters: 2000, batch_size: 4, seed: 0, augment: true, adam: AdamConfig::default() }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size must be at least 1"));
        }
        self.adam.validate()
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: LpkpnParams,
    /// Mean per-pair loss of each mini-batch before its update, followed by
    /// the mean loss over all pairs at the final parameters.
    pub loss_curve: Vec<f64>,
    /// Mean loss over all (unaugmented) pairs at initialization.
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Trains from a seeded He initialization.
pub fn train_toy(pairs: &[(ImagePlane, ImagePlane)], cfg: &ModelConfig, train: &TrainConfig) -> Result<TrainOutcome> {
    let params = LpkpnParams::he_init(cfg, train.seed)?;
    train_from(pairs, cfg, train, params)
}

pub fn train_from(
    pairs: &[(ImagePlane, ImagePlane)],
    cfg: &ModelConfig,
    train: &TrainConfig,
    mut params: LpkpnParams,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    train.validate()?;
    if pairs.is_empty() {
        return Err(Error::config("training needs at least one pair"));
    }
    let check = |loss: f64, when: &str| {
        if loss.is_finite() {
            Ok(loss)
        } else {
            Err(Error::Diverge(format!("non-finite training loss {when}")))
        }
    };
    let initial_loss = check(dataset_loss(pairs, cfg, &params)?, "at initialization")?;
    let lens: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    let mut adam = AdamState::new(&lens, train.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0x5eed_ba7c);
    let mut curve = Vec::with_capacity(train.iters + 1);
    for it in 0..train.iters {
        let idx: Vec<usize> = if pairs.len() <= train.batch_size {
            (0..pairs.len()).collect()
        } else {
            rand::seq::index::sample(&mut rng, pairs.len(), train.batch_size).into_vec()
        };
        let mut acc = params.zeros_like();
        let mut total = 0.0;
        for &i in &idx {
            let (lr, hr) = &pairs[i];
            total += if train.augment {
                let d = rng.gen_range(0..8u8);
                pair_loss_grad(&dihedral(lr, d), &dihedral(hr, d), cfg, &params, &mut acc)?
            } else {
                pair_loss_grad(lr, hr, cfg, &params, &mut acc)?
            };
        }
        curve.push(check(total / idx.len() as f64, &format!("at iteration {it}"))?);
        let grads = acc.tensors();
        adam_step(&mut params.tensors_mut(), &grads, &mut adam)?;
    }
    let final_loss = if train.iters == 0 {
        initial_loss
    } else {
        check(dataset_loss(pairs, cfg, &params)?, "after training")?
    };
    curve.push(final_loss);
    Ok(TrainOutcome { params, loss_curve: curve, initial_loss, final_loss })
}
