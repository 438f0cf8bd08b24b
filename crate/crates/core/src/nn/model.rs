use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    conv2d_backward_into, conv2d_forward, pixel_shuffle, pixel_unshuffle, relu, relu_backward,
    residual_block_backward_into, residual_block_traced, BlockTrace, ConvLayer, FeatureMap, ResidualBlock,
};
use crate::error::{Error, Result};
use crate::image::ImagePlane;
use crate::kpn::KernelTensor;

/// Inputs are divided by this before entering the network.
pub const INPUT_SCALE: f64 = 255.0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_res_blocks: usize,
    pub width: usize,
    pub k: usize,
    pub shuffle_factor: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { num_res_blocks: 2, width: 8, k: 5, shuffle_factor: 4 }
    }
}

impl ModelConfig {
    pub fn full_scale() -> Self {
        Self { num_res_blocks: 16, width: 64, k: 5, shuffle_factor: 4 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k.is_multiple_of(2) || self.k == 0 {
            return Err(Error::config(format!("model.k must be odd, got {}", self.k)));
        }
        if self.width == 0 {
            return Err(Error::config("model.width must be at least 1"));
        }
        if self.shuffle_factor < 4 || !self.shuffle_factor.is_power_of_two() {
            return Err(Error::config(format!(
                "model.shuffle_factor must be a power of two >= 4, got {}",
                self.shuffle_factor
            )));
        }
        Ok(())
    }

    /// Channels entering the trunk after the input shuffle.
    pub fn input_channels(&self) -> usize {
        self.shuffle_factor * self.shuffle_factor
    }

    /// Channels leaving the trunk: `width` rounded up so the largest head
    /// shuffle leaves at least one channel.
    pub fn tail_channels(&self) -> usize {
        let r2 = self.shuffle_factor * self.shuffle_factor;
        self.width.div_ceil(r2) * r2
    }

    /// Upsampling factor of the head feeding pyramid level `level`.
    pub fn head_shuffle(&self, level: usize) -> usize {
        self.shuffle_factor >> level
    }

    pub fn head_input_channels(&self, level: usize) -> usize {
        let r = self.head_shuffle(level);
        self.tail_channels() / (r * r)
    }

    pub fn kernel_channels(&self) -> usize {
        self.k * self.k
    }
}

/// Three convolutions turning shuffled trunk features into one kernel tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
    pub out: ConvLayer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LpkpnParams {
    pub conv_in: ConvLayer,
    pub blocks: Vec<ResidualBlock>,
    pub tail: ConvLayer,
    pub heads: [Head; 3],
}

impl LpkpnParams {
    fn build(cfg: &ModelConfig, mut make: impl FnMut(usize, usize) -> ConvLayer) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.width;
        let conv_in = make(cfg.input_channels(), w);
        let blocks = (0..cfg.num_res_blocks)
            .map(|_| ResidualBlock { conv1: make(w, w), conv2: make(w, w) })
            .collect();
        let tail = make(w, cfg.tail_channels());
        let mut head = |level: usize| Head {
            conv1: make(cfg.head_input_channels(level), w),
            conv2: make(w, w),
            out: make(w, cfg.kernel_channels()),
        };
        let heads = [head(0), head(1), head(2)];
        Ok(Self { conv_in, blocks, tail, heads })
    }

    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        Self::build(cfg, ConvLayer::zeros)
    }

    /// He fan-in normal initialization from a seed.
    pub fn he_init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(cfg, |i, o| ConvLayer::he_init(i, o, &mut rng))
    }

    /// A zeroed parameter set with the same shapes.
    pub fn zeros_like(&self) -> Self {
        let z = |c: &ConvLayer| ConvLayer::zeros(c.in_channels, c.out_channels);
        let zh = |h: &Head| Head { conv1: z(&h.conv1), conv2: z(&h.conv2), out: z(&h.out) };
        Self {
            conv_in: z(&self.conv_in),
            blocks: self.blocks.iter().map(|b| ResidualBlock { conv1: z(&b.conv1), conv2: z(&b.conv2) }).collect(),
            tail: z(&self.tail),
            heads: [zh(&self.heads[0]), zh(&self.heads[1]), zh(&self.heads[2])],
        }
    }

    /// Every convolution with a stable name, in a fixed order.
    pub fn layers(&self) -> Vec<(String, &ConvLayer)> {
        let mut out = vec![("conv_in".to_string(), &self.conv_in)];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.conv1"), &b.conv1));
            out.push((format!("block{i}.conv2"), &b.conv2));
        }
        out.push(("tail".to_string(), &self.tail));
        for (l, h) in self.heads.iter().enumerate() {
            out.push((format!("head{l}.conv1"), &h.conv1));
            out.push((format!("head{l}.conv2"), &h.conv2));
            out.push((format!("head{l}.out"), &h.out));
        }
        out
    }

    pub fn layers_mut(&mut self) -> Vec<&mut ConvLayer> {
        let mut out = vec![&mut self.conv_in];
        for b in &mut self.blocks {
            out.push(&mut b.conv1);
            out.push(&mut b.conv2);
        }
        out.push(&mut self.tail);
        for h in &mut self.heads {
            out.push(&mut h.conv1);
            out.push(&mut h.conv2);
            out.push(&mut h.out);
        }
        out
    }

    /// Weight and bias slices of every layer, in [`Self::layers`] order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers().into_iter().flat_map(|(_, l)| [l.weights.as_slice(), l.bias.as_slice()]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers_mut()
            .into_iter()
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers().iter().map(|(_, l)| l.num_params()).sum()
    }

    /// All parameters concatenated in [`Self::tensors`] order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::shape(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut off = 0;
        for t in self.tensors_mut() {
            t.copy_from_slice(&flat[off..off + t.len()]);
            off += t.len();
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct HeadTrace {
    input: FeatureMap,
    pre1: FeatureMap,
    act1: FeatureMap,
    pre2: FeatureMap,
    act2: FeatureMap,
}

/// Activations recorded by [`lpkpn_forward_traced`] for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    input: FeatureMap,
    in_pre: FeatureMap,
    blocks: Vec<BlockTrace>,
    trunk: FeatureMap,
    tail_pre: FeatureMap,
    heads: Vec<HeadTrace>,
}

/// `(in, out)` channel counts of every layer, in [`LpkpnParams::layers`] order.
fn layer_shapes(cfg: &ModelConfig) -> Vec<(usize, usize)> {
    let w = cfg.width;
    let mut shapes = vec![(cfg.input_channels(), w)];
    shapes.extend(std::iter::repeat_n((w, w), 2 * cfg.num_res_blocks));
    shapes.push((w, cfg.tail_channels()));
    for level in 0..3 {
        shapes.extend([(cfg.head_input_channels(level), w), (w, w), (w, cfg.kernel_channels())]);
    }
    shapes
}

fn check_params(cfg: &ModelConfig, params: &LpkpnParams) -> Result<()> {
    cfg.validate()?;
    let shapes: Vec<_> = params.layers().iter().map(|(_, l)| (l.in_channels, l.out_channels)).collect();
    if shapes != layer_shapes(cfg) {
        return Err(Error::shape("parameters do not match the model configuration"));
    }
    Ok(())
}

fn to_kernels(fm: FeatureMap, k: usize) -> Result<KernelTensor> {
    let (_, h, w) = fm.dims();
    KernelTensor::new(k, h, w, fm.into_data())
}

/// Predicts the three kernel tensors and keeps the activations needed by
/// [`lpkpn_backward`].
pub fn lpkpn_forward_traced(
    y: &ImagePlane,
    cfg: &ModelConfig,
    params: &LpkpnParams,
) -> Result<([KernelTensor; 3], ForwardTrace)> {
    check_params(cfg, params)?;
    let r = cfg.shuffle_factor;
    let (h, w) = y.dims();
    if h % r != 0 || w % r != 0 || h == 0 || w == 0 {
        return Err(Error::shape(format!("network input {h}x{w} must be a positive multiple of {r}")));
    }
    let scaled = FeatureMap::from_plane(&y.map(|v| v / INPUT_SCALE));
    let input = pixel_unshuffle(&scaled, r)?;
    let in_pre = conv2d_forward(&input, &params.conv_in)?;
    let mut x = relu(&in_pre);
    let mut blocks = Vec::with_capacity(params.blocks.len());
    for b in &params.blocks {
        let (out, trace) = residual_block_traced(&x, b)?;
        blocks.push(trace);
        x = out;
    }
    let trunk = x;
    let tail_pre = conv2d_forward(&trunk, &params.tail)?;
    let tail_act = relu(&tail_pre);
    let mut heads = Vec::with_capacity(3);
    let mut tensors = Vec::with_capacity(3);
    for (level, head) in params.heads.iter().enumerate() {
        let input = pixel_shuffle(&tail_act, cfg.head_shuffle(level))?;
        let pre1 = conv2d_forward(&input, &head.conv1)?;
        let act1 = relu(&pre1);
        let pre2 = conv2d_forward(&act1, &head.conv2)?;
        let act2 = relu(&pre2);
        tensors.push(to_kernels(conv2d_forward(&act2, &head.out)?, cfg.k)?);
        heads.push(HeadTrace { input, pre1, act1, pre2, act2 });
    }
    let t2 = tensors.pop().expect("three heads");
    let t1 = tensors.pop().expect("three heads");
    let t0 = tensors.pop().expect("three heads");
    Ok(([t0, t1, t2], ForwardTrace { input, in_pre, blocks, trunk, tail_pre, heads }))
}

pub fn lpkpn_forward(
    y: &ImagePlane,
    cfg: &ModelConfig,
    params: &LpkpnParams,
) -> Result<(KernelTensor, KernelTensor, KernelTensor)> {
    let ([t0, t1, t2], _) = lpkpn_forward_traced(y, cfg, params)?;
    Ok((t0, t1, t2))
}

/// Adds the parameter gradients for the given kernel-tensor gradients
/// into `acc`.
pub fn lpkpn_backward(
    trace: &ForwardTrace,
    cfg: &ModelConfig,
    params: &LpkpnParams,
    grads: [&KernelTensor; 3],
    acc: &mut LpkpnParams,
) -> Result<()> {
    check_params(cfg, params)?;
    check_params(cfg, acc)?;
    let mut g_tail: Option<FeatureMap> = None;
    for (level, ((head, ht), g)) in params.heads.iter().zip(&trace.heads).zip(grads).enumerate() {
        let (hh, hw) = g.dims();
        let g_out = FeatureMap::new(g.k() * g.k(), hh, hw, g.data().to_vec())?;
        let ha = &mut acc.heads[level];
        let g2 = conv2d_backward_into(&ht.act2, &head.out, &g_out, &mut ha.out, true)?.expect("requested");
        let g2 = relu_backward(&ht.pre2, &g2)?;
        let g1 = conv2d_backward_into(&ht.act1, &head.conv2, &g2, &mut ha.conv2, true)?.expect("requested");
        let g1 = relu_backward(&ht.pre1, &g1)?;
        let g_in = conv2d_backward_into(&ht.input, &head.conv1, &g1, &mut ha.conv1, true)?.expect("requested");
        let g_t = pixel_unshuffle(&g_in, cfg.head_shuffle(level))?;
        match g_tail.as_mut() {
            Some(acc_g) => acc_g.add_assign(&g_t)?,
            None => g_tail = Some(g_t),
        }
    }
    let g_tail = relu_backward(&trace.tail_pre, &g_tail.expect("three heads"))?;
    let mut g = conv2d_backward_into(&trace.trunk, &params.tail, &g_tail, &mut acc.tail, true)?.expect("requested");
    for ((block, bt), ba) in params.blocks.iter().zip(&trace.blocks).zip(acc.blocks.iter_mut()).rev() {
        g = residual_block_backward_into(bt, block, &g, ba)?;
    }
    let g = relu_backward(&trace.in_pre, &g)?;
    conv2d_backward_into(&trace.input, &params.conv_in, &g, &mut acc.conv_in, false)?;
    Ok(())
}
