//! Building blocks: feature maps, 3x3 convolutions, ReLU, residual blocks
//! and pixel (un)shuffling.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::image::ImagePlane;

/// Channel-major activation tensor `C x H x W`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape(format!(
                "feature map has {} values, expected {channels}x{height}x{width}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate("feature map contains non-finite values".into()));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    pub fn from_plane(img: &ImagePlane) -> Self {
        let (h, w) = img.dims();
        Self { channels: 1, height: h, width: w, data: img.data().to_vec() }
    }

    /// `(channels, height, width)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn add_assign(&mut self, other: &FeatureMap) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::shape(format!("cannot add {:?} to {:?}", other.dims(), self.dims())));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }
}

/// 3x3 convolution, stride 1, zero padding 1. Weights are `[out][in][ky][kx]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvLayer {
    pub fn new(in_channels: usize, out_channels: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::shape("convolution needs at least one input and output channel"));
        }
        if weights.len() != out_channels * in_channels * 9 || bias.len() != out_channels {
            return Err(Error::shape(format!(
                "conv {in_channels}->{out_channels} needs {} weights and {out_channels} biases, got {} and {}",
                out_channels * in_channels * 9,
                weights.len(),
                bias.len()
            )));
        }
        Ok(Self { in_channels, out_channels, weights, bias })
    }

    pub fn zeros(in_channels: usize, out_channels: usize) -> Self {
        Self { in_channels, out_channels, weights: vec![0.0; out_channels * in_channels * 9], bias: vec![0.0; out_channels] }
    }

    /// He fan-in normal weights, zero bias.
    pub fn he_init(in_channels: usize, out_channels: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / (in_channels * 9) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let weights = (0..out_channels * in_channels * 9).map(|_| normal.sample(rng)).collect();
        Self { in_channels, out_channels, weights, bias: vec![0.0; out_channels] }
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    fn weight(&self, o: usize, i: usize, ky: usize, kx: usize) -> f64 {
        self.weights[((o * self.in_channels + i) * 3 + ky) * 3 + kx]
    }

    fn check_input(&self, x: &FeatureMap) -> Result<()> {
        if x.channels != self.in_channels {
            return Err(Error::shape(format!(
                "conv expects {} input channels, got {}",
                self.in_channels, x.channels
            )));
        }
        Ok(())
    }
}

/// For a tap offset `k - 1` in {-1, 0, 1}: the destination range and the
/// matching source start along one axis of length `n`.
fn tap_span(n: usize, k: usize) -> (usize, usize, usize) {
    match k {
        0 => (1, n, 0),
        1 => (0, n, 0),
        _ => (0, n.saturating_sub(1), 1),
    }
}

pub fn conv2d_forward(x: &FeatureMap, layer: &ConvLayer) -> Result<FeatureMap> {
    layer.check_input(x)?;
    let (h, w) = (x.height, x.width);
    let n = h * w;
    let mut out = vec![0.0; layer.out_channels * n];
    for o in 0..layer.out_channels {
        let dst = &mut out[o * n..(o + 1) * n];
        dst.fill(layer.bias[o]);
        for i in 0..layer.in_channels {
            let src = x.channel(i);
            for ky in 0..3 {
                let (y0, y1, sy0) = tap_span(h, ky);
                for kx in 0..3 {
                    let wt = layer.weight(o, i, ky, kx);
                    if wt == 0.0 {
                        continue;
                    }
                    let (x0, x1, sx0) = tap_span(w, kx);
                    for y in y0..y1 {
                        let sy = y + sy0 - y0;
                        let d = &mut dst[y * w + x0..y * w + x1];
                        let s = &src[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                        for (a, &b) in d.iter_mut().zip(s) {
                            *a += wt * b;
                        }
                    }
                }
            }
        }
    }
    Ok(FeatureMap { channels: layer.out_channels, height: h, width: w, data: out })
}

/// Accumulates parameter gradients into `acc` and, when requested, returns
/// the input gradient.
pub(crate) fn conv2d_backward_into(
    x: &FeatureMap,
    layer: &ConvLayer,
    grad_out: &FeatureMap,
    acc: &mut ConvLayer,
    want_input: bool,
) -> Result<Option<FeatureMap>> {
    layer.check_input(x)?;
    if grad_out.dims() != (layer.out_channels, x.height, x.width) {
        return Err(Error::shape(format!(
            "conv output gradient {:?} does not match ({}, {}, {})",
            grad_out.dims(),
            layer.out_channels,
            x.height,
            x.width
        )));
    }
    if acc.in_channels != layer.in_channels || acc.out_channels != layer.out_channels {
        return Err(Error::shape("gradient accumulator does not match layer"));
    }
    let (h, w) = (x.height, x.width);
    let n = h * w;
    let mut gin = if want_input { vec![0.0; layer.in_channels * n] } else { Vec::new() };
    for o in 0..layer.out_channels {
        let g = grad_out.channel(o);
        acc.bias[o] += g.iter().sum::<f64>();
        for i in 0..layer.in_channels {
            let src = x.channel(i);
            for ky in 0..3 {
                let (y0, y1, sy0) = tap_span(h, ky);
                for kx in 0..3 {
                    let (x0, x1, sx0) = tap_span(w, kx);
                    let len = x1 - x0;
                    let wt = layer.weight(o, i, ky, kx);
                    let mut dw = 0.0;
                    for y in y0..y1 {
                        let sy = y + sy0 - y0;
                        let gr = &g[y * w + x0..y * w + x1];
                        let s = &src[sy * w + sx0..sy * w + sx0 + len];
                        dw += gr.iter().zip(s).map(|(a, b)| a * b).sum::<f64>();
                        if want_input && wt != 0.0 {
                            let d = &mut gin[i * n + sy * w + sx0..i * n + sy * w + sx0 + len];
                            for (a, &b) in d.iter_mut().zip(gr) {
                                *a += wt * b;
                            }
                        }
                    }
                    acc.weights[((o * layer.in_channels + i) * 3 + ky) * 3 + kx] += dw;
                }
            }
        }
    }
    Ok(want_input.then_some(FeatureMap { channels: layer.in_channels, height: h, width: w, data: gin }))
}

/// Returns `(parameter gradients, input gradient)`.
pub fn conv2d_backward(x: &FeatureMap, layer: &ConvLayer, grad_out: &FeatureMap) -> Result<(ConvLayer, FeatureMap)> {
    let mut acc = ConvLayer::zeros(layer.in_channels, layer.out_channels);
    let gin = conv2d_backward_into(x, layer, grad_out, &mut acc, true)?.expect("input gradient requested");
    Ok((acc, gin))
}

pub fn relu(x: &FeatureMap) -> FeatureMap {
    let mut out = x.clone();
    for v in &mut out.data {
        *v = v.max(0.0);
    }
    out
}

/// Passes the gradient where the pre-activation is strictly positive.
pub fn relu_backward(pre: &FeatureMap, grad: &FeatureMap) -> Result<FeatureMap> {
    if pre.dims() != grad.dims() {
        return Err(Error::shape("relu gradient shape mismatch"));
    }
    let data = pre.data.iter().zip(&grad.data).map(|(&p, &g)| if p > 0.0 { g } else { 0.0 }).collect();
    Ok(FeatureMap { channels: pre.channels, height: pre.height, width: pre.width, data })
}

/// Two convolutions of a residual block, `x + c2(relu(c1(x)))`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock {
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
}

impl ResidualBlock {
    pub fn zeros(channels: usize) -> Self {
        Self { conv1: ConvLayer::zeros(channels, channels), conv2: ConvLayer::zeros(channels, channels) }
    }

    pub fn he_init(channels: usize, rng: &mut impl Rng) -> Self {
        Self { conv1: ConvLayer::he_init(channels, channels, rng), conv2: ConvLayer::he_init(channels, channels, rng) }
    }
}

/// Intermediate values a residual block needs for its backward pass.
#[derive(Clone, Debug)]
pub struct BlockTrace {
    pub input: FeatureMap,
    pub hidden_pre: FeatureMap,
    pub hidden: FeatureMap,
}

fn check_block(x: &FeatureMap, block: &ResidualBlock) -> Result<()> {
    let c = x.channels;
    for conv in [&block.conv1, &block.conv2] {
        if conv.in_channels != c || conv.out_channels != c {
            return Err(Error::shape(format!(
                "residual block must preserve {c} channels, found a {}->{} conv",
                conv.in_channels, conv.out_channels
            )));
        }
    }
    Ok(())
}

pub fn residual_block_traced(x: &FeatureMap, block: &ResidualBlock) -> Result<(FeatureMap, BlockTrace)> {
    check_block(x, block)?;
    let hidden_pre = conv2d_forward(x, &block.conv1)?;
    let hidden = relu(&hidden_pre);
    let mut out = conv2d_forward(&hidden, &block.conv2)?;
    out.add_assign(x)?;
    Ok((out, BlockTrace { input: x.clone(), hidden_pre, hidden }))
}

pub fn residual_block(x: &FeatureMap, block: &ResidualBlock) -> Result<FeatureMap> {
    residual_block_traced(x, block).map(|(out, _)| out)
}

pub(crate) fn residual_block_backward_into(
    trace: &BlockTrace,
    block: &ResidualBlock,
    grad_out: &FeatureMap,
    acc: &mut ResidualBlock,
) -> Result<FeatureMap> {
    let g_hidden = conv2d_backward_into(&trace.hidden, &block.conv2, grad_out, &mut acc.conv2, true)?
        .expect("input gradient requested");
    let g_pre = relu_backward(&trace.hidden_pre, &g_hidden)?;
    let mut g_in = conv2d_backward_into(&trace.input, &block.conv1, &g_pre, &mut acc.conv1, true)?
        .expect("input gradient requested");
    g_in.add_assign(grad_out)?;
    Ok(g_in)
}

/// Returns `(parameter gradients, input gradient)`.
pub fn residual_block_backward(
    trace: &BlockTrace,
    block: &ResidualBlock,
    grad_out: &FeatureMap,
) -> Result<(ResidualBlock, FeatureMap)> {
    let mut acc = ResidualBlock::zeros(block.conv1.in_channels);
    let g = residual_block_backward_into(trace, block, grad_out, &mut acc)?;
    Ok((acc, g))
}

/// `C x rH x rW -> C r^2 x H x W`; channel `c r^2 + i r + j` holds the
/// pixels at offset `(i, j)` of every `r x r` block.
pub fn pixel_unshuffle(x: &FeatureMap, r: usize) -> Result<FeatureMap> {
    if r == 0 || !x.height.is_multiple_of(r) || !x.width.is_multiple_of(r) {
        return Err(Error::shape(format!(
            "{}x{} is not divisible by shuffle factor {r}",
            x.height, x.width
        )));
    }
    let (h, w) = (x.height / r, x.width / r);
    let mut out = Vec::with_capacity(x.data.len());
    for c in 0..x.channels {
        let src = x.channel(c);
        for i in 0..r {
            for j in 0..r {
                for y in 0..h {
                    let row = &src[(y * r + i) * x.width..(y * r + i + 1) * x.width];
                    out.extend((0..w).map(|xx| row[xx * r + j]));
                }
            }
        }
    }
    Ok(FeatureMap { channels: x.channels * r * r, height: h, width: w, data: out })
}

/// Inverse of [`pixel_unshuffle`].
pub fn pixel_shuffle(x: &FeatureMap, r: usize) -> Result<FeatureMap> {
    if r == 0 || !x.channels.is_multiple_of(r * r) {
        return Err(Error::shape(format!(
            "{} channels are not divisible by {}",
            x.channels,
            r * r
        )));
    }
    let c_out = x.channels / (r * r);
    let (h, w) = (x.height * r, x.width * r);
    let mut out = vec![0.0; x.data.len()];
    for c in 0..c_out {
        for i in 0..r {
            for j in 0..r {
                let src = x.channel(c * r * r + i * r + j);
                for y in 0..x.height {
                    let base = c * h * w + (y * r + i) * w;
                    for xx in 0..x.width {
                        out[base + xx * r + j] = src[y * x.width + xx];
                    }
                }
            }
        }
    }
    Ok(FeatureMap { channels: c_out, height: h, width: w, data: out })
}

pub fn space_to_depth(img: &ImagePlane, r: usize) -> Result<FeatureMap> {
    pixel_unshuffle(&FeatureMap::from_plane(img), r)
}

pub fn depth_to_space(fm: &FeatureMap, r: usize) -> Result<ImagePlane> {
    if fm.channels != r * r {
        return Err(Error::shape(format!("depth_to_space needs {} channels, got {}", r * r, fm.channels)));
    }
    let out = pixel_shuffle(fm, r)?;
    ImagePlane::new(out.height, out.width, out.data)
}
