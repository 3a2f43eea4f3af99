//! Conformer-style encoder: two strided 2-D convolutions over (time,
//! frequency), a linear projection, optional sinusoidal positions, then a
//! stack of macaron blocks
//! `x + ½FFN → x + MHSA → x + Conv → x + ½FFN → LayerNorm`.
//!
//! The attention sublayer takes a [`MaskPolicy`]; everything else in a block
//! is either per-frame or a fixed-width depthwise convolution, so a local
//! policy bounds the receptive field exactly (see [`receptive_field`]).

use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};

use crate::attention::{sparse_attend, HeadMasks, MaskPolicy, MultiHeadWeights, ScoreMatrix};
use crate::error::{Error, Result};
use crate::frontend::FeatureMatrix;
use crate::numerics::{layer_norm, relu, sigmoid, swish, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub feature_dim: usize,
    pub num_layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    /// Per-head query/key/value width `d`.
    pub head_dim: usize,
    pub ff_dim: usize,
    /// Depthwise kernel of the convolution sublayer (odd).
    pub conv_kernel: usize,
    pub subsample_channels: usize,
    pub subsample_stride: usize,
    pub subsample_kernel: usize,
    pub use_sinusoidal_pe: bool,
    pub layer_norm_eps: f64,
}

impl Default for EncoderConfig {
    /// Desk-scale encoder.
    fn default() -> Self {
        Self {
            feature_dim: 80,
            num_layers: 4,
            model_dim: 32,
            heads: 4,
            head_dim: 8,
            ff_dim: 64,
            conv_kernel: 7,
            subsample_channels: 16,
            subsample_stride: 2,
            subsample_kernel: 3,
            use_sinusoidal_pe: false,
            layer_norm_eps: 1e-5,
        }
    }
}

impl EncoderConfig {
    /// Full-size layout: 12 blocks, 256-channel subsampling, 1024-unit
    /// feed-forward layers.
    pub fn paper() -> Self {
        Self {
            feature_dim: 80,
            num_layers: 12,
            model_dim: 256,
            heads: 4,
            head_dim: 64,
            ff_dim: 1024,
            conv_kernel: 31,
            subsample_channels: 256,
            subsample_stride: 2,
            subsample_kernel: 3,
            use_sinusoidal_pe: false,
            layer_norm_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.num_layers == 0 || self.heads == 0 || self.head_dim == 0 || self.ff_dim == 0 {
            return bad("encoder layers, heads, head_dim and ff_dim must be >= 1".into());
        }
        if self.model_dim != self.heads * self.head_dim {
            return bad(format!(
                "model_dim {} must equal heads {} x head_dim {}",
                self.model_dim, self.heads, self.head_dim
            ));
        }
        if self.conv_kernel % 2 == 0 {
            return bad(format!("conv_kernel {} must be odd", self.conv_kernel));
        }
        if self.subsample_stride == 0 || self.subsample_kernel == 0 || self.subsample_channels == 0 {
            return bad("subsampling stride, kernel and channels must be >= 1".into());
        }
        if self.subsampled_freq() == 0 {
            return bad(format!(
                "feature_dim {} too small for two {}-wide stride-{} convolutions",
                self.feature_dim, self.subsample_kernel, self.subsample_stride
            ));
        }
        if !(self.layer_norm_eps > 0.0) {
            return bad("layer_norm_eps must be > 0".into());
        }
        Ok(())
    }

    fn conv_len(&self, n: usize) -> usize {
        if n < self.subsample_kernel {
            0
        } else {
            (n - self.subsample_kernel) / self.subsample_stride + 1
        }
    }

    /// Output frames after both valid convolutions.
    pub fn subsampled_len(&self, frames: usize) -> usize {
        self.conv_len(self.conv_len(frames))
    }

    pub fn subsampled_freq(&self) -> usize {
        self.conv_len(self.conv_len(self.feature_dim))
    }

    pub fn frame_rate_factor(&self) -> usize {
        self.subsample_stride * self.subsample_stride
    }

    pub fn conv_half_width(&self) -> usize {
        (self.conv_kernel - 1) / 2
    }
}

/// Input frames that can influence encoder output `i` when every layer runs
/// with a local window of `w`.
pub fn receptive_field(cfg: &EncoderConfig, w: usize, i: usize) -> RangeInclusive<usize> {
    let reach = cfg.num_layers * (w + cfg.conv_half_width());
    let (s, k) = (cfg.subsample_stride, cfg.subsample_kernel);
    let lo = i.saturating_sub(reach) * s * s;
    let hi = (i + reach) * s * s + (k - 1) * s + (k - 1);
    lo..=hi
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormWeights {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerNormWeights {
    pub fn identity(dim: usize) -> Self {
        Self {
            gain: vec![1.0; dim],
            bias: vec![0.0; dim],
        }
    }

    fn apply_rows(&self, x: &Matrix, eps: f64) -> Result<Matrix> {
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for i in 0..x.rows() {
            out.row_mut(i).copy_from_slice(&layer_norm(x.row(i), &self.gain, &self.bias, eps)?);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForwardWeights {
    pub norm: LayerNormWeights,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl FeedForwardWeights {
    pub fn zeros(dim: usize, hidden: usize) -> Self {
        Self {
            norm: LayerNormWeights::identity(dim),
            w1: Matrix::zeros(dim, hidden),
            b1: vec![0.0; hidden],
            w2: Matrix::zeros(hidden, dim),
            b2: vec![0.0; dim],
        }
    }

    fn forward(&self, x: &Matrix, eps: f64) -> Result<Matrix> {
        let h = self.norm.apply_rows(x, eps)?.affine(&self.w1, &self.b1)?.map(swish);
        h.affine(&self.w2, &self.b2)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvModuleWeights {
    pub norm: LayerNormWeights,
    /// `D × 2D`, followed by a GLU over the two halves.
    pub pointwise_in: Matrix,
    pub pointwise_in_bias: Vec<f64>,
    /// `kernel × D`; row `r` is the tap at offset `r - kernel/2`.
    pub depthwise: Matrix,
    pub depthwise_bias: Vec<f64>,
    pub pointwise_out: Matrix,
    pub pointwise_out_bias: Vec<f64>,
}

impl ConvModuleWeights {
    pub fn zeros(dim: usize, kernel: usize) -> Self {
        Self {
            norm: LayerNormWeights::identity(dim),
            pointwise_in: Matrix::zeros(dim, 2 * dim),
            pointwise_in_bias: vec![0.0; 2 * dim],
            depthwise: Matrix::zeros(kernel, dim),
            depthwise_bias: vec![0.0; dim],
            pointwise_out: Matrix::zeros(dim, dim),
            pointwise_out_bias: vec![0.0; dim],
        }
    }

    fn forward(&self, x: &Matrix, eps: f64) -> Result<Matrix> {
        let (t, dim) = (x.rows(), x.cols());
        let expanded = self
            .norm
            .apply_rows(x, eps)?
            .affine(&self.pointwise_in, &self.pointwise_in_bias)?;
        let mut gated = Matrix::zeros(t, dim);
        for i in 0..t {
            let (a, b) = expanded.row(i).split_at(dim);
            for (g, (av, bv)) in gated.row_mut(i).iter_mut().zip(a.iter().zip(b)) {
                *g = av * sigmoid(*bv);
            }
        }
        let kernel = self.depthwise.rows();
        let half = kernel / 2;
        let mut conv = Matrix::zeros(t, dim);
        for i in 0..t {
            let out = conv.row_mut(i);
            out.copy_from_slice(&self.depthwise_bias);
            for r in 0..kernel {
                // zero padding: taps that fall outside the sequence are skipped
                let Some(src) = (i + r).checked_sub(half).filter(|&s| s < t) else {
                    continue;
                };
                for ((o, xv), wv) in out.iter_mut().zip(gated.row(src)).zip(self.depthwise.row(r)) {
                    *o += xv * wv;
                }
            }
            out.iter_mut().for_each(|v| *v = swish(*v));
        }
        conv.affine(&self.pointwise_out, &self.pointwise_out_bias)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConformerBlockWeights {
    pub ff1: FeedForwardWeights,
    pub attn_norm: LayerNormWeights,
    pub attn: MultiHeadWeights,
    pub conv: ConvModuleWeights,
    pub ff2: FeedForwardWeights,
    pub final_norm: LayerNormWeights,
}

impl ConformerBlockWeights {
    pub fn zeros(cfg: &EncoderConfig) -> Self {
        Self {
            ff1: FeedForwardWeights::zeros(cfg.model_dim, cfg.ff_dim),
            attn_norm: LayerNormWeights::identity(cfg.model_dim),
            attn: MultiHeadWeights::zeros(cfg.model_dim, cfg.heads, cfg.head_dim),
            conv: ConvModuleWeights::zeros(cfg.model_dim, cfg.conv_kernel),
            ff2: FeedForwardWeights::zeros(cfg.model_dim, cfg.ff_dim),
            final_norm: LayerNormWeights::identity(cfg.model_dim),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubsampleWeights {
    /// `C × (1·k·k)`
    pub conv1: Matrix,
    pub conv1_bias: Vec<f64>,
    /// `C × (C·k·k)`
    pub conv2: Matrix,
    pub conv2_bias: Vec<f64>,
    /// `(C·F'') × model_dim`, input flattened channel-major.
    pub proj: Matrix,
    pub proj_bias: Vec<f64>,
}

impl SubsampleWeights {
    pub fn zeros(cfg: &EncoderConfig) -> Self {
        let (c, k) = (cfg.subsample_channels, cfg.subsample_kernel);
        Self {
            conv1: Matrix::zeros(c, k * k),
            conv1_bias: vec![0.0; c],
            conv2: Matrix::zeros(c, c * k * k),
            conv2_bias: vec![0.0; c],
            proj: Matrix::zeros(c * cfg.subsampled_freq(), cfg.model_dim),
            proj_bias: vec![0.0; cfg.model_dim],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    pub subsample: SubsampleWeights,
    pub blocks: Vec<ConformerBlockWeights>,
}

impl EncoderWeights {
    pub fn zeros(cfg: &EncoderConfig) -> Self {
        Self {
            subsample: SubsampleWeights::zeros(cfg),
            blocks: (0..cfg.num_layers).map(|_| ConformerBlockWeights::zeros(cfg)).collect(),
        }
    }
}

/// A `channels × time × freq` activation volume.
struct Volume {
    channels: usize,
    time: usize,
    freq: usize,
    data: Vec<f64>,
}

impl Volume {
    #[inline]
    fn at(&self, c: usize, t: usize, f: usize) -> f64 {
        self.data[(c * self.time + t) * self.freq + f]
    }
}

/// Valid strided 2-D convolution followed by ReLU.
fn conv2d_relu(input: &Volume, weight: &Matrix, bias: &[f64], k: usize, s: usize) -> Volume {
    let out_c = weight.rows();
    let time = (input.time - k) / s + 1;
    let freq = (input.freq - k) / s + 1;
    let mut data = vec![0.0; out_c * time * freq];
    for co in 0..out_c {
        let w = weight.row(co);
        for to in 0..time {
            for fo in 0..freq {
                let mut acc = bias[co];
                for ci in 0..input.channels {
                    for a in 0..k {
                        for b in 0..k {
                            acc += w[(ci * k + a) * k + b] * input.at(ci, to * s + a, fo * s + b);
                        }
                    }
                }
                data[(co * time + to) * freq + fo] = relu(acc);
            }
        }
    }
    Volume {
        channels: out_c,
        time,
        freq,
        data,
    }
}

/// Two conv+ReLU stages then a linear projection of the flattened
/// `channels × freq` slice of each output frame.
pub fn conv_subsample(f: &Matrix, w: &SubsampleWeights, cfg: &EncoderConfig) -> Result<Matrix> {
    let stages = conv_stages(f, w, cfg)?;
    let mut flat = Matrix::zeros(stages.time, stages.channels * stages.freq);
    for t in 0..stages.time {
        let row = flat.row_mut(t);
        for c in 0..stages.channels {
            for q in 0..stages.freq {
                row[c * stages.freq + q] = stages.at(c, t, q);
            }
        }
    }
    flat.affine(&w.proj, &w.proj_bias)
}

fn conv_stages(f: &Matrix, w: &SubsampleWeights, cfg: &EncoderConfig) -> Result<Volume> {
    if f.cols() != cfg.feature_dim {
        return Err(Error::shape("conv_subsample input", &f.shape(), &[f.rows(), cfg.feature_dim]));
    }
    let (k, s, c) = (cfg.subsample_kernel, cfg.subsample_stride, cfg.subsample_channels);
    if cfg.subsampled_len(f.rows()) == 0 {
        return Err(Error::EmptyInput(format!(
            "{} frames is too short for two {k}-wide stride-{s} convolutions",
            f.rows()
        )));
    }
    if w.conv1.shape() != [c, k * k] || w.conv2.shape() != [c, c * k * k] {
        return Err(Error::shape("subsample kernels", &[c, k * k], &w.conv1.shape()));
    }
    let input = Volume {
        channels: 1,
        time: f.rows(),
        freq: f.cols(),
        data: f.data().to_vec(),
    };
    let x = conv2d_relu(&input, &w.conv1, &w.conv1_bias, k, s);
    Ok(conv2d_relu(&x, &w.conv2, &w.conv2_bias, k, s))
}

/// Sinusoidal position table, `pe[t][2m] = sin(t / 10000^(2m/D))` and the
/// matching cosine in odd columns.
pub fn sinusoidal_positions(t: usize, dim: usize) -> Matrix {
    let mut pe = Matrix::zeros(t, dim);
    for pos in 0..t {
        for c in 0..dim {
            let exponent = (2 * (c / 2)) as f64 / dim as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            pe.set(pos, c, if c % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    pe
}

/// Attention scores and masks one block produced.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerDiagnostics {
    pub scores: Vec<ScoreMatrix>,
    pub masks: Vec<HeadMasks>,
}

pub fn conformer_block_forward(
    x: &Matrix,
    block: &ConformerBlockWeights,
    eps: f64,
    policy: &MaskPolicy,
) -> Result<(Matrix, LayerDiagnostics)> {
    let x = x.add_scaled(&block.ff1.forward(x, eps)?, 0.5)?;
    let attn = sparse_attend(&block.attn_norm.apply_rows(&x, eps)?, &block.attn, policy)?;
    let x = x.add(&attn.output)?;
    let x = x.add(&block.conv.forward(&x, eps)?)?;
    let x = x.add_scaled(&block.ff2.forward(&x, eps)?, 0.5)?;
    let out = block.final_norm.apply_rows(&x, eps)?;
    Ok((
        out,
        LayerDiagnostics {
            scores: attn.scores,
            masks: attn.masks,
        },
    ))
}

/// Encoder output frames `h_1 .. h_T'`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutputs {
    pub h: Matrix,
    /// Seconds per output frame.
    pub frame_rate: f64,
}

impl EncoderOutputs {
    pub fn len(&self) -> usize {
        self.h.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.h.rows() == 0
    }
}

/// Runs the whole stack with one policy for every layer.
pub fn encode(
    f: &FeatureMatrix,
    cfg: &EncoderConfig,
    weights: &EncoderWeights,
    policy: &MaskPolicy,
) -> Result<EncoderOutputs> {
    let policies = vec![*policy; cfg.num_layers];
    run(f, cfg, weights, &policies, false).map(|(out, _)| out)
}

/// Like [`encode`] but with a policy per layer and per-layer diagnostics.
pub fn encode_with_diagnostics(
    f: &FeatureMatrix,
    cfg: &EncoderConfig,
    weights: &EncoderWeights,
    policies: &[MaskPolicy],
) -> Result<(EncoderOutputs, Vec<LayerDiagnostics>)> {
    run(f, cfg, weights, policies, true)
}

fn run(
    f: &FeatureMatrix,
    cfg: &EncoderConfig,
    weights: &EncoderWeights,
    policies: &[MaskPolicy],
    keep: bool,
) -> Result<(EncoderOutputs, Vec<LayerDiagnostics>)> {
    cfg.validate()?;
    if weights.blocks.len() != cfg.num_layers {
        return Err(Error::shape("encoder blocks", &[cfg.num_layers], &[weights.blocks.len()]));
    }
    if policies.len() != cfg.num_layers {
        return Err(Error::Parameter(format!(
            "{} layer policies given for {} layers",
            policies.len(),
            cfg.num_layers
        )));
    }
    let mut x = conv_subsample(&f.frames, &weights.subsample, cfg)?;
    if cfg.use_sinusoidal_pe {
        x = x.add(&sinusoidal_positions(x.rows(), x.cols()))?;
    }
    let mut layers = Vec::new();
    for (block, policy) in weights.blocks.iter().zip(policies) {
        let (next, diag) = conformer_block_forward(&x, block, cfg.layer_norm_eps, policy)?;
        x = next;
        if keep {
            layers.push(diag);
        }
    }
    debug_assert!(x.is_finite());
    Ok((
        EncoderOutputs {
            h: x,
            frame_rate: f.frame_shift * cfg.frame_rate_factor() as f64,
        },
        layers,
    ))
}
