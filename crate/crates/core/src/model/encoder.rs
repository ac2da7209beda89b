//! Encoder forward pass: stem, stacked attention blocks, deformable block,
//! and the two segmentation heads.

use crate::autograd::tape::{Tape, Var};
use crate::autograd::tensor::Tensor;
use crate::error::{Error, Result};
use crate::model::config::{LkaConfig, ModelConfig};
use crate::model::params::{Bound, Conv, IlkaParams, Norm};
use crate::nn::{ConvSpec, SampleGrid};
use crate::scalar::Scalar;

pub const BN_EPS: f64 = 1e-5;

fn conv<T: Scalar>(tape: &mut Tape<T>, x: Var, p: &Conv<Var>, spec: &ConvSpec) -> Result<Var> {
    tape.conv2d(x, p.weight, p.bias, spec)
}

fn norm_relu<T: Scalar>(tape: &mut Tape<T>, x: Var, p: &Norm<Var>) -> Result<Var> {
    let y = tape.batchnorm2d(x, p.gamma, p.beta, T::lit(BN_EPS))?;
    Ok(tape.relu(y))
}

/// Intermediate nodes of one attention block.
#[derive(Clone, Copy, Debug)]
pub struct IlkaTrace {
    /// Pointwise projection `F(x)`.
    pub projected: Var,
    /// `F(x)` plus every depthwise inception branch.
    pub inception: Var,
    pub attention: Var,
    /// `attention ⊗ F(x)`.
    pub gated: Var,
    /// Pointwise convolution of `gated + x`, before normalization.
    pub pre_norm: Var,
    pub output: Var,
}

pub fn ilka_block_traced<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    p: &IlkaParams<Var>,
    lka: &LkaConfig,
) -> Result<IlkaTrace> {
    let (_, c, _, _) = tape.value(x).dims4()?;
    let expected = tape.shape(p.proj.weight)[1];
    if c != expected {
        return Err(Error::Shape(format!("attention block expects {expected} channels, got {c}")));
    }
    let pointwise = ConvSpec::new(c, c, 1);
    let projected = conv(tape, x, &p.proj, &pointwise)?;
    let mut inception = projected;
    for (branch, &r) in p.inception.iter().zip(&lka.inception) {
        let y = tape.depthwise_conv2d(projected, branch.weight, branch.bias, &ConvSpec::depthwise(c, r, 1))?;
        inception = tape.add(inception, y)?;
    }
    let dilated_spec = ConvSpec::depthwise(c, lka.dwd_kernel(), lka.dilation);
    let dilated = tape.depthwise_conv2d(inception, p.dilated.weight, p.dilated.bias, &dilated_spec)?;
    let attention = conv(tape, dilated, &p.mix, &pointwise)?;
    let gated = tape.mul(attention, projected)?;
    let skip = tape.add(gated, x)?;
    let pre_norm = conv(tape, skip, &p.fuse, &pointwise)?;
    let output = norm_relu(tape, pre_norm, &p.norm)?;
    Ok(IlkaTrace { projected, inception, attention, gated, pre_norm, output })
}

/// Shape-preserving inception large-kernel attention block.
pub fn ilka_block<T: Scalar>(tape: &mut Tape<T>, x: Var, p: &IlkaParams<Var>, lka: &LkaConfig) -> Result<Var> {
    Ok(ilka_block_traced(tape, x, p, lka)?.output)
}

/// Pointwise head followed by a channel softmax. With `normalize`, each
/// logit map is standardized over the image (a parameter-free batch norm)
/// before the softmax, which removes the common offset that non-negative
/// features otherwise put on every logit.
pub fn head<T: Scalar>(tape: &mut Tape<T>, features: Var, p: &Conv<Var>, normalize: bool) -> Result<Var> {
    let (_, c, _, _) = tape.value(features).dims4()?;
    let k = tape.shape(p.weight)[0];
    let mut logits = conv(tape, features, p, &ConvSpec::new(c, k, 1))?;
    if normalize {
        let gamma = tape.constant(Tensor::full(&[k], T::one()));
        let beta = tape.constant(Tensor::zeros(&[k]));
        logits = tape.batchnorm2d(logits, gamma, beta, T::lit(BN_EPS))?;
    }
    tape.softmax_channels(logits)
}

#[derive(Clone, Copy, Debug)]
pub struct Prediction {
    /// Output of the deformable block, shared by both heads.
    pub features: Var,
    /// Soft cluster assignment of the main head, `1×K×H×W`.
    pub probs: Var,
}

/// Encodes a standardized `1×Cin×H×W` image and applies the main head.
pub fn forward<T: Scalar>(tape: &mut Tape<T>, image: Var, p: &Bound, cfg: &ModelConfig) -> Result<Prediction> {
    let (n, cin, h, w) = tape.value(image).dims4()?;
    if n != 1 || cin != cfg.in_channels {
        return Err(Error::Shape(format!(
            "expected 1x{}xHxW image, got {:?}",
            cfg.in_channels,
            tape.shape(image)
        )));
    }
    let min = cfg.min_input_extent();
    if h < min || w < min {
        return Err(Error::InputTooSmall { height: h, width: w, min });
    }
    let c = cfg.channels;
    let x = conv(tape, image, &p.stem, &ConvSpec::same(cin, c, 3, 1))?;
    let mut x = norm_relu(tape, x, &p.stem_norm)?;
    for block in &p.blocks {
        x = ilka_block(tape, x, block, &cfg.lka)?;
    }
    let k = cfg.deform_kernel;
    let offsets = conv(tape, x, &p.deform.offset, &ConvSpec::same(c, 2 * k * k, k, 1))?;
    let d = &p.deform.conv;
    let x = tape.deformable_conv2d(x, offsets, d.weight, d.bias, &ConvSpec::same(c, c, k, 1))?;
    let features = norm_relu(tape, x, &p.deform.norm)?;
    let probs = head(tape, features, &p.main_head, cfg.head_norm)?;
    Ok(Prediction { features, probs })
}

/// Warps the shared features with `grid` and applies the auxiliary head.
pub fn surrogate_forward<T: Scalar>(
    tape: &mut Tape<T>,
    features: Var,
    grid: &SampleGrid,
    p: &Bound,
    cfg: &ModelConfig,
) -> Result<Var> {
    let (_, _, h, w) = tape.value(features).dims4()?;
    if (grid.height, grid.width) != (h, w) {
        return Err(Error::Shape(format!(
            "{}x{} grid for {h}x{w} features",
            grid.height, grid.width
        )));
    }
    let warped = tape.warp(features, grid)?;
    head(tape, warped, &p.aux_head, cfg.head_norm)
}
