//! Learnable parameters, generic over what each slot holds: owned tensors
//! for storage and optimizer state, tape handles during a forward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::tape::{Tape, Var};
use crate::autograd::tensor::{create_with_rng, Init, Tensor};
use crate::error::Result;
use crate::model::config::ModelConfig;
use crate::nn::ConvSpec;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Conv<P> {
    pub weight: P,
    pub bias: Option<P>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Norm<P> {
    pub gamma: P,
    pub beta: P,
}

/// One inception large-kernel attention block.
#[derive(Clone, Debug, PartialEq)]
pub struct IlkaParams<P> {
    /// Pointwise projection producing the gated features.
    pub proj: Conv<P>,
    /// Depthwise branches, one per inception kernel size.
    pub inception: Vec<Conv<P>>,
    /// Dilated depthwise convolution.
    pub dilated: Conv<P>,
    /// Pointwise channel mixer producing the attention map.
    pub mix: Conv<P>,
    /// Pointwise convolution after the skip connection.
    pub fuse: Conv<P>,
    pub norm: Norm<P>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeformParams<P> {
    pub offset: Conv<P>,
    pub conv: Conv<P>,
    pub norm: Norm<P>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<P> {
    pub stem: Conv<P>,
    pub stem_norm: Norm<P>,
    pub blocks: Vec<IlkaParams<P>>,
    pub deform: DeformParams<P>,
    pub main_head: Conv<P>,
    pub aux_head: Conv<P>,
}

/// Owned parameter values.
pub type Weights<T> = ModelParams<Tensor<T>>;
/// Parameters bound to a tape.
pub type Bound = ModelParams<Var>;

impl<P> Conv<P> {
    fn map<Q>(&self, name: &str, f: &mut impl FnMut(&str, &P) -> Q) -> Conv<Q> {
        Conv {
            weight: f(&format!("{name}.weight"), &self.weight),
            bias: self.bias.as_ref().map(|b| f(&format!("{name}.bias"), b)),
        }
    }

    fn collect<'a>(&'a self, name: &str, out: &mut Vec<(String, &'a P)>) {
        out.push((format!("{name}.weight"), &self.weight));
        if let Some(b) = &self.bias {
            out.push((format!("{name}.bias"), b));
        }
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut P>) {
        out.push(&mut self.weight);
        if let Some(b) = &mut self.bias {
            out.push(b);
        }
    }
}

impl<P> Norm<P> {
    fn map<Q>(&self, name: &str, f: &mut impl FnMut(&str, &P) -> Q) -> Norm<Q> {
        Norm { gamma: f(&format!("{name}.gamma"), &self.gamma), beta: f(&format!("{name}.beta"), &self.beta) }
    }

    fn collect<'a>(&'a self, name: &str, out: &mut Vec<(String, &'a P)>) {
        out.push((format!("{name}.gamma"), &self.gamma));
        out.push((format!("{name}.beta"), &self.beta));
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut P>) {
        out.push(&mut self.gamma);
        out.push(&mut self.beta);
    }
}

impl<P> ModelParams<P> {
    /// Applies `f` to every slot in declaration order, passing its dotted name.
    pub fn map<Q>(&self, mut f: impl FnMut(&str, &P) -> Q) -> ModelParams<Q> {
        let f = &mut f;
        ModelParams {
            stem: self.stem.map("stem", f),
            stem_norm: self.stem_norm.map("stem_norm", f),
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| {
                    let n = format!("blocks.{i}");
                    IlkaParams {
                        proj: b.proj.map(&format!("{n}.proj"), f),
                        inception: b
                            .inception
                            .iter()
                            .enumerate()
                            .map(|(j, c)| c.map(&format!("{n}.inception.{j}"), f))
                            .collect(),
                        dilated: b.dilated.map(&format!("{n}.dilated"), f),
                        mix: b.mix.map(&format!("{n}.mix"), f),
                        fuse: b.fuse.map(&format!("{n}.fuse"), f),
                        norm: b.norm.map(&format!("{n}.norm"), f),
                    }
                })
                .collect(),
            deform: DeformParams {
                offset: self.deform.offset.map("deform.offset", f),
                conv: self.deform.conv.map("deform.conv", f),
                norm: self.deform.norm.map("deform.norm", f),
            },
            main_head: self.main_head.map("main_head", f),
            aux_head: self.aux_head.map("aux_head", f),
        }
    }

    /// `(name, slot)` pairs in declaration order.
    pub fn entries(&self) -> Vec<(String, &P)> {
        let mut out = Vec::new();
        self.stem.collect("stem", &mut out);
        self.stem_norm.collect("stem_norm", &mut out);
        for (i, b) in self.blocks.iter().enumerate() {
            let n = format!("blocks.{i}");
            b.proj.collect(&format!("{n}.proj"), &mut out);
            for (j, c) in b.inception.iter().enumerate() {
                c.collect(&format!("{n}.inception.{j}"), &mut out);
            }
            b.dilated.collect(&format!("{n}.dilated"), &mut out);
            b.mix.collect(&format!("{n}.mix"), &mut out);
            b.fuse.collect(&format!("{n}.fuse"), &mut out);
            b.norm.collect(&format!("{n}.norm"), &mut out);
        }
        self.deform.offset.collect("deform.offset", &mut out);
        self.deform.conv.collect("deform.conv", &mut out);
        self.deform.norm.collect("deform.norm", &mut out);
        self.main_head.collect("main_head", &mut out);
        self.aux_head.collect("aux_head", &mut out);
        out
    }

    /// Mutable slots in the same order as [`ModelParams::entries`].
    pub fn slots_mut(&mut self) -> Vec<&mut P> {
        let mut out = Vec::new();
        self.stem.collect_mut(&mut out);
        self.stem_norm.collect_mut(&mut out);
        for b in &mut self.blocks {
            b.proj.collect_mut(&mut out);
            for c in &mut b.inception {
                c.collect_mut(&mut out);
            }
            b.dilated.collect_mut(&mut out);
            b.mix.collect_mut(&mut out);
            b.fuse.collect_mut(&mut out);
            b.norm.collect_mut(&mut out);
        }
        self.deform.offset.collect_mut(&mut out);
        self.deform.conv.collect_mut(&mut out);
        self.deform.norm.collect_mut(&mut out);
        self.main_head.collect_mut(&mut out);
        self.aux_head.collect_mut(&mut out);
        out
    }
}

impl<T: Scalar> Weights<T> {
    /// Fresh parameters: fan-in uniform conv weights, zero biases, unit BN
    /// scale, and an all-zero offset predictor so the deformable block starts
    /// as a plain convolution.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let c = cfg.channels;
        let mut conv = |spec: ConvSpec, zero: bool| -> Result<Conv<Tensor<T>>> {
            let init = if zero { Init::Zeros } else { Init::KaimingFanIn };
            Ok(Conv {
                weight: create_with_rng(&spec.weight_shape(), init, &mut rng)?,
                bias: Some(Tensor::zeros(&[spec.out_channels])),
            })
        };
        let norm = |ch: usize| Norm { gamma: Tensor::full(&[ch], T::one()), beta: Tensor::zeros(&[ch]) };

        let stem = conv(ConvSpec::same(cfg.in_channels, c, 3, 1), false)?;
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for _ in 0..cfg.blocks {
            blocks.push(IlkaParams {
                proj: conv(ConvSpec::new(c, c, 1), false)?,
                inception: cfg
                    .lka
                    .inception
                    .iter()
                    .map(|&r| conv(ConvSpec::depthwise(c, r, 1), false))
                    .collect::<Result<_>>()?,
                dilated: conv(ConvSpec::depthwise(c, cfg.lka.dwd_kernel(), cfg.lka.dilation), false)?,
                mix: conv(ConvSpec::new(c, c, 1), false)?,
                fuse: conv(ConvSpec::new(c, c, 1), false)?,
                norm: norm(c),
            });
        }
        let k = cfg.deform_kernel;
        let deform = DeformParams {
            offset: conv(ConvSpec::same(c, 2 * k * k, k, 1), true)?,
            conv: conv(ConvSpec::same(c, c, k, 1), false)?,
            norm: norm(c),
        };
        let main_head = conv(ConvSpec::new(c, cfg.clusters, 1), false)?;
        let aux_head = conv(ConvSpec::new(c, cfg.clusters, 1), false)?;
        Ok(ModelParams { stem, stem_norm: norm(c), blocks, deform, main_head, aux_head })
    }

    /// Same layout, every value zero (optimizer velocity).
    pub fn zeros_like(&self) -> Self {
        self.map(|_, t| Tensor::zeros_like(t))
    }

    /// Registers every tensor as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        self.map(|_, t| tape.param(t.clone()))
    }

    pub fn count(&self) -> usize {
        self.entries().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.entries().iter().all(|(_, t)| t.is_finite())
    }
}

impl Bound {
    /// Gradients accumulated on `tape`; slots backward never reached are zero.
    pub fn grads<T: Scalar>(&self, tape: &Tape<T>) -> Weights<T> {
        self.map(|_, &v| tape.grad(v).unwrap_or_else(|| Tensor::zeros(tape.shape(v))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_and_offset_init() {
        let cfg = ModelConfig { channels: 8, clusters: 4, ..ModelConfig::default() };
        let w: Weights<f64> = Weights::init(&cfg).unwrap();
        assert!(w.deform.offset.weight.data().iter().all(|&v| v == 0.0));
        assert_eq!(w.deform.offset.weight.shape(), &[18, 8, 3, 3]);
        assert_eq!(w.blocks[0].dilated.weight.shape(), &[8, 1, 7, 7]);
        assert_eq!(w.main_head.weight.shape(), &[4, 8, 1, 1]);
        let names: Vec<String> = w.entries().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names[0], "stem.weight");
        assert!(names.contains(&"blocks.1.inception.1.weight".to_string()));
        assert_eq!(names.last().unwrap(), "aux_head.bias");
        let mut v = w.zeros_like();
        assert_eq!(v.slots_mut().len(), names.len());
        assert_eq!(Weights::<f64>::init(&cfg).unwrap(), w);
    }
}
