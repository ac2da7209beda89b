//! Self-labeling cross-entropy, Sobel spatial consistency, affine
//! consistency, and their weighted sum.

use crate::affine::Mask;
use crate::autograd::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::scalar::Scalar;

/// Probabilities are clamped to this floor before taking the log.
pub const LOG_FLOOR: f64 = 1e-12;

pub use crate::nn::stencil::{SOBEL_X, SOBEL_XY, SOBEL_Y};

/// Weights of the joint objective: cross-entropy, affine, spatial.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl LossWeights {
    pub const SKIN: Self = Self { lambda1: 1.2, lambda2: 0.3, lambda3: 0.3 };
    pub const LUNG: Self = Self { lambda1: 1.0, lambda2: 0.5, lambda3: 0.6 };

    pub fn new(lambda1: f64, lambda2: f64, lambda3: f64) -> Result<Self> {
        let w = Self { lambda1, lambda2, lambda3 };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda1, self.lambda2, self.lambda3];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {all:?}")));
        }
        if all.iter().all(|&v| v == 0.0) {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        Ok(())
    }

    /// The four loss-term toggles of the ablation study, in table order:
    /// CE only, CE + affine, CE + spatial, all three.
    pub fn ablation_rows(&self) -> [Self; 4] {
        let Self { lambda1, lambda2, lambda3 } = *self;
        [
            Self { lambda1, lambda2: 0.0, lambda3: 0.0 },
            Self { lambda1, lambda2, lambda3: 0.0 },
            Self { lambda1, lambda2: 0.0, lambda3 },
            *self,
        ]
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::SKIN
    }
}

/// Per-channel directional Sobel responses of a soft prediction map.
#[derive(Clone, Copy, Debug)]
pub struct EdgeMaps {
    pub ex: Var,
    pub ey: Var,
    pub exy: Var,
}

fn masked_nll<T: Scalar>(
    tape: &mut Tape<T>,
    probs: Var,
    labels: &LabelMap,
    valid: Option<&[bool]>,
) -> Result<Var> {
    let picked = tape.gather_channels(probs, &labels.labels, valid)?;
    let floored = tape.clamp_min(picked, T::lit(LOG_FLOOR));
    let logs = tape.log(floored)?;
    let mean = tape.mean(logs, None)?;
    Ok(tape.scalar_mul(mean, -T::one()))
}

fn check_label_shape<T: Scalar>(tape: &Tape<T>, probs: Var, labels: &LabelMap) -> Result<()> {
    let (_, _, h, w) = tape.value(probs).dims4()?;
    if (h, w) != (labels.height, labels.width) {
        return Err(Error::Shape(format!(
            "{h}x{w} prediction vs {}x{} labels",
            labels.height, labels.width
        )));
    }
    Ok(())
}

/// Mean negative log-probability of each pixel's pseudo-label.
pub fn self_label_ce<T: Scalar>(tape: &mut Tape<T>, probs: Var, labels: &LabelMap) -> Result<Var> {
    check_label_shape(tape, probs, labels)?;
    masked_nll(tape, probs, labels, None)
}

/// Sobel responses in X, Y and XY directions over the valid interior; the
/// one-pixel border of each `H×W` edge map is zero.
pub fn sobel_edges<T: Scalar>(tape: &mut Tape<T>, probs: Var) -> Result<EdgeMaps> {
    let (_, _, h, w) = tape.value(probs).dims4()?;
    if h < 3 || w < 3 {
        return Err(Error::Shape(format!("sobel needs at least 3x3, got {h}x{w}")));
    }
    Ok(EdgeMaps {
        ex: tape.diff_stencil(probs, &SOBEL_X)?,
        ey: tape.diff_stencil(probs, &SOBEL_Y)?,
        exy: tape.diff_stencil(probs, &SOBEL_XY)?,
    })
}

/// Sum of `|EX−EY| + |EX−EXY| + |EY−EXY|` over pixels and channels,
/// divided by `H·W·K`.
pub fn spatial_consistency<T: Scalar>(tape: &mut Tape<T>, probs: Var) -> Result<Var> {
    let edges = sobel_edges(tape, probs)?;
    let mut total = None;
    for (a, b) in [(edges.ex, edges.ey), (edges.ex, edges.exy), (edges.ey, edges.exy)] {
        let diff = tape.sub(a, b)?;
        let mag = tape.abs(diff);
        total = Some(match total {
            None => mag,
            Some(acc) => tape.add(acc, mag)?,
        });
    }
    let total = total.expect("three edge pairs");
    let per_channel_pixels = tape.value(probs).numel();
    let sum = tape.sum(total, None)?;
    Ok(tape.scalar_mul(sum, T::one() / T::lit(per_channel_pixels as f64)))
}

/// Mean negative log-probability of the warped pseudo-labels over the
/// pixels whose source lies inside the image.
pub fn affine_consistency<T: Scalar>(
    tape: &mut Tape<T>,
    aux_probs: Var,
    warped_labels: &LabelMap,
    valid: &Mask,
) -> Result<Var> {
    check_label_shape(tape, aux_probs, warped_labels)?;
    if valid.valid.len() != warped_labels.labels.len() {
        return Err(Error::Shape("validity mask and labels differ in size".into()));
    }
    if valid.count() == 0 {
        return Err(Error::DegenerateTransform("no pixel maps inside the image".into()));
    }
    masked_nll(tape, aux_probs, warped_labels, Some(&valid.valid))
}

/// `λ1·ce + λ2·affine + λ3·spatial`. Terms that were not evaluated must
/// carry a zero weight.
pub fn joint<T: Scalar>(
    tape: &mut Tape<T>,
    ce: Var,
    affine: Option<Var>,
    spatial: Option<Var>,
    w: &LossWeights,
) -> Result<Var> {
    w.validate()?;
    let mut total = tape.scalar_mul(ce, T::lit(w.lambda1));
    for (term, lambda, name) in [(affine, w.lambda2, "affine"), (spatial, w.lambda3, "spatial")] {
        match term {
            Some(v) => {
                let scaled = tape.scalar_mul(v, T::lit(lambda));
                total = tape.add(total, scaled)?;
            }
            None if lambda != 0.0 => {
                return Err(Error::Contract(format!("{name} term missing but weighted {lambda}")));
            }
            None => {}
        }
    }
    for v in [Some(ce), affine, spatial].into_iter().flatten() {
        if tape.value(v).numel() != 1 {
            return Err(Error::Contract("joint objective takes scalar terms".into()));
        }
    }
    Ok(total)
}
