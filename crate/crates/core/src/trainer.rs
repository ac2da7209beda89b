//! Per-image optimization: forward, pseudo-labeling, surrogate branch,
//! joint loss and momentum SGD.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::affine::{affine_grid, sample_affine, warp_labels, AffineParams, AffineRanges};
use crate::autograd::tape::Tape;
use crate::autograd::tensor::Tensor;
use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::losses::{self, LossWeights};
use crate::model::{self, ModelConfig, Weights};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub max_iters: usize,
    /// Stop once the pseudo-label map has fewer distinct clusters than this.
    pub min_clusters: Option<usize>,
    /// Learning-rate multiplier for the deformable offset branch, whose
    /// outputs are displacements in pixels.
    pub offset_lr_scale: f64,
    /// Seeds the per-iteration affine draws.
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { lr: 0.36, momentum: 0.9, max_iters: 50, min_clusters: None, offset_lr_scale: 0.01, seed: 0 }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} must lie in [0, 1)", self.momentum)));
        }
        if !(self.offset_lr_scale >= 0.0 && self.offset_lr_scale.is_finite()) {
            return Err(Error::Config(format!("offset_lr_scale {} must be non-negative", self.offset_lr_scale)));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be at least 1".into()));
        }
        Ok(())
    }
}

/// Parameters trained at `offset_lr_scale` times the base rate.
pub const OFFSET_PREFIX: &str = "deform.offset.";

/// Classical momentum update: `v ← μ·v + g`, `p ← p − lr·v`, with the
/// offset branch stepping at `lr·offset_lr_scale`.
///
/// Every gradient is checked before any parameter changes, so a non-finite
/// gradient leaves `params` and `velocity` untouched.
pub fn sgd_step<T: Scalar>(
    params: &mut Weights<T>,
    velocity: &mut Weights<T>,
    grads: &Weights<T>,
    cfg: &OptimConfig,
    iteration: usize,
) -> Result<()> {
    let grads = grads.entries();
    if let Some((name, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
        return Err(Error::NonFiniteGradient { param: name.clone(), iteration });
    }
    let mu = T::lit(cfg.momentum);
    for ((p, v), (name, g)) in params.slots_mut().into_iter().zip(velocity.slots_mut()).zip(grads) {
        let scale = if name.starts_with(OFFSET_PREFIX) { cfg.offset_lr_scale } else { 1.0 };
        let lr = T::lit(cfg.lr * scale);
        for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vv = mu * *vv + gv;
            *pv -= lr * *vv;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub ce: f64,
    /// Zero when the affine term is disabled.
    pub affine: f64,
    /// Zero when the spatial term is disabled.
    pub spatial: f64,
    pub joint: f64,
    pub unique_clusters: usize,
    pub transform: Option<AffineParams>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<IterationRecord>,
}

impl TrainHistory {
    pub const CSV_HEADER: &'static str = "iteration,L_ce,L_AT,L_S,L_joint,unique_clusters";

    /// One comma-separated row per iteration, full precision.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.iteration, r.ce, r.affine, r.spatial, r.joint, r.unique_clusters
            );
        }
        out
    }
}

/// Work performed during a run, for checking that disabled terms are skipped.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counters {
    pub forward_passes: usize,
    pub surrogate_passes: usize,
    pub sobel_passes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSetup {
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub weights: LossWeights,
    pub affine: AffineRanges,
}

impl TrainSetup {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optim.validate()?;
        self.weights.validate()?;
        self.affine.validate()
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    /// Argmax of the main head after the last update.
    pub labels: LabelMap,
    pub params: Weights<T>,
    pub history: TrainHistory,
    pub counters: Counters,
}

/// Runs one optimization step on a fresh tape and returns its record.
fn iterate<T: Scalar>(
    image: &Tensor<T>,
    params: &Weights<T>,
    setup: &TrainSetup,
    rng: &mut ChaCha8Rng,
    counters: &mut Counters,
    iteration: usize,
) -> Result<(IterationRecord, Weights<T>)> {
    let w = &setup.weights;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let x = tape.constant(image.clone());
    let pred = model::forward(&mut tape, x, &bound, &setup.model)?;
    counters.forward_passes += 1;
    // pseudo-labels come from plain values, so no gradient reaches them
    let labels = LabelMap::argmax(tape.value(pred.probs))?;
    let ce = losses::self_label_ce(&mut tape, pred.probs, &labels)?;

    let spatial = if w.lambda3 > 0.0 {
        counters.sobel_passes += 1;
        Some(losses::spatial_consistency(&mut tape, pred.probs)?)
    } else {
        None
    };

    let mut transform = None;
    let affine = if w.lambda2 > 0.0 {
        let p = sample_affine(rng, &setup.affine)?;
        let (_, _, h, wd) = image.dims4()?;
        let (grid, mask) = affine_grid(&p, h, wd)?;
        let warped = warp_labels(&labels, &grid, &mask)?;
        counters.surrogate_passes += 1;
        let aux = model::surrogate_forward(&mut tape, pred.features, &grid, &bound, &setup.model)?;
        transform = Some(p);
        Some(losses::affine_consistency(&mut tape, aux, &warped, &mask)?)
    } else {
        None
    };

    let joint = losses::joint(&mut tape, ce, affine, spatial, w)?;
    let value = |v: Option<crate::Var>| -> Result<f64> {
        v.map_or(Ok(0.0), |v| Ok(tape.value(v).item()?.to_f64().unwrap_or(f64::NAN)))
    };
    let record = IterationRecord {
        iteration,
        ce: value(Some(ce))?,
        affine: value(affine)?,
        spatial: value(spatial)?,
        joint: value(Some(joint))?,
        unique_clusters: labels.unique_count(),
        transform,
    };
    tape.backward(joint)?;
    Ok((record, bound.grads(&tape)))
}

/// Trains a freshly initialized network on one standardized image and
/// returns its final label map.
pub fn train_single_image<T: Scalar>(image: &Tensor<T>, setup: &TrainSetup) -> Result<TrainOutcome<T>> {
    setup.validate()?;
    let mut params: Weights<T> = Weights::init(&setup.model)?;
    let mut velocity = params.zeros_like();
    let mut rng = ChaCha8Rng::seed_from_u64(setup.optim.seed);
    let mut counters = Counters::default();
    let mut history = TrainHistory::default();
    for iteration in 0..setup.optim.max_iters {
        let (record, grads) = iterate(image, &params, setup, &mut rng, &mut counters, iteration)?;
        let finite = [record.ce, record.affine, record.spatial, record.joint].iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::Domain(format!("non-finite loss at iteration {iteration}")));
        }
        sgd_step(&mut params, &mut velocity, &grads, &setup.optim, iteration)?;
        let clusters = record.unique_clusters;
        history.records.push(record);
        if setup.optim.min_clusters.is_some_and(|min| clusters < min) {
            break;
        }
    }
    let labels = predict(image, &params, &setup.model)?;
    counters.forward_passes += 1;
    Ok(TrainOutcome { labels, params, history, counters })
}

/// Argmax label map of the main head for fixed parameters.
pub fn predict<T: Scalar>(image: &Tensor<T>, params: &Weights<T>, cfg: &ModelConfig) -> Result<LabelMap> {
    let mut tape = Tape::new();
    let bound = params.map(|_, t| tape.constant(t.clone()));
    let x = tape.constant(image.clone());
    let pred = model::forward(&mut tape, x, &bound, cfg)?;
    LabelMap::argmax(tape.value(pred.probs))
}
