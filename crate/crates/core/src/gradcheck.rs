//! Finite-difference verification of every differentiable operator.
//!
//! Each case builds a small seeded instance in 64-bit precision, reduces the
//! operator output to a scalar with a fixed random projection, and compares
//! the tape gradient of every differentiable input against central
//! differences. Inputs to non-smooth operators (abs, relu, clamp, bilinear
//! reads) are drawn away from their kinks so the difference quotient is
//! well defined.

use std::fmt;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::affine::Mask;
use crate::autograd::tape::{Tape, Var};
use crate::autograd::tensor::Tensor;
use crate::error::Result;
use crate::labels::LabelMap;
use crate::losses::{self, LossWeights, SOBEL_X, SOBEL_XY, SOBEL_Y};
use crate::nn::conv::ConvSpec;

/// Central-difference step.
pub const STEP: f64 = 1e-4;
/// Default relative tolerance.
pub const TOLERANCE: f64 = 1e-4;
/// Tolerance for deformable-convolution offsets.
pub const OFFSET_TOLERANCE: f64 = 1e-3;
/// Seeded instances per case.
pub const INSTANCES: usize = 5;
/// Largest number of coordinates differenced per input tensor.
const MAX_PROBES: usize = 48;

type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

struct Input {
    label: &'static str,
    value: Tensor<f64>,
    differentiable: bool,
    tolerance: f64,
}

struct Case {
    inputs: Vec<Input>,
    build: Build,
}

fn wrt(label: &'static str, value: Tensor<f64>) -> Input {
    Input { label, value, differentiable: true, tolerance: TOLERANCE }
}

fn fixed(label: &'static str, value: Tensor<f64>) -> Input {
    Input { label, value, differentiable: false, tolerance: TOLERANCE }
}

/// Outcome for one (operator, input) pair across all instances.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub instances: usize,
    /// Largest `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` observed.
    pub worst: f64,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.worst < self.tolerance
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<4} {:<34} rel err {:.3e} (tol {:.0e}, {} instances)",
            if self.passed() { "ok" } else { "FAIL" },
            self.name,
            self.worst,
            self.tolerance,
            self.instances
        )
    }
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub checks: Vec<CheckReport>,
    pub elapsed: Duration,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckReport::passed)
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

/// Uniform values in `±[gap, 1]`, bounded away from zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(gap..1.0);
            if rng.gen_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape, data).expect("shape")
}

/// Integer plus a fraction near one half, far from bilinear cell edges.
fn mid_cell(rng: &mut ChaCha8Rng, lo: i32, hi: i32) -> f64 {
    f64::from(rng.gen_range(lo..=hi)) + 0.5 + rng.gen_range(-0.1..0.1)
}

fn random_labels(rng: &mut ChaCha8Rng, h: usize, w: usize, k: usize) -> LabelMap {
    LabelMap::new(h, w, (0..h * w).map(|_| rng.gen_range(0..k as u32)).collect()).expect("labels")
}

fn elementwise(kind: &'static str, rng: &mut ChaCha8Rng) -> Case {
    let shape = [2, 3, 4];
    let a = match kind {
        "log" => uniform(rng, &shape, 0.5, 2.0),
        "abs" | "relu" => away_from_zero(rng, &shape, 0.05),
        "clamp_min" => {
            // the floor sits at 0.3; keep values clear of it
            let mut t = away_from_zero(rng, &shape, 0.05);
            t.data_mut().iter_mut().for_each(|v| *v += 0.3);
            t
        }
        _ => uniform(rng, &shape, -1.0, 1.0),
    };
    let b = uniform(rng, &shape, -1.0, 1.0);
    let c: f64 = rng.gen_range(-2.0..2.0);
    let build: Build = match kind {
        "add" => Box::new(|t, v| t.add(v[0], v[1])),
        "sub" => Box::new(|t, v| t.sub(v[0], v[1])),
        "mul" => Box::new(|t, v| t.mul(v[0], v[1])),
        "abs" => Box::new(|t, v| Ok(t.abs(v[0]))),
        "log" => Box::new(|t, v| t.log(v[0])),
        "scale" => Box::new(move |t, v| Ok(t.scalar_mul(v[0], c))),
        "clamp_min" => Box::new(|t, v| Ok(t.clamp_min(v[0], 0.3))),
        "relu" => Box::new(|t, v| Ok(t.relu(v[0]))),
        other => unreachable!("unknown elementwise kind {other}"),
    };
    let mut inputs = vec![wrt("a", a)];
    if matches!(kind, "add" | "sub" | "mul") {
        inputs.push(wrt("b", b));
    }
    Case { inputs, build }
}

fn reduction(kind: &'static str, rng: &mut ChaCha8Rng) -> Case {
    let a = uniform(rng, &[2, 3, 4, 5], -1.0, 1.0);
    let build: Build = match kind {
        "sum" => Box::new(|t, v| t.sum(v[0], None)),
        "sum_axes" => Box::new(|t, v| t.sum(v[0], Some(&[1, 3]))),
        "mean" => Box::new(|t, v| t.mean(v[0], None)),
        "mean_axes" => Box::new(|t, v| t.mean(v[0], Some(&[0, 2]))),
        other => unreachable!("unknown reduction {other}"),
    };
    Case { inputs: vec![wrt("a", a)], build }
}

fn softmax(rng: &mut ChaCha8Rng) -> Case {
    let a = uniform(rng, &[2, 4, 3, 3], -2.0, 2.0);
    Case { inputs: vec![wrt("a", a)], build: Box::new(|t, v| t.softmax_channels(v[0])) }
}

fn conv2d(rng: &mut ChaCha8Rng) -> Case {
    let spec = ConvSpec::new(4, 6, 3).stride(2).padding(2).dilation(2).groups(2);
    let ws = spec.weight_shape();
    Case {
        inputs: vec![
            wrt("input", uniform(rng, &[2, 4, 7, 6], -1.0, 1.0)),
            wrt("weight", uniform(rng, &ws, -0.5, 0.5)),
            wrt("bias", uniform(rng, &[6], -0.5, 0.5)),
        ],
        build: Box::new(move |t, v| t.conv2d(v[0], v[1], Some(v[2]), &spec)),
    }
}

fn depthwise(rng: &mut ChaCha8Rng) -> Case {
    let spec = ConvSpec::depthwise(3, 3, 2);
    Case {
        inputs: vec![
            wrt("input", uniform(rng, &[1, 3, 8, 7], -1.0, 1.0)),
            wrt("weight", uniform(rng, &spec.weight_shape(), -0.5, 0.5)),
            wrt("bias", uniform(rng, &[3], -0.5, 0.5)),
        ],
        build: Box::new(move |t, v| t.depthwise_conv2d(v[0], v[1], Some(v[2]), &spec)),
    }
}

fn batchnorm(rng: &mut ChaCha8Rng) -> Case {
    Case {
        inputs: vec![
            wrt("input", uniform(rng, &[2, 3, 4, 4], -1.0, 1.0)),
            wrt("gamma", uniform(rng, &[3], 0.5, 1.5)),
            wrt("beta", uniform(rng, &[3], -0.5, 0.5)),
        ],
        build: Box::new(|t, v| t.batchnorm2d(v[0], v[1], v[2], 1e-5)),
    }
}

fn bilinear(rng: &mut ChaCha8Rng) -> Case {
    let (h, w, ho, wo) = (5, 6, 4, 4);
    // coordinates reach one cell beyond the image so zero-padded reads are covered
    let grid: Vec<f64> = (0..ho * wo)
        .flat_map(|_| [mid_cell(rng, -2, h as i32), mid_cell(rng, -2, w as i32)])
        .collect();
    Case {
        inputs: vec![
            wrt("input", uniform(rng, &[1, 2, h, w], -1.0, 1.0)),
            wrt("grid", Tensor::new(&[ho, wo, 2], grid).expect("grid")),
        ],
        build: Box::new(|t, v| t.bilinear_sample(v[0], v[1])),
    }
}

fn deformable(rng: &mut ChaCha8Rng) -> Case {
    let spec = ConvSpec::same(3, 4, 3, 1);
    let (h, w) = (6, 6);
    let offsets: Vec<f64> = (0..18 * h * w).map(|_| mid_cell(rng, -2, 1)).collect();
    let mut offset = wrt("offset", Tensor::new(&[1, 18, h, w], offsets).expect("offset"));
    offset.tolerance = OFFSET_TOLERANCE;
    Case {
        inputs: vec![
            wrt("input", uniform(rng, &[1, 3, h, w], -1.0, 1.0)),
            offset,
            wrt("weight", uniform(rng, &spec.weight_shape(), -0.5, 0.5)),
            wrt("bias", uniform(rng, &[4], -0.5, 0.5)),
        ],
        build: Box::new(move |t, v| t.deformable_conv2d(v[0], v[1], v[2], Some(v[3]), &spec)),
    }
}

fn sobel(rng: &mut ChaCha8Rng) -> Case {
    Case {
        inputs: vec![wrt("input", uniform(rng, &[1, 2, 5, 6], -1.0, 1.0))],
        build: Box::new(|t, v| {
            let ex = t.diff_stencil(v[0], &SOBEL_X)?;
            let ey = t.diff_stencil(v[0], &SOBEL_Y)?;
            let exy = t.diff_stencil(v[0], &SOBEL_XY)?;
            let ey = t.scalar_mul(ey, 2.0);
            let exy = t.scalar_mul(exy, -3.0);
            let s = t.add(ex, ey)?;
            t.add(s, exy)
        }),
    }
}

fn loss_case(kind: &'static str, rng: &mut ChaCha8Rng) -> Case {
    let (k, h, w) = (4, 5, 5);
    let logits = uniform(rng, &[1, k, h, w], -2.0, 2.0);
    let labels = random_labels(rng, h, w, k);
    let mut valid: Vec<bool> = (0..h * w).map(|_| rng.gen_bool(0.7)).collect();
    valid[0] = true;
    let mask = Mask { height: h, width: w, valid };
    let build: Build = match kind {
        "self_label_ce" => Box::new(move |t, v| {
            let p = t.softmax_channels(v[0])?;
            losses::self_label_ce(t, p, &labels)
        }),
        "spatial_consistency" => Box::new(|t, v| {
            let p = t.softmax_channels(v[0])?;
            losses::spatial_consistency(t, p)
        }),
        "affine_consistency" => Box::new(move |t, v| {
            let p = t.softmax_channels(v[0])?;
            losses::affine_consistency(t, p, &labels, &mask)
        }),
        other => unreachable!("unknown loss {other}"),
    };
    Case { inputs: vec![wrt("logits", logits)], build }
}

fn joint_case(rng: &mut ChaCha8Rng) -> Case {
    let w = LossWeights::new(rng.gen_range(0.5..2.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0))
        .expect("weights");
    let mut inputs: Vec<Input> = ["ce", "affine", "spatial"]
        .into_iter()
        .map(|l| wrt(l, Tensor::scalar(rng.gen_range(0.1..3.0))))
        .collect();
    // a constant alongside keeps the signature uniform
    inputs.push(fixed("unused", Tensor::scalar(0.0)));
    Case { inputs, build: Box::new(move |t, v| losses::joint(t, v[0], Some(v[1]), Some(v[2]), &w)) }
}

/// Value of the projected objective for one set of input values.
fn objective(case: &Case, values: &[Tensor<f64>], projection: &Tensor<f64>) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = values.iter().map(|v| tape.constant(v.clone())).collect();
    let out = (case.build)(&mut tape, &vars)?;
    let r = tape.constant(projection.clone());
    let weighted = tape.mul(out, r)?;
    let total = tape.sum(weighted, None)?;
    tape.value(total).item()
}

/// Largest relative error per differentiable input for one instance.
fn check_instance(case: &Case, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> =
        case.inputs.iter().map(|i| tape.leaf(i.value.clone(), i.differentiable)).collect();
    let out = (case.build)(&mut tape, &vars)?;
    let projection = uniform(rng, tape.shape(out), -1.0, 1.0);
    let r = tape.constant(projection.clone());
    let weighted = tape.mul(out, r)?;
    let total = tape.sum(weighted, None)?;
    tape.backward(total)?;

    let base: Vec<Tensor<f64>> = case.inputs.iter().map(|i| i.value.clone()).collect();
    let mut errors = Vec::new();
    for (idx, input) in case.inputs.iter().enumerate() {
        if !input.differentiable {
            continue;
        }
        let analytic = tape.grad(vars[idx]).unwrap_or_else(|| Tensor::zeros(input.value.shape()));
        let n = input.value.numel();
        let probes: Vec<usize> = if n <= MAX_PROBES {
            (0..n).collect()
        } else {
            (0..MAX_PROBES).map(|_| rng.gen_range(0..n)).collect()
        };
        let (mut diff, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
        for &e in &probes {
            let mut values = base.clone();
            values[idx].data_mut()[e] += STEP;
            let plus = objective(case, &values, &projection)?;
            values[idx].data_mut()[e] -= 2.0 * STEP;
            let minus = objective(case, &values, &projection)?;
            let numeric = (plus - minus) / (2.0 * STEP);
            let a = analytic.data()[e];
            diff += (a - numeric).powi(2);
            na += a * a;
            nn += numeric * numeric;
        }
        let scale = na.sqrt().max(nn.sqrt()).max(1e-8);
        errors.push(diff.sqrt() / scale);
    }
    Ok(errors)
}

type Factory = Box<dyn Fn(&mut ChaCha8Rng) -> Case>;

fn catalogue() -> Vec<(&'static str, Factory)> {
    let mut cases: Vec<(&'static str, Factory)> = Vec::new();
    for kind in ["add", "sub", "mul", "abs", "log", "scale", "clamp_min", "relu"] {
        cases.push((kind, Box::new(move |r| elementwise(kind, r))));
    }
    for kind in ["sum", "sum_axes", "mean", "mean_axes"] {
        cases.push((kind, Box::new(move |r| reduction(kind, r))));
    }
    cases.push(("softmax_channels", Box::new(softmax)));
    cases.push(("conv2d", Box::new(conv2d)));
    cases.push(("depthwise_conv2d", Box::new(depthwise)));
    cases.push(("batchnorm2d", Box::new(batchnorm)));
    cases.push(("bilinear_sample", Box::new(bilinear)));
    cases.push(("deformable_conv2d", Box::new(deformable)));
    cases.push(("sobel_stencils", Box::new(sobel)));
    for kind in ["self_label_ce", "spatial_consistency", "affine_consistency"] {
        cases.push((kind, Box::new(move |r| loss_case(kind, r))));
    }
    cases.push(("joint", Box::new(joint_case)));
    cases
}

/// Runs every case on [`INSTANCES`] seeded instances.
pub fn run_suite(seed: u64) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut checks = Vec::new();
    for (case_idx, (name, factory)) in catalogue().into_iter().enumerate() {
        let mut rows: Vec<CheckReport> = Vec::new();
        for instance in 0..INSTANCES {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((case_idx as u64) << 32 | instance as u64));
            let case = factory(&mut rng);
            let errors = check_instance(&case, &mut rng)?;
            let labels = case.inputs.iter().filter(|i| i.differentiable);
            for (slot, (input, err)) in labels.zip(errors).enumerate() {
                if rows.len() <= slot {
                    rows.push(CheckReport {
                        name: format!("{name}/{}", input.label),
                        instances: 0,
                        worst: 0.0,
                        tolerance: input.tolerance,
                    });
                }
                let row = &mut rows[slot];
                row.instances += 1;
                row.worst = row.worst.max(err);
            }
        }
        checks.extend(rows);
    }
    Ok(SuiteReport { checks, elapsed: start.elapsed() })
}
