//! End-to-end acceptance checks. Each test prints one `criterion N: PASS|FAIL`
//! line to stderr (bypassing output capture, so it shows in plain
//! `cargo test` output) and then asserts.

mod common;

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{brute_best_overlap, brute_dsc, brute_hausdorff, brute_xor, noisy_disk, random_labels, random_mask, write_sample};
use s3seg::affine::{affine_grid, AffineParams};
use s3seg::gradcheck;
use s3seg::losses::{self, LossWeights};
use s3seg::metrics::{self, best_overlap_cluster, hm_distance, BinaryMask};
use s3seg::model::{self, attention_param_count, dense_param_count, LkaConfig, ModelConfig, Weights};
use s3seg::nn::ConvSpec;
use s3seg::pipeline::batch::train_sample;
use s3seg::pipeline::{ImageSample, RunConfig};
use s3seg::{LabelMap, Tape, Tensor};

const DESK_CONFIG: &str = include_str!("../../../configs/desk.conf");

fn report(criterion: u32, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr().lock(), "criterion {criterion}: {verdict} — {detail}");
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn criterion_1_gradient_suite() {
    let suite = gradcheck::run_suite(20_240_601).unwrap();
    let worst = suite.checks.iter().map(|c| c.worst / c.tolerance).fold(0.0, f64::max);
    let failed: Vec<_> = suite.checks.iter().filter(|c| !c.passed()).map(|c| c.name.clone()).collect();
    let pass = failed.is_empty() && suite.elapsed < Duration::from_secs(60);
    report(
        1,
        pass,
        &format!(
            "{} checks, worst error at {:.2e} of tolerance, {:.2?}{}",
            suite.checks.len(),
            worst,
            suite.elapsed,
            if failed.is_empty() { String::new() } else { format!(", failing: {failed:?}") }
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_2_zero_offsets_reduce_to_convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (cin, cout) = (rng.gen_range(1..5), rng.gen_range(1..5));
        let (h, w) = (rng.gen_range(4..10), rng.gen_range(4..10));
        let k = [1, 3, 5][rng.gen_range(0..3)];
        let dilation = rng.gen_range(1..3);
        let spec = ConvSpec::same(cin, cout, k, dilation);
        let mut tape = Tape::new();
        let x = tape.constant(uniform(&mut rng, &[1, cin, h, w]));
        let wt = tape.constant(uniform(&mut rng, &spec.weight_shape()));
        let b = tape.constant(uniform(&mut rng, &[cout]));
        let offsets = tape.constant(Tensor::zeros(&[1, 2 * k * k, h, w]));
        let deform = tape.deformable_conv2d(x, offsets, wt, Some(b), &spec).unwrap();
        let plain = tape.conv2d(x, wt, Some(b), &spec).unwrap();
        let d = tape
            .value(deform)
            .data()
            .iter()
            .zip(tape.value(plain).data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        worst = worst.max(d);
    }
    let pass = worst < 1e-6;
    report(2, pass, &format!("20 instances, max deviation {worst:.2e}"));
    assert!(pass);
}

#[test]
fn criterion_3_attention_parameter_accounting() {
    let lka = LkaConfig { kernel: 21, dilation: 3, inception: vec![3, 5] };
    let attention = attention_param_count(64, &lka);
    let dense = dense_param_count(64, 21);
    let ratio = dense as f64 / attention as f64;
    let pass = attention == 9408 && dense == 1_806_336 && ratio > 190.0;
    report(3, pass, &format!("attention {attention}, dense {dense}, ratio {ratio:.1}x"));
    assert!(pass);
}

#[test]
fn criterion_4_loss_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (h, w) = (6, 7);

    let mut tape: Tape<f64> = Tape::new();
    let uniform_probs = tape.constant(Tensor::full(&[1, 4, h, w], 0.25));
    let labels = random_labels(&mut rng, h, w, 4);
    let ce = losses::self_label_ce(&mut tape, uniform_probs, &labels).unwrap();
    let ce_err = (tape.value(ce).item().unwrap() - 4f64.ln()).abs();

    let per_channel: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..1.0)).collect();
    let constant = (0..3).flat_map(|c| std::iter::repeat_n(per_channel[c], h * w)).collect();
    let constant = tape.constant(Tensor::new(&[1, 3, h, w], constant).unwrap());
    let spatial = losses::spatial_consistency(&mut tape, constant).unwrap();
    let spatial_value = tape.value(spatial).item().unwrap();

    // Identity transform, surrogate head cloned from the main head.
    let cfg = ModelConfig {
        channels: 8,
        blocks: 1,
        clusters: 3,
        lka: LkaConfig { kernel: 9, dilation: 2, inception: vec![3] },
        seed: 4,
        ..ModelConfig::default()
    };
    let mut params: Weights<f64> = Weights::init(&cfg).unwrap();
    params.aux_head = params.main_head.clone();
    let mut tape: Tape<f64> = Tape::new();
    let bound = params.bind(&mut tape);
    let x = tape.constant(uniform(&mut rng, &[1, 3, 10, 10]));
    let pred = model::forward(&mut tape, x, &bound, &cfg).unwrap();
    let pseudo = LabelMap::argmax(tape.value(pred.probs)).unwrap();
    let (grid, mask) = affine_grid(&AffineParams::IDENTITY, 10, 10).unwrap();
    let warped = s3seg::affine::warp_labels(&pseudo, &grid, &mask).unwrap();
    let aux = model::surrogate_forward(&mut tape, pred.features, &grid, &bound, &cfg).unwrap();
    let at = losses::affine_consistency(&mut tape, aux, &warped, &mask).unwrap();
    let main = losses::self_label_ce(&mut tape, pred.probs, &pseudo).unwrap();
    let at_err = (tape.value(at).item().unwrap() - tape.value(main).item().unwrap()).abs();

    let one = |tape: &mut Tape<f64>| tape.constant(Tensor::scalar(1.0));
    let (a, b, c) = (one(&mut tape), one(&mut tape), one(&mut tape));
    let joint = losses::joint(&mut tape, a, Some(b), Some(c), &LossWeights::SKIN).unwrap();
    let joint_err = (tape.value(joint).item().unwrap() - 1.8).abs();

    let pass = ce_err <= 1e-10 && spatial_value == 0.0 && at_err <= 1e-10 && joint_err <= 1e-12;
    report(
        4,
        pass,
        &format!(
            "|CE−ln4| {ce_err:.1e}, spatial(const) {spatial_value}, |AT−CE| {at_err:.1e}, |joint−1.8| {joint_err:.1e}"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_5_metric_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut checked = 0;
    let mut mismatches = 0;
    while checked < 100 {
        let (pd, gd) = (rng.gen_range(0.05..0.9), rng.gen_range(0.05..0.9));
        let p = random_mask(&mut rng, 16, 16, pd);
        let g = random_mask(&mut rng, 16, 16, gd);
        if p.is_empty() || g.is_empty() {
            continue;
        }
        let k = rng.gen_range(2..6);
        let labels = random_labels(&mut rng, 16, 16, k);
        let same = metrics::dsc(&p, &g).unwrap() == brute_dsc(&p, &g)
            && metrics::xor_metric(&p, &g).unwrap() == brute_xor(&p, &g)
            && hm_distance(&p, &g).unwrap() == brute_hausdorff(&p, &g)
            && best_overlap_cluster(&labels, &g).unwrap().0 == brute_best_overlap(&labels, &g);
        mismatches += usize::from(!same);
        checked += 1;
    }
    let mut a = BinaryMask::empty(16, 16);
    let mut b = BinaryMask::empty(16, 16);
    a.mask[4 * 16 + 4] = true;
    b.mask[(4 + 3) * 16 + 4 + 4] = true;
    let singleton = hm_distance(&a, &b).unwrap();
    let pass = mismatches == 0 && singleton == 5.0;
    report(5, pass, &format!("{checked} random pairs, {mismatches} mismatches; singleton HM {singleton}"));
    assert!(pass);
}

#[test]
fn criterion_6_synthetic_convergence() {
    let cfg = RunConfig::parse(DESK_CONFIG).unwrap();
    assert_eq!((cfg.optim.lr, cfg.optim.momentum, cfg.optim.max_iters), (0.36, 0.9, 50));
    assert_eq!(cfg.weights, LossWeights::SKIN);
    let start = Instant::now();
    let mut scores = Vec::new();
    for seed in 0..10 {
        let sample = noisy_disk(seed, 0.05);
        let run = train_sample(&sample, &cfg.setup(3, seed), cfg.precision).unwrap();
        let m = metrics::evaluate(&sample.id, &run.labels, sample.gt.as_ref().unwrap()).unwrap();
        scores.push(m.dsc);
    }
    let elapsed = start.elapsed();
    let good = scores.iter().filter(|&&d| d >= 90.0).count();
    let pass = good >= 8 && elapsed < Duration::from_secs(300);
    let listed: Vec<String> = scores.iter().map(|d| metrics::sig4(*d)).collect();
    report(6, pass, &format!("{good}/10 seeds with DSC ≥ 90 [{}], {elapsed:.1?}", listed.join(", ")));
    assert!(pass);
}

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_s3seg")).args(args).env_remove("S3SEG_SEED").output().unwrap()
}

fn dir_contents(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn criterion_7_segment_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("in");
    fs::create_dir(&input).unwrap();
    for seed in [3, 4] {
        write_sample(&input, &noisy_disk(seed, 0.05));
    }
    let config = tmp.path().join("desk.conf");
    fs::write(&config, DESK_CONFIG).unwrap();
    let run = |out: &str| {
        let out = tmp.path().join(out);
        let status = cli(&[
            "segment",
            "--input",
            input.to_str().unwrap(),
            "--config",
            config.to_str().unwrap(),
            "--seed",
            "11",
            "--set",
            "max_iters=8",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        dir_contents(&out)
    };
    let (first, second) = (run("a"), run("b"));
    let names: Vec<&str> = first.iter().map(|(n, _)| n.as_str()).collect();
    let expected = ["config.txt", "disk3_history.csv", "disk3_labels.png", "disk4_history.csv", "disk4_labels.png", "metrics.csv", "report.txt"];
    let pass = first == second && names == expected;
    report(7, pass, &format!("{} artifacts compared byte for byte: {}", names.len(), if first == second { "identical" } else { "differ" }));
    assert!(pass, "{names:?}");
}

#[test]
fn criterion_8_ablation_rows_and_surrogate_counter() {
    let tmp = tempfile::tempdir().unwrap();
    let sample = noisy_disk(8, 0.05);
    write_sample(tmp.path(), &sample);
    let config = tmp.path().join("desk.conf");
    fs::write(&config, DESK_CONFIG).unwrap();
    let out = tmp.path().join("ablation");
    let iters = 6;
    let status = cli(&[
        "ablate",
        "--input",
        tmp.path().join("disk8.png").to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--set",
        &format!("max_iters={iters}"),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let rows: Vec<Vec<String>> = csv.lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect();
    let lambdas: Vec<(f64, f64, f64)> =
        rows.iter().map(|r| (r[0].parse().unwrap(), r[1].parse().unwrap(), r[2].parse().unwrap())).collect();
    let expected = vec![(1.2, 0.0, 0.0), (1.2, 0.3, 0.0), (1.2, 0.0, 0.3), (1.2, 0.3, 0.3)];
    let surrogate: Vec<usize> = rows.iter().map(|r| r[6].parse().unwrap()).collect();
    let counters_ok = lambdas
        .iter()
        .zip(&surrogate)
        .all(|(&(_, l2, _), &n)| if l2 == 0.0 { n == 0 } else { n == iters });
    let pass = lambdas == expected && counters_ok;
    report(8, pass, &format!("rows {lambdas:?}, surrogate passes {surrogate:?}"));
    assert!(pass, "{csv}");
}

/// Full-protocol run on a user-supplied dermoscopy directory; reported,
/// never asserted. Set `S3SEG_PH2_DIR` to a directory of images with
/// `_lesion` masks to enable it.
#[test]
fn criterion_9_dataset_reproduction_is_optional() {
    let Ok(dir) = std::env::var("S3SEG_PH2_DIR") else {
        let _ = writeln!(std::io::stderr().lock(), "criterion 9: SKIPPED — set S3SEG_PH2_DIR to run the dataset protocol");
        return;
    };
    let tmp = tempfile::tempdir().unwrap();
    let cfg = RunConfig::parse(include_str!("../../../configs/skin.conf")).unwrap();
    let jobs = std::thread::available_parallelism().map_or(1, |n| n.get());
    match s3seg::pipeline::run_batch(&cfg, Path::new(&dir), Some("_lesion"), tmp.path(), jobs) {
        Ok(outcome) => {
            let agg = outcome.report.aggregate();
            let detail = match agg {
                Ok(a) => format!("{} images, DSC {} (reference 88.0 ± 3)", a.images, metrics::sig4(a.dsc)),
                Err(e) => format!("no scored images: {e}"),
            };
            let _ = writeln!(std::io::stderr().lock(), "criterion 9: REPORTED — {detail}");
        }
        Err(e) => {
            let _ = writeln!(std::io::stderr().lock(), "criterion 9: REPORTED — run failed: {e}");
        }
    }
}
