use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use s3seg::affine::{affine_grid, AffineParams};
use s3seg::model::{
    attention_param_count, checkpoint, dense_param_count, forward, head, ilka_block_traced, surrogate_forward,
    LkaConfig, ModelConfig, Weights,
};
use s3seg::nn::{ConvSpec, SampleGrid};
use s3seg::{Error, Tape, Tensor};

fn small_config(seed: u64) -> ModelConfig {
    ModelConfig {
        in_channels: 3,
        channels: 8,
        blocks: 1,
        clusters: 4,
        lka: LkaConfig { kernel: 9, dilation: 2, inception: vec![3] },
        seed,
        ..ModelConfig::default()
    }
}

fn random_image(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor<f64> {
    Tensor::new(&[1, c, h, w], (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn probabilities_sum_to_one_and_keep_extent() {
    let cfg = small_config(3);
    let params: Weights<f64> = Weights::init(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let x = tape.constant(random_image(&mut rng, 3, 11, 13));
    let pred = forward(&mut tape, x, &bound, &cfg).unwrap();
    let probs = tape.value(pred.probs);
    assert_eq!(probs.shape(), &[1, 4, 11, 13]);
    assert_eq!(tape.shape(pred.features), &[1, 8, 11, 13]);
    let plane = 11 * 13;
    for p in 0..plane {
        let s: f64 = (0..4).map(|k| probs.data()[k * plane + p]).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn initialization_is_seed_deterministic() {
    let a: Weights<f64> = Weights::init(&small_config(5)).unwrap();
    let b: Weights<f64> = Weights::init(&small_config(5)).unwrap();
    let c: Weights<f64> = Weights::init(&small_config(6)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn undersized_or_mismatched_input_is_rejected() {
    let cfg = small_config(0);
    let params: Weights<f64> = Weights::init(&cfg).unwrap();
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let tiny = tape.constant(Tensor::zeros(&[1, 3, 4, 9]));
    assert!(matches!(forward(&mut tape, tiny, &bound, &cfg), Err(Error::InputTooSmall { .. })));
    let gray = tape.constant(Tensor::zeros(&[1, 1, 9, 9]));
    assert!(matches!(forward(&mut tape, gray, &bound, &cfg), Err(Error::Shape(_))));
}

/// Central differences of a random projection of the output with respect
/// to a handful of stem weights, through the whole encoder and head.
#[test]
fn stem_gradient_matches_finite_differences_end_to_end() {
    let cfg = small_config(11);
    let params: Weights<f64> = Weights::init(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let image = random_image(&mut rng, 3, 9, 9);
    let projection: Vec<f64> = (0..4 * 81).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let objective = |p: &Weights<f64>, with_grad: bool| {
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        let x = tape.constant(image.clone());
        let pred = forward(&mut tape, x, &bound, &cfg).unwrap();
        let proj = tape.constant(Tensor::new(&[1, 4, 9, 9], projection.clone()).unwrap());
        let prod = tape.mul(pred.probs, proj).unwrap();
        let loss = tape.sum(prod, None).unwrap();
        let value = tape.value(loss).item().unwrap();
        let grad = with_grad.then(|| {
            tape.backward(loss).unwrap();
            tape.grad(bound.stem.weight).unwrap()
        });
        (value, grad)
    };

    let analytic = objective(&params, true).1.unwrap();
    let step = 1e-5;
    for idx in [0, 7, 31, 100, 215] {
        let mut plus = params.clone();
        plus.stem.weight.data_mut()[idx] += step;
        let mut minus = params.clone();
        minus.stem.weight.data_mut()[idx] -= step;
        let numeric = (objective(&plus, false).0 - objective(&minus, false).0) / (2.0 * step);
        let a = analytic.data()[idx];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        assert!(err < 1e-4, "stem weight {idx}: analytic {a} numeric {numeric}");
    }
}

#[test]
fn identity_grid_with_cloned_head_reproduces_main_head() {
    for head_norm in [false, true] {
        let cfg = ModelConfig { head_norm, ..small_config(2) };
        let mut params: Weights<f64> = Weights::init(&cfg).unwrap();
        params.aux_head = params.main_head.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let x = tape.constant(random_image(&mut rng, 3, 10, 12));
        let pred = forward(&mut tape, x, &bound, &cfg).unwrap();
        let aux = surrogate_forward(&mut tape, pred.features, &SampleGrid::identity(10, 12), &bound, &cfg).unwrap();
        let diff = max_abs_diff(&tape.value(aux).to_f64_vec(), &tape.value(pred.probs).to_f64_vec());
        assert!(diff < 1e-10, "head_norm {head_norm}: {diff}");
    }
}

#[test]
fn quarter_turn_matches_rotated_feature_oracle() {
    let cfg = small_config(8);
    let params: Weights<f64> = Weights::init(&cfg).unwrap();
    let n = 9;
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let x = tape.constant(random_image(&mut rng, 3, n, n));
    let pred = forward(&mut tape, x, &bound, &cfg).unwrap();
    let (grid, mask) = affine_grid(&AffineParams::rotation(90.0), n, n).unwrap();
    assert_eq!(mask.count(), n * n);
    let aux = surrogate_forward(&mut tape, pred.features, &grid, &bound, &cfg).unwrap();

    // Output pixel (i, j) of a quarter turn about the center reads source
    // pixel (n−1−j, i).
    let features = tape.value(pred.features).clone();
    let c = cfg.channels;
    let mut rotated = vec![0.0; c * n * n];
    for ch in 0..c {
        for i in 0..n {
            for j in 0..n {
                rotated[(ch * n + i) * n + j] = features.data()[(ch * n + (n - 1 - j)) * n + i];
            }
        }
    }
    let rotated = tape.constant(Tensor::new(&[1, c, n, n], rotated).unwrap());
    let expected = head(&mut tape, rotated, &bound.aux_head, cfg.head_norm).unwrap();
    let diff = max_abs_diff(&tape.value(aux).to_f64_vec(), &tape.value(expected).to_f64_vec());
    assert!(diff < 1e-10, "{diff}");
}

/// With the attention path silenced the block reduces to
/// `norm(fuse(x))`, which is rebuilt here from explicit loops.
#[test]
fn silenced_attention_block_reduces_to_pointwise_fuse() {
    let cfg = small_config(13);
    let mut params: Weights<f64> = Weights::init(&cfg).unwrap();
    let block = &mut params.blocks[0];
    for conv in block.inception.iter_mut().chain([&mut block.dilated, &mut block.mix]) {
        conv.weight = Tensor::zeros(conv.weight.shape());
        conv.bias = conv.bias.as_ref().map(|b| Tensor::zeros(b.shape()));
    }
    let (c, h, w) = (cfg.channels, 8, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let input = random_image(&mut rng, c, h, w);
    let fuse_bias: Vec<f64> = (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect();
    params.blocks[0].fuse.bias = Some(Tensor::new(&[c], fuse_bias.clone()).unwrap());

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let x = tape.constant(input.clone());
    let trace = ilka_block_traced(&mut tape, x, &bound.blocks[0], &cfg.lka).unwrap();

    assert!(tape.value(trace.attention).data().iter().all(|&v| v == 0.0));
    assert_eq!(tape.value(trace.gated).data().iter().filter(|&&v| v != 0.0).count(), 0);

    let wf = params.blocks[0].fuse.weight.data();
    let x = input.data();
    let plane = h * w;
    let mut oracle = vec![0.0; c * plane];
    for o in 0..c {
        for p in 0..plane {
            oracle[o * plane + p] = fuse_bias[o] + (0..c).map(|i| wf[o * c + i] * x[i * plane + p]).sum::<f64>();
        }
    }
    let diff = max_abs_diff(&tape.value(trace.pre_norm).to_f64_vec(), &oracle);
    assert!(diff < 1e-12, "{diff}");

    // Standardize and rectify by hand for the block output.
    let mut expected = vec![0.0; c * plane];
    for ch in 0..c {
        let v = &oracle[ch * plane..(ch + 1) * plane];
        let mean = v.iter().sum::<f64>() / plane as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / plane as f64;
        for p in 0..plane {
            expected[ch * plane + p] = ((v[p] - mean) / (var + s3seg::model::encoder::BN_EPS).sqrt()).max(0.0);
        }
    }
    let diff = max_abs_diff(&tape.value(trace.output).to_f64_vec(), &expected);
    assert!(diff < 1e-10, "{diff}");
}

#[test]
fn attention_path_is_far_cheaper_than_a_dense_kernel() {
    let lka = LkaConfig::default();
    assert_eq!(attention_param_count(64, &lka), 9408);
    assert_eq!(dense_param_count(64, 21), 1_806_336);

    // The counter agrees with the tensors the model actually allocates.
    let cfg = ModelConfig { channels: 64, clusters: 2, blocks: 1, ..ModelConfig::default() };
    let params: Weights<f32> = Weights::init(&cfg).unwrap();
    let b = &params.blocks[0];
    let allocated: usize =
        b.inception.iter().map(|c| c.weight.numel()).sum::<usize>() + b.dilated.weight.numel() + b.mix.weight.numel();
    assert_eq!(allocated, 9408);
    assert_eq!(ConvSpec::same(64, 64, 21, 1).weight_count(), 1_806_336);
}

#[test]
fn checkpoint_round_trip_keeps_config_and_values() {
    let cfg = ModelConfig { head_norm: false, ..small_config(31) };
    let params: Weights<f32> = Weights::init(&cfg).unwrap();
    let mut bytes = Vec::new();
    checkpoint::save(&mut bytes, &cfg, &params).unwrap();
    let (cfg2, params2) = checkpoint::load::<f32>(&mut bytes.as_slice()).unwrap();
    assert_eq!(cfg2, cfg);
    assert_eq!(params2, params);
    bytes[0] = b'X';
    assert!(matches!(checkpoint::load::<f32>(&mut bytes.as_slice()), Err(Error::Checkpoint(_))));
}

#[test]
fn single_precision_tracks_double_precision() {
    let cfg = small_config(41);
    let p64: Weights<f64> = Weights::init(&cfg).unwrap();
    let p32: Weights<f32> = p64.map(|_, t| t.cast());
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let image = random_image(&mut rng, 3, 9, 9);

    let mut t64 = Tape::new();
    let b64 = p64.bind(&mut t64);
    let x64 = t64.constant(image.clone());
    let out64 = forward(&mut t64, x64, &b64, &cfg).unwrap();

    let mut t32 = Tape::new();
    let b32 = p32.bind(&mut t32);
    let x32 = t32.constant(image.cast());
    let out32 = forward(&mut t32, x32, &b32, &cfg).unwrap();

    let diff = max_abs_diff(&t64.value(out64.probs).to_f64_vec(), &t32.value(out32.probs).to_f64_vec());
    assert!(diff < 1e-4, "{diff}");
}
