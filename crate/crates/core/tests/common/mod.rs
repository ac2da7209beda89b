//! Shared fixtures and brute-force reference implementations.
#![allow(dead_code)]

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use s3seg::metrics::BinaryMask;
use s3seg::pipeline::ImageSample;
use s3seg::LabelMap;

/// A 64×64 RGB image of a bright disk on a dark background with Gaussian
/// noise, plus its ground-truth mask. Disk centre and radius are drawn
/// from `seed`.
pub fn noisy_disk(seed: u64, sigma: f64) -> ImageSample {
    let n = 64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cy = 32.0 + rng.gen_range(-4.0..4.0);
    let cx = 32.0 + rng.gen_range(-4.0..4.0);
    let r: f64 = rng.gen_range(18.0..24.0);
    let noise = Normal::new(0.0, sigma).unwrap();
    let mut pixels = Vec::with_capacity(n * n * 3);
    let mut mask = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let inside = (i as f64 - cy).hypot(j as f64 - cx) < r;
            mask.push(inside);
            let base = if inside { 0.75 } else { 0.25 };
            for _ in 0..3 {
                pixels.push((base + noise.sample(&mut rng)).clamp(0.0, 1.0));
            }
        }
    }
    ImageSample {
        id: format!("disk{seed}"),
        height: n,
        width: n,
        channels: 3,
        pixels,
        gt: Some(BinaryMask::new(n, n, mask).unwrap()),
        path: Default::default(),
    }
}

pub fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, density: f64) -> BinaryMask {
    BinaryMask::new(h, w, (0..h * w).map(|_| rng.gen_bool(density)).collect()).unwrap()
}

pub fn random_labels(rng: &mut ChaCha8Rng, h: usize, w: usize, k: u32) -> LabelMap {
    LabelMap::new(h, w, (0..h * w).map(|_| rng.gen_range(0..k)).collect()).unwrap()
}

pub fn brute_dsc(p: &BinaryMask, g: &BinaryMask) -> f64 {
    let (mut inter, mut np, mut ng) = (0usize, 0usize, 0usize);
    for i in 0..p.height {
        for j in 0..p.width {
            let (a, b) = (p.get(i, j), g.get(i, j));
            inter += usize::from(a && b);
            np += usize::from(a);
            ng += usize::from(b);
        }
    }
    if np + ng == 0 {
        100.0
    } else {
        100.0 * 2.0 * inter as f64 / (np + ng) as f64
    }
}

pub fn brute_xor(p: &BinaryMask, g: &BinaryMask) -> f64 {
    let mut sym = 0usize;
    let mut area = 0usize;
    for i in 0..p.height {
        for j in 0..p.width {
            sym += usize::from(p.get(i, j) ^ g.get(i, j));
            area += usize::from(g.get(i, j));
        }
    }
    100.0 * sym as f64 / area as f64
}

fn inside(m: &BinaryMask, i: i64, j: i64) -> bool {
    i >= 0 && j >= 0 && (i as usize) < m.height && (j as usize) < m.width && m.get(i as usize, j as usize)
}

pub fn brute_boundary(m: &BinaryMask) -> Vec<(i64, i64)> {
    let mut out = Vec::new();
    for i in 0..m.height as i64 {
        for j in 0..m.width as i64 {
            if inside(m, i, j) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(di, dj)| !inside(m, i + di, j + dj)) {
                out.push((i, j));
            }
        }
    }
    out
}

/// Directed distances by exhaustive pairwise search.
pub fn brute_hausdorff(p: &BinaryMask, g: &BinaryMask) -> f64 {
    let (bp, bg) = (brute_boundary(p), brute_boundary(g));
    let directed = |from: &[(i64, i64)], to: &[(i64, i64)]| {
        from.iter()
            .map(|&(i, j)| to.iter().map(|&(k, l)| (i - k).pow(2) + (j - l).pow(2)).min().unwrap())
            .max()
            .unwrap()
    };
    (directed(&bp, &bg).max(directed(&bg, &bp)) as f64).sqrt()
}

pub fn brute_best_overlap(pred: &LabelMap, gt: &BinaryMask) -> u32 {
    let mut ids = pred.labels.clone();
    ids.sort_unstable();
    ids.dedup();
    let mut best: Option<(u32, usize)> = None;
    for id in ids {
        let n = (0..pred.labels.len()).filter(|&p| pred.labels[p] == id && gt.mask[p]).count();
        if best.is_none_or(|(_, b)| n > b) {
            best = Some((id, n));
        }
    }
    best.unwrap().0
}

/// Writes `sample` as an 8-bit PNG, plus `<id>_gt.png` when it has a mask.
pub fn write_sample(dir: &Path, sample: &ImageSample) {
    let (w, h) = (sample.width as u32, sample.height as u32);
    let rgb: Vec<u8> = sample.pixels.iter().map(|v| (v * 255.0).round() as u8).collect();
    image::RgbImage::from_raw(w, h, rgb).unwrap().save(dir.join(format!("{}.png", sample.id))).unwrap();
    if let Some(gt) = &sample.gt {
        let mask: Vec<u8> = gt.mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
        image::GrayImage::from_raw(w, h, mask).unwrap().save(dir.join(format!("{}_gt.png", sample.id))).unwrap();
    }
}
