//! Evaluation against a ground-truth mask: best-overlap cluster selection,
//! Dice, XOR and boundary Hausdorff distance, plus dataset aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::labels::{LabelMap, INVALID_LABEL};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub mask: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != height * width {
            return Err(Error::InvalidShape(format!(
                "{} mask values for a {height}x{width} mask",
                mask.len()
            )));
        }
        Ok(Self { height, width, mask })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, mask: vec![false; height * width] }
    }

    /// Pixels of `labels` carrying `cluster`.
    pub fn from_cluster(labels: &LabelMap, cluster: u32) -> Self {
        let mask = labels.labels.iter().map(|&l| l == cluster).collect();
        Self { height: labels.height, width: labels.width, mask }
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.mask.iter().any(|&m| m)
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.mask[i * self.width + j]
    }

    /// Foreground pixels with at least one 4-neighbour outside the mask;
    /// positions beyond the image border count as outside.
    pub fn boundary(&self) -> Vec<(usize, usize)> {
        let (h, w) = (self.height, self.width);
        let mut out = Vec::new();
        for i in 0..h {
            for j in 0..w {
                if !self.get(i, j) {
                    continue;
                }
                let edge = i == 0
                    || j == 0
                    || i + 1 == h
                    || j + 1 == w
                    || !self.get(i - 1, j)
                    || !self.get(i + 1, j)
                    || !self.get(i, j - 1)
                    || !self.get(i, j + 1);
                if edge {
                    out.push((i, j));
                }
            }
        }
        out
    }
}

fn same_size(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::Shape(format!(
            "masks differ in size: {}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    Ok(())
}

fn intersection(a: &BinaryMask, b: &BinaryMask) -> usize {
    a.mask.iter().zip(&b.mask).filter(|(&x, &y)| x && y).count()
}

/// The predicted cluster that overlaps `gt` most (smallest id on ties) and
/// its indicator mask.
pub fn best_overlap_cluster(pred: &LabelMap, gt: &BinaryMask) -> Result<(u32, BinaryMask)> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::Shape(format!(
            "label map {}x{} vs ground truth {}x{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    if gt.is_empty() {
        return Err(Error::Evaluation("ground-truth mask is empty".into()));
    }
    let mut overlap: BTreeMap<u32, usize> = BTreeMap::new();
    for (&l, &g) in pred.labels.iter().zip(&gt.mask) {
        if l != INVALID_LABEL {
            *overlap.entry(l).or_default() += usize::from(g);
        }
    }
    // BTreeMap iterates ids in ascending order, so the first maximum wins
    let mut best: Option<(u32, usize)> = None;
    for (&id, &n) in &overlap {
        if best.is_none_or(|(_, b)| n > b) {
            best = Some((id, n));
        }
    }
    let (id, _) = best.ok_or_else(|| Error::Evaluation("label map has no valid pixels".into()))?;
    Ok((id, BinaryMask::from_cluster(pred, id)))
}

/// Dice coefficient in percent; 100 when both masks are empty.
pub fn dsc(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    same_size(pred, gt)?;
    let denom = pred.count() + gt.count();
    if denom == 0 {
        return Ok(100.0);
    }
    Ok(100.0 * 2.0 * intersection(pred, gt) as f64 / denom as f64)
}

/// Symmetric-difference area over ground-truth area, in percent.
pub fn xor_metric(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    same_size(pred, gt)?;
    let g = gt.count();
    if g == 0 {
        return Err(Error::Evaluation("XOR is undefined for an empty ground truth".into()));
    }
    let sym = pred.mask.iter().zip(&gt.mask).filter(|(&x, &y)| x != y).count();
    Ok(100.0 * sym as f64 / g as f64)
}

/// Squared distance from every pixel to the nearest seed pixel.
///
/// Separable exact transform: a column pass followed by a lower-envelope
/// pass over parabolas along each row. Values are integers held in `f64`.
fn squared_distance_field(h: usize, w: usize, seeds: &[(usize, usize)]) -> Vec<f64> {
    let far = ((h * h + w * w) as f64) * 4.0 + 1.0;
    let mut grid = vec![far; h * w];
    for &(i, j) in seeds {
        grid[i * w + j] = 0.0;
    }
    let mut line = Vec::new();
    for j in 0..w {
        line.clear();
        line.extend((0..h).map(|i| grid[i * w + j]));
        let d = lower_envelope(&line);
        for i in 0..h {
            grid[i * w + j] = d[i];
        }
    }
    for i in 0..h {
        let d = lower_envelope(&grid[i * w..(i + 1) * w]);
        grid[i * w..(i + 1) * w].copy_from_slice(&d);
    }
    grid
}

/// `d[q] = min_p (q − p)² + f[p]`.
fn lower_envelope(f: &[f64]) -> Vec<f64> {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let meet = |q: usize, p: usize| -> f64 {
        let (qf, pf) = (q as f64, p as f64);
        ((f[q] + qf * qf) - (f[p] + pf * pf)) / (2.0 * qf - 2.0 * pf)
    };
    for q in 1..n {
        let mut s = meet(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = meet(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    let mut d = vec![0.0; n];
    k = 0;
    for (q, out) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let diff = q as f64 - v[k] as f64;
        *out = diff * diff + f[v[k]];
    }
    d
}

/// Symmetric Hausdorff distance between the boundary pixel sets of two
/// masks, in Euclidean pixel units.
pub fn hm_distance(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    same_size(pred, gt)?;
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::Evaluation("boundary distance needs two non-empty masks".into()));
    }
    let (bp, bg) = (pred.boundary(), gt.boundary());
    let (h, w) = (pred.height, pred.width);
    let to_gt = squared_distance_field(h, w, &bg);
    let to_pred = squared_distance_field(h, w, &bp);
    let worst = |from: &[(usize, usize)], field: &[f64]| {
        from.iter().map(|&(i, j)| field[i * w + j]).fold(0.0, f64::max)
    };
    Ok(worst(&bp, &to_gt).max(worst(&bg, &to_pred)).sqrt())
}

/// Metrics of one image's best-overlap cluster.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageMetrics {
    pub id: String,
    pub cluster: u32,
    pub dsc: f64,
    pub xor: f64,
    /// `None` when the selected prediction is empty.
    pub hm: Option<f64>,
}

/// Scores a label map against its ground truth. An empty selected
/// prediction scores DSC 0 and XOR 100 with no boundary distance.
pub fn evaluate(id: &str, pred: &LabelMap, gt: &BinaryMask) -> Result<ImageMetrics> {
    let (cluster, chosen) = best_overlap_cluster(pred, gt)?;
    if chosen.is_empty() {
        return Ok(ImageMetrics { id: id.into(), cluster, dsc: 0.0, xor: 100.0, hm: None });
    }
    Ok(ImageMetrics {
        id: id.into(),
        cluster,
        dsc: dsc(&chosen, gt)?,
        xor: xor_metric(&chosen, gt)?,
        hm: Some(hm_distance(&chosen, gt)?),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub images: usize,
    pub dsc: f64,
    pub xor: f64,
    /// Mean over images with a defined boundary distance.
    pub hm: Option<f64>,
}

/// Arithmetic mean of every metric.
pub fn aggregate(reports: &[ImageMetrics]) -> Result<Aggregate> {
    if reports.is_empty() {
        return Err(Error::Evaluation("nothing to aggregate".into()));
    }
    let n = reports.len() as f64;
    let hms: Vec<f64> = reports.iter().filter_map(|r| r.hm).collect();
    Ok(Aggregate {
        images: reports.len(),
        dsc: reports.iter().map(|r| r.dsc).sum::<f64>() / n,
        xor: reports.iter().map(|r| r.xor).sum::<f64>() / n,
        hm: (!hms.is_empty()).then(|| hms.iter().sum::<f64>() / hms.len() as f64),
    })
}

/// Formats with four significant digits.
pub fn sig4(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x:.3}");
    }
    let magnitude = x.abs().log10().floor() as i32;
    let decimals = (3 - magnitude).max(0) as usize;
    format!("{x:.decimals$}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub config_hash: String,
    pub seed: u64,
    pub images: Vec<ImageMetrics>,
    /// Images that could not be processed, with the reason.
    pub failures: Vec<(String, String)>,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "id,cluster,dsc,hm,xor";

    pub fn aggregate(&self) -> Result<Aggregate> {
        aggregate(&self.images)
    }

    /// Human-readable table with four significant digits.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "config {}  seed {}", self.config_hash, self.seed);
        let _ = writeln!(out, "{:<24} {:>7} {:>9} {:>9} {:>9}", "image", "cluster", "DSC↑", "HM↓", "XOR↓");
        let hm = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), sig4);
        for r in &self.images {
            let _ = writeln!(
                out,
                "{:<24} {:>7} {:>9} {:>9} {:>9}",
                r.id,
                r.cluster,
                sig4(r.dsc),
                hm(r.hm),
                sig4(r.xor)
            );
        }
        if let Ok(a) = self.aggregate() {
            let _ = writeln!(
                out,
                "{:<24} {:>7} {:>9} {:>9} {:>9}",
                format!("mean ({} images)", a.images),
                "",
                sig4(a.dsc),
                hm(a.hm),
                sig4(a.xor)
            );
        }
        for (id, reason) in &self.failures {
            let _ = writeln!(out, "{id:<24} failed: {reason}");
        }
        out
    }

    /// One full-precision record per image followed by the aggregate.
    pub fn to_records(&self) -> String {
        let mut out = format!("# config {} seed {}\n{}\n", self.config_hash, self.seed, Self::CSV_HEADER);
        let hm = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| x.to_string());
        for r in &self.images {
            let _ = writeln!(out, "{},{},{},{},{}", r.id, r.cluster, r.dsc, hm(r.hm), r.xor);
        }
        if let Ok(a) = self.aggregate() {
            let _ = writeln!(out, "aggregate,,{},{},{}", a.dsc, hm(a.hm), a.xor);
        }
        out
    }
}
