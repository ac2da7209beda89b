//! Batch orchestration: independent per-image training runs fanned out
//! over worker threads, artifact writing, evaluation, and the loss-term
//! ablation.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::losses::LossWeights;
use crate::metrics::{self, sig4, ImageMetrics, MetricsReport};
use crate::pipeline::config::{Precision, RunConfig};
use crate::pipeline::io::{self, ImageSample};
use crate::trainer::{self, Counters, TrainHistory, TrainSetup};

/// Report file names inside the output directory.
pub const REPORT_TABLE: &str = "report.txt";
pub const REPORT_RECORDS: &str = "metrics.csv";
pub const RESOLVED_CONFIG: &str = "config.txt";

/// Result of training on one image.
#[derive(Clone, Debug)]
pub struct ImageRun {
    pub labels: LabelMap,
    pub history: TrainHistory,
    pub counters: Counters,
}

/// Trains on one decoded sample at the configured precision.
pub fn train_sample(sample: &ImageSample, setup: &TrainSetup, precision: Precision) -> Result<ImageRun> {
    macro_rules! run {
        ($t:ty) => {{
            let image = io::preprocess::<$t>(sample)?;
            let out = trainer::train_single_image(&image, setup)?;
            ImageRun { labels: out.labels, history: out.history, counters: out.counters }
        }};
    }
    Ok(match precision {
        Precision::F32 => run!(f32),
        Precision::F64 => run!(f64),
    })
}

pub fn labels_path(out: &Path, id: &str) -> PathBuf {
    out.join(format!("{id}_labels.png"))
}

pub fn history_path(out: &Path, id: &str) -> PathBuf {
    out.join(format!("{id}_history.csv"))
}

#[derive(Clone, Debug)]
pub struct BatchOutcome {
    pub report: MetricsReport,
    /// Images that were processed, in input order.
    pub processed: Vec<String>,
}

impl BatchOutcome {
    pub fn all_succeeded(&self) -> bool {
        self.report.failures.is_empty()
    }
}

/// Runs `f` over `items` on up to `jobs` threads; results keep input order.
fn fan_out<I: Sync, O: Send>(items: &[I], jobs: usize, f: impl Fn(usize, &I) -> O + Sync) -> Vec<O> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<O>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, items.len().max(1)) {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, Ordering::Relaxed);
                let Some(item) = items.get(idx) else { break };
                let out = f(idx, item);
                slots.lock().expect("result slots")[idx] = Some(out);
            });
        }
    });
    slots.into_inner().expect("result slots").into_iter().map(|o| o.expect("every item ran")).collect()
}

/// Trains image `index` with seed `seed + index` and writes its label map
/// and history; returns its metrics when a ground truth is attached.
fn process_one(path: &Path, index: usize, cfg: &RunConfig, mask_suffix: Option<&str>, out: &Path) -> Result<Option<ImageMetrics>> {
    let sample = io::load_image(path, mask_suffix)?;
    let setup = cfg.setup(sample.channels, cfg.seed.wrapping_add(index as u64));
    let run = train_sample(&sample, &setup, cfg.precision)?;
    io::write_label_png(&labels_path(out, &sample.id), &run.labels)?;
    fs::write(history_path(out, &sample.id), run.history.to_csv())?;
    sample.gt.as_ref().map(|gt| metrics::evaluate(&sample.id, &run.labels, gt)).transpose()
}

/// Segments every image (a single file or a directory) independently,
/// writes per-image artifacts and the aggregate report into `out`.
/// Per-image failures are recorded in the report rather than aborting.
pub fn run_batch(cfg: &RunConfig, input: &Path, mask_suffix: Option<&str>, out: &Path, jobs: usize) -> Result<BatchOutcome> {
    cfg.validate()?;
    let paths = if input.is_dir() {
        io::list_images(input, mask_suffix)?
    } else if input.is_file() {
        vec![input.to_path_buf()]
    } else {
        return Err(Error::Config(format!("input {} does not exist", input.display())));
    };
    if paths.is_empty() {
        return Err(Error::Config(format!("no images found in {}", input.display())));
    }
    fs::create_dir_all(out)?;
    fs::write(out.join(RESOLVED_CONFIG), cfg.to_text())?;
    let results = fan_out(&paths, jobs, |idx, path| process_one(path, idx, cfg, mask_suffix, out));

    let mut report = MetricsReport { config_hash: cfg.hash(), seed: cfg.seed, images: Vec::new(), failures: Vec::new() };
    let mut processed = Vec::new();
    for (path, result) in paths.iter().zip(results) {
        let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("?").to_string();
        match result {
            Ok(m) => {
                processed.push(id);
                report.images.extend(m);
            }
            Err(e) => report.failures.push((id, e.to_string())),
        }
    }
    write_report(&report, out)?;
    Ok(BatchOutcome { report, processed })
}

pub fn write_report(report: &MetricsReport, out: &Path) -> Result<()> {
    fs::write(out.join(REPORT_TABLE), report.to_table())?;
    fs::write(out.join(REPORT_RECORDS), report.to_records())?;
    Ok(())
}

/// Scores existing label maps (`<id>_labels.png` or `<id>.png` in `pred`)
/// against masks in `gt` (`<id><mask_suffix>.<ext>` or `<id>.<ext>`).
pub fn evaluate_dirs(pred: &Path, gt: &Path, mask_suffix: &str) -> Result<MetricsReport> {
    let mut report = MetricsReport { config_hash: "n/a".into(), seed: 0, images: Vec::new(), failures: Vec::new() };
    let mut preds: Vec<PathBuf> = fs::read_dir(pred)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    preds.sort();
    for path in preds {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("").to_string();
        let id = stem.strip_suffix("_labels").unwrap_or(&stem).to_string();
        let gt_path = io::IMAGE_EXTENSIONS
            .iter()
            .flat_map(|ext| [gt.join(format!("{id}{mask_suffix}.{ext}")), gt.join(format!("{id}.{ext}"))])
            .find(|p| p.is_file());
        let result = match gt_path {
            None => Err(Error::Evaluation(format!("no ground truth for {id}"))),
            Some(g) => io::read_label_png(&path)
                .and_then(|labels| io::load_mask(&g).map(|mask| (labels, mask)))
                .and_then(|(labels, mask)| metrics::evaluate(&id, &labels, &mask)),
        };
        match result {
            Ok(m) => report.images.push(m),
            Err(e) => report.failures.push((id, e.to_string())),
        }
    }
    if report.images.is_empty() && report.failures.is_empty() {
        return Err(Error::Evaluation(format!("no label maps in {}", pred.display())));
    }
    Ok(report)
}

/// One row of the loss-term ablation.
#[derive(Clone, Debug)]
pub struct AblationRow {
    pub weights: LossWeights,
    pub labels: LabelMap,
    pub history: TrainHistory,
    pub counters: Counters,
    pub metrics: Option<ImageMetrics>,
}

/// Trains once per loss configuration from the same initialization seed.
pub fn run_ablation(sample: &ImageSample, cfg: &RunConfig, presets: &[LossWeights]) -> Result<Vec<AblationRow>> {
    presets
        .iter()
        .map(|&weights| {
            let mut setup = cfg.setup(sample.channels, cfg.seed);
            setup.weights = weights;
            let run = train_sample(sample, &setup, cfg.precision)?;
            let metrics = sample.gt.as_ref().map(|gt| metrics::evaluate(&sample.id, &run.labels, gt)).transpose()?;
            Ok(AblationRow { weights, labels: run.labels, history: run.history, counters: run.counters, metrics })
        })
        .collect()
}

/// Comparison table of ablation rows, four significant digits.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = format!(
        "{:>7} {:>7} {:>7} {:>9} {:>9} {:>9} {:>10}\n",
        "λ1", "λ2", "λ3", "DSC↑", "HM↓", "XOR↓", "surrogate"
    );
    for r in rows {
        let (dsc, hm, xor) = match &r.metrics {
            Some(m) => (sig4(m.dsc), m.hm.map_or("n/a".into(), sig4), sig4(m.xor)),
            None => ("n/a".into(), "n/a".into(), "n/a".into()),
        };
        let w = r.weights;
        let _ = writeln!(
            out,
            "{:>7} {:>7} {:>7} {dsc:>9} {hm:>9} {xor:>9} {:>10}",
            w.lambda1, w.lambda2, w.lambda3, r.counters.surrogate_passes
        );
    }
    out
}

/// Machine-readable ablation records at full precision.
pub fn ablation_records(rows: &[AblationRow]) -> String {
    let mut out = String::from("lambda1,lambda2,lambda3,dsc,hm,xor,surrogate_passes,sobel_passes\n");
    for r in rows {
        let w = r.weights;
        let (dsc, hm, xor) = match &r.metrics {
            Some(m) => (m.dsc.to_string(), m.hm.map_or("NA".into(), |v| v.to_string()), m.xor.to_string()),
            None => ("NA".into(), "NA".into(), "NA".into()),
        };
        let _ = writeln!(
            out,
            "{},{},{},{dsc},{hm},{xor},{},{}",
            w.lambda1, w.lambda2, w.lambda3, r.counters.surrogate_passes, r.counters.sobel_passes
        );
    }
    out
}

/// Runs the four-row ablation on one image and writes its artifacts.
pub fn run_ablation_to(input: &Path, cfg: &RunConfig, mask_suffix: Option<&str>, out: &Path) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let sample = io::load_image(input, mask_suffix)?;
    let rows = run_ablation(&sample, cfg, &cfg.weights.ablation_rows())?;
    fs::create_dir_all(out)?;
    fs::write(out.join(RESOLVED_CONFIG), cfg.to_text())?;
    for (i, row) in rows.iter().enumerate() {
        io::write_label_png(&out.join(format!("{}_row{i}_labels.png", sample.id)), &row.labels)?;
        fs::write(out.join(format!("{}_row{i}_history.csv", sample.id)), row.history.to_csv())?;
    }
    fs::write(out.join("ablation.txt"), ablation_table(&rows))?;
    fs::write(out.join("ablation.csv"), ablation_records(&rows))?;
    Ok(rows)
}
