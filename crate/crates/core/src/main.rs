use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use s3seg::gradcheck;
use s3seg::pipeline::batch::{self, run_ablation_to, run_batch};
use s3seg::pipeline::{Preset, RunConfig};
use s3seg::Result;

#[derive(Debug, Parser)]
#[command(name = "s3seg", version, about = "Self-supervised single-image segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train on each input image independently and write label maps,
    /// training histories and a metrics report.
    Segment {
        /// An image file or a directory of images.
        #[arg(long)]
        input: PathBuf,
        /// Ground-truth masks are `<stem><suffix>.<ext>` next to each image.
        #[arg(long, default_value = "_gt")]
        mask_suffix: String,
        #[command(flatten)]
        config: ConfigArgs,
        /// Number of images trained concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Output directory (falls back to `output` in the config).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one image under the four loss-term configurations and compare.
    Ablate {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "_gt")]
        mask_suffix: String,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score existing label maps against ground-truth masks.
    Eval {
        /// Directory of `<id>_labels.png` (or `<id>.png`) label maps.
        #[arg(long)]
        pred: PathBuf,
        /// Directory of masks named `<id><suffix>.<ext>` or `<id>.<ext>`.
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value = "_gt")]
        mask_suffix: String,
        /// Machine-readable records are written here.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare every analytic gradient with central finite differences.
    CheckGrads {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Loss-weight preset; replaces the preset named in the config file.
    #[arg(long)]
    preset: Option<Preset>,
    /// Seed for initialization and affine sampling; overrides the config.
    #[arg(long, env = "S3SEG_SEED")]
    seed: Option<u64>,
    /// Extra overrides, e.g. `--set clusters=8 --set lr=0.1`.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_override)]
    overrides: Vec<(String, String)>,
}

fn parse_override(s: &str) -> std::result::Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected KEY=VALUE, got {s:?}"))
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let text = self.config.as_deref().map(fs::read_to_string).transpose()?;
        let mut overrides = self.overrides.clone();
        if let Some(seed) = self.seed {
            overrides.push(("seed".into(), seed.to_string()));
        }
        RunConfig::layered(self.preset, text.as_deref(), &overrides)
    }
}

fn output_dir(out: Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    out.or_else(|| cfg.output.clone())
        .ok_or_else(|| s3seg::Error::Config("no output directory: pass --out or set `output` in the config".into()))
}

fn mask_suffix(s: &str) -> Option<&str> {
    (!s.is_empty()).then_some(s)
}

fn segment(input: &Path, suffix: &str, config: &ConfigArgs, jobs: usize, out: Option<PathBuf>) -> Result<bool> {
    let cfg = config.resolve()?;
    let out = output_dir(out, &cfg)?;
    let outcome = run_batch(&cfg, input, mask_suffix(suffix), &out, jobs)?;
    print!("{}", outcome.report.to_table());
    println!("{} image(s) written to {}", outcome.processed.len(), out.display());
    Ok(outcome.all_succeeded())
}

fn ablate(input: &Path, suffix: &str, config: &ConfigArgs, out: Option<PathBuf>) -> Result<bool> {
    let cfg = config.resolve()?;
    let out = output_dir(out, &cfg)?;
    let rows = run_ablation_to(input, &cfg, mask_suffix(suffix), &out)?;
    print!("{}", batch::ablation_table(&rows));
    Ok(true)
}

fn eval(pred: &Path, gt: &Path, suffix: &str, out: &Path) -> Result<bool> {
    let report = batch::evaluate_dirs(pred, gt, suffix)?;
    fs::write(out, report.to_records())?;
    print!("{}", report.to_table());
    Ok(report.failures.is_empty())
}

fn check_grads(seed: u64) -> Result<bool> {
    let suite = gradcheck::run_suite(seed)?;
    for check in &suite.checks {
        println!("{check}");
    }
    let failed = suite.checks.iter().filter(|c| !c.passed()).count();
    println!("{} checks, {failed} failed, {:.2?}", suite.checks.len(), suite.elapsed);
    Ok(suite.passed())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Segment { input, mask_suffix, config, jobs, out } => segment(&input, &mask_suffix, &config, jobs, out),
        Command::Ablate { input, mask_suffix, config, out } => ablate(&input, &mask_suffix, &config, out),
        Command::Eval { pred, gt, mask_suffix, out } => eval(&pred, &gt, &mask_suffix, &out),
        Command::CheckGrads { seed } => check_grads(seed),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
