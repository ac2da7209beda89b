//! Run configuration as plain `key = value` text with `#` comments.
//!
//! Values are resolved in three layers: preset defaults, then the config
//! file, then command-line overrides.

use std::fmt::{self, Write as _};
use std::path::PathBuf;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::affine::AffineRanges;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::trainer::{OptimConfig, TrainSetup};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Skin,
    Lung,
    Custom,
}

impl Preset {
    /// Loss weights of a named preset; `None` for custom.
    pub fn weights(self) -> Option<LossWeights> {
        match self {
            Self::Skin => Some(LossWeights::SKIN),
            Self::Lung => Some(LossWeights::LUNG),
            Self::Custom => None,
        }
    }

    /// The named preset whose weights equal `w`, else custom.
    pub fn classify(w: &LossWeights) -> Self {
        [Self::Skin, Self::Lung].into_iter().find(|p| p.weights().as_ref() == Some(w)).unwrap_or(Self::Custom)
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "skin" => Ok(Self::Skin),
            "lung" => Ok(Self::Lung),
            "custom" => Ok(Self::Custom),
            other => Err(Error::Config(format!("unknown preset {other:?} (skin, lung or custom)"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Skin => "skin",
            Self::Lung => "lung",
            Self::Custom => "custom",
        })
    }
}

/// Floating-point width used for training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "f32" => Ok(Self::F32),
            "f64" => Ok(Self::F64),
            other => Err(Error::Config(format!("unknown precision {other:?} (f32 or f64)"))),
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::F32 => "f32",
            Self::F64 => "f64",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub weights: LossWeights,
    pub affine: AffineRanges,
    pub precision: Precision,
    pub seed: u64,
    pub output: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(Preset::Skin)
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value.trim().parse().map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_pair(key: &str, value: &str) -> Result<(f64, f64)> {
    let parts: Vec<&str> = value.split(',').collect();
    match parts.as_slice() {
        [lo, hi] => Ok((parse(key, lo)?, parse(key, hi)?)),
        _ => Err(Error::Config(format!("{key} expects `low, high`, got {value:?}"))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v)).collect()
}

/// Splits config text into `(line number, key, value)` entries.
fn entries(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {raw:?}", idx + 1)))?;
        out.push((idx + 1, key.trim().to_string(), value.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    /// Defaults with the loss weights of `preset` (skin weights for custom).
    pub fn preset(preset: Preset) -> Self {
        Self {
            preset,
            model: ModelConfig::default(),
            optim: OptimConfig::default(),
            weights: preset.weights().unwrap_or_default(),
            affine: AffineRanges::default(),
            precision: Precision::F32,
            seed: 0,
            output: None,
        }
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "preset" => self.preset = v.parse()?,
            "lambda1" => self.weights.lambda1 = parse(key, v)?,
            "lambda2" => self.weights.lambda2 = parse(key, v)?,
            "lambda3" => self.weights.lambda3 = parse(key, v)?,
            "lr" => self.optim.lr = parse(key, v)?,
            "momentum" => self.optim.momentum = parse(key, v)?,
            "max_iters" => self.optim.max_iters = parse(key, v)?,
            "min_clusters" => {
                self.optim.min_clusters = if v == "none" { None } else { Some(parse(key, v)?) }
            }
            "offset_lr_scale" => self.optim.offset_lr_scale = parse(key, v)?,
            "channels" => self.model.channels = parse(key, v)?,
            "blocks" => self.model.blocks = parse(key, v)?,
            "clusters" => self.model.clusters = parse(key, v)?,
            "lka_kernel" => self.model.lka.kernel = parse(key, v)?,
            "lka_dilation" => self.model.lka.dilation = parse(key, v)?,
            "inception" => self.model.lka.inception = parse_list(key, v)?,
            "deform_kernel" => self.model.deform_kernel = parse(key, v)?,
            "head_norm" => self.model.head_norm = parse(key, v)?,
            "rotation_deg" => self.affine.rotation_deg = parse_pair(key, v)?,
            "scale" => self.affine.scale = parse_pair(key, v)?,
            "shear_deg" => self.affine.shear_deg = parse_pair(key, v)?,
            "translate" => self.affine.translate = parse_pair(key, v)?,
            "precision" => self.precision = v.parse()?,
            "seed" => self.seed = parse(key, v)?,
            "output" => self.output = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Parses a complete config file on top of the defaults of the preset
    /// it names (skin when absent).
    pub fn parse(text: &str) -> Result<Self> {
        Self::layered(None, Some(text), &[])
    }

    /// Resolves preset defaults, then file settings, then overrides; a
    /// preset passed here takes precedence over one named in the file. The
    /// result is labelled custom when its weights match no named preset.
    pub fn layered(preset: Option<Preset>, file: Option<&str>, overrides: &[(String, String)]) -> Result<Self> {
        let file_entries = file.map(entries).transpose()?.unwrap_or_default();
        let file_preset = file_entries
            .iter()
            .rev()
            .find(|(_, k, _)| k == "preset")
            .map(|(_, _, v)| v.parse::<Preset>())
            .transpose()?;
        let override_preset = overrides
            .iter()
            .rev()
            .find(|(k, _)| k == "preset")
            .map(|(_, v)| v.parse::<Preset>())
            .transpose()?;
        let base = override_preset.or(preset).or(file_preset).unwrap_or(Preset::Skin);
        let mut cfg = Self::preset(base);
        for (line, key, value) in &file_entries {
            if key != "preset" {
                cfg.set(key, value).map_err(|e| Error::Config(format!("line {line}: {e}")))?;
            }
        }
        for (key, value) in overrides {
            if key != "preset" {
                cfg.set(key, value)?;
            }
        }
        cfg.preset = Preset::classify(&cfg.weights);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.optim.validate()?;
        self.affine.validate()?;
        // input channels are taken from each image; validate against RGB
        self.model.validate()?;
        if self.model.clusters > 256 {
            return Err(Error::Config("at most 256 clusters fit an indexed label image".into()));
        }
        if let Some(w) = self.preset.weights() {
            if w != self.weights {
                return Err(Error::Config(format!("{} preset requires weights {w:?}", self.preset)));
            }
        }
        Ok(())
    }

    /// Every setting, one per line, in a form [`RunConfig::parse`] accepts.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let o = &self.optim;
        let a = &self.affine;
        let pair = |(lo, hi): (f64, f64)| format!("{lo}, {hi}");
        let list = m.lka.inception.iter().map(usize::to_string).collect::<Vec<_>>().join(", ");
        let mut s = String::new();
        let _ = writeln!(s, "# loss weights");
        let _ = writeln!(s, "preset = {}", self.preset);
        let _ = writeln!(s, "lambda1 = {}", self.weights.lambda1);
        let _ = writeln!(s, "lambda2 = {}", self.weights.lambda2);
        let _ = writeln!(s, "lambda3 = {}", self.weights.lambda3);
        let _ = writeln!(s, "# optimizer");
        let _ = writeln!(s, "lr = {}", o.lr);
        let _ = writeln!(s, "momentum = {}", o.momentum);
        let _ = writeln!(s, "max_iters = {}", o.max_iters);
        let _ = writeln!(s, "min_clusters = {}", o.min_clusters.map_or("none".into(), |v| v.to_string()));
        let _ = writeln!(s, "offset_lr_scale = {}", o.offset_lr_scale);
        let _ = writeln!(s, "# model");
        let _ = writeln!(s, "channels = {}", m.channels);
        let _ = writeln!(s, "blocks = {}", m.blocks);
        let _ = writeln!(s, "clusters = {}", m.clusters);
        let _ = writeln!(s, "lka_kernel = {}", m.lka.kernel);
        let _ = writeln!(s, "lka_dilation = {}", m.lka.dilation);
        let _ = writeln!(s, "inception = {list}");
        let _ = writeln!(s, "deform_kernel = {}", m.deform_kernel);
        let _ = writeln!(s, "head_norm = {}", m.head_norm);
        let _ = writeln!(s, "# affine sampling ranges (low, high)");
        let _ = writeln!(s, "rotation_deg = {}", pair(a.rotation_deg));
        let _ = writeln!(s, "scale = {}", pair(a.scale));
        let _ = writeln!(s, "shear_deg = {}", pair(a.shear_deg));
        let _ = writeln!(s, "translate = {}", pair(a.translate));
        let _ = writeln!(s, "# run");
        let _ = writeln!(s, "precision = {}", self.precision);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "output = {}", self.output.as_ref().map_or(String::new(), |p| p.display().to_string()));
        s
    }

    /// Short SHA-256 digest of [`RunConfig::to_text`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().take(8).fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    /// Training setup for one image with `in_channels` channels, seeded
    /// with `seed` for both initialization and transform sampling.
    pub fn setup(&self, in_channels: usize, seed: u64) -> TrainSetup {
        let mut model = self.model.clone();
        model.in_channels = in_channels;
        model.seed = seed;
        let mut optim = self.optim.clone();
        optim.seed = seed;
        TrainSetup { model, optim, weights: self.weights, affine: self.affine }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_carry_their_weights() {
        assert_eq!(RunConfig::preset(Preset::Skin).weights, LossWeights::new(1.2, 0.3, 0.3).unwrap());
        assert_eq!(RunConfig::preset(Preset::Lung).weights, LossWeights::new(1.0, 0.5, 0.6).unwrap());
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::preset(Preset::Lung);
        cfg.seed = 17;
        cfg.optim.min_clusters = Some(3);
        cfg.model.lka.inception = vec![3, 7];
        cfg.affine.translate = (-0.05, 0.2);
        cfg.output = Some(PathBuf::from("runs/a"));
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn comments_and_blank_lines() {
        let cfg = RunConfig::parse("# header\n\nseed = 4 # trailing\n  lr=0.1\n").unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.optim.lr, 0.1);
        assert_eq!(cfg.preset, Preset::Skin);
    }

    #[test]
    fn bad_lines_are_reported() {
        assert!(matches!(RunConfig::parse("seed 4"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("colour = red"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("lr = fast"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("momentum = 1.5"), Err(Error::Config(_))));
    }

    #[test]
    fn three_layer_precedence() {
        let file = "preset = lung\nlambda3 = 0.9\nseed = 5\nlr = 0.2\n";
        let overrides = vec![("seed".to_string(), "9".to_string())];
        let cfg = RunConfig::layered(None, Some(file), &overrides).unwrap();
        // preset default survives where nothing overrides it
        assert_eq!((cfg.weights.lambda1, cfg.weights.lambda2), (1.0, 0.5));
        // file beats preset
        assert_eq!(cfg.weights.lambda3, 0.9);
        assert_eq!(cfg.optim.lr, 0.2);
        // command line beats file
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.preset, Preset::Custom);
    }

    #[test]
    fn command_line_preset_replaces_file_preset() {
        let cfg = RunConfig::layered(Some(Preset::Lung), Some("preset = skin\n"), &[]).unwrap();
        assert_eq!(cfg.weights, LossWeights::LUNG);
        assert_eq!(cfg.preset, Preset::Lung);
    }

    #[test]
    fn setup_threads_seed_and_channels() {
        let s = RunConfig::default().setup(1, 42);
        assert_eq!((s.model.in_channels, s.model.seed, s.optim.seed), (1, 42, 42));
    }
}
