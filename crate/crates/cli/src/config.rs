//! File-backed run configuration (TOML).

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use synattr::augment::AugmentConfig;
use synattr::datagen::CorpusConfig;
use synattr::dsp::SpecConfig;
use synattr::nn::{Architecture, TrainConfig};
use synattr::pipeline::TrainSettings;
use synattr::augment::Augmenter;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; corpus, segment and training streams derive from it.
    pub seed: u64,
    /// Corpus root written by `gen` and read by `train`.
    pub corpus_dir: PathBuf,
    /// Default run directory.
    pub output_dir: PathBuf,
    pub segment_s: f64,
    pub folds: usize,
    pub channels: Vec<usize>,
    /// Extra run directories whose models join every ensemble.
    pub ensemble_members: Vec<PathBuf>,
    pub spec: SpecConfig,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub corpus: CorpusConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            corpus_dir: PathBuf::from("corpus"),
            output_dir: PathBuf::from("run"),
            segment_s: 1.0,
            folds: 5,
            channels: Architecture::standard().channels,
            ensemble_members: Vec::new(),
            spec: SpecConfig::toy(),
            train: TrainConfig::default(),
            augment: AugmentConfig::default(),
            corpus: CorpusConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses and validates `path`; relative paths inside the file are
    /// resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &Path| if p.is_relative() { base.join(p) } else { p.to_path_buf() };
        cfg.corpus_dir = resolve(&cfg.corpus_dir);
        cfg.output_dir = resolve(&cfg.output_dir);
        cfg.ensemble_members = cfg.ensemble_members.iter().map(|p| resolve(p)).collect();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        self.train.validate()?;
        self.augment.validate()?;
        self.corpus.validate()?;
        Architecture::new(self.channels.clone())?;
        if !(self.segment_s > 0.0) {
            bail!("segment_s must be positive, got {}", self.segment_s);
        }
        if self.folds < 2 {
            bail!("folds must be at least 2, got {}", self.folds);
        }
        let frames = self.spec.n_frames((self.segment_s * self.spec.sample_rate as f64).round() as usize);
        let side = Architecture::new(self.channels.clone())?.min_input_side();
        if frames < side || self.spec.n_mels < side {
            bail!(
                "spectrogram {}x{frames} is smaller than the {side}x{side} minimum of a {}-block network",
                self.spec.n_mels,
                self.channels.len()
            );
        }
        for dir in &self.ensemble_members {
            if !dir.is_dir() {
                bail!("ensemble member directory {} does not exist", dir.display());
            }
        }
        Ok(())
    }

    pub fn settings(&self) -> Result<TrainSettings> {
        Ok(TrainSettings {
            arch: Architecture::new(self.channels.clone())?,
            train: self.train.clone(),
            augmenter: Augmenter::new(self.augment.clone())?,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}
