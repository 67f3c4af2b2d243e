//! Run configuration: a TOML file, optionally overridden by command-line flags.
//!
//! Every stochastic stage reads its own seed from `[seeds]`, so a config (or a
//! manifest, which embeds one) fully determines a run.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, ValueEnum};
use demoner_core::adversarial::{AdlConfig, PermutationMode};
use demoner_core::encoding::{CachedEncoder, EmbeddingCache, HashedNgramEncoder, RemoteEncoder, SemanticEncoder};
use demoner_core::featsim::{DualSimilarityConfig, FeatsimTrainConfig, Normalization, PairFeaturizer};
use demoner_core::inference::{EnsembleConfig, VotingMode};
use demoner_core::tagger::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const CACHE_ENV: &str = "DEMONER_CACHE";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub train: Option<PathBuf>,
    pub validation: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub cache: Option<PathBuf>,
    /// Directory receiving models, predictions and manifests.
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EncoderConfig {
    Hashed { dim: usize },
    Remote { url: String, dim: usize },
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig::Hashed { dim: 64 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Seeds {
    pub split: u64,
    pub featsim: u64,
    pub train: u64,
    pub inference: u64,
}

impl Seeds {
    pub fn all(seed: u64) -> Self {
        Seeds { split: seed, featsim: seed, train: seed, inference: seed }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub paths: Paths,
    pub k_shot: usize,
    pub gamma: f64,
    pub normalization: Normalization,
    pub alpha: f64,
    pub beta: f64,
    pub permutation: PermutationMode,
    pub ensemble_k: usize,
    pub voting: VotingMode,
    pub epochs: usize,
    pub learning_rate: f64,
    pub patience: Option<usize>,
    pub smoothing: f64,
    pub featsim_epochs: usize,
    pub featsim_learning_rate: f64,
    pub featsim_buckets: usize,
    pub seeds: Seeds,
    pub encoder: EncoderConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let adl = AdlConfig::default();
        let train = TrainConfig::default();
        let featsim = FeatsimTrainConfig::default();
        RunConfig {
            paths: Paths { out: PathBuf::from("run"), ..Paths::default() },
            k_shot: 5,
            gamma: DualSimilarityConfig::default().gamma,
            normalization: Normalization::MinMax,
            alpha: adl.alpha,
            beta: adl.beta,
            permutation: adl.mode,
            ensemble_k: EnsembleConfig::default().k,
            voting: VotingMode::Token,
            epochs: train.epochs,
            learning_rate: train.learning_rate,
            patience: None,
            smoothing: train.smoothing,
            featsim_epochs: featsim.epochs,
            featsim_learning_rate: featsim.learning_rate,
            featsim_buckets: featsim.featurizer.buckets,
            seeds: Seeds::default(),
            encoder: EncoderConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reads a config file. A manifest is also a valid config: its extra
    /// `[manifest]` table is ignored.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
        toml::from_str(&text).map_err(|e| CliError::Format { path: path.to_path_buf(), message: e.to_string() })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks value ranges; path existence is checked by the stage that reads them.
    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |m: String| Err(CliError::Usage(m));
        if self.k_shot == 0 {
            return usage("k_shot must be positive".into());
        }
        if self.ensemble_k == 0 {
            return usage("ensemble_k must be positive".into());
        }
        if self.epochs == 0 || self.featsim_epochs == 0 {
            return usage("epoch counts must be positive".into());
        }
        for (name, lr) in [("learning_rate", self.learning_rate), ("featsim_learning_rate", self.featsim_learning_rate)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return usage(format!("{name} must be positive and finite, got {lr}"));
            }
        }
        if !(self.smoothing > 0.0 && self.smoothing.is_finite()) {
            return usage(format!("smoothing must be positive and finite, got {}", self.smoothing));
        }
        self.dual().validate().map_err(|e| CliError::Usage(e.to_string()))?;
        AdlConfig::new(self.alpha, self.beta).map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(())
    }

    /// ADL is disabled exactly when `alpha == 1`.
    pub fn adl(&self) -> Option<AdlConfig> {
        (self.alpha < 1.0).then_some(AdlConfig { alpha: self.alpha, beta: self.beta, mode: self.permutation })
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            seed: self.seeds.train,
            adl: self.adl(),
            patience: self.patience,
            smoothing: self.smoothing,
        }
    }

    pub fn featsim_config(&self) -> FeatsimTrainConfig {
        FeatsimTrainConfig {
            epochs: self.featsim_epochs,
            learning_rate: self.featsim_learning_rate,
            seed: self.seeds.featsim,
            featurizer: PairFeaturizer { buckets: self.featsim_buckets },
        }
    }

    pub fn dual(&self) -> DualSimilarityConfig {
        DualSimilarityConfig { gamma: self.gamma, normalization: self.normalization }
    }

    pub fn ensemble(&self) -> EnsembleConfig {
        EnsembleConfig { k: self.ensemble_k, seed: self.seeds.inference, voting: self.voting }
    }

    /// Cache path after applying the `DEMONER_CACHE` override.
    pub fn cache_path(&self) -> Option<PathBuf> {
        match std::env::var_os(CACHE_ENV) {
            Some(v) if !v.is_empty() => Some(PathBuf::from(v)),
            _ => self.paths.cache.clone(),
        }
    }

    pub fn encoder(&self) -> Result<Arc<dyn SemanticEncoder>, CliError> {
        let base: Arc<dyn SemanticEncoder> = match &self.encoder {
            EncoderConfig::Hashed { dim } => {
                Arc::new(HashedNgramEncoder::new(*dim).map_err(|e| CliError::Usage(e.to_string()))?)
            }
            EncoderConfig::Remote { url, dim } => Arc::new(RemoteEncoder::new(url.clone(), *dim)),
        };
        Ok(match self.cache_path() {
            Some(path) => Arc::new(CachedEncoder::new(base, Arc::new(EmbeddingCache::open(path)?))),
            None => base,
        })
    }
}

pub fn require(path: &Option<PathBuf>, what: &str) -> Result<PathBuf, CliError> {
    path.clone().ok_or_else(|| CliError::Usage(format!("no {what} file given (set paths.{what} or pass --{what})")))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum NormalizationArg {
    None,
    MinMax,
}

/// Flags that override config-file values.
#[derive(Clone, Debug, Default, Args)]
pub struct Overrides {
    /// Config file (TOML); a manifest from an earlier run also works.
    #[arg(long, short = 'c')]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub validation: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Embedding cache file; DEMONER_CACHE takes precedence.
    #[arg(long)]
    pub cache: Option<PathBuf>,
    /// Output directory.
    #[arg(long, short = 'o')]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub k_shot: Option<usize>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long, value_enum)]
    pub normalization: Option<NormalizationArg>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// Ensemble size at tagging time.
    #[arg(long)]
    pub ensemble_k: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub featsim_epochs: Option<usize>,
    /// Sets every stage seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Use a remote embedding service instead of the hashed encoder.
    #[arg(long)]
    pub encoder_url: Option<String>,
    #[arg(long)]
    pub encoder_dim: Option<usize>,
}

impl Overrides {
    /// Loads `--config` (or defaults) and applies the flags on top.
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let base = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        let config = self.apply(base);
        config.validate()?;
        Ok(config)
    }

    pub fn apply(&self, mut c: RunConfig) -> RunConfig {
        fn set<T: Clone>(slot: &mut T, v: &Option<T>) {
            if let Some(v) = v {
                *slot = v.clone();
            }
        }
        for (slot, v) in [
            (&mut c.paths.train, &self.train),
            (&mut c.paths.validation, &self.validation),
            (&mut c.paths.test, &self.test),
            (&mut c.paths.cache, &self.cache),
        ] {
            if v.is_some() {
                *slot = v.clone();
            }
        }
        set(&mut c.paths.out, &self.out);
        set(&mut c.k_shot, &self.k_shot);
        set(&mut c.gamma, &self.gamma);
        if let Some(n) = self.normalization {
            c.normalization = match n {
                NormalizationArg::None => Normalization::None,
                NormalizationArg::MinMax => Normalization::MinMax,
            };
        }
        set(&mut c.alpha, &self.alpha);
        set(&mut c.beta, &self.beta);
        set(&mut c.ensemble_k, &self.ensemble_k);
        set(&mut c.epochs, &self.epochs);
        set(&mut c.learning_rate, &self.learning_rate);
        if self.patience.is_some() {
            c.patience = self.patience;
        }
        set(&mut c.featsim_epochs, &self.featsim_epochs);
        if let Some(seed) = self.seed {
            c.seeds = Seeds::all(seed);
        }
        match (&self.encoder_url, self.encoder_dim, &mut c.encoder) {
            (Some(url), dim, current) => {
                let dim = dim.unwrap_or(match current {
                    EncoderConfig::Hashed { dim } | EncoderConfig::Remote { dim, .. } => *dim,
                });
                c.encoder = EncoderConfig::Remote { url: url.clone(), dim };
            }
            (None, Some(d), EncoderConfig::Hashed { dim } | EncoderConfig::Remote { dim, .. }) => *dim = d,
            _ => {}
        }
        c
    }
}
