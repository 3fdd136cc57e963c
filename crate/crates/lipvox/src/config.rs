//! TOML run configuration. Unknown keys are rejected; flags override file
//! values; the resolved config is echoed and stored in artifacts.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::embedders::PretrainConfig;
use crate::error::{Error, Result};
use crate::train::TrainConfig;

pub const SEED_ENV: &str = "LIPVOX_SEED";

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub speakers: usize,
    pub utts_per_speaker: usize,
    pub seconds: u32,
}

impl CorpusConfig {
    fn or_defaults(mut self) -> Self {
        if self.speakers == 0 {
            self.speakers = 4;
        }
        if self.utts_per_speaker == 0 {
            self.utts_per_speaker = 8;
        }
        if self.seconds == 0 {
            self.seconds = 3;
        }
        self
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurrogatesConfig {
    pub content_epochs: usize,
    pub speaker_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub content_window: usize,
    pub windows_per_utt: usize,
}

impl Default for SurrogatesConfig {
    fn default() -> Self {
        let p = PretrainConfig::default();
        Self {
            content_epochs: p.content_epochs,
            speaker_epochs: p.speaker_epochs,
            batch_size: p.batch_size,
            learning_rate: p.learning_rate,
            content_window: p.content_window,
            windows_per_utt: p.windows_per_utt,
        }
    }
}

impl SurrogatesConfig {
    pub fn to_pretrain(&self, seed: u64) -> PretrainConfig {
        PretrainConfig {
            content_epochs: self.content_epochs,
            speaker_epochs: self.speaker_epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            content_window: self.content_window,
            windows_per_utt: self.windows_per_utt,
            seed,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GStrengthConfig {
    pub n: usize,
    pub delta: f64,
}

impl Default for GStrengthConfig {
    fn default() -> Self {
        Self { n: 100, delta: 0.5 }
    }
}

/// Whole-run configuration; sections map onto subcommands.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; flag `--seed` overrides, env `LIPVOX_SEED` is the
    /// fallback when neither the flag nor the file provide one.
    pub seed: Option<u64>,
    pub corpus: CorpusConfig,
    pub surrogates: SurrogatesConfig,
    pub train: TrainConfig,
    pub gstrength: GStrengthConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }

    /// Final seed: flag > file > env > 0.
    pub fn resolve_seed(&self, flag: Option<u64>) -> u64 {
        flag.or(self.seed)
            .or_else(|| std::env::var(SEED_ENV).ok().and_then(|v| v.parse().ok()))
            .unwrap_or(0)
    }

    pub fn corpus_resolved(&self) -> CorpusConfig {
        self.corpus.clone().or_defaults()
    }

    /// TOML echo of the fully resolved configuration.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).unwrap_or_else(|e| format!("# serialization error: {e}"))
    }
}
