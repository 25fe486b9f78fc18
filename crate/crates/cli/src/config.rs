use std::fmt;
use std::path::{Path, PathBuf};

use hrm_core::data::synthetic::CopyReverseTask;
use hrm_core::data::MixtureSpec;
use hrm_core::inference::DecodeConfig;
use hrm_core::model::{ModelConfig, Variant};
use hrm_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

/// Invalid configuration or arguments. Reported with exit status 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid config: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    #[default]
    CopyReverse,
    Jsonl,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// Document file (`jsonl` source).
    pub path: Option<PathBuf>,
    /// Tokenizer file (`jsonl` source).
    pub tokenizer: Option<PathBuf>,
    pub max_len: usize,
    /// Passes over a finite document file.
    pub epochs: usize,
    pub copy_reverse: CopyReverseTask,
    /// Held-out examples for evaluation and analysis.
    pub eval_examples: usize,
    pub eval_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::CopyReverse,
            path: None,
            tokenizer: None,
            max_len: 4096,
            epochs: 1,
            copy_reverse: CopyReverseTask::default(),
            eval_examples: 200,
            eval_seed: 999,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunOptions {
    /// Checkpoint every n steps; 0 keeps only the final one.
    pub checkpoint_every: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub mixture: MixtureSpec,
    pub data: DataConfig,
    pub run: RunOptions,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let cfg: Self = toml::from_str(text).map_err(|e| e.to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        self.model.validate().map_err(|e| e.to_string())?;
        if self.model.variant != Variant::Standard {
            let min_k = if self.model.variant == Variant::Hrm { 2 } else { 1 };
            self.train
                .validate(self.model.total_module_steps(), min_k)
                .map_err(|e| e.to_string())?;
        }
        self.decode.validate().map_err(|e| e.to_string())?;
        self.mixture.validate().map_err(|e| format!("[mixture] {e}"))?;
        let d = &self.data;
        if d.max_len < 2 {
            return Err("[data] max_len must be at least 2".into());
        }
        if d.epochs == 0 {
            return Err("[data] epochs must be at least 1".into());
        }
        match d.source {
            DataSource::CopyReverse => {
                d.copy_reverse.validate().map_err(|e| format!("[data.copy_reverse] {e}"))?;
                if self.model.vocab_size < d.copy_reverse.vocab_size() {
                    return Err(format!(
                        "[model] vocab_size {} is below the copy_reverse vocabulary of {}",
                        self.model.vocab_size,
                        d.copy_reverse.vocab_size()
                    ));
                }
                if self.model.context_len < d.copy_reverse.max_seq_len() {
                    return Err(format!(
                        "[model] context_len {} is below the copy_reverse sequence length {}",
                        self.model.context_len,
                        d.copy_reverse.max_seq_len()
                    ));
                }
            }
            DataSource::Jsonl => {
                if d.path.is_none() || d.tokenizer.is_none() {
                    return Err("[data] the jsonl source needs both path and tokenizer".into());
                }
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is serializable")
    }
}
