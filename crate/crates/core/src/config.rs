//! Run configuration shared by every subcommand: a flat JSON object whose
//! keys mirror the command-line flags (snake_case in the file, kebab-case on
//! the command line).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder;
use crate::error::{Error, Result};
use crate::head::PoolerType;
use crate::loss::{LossConfig, LossType, PositiveMode};
use crate::sampler::{SamplerConfig, DEFAULT_ALPHA};
use crate::trainer::{OptimizerKind, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Training or evaluation corpus (JSONL).
    pub data: Option<String>,
    /// Held-out corpus for `ablate`; falls back to `data`.
    pub valid: Option<String>,
    /// Directory receiving artifacts.
    pub output: String,
    /// Checkpoint directory read by embed / align / mrr / search.
    pub checkpoint: Option<String>,
    /// Precomputed embeddings, used by align / mrr instead of a checkpoint.
    pub code_embeddings: Option<String>,
    pub doc_embeddings: Option<String>,
    /// Candidate index file for `search`.
    pub index: Option<String>,
    /// Query file for `search`, one whitespace-tokenized query per line.
    pub queries: Option<String>,
    /// Languages to keep; empty keeps all.
    pub languages: Vec<String>,
    /// Base batch order before rotation; empty means sorted language names.
    pub language_order: Vec<String>,

    pub seed: u64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub alpha: f64,
    pub pooler: PoolerType,
    pub mlp_layers: usize,
    pub loss_type: LossType,
    pub positive_mode: PositiveMode,
    pub temperature: f64,
    pub hidden: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub init_scale: f64,

    pub n_random: usize,
    pub k: usize,
    pub epsilon: f64,
    /// Parameters sampled by `gradcheck`; 0 checks all of them.
    pub gradcheck_params: usize,
    pub gradcheck_batch: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sampler = SamplerConfig::default();
        let loss = LossConfig::default();
        Self {
            data: None,
            valid: None,
            output: "ccse-out".into(),
            checkpoint: None,
            code_embeddings: None,
            doc_embeddings: None,
            index: None,
            queries: None,
            languages: Vec::new(),
            language_order: Vec::new(),
            seed: 42,
            epochs: 1,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            batch_size: sampler.batch_size,
            alpha: DEFAULT_ALPHA,
            pooler: PoolerType::Avg,
            mlp_layers: 0,
            loss_type: loss.loss_type,
            positive_mode: loss.positive_mode,
            temperature: loss.temperature,
            hidden: encoder::DEFAULT_HIDDEN,
            max_len: encoder::DEFAULT_MAX_LEN,
            vocab_size: encoder::DEFAULT_VOCAB,
            init_scale: encoder::DEFAULT_INIT_SCALE,
            n_random: crate::metrics::DEFAULT_N_RANDOM,
            k: 10,
            epsilon: 1e-3,
            gradcheck_params: 1000,
            gradcheck_batch: 8,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidConfig(format!("config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            alpha: self.alpha,
            batch_size: self.batch_size,
            seed: self.seed,
            base_language_order: self.language_order.clone(),
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            loss_type: self.loss_type,
            positive_mode: self.positive_mode,
            temperature: self.temperature,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            optimizer: self.optimizer,
            sampler: self.sampler(),
            pooler: self.pooler,
            mlp_layers: self.mlp_layers,
            loss: self.loss(),
            seed: self.seed,
            hidden: self.hidden,
            max_len: self.max_len,
            vocab_size: self.vocab_size,
            init_scale: self.init_scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        if self.k == 0 {
            return Err(Error::InvalidConfig("k must be at least 1".into()));
        }
        if self.n_random == 0 {
            return Err(Error::InvalidConfig("n_random must be at least 1".into()));
        }
        if self.gradcheck_batch < 2 {
            return Err(Error::InvalidConfig("gradcheck_batch must be at least 2".into()));
        }
        Ok(())
    }
}
