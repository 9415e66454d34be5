//! The single JSON run configuration shared by every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Precision};
use crate::objective::{ObjectiveVariant, ScheduleConfig};
use crate::trainer::{AdamConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub n1: usize,
    pub n2: usize,
    pub n3: usize,
    pub z_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    /// 0 means: take it from the training vocabulary.
    pub vocab_size: usize,
    pub max_len: usize,
    pub init_std: f64,
    pub precision: Precision,
    pub seed: u64,

    pub objective: ObjectiveVariant,
    pub warmup_steps: u64,
    pub anneal_steps: u64,
    pub beta_start: f64,
    pub beta_floor: f64,
    pub eval_every_epochs: u64,

    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
    pub max_steps: u64,
    pub log_every: u64,
    pub keep_all_checkpoints: bool,

    /// Grammar JSON; the built-in grammar when absent.
    pub grammar: Option<PathBuf>,
    /// Corpus files (`.jsonl` role-annotated or plain text, one sentence
    /// per line). Generated from the grammar when absent.
    pub train_corpus: Option<PathBuf>,
    pub test_corpus: Option<PathBuf>,
    pub train_size: usize,
    pub test_size: usize,
    pub output_dir: PathBuf,

    pub eval_base_count: usize,
    pub eval_resamples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let s = ScheduleConfig::default();
        let t = TrainConfig::default();
        Self {
            n1: m.n1,
            n2: m.n2,
            n3: m.n3,
            z_size: m.z_size,
            d_model: m.d_model,
            heads: m.heads,
            enc_layers: m.enc_layers,
            dec_layers: m.dec_layers,
            vocab_size: 0,
            max_len: m.max_len,
            init_std: m.init_std,
            precision: m.precision,
            seed: 0,
            objective: t.objective,
            warmup_steps: s.warmup_steps,
            anneal_steps: s.anneal_steps,
            beta_start: s.beta_start,
            beta_floor: s.beta_floor,
            eval_every_epochs: s.eval_every_epochs,
            batch_size: t.batch_size,
            learning_rate: t.optimizer.learning_rate,
            adam_beta1: t.optimizer.beta1,
            adam_beta2: t.optimizer.beta2,
            adam_eps: t.optimizer.eps,
            clip_norm: t.clip_norm,
            max_steps: t.max_steps,
            log_every: t.log_every,
            keep_all_checkpoints: t.keep_all_checkpoints,
            grammar: None,
            train_corpus: None,
            test_corpus: None,
            train_size: 5000,
            test_size: 500,
            output_dir: PathBuf::from("run"),
            eval_base_count: 100,
            eval_resamples: 10,
        }
    }
}

impl RunConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::parse_json(&e, 0))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            n1: self.n1,
            n2: self.n2,
            n3: self.n3,
            z_size: self.z_size,
            d_model: self.d_model,
            heads: self.heads,
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
            vocab_size: if self.vocab_size == 0 { vocab_size } else { self.vocab_size },
            max_len: self.max_len,
            seed: self.seed,
            init_std: self.init_std,
            precision: self.precision,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            optimizer: AdamConfig {
                learning_rate: self.learning_rate,
                beta1: self.adam_beta1,
                beta2: self.adam_beta2,
                eps: self.adam_eps,
            },
            clip_norm: self.clip_norm,
            objective: self.objective,
            schedule: ScheduleConfig {
                warmup_steps: self.warmup_steps,
                anneal_steps: self.anneal_steps,
                beta_start: self.beta_start,
                beta_floor: self.beta_floor,
                eval_every_epochs: self.eval_every_epochs,
            },
            max_steps: self.max_steps,
            log_every: self.log_every,
            keep_all_checkpoints: self.keep_all_checkpoints,
            seed: self.seed,
        }
    }

    /// Checks everything that does not depend on the corpus.
    pub fn validate(&self) -> Result<()> {
        let probe = self.model_config(if self.vocab_size == 0 { 5 } else { self.vocab_size });
        probe.validate()?;
        self.train_config().validate()?;
        if self.vocab_size != 0 && self.vocab_size < 5 {
            return Err(Error::Config(format!("vocab_size {} is too small", self.vocab_size)));
        }
        if self.train_corpus.is_none() && self.train_size == 0 {
            return Err(Error::Config("train_size must be positive when generating a corpus".into()));
        }
        if self.test_corpus.is_none() && self.test_size == 0 {
            return Err(Error::Config("test_size must be positive when generating a corpus".into()));
        }
        Ok(())
    }
}
