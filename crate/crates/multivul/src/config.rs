//! Run configuration: a flat TOML file whose keys follow the
//! hyperparameter table, overridden by command-line flags.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use multivul_core::trainer::{Selection, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::remote::{ProviderConfig, ProviderMode};

/// Every key is optional; absent keys keep their defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub max_input_length: Option<usize>,
    pub projection_dimension: Option<usize>,
    pub batch_size: Option<usize>,
    pub training_epochs: Option<usize>,
    pub original_view_clip_loss_weight: Option<f64>,
    pub augmented_view_clip_loss_weight: Option<f64>,
    pub consistency_loss_weight: Option<f64>,
    pub classification_loss_weight: Option<f64>,
    pub learning_rate: Option<f64>,
    pub weight_decay: Option<f64>,
    pub augmentation_strength: Option<f64>,
    pub embedding_dimension: Option<usize>,
    pub encoder_blocks: Option<usize>,
    pub attention_heads: Option<usize>,
    pub feed_forward_dimension: Option<usize>,
    pub vocabulary_size: Option<usize>,
    pub resample_augmentation: Option<bool>,
    pub disable_aug_alignment: Option<bool>,
    pub disable_consistency: Option<bool>,
    pub fine_tuning_only: Option<bool>,
    pub model_selection: Option<Selection>,
    pub threshold: Option<f64>,
    pub max_grad_norm: Option<f64>,
    pub comment_mode: Option<ProviderMode>,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub token_env: Option<String>,
    pub timeout: Option<u64>,
    pub retries: Option<u32>,
    pub backoff_ms: Option<u64>,
    pub temperature: Option<f64>,
    pub max_tokens: Option<u32>,
    pub concurrency: Option<usize>,
}

macro_rules! take_later {
    ($a:ident, $b:ident, $($f:ident),*) => {
        FileConfig { $($f: $b.$f.or($a.$f)),* }
    };
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// `later` wins wherever it sets a key.
    pub fn merge(self, later: FileConfig) -> FileConfig {
        let (a, b) = (self, later);
        take_later!(
            a,
            b,
            seed,
            max_input_length,
            projection_dimension,
            batch_size,
            training_epochs,
            original_view_clip_loss_weight,
            augmented_view_clip_loss_weight,
            consistency_loss_weight,
            classification_loss_weight,
            learning_rate,
            weight_decay,
            augmentation_strength,
            embedding_dimension,
            encoder_blocks,
            attention_heads,
            feed_forward_dimension,
            vocabulary_size,
            resample_augmentation,
            disable_aug_alignment,
            disable_consistency,
            fine_tuning_only,
            model_selection,
            threshold,
            max_grad_norm,
            comment_mode,
            endpoint,
            model,
            token_env,
            timeout,
            retries,
            backoff_ms,
            temperature,
            max_tokens,
            concurrency
        )
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut t = TrainConfig::default();
        macro_rules! set {
            ($key:ident => $($target:tt)+) => {
                if let Some(v) = self.$key.clone() {
                    $($target)+ = v;
                }
            };
        }
        set!(seed => t.seed);
        set!(max_input_length => t.max_input_length);
        set!(projection_dimension => t.encoder.projection_dim);
        set!(batch_size => t.batch_size);
        set!(training_epochs => t.epochs);
        set!(original_view_clip_loss_weight => t.weights.clip_orig);
        set!(augmented_view_clip_loss_weight => t.weights.clip_aug);
        set!(consistency_loss_weight => t.weights.consistency);
        set!(classification_loss_weight => t.weights.classification);
        set!(learning_rate => t.learning_rate);
        set!(weight_decay => t.weight_decay);
        set!(augmentation_strength => t.alpha);
        set!(embedding_dimension => t.encoder.embed_dim);
        set!(encoder_blocks => t.encoder.blocks);
        set!(attention_heads => t.encoder.heads);
        set!(feed_forward_dimension => t.encoder.ff_dim);
        set!(vocabulary_size => t.vocab_max_size);
        set!(resample_augmentation => t.resample_augmentation);
        set!(disable_aug_alignment => t.ablation.disable_aug_alignment);
        set!(disable_consistency => t.ablation.disable_consistency);
        set!(fine_tuning_only => t.ablation.fine_tuning_only);
        set!(model_selection => t.selection);
        set!(threshold => t.threshold);
        set!(max_grad_norm => t.max_grad_norm);
        t.encoder.max_input_length = t.max_input_length;
        t
    }

    pub fn provider_config(&self) -> ProviderConfig {
        let mut p = ProviderConfig::default();
        if let Some(v) = self.comment_mode {
            p.mode = v;
        }
        p.endpoint = self.endpoint.clone().or(p.endpoint);
        p.model = self.model.clone().or(p.model);
        if let Some(v) = &self.token_env {
            p.token_env = v.clone();
        }
        p.timeout_secs = self.timeout.unwrap_or(p.timeout_secs);
        p.max_retries = self.retries.unwrap_or(p.max_retries);
        p.backoff_base_ms = self.backoff_ms.unwrap_or(p.backoff_base_ms);
        p.temperature = self.temperature.unwrap_or(p.temperature);
        p.max_tokens = self.max_tokens.unwrap_or(p.max_tokens);
        p.concurrency = self.concurrency.unwrap_or(p.concurrency);
        p
    }
}

/// Fully resolved settings of one command, embedded in every artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    pub seed: u64,
    pub train: TrainConfig,
    pub provider: ProviderConfig,
    pub paths: BTreeMap<String, String>,
}

impl RunConfig {
    /// Defaults, then the optional file, then flag overrides.
    pub fn resolve(command: &str, file: Option<&Path>, flags: FileConfig) -> Result<Self> {
        let base = match file {
            Some(p) => FileConfig::load(p)?,
            None => FileConfig::default(),
        };
        let merged = base.merge(flags);
        let train = merged.train_config();
        Ok(Self {
            command: command.into(),
            seed: train.seed,
            provider: merged.provider_config(),
            train,
            paths: BTreeMap::new(),
        })
    }

    pub fn with_path(mut self, key: &str, path: &Path) -> Self {
        self.paths.insert(key.into(), path.display().to_string());
        self
    }
}
