//! Run configuration: dataset source, model/fusion selection, and every
//! hyperparameter, serialized as JSON alongside each run's outputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::episodes::SyntheticSpec;
use crate::error::{Error, Result};
use crate::fewshot::MamlHead;
use crate::fusion::FusionKind;
use crate::optim::AdamConfig;
use crate::scalar::Dtype;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    ImageOnly,
    TextOnly,
    Multimodal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Protonet,
    Maml,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    Convnet4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> Dtype {
        match self {
            Precision::F32 => Dtype::F32,
            Precision::F64 => Dtype::F64,
        }
    }
}

/// Where the training data comes from: an in-process synthetic spec or a
/// manifest file on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Manifest(PathBuf),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub eps: f64,
    #[serde(default)]
    pub decoupled_weight_decay: bool,
    /// Halve the learning rate every this many epochs.
    #[serde(default = "default_decay_period")]
    pub lr_decay_period: u64,
    #[serde(default = "default_decay_factor")]
    pub lr_decay_factor: f64,
}

fn default_lr() -> f64 {
    1e-3
}
fn default_weight_decay() -> f64 {
    1e-3
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_decay_period() -> u64 {
    80
}
fn default_decay_factor() -> f64 {
    0.5
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: default_lr(),
            weight_decay: default_weight_decay(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
            decoupled_weight_decay: false,
            lr_decay_period: default_decay_period(),
            lr_decay_factor: default_decay_factor(),
        }
    }
}

impl OptimizerConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            decoupled_weight_decay: self.decoupled_weight_decay,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Conv channels per block.
    #[serde(default = "default_channels")]
    pub channels: usize,
    /// Hidden width of the frozen text projection.
    #[serde(default = "default_text_hidden")]
    pub text_hidden: usize,
    /// Token hash buckets.
    #[serde(default = "default_vocab_buckets")]
    pub vocab_buckets: usize,
}

fn default_channels() -> usize {
    64
}
fn default_text_hidden() -> usize {
    64
}
fn default_vocab_buckets() -> usize {
    4096
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            channels: default_channels(),
            text_hidden: default_text_hidden(),
            vocab_buckets: default_vocab_buckets(),
        }
    }
}

/// Full run configuration. Field names mirror the JSON config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: DataSource,
    #[serde(default = "default_modality")]
    pub modality: Modality,
    #[serde(default = "default_fusion")]
    pub fusion: FusionKind,
    #[serde(default = "default_model")]
    pub model: ModelKind,
    #[serde(default = "default_backbone")]
    pub backbone: Backbone,
    #[serde(default = "default_n_way")]
    pub n_way: usize,
    #[serde(default = "default_k_shot")]
    pub k_shot: usize,
    #[serde(default = "default_t_query")]
    pub t_query: usize,
    #[serde(default = "default_embedding_dim")]
    pub embedding_dim: usize,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_epochs")]
    pub epochs: u64,
    #[serde(default = "default_episodes_per_epoch")]
    pub episodes_per_epoch: usize,
    /// Validate on meta-val every this many epochs.
    #[serde(default = "default_val_period")]
    pub val_period: u64,
    #[serde(default = "default_val_episodes")]
    pub val_episodes: usize,
    #[serde(default = "default_eval_episodes")]
    pub eval_episodes: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_precision")]
    pub precision: Precision,
    #[serde(default)]
    pub maml: MamlHead,
    /// Matching-loss temperature.
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_unit_weight")]
    pub cls_weight: f64,
    #[serde(default = "default_unit_weight")]
    pub matching_weight: f64,
    #[serde(default)]
    pub encoder: EncoderConfig,
}

fn default_modality() -> Modality {
    Modality::Multimodal
}
fn default_fusion() -> FusionKind {
    FusionKind::Mean
}
fn default_model() -> ModelKind {
    ModelKind::Protonet
}
fn default_backbone() -> Backbone {
    Backbone::Convnet4
}
fn default_n_way() -> usize {
    5
}
fn default_k_shot() -> usize {
    1
}
fn default_t_query() -> usize {
    15
}
fn default_embedding_dim() -> usize {
    128
}
fn default_epochs() -> u64 {
    500
}
fn default_episodes_per_epoch() -> usize {
    100
}
fn default_val_period() -> u64 {
    50
}
fn default_val_episodes() -> usize {
    200
}
fn default_eval_episodes() -> usize {
    600
}
fn default_precision() -> Precision {
    Precision::F32
}
fn default_temperature() -> f64 {
    1.0
}
fn default_unit_weight() -> f64 {
    1.0
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("config {}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_way < 2 {
            return Err(Error::Config(format!("n_way must be at least 2, got {}", self.n_way)));
        }
        if self.k_shot == 0 || self.t_query == 0 {
            return Err(Error::Config("k_shot and t_query must be positive".to_string()));
        }
        if self.embedding_dim == 0 {
            return Err(Error::Config("embedding_dim must be positive".to_string()));
        }
        if self.epochs == 0 || self.episodes_per_epoch == 0 {
            return Err(Error::Config("epochs and episodes_per_epoch must be positive".to_string()));
        }
        if self.val_period == 0 {
            return Err(Error::Config("val_period must be positive".to_string()));
        }
        if self.temperature <= 0.0 {
            return Err(Error::Config("temperature must be positive".to_string()));
        }
        if self.maml.inner_lr < 0.0 {
            return Err(Error::Config("maml inner_lr must be non-negative".to_string()));
        }
        if self.optimizer.lr < 0.0 || self.optimizer.lr_decay_period == 0 {
            return Err(Error::Config("optimizer lr must be >= 0 with a positive decay period".to_string()));
        }
        Ok(())
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
