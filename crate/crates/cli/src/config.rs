//! The run configuration: one YAML document with a section per concern.
//! Unknown keys anywhere are rejected.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use slrkit_core::corpus::Layout;
use slrkit_core::infer::WindowConfig;
use slrkit_core::models::ModelConfig;
use slrkit_core::pretrain::{DpcConfig, MaskConfig, MocoConfig};
use slrkit_core::synth::SynthSpec;
use slrkit_core::train::{default_preprocess, AdamConfig, StepDecay, TrainConfig};
use slrkit_core::transforms::TransformConfig;

pub const RUN_CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub format_version: u32,
    #[serde(default)]
    pub seed: u64,
    /// Directory receiving artifacts and the run manifest.
    pub output: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub transforms: TransformsConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrain: Option<PretrainSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finetune: Option<FinetuneSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evaluate: Option<EvaluateSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub benchmark: Option<BenchmarkSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub serve: Option<ServeSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stream: Option<StreamSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pack: Option<PackSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validate: Option<ValidateSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub corpus: PathBuf,
    #[serde(default = "train_split")]
    pub train_split: String,
    #[serde(default = "val_split")]
    pub val_split: String,
    #[serde(default = "test_split")]
    pub test_split: String,
    /// Keep only this many training samples per class.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset: Option<SubsetSection>,
    /// Keypoint map YAML; the bundled 27-point map when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keypoint_map: Option<PathBuf>,
}

fn train_split() -> String {
    "train".into()
}
fn val_split() -> String {
    "val".into()
}
fn test_split() -> String {
    "test".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubsetSection {
    pub samples_per_class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformsConfig {
    #[serde(default = "default_preprocess")]
    pub preprocess: Vec<TransformConfig>,
    #[serde(default)]
    pub augment: Vec<TransformConfig>,
}

impl Default for TransformsConfig {
    fn default() -> Self {
        Self {
            preprocess: default_preprocess(),
            augment: Vec::new(),
        }
    }
}

/// Training settings; anything left out takes the per-architecture default.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_epochs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patience: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adam: Option<AdamConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_decay: Option<StepDecay>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_k: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Dpc,
    Moco,
    Masked,
}

impl Strategy {
    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::Dpc => "dpc",
            Strategy::Moco => "moco",
            Strategy::Masked => "masked",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    pub strategy: Strategy,
    pub steps: usize,
    /// Unlabeled corpus; `data.corpus` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    /// Draw clips from this split only; every sample when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
    #[serde(default = "pretrain_batch")]
    pub batch_size: usize,
    #[serde(default = "pretrain_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default = "min_clip")]
    pub min_clip: usize,
    #[serde(default = "max_clip")]
    pub max_clip: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dpc: Option<DpcConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moco: Option<MocoConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub masked: Option<MaskConfig>,
    /// Log every n-th step.
    #[serde(default = "log_every")]
    pub log_every: usize,
}

fn pretrain_batch() -> usize {
    128
}
fn pretrain_lr() -> f64 {
    1e-3
}
fn min_clip() -> usize {
    60
}
fn max_clip() -> usize {
    120
}
fn log_every() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSection {
    /// Encoder checkpoint written by `pretrain`.
    pub init_from: PathBuf,
    /// Keep shape-mismatched encoder tensors at their fresh values.
    #[serde(default)]
    pub allow_mismatch: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateSection {
    pub checkpoint: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
    #[serde(default = "eval_topk")]
    pub top_k: Vec<usize>,
}

fn eval_topk() -> Vec<usize> {
    vec![1, 5]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSection {
    pub checkpoint: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
    #[serde(default = "one")]
    pub repetitions: usize,
    /// Only the first n samples of the split.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServeSection {
    pub checkpoint: PathBuf,
    /// Line-JSON stream endpoint.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub listen: Option<SocketAddr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub http: Option<SocketAddr>,
    /// One session over standard input and output instead of sockets.
    #[serde(default)]
    pub stdio: bool,
    #[serde(default)]
    pub window: WindowConfig,
    #[serde(default = "serve_topk")]
    pub top_k: usize,
}

fn serve_topk() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSection {
    /// Address of a running `serve`.
    pub connect: String,
    #[serde(default = "test_split")]
    pub split: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
    /// Send at the clip's frame rate instead of as fast as possible.
    #[serde(default = "yes")]
    pub paced: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PackSection {
    /// YAML list of samples: `{id, file, gloss?, signer?, split?}`, with
    /// `file` a JSON-lines pose file relative to the index.
    pub index: PathBuf,
    pub corpus_id: String,
    #[serde(default = "hdf5")]
    pub layout: Layout,
    #[serde(default = "fps")]
    pub fps: f32,
    /// Gloss order; sorted unique glosses of the index when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocabulary: Option<Vec<String>>,
    #[serde(default = "map_id")]
    pub keypoint_map_id: String,
    #[serde(default = "all_missing")]
    pub max_missing_fraction: f64,
}

fn hdf5() -> Layout {
    Layout::Hdf5
}
fn fps() -> f32 {
    30.0
}
fn map_id() -> String {
    "holistic75-sparse27".into()
}
fn all_missing() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexEntry {
    pub id: String,
    pub file: PathBuf,
    #[serde(default)]
    pub gloss: Option<String>,
    #[serde(default)]
    pub signer: Option<String>,
    #[serde(default)]
    pub split: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub spec: SynthSpec,
    pub corpus_id: String,
    #[serde(default = "hdf5")]
    pub layout: Layout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidateSection {
    #[serde(default = "validate_missing")]
    pub max_missing_fraction: f64,
}

fn validate_missing() -> f64 {
    0.5
}

/// A configuration problem, reported with the offending key path.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn err(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

/// Parses `text`, applies `key.path=value` overrides and checks the result.
pub fn parse(text: &str, overrides: &[String]) -> Result<RunConfig, ConfigError> {
    let mut doc: serde_yaml::Value = serde_yaml::from_str(text).map_err(|e| err(format!("config: {e}")))?;
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    let config: RunConfig = serde_path_to_error::deserialize(doc).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        if path == "." {
            err(format!("config: {inner}"))
        } else {
            err(format!("config field `{path}`: {inner}"))
        }
    })?;
    if config.format_version != RUN_CONFIG_VERSION {
        return Err(err(format!(
            "config field `format_version`: expected {RUN_CONFIG_VERSION}, got {}",
            config.format_version
        )));
    }
    Ok(config)
}

pub fn load(path: &Path, overrides: &[String]) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| err(format!("cannot read {}: {e}", path.display())))?;
    parse(&text, overrides)
}

fn apply_override(doc: &mut serde_yaml::Value, spec: &str) -> Result<(), ConfigError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| err(format!("override `{spec}` is not key=value")))?;
    let value: serde_yaml::Value = serde_yaml::from_str(raw).map_err(|e| err(format!("override `{key}`: {e}")))?;
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(err(format!("override key `{key}` is malformed")));
    }
    for (i, part) in parts.iter().enumerate() {
        let map = match node {
            serde_yaml::Value::Null => {
                *node = serde_yaml::Value::Mapping(Default::default());
                node.as_mapping_mut().unwrap()
            }
            serde_yaml::Value::Mapping(m) => m,
            _ => {
                return Err(err(format!(
                    "override `{key}`: `{}` is not a section",
                    parts[..i].join(".")
                )))
            }
        };
        let k = serde_yaml::Value::String(part.to_string());
        if i + 1 == parts.len() {
            map.insert(k, value);
            return Ok(());
        }
        node = map.entry(k).or_insert(serde_yaml::Value::Null);
    }
    unreachable!("override path has at least one part")
}

impl RunConfig {
    pub fn data(&self) -> Result<&DataConfig, ConfigError> {
        self.data
            .as_ref()
            .ok_or_else(|| err("config section `data` is required"))
    }

    pub fn model(&self) -> Result<&ModelConfig, ConfigError> {
        self.model
            .as_ref()
            .ok_or_else(|| err("config section `model` is required"))
    }

    /// The library training config: architecture defaults, then the
    /// `train` section, then the `transforms` pipelines and a seed derived
    /// from the run seed.
    pub fn train_config(&self, threads: Option<usize>) -> Result<TrainConfig, ConfigError> {
        let model = self.model()?;
        let mut c = TrainConfig::for_variant(model.variant);
        let t = self.train.clone().unwrap_or_default();
        c.batch_size = t.batch_size.unwrap_or(c.batch_size);
        c.learning_rate = t.learning_rate.unwrap_or(c.learning_rate);
        c.max_epochs = t.max_epochs.unwrap_or(c.max_epochs);
        c.patience = t.patience.unwrap_or(c.patience);
        c.adam = t.adam.unwrap_or(c.adam);
        c.lr_decay = t.lr_decay.or(c.lr_decay);
        c.top_k = t.top_k.unwrap_or(c.top_k);
        c.workers = t.workers.unwrap_or(c.workers);
        if let Some(n) = threads {
            c.workers = c.workers.min(n).max(1);
        }
        c.preprocess = self.transforms.preprocess.clone();
        c.augment = self.transforms.augment.clone();
        c.seed = slrkit_core::rng::derive_seed(self.seed, "train");
        c.validate().map_err(|e| err(format!("config section `train`: {e}")))?;
        Ok(c)
    }

    /// Resolved config as YAML, the form recorded in the manifest.
    pub fn to_yaml(&self) -> String {
        serde_yaml::to_string(self).expect("run config serializes")
    }
}
