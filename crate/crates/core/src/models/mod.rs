//! Sequence and graph classifiers over pose clips.
//!
//! Every architecture splits its tensors into `encoder.*` (feature
//! extractor, transplantable between pretraining and fine-tuning) and
//! `head.*` (classification layer).

mod checkpoint;
mod lstm;
mod stgcn;
mod transformer;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParameterSet;
use crate::pose::{PoseSequence, SkeletonGraph, COORDS};
use crate::rng::{derive_seed, RandomSource};
use crate::tensor::Tensor;

pub use checkpoint::{
    load_checkpoint, load_classifier, save_checkpoint, save_classifier, CheckpointMeta, ClassifierMeta,
    CHECKPOINT_VERSION,
};
pub use lstm::lstm_forward;
pub use stgcn::{stgcn_encode, stgcn_forward};
pub use transformer::{transformer_forward, transformer_tokens};

pub const ENCODER_PREFIX: &str = "encoder.";
pub const HEAD_PREFIX: &str = "head.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Lstm,
    Transformer,
    Stgcn,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Lstm => "lstm",
            Variant::Transformer => "transformer",
            Variant::Stgcn => "stgcn",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "lstm" => Some(Variant::Lstm),
            "transformer" => Some(Variant::Transformer),
            "stgcn" => Some(Variant::Stgcn),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LstmConfig {
    pub layers: usize,
    pub hidden: usize,
    pub bidirectional: bool,
    pub attention_dim: usize,
}

impl Default for LstmConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            hidden: 128,
            bidirectional: true,
            attention_dim: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    /// Query/key/value width per head.
    pub head_dim: usize,
    pub ffn_hidden: usize,
    /// Internal sequence length including the class token.
    pub max_seq: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            layers: 5,
            heads: 6,
            hidden: 128,
            head_dim: 21,
            ffn_hidden: 3072,
            max_seq: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StgcnConfig {
    /// Output channels per block.
    pub channels: Vec<usize>,
    /// Temporal stride per block.
    pub strides: Vec<usize>,
    pub temporal_kernel: usize,
}

impl Default for StgcnConfig {
    fn default() -> Self {
        Self {
            channels: vec![64, 64, 64, 64, 128, 128, 128, 256, 256, 256],
            strides: vec![1, 1, 1, 1, 2, 1, 1, 2, 1, 1],
            temporal_kernel: 9,
        }
    }
}

impl StgcnConfig {
    pub fn embedding_dim(&self) -> usize {
        self.channels.last().copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub num_classes: usize,
    #[serde(default = "default_keypoints")]
    pub keypoints: usize,
    #[serde(default)]
    pub lstm: LstmConfig,
    #[serde(default)]
    pub transformer: TransformerConfig,
    #[serde(default)]
    pub stgcn: StgcnConfig,
}

fn default_keypoints() -> usize {
    27
}

impl ModelConfig {
    pub fn new(variant: Variant, num_classes: usize) -> Self {
        Self {
            variant,
            num_classes,
            keypoints: default_keypoints(),
            lstm: LstmConfig::default(),
            transformer: TransformerConfig::default(),
            stgcn: StgcnConfig::default(),
        }
    }

    /// Small configuration (width 8, two layers or blocks) for tests and
    /// quick experiments.
    pub fn toy(variant: Variant, num_classes: usize, keypoints: usize) -> Self {
        Self {
            variant,
            num_classes,
            keypoints,
            lstm: LstmConfig {
                layers: 2,
                hidden: 8,
                bidirectional: true,
                attention_dim: 8,
            },
            transformer: TransformerConfig {
                layers: 2,
                heads: 2,
                hidden: 8,
                head_dim: 4,
                ffn_hidden: 16,
                max_seq: 256,
            },
            stgcn: StgcnConfig {
                channels: vec![8, 8],
                strides: vec![1, 2],
                temporal_kernel: 3,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(invalid!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if self.keypoints == 0 {
            return Err(invalid!("keypoints must be positive"));
        }
        match self.variant {
            Variant::Lstm => {
                let c = &self.lstm;
                if c.layers == 0 || c.hidden == 0 || c.attention_dim == 0 {
                    return Err(invalid!("lstm sizes must be positive"));
                }
            }
            Variant::Transformer => {
                let c = &self.transformer;
                if [c.layers, c.heads, c.hidden, c.head_dim, c.ffn_hidden].contains(&0) {
                    return Err(invalid!("transformer sizes must be positive"));
                }
                if c.max_seq < 2 {
                    return Err(invalid!("transformer max_seq must be at least 2"));
                }
            }
            Variant::Stgcn => {
                let c = &self.stgcn;
                if c.channels.is_empty() || c.channels.contains(&0) {
                    return Err(invalid!("stgcn needs at least one block with positive width"));
                }
                if c.strides.len() != c.channels.len() || c.strides.contains(&0) {
                    return Err(invalid!("stgcn strides must be positive, one per block"));
                }
                if c.temporal_kernel.is_multiple_of(2) {
                    return Err(invalid!("stgcn temporal_kernel must be odd"));
                }
            }
        }
        Ok(())
    }

    /// Stable hash of the resolved configuration.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }

    /// Hash of the encoder-relevant part only (class count excluded).
    pub fn encoder_hash(&self) -> String {
        let mut c = self.clone();
        c.num_classes = 0;
        c.config_hash()
    }

    pub fn input_width(&self) -> usize {
        self.keypoints * COORDS
    }

    /// Width of the pooled representation the classification head reads.
    pub fn embedding_dim(&self) -> usize {
        match self.variant {
            Variant::Lstm => self.lstm.hidden * self.lstm_directions(),
            Variant::Transformer => self.transformer.hidden,
            Variant::Stgcn => self.stgcn.embedding_dim(),
        }
    }

    pub(crate) fn lstm_directions(&self) -> usize {
        if self.lstm.bidirectional {
            2
        } else {
            1
        }
    }
}

/// Outputs of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Var,
    /// Pooled `1 × embedding_dim` representation fed to the head.
    pub embedding: Var,
    /// Attention maps: the `1 × F` temporal weights for the LSTM, every
    /// head's `L × L` probabilities for the transformer, empty for ST-GCN.
    pub attention: Vec<Var>,
}

/// A model configuration bound to its skeleton.
#[derive(Debug, Clone)]
pub struct Architecture {
    pub config: ModelConfig,
    pub skeleton: SkeletonGraph,
}

impl Architecture {
    pub fn new(config: ModelConfig, skeleton: SkeletonGraph) -> Result<Self> {
        config.validate()?;
        if config.variant == Variant::Stgcn && skeleton.node_count() != config.keypoints {
            return Err(Error::Shape(format!(
                "model expects {} keypoints, skeleton has {} nodes",
                config.keypoints,
                skeleton.node_count()
            )));
        }
        Ok(Self { config, skeleton })
    }

    pub fn init(&self, seed: u64) -> Result<ParameterSet> {
        init_parameters(&self.config, seed)
    }

    pub fn forward<'a>(&self, g: &mut Graph<'a>, params: &'a ParameterSet, pose: &PoseSequence) -> Result<Forward> {
        match self.config.variant {
            Variant::Lstm => lstm_forward(g, params, &self.config, pose),
            Variant::Transformer => transformer_forward(g, params, &self.config, pose),
            Variant::Stgcn => stgcn_forward(g, params, &self.config, pose, &self.skeleton),
        }
    }

    /// Forward pass without gradient bookkeeping; returns the logits.
    pub fn logits(&self, params: &ParameterSet, pose: &PoseSequence) -> Result<Vec<f32>> {
        let mut g = Graph::inference();
        let out = self.forward(&mut g, params, pose)?;
        let logits = g.value(out.logits).to_vec();
        if logits.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical("non-finite logits".into()));
        }
        Ok(logits)
    }
}

pub(crate) fn check_input(config: &ModelConfig, pose: &PoseSequence) -> Result<()> {
    if pose.frames() == 0 {
        return Err(invalid!("empty clip"));
    }
    if pose.keypoints() != config.keypoints {
        return Err(Error::Shape(format!(
            "model expects {} keypoints, clip has {}",
            config.keypoints,
            pose.keypoints()
        )));
    }
    Ok(())
}

/// Tensor initialization rules.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` with `fan_in` the row count.
    FanIn,
    Zeros,
    Ones,
    /// `U(-1/sqrt(width), 1/sqrt(width))` for embedding tables, `width` the last axis.
    Embedding,
}

pub(crate) struct Builder {
    params: ParameterSet,
    seed: u64,
}

impl Builder {
    pub(crate) fn new(arch: &str, hash: &str, seed: u64) -> Self {
        Self {
            params: ParameterSet::new(arch, hash),
            seed,
        }
    }

    /// Adds a tensor drawn from its own stream, seeded by `(seed, name)`, so
    /// a tensor's initial value does not depend on insertion order.
    pub(crate) fn add(&mut self, name: &str, shape: &[usize], init: Init) -> Result<()> {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::FanIn | Init::Embedding => {
                let fan = match init {
                    Init::FanIn => shape[0],
                    _ => *shape.last().unwrap(),
                };
                let bound = 1.0 / (fan as f64).sqrt();
                let mut rng = RandomSource::new(derive_seed(self.seed, name));
                (0..n).map(|_| rng.uniform(-bound, bound) as f32).collect()
            }
        };
        self.params.insert(name, Tensor::from_vec(shape, data)?)
    }

    pub(crate) fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        self.add(&format!("{prefix}.w"), &[fan_in, fan_out], Init::FanIn)?;
        self.add(&format!("{prefix}.b"), &[fan_out], Init::Zeros)
    }

    pub(crate) fn norm(&mut self, prefix: &str, width: usize) -> Result<()> {
        self.add(&format!("{prefix}.g"), &[width], Init::Ones)?;
        self.add(&format!("{prefix}.b"), &[width], Init::Zeros)
    }

    pub(crate) fn finish(self) -> ParameterSet {
        self.params
    }
}

/// Deterministic initialization: matrices uniform with fan-in scaling,
/// biases zero, normalization gains and edge-importance masks one.
pub fn init_parameters(config: &ModelConfig, seed: u64) -> Result<ParameterSet> {
    config.validate()?;
    let mut b = Builder::new(config.variant.as_str(), &config.config_hash(), seed);
    match config.variant {
        Variant::Lstm => lstm::init(&mut b, config)?,
        Variant::Transformer => transformer::init(&mut b, config)?,
        Variant::Stgcn => stgcn::init(&mut b, config)?,
    }
    b.linear("head", config.embedding_dim(), config.num_classes)?;
    Ok(b.finish())
}

/// Builds a `target` classifier whose `encoder.*` tensors are copied by name
/// from `pretrained` and whose head is freshly initialized from `seed`.
///
/// Missing or differently shaped encoder tensors are fatal unless
/// `allow_mismatch` is set, in which case they keep their fresh values.
pub fn transplant_encoder(
    pretrained: &ParameterSet,
    target: &ModelConfig,
    seed: u64,
    allow_mismatch: bool,
) -> Result<ParameterSet> {
    if pretrained.arch() != target.variant.as_str() {
        return Err(invalid!(
            "cannot transplant a `{}` encoder into a `{}` model",
            pretrained.arch(),
            target.variant.as_str()
        ));
    }
    let mut params = init_parameters(target, seed)?;
    let names: Vec<String> = params
        .names()
        .iter()
        .filter(|n| n.starts_with(ENCODER_PREFIX))
        .cloned()
        .collect();
    for name in names {
        match pretrained.get(&name) {
            Ok(t) if t.shape() == params.get(&name)?.shape() => params.set(&name, t.clone())?,
            Ok(t) if !allow_mismatch => {
                return Err(Error::Shape(format!(
                    "`{name}` is {:?} in the pretrained encoder, {:?} in the target",
                    t.shape(),
                    params.get(&name)?.shape()
                )))
            }
            Err(_) if !allow_mismatch => return Err(invalid!("pretrained encoder has no tensor `{name}`")),
            _ => {}
        }
    }
    Ok(params)
}

/// `x · W + b` for tensors named `{prefix}.w` / `{prefix}.b`.
pub(crate) fn linear<'a>(g: &mut Graph<'a>, params: &'a ParameterSet, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param(params, &format!("{prefix}.w"))?;
    let b = g.param(params, &format!("{prefix}.b"))?;
    let y = g.matmul(x, w);
    Ok(g.add_row(y, b))
}

/// Affine part of a normalization layer.
pub(crate) fn affine<'a>(g: &mut Graph<'a>, params: &'a ParameterSet, prefix: &str, x: Var) -> Result<Var> {
    let gain = g.param(params, &format!("{prefix}.g"))?;
    let bias = g.param(params, &format!("{prefix}.b"))?;
    let y = g.mul_row(x, gain);
    Ok(g.add_row(y, bias))
}

pub(crate) fn classify<'a>(g: &mut Graph<'a>, params: &'a ParameterSet, embedding: Var) -> Result<Var> {
    linear(g, params, "head", embedding)
}

/// Clip as a `F × (K·2)` constant, one flattened frame per row.
pub(crate) fn frames_matrix(g: &mut Graph<'_>, pose: &PoseSequence, max_frames: usize) -> Var {
    let f = pose.frames().min(max_frames);
    let w = pose.keypoints() * COORDS;
    g.constant(f, w, pose.data()[..f * w].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn num_classes_below_two_rejected() {
        let mut c = ModelConfig::new(Variant::Lstm, 0);
        assert!(init_parameters(&c, 1).is_err());
        c.num_classes = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn init_is_seed_deterministic() {
        let c = ModelConfig::new(Variant::Stgcn, 5);
        let a = init_parameters(&c, 9).unwrap();
        let b = init_parameters(&c, 9).unwrap();
        assert_eq!(a, b);
        let d = init_parameters(&c, 10).unwrap();
        assert_ne!(a.content_hash(), d.content_hash());
    }

    #[test]
    fn full_size_param_counts() {
        for (v, want) in [
            (Variant::Lstm, 1.6e6),
            (Variant::Transformer, 3.8e6),
            (Variant::Stgcn, 2.9e6),
        ] {
            let p = init_parameters(&ModelConfig::new(v, 263), 0).unwrap();
            let n = p.param_count() as f64;
            assert!((want / 1.25..want * 1.25).contains(&n), "{v:?}: {n}");
        }
    }

    #[test]
    fn biases_zero_and_gains_one() {
        let p = init_parameters(&ModelConfig::new(Variant::Transformer, 4), 0).unwrap();
        assert!(p.get("head.b").unwrap().data().iter().all(|x| *x == 0.0));
        assert!(p.get("encoder.layer0.ln1.g").unwrap().data().iter().all(|x| *x == 1.0));
        let w = p.get("head.w").unwrap();
        let bound = 1.0 / (128f32).sqrt();
        assert!(w.data().iter().all(|x| x.abs() <= bound));
    }

    #[test]
    fn config_yaml_is_strict() {
        let ok = "variant: stgcn\nnum_classes: 5\nstgcn: {channels: [8, 8], strides: [1, 2], temporal_kernel: 3}\n";
        let c: ModelConfig = serde_yaml::from_str(ok).unwrap();
        assert_eq!(c.stgcn.channels, vec![8, 8]);
        assert!(serde_yaml::from_str::<ModelConfig>("variant: lstm\nnum_classes: 5\nlayerz: 3\n").is_err());
    }
}
