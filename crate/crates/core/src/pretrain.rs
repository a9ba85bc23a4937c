//! Self-supervised pretraining: dense predictive coding (DPC), momentum
//! contrast with a FIFO memory bank, and masked-frame regression.

use std::collections::VecDeque;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{invalid, Error, Result};
use crate::graph::{Graph, Reduction, Var};
use crate::models::{
    init_parameters, linear, stgcn_encode, transformer_tokens, Builder, Init, ModelConfig, Variant, ENCODER_PREFIX,
};
use crate::params::ParameterSet;
use crate::pose::{PoseSequence, SkeletonGraph};
use crate::rng::{derive_seed, RandomSource};
use crate::train::{apply_pipeline, default_preprocess, prefetch_ordered, Adam, AdamConfig};
use crate::transforms::TransformConfig;

pub use crate::models::transplant_encoder;

/// Anything pretraining clips can be drawn from.
pub trait ClipSource: Sync {
    /// A contiguous excerpt of `min_len..=max_len` frames.
    fn sample_clip(&self, rng: &mut RandomSource, min_len: usize, max_len: usize) -> Result<PoseSequence>;
}

impl ClipSource for Corpus {
    fn sample_clip(&self, rng: &mut RandomSource, min_len: usize, max_len: usize) -> Result<PoseSequence> {
        Ok(self.sample_pretraining_clip(rng, min_len, max_len, None)?.pose)
    }
}

/// In-memory clips, sampled the same way as a corpus.
impl ClipSource for [PoseSequence] {
    fn sample_clip(&self, rng: &mut RandomSource, min_len: usize, max_len: usize) -> Result<PoseSequence> {
        if min_len == 0 || min_len > max_len {
            return Err(invalid!(
                "clip lengths need 1 <= min_len <= max_len, got {min_len}..{max_len}"
            ));
        }
        let eligible: Vec<&PoseSequence> = self.iter().filter(|p| p.frames() >= min_len).collect();
        if eligible.is_empty() {
            return Err(Error::Corpus(format!("no clip has at least {min_len} frames")));
        }
        let pose = eligible[rng.below(eligible.len())];
        let len = rng.range_inclusive(min_len, max_len.min(pose.frames()));
        let start = rng.range_inclusive(0, pose.frames() - len);
        pose.slice_frames(start, len)
    }
}

/// Optimization settings shared by all pretraining strategies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSchedule {
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default = "default_min_clip")]
    pub min_clip: usize,
    #[serde(default = "default_max_clip")]
    pub max_clip: usize,
    #[serde(default = "default_preprocess")]
    pub preprocess: Vec<TransformConfig>,
}

fn default_batch() -> usize {
    128
}
fn default_lr() -> f64 {
    1e-3
}
fn default_min_clip() -> usize {
    60
}
fn default_max_clip() -> usize {
    120
}

impl PretrainSchedule {
    pub fn new(steps: usize) -> Self {
        Self {
            steps,
            batch_size: default_batch(),
            learning_rate: default_lr(),
            seed: 0,
            adam: AdamConfig::default(),
            min_clip: default_min_clip(),
            max_clip: default_max_clip(),
            preprocess: default_preprocess(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid!("batch_size must be at least 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(invalid!("learning_rate must be positive"));
        }
        if self.min_clip == 0 || self.min_clip > self.max_clip {
            return Err(invalid!("need 1 <= min_clip <= max_clip"));
        }
        self.adam.validate()?;
        for t in &self.preprocess {
            t.validate()?;
            if !t.is_deterministic() {
                return Err(invalid!("preprocess step `{}` is random", t.name()));
            }
        }
        Ok(())
    }

    /// Draws and preprocesses the clips of batch `step`.
    fn batch<S: ClipSource + ?Sized>(
        &self,
        source: &S,
        step: usize,
        tag: &str,
        min_len: usize,
    ) -> Result<Vec<PoseSequence>> {
        let mut rng = RandomSource::new(derive_seed(self.seed, &format!("{tag}/batch/{step}")));
        let mut noop = RandomSource::new(0);
        (0..self.batch_size)
            .map(|_| {
                let clip = source.sample_clip(&mut rng, min_len, self.max_clip)?;
                apply_pipeline(&self.preprocess, &clip, &mut noop)
            })
            .collect()
    }
}

/// One line of a pretraining loss curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub step: usize,
    pub loss: f64,
    /// Contrastive top-1 (positive scored highest) or masked direction accuracy.
    pub accuracy: Option<f64>,
    pub lr: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    /// `encoder.*` tensors only, tagged with the encoder family.
    pub encoder: ParameterSet,
    /// Everything that was optimized, auxiliary heads included.
    pub full: ParameterSet,
    pub history: Vec<PretrainRecord>,
}

/// The `encoder.*` subset of `params`, tagged with the family of `config`.
pub fn encoder_only(params: &ParameterSet, config: &ModelConfig) -> Result<ParameterSet> {
    let mut out = ParameterSet::new(config.variant.as_str(), config.encoder_hash());
    for (name, t) in params.iter().filter(|(n, _)| n.starts_with(ENCODER_PREFIX)) {
        out.insert(name, t.clone())?;
    }
    Ok(out)
}

/// Fresh encoder tensors for `config` plus the auxiliary tensors added by `extra`.
fn init_with(config: &ModelConfig, seed: u64, extra: impl FnOnce(&mut Builder) -> Result<()>) -> Result<ParameterSet> {
    let mut params = encoder_only(&init_parameters(config, seed)?, config)?;
    let mut b = Builder::new(config.variant.as_str(), &config.encoder_hash(), seed);
    extra(&mut b)?;
    for (name, t) in b.finish().iter() {
        params.insert(name, t.clone())?;
    }
    Ok(params)
}

fn require_variant(config: &ModelConfig, variant: Variant, what: &str) -> Result<()> {
    if config.variant != variant {
        return Err(invalid!(
            "{what} needs a `{}` encoder, got `{}`",
            variant.as_str(),
            config.variant.as_str()
        ));
    }
    config.validate()
}

/// Generic optimization loop: `step_loss` fills gradients for one batch and
/// returns `(loss, accuracy)`; `after_step` runs after the Adam update.
/// Both share the mutable `state`.
#[allow(clippy::too_many_arguments)]
fn optimize<S, St, L, A>(
    schedule: &PretrainSchedule,
    source: &S,
    tag: &str,
    min_len: usize,
    params: &mut ParameterSet,
    state: &mut St,
    mut step_loss: L,
    mut after_step: A,
    on_step: &mut dyn FnMut(&PretrainRecord),
) -> Result<Vec<PretrainRecord>>
where
    S: ClipSource + ?Sized,
    L: FnMut(&mut St, &mut ParameterSet, &[PoseSequence], usize) -> Result<(f64, Option<f64>)>,
    A: FnMut(&mut St, &ParameterSet, usize) -> Result<()>,
{
    schedule.validate()?;
    let mut adam = Adam::new(params, schedule.adam)?;
    let start = Instant::now();
    let mut history = Vec::with_capacity(schedule.steps);
    let mut step = 0;
    prefetch_ordered(
        schedule.steps,
        2,
        |s| schedule.batch(source, s, tag, min_len),
        |batch| {
            params.zero_grads();
            let (loss, accuracy) = step_loss(state, params, &batch, step)?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!("{tag} step {step}: loss is {loss}")));
            }
            adam.step(params, schedule.learning_rate)?;
            after_step(state, params, step)?;
            let rec = PretrainRecord {
                step,
                loss,
                accuracy,
                lr: schedule.learning_rate,
                wall_time_s: start.elapsed().as_secs_f64(),
            };
            on_step(&rec);
            history.push(rec);
            step += 1;
            Ok(())
        },
    )?;
    Ok(history)
}

// ---------------------------------------------------------------------------
// Dense predictive coding

/// Splits a clip into `floor(F / window_len)` consecutive windows, dropping
/// the trailing remainder.
pub fn partition_windows(pose: &PoseSequence, window_len: usize) -> Result<Vec<PoseSequence>> {
    if window_len == 0 {
        return Err(invalid!("window_len must be at least 1"));
    }
    if pose.frames() < window_len {
        return Err(invalid!(
            "clip has {} frames, shorter than one window of {window_len}",
            pose.frames()
        ));
    }
    (0..pose.frames() / window_len)
        .map(|w| pose.slice_frames(w * window_len, window_len))
        .collect()
}

fn dot64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

/// `−Σ_i log[exp(ẑ_i·z_i) / Σ_j exp(ẑ_i·z_j)]` where `j` runs over the
/// positive `z_i` and every negative. Raw dot products, 64-bit log-sum-exp.
pub fn infonce_loss(predicted: &[Vec<f32>], actual: &[Vec<f32>], negatives: &[Vec<f32>]) -> Result<f64> {
    if predicted.len() != actual.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} positives",
            predicted.len(),
            actual.len()
        )));
    }
    let Some(dim) = predicted.first().map(Vec::len) else {
        return Err(invalid!("no predictions"));
    };
    if predicted.iter().chain(actual).chain(negatives).any(|v| v.len() != dim) {
        return Err(Error::Shape(format!("all embeddings must have dimension {dim}")));
    }
    let mut total = 0.0;
    for (p, z) in predicted.iter().zip(actual) {
        let pos = dot64(p, z);
        let scores: Vec<f64> = std::iter::once(pos)
            .chain(negatives.iter().map(|n| dot64(p, n)))
            .collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
        total += lse - pos;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpcConfig {
    #[serde(default = "default_window")]
    pub window_len: usize,
    #[serde(default = "default_input_windows")]
    pub input_windows: usize,
    #[serde(default = "default_predict_windows")]
    pub predict_windows: usize,
    #[serde(default = "default_gru_hidden")]
    pub gru_hidden: usize,
}

fn default_window() -> usize {
    10
}
fn default_input_windows() -> usize {
    4
}
fn default_predict_windows() -> usize {
    3
}
fn default_gru_hidden() -> usize {
    256
}

impl Default for DpcConfig {
    fn default() -> Self {
        Self {
            window_len: default_window(),
            input_windows: default_input_windows(),
            predict_windows: default_predict_windows(),
            gru_hidden: default_gru_hidden(),
        }
    }
}

impl DpcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_len == 0 || self.input_windows == 0 || self.predict_windows == 0 || self.gru_hidden == 0 {
            return Err(invalid!(
                "dpc window_len, input_windows, predict_windows and gru_hidden must be at least 1"
            ));
        }
        Ok(())
    }

    pub fn windows_needed(&self) -> usize {
        self.input_windows + self.predict_windows
    }

    pub fn frames_needed(&self) -> usize {
        self.windows_needed() * self.window_len
    }
}

/// An ST-GCN window encoder with a GRU aggregator and the φ prediction layer.
#[derive(Debug, Clone)]
pub struct DpcModel {
    pub dpc: DpcConfig,
    pub encoder: ModelConfig,
    pub skeleton: SkeletonGraph,
}

impl DpcModel {
    pub fn new(dpc: DpcConfig, encoder: ModelConfig, skeleton: SkeletonGraph) -> Result<Self> {
        dpc.validate()?;
        require_variant(&encoder, Variant::Stgcn, "predictive coding")?;
        if skeleton.node_count() != encoder.keypoints {
            return Err(Error::Shape("skeleton does not match the encoder keypoints".into()));
        }
        Ok(Self { dpc, encoder, skeleton })
    }

    pub fn embedding_dim(&self) -> usize {
        self.encoder.embedding_dim()
    }

    /// Encoder tensors plus `dpc.gru.*` and `dpc.phi.*`.
    pub fn init(&self, seed: u64) -> Result<ParameterSet> {
        let (e, h) = (self.embedding_dim(), self.dpc.gru_hidden);
        init_with(&self.encoder, seed, |b| {
            b.add("dpc.gru.w_ih", &[e, 3 * h], Init::FanIn)?;
            b.add("dpc.gru.w_hh", &[h, 3 * h], Init::FanIn)?;
            b.add("dpc.gru.b_ih", &[3 * h], Init::Zeros)?;
            b.add("dpc.gru.b_hh", &[3 * h], Init::Zeros)?;
            b.linear("dpc.phi", h, e)
        })
    }
}

fn gru_cell<'a>(g: &mut Graph<'a>, params: &'a ParameterSet, x: Var, h: Var, hidden: usize) -> Result<Var> {
    let w_ih = g.param(params, "dpc.gru.w_ih")?;
    let w_hh = g.param(params, "dpc.gru.w_hh")?;
    let b_ih = g.param(params, "dpc.gru.b_ih")?;
    let b_hh = g.param(params, "dpc.gru.b_hh")?;
    let gi = g.matmul(x, w_ih);
    let gi = g.add_row(gi, b_ih);
    let gh = g.matmul(h, w_hh);
    let gh = g.add_row(gh, b_hh);
    let gate = |g: &mut Graph<'a>, i: usize| {
        let a = g.slice_cols(gi, i * hidden, hidden);
        let b = g.slice_cols(gh, i * hidden, hidden);
        let s = g.add(a, b);
        g.sigmoid(s)
    };
    let r = gate(g, 0);
    let z = gate(g, 1);
    let xn = g.slice_cols(gi, 2 * hidden, hidden);
    let hn = g.slice_cols(gh, 2 * hidden, hidden);
    let rh = g.mul(r, hn);
    let n = g.add(xn, rh);
    let n = g.tanh(n);
    // h' = (1 − z)·n + z·h = n + z·(h − n)
    let d = g.sub(h, n);
    let zd = g.mul(z, d);
    Ok(g.add(n, zd))
}

/// Embeds every window, runs the GRU over the first `input_windows`, then
/// rolls out `predict_windows` predictions, feeding each back as the next
/// GRU input. Returns `(predicted, actual)` as `1 × E` rows.
pub fn dpc_forward<'a>(
    g: &mut Graph<'a>,
    params: &'a ParameterSet,
    model: &DpcModel,
    windows: &[PoseSequence],
) -> Result<(Vec<Var>, Vec<Var>)> {
    let c = &model.dpc;
    if windows.len() < c.windows_needed() {
        return Err(invalid!(
            "{} windows available, {} input + {} predicted needed",
            windows.len(),
            c.input_windows,
            c.predict_windows
        ));
    }
    let emb = windows[..c.windows_needed()]
        .iter()
        .map(|w| stgcn_encode(g, params, &model.encoder, w, &model.skeleton))
        .collect::<Result<Vec<_>>>()?;
    let mut h = g.zeros(1, c.gru_hidden);
    for x in &emb[..c.input_windows] {
        h = gru_cell(g, params, *x, h, c.gru_hidden)?;
    }
    let mut predicted = Vec::with_capacity(c.predict_windows);
    for p in 0..c.predict_windows {
        let z = linear(g, params, "dpc.phi", h)?;
        predicted.push(z);
        if p + 1 < c.predict_windows {
            h = gru_cell(g, params, z, h, c.gru_hidden)?;
        }
    }
    Ok((predicted, emb[c.input_windows..].to_vec()))
}

/// Batch InfoNCE over `B` clips: each prediction is scored against every
/// actual embedding in the batch, so each positive faces `B·P − 1`
/// negatives. The loss is averaged over the `B·P` positives.
/// Returns `(loss, fraction of positives ranked first)`.
pub fn dpc_batch_loss<'a>(
    g: &mut Graph<'a>,
    params: &'a ParameterSet,
    model: &DpcModel,
    clips: &[Vec<PoseSequence>],
) -> Result<(Var, f64)> {
    if clips.is_empty() {
        return Err(invalid!("empty batch"));
    }
    let mut preds = Vec::new();
    let mut actual = Vec::new();
    for windows in clips {
        let (p, a) = dpc_forward(g, params, model, windows)?;
        preds.extend(p);
        actual.extend(a);
    }
    let pred = g.concat_rows(&preds);
    let act = g.concat_rows(&actual);
    let scores = g.matmul_bt(pred, act);
    let n = preds.len();
    let targets: Vec<Option<usize>> = (0..n).map(Some).collect();
    let loss = g.cross_entropy(scores, &targets, Reduction::Mean)?;
    let hits = g
        .value(scores)
        .chunks_exact(n)
        .enumerate()
        .filter(|(i, row)| crate::train::argmax(row) == *i)
        .count();
    Ok((loss, hits as f64 / n as f64))
}

/// Pretrains an ST-GCN encoder with predictive coding on clips drawn from
/// `source`. Clips shorter than the windows needed are never drawn.
pub fn dpc_pretrain<S: ClipSource + ?Sized>(
    source: &S,
    model: &DpcModel,
    schedule: &PretrainSchedule,
    on_step: &mut dyn FnMut(&PretrainRecord),
) -> Result<PretrainOutcome> {
    let min_len = schedule.min_clip.max(model.dpc.frames_needed());
    if min_len > schedule.max_clip {
        return Err(invalid!(
            "max_clip {} is shorter than the {} frames predictive coding needs",
            schedule.max_clip,
            model.dpc.frames_needed()
        ));
    }
    let mut params = model.init(derive_seed(schedule.seed, "dpc/init"))?;
    let history = optimize(
        schedule,
        source,
        "dpc",
        min_len,
        &mut params,
        &mut (),
        |_, params, batch, _| {
            let windows = batch
                .iter()
                .map(|c| partition_windows(c, model.dpc.window_len))
                .collect::<Result<Vec<_>>>()?;
            let (grads, loss, acc) = {
                let mut g = Graph::new();
                let (loss, acc) = dpc_batch_loss(&mut g, params, model, &windows)?;
                let value = g.scalar(loss) as f64;
                (g.backward(loss)?, value, acc)
            };
            params.accumulate(&grads)?;
            Ok((loss, Some(acc)))
        },
        |_, _, _| Ok(()),
        on_step,
    )?;
    Ok(PretrainOutcome {
        encoder: encoder_only(&params, &model.encoder)?,
        full: params,
        history,
    })
}

// ---------------------------------------------------------------------------
// Momentum contrast

/// Fixed-capacity FIFO of embedding vectors.
#[derive(Debug, Clone)]
pub struct MemoryBank {
    capacity: usize,
    dim: usize,
    entries: VecDeque<Vec<f32>>,
}

impl MemoryBank {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(invalid!("memory bank needs a positive capacity and dimension"));
        }
        Ok(Self {
            capacity,
            dim,
            entries: VecDeque::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Appends `keys` in order, evicting the oldest entries beyond capacity.
    pub fn enqueue(&mut self, keys: &[Vec<f32>]) -> Result<()> {
        if let Some(k) = keys.iter().find(|k| k.len() != self.dim) {
            return Err(Error::Shape(format!(
                "key of dimension {}, bank holds {}",
                k.len(),
                self.dim
            )));
        }
        for k in keys {
            if self.entries.len() == self.capacity {
                self.entries.pop_front();
            }
            self.entries.push_back(k.clone());
        }
        Ok(())
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &Vec<f32>> {
        self.entries.iter()
    }

    /// Entries as a row-major `len × dim` matrix.
    pub fn matrix(&self) -> Vec<f32> {
        self.entries.iter().flatten().copied().collect()
    }
}

fn default_momentum() -> f64 {
    0.999
}
fn default_temperature() -> f64 {
    0.07
}
fn default_bank() -> usize {
    4096
}
fn default_views() -> Vec<TransformConfig> {
    vec![
        TransformConfig::Shear { max_shear: 0.15 },
        TransformConfig::Scale { lo: 0.8, hi: 1.2 },
        TransformConfig::Rotate {
            max_angle: std::f32::consts::FRAC_PI_3,
        },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MocoConfig {
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_bank")]
    pub bank_capacity: usize,
    /// Applied independently to produce the two views of each clip.
    #[serde(default = "default_views")]
    pub augment: Vec<TransformConfig>,
}

impl Default for MocoConfig {
    fn default() -> Self {
        Self {
            momentum: default_momentum(),
            temperature: default_temperature(),
            bank_capacity: default_bank(),
            augment: default_views(),
        }
    }
}

impl MocoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(invalid!("momentum must lie in [0, 1]"));
        }
        if !(self.temperature > 0.0) {
            return Err(invalid!("temperature must be positive"));
        }
        for t in &self.augment {
            t.validate()?;
        }
        Ok(())
    }
}

/// L2-normalized ST-GCN embedding of one clip.
fn moco_embed<'a>(
    g: &mut Graph<'a>,
    params: &'a ParameterSet,
    model: &ModelConfig,
    skeleton: &SkeletonGraph,
    pose: &PoseSequence,
) -> Result<Var> {
    let e = stgcn_encode(g, params, model, pose, skeleton)?;
    Ok(g.l2_normalize_rows(e))
}

/// Contrastive loss of one query against its key and the bank, scaled by
/// `1/τ`. With an empty bank only the positive is in the denominator.
pub fn moco_query_loss<'a>(
    g: &mut Graph<'a>,
    query: Var,
    key: &[f32],
    bank: &MemoryBank,
    temperature: f64,
) -> Result<Var> {
    let k = g.constant(1, key.len(), key.to_vec());
    let pos = g.row_dot(query, k);
    let logits = if bank.is_empty() {
        pos
    } else {
        let negs = g.constant(bank.len(), bank.dim, bank.matrix());
        let neg = g.matmul_bt(query, negs);
        g.concat_cols(&[pos, neg])
    };
    let logits = g.scale(logits, (1.0 / temperature) as f32);
    g.cross_entropy(logits, &[Some(0)], Reduction::Mean)
}

/// `key ← m·key + (1 − m)·online`, tensor by tensor. `m = 1` leaves `key` untouched.
pub fn momentum_update(key: &mut ParameterSet, online: &ParameterSet, m: f64) -> Result<()> {
    if key.names() != online.names() {
        return Err(invalid!("momentum encoder and online encoder hold different tensors"));
    }
    if m >= 1.0 {
        return Ok(());
    }
    for i in 0..online.len() {
        let q = online.value_at(i).data();
        for (k, q) in key.value_at_mut(i).data_mut().iter_mut().zip(q) {
            *k = (m * *k as f64 + (1.0 - m) * *q as f64) as f32;
        }
    }
    Ok(())
}

struct MocoState {
    key_params: ParameterSet,
    bank: MemoryBank,
    pending: Vec<Vec<f32>>,
}

/// Momentum-contrastive pretraining of an ST-GCN encoder. Queries come from
/// the online encoder, keys from a momentum copy updated as
/// `θ_k ← m·θ_k + (1 − m)·θ_q` after every step.
pub fn moco_pretrain<S: ClipSource + ?Sized>(
    source: &S,
    encoder: &ModelConfig,
    skeleton: &SkeletonGraph,
    moco: &MocoConfig,
    schedule: &PretrainSchedule,
    on_step: &mut dyn FnMut(&PretrainRecord),
) -> Result<PretrainOutcome> {
    require_variant(encoder, Variant::Stgcn, "momentum contrast")?;
    moco.validate()?;
    if moco.bank_capacity < schedule.batch_size {
        return Err(invalid!(
            "bank capacity {} is smaller than the batch size {}",
            moco.bank_capacity,
            schedule.batch_size
        ));
    }
    let mut params = init_with(encoder, derive_seed(schedule.seed, "moco/init"), |_| Ok(()))?;
    let mut state = MocoState {
        key_params: params.clone(),
        bank: MemoryBank::new(moco.bank_capacity, encoder.embedding_dim())?,
        pending: Vec::new(),
    };
    let history = optimize(
        schedule,
        source,
        "moco",
        schedule.min_clip,
        &mut params,
        &mut state,
        |st, params, batch, step| {
            let mut loss_sum = 0.0;
            let mut hits = 0;
            st.pending.clear();
            for (i, clip) in batch.iter().enumerate() {
                let view = |v: usize| {
                    let mut rng = RandomSource::new(derive_seed(schedule.seed, &format!("moco/view/{step}/{i}/{v}")));
                    apply_pipeline(&moco.augment, clip, &mut rng)
                };
                let (q_view, k_view) = (view(0)?, view(1)?);
                let key = {
                    let mut g = Graph::inference();
                    let k = moco_embed(&mut g, &st.key_params, encoder, skeleton, &k_view)?;
                    g.value(k).to_vec()
                };
                let grads = {
                    let mut g = Graph::new();
                    let q = moco_embed(&mut g, params, encoder, skeleton, &q_view)?;
                    let loss = moco_query_loss(&mut g, q, &key, &st.bank, moco.temperature)?;
                    loss_sum += g.scalar(loss) as f64;
                    let pos = dot64(g.value(q), &key);
                    hits += st.bank.iter().all(|n| dot64(g.value(q), n) < pos) as usize;
                    g.backward(loss)?
                };
                params.accumulate(&grads)?;
                st.pending.push(key);
            }
            params.scale_grads(1.0 / batch.len() as f32);
            Ok((loss_sum / batch.len() as f64, Some(hits as f64 / batch.len() as f64)))
        },
        |st, params, _| {
            momentum_update(&mut st.key_params, params, moco.momentum)?;
            st.bank.enqueue(&st.pending)
        },
        on_step,
    )?;
    Ok(PretrainOutcome {
        encoder: encoder_only(&params, encoder)?,
        full: params,
        history,
    })
}

// ---------------------------------------------------------------------------
// Masked-frame regression

/// Motion class of one keypoint between consecutive frames. Screen axes:
/// x grows right, y grows down; quadrants run counter-clockwise on screen
/// starting up-right.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    Static,
    /// x > 0, y ≤ 0 (up-right)
    Q1,
    /// x ≤ 0, y < 0 (up-left)
    Q2,
    /// x < 0, y ≥ 0 (down-left)
    Q3,
    /// x ≥ 0, y > 0 (down-right)
    Q4,
}

pub const DIRECTION_CLASSES: usize = 5;
pub const DEFAULT_STATIC_DELTA: f64 = 1e-3;

impl Direction {
    pub fn of(v: [f64; 2], delta: f64) -> Self {
        let [x, y] = v;
        if x.hypot(y) <= delta {
            Direction::Static
        } else if x > 0.0 && y <= 0.0 {
            Direction::Q1
        } else if x <= 0.0 && y < 0.0 {
            Direction::Q2
        } else if x < 0.0 && y >= 0.0 {
            Direction::Q3
        } else {
            Direction::Q4
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Per-frame, per-keypoint motion classes (`F × K`, row-major). The first
/// frame, and any step touching a missing keypoint, is `Static`.
pub fn direction_labels(pose: &PoseSequence, delta: f64) -> Result<Vec<Direction>> {
    if pose.frames() < 2 {
        return Err(invalid!("direction labels need at least 2 frames"));
    }
    if !(delta >= 0.0) {
        return Err(invalid!("static threshold must be non-negative"));
    }
    let k = pose.keypoints();
    let mut out = vec![Direction::Static; pose.frames() * k];
    for t in 1..pose.frames() {
        for j in 0..k {
            if pose.is_valid(t, j) && pose.is_valid(t - 1, j) {
                let (a, b) = (pose.point(t - 1, j), pose.point(t, j));
                out[t * k + j] = Direction::of([(b[0] - a[0]) as f64, (b[1] - a[1]) as f64], delta);
            }
        }
    }
    Ok(out)
}

pub fn static_fraction(labels: &[Direction]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    labels.iter().filter(|d| **d == Direction::Static).count() as f64 / labels.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum SpanMode {
    SingleFrame,
    /// Contiguous spans with lengths uniform in `min..=max`.
    Spans {
        min: usize,
        max: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskLoss {
    Regression,
    RegressionDirection,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskConfig {
    #[serde(default = "default_ratio")]
    pub mask_ratio: f64,
    #[serde(default = "default_span")]
    pub span_mode: SpanMode,
    #[serde(default = "default_mask_loss")]
    pub loss_mode: MaskLoss,
    #[serde(default = "default_direction_weight")]
    pub direction_weight: f64,
    #[serde(default = "default_delta")]
    pub static_delta: f64,
}

fn default_ratio() -> f64 {
    0.4
}
fn default_span() -> SpanMode {
    SpanMode::SingleFrame
}
fn default_mask_loss() -> MaskLoss {
    MaskLoss::Regression
}
fn default_direction_weight() -> f64 {
    1.0
}
fn default_delta() -> f64 {
    DEFAULT_STATIC_DELTA
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            mask_ratio: default_ratio(),
            span_mode: default_span(),
            loss_mode: default_mask_loss(),
            direction_weight: default_direction_weight(),
            static_delta: default_delta(),
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(invalid!("mask_ratio must lie in (0, 1)"));
        }
        if let SpanMode::Spans { min, max } = self.span_mode {
            if min == 0 || min > max {
                return Err(invalid!("span lengths need 1 <= min <= max"));
            }
        }
        if !(self.direction_weight >= 0.0) || !(self.static_delta >= 0.0) {
            return Err(invalid!("direction_weight and static_delta must be non-negative"));
        }
        Ok(())
    }

    /// Number of frames masked in a clip of `frames`: `round(ratio·F)`, at least one.
    pub fn masked_count(&self, frames: usize) -> usize {
        ((self.mask_ratio * frames as f64).round() as usize).clamp(1, frames)
    }
}

/// Chooses exactly `config.masked_count(frames)` frames to mask.
pub fn mask_frames(config: &MaskConfig, frames: usize, rng: &mut RandomSource) -> Vec<bool> {
    let n = config.masked_count(frames);
    let mut mask = vec![false; frames];
    match config.span_mode {
        SpanMode::SingleFrame => {
            for i in rng.sample_without_replacement(frames, n) {
                mask[i] = true;
            }
        }
        SpanMode::Spans { min, max } => {
            let mut left = n;
            while left > 0 {
                let free: Vec<usize> = (0..frames).filter(|i| !mask[*i]).collect();
                let start = free[rng.below(free.len())];
                let span = rng.range_inclusive(min, max);
                for t in (start..frames).take(span) {
                    if left == 0 || mask[t] {
                        break;
                    }
                    mask[t] = true;
                    left -= 1;
                }
            }
        }
    }
    mask
}

/// A transformer encoder with a learned mask vector and reconstruction heads.
#[derive(Debug, Clone)]
pub struct MaskedModel {
    pub mask: MaskConfig,
    pub encoder: ModelConfig,
}

impl MaskedModel {
    pub fn new(mask: MaskConfig, encoder: ModelConfig) -> Result<Self> {
        mask.validate()?;
        require_variant(&encoder, Variant::Transformer, "masked pretraining")?;
        Ok(Self { mask, encoder })
    }

    /// Encoder tensors plus `pretrain.mask`, `pretrain.regress.*` and, with
    /// the direction loss, `pretrain.direction.*`.
    pub fn init(&self, seed: u64) -> Result<ParameterSet> {
        let (w, d, k) = (
            self.encoder.input_width(),
            self.encoder.transformer.hidden,
            self.encoder.keypoints,
        );
        let with_direction = self.mask.loss_mode == MaskLoss::RegressionDirection;
        init_with(&self.encoder, seed, |b| {
            b.add("pretrain.mask", &[1, w], Init::Embedding)?;
            b.linear("pretrain.regress", d, w)?;
            if with_direction {
                b.linear("pretrain.direction", d, k * DIRECTION_CLASSES)?;
            }
            Ok(())
        })
    }
}

/// Loss of one masked clip. Returns `(loss, direction hits, direction targets)`.
pub fn masked_loss<'a>(
    g: &mut Graph<'a>,
    params: &'a ParameterSet,
    model: &MaskedModel,
    pose: &PoseSequence,
    mask: &[bool],
) -> Result<(Var, usize, usize)> {
    let enc = &model.encoder;
    if pose.keypoints() != enc.keypoints {
        return Err(Error::Shape(format!(
            "model expects {} keypoints, clip has {}",
            enc.keypoints,
            pose.keypoints()
        )));
    }
    let f = pose.frames().min(enc.transformer.max_seq - 1);
    if mask.len() != f {
        return Err(Error::Shape(format!(
            "mask covers {} frames, clip uses {f}",
            mask.len()
        )));
    }
    let w = enc.input_width();
    let target = &pose.data()[..f * w];
    let frames = g.constant(f, w, target.to_vec());
    let mask_vec = g.param(params, "pretrain.mask")?;
    let input = g.replace_rows(frames, mask_vec, mask);
    let (tokens, _) = transformer_tokens(g, params, enc, input)?;
    let body = g.slice_rows(tokens, 1, f);
    let recon = linear(g, params, "pretrain.regress", body)?;
    let mut loss = g.mse_rows(recon, target, mask)?;
    let (mut hits, mut total) = (0, 0);
    if model.mask.loss_mode == MaskLoss::RegressionDirection && f >= 2 {
        let labels = direction_labels(&pose.slice_frames(0, f)?, model.mask.static_delta)?;
        let k = enc.keypoints;
        let logits = linear(g, params, "pretrain.direction", body)?;
        let mut parts = Vec::with_capacity(k);
        for j in 0..k {
            let lj = g.slice_cols(logits, j * DIRECTION_CLASSES, DIRECTION_CLASSES);
            let targets: Vec<Option<usize>> = (0..f).map(|t| mask[t].then(|| labels[t * k + j].index())).collect();
            for (t, row) in g.value(lj).chunks_exact(DIRECTION_CLASSES).enumerate() {
                if let Some(y) = targets[t] {
                    hits += (crate::train::argmax(row) == y) as usize;
                    total += 1;
                }
            }
            parts.push(g.cross_entropy(lj, &targets, Reduction::Mean)?);
        }
        let all = g.concat_cols(&parts);
        let dir = g.sum_all(all);
        let dir = g.scale(dir, (model.mask.direction_weight / k as f64) as f32);
        loss = g.add(loss, dir);
    }
    Ok((loss, hits, total))
}

/// Masked-frame pretraining of a transformer encoder.
pub fn masked_pretrain<S: ClipSource + ?Sized>(
    source: &S,
    model: &MaskedModel,
    schedule: &PretrainSchedule,
    on_step: &mut dyn FnMut(&PretrainRecord),
) -> Result<PretrainOutcome> {
    let mut params = model.init(derive_seed(schedule.seed, "masked/init"))?;
    let max_len = model.encoder.transformer.max_seq - 1;
    let history = optimize(
        schedule,
        source,
        "masked",
        schedule.min_clip,
        &mut params,
        &mut (),
        |_, params, batch, step| {
            let mut loss_sum = 0.0;
            let (mut hits, mut total) = (0, 0);
            for (i, clip) in batch.iter().enumerate() {
                let f = clip.frames().min(max_len);
                let mut rng = RandomSource::new(derive_seed(schedule.seed, &format!("masked/mask/{step}/{i}")));
                let mask = mask_frames(&model.mask, f, &mut rng);
                let grads = {
                    let mut g = Graph::new();
                    let (loss, h, t) = masked_loss(&mut g, params, model, clip, &mask)?;
                    loss_sum += g.scalar(loss) as f64;
                    hits += h;
                    total += t;
                    g.backward(loss)?
                };
                params.accumulate(&grads)?;
            }
            params.scale_grads(1.0 / batch.len() as f32);
            let acc = (total > 0).then(|| hits as f64 / total as f64);
            Ok((loss_sum / batch.len() as f64, acc))
        },
        |_, _, _| Ok(()),
        on_step,
    )?;
    Ok(PretrainOutcome {
        encoder: encoder_only(&params, &model.encoder)?,
        full: params,
        history,
    })
}
