//! Supervised training: Adam, cross-entropy, top-k metrics and the epoch loop.

use std::collections::{BTreeMap, HashSet};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{invalid, Error, Result};
use crate::graph::{log_sum_exp, Graph, Reduction};
use crate::models::{transplant_encoder, Architecture, Variant};
use crate::params::ParameterSet;
use crate::pose::PoseSequence;
use crate::rng::{derive_seed, RandomSource};
use crate::transforms::{compose, TransformConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    #[serde(default = "beta1")]
    pub beta1: f64,
    #[serde(default = "beta2")]
    pub beta2: f64,
    #[serde(default = "adam_eps")]
    pub eps: f64,
}

fn beta1() -> f64 {
    0.9
}
fn beta2() -> f64 {
    0.999
}
fn adam_eps() -> f64 {
    1e-8
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: beta1(),
            beta2: beta2(),
            eps: adam_eps(),
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let open = |b: f64| b > 0.0 && b < 1.0;
        if !(open(self.beta1) && open(self.beta2)) {
            return Err(invalid!("adam betas must lie in (0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(invalid!("adam eps must be positive"));
        }
        Ok(())
    }
}

/// Adam with bias correction; moment buffers persist across steps.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(params: &ParameterSet, config: AdamConfig) -> Result<Self> {
        config.validate()?;
        let zeros = || (0..params.len()).map(|i| vec![0.0; params.value_at(i).len()]).collect();
        Ok(Self {
            config,
            m: zeros(),
            v: zeros(),
            step: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradient slots of `params`.
    pub fn step(&mut self, params: &mut ParameterSet, lr: f64) -> Result<()> {
        if !params.grads_filled() {
            return Err(invalid!("adam step without gradients; run backward first"));
        }
        if self.m.len() != params.len() {
            return Err(invalid!("optimizer was built for a different parameter set"));
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let grad = params.grad_at(i).data().to_vec();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let w = params.value_at_mut(i).data_mut();
            for j in 0..w.len() {
                let g = grad[j] as f64;
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let update = lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                w[j] = (w[j] as f64 - update) as f32;
            }
        }
        Ok(())
    }
}

/// `−log softmax(logits)[label]` in 64-bit.
pub fn cross_entropy(logits: &[f32], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::IndexOutOfRange {
            what: "classes",
            index: label,
            len: logits.len(),
        });
    }
    Ok(log_sum_exp(logits) - logits[label] as f64)
}

/// Position of `label` in the descending ranking of `logits`, ties broken
/// toward the lower class index.
pub fn rank_of(logits: &[f32], label: usize) -> usize {
    let x = logits[label];
    logits
        .iter()
        .enumerate()
        .filter(|(j, v)| **v > x || (**v == x && *j < label))
        .count()
}

/// Arg-max with the lowest index winning ties.
pub fn argmax(logits: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in logits.iter().enumerate() {
        if *v > logits[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub top1: f64,
    pub topk: BTreeMap<usize, f64>,
    pub loss: f64,
    /// Accuracy per class; `None` for classes absent from the split.
    pub per_class: Vec<Option<f64>>,
    pub count: usize,
}

pub fn metrics_from_logits(logits: &[Vec<f32>], labels: &[usize], ks: &[usize]) -> Result<Metrics> {
    if logits.is_empty() {
        return Err(invalid!("no predictions to score"));
    }
    if logits.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            logits.len(),
            labels.len()
        )));
    }
    let classes = logits[0].len();
    let mut hits: BTreeMap<usize, usize> = ks.iter().map(|k| (*k, 0)).collect();
    let mut top1 = 0usize;
    let mut loss = 0.0;
    let mut class_total = vec![0usize; classes];
    let mut class_hit = vec![0usize; classes];
    for (l, &y) in logits.iter().zip(labels) {
        if l.len() != classes {
            return Err(Error::Shape("ragged logits".into()));
        }
        loss += cross_entropy(l, y)?;
        let r = rank_of(l, y);
        for (k, h) in hits.iter_mut() {
            *h += (r < *k) as usize;
        }
        top1 += (r == 0) as usize;
        class_total[y] += 1;
        class_hit[y] += (r == 0) as usize;
    }
    let n = labels.len() as f64;
    Ok(Metrics {
        top1: top1 as f64 / n,
        topk: hits.into_iter().map(|(k, h)| (k, h as f64 / n)).collect(),
        loss: loss / n,
        per_class: class_total
            .iter()
            .zip(&class_hit)
            .map(|(t, h)| (*t > 0).then(|| *h as f64 / *t as f64))
            .collect(),
        count: labels.len(),
    })
}

/// Applies a pipeline; an empty pipeline is the identity.
pub fn apply_pipeline(
    pipeline: &[TransformConfig],
    pose: &PoseSequence,
    rng: &mut RandomSource,
) -> Result<PoseSequence> {
    if pipeline.is_empty() {
        Ok(pose.clone())
    } else {
        compose(pipeline, pose, rng)
    }
}

/// The default deterministic preprocessing: shoulder-based centering and scaling.
pub fn default_preprocess() -> Vec<TransformConfig> {
    vec![TransformConfig::CenterAndScaleNormalize {
        reference_span: 1.0,
        shoulder_left: 5,
        shoulder_right: 6,
    }]
}

/// Labeled clips held in memory.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub poses: Vec<PoseSequence>,
    pub labels: Vec<usize>,
}

impl Dataset {
    /// Loads `ids` from a labeled corpus and applies `preprocess` (which must
    /// be deterministic) to each clip.
    pub fn load(corpus: &Corpus, ids: &[String], preprocess: &[TransformConfig]) -> Result<Self> {
        if let Some(t) = preprocess.iter().find(|t| !t.is_deterministic()) {
            return Err(invalid!(
                "preprocessing must be deterministic, `{}` is random",
                t.name()
            ));
        }
        let mut out = Dataset::default();
        let mut rng = RandomSource::new(0);
        for id in ids {
            let s = corpus.get(id)?;
            let label = s
                .label
                .ok_or_else(|| Error::Corpus(format!("sample `{id}` has no label")))?;
            out.poses.push(apply_pipeline(preprocess, &s.pose, &mut rng)?);
            out.labels.push(label);
            out.ids.push(id.clone());
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepDecay {
    pub every_epochs: usize,
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub adam: AdamConfig,
    /// Epochs without a validation top-1 improvement before stopping.
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default)]
    pub lr_decay: Option<StepDecay>,
    /// Deterministic steps applied to every clip (train, eval and serving).
    #[serde(default = "default_preprocess")]
    pub preprocess: Vec<TransformConfig>,
    /// Random augmentations applied to training clips after preprocessing.
    #[serde(default)]
    pub augment: Vec<TransformConfig>,
    #[serde(default = "default_topk")]
    pub top_k: Vec<usize>,
    /// Threads assembling batches ahead of the optimizer.
    #[serde(default = "default_workers")]
    pub workers: usize,
}

fn default_patience() -> usize {
    50
}
fn default_topk() -> Vec<usize> {
    vec![1, 5]
}
fn default_workers() -> usize {
    1
}

impl TrainConfig {
    /// Default batch size and learning rate for each architecture.
    pub fn for_variant(variant: Variant) -> Self {
        let (batch_size, learning_rate) = match variant {
            Variant::Lstm => (32, 0.005),
            Variant::Transformer => (64, 1e-4),
            Variant::Stgcn => (32, 1e-3),
        };
        Self {
            batch_size,
            learning_rate,
            max_epochs: 200,
            seed: 0,
            adam: AdamConfig::default(),
            patience: default_patience(),
            lr_decay: None,
            preprocess: default_preprocess(),
            augment: Vec::new(),
            top_k: default_topk(),
            workers: default_workers(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid!("batch_size must be at least 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(invalid!("learning_rate must be positive"));
        }
        self.adam.validate()?;
        if let Some(d) = self.lr_decay {
            if d.every_epochs == 0 || !(d.factor > 0.0) {
                return Err(invalid!("lr_decay needs every_epochs >= 1 and a positive factor"));
            }
        }
        if self.top_k.contains(&0) {
            return Err(invalid!("top_k entries must be at least 1"));
        }
        for t in self.preprocess.iter().chain(&self.augment) {
            t.validate()?;
        }
        if let Some(t) = self.preprocess.iter().find(|t| !t.is_deterministic()) {
            return Err(invalid!("preprocess step `{}` is random; move it to augment", t.name()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_decay {
            Some(d) => self.learning_rate * d.factor.powi((epoch / d.every_epochs) as i32),
            None => self.learning_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Top-1 over the augmented training batches of this epoch.
    pub train_top1: f64,
    pub val_top1: f64,
    pub val_topk: BTreeMap<usize, f64>,
    pub val_loss: f64,
    pub lr: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: ParameterSet,
    pub best_epoch: usize,
    pub best_val: Metrics,
    pub history: Vec<EpochRecord>,
}

/// Scores `data` with frozen parameters; returns metrics and per-sample logits.
pub fn evaluate(
    arch: &Architecture,
    params: &ParameterSet,
    data: &Dataset,
    ks: &[usize],
) -> Result<(Metrics, Vec<Vec<f32>>)> {
    if data.is_empty() {
        return Err(invalid!("cannot evaluate an empty split"));
    }
    let classes = arch.config.num_classes;
    if let Some(k) = ks.iter().find(|k| **k > classes) {
        return Err(invalid!("top-{k} requested for {classes} classes"));
    }
    if let Some(l) = data.labels.iter().find(|l| **l >= classes) {
        return Err(invalid!("label {l} outside the model's {classes} classes"));
    }
    let logits = data
        .poses
        .iter()
        .map(|p| arch.logits(params, p))
        .collect::<Result<Vec<_>>>()?;
    Ok((metrics_from_logits(&logits, &data.labels, ks)?, logits))
}

/// Forward + backward for one batch; gradients are averaged into `params`.
/// Returns the summed loss and the number of top-1 hits.
pub fn train_batch(
    arch: &Architecture,
    params: &mut ParameterSet,
    batch: &[(PoseSequence, usize)],
) -> Result<(f64, usize)> {
    params.zero_grads();
    let mut loss_sum = 0.0;
    let mut hits = 0;
    for (pose, label) in batch {
        let grads = {
            let mut g = Graph::new();
            let out = arch.forward(&mut g, params, pose)?;
            let loss = g.cross_entropy(out.logits, &[Some(*label)], Reduction::Mean)?;
            let value = g.scalar(loss) as f64;
            if !value.is_finite() {
                return Err(Error::Numerical(format!("loss is {value}")));
            }
            loss_sum += value;
            hits += (argmax(g.value(out.logits)) == *label) as usize;
            g.backward(loss)?
        };
        params.accumulate(&grads)?;
    }
    params.scale_grads(1.0 / batch.len() as f32);
    Ok((loss_sum, hits))
}

/// Seeded sample order for one epoch, cut into batches of indices.
pub fn batch_plan(config: &TrainConfig, data: &Dataset, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    RandomSource::new(derive_seed(config.seed, &format!("shuffle/{epoch}"))).shuffle(&mut order);
    order.chunks(config.batch_size).map(<[usize]>::to_vec).collect()
}

/// Augments one clip. The random stream is derived from `(seed, epoch, id)`
/// so results do not depend on which worker builds the clip.
fn augment_one(config: &TrainConfig, data: &Dataset, epoch: usize, i: usize) -> Result<(PoseSequence, usize)> {
    let mut rng = RandomSource::new(derive_seed(config.seed, &format!("augment/{epoch}/{}", data.ids[i])));
    Ok((
        apply_pipeline(&config.augment, &data.poses[i], &mut rng)?,
        data.labels[i],
    ))
}

fn build_batch(
    config: &TrainConfig,
    data: &Dataset,
    epoch: usize,
    plan: &[usize],
) -> Result<Vec<(PoseSequence, usize)>> {
    let workers = config.workers.min(plan.len()).max(1);
    if workers == 1 || config.augment.is_empty() {
        return plan.iter().map(|&i| augment_one(config, data, epoch, i)).collect();
    }
    std::thread::scope(|s| {
        let handles: Vec<_> = plan
            .chunks(plan.len().div_ceil(workers))
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|&i| augment_one(config, data, epoch, i))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(plan.len());
        for h in handles {
            out.extend(h.join().expect("augmentation worker panicked")?);
        }
        Ok(out)
    })
}

/// Produces items `0..count` on a background thread and hands them to
/// `consume` in index order through a queue holding at most `depth` items.
/// The first error from either side stops both.
pub fn prefetch_ordered<T, P, C>(count: usize, depth: usize, produce: P, mut consume: C) -> Result<()>
where
    T: Send,
    P: Fn(usize) -> Result<T> + Sync,
    C: FnMut(T) -> Result<()>,
{
    let (tx, rx) = crossbeam_channel::bounded::<Result<T>>(depth.max(1));
    std::thread::scope(|s| {
        // Owned here so an early return drops the receiver and unblocks the producer.
        let rx = rx;
        let produce = &produce;
        s.spawn(move || {
            for i in 0..count {
                let item = produce(i);
                let failed = item.is_err();
                if tx.send(item).is_err() || failed {
                    break;
                }
            }
        });
        for item in &rx {
            consume(item?)?;
        }
        Ok(())
    })
}

fn run_epoch(
    config: &TrainConfig,
    arch: &Architecture,
    params: &mut ParameterSet,
    adam: &mut Adam,
    data: &Dataset,
    epoch: usize,
    lr: f64,
) -> Result<(f64, usize)> {
    let plan = batch_plan(config, data, epoch);
    let mut loss = 0.0;
    let mut hits = 0;
    prefetch_ordered(
        plan.len(),
        2,
        |b| build_batch(config, data, epoch, &plan[b]),
        |batch| {
            let (l, h) = train_batch(arch, params, &batch).map_err(|e| match e {
                Error::Numerical(m) => Error::Numerical(format!("epoch {epoch}: {m}")),
                other => other,
            })?;
            loss += l;
            hits += h;
            adam.step(params, lr)
        },
    )?;
    Ok((loss, hits))
}

/// Supervised training with per-epoch validation, keeping the parameters
/// with the best validation top-1 (lower validation loss breaks ties).
///
/// With `initial`, its encoder tensors are transplanted into a freshly
/// initialized model. `on_epoch` sees every record as it is produced.
pub fn train_classifier(
    config: &TrainConfig,
    arch: &Architecture,
    train: &Dataset,
    val: &Dataset,
    initial: Option<&ParameterSet>,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    if val.is_empty() {
        return Err(invalid!("validation split is empty"));
    }
    if train.is_empty() && config.max_epochs > 0 {
        return Err(invalid!("training split is empty"));
    }
    let train_ids: HashSet<&str> = train.ids.iter().map(String::as_str).collect();
    if let Some(id) = val.ids.iter().find(|id| train_ids.contains(id.as_str())) {
        return Err(invalid!("sample `{id}` is in both the training and validation splits"));
    }
    let init_seed = derive_seed(config.seed, "init");
    let mut params = match initial {
        Some(p) => transplant_encoder(p, &arch.config, init_seed, false)?,
        None => arch.init(init_seed)?,
    };
    let ks: Vec<usize> = config
        .top_k
        .iter()
        .copied()
        .filter(|k| *k <= arch.config.num_classes)
        .collect();
    let start = Instant::now();
    let (mut best_val, _) = evaluate(arch, &params, val, &ks)?;
    let mut best = params.clone();
    let mut best_epoch = 0;
    let mut history = Vec::new();
    if config.max_epochs == 0 {
        let rec = EpochRecord {
            epoch: 0,
            train_loss: f64::NAN,
            train_top1: f64::NAN,
            val_top1: best_val.top1,
            val_topk: best_val.topk.clone(),
            val_loss: best_val.loss,
            lr: config.learning_rate,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        on_epoch(&rec);
        history.push(rec);
    }
    let mut adam = Adam::new(&params, config.adam)?;
    for epoch in 1..=config.max_epochs {
        let lr = config.lr_at(epoch - 1);
        let (loss_sum, hits) = run_epoch(config, arch, &mut params, &mut adam, train, epoch, lr)?;
        let (val_metrics, _) = evaluate(arch, &params, val, &ks)?;
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_top1: hits as f64 / train.len() as f64,
            val_top1: val_metrics.top1,
            val_topk: val_metrics.topk.clone(),
            val_loss: val_metrics.loss,
            lr,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        on_epoch(&rec);
        history.push(rec);
        let better =
            val_metrics.top1 > best_val.top1 || (val_metrics.top1 == best_val.top1 && val_metrics.loss < best_val.loss);
        if best_epoch == 0 || better {
            best_val = val_metrics;
            best = params.clone();
            best_epoch = epoch;
        } else if epoch - best_epoch >= config.patience {
            break;
        }
    }
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_val,
        history,
    })
}
