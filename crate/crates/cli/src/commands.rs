use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Serialize;
use tracing::info;

use slrkit_core::corpus::{pack, read_jsonl_pose, Corpus, PackOptions, StoredSample, SubsetSpec};
use slrkit_core::infer::{benchmark_latency, Predictor};
use slrkit_core::models::{
    load_checkpoint, load_classifier, save_checkpoint, save_classifier, transplant_encoder, Architecture,
    ClassifierMeta, ModelConfig,
};
use slrkit_core::params::ParameterSet;
use slrkit_core::pose::{validate_sequence, KeypointMap, PoseSequence, SkeletonGraph};
use slrkit_core::pretrain::{
    dpc_pretrain, masked_pretrain, moco_pretrain, ClipSource, DpcModel, MaskedModel, PretrainRecord, PretrainSchedule,
};
use slrkit_core::rng::{derive_seed, RandomSource};
use slrkit_core::synth::make_synthetic_corpus;
use slrkit_core::train::{evaluate, train_classifier, Dataset, EpochRecord, Metrics};
use slrkit_service::{Endpoints, Service, ServiceConfig};

use crate::config::{ConfigError, IndexEntry, RunConfig, Strategy};
use crate::manifest::Recorder;

pub const CORPUS_DIR: &str = "corpus";
pub const MODEL_FILE: &str = "model.ckpt";
pub const ENCODER_FILE: &str = "encoder.ckpt";

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

fn section<'a, T>(s: &'a Option<T>, name: &str) -> Result<&'a T> {
    s.as_ref()
        .ok_or_else(|| config_err(format!("config section `{name}` is required")))
}

/// JSON lines, flushed per record so a failed run keeps what it logged.
struct JsonLines(BufWriter<File>);

impl JsonLines {
    fn create(path: &Path) -> Result<Self> {
        Ok(Self(BufWriter::new(
            File::create(path).with_context(|| format!("creating {}", path.display()))?,
        )))
    }

    fn write(&mut self, v: &impl Serialize) -> Result<()> {
        serde_json::to_writer(&mut self.0, v)?;
        self.0.write_all(b"\n")?;
        self.0.flush()?;
        Ok(())
    }
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

/// A serialized record without its wall-clock field, so logs hash the
/// same across reruns.
fn without_timing(v: &impl Serialize) -> Result<serde_json::Value> {
    let mut v = serde_json::to_value(v)?;
    if let Some(m) = v.as_object_mut() {
        m.remove("wall_time_s");
    }
    Ok(v)
}

fn skeleton(cfg: &RunConfig, model: &ModelConfig) -> Result<SkeletonGraph> {
    let graph = match cfg.data.as_ref().and_then(|d| d.keypoint_map.as_ref()) {
        Some(p) => KeypointMap::load(p)?.graph()?,
        None => SkeletonGraph::default_27(),
    };
    if graph.node_count() != model.keypoints {
        return Err(config_err(format!(
            "config field `model.keypoints`: {} but the keypoint map has {} points",
            model.keypoints,
            graph.node_count()
        )));
    }
    Ok(graph)
}

fn open_corpus(path: &Path, rec: &mut Recorder) -> Result<Corpus> {
    let c = Corpus::open(path).with_context(|| format!("opening corpus {}", path.display()))?;
    rec.input(path)?;
    Ok(c)
}

/// Replaces a corpus this output directory produced on an earlier run;
/// anything else in the way is an error.
fn claim_corpus_dir(rec: &Recorder, dest: &Path) -> Result<()> {
    if !dest.exists() {
        return Ok(());
    }
    if !rec.produced_before(dest) {
        bail!("{} exists and was not written by an earlier run here", dest.display());
    }
    std::fs::remove_dir_all(dest).with_context(|| format!("removing {}", dest.display()))
}

pub fn synth(cfg: &RunConfig, rec: &mut Recorder) -> Result<()> {
    let s = section(&cfg.synth, "synth")?;
    s.spec
        .validate()
        .map_err(|e| config_err(format!("config section `synth.spec`: {e}")))?;
    let corpus = make_synthetic_corpus(&s.spec)?;
    let mut options = PackOptions::new(&s.corpus_id, s.layout);
    if !s.spec.unlabeled {
        options.vocabulary = corpus.vocabulary.clone();
    }
    options.splits = corpus.splits.clone();
    let dest = rec.path(CORPUS_DIR);
    claim_corpus_dir(rec, &dest)?;
    let manifest = pack(corpus.samples, &dest, &options)?;
    info!(samples = manifest.samples.len(), path = %dest.display(), "synthetic corpus written");
    rec.output(&dest)
}

pub fn pack_corpus(cfg: &RunConfig, rec: &mut Recorder) -> Result<()> {
    let p = section(&cfg.pack, "pack")?;
    let text = std::fs::read_to_string(&p.index).with_context(|| format!("reading {}", p.index.display()))?;
    let entries: Vec<IndexEntry> = serde_path_to_error::deserialize(serde_yaml::Deserializer::from_str(&text))
        .map_err(|e| config_err(format!("pack index field `{}`: {}", e.path(), e.inner())))?;
    rec.input(&p.index)?;
    let base = p.index.parent().unwrap_or(Path::new("."));
    let vocabulary = match &p.vocabulary {
        Some(v) => v.clone(),
        None => {
            let mut v: Vec<String> = entries.iter().filter_map(|e| e.gloss.clone()).collect();
            v.sort();
            v.dedup();
            v
        }
    };
    let labeled = entries.iter().any(|e| e.gloss.is_some());
    if labeled && entries.iter().any(|e| e.gloss.is_none()) {
        bail!("either every index entry has a gloss or none does");
    }
    let mut splits: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut samples = Vec::with_capacity(entries.len());
    for e in &entries {
        let path = base.join(&e.file);
        let file = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
        let pose =
            read_jsonl_pose(BufReader::new(file), p.fps).with_context(|| format!("reading {}", path.display()))?;
        rec.input(&path)?;
        let label = match &e.gloss {
            Some(g) => Some(
                vocabulary
                    .iter()
                    .position(|v| v == g)
                    .ok_or_else(|| anyhow::anyhow!("gloss `{g}` of `{}` is not in the vocabulary", e.id))?,
            ),
            None => None,
        };
        if let Some(s) = &e.split {
            splits.entry(s.clone()).or_default().push(e.id.clone());
        }
        samples.push(StoredSample {
            id: e.id.clone(),
            pose,
            label,
            gloss: e.gloss.clone(),
            signer: e.signer.clone(),
        });
    }
    let mut options = PackOptions::new(&p.corpus_id, p.layout);
    options.vocabulary = if labeled { vocabulary } else { Vec::new() };
    options.keypoint_map_id = p.keypoint_map_id.clone();
    options.splits = splits;
    options.max_missing_fraction = p.max_missing_fraction;
    let dest = rec.path(CORPUS_DIR);
    claim_corpus_dir(rec, &dest)?;
    pack(samples, &dest, &options)?;
    rec.output(&dest)
}

#[derive(Debug, Serialize)]
struct Rejection {
    id: String,
    missing_fraction: f64,
    reason: Option<String>,
}

pub fn validate(cfg: &RunConfig, rec: &mut Recorder) -> Result<()> {
    let data = cfg.data()?;
    let limit = cfg.validate.as_ref().map_or(0.5, |v| v.max_missing_fraction);
    let corpus = open_corpus(&data.corpus, rec)?;
    corpus.manifest().validate()?;
    let mut rejected = Vec::new();
    for i in 0..corpus.len() {
        let s = corpus.get_index(i)?;
        let v = validate_sequence(&s.pose, limit);
        if !v.accepted {
            rejected.push(Rejection {
                id: s.id,
                missing_fraction: v.missing_fraction,
                reason: v.reason,
            });
        }
    }
    let path = rec.path("validation.json");
    write_json(
        &path,
        &serde_json::json!({
            "corpus_id": corpus.manifest().corpus_id,
            "samples": corpus.len(),
            "max_missing_fraction": limit,
            "rejected": rejected,
        }),
    )?;
    rec.output(&path)?;
    if !rejected.is_empty() {
        bail!("{} of {} samples failed validation", rejected.len(), corpus.len());
    }
    Ok(())
}

/// Serializable view of [`Metrics`] with glosses attached to per-class numbers.
fn metrics_json(m: &Metrics, vocabulary: &[String]) -> serde_json::Value {
    let per_class: BTreeMap<&str, Option<f64>> = vocabulary
        .iter()
        .map(String::as_str)
        .zip(m.per_class.iter().copied())
        .collect();
    serde_json::json!({
        "top1": m.top1,
        "topk": m.topk,
        "loss": m.loss,
        "count": m.count,
        "per_class": per_class,
    })
}

fn train_run(cfg: &RunConfig, rec: &mut Recorder, threads: Option<usize>, initial: Option<ParameterSet>) -> Result<()> {
    let data = cfg.data()?;
    let model = cfg.model()?.clone();
    model
        .validate()
        .map_err(|e| config_err(format!("config section `model`: {e}")))?;
    let tc = cfg.train_config(threads)?;
    let corpus = open_corpus(&data.corpus, rec)?;
    let vocabulary = corpus.manifest().vocabulary.clone();
    if vocabulary.len() != model.num_classes {
        return Err(config_err(format!(
            "config field `model.num_classes`: {} but the corpus has {} glosses",
            model.num_classes,
            vocabulary.len()
        )));
    }
    let graph = skeleton(cfg, &model)?;
    let arch = Architecture::new(model.clone(), graph.clone())?;
    let train_ids = match &data.subset {
        Some(s) => corpus.subset_by_samples_per_class(
            &data.train_split,
            &SubsetSpec {
                samples_per_class: s.samples_per_class,
                seed: derive_seed(cfg.seed, "subset"),
            },
        )?,
        None => corpus.split(&data.train_split)?.to_vec(),
    };
    let val_ids = corpus.split(&data.val_split)?.to_vec();
    let train = Dataset::load(&corpus, &train_ids, &tc.preprocess)?;
    let val = Dataset::load(&corpus, &val_ids, &tc.preprocess)?;
    info!(
        train = train.len(),
        val = val.len(),
        variant = model.variant.as_str(),
        "training"
    );

    let metrics_path = rec.path("metrics.jsonl");
    let mut log = JsonLines::create(&metrics_path)?;
    let mut log_error = None;
    let mut on_epoch = |r: &EpochRecord| {
        info!(
            epoch = r.epoch,
            train_loss = r.train_loss,
            val_top1 = r.val_top1,
            seconds = r.wall_time_s,
            "epoch"
        );
        if let Err(e) = without_timing(r).and_then(|v| log.write(&v)) {
            log_error.get_or_insert(e);
        }
    };
    let outcome = train_classifier(&tc, &arch, &train, &val, initial.as_ref(), &mut on_epoch);
    rec.output(&metrics_path)?;
    let outcome = outcome?;
    if let Some(e) = log_error {
        return Err(e);
    }

    let ckpt = rec.path(MODEL_FILE);
    let meta = ClassifierMeta {
        model,
        vocabulary: vocabulary.clone(),
        preprocess: tc.preprocess.clone(),
        edges: graph.edges().to_vec(),
    };
    save_classifier(&ckpt, &outcome.best, &meta)?;
    rec.output(&ckpt)?;
    let (val_metrics, _) = evaluate(&arch, &outcome.best, &val, &tc.top_k)?;
    let summary = rec.path("summary.json");
    write_json(
        &summary,
        &serde_json::json!({
            "best_epoch": outcome.best_epoch,
            "epochs_run": outcome.history.last().map_or(0, |r| r.epoch),
            "train_samples": train.len(),
            "train_ids": train.ids,
            "val": metrics_json(&val_metrics, &vocabulary),
        }),
    )?;
    rec.output(&summary)
}

pub fn train(cfg: &RunConfig, rec: &mut Recorder, threads: Option<usize>) -> Result<()> {
    train_run(cfg, rec, threads, None)
}

pub fn finetune(cfg: &RunConfig, rec: &mut Recorder, threads: Option<usize>) -> Result<()> {
    let f = section(&cfg.finetune, "finetune")?;
    let model = cfg.model()?;
    let (encoder, _) = load_checkpoint(&f.init_from, None, false)
        .with_context(|| format!("loading encoder {}", f.init_from.display()))?;
    rec.input(&f.init_from)?;
    let initial = if f.allow_mismatch {
        let seed = derive_seed(cfg.train_config(threads)?.seed, "init");
        transplant_encoder(&encoder, model, seed, true)?
    } else {
        encoder
    };
    train_run(cfg, rec, threads, Some(initial))
}

/// Clips drawn from a fixed id list of a corpus.
struct SplitSource<'a> {
    corpus: &'a Corpus,
    ids: Vec<String>,
}

impl ClipSource for SplitSource<'_> {
    fn sample_clip(
        &self,
        rng: &mut RandomSource,
        min_len: usize,
        max_len: usize,
    ) -> slrkit_core::error::Result<PoseSequence> {
        Ok(self
            .corpus
            .sample_pretraining_clip(rng, min_len, max_len, Some(&self.ids))?
            .pose)
    }
}

pub fn pretrain(cfg: &RunConfig, rec: &mut Recorder) -> Result<()> {
    let p = section(&cfg.pretrain, "pretrain")?;
    let model = cfg.model()?.clone();
    model
        .validate()
        .map_err(|e| config_err(format!("config section `model`: {e}")))?;
    let extra = [
        (Strategy::Dpc, p.dpc.is_some(), "dpc"),
        (Strategy::Moco, p.moco.is_some(), "moco"),
        (Strategy::Masked, p.masked.is_some(), "masked"),
    ];
    if let Some((_, _, name)) = extra.iter().find(|(s, given, _)| *given && *s != p.strategy) {
        return Err(config_err(format!(
            "config field `pretrain.{name}`: does not apply to strategy `{}`",
            p.strategy.as_str()
        )));
    }
    let schedule = PretrainSchedule {
        steps: p.steps,
        batch_size: p.batch_size,
        learning_rate: p.learning_rate,
        seed: derive_seed(cfg.seed, "pretrain"),
        adam: p.adam,
        min_clip: p.min_clip,
        max_clip: p.max_clip,
        preprocess: cfg.transforms.preprocess.clone(),
    };
    schedule
        .validate()
        .map_err(|e| config_err(format!("config section `pretrain`: {e}")))?;
    let corpus_path = match (&p.corpus, &cfg.data) {
        (Some(c), _) => c.clone(),
        (None, Some(d)) => d.corpus.clone(),
        (None, None) => {
            return Err(config_err(
                "config field `pretrain.corpus` or section `data` is required",
            ))
        }
    };
    let corpus = open_corpus(&corpus_path, rec)?;
    let split_source;
    let source: &dyn ClipSource = match &p.split {
        Some(s) => {
            split_source = SplitSource {
                corpus: &corpus,
                ids: corpus.split(s)?.to_vec(),
            };
            &split_source
        }
        None => &corpus,
    };
    let graph = skeleton(cfg, &model)?;

    let log_path = rec.path("pretrain_log.jsonl");
    let mut log = JsonLines::create(&log_path)?;
    let mut log_error = None;
    let every = p.log_every.max(1);
    let mut on_step = |r: &PretrainRecord| {
        if r.step.is_multiple_of(every) || r.step + 1 == p.steps {
            info!(step = r.step, loss = r.loss, accuracy = r.accuracy, "pretrain");
            if let Err(e) = without_timing(r).and_then(|v| log.write(&v)) {
                log_error.get_or_insert(e);
            }
        }
    };
    let outcome = match p.strategy {
        Strategy::Dpc => {
            let m = DpcModel::new(p.dpc.unwrap_or_default(), model.clone(), graph)?;
            dpc_pretrain(source, &m, &schedule, &mut on_step)
        }
        Strategy::Moco => moco_pretrain(
            source,
            &model,
            &graph,
            &p.moco.clone().unwrap_or_default(),
            &schedule,
            &mut on_step,
        ),
        Strategy::Masked => {
            let m = MaskedModel::new(p.masked.unwrap_or_default(), model.clone())?;
            masked_pretrain(source, &m, &schedule, &mut on_step)
        }
    };
    rec.output(&log_path)?;
    let outcome = outcome?;
    if let Some(e) = log_error {
        return Err(e);
    }
    let ckpt = rec.path(ENCODER_FILE);
    save_checkpoint(
        &ckpt,
        &outcome.encoder,
        &serde_json::json!({ "encoder": { "strategy": p.strategy, "model": model } }),
    )?;
    rec.output(&ckpt)
}

pub fn evaluate_cmd(cfg: &RunConfig, rec: &mut Recorder) -> Result<()> {
    let e = section(&cfg.evaluate, "evaluate")?;
    let data = cfg.data()?;
    let (params, meta) =
        load_classifier(&e.checkpoint).with_context(|| format!("loading {}", e.checkpoint.display()))?;
    rec.input(&e.checkpoint)?;
    let corpus = open_corpus(&data.corpus, rec)?;
    if corpus.manifest().vocabulary != meta.vocabulary {
        bail!("the corpus vocabulary differs from the checkpoint's");
    }
    let split = e.split.clone().unwrap_or_else(|| data.test_split.clone());
    let ds = Dataset::load(&corpus, corpus.split(&split)?, &meta.preprocess)?;
    let arch = meta.architecture()?;
    let (m, _) = evaluate(&arch, &params, &ds, &e.top_k)?;
    info!(split = %split, top1 = m.top1, "evaluated");
    let path = rec.path("evaluation.json");
    write_json(
        &path,
        &serde_json::json!({ "split": split, "metrics": metrics_json(&m, &meta.vocabulary) }),
    )?;
    rec.output(&path)
}

pub fn benchmark(cfg: &RunConfig, rec: &mut Recorder) -> Result<()> {
    let b = section(&cfg.benchmark, "benchmark")?;
    let data = cfg.data()?;
    let predictor = Predictor::load(&b.checkpoint).with_context(|| format!("loading {}", b.checkpoint.display()))?;
    rec.input(&b.checkpoint)?;
    let corpus = open_corpus(&data.corpus, rec)?;
    let split = b.split.clone().unwrap_or_else(|| data.test_split.clone());
    let mut ids = corpus.split(&split)?.to_vec();
    if let Some(n) = b.limit {
        ids.truncate(n);
    }
    let clips = ids
        .iter()
        .map(|id| corpus.get(id).map(|s| s.pose))
        .collect::<slrkit_core::error::Result<Vec<_>>>()?;
    let report = benchmark_latency(&predictor, &clips, b.repetitions)?;
    info!(mean_ms = report.mean_ms, p95_ms = report.p95_ms, "latency");
    let path = rec.path("latency.json");
    write_json(&path, &report)?;
    rec.output(&path)
}

fn runtime(threads: Option<usize>) -> Result<tokio::runtime::Runtime> {
    let mut b = tokio::runtime::Builder::new_multi_thread();
    b.enable_all();
    if let Some(n) = threads {
        b.worker_threads(n.max(1)).max_blocking_threads(n.max(1) * 64);
    }
    Ok(b.build()?)
}

async fn shutdown_signal() {
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        let mut term = signal(SignalKind::terminate()).expect("installing SIGTERM handler");
        tokio::select! {
            _ = tokio::signal::ctrl_c() => {}
            _ = term.recv() => {}
        }
    }
    #[cfg(not(unix))]
    let _ = tokio::signal::ctrl_c().await;
}

pub fn serve(cfg: &RunConfig, rec: &mut Recorder, threads: Option<usize>) -> Result<()> {
    let s = section(&cfg.serve, "serve")?;
    if !s.stdio && s.listen.is_none() && s.http.is_none() {
        return Err(config_err("config section `serve`: set `listen`, `http` or `stdio`"));
    }
    s.window
        .validate()
        .map_err(|e| config_err(format!("config field `serve.window`: {e}")))?;
    let service = Service::load(
        &s.checkpoint,
        ServiceConfig {
            window: s.window,
            top_k: s.top_k,
        },
    )
    .with_context(|| format!("refusing to start: cannot serve {}", s.checkpoint.display()))?;
    rec.input(&s.checkpoint)?;
    let rt = runtime(threads)?;
    if s.stdio {
        let stats = rt.block_on(slrkit_service::serve_stdio(service))?;
        info!(?stats, "stdio session finished");
        return Ok(());
    }
    let endpoints = Endpoints {
        stream: s.listen,
        http: s.http,
    };
    let bound_path = rec.path("endpoints.json");
    let mut bound_result = Ok(());
    rt.block_on(async {
        let stopper = service.clone();
        tokio::spawn(async move {
            shutdown_signal().await;
            info!("shutting down, draining open sessions");
            stopper.shutdown();
        });
        slrkit_service::serve(service, endpoints, |b| {
            info!(stream = ?b.stream, http = ?b.http, "listening");
            bound_result = write_json(&bound_path, &serde_json::json!({ "stream": b.stream, "http": b.http }));
        })
        .await
    })?;
    bound_result?;
    rec.output(&bound_path)
}

pub fn stream(cfg: &RunConfig, rec: &mut Recorder, threads: Option<usize>) -> Result<()> {
    let s = section(&cfg.stream, "stream")?;
    let data = cfg.data()?;
    let corpus = open_corpus(&data.corpus, rec)?;
    let mut ids = corpus.split(&s.split)?.to_vec();
    if let Some(n) = s.limit {
        ids.truncate(n);
    }
    let rt = runtime(threads)?;
    let path = rec.path("predictions.jsonl");
    let mut log = JsonLines::create(&path)?;
    let (mut windows, mut hits, mut dropped) = (0u64, 0u64, 0u64);
    for id in &ids {
        let sample = corpus.get(id)?;
        let pose = &sample.pose;
        let replay = rt
            .block_on(slrkit_client::replay(
                s.connect.as_str(),
                pose,
                pose.frames(),
                pose.fps(),
                s.paced,
            ))
            .with_context(|| format!("streaming {id} to {}", s.connect))?;
        if let Some(e) = replay.error() {
            bail!("server rejected {id}: {e}");
        }
        for (_, window_id, top_k) in replay.predictions() {
            let hit = sample
                .gloss
                .as_deref()
                .is_some_and(|g| top_k.first().is_some_and(|t| t.0 == g));
            hits += hit as u64;
            log.write(&serde_json::json!({ "id": id, "window_id": window_id, "top_k": top_k, "hit": hit }))?;
        }
        let (w, _, d) = replay.summary().unwrap_or_default();
        windows += w;
        dropped += d;
    }
    rec.output(&path)?;
    let summary = rec.path("stream_summary.json");
    write_json(
        &summary,
        &serde_json::json!({
            "clips": ids.len(),
            "windows": windows,
            "dropped": dropped,
            "window_top1": if windows > dropped { hits as f64 / (windows - dropped) as f64 } else { 0.0 },
        }),
    )?;
    info!(windows, dropped, "stream finished");
    rec.output(&summary)
}
