//! Sliding-window inference over a live frame stream, plus the serial
//! latency benchmark.

use std::collections::VecDeque;
use std::path::Path;
use std::sync::{Condvar, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::models::{load_classifier, Architecture, ClassifierMeta};
use crate::params::ParameterSet;
use crate::pose::{PoseSequence, COORDS};
use crate::rng::RandomSource;
use crate::train::apply_pipeline;
use crate::transforms::TransformConfig;

pub const PROTOCOL_VERSION: u32 = 1;
pub const WARMUP_RUNS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowConfig {
    #[serde(default = "default_window")]
    pub window_len: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default = "default_depth")]
    pub queue_depth: usize,
}

fn default_window() -> usize {
    60
}
fn default_stride() -> usize {
    30
}
fn default_depth() -> usize {
    4
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            window_len: default_window(),
            stride: default_stride(),
            queue_depth: default_depth(),
        }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_len == 0 || self.stride == 0 || self.queue_depth == 0 {
            return Err(invalid!("window_len, stride and queue_depth must be at least 1"));
        }
        Ok(())
    }
}

/// Messages sent by a producer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientMessage {
    Hello {
        k: usize,
        fps: f32,
        format_version: u32,
    },
    Frame {
        t: u64,
        kps: Vec<[f32; 2]>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        valid: Option<Vec<bool>>,
    },
}

/// Messages sent back to a producer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ServerMessage {
    Prediction {
        window_id: u64,
        top_k: Vec<(String, f64)>,
        latency_ms: f64,
    },
    /// Sent once the input ends and every queued window has been answered.
    Summary {
        windows: u64,
        predicted: u64,
        dropped: u64,
    },
    Error {
        message: String,
    },
}

/// A window cut from the stream.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub id: u64,
    /// `t` of the first frame in the window.
    pub start_t: u64,
    pub pose: PoseSequence,
}

/// Turns frames into overlapping windows: the first once `window_len`
/// frames have arrived, then one every `stride` frames.
#[derive(Debug)]
pub struct WindowAssembler {
    config: WindowConfig,
    k: usize,
    fps: f32,
    frames: VecDeque<(u64, Vec<f32>, Vec<bool>)>,
    last_t: Option<u64>,
    until_next: usize,
    next_id: u64,
}

impl WindowAssembler {
    pub fn new(config: WindowConfig, k: usize, fps: f32) -> Result<Self> {
        config.validate()?;
        if k == 0 || !(fps > 0.0 && fps.is_finite()) {
            return Err(invalid!("handshake needs k >= 1 and a positive fps"));
        }
        Ok(Self {
            config,
            k,
            fps,
            frames: VecDeque::with_capacity(config.window_len),
            last_t: None,
            until_next: config.window_len,
            next_id: 0,
        })
    }

    pub fn keypoints(&self) -> usize {
        self.k
    }

    pub fn windows_emitted(&self) -> u64 {
        self.next_id
    }

    /// Adds one frame; returns a window when one completes.
    pub fn push(&mut self, t: u64, kps: &[[f32; 2]], valid: Option<&[bool]>) -> Result<Option<Window>> {
        if let Some(last) = self.last_t {
            if t <= last {
                return Err(Error::Protocol(format!("frame t={t} does not follow t={last}")));
            }
        }
        if kps.len() != self.k {
            return Err(Error::Protocol(format!(
                "frame has {} keypoints, session declared {}",
                kps.len(),
                self.k
            )));
        }
        let valid = match valid {
            Some(v) if v.len() != self.k => {
                return Err(Error::Protocol(format!(
                    "frame has {} validity flags for {} keypoints",
                    v.len(),
                    self.k
                )))
            }
            Some(v) => v.to_vec(),
            None => vec![true; self.k],
        };
        if kps.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::Protocol(format!("frame t={t} has non-finite coordinates")));
        }
        self.last_t = Some(t);
        if self.frames.len() == self.config.window_len {
            self.frames.pop_front();
        }
        self.frames
            .push_back((t, kps.iter().flatten().copied().collect(), valid));
        self.until_next -= 1;
        if self.until_next > 0 {
            return Ok(None);
        }
        self.until_next = self.config.stride;
        let n = self.frames.len();
        let mut data = Vec::with_capacity(n * self.k * COORDS);
        let mut flags = Vec::with_capacity(n * self.k);
        for (_, d, v) in &self.frames {
            data.extend_from_slice(d);
            flags.extend_from_slice(v);
        }
        let window = Window {
            id: self.next_id,
            start_t: self.frames[0].0,
            pose: PoseSequence::new(n, self.k, data, flags, self.fps)?,
        };
        self.next_id += 1;
        Ok(Some(window))
    }
}

/// The windows the assembler would cut from a stored clip, in order.
pub fn offline_windows(pose: &PoseSequence, config: &WindowConfig) -> Result<Vec<PoseSequence>> {
    config.validate()?;
    let mut out = Vec::new();
    let mut start = 0;
    while start + config.window_len <= pose.frames() {
        out.push(pose.slice_frames(start, config.window_len)?);
        start += config.stride;
    }
    Ok(out)
}

/// Bounded FIFO where a push into a full queue evicts the oldest item.
#[derive(Debug)]
pub struct DropOldestQueue<T> {
    capacity: usize,
    state: Mutex<QueueState<T>>,
    ready: Condvar,
}

#[derive(Debug)]
struct QueueState<T> {
    items: VecDeque<T>,
    closed: bool,
    dropped: u64,
}

impl<T> DropOldestQueue<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "queue capacity must be positive");
        Self {
            capacity,
            state: Mutex::new(QueueState {
                items: VecDeque::with_capacity(capacity),
                closed: false,
                dropped: 0,
            }),
            ready: Condvar::new(),
        }
    }

    /// Enqueues `item`; returns the evicted item when the queue was full.
    pub fn push(&self, item: T) -> Option<T> {
        let mut s = self.state.lock().unwrap();
        let evicted = if s.items.len() == self.capacity {
            s.dropped += 1;
            s.items.pop_front()
        } else {
            None
        };
        s.items.push_back(item);
        drop(s);
        self.ready.notify_one();
        evicted
    }

    /// Blocks until an item is available; `None` once closed and drained.
    pub fn pop(&self) -> Option<T> {
        let mut s = self.state.lock().unwrap();
        loop {
            if let Some(item) = s.items.pop_front() {
                return Some(item);
            }
            if s.closed {
                return None;
            }
            s = self.ready.wait(s).unwrap();
        }
    }

    /// No more pushes; consumers drain what is left.
    pub fn close(&self) {
        self.state.lock().unwrap().closed = true;
        self.ready.notify_all();
    }

    pub fn dropped(&self) -> u64 {
        self.state.lock().unwrap().dropped
    }

    pub fn len(&self) -> usize {
        self.state.lock().unwrap().items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A frozen classifier ready to score windows.
#[derive(Debug, Clone)]
pub struct Predictor {
    pub arch: Architecture,
    pub params: ParameterSet,
    pub vocabulary: Vec<String>,
    pub preprocess: Vec<TransformConfig>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// `(class index, probability)`, best first.
    pub top_k: Vec<(usize, f64)>,
    pub logits: Vec<f32>,
    pub latency_ms: f64,
}

impl Predictor {
    pub fn new(
        arch: Architecture,
        params: ParameterSet,
        vocabulary: Vec<String>,
        preprocess: Vec<TransformConfig>,
    ) -> Result<Self> {
        if vocabulary.len() != arch.config.num_classes {
            return Err(invalid!(
                "{} glosses for a {}-class model",
                vocabulary.len(),
                arch.config.num_classes
            ));
        }
        if let Some(t) = preprocess.iter().find(|t| !t.is_deterministic()) {
            return Err(invalid!(
                "inference preprocessing must be deterministic, `{}` is random",
                t.name()
            ));
        }
        Ok(Self {
            arch,
            params,
            vocabulary,
            preprocess,
        })
    }

    pub fn from_meta(params: ParameterSet, meta: ClassifierMeta) -> Result<Self> {
        let arch = meta.architecture()?;
        Self::new(arch, params, meta.vocabulary, meta.preprocess)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (params, meta) = load_classifier(path)?;
        Self::from_meta(params, meta)
    }

    pub fn num_classes(&self) -> usize {
        self.vocabulary.len()
    }

    /// Normalizes and classifies one window. `latency_ms` covers
    /// normalization and the forward pass only.
    pub fn predict(&self, pose: &PoseSequence, k: usize) -> Result<Prediction> {
        if k == 0 || k > self.num_classes() {
            return Err(invalid!("top-{k} requested from a {}-class model", self.num_classes()));
        }
        if pose.keypoints() != self.arch.config.keypoints {
            return Err(Error::Shape(format!(
                "window has {} keypoints, model expects {}",
                pose.keypoints(),
                self.arch.config.keypoints
            )));
        }
        let start = Instant::now();
        let normalized = apply_pipeline(&self.preprocess, pose, &mut RandomSource::new(0))?;
        let logits = self.arch.logits(&self.params, &normalized)?;
        let latency_ms = start.elapsed().as_secs_f64() * 1e3;
        Ok(Prediction {
            top_k: top_k(&logits, k),
            logits,
            latency_ms,
        })
    }

    pub fn message(&self, window_id: u64, p: &Prediction) -> ServerMessage {
        ServerMessage::Prediction {
            window_id,
            top_k: p.top_k.iter().map(|(c, s)| (self.vocabulary[*c].clone(), *s)).collect(),
            latency_ms: p.latency_ms,
        }
    }
}

/// Softmax probabilities of the `k` best classes, descending, lower index first on ties.
pub fn top_k(logits: &[f32], k: usize) -> Vec<(usize, f64)> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exp: Vec<f64> = logits.iter().map(|x| (*x as f64 - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|a, b| logits[*b].total_cmp(&logits[*a]).then(a.cmp(b)));
    order.into_iter().take(k).map(|c| (c, exp[c] / sum)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub model: String,
    pub host: String,
    pub warmup_runs: usize,
    pub repetitions: usize,
    pub latencies_ms: Vec<f64>,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
}

/// Nearest-rank percentile of sorted values.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

pub fn host_descriptor() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".into());
    let threads = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    format!(
        "{} {} / {cpu} / {threads} threads",
        std::env::consts::OS,
        std::env::consts::ARCH
    )
}

/// Serial batch-1 timing: `WARMUP_RUNS` discarded runs, then every clip
/// `repetitions` times in order. Each entry is normalization plus forward.
pub fn benchmark_latency(predictor: &Predictor, clips: &[PoseSequence], repetitions: usize) -> Result<LatencyReport> {
    if clips.is_empty() {
        return Err(invalid!("cannot benchmark an empty split"));
    }
    if repetitions == 0 {
        return Err(invalid!("repetitions must be at least 1"));
    }
    for i in 0..WARMUP_RUNS {
        predictor.predict(&clips[i % clips.len()], 1)?;
    }
    let mut latencies = Vec::with_capacity(clips.len() * repetitions);
    for _ in 0..repetitions {
        for clip in clips {
            latencies.push(predictor.predict(clip, 1)?.latency_ms);
        }
    }
    let mut sorted = latencies.clone();
    sorted.sort_by(f64::total_cmp);
    let mean = latencies.iter().sum::<f64>() / latencies.len() as f64;
    Ok(LatencyReport {
        model: format!(
            "{}:{}",
            predictor.arch.config.variant.as_str(),
            predictor.params.config_hash()
        ),
        host: host_descriptor(),
        warmup_runs: WARMUP_RUNS,
        repetitions,
        mean_ms: mean.clamp(sorted[0], sorted[sorted.len() - 1]),
        p50_ms: percentile(&sorted, 50.0),
        p95_ms: percentile(&sorted, 95.0),
        min_ms: sorted[0],
        max_ms: sorted[sorted.len() - 1],
        latencies_ms: latencies,
    })
}

/// Counters for one streaming session.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionStats {
    pub windows: u64,
    pub predicted: u64,
    pub dropped: u64,
}

/// Runs one session over blocking line I/O: a reader stage assembles
/// windows into a drop-oldest queue, and a predictor stage answers them.
/// Returns after the input ends and every queued window is answered.
pub fn run_session<R, W>(
    predictor: &Predictor,
    config: WindowConfig,
    k: usize,
    input: R,
    output: W,
) -> Result<SessionStats>
where
    R: std::io::BufRead,
    W: std::io::Write + Send,
{
    config.validate()?;
    if k == 0 || k > predictor.num_classes() {
        return Err(invalid!(
            "top-{k} requested from a {}-class model",
            predictor.num_classes()
        ));
    }
    let queue = DropOldestQueue::<Window>::new(config.queue_depth);
    let output = Mutex::new(output);
    let send = |m: &ServerMessage| -> Result<()> {
        let mut w = output.lock().unwrap();
        let line = serde_json::to_string(m)?;
        writeln!(w, "{line}")
            .and_then(|_| w.flush())
            .map_err(|e| Error::io("<session output>", e))
    };
    std::thread::scope(|s| {
        let consumer = s.spawn(|| -> Result<u64> {
            let mut predicted = 0;
            while let Some(w) = queue.pop() {
                let p = predictor.predict(&w.pose, k)?;
                send(&predictor.message(w.id, &p))?;
                predicted += 1;
            }
            Ok(predicted)
        });
        let produced = read_frames(predictor, config, input, &queue);
        queue.close();
        let predicted = consumer.join().expect("predictor stage panicked");
        let stats = match (produced, predicted) {
            (Ok(windows), Ok(predicted)) => SessionStats {
                windows,
                predicted,
                dropped: queue.dropped(),
            },
            (Err(e), _) | (_, Err(e)) => {
                let _ = send(&ServerMessage::Error { message: e.to_string() });
                return Err(e);
            }
        };
        send(&ServerMessage::Summary {
            windows: stats.windows,
            predicted: stats.predicted,
            dropped: stats.dropped,
        })?;
        Ok(stats)
    })
}

fn read_frames<R: std::io::BufRead>(
    predictor: &Predictor,
    config: WindowConfig,
    input: R,
    queue: &DropOldestQueue<Window>,
) -> Result<u64> {
    let mut session = SessionParser::new(config, predictor.arch.config.keypoints);
    for line in input.lines() {
        let line = line.map_err(|e| Error::io("<session input>", e))?;
        if let Some(w) = session.feed(&line)? {
            queue.push(w);
        }
    }
    Ok(session.windows())
}

/// Per-session protocol state: handshake first, then frames.
#[derive(Debug)]
pub struct SessionParser {
    config: WindowConfig,
    model_k: usize,
    assembler: Option<WindowAssembler>,
}

impl SessionParser {
    pub fn new(config: WindowConfig, model_k: usize) -> Self {
        Self {
            config,
            model_k,
            assembler: None,
        }
    }

    pub fn windows(&self) -> u64 {
        self.assembler.as_ref().map_or(0, WindowAssembler::windows_emitted)
    }

    /// Handles one input line; blank lines are ignored.
    pub fn feed(&mut self, line: &str) -> Result<Option<Window>> {
        if line.trim().is_empty() {
            return Ok(None);
        }
        let msg: ClientMessage =
            serde_json::from_str(line).map_err(|e| Error::Protocol(format!("malformed message: {e}")))?;
        match (msg, &mut self.assembler) {
            (ClientMessage::Hello { k, fps, format_version }, None) => {
                if format_version != PROTOCOL_VERSION {
                    return Err(Error::Protocol(format!("unsupported format_version {format_version}")));
                }
                if k != self.model_k {
                    return Err(Error::Protocol(format!(
                        "session declares k={k}, model expects {}",
                        self.model_k
                    )));
                }
                self.assembler = Some(WindowAssembler::new(self.config, k, fps)?);
                Ok(None)
            }
            (ClientMessage::Hello { .. }, Some(_)) => Err(Error::Protocol("duplicate hello".into())),
            (ClientMessage::Frame { .. }, None) => Err(Error::Protocol("frame before hello".into())),
            (ClientMessage::Frame { t, kps, valid }, Some(a)) => a.push(t, &kps, valid.as_deref()),
        }
    }
}

/// Protocol lines replaying a stored clip: a hello, then one frame per row.
pub fn replay_lines(pose: &PoseSequence, first_t: u64) -> Result<Vec<String>> {
    let mut lines = Vec::with_capacity(pose.frames() + 1);
    lines.push(serde_json::to_string(&ClientMessage::Hello {
        k: pose.keypoints(),
        fps: pose.fps(),
        format_version: PROTOCOL_VERSION,
    })?);
    for t in 0..pose.frames() {
        let kps = (0..pose.keypoints()).map(|j| pose.point(t, j)).collect();
        let valid = (0..pose.keypoints()).map(|j| pose.is_valid(t, j)).collect::<Vec<_>>();
        let all_valid = valid.iter().all(|v| *v);
        lines.push(serde_json::to_string(&ClientMessage::Frame {
            t: first_t + t as u64,
            kps,
            valid: (!all_valid).then_some(valid),
        })?);
    }
    Ok(lines)
}
