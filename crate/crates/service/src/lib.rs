//! Streaming recognition service: line-JSON sessions over TCP or stdio,
//! plus a small HTTP surface for health, model info, one-shot prediction
//! and counters.

use std::net::SocketAddr;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::io::{AsyncBufReadExt, AsyncRead, AsyncWrite, AsyncWriteExt, BufReader};
use tokio::net::TcpListener;
use tokio::sync::mpsc;
use tokio_util::sync::CancellationToken;
use tokio_util::task::TaskTracker;
use tracing::{debug, info, warn};

use slrkit_core::error::Error as CoreError;
use slrkit_core::infer::{
    DropOldestQueue, Predictor, ServerMessage, SessionParser, SessionStats, Window, WindowConfig,
};
use slrkit_core::pose::PoseSequence;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("predictor stage failed: {0}")]
    Worker(String),
}

pub type Result<T, E = ServiceError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    #[serde(default)]
    pub window: WindowConfig,
    /// Entries per prediction.
    #[serde(default = "default_top_k")]
    pub top_k: usize,
}

fn default_top_k() -> usize {
    5
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            window: WindowConfig::default(),
            top_k: default_top_k(),
        }
    }
}

#[derive(Debug, Default)]
struct Counters {
    sessions_started: AtomicU64,
    sessions_active: AtomicU64,
    session_errors: AtomicU64,
    windows: AtomicU64,
    predictions: AtomicU64,
    dropped: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsSnapshot {
    pub sessions_started: u64,
    pub sessions_active: u64,
    pub session_errors: u64,
    pub windows: u64,
    pub predictions: u64,
    pub dropped: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub variant: String,
    pub config_hash: String,
    pub num_classes: usize,
    pub keypoints: usize,
    pub vocabulary: Vec<String>,
    pub window: WindowConfig,
    pub top_k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictRequest {
    /// `F` frames of `K` points each.
    pub frames: Vec<Vec<[f32; 2]>>,
    #[serde(default)]
    pub valid: Option<Vec<Vec<bool>>>,
    #[serde(default = "default_fps")]
    pub fps: f32,
    #[serde(default)]
    pub k: Option<usize>,
}

fn default_fps() -> f32 {
    30.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub top_k: Vec<(String, f64)>,
    pub latency_ms: f64,
}

/// Shared state for every session: the frozen model, the window policy and
/// the shutdown signal.
#[derive(Debug)]
pub struct Service {
    predictor: Arc<Predictor>,
    config: ServiceConfig,
    counters: Counters,
    shutdown: CancellationToken,
    sessions: TaskTracker,
}

impl Service {
    pub fn new(predictor: Predictor, config: ServiceConfig) -> Result<Arc<Self>> {
        config.window.validate()?;
        if config.top_k == 0 || config.top_k > predictor.num_classes() {
            return Err(CoreError::InvalidArgument(format!(
                "top_k {} outside 1..={}",
                config.top_k,
                predictor.num_classes()
            ))
            .into());
        }
        Ok(Arc::new(Self {
            predictor: Arc::new(predictor),
            config,
            counters: Counters::default(),
            shutdown: CancellationToken::new(),
            sessions: TaskTracker::new(),
        }))
    }

    /// Loads a classifier checkpoint; any failure prevents the service from starting.
    pub fn load(checkpoint: &Path, config: ServiceConfig) -> Result<Arc<Self>> {
        Self::new(Predictor::load(checkpoint)?, config)
    }

    pub fn predictor(&self) -> &Predictor {
        &self.predictor
    }

    pub fn config(&self) -> ServiceConfig {
        self.config
    }

    pub fn model_info(&self) -> ModelInfo {
        let p = &self.predictor;
        ModelInfo {
            variant: p.arch.config.variant.as_str().to_string(),
            config_hash: p.params.config_hash().to_string(),
            num_classes: p.num_classes(),
            keypoints: p.arch.config.keypoints,
            vocabulary: p.vocabulary.clone(),
            window: self.config.window,
            top_k: self.config.top_k,
        }
    }

    pub fn stats(&self) -> StatsSnapshot {
        let c = &self.counters;
        StatsSnapshot {
            sessions_started: c.sessions_started.load(Ordering::Relaxed),
            sessions_active: c.sessions_active.load(Ordering::Relaxed),
            session_errors: c.session_errors.load(Ordering::Relaxed),
            windows: c.windows.load(Ordering::Relaxed),
            predictions: c.predictions.load(Ordering::Relaxed),
            dropped: c.dropped.load(Ordering::Relaxed),
        }
    }

    /// Stops accepting; open sessions stop reading, answer their queued
    /// windows and close.
    pub fn shutdown(&self) {
        self.shutdown.cancel();
    }

    pub fn is_shutting_down(&self) -> bool {
        self.shutdown.is_cancelled()
    }

    /// Resolves once shutdown was requested and every session has finished.
    pub async fn drained(&self) {
        self.shutdown.cancelled().await;
        self.sessions.close();
        self.sessions.wait().await;
    }

    /// Accepts TCP sessions until shutdown, then waits for open sessions to drain.
    pub async fn serve_tcp(self: Arc<Self>, listener: TcpListener) -> Result<()> {
        info!(addr = ?listener.local_addr().ok(), "accepting stream sessions");
        loop {
            tokio::select! {
                _ = self.shutdown.cancelled() => break,
                accepted = listener.accept() => {
                    let (stream, peer) = match accepted {
                        Ok(a) => a,
                        Err(e) => {
                            warn!("accept failed: {e}");
                            continue;
                        }
                    };
                    let _ = stream.set_nodelay(true);
                    let service = self.clone();
                    self.sessions.spawn(async move {
                        let (r, w) = stream.into_split();
                        match service.session(r, w).await {
                            Ok(s) => debug!(%peer, ?s, "session closed"),
                            Err(e) => debug!(%peer, "session failed: {e}"),
                        }
                    });
                }
            }
        }
        self.drained().await;
        Ok(())
    }

    /// Serves the HTTP surface until shutdown.
    pub async fn serve_http(self: Arc<Self>, listener: TcpListener) -> Result<()> {
        info!(addr = ?listener.local_addr().ok(), "serving http");
        let token = self.shutdown.clone();
        axum::serve(listener, router(self))
            .with_graceful_shutdown(async move { token.cancelled().await })
            .await?;
        Ok(())
    }

    /// Runs one session: the reader assembles windows into a drop-oldest
    /// queue while a blocking predictor stage answers them in order.
    pub async fn session<R, W>(self: &Arc<Self>, reader: R, mut writer: W) -> Result<SessionStats>
    where
        R: AsyncRead + Unpin,
        W: AsyncWrite + Unpin,
    {
        let c = &self.counters;
        c.sessions_started.fetch_add(1, Ordering::Relaxed);
        c.sessions_active.fetch_add(1, Ordering::Relaxed);
        let result = self.run_session(reader, &mut writer).await;
        c.sessions_active.fetch_sub(1, Ordering::Relaxed);
        if let Err(e) = &result {
            c.session_errors.fetch_add(1, Ordering::Relaxed);
            let _ = write_message(&mut writer, &ServerMessage::Error { message: e.to_string() }).await;
        }
        let _ = writer.shutdown().await;
        result
    }

    async fn run_session<R, W>(self: &Arc<Self>, reader: R, writer: &mut W) -> Result<SessionStats>
    where
        R: AsyncRead + Unpin,
        W: AsyncWrite + Unpin,
    {
        let queue = Arc::new(DropOldestQueue::<Window>::new(self.config.window.queue_depth));
        let (tx, mut rx) = mpsc::unbounded_channel::<ServerMessage>();
        let worker = {
            let queue = queue.clone();
            let service = self.clone();
            tokio::task::spawn_blocking(move || -> Result<u64, CoreError> {
                let mut predicted = 0;
                while let Some(w) = queue.pop() {
                    let p = service.predictor.predict(&w.pose, service.config.top_k)?;
                    service.counters.predictions.fetch_add(1, Ordering::Relaxed);
                    predicted += 1;
                    if tx.send(service.predictor.message(w.id, &p)).is_err() {
                        break;
                    }
                }
                Ok(predicted)
            })
        };

        let mut parser = SessionParser::new(self.config.window, self.predictor.arch.config.keypoints);
        let mut lines = BufReader::new(reader).lines();
        let mut dropped = 0;
        let mut outputs_open = true;
        let read: Result<()> = loop {
            tokio::select! {
                biased;
                msg = rx.recv(), if outputs_open => match msg {
                    Some(m) => write_message(writer, &m).await?,
                    None => outputs_open = false,
                },
                _ = self.shutdown.cancelled() => break Ok(()),
                line = lines.next_line() => match line {
                    Ok(None) => break Ok(()),
                    Ok(Some(line)) => match parser.feed(&line) {
                        Ok(Some(window)) => {
                            self.counters.windows.fetch_add(1, Ordering::Relaxed);
                            if queue.push(window).is_some() {
                                dropped += 1;
                                self.counters.dropped.fetch_add(1, Ordering::Relaxed);
                            }
                        }
                        Ok(None) => {}
                        Err(e) => break Err(e.into()),
                    },
                    Err(e) => break Err(e.into()),
                },
            }
        };
        queue.close();
        while let Some(m) = rx.recv().await {
            write_message(writer, &m).await?;
        }
        let predicted = worker
            .await
            .map_err(|e| ServiceError::Worker(e.to_string()))?
            .map_err(ServiceError::Core)?;
        read?;
        let stats = SessionStats {
            windows: parser.windows(),
            predicted,
            dropped,
        };
        write_message(
            writer,
            &ServerMessage::Summary {
                windows: stats.windows,
                predicted: stats.predicted,
                dropped: stats.dropped,
            },
        )
        .await?;
        Ok(stats)
    }
}

async fn write_message<W: AsyncWrite + Unpin>(w: &mut W, m: &ServerMessage) -> Result<()> {
    let mut line = serde_json::to_vec(m).map_err(CoreError::from)?;
    line.push(b'\n');
    w.write_all(&line).await?;
    w.flush().await?;
    Ok(())
}

/// Serves one session over standard input and output.
pub async fn serve_stdio(service: Arc<Service>) -> Result<SessionStats> {
    service.session(tokio::io::stdin(), tokio::io::stdout()).await
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

impl From<CoreError> for ApiError {
    fn from(e: CoreError) -> Self {
        ApiError(StatusCode::BAD_REQUEST, e.to_string())
    }
}

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/healthz", get(|| async { "ok" }))
        .route(
            "/v1/model",
            get(|State(s): State<Arc<Service>>| async move { Json(s.model_info()) }),
        )
        .route(
            "/v1/stats",
            get(|State(s): State<Arc<Service>>| async move { Json(s.stats()) }),
        )
        .route("/v1/predict", post(predict))
        .with_state(service)
}

async fn predict(
    State(service): State<Arc<Service>>,
    Json(req): Json<PredictRequest>,
) -> Result<Json<PredictResponse>, ApiError> {
    let k = req.k.unwrap_or(service.config.top_k);
    let pose = request_pose(req)?;
    let s = service.clone();
    let p = tokio::task::spawn_blocking(move || s.predictor.predict(&pose, k))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    let top_k = p
        .top_k
        .iter()
        .map(|(c, score)| (service.predictor.vocabulary[*c].clone(), *score))
        .collect();
    Ok(Json(PredictResponse {
        top_k,
        latency_ms: p.latency_ms,
    }))
}

fn request_pose(req: PredictRequest) -> Result<PoseSequence, CoreError> {
    let frames = req.frames.len();
    let k = req.frames.first().map_or(0, Vec::len);
    if req.frames.iter().any(|f| f.len() != k) {
        return Err(CoreError::Shape("frames have differing keypoint counts".into()));
    }
    let valid = match req.valid {
        Some(v) if v.len() != frames || v.iter().any(|f| f.len() != k) => {
            return Err(CoreError::Shape("valid does not match frames".into()))
        }
        Some(v) => v.into_iter().flatten().collect(),
        None => vec![true; frames * k],
    };
    let data = req.frames.into_iter().flatten().flatten().collect();
    PoseSequence::new(frames, k, data, valid, req.fps)
}

/// Where to listen. Either may be left out.
#[derive(Debug, Clone, Default)]
pub struct Endpoints {
    pub stream: Option<SocketAddr>,
    pub http: Option<SocketAddr>,
}

/// Binds the requested endpoints and serves until shutdown. Returns the
/// bound addresses through `on_bound` before serving.
pub async fn serve(service: Arc<Service>, endpoints: Endpoints, on_bound: impl FnOnce(&Endpoints)) -> Result<()> {
    let stream = match endpoints.stream {
        Some(a) => Some(TcpListener::bind(a).await?),
        None => None,
    };
    let http = match endpoints.http {
        Some(a) => Some(TcpListener::bind(a).await?),
        None => None,
    };
    on_bound(&Endpoints {
        stream: stream.as_ref().map(|l| l.local_addr()).transpose()?,
        http: http.as_ref().map(|l| l.local_addr()).transpose()?,
    });
    let a = stream.map(|l| tokio::spawn(service.clone().serve_tcp(l)));
    let b = http.map(|l| tokio::spawn(service.clone().serve_http(l)));
    for task in [a, b].into_iter().flatten() {
        task.await.map_err(|e| ServiceError::Worker(e.to_string()))??;
    }
    Ok(())
}
