//! Client for the streaming service: the line-JSON session protocol and
//! the HTTP endpoints.

use std::time::{Duration, Instant};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader, BufWriter, Lines};
use tokio::net::tcp::{OwnedReadHalf, OwnedWriteHalf};
use tokio::net::{TcpStream, ToSocketAddrs};

use slrkit_core::infer::{ClientMessage, ServerMessage, PROTOCOL_VERSION};
use slrkit_core::pose::PoseSequence;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad message: {0}")]
    Json(#[from] serde_json::Error),
    #[error("http: {0}")]
    Http(#[from] reqwest::Error),
    #[error("server error: {0}")]
    Server(String),
}

pub type Result<T> = std::result::Result<T, ClientError>;

/// Sending half of a stream session.
#[derive(Debug)]
pub struct FrameSender {
    writer: BufWriter<OwnedWriteHalf>,
}

/// Receiving half of a stream session.
#[derive(Debug)]
pub struct MessageReceiver {
    lines: Lines<BufReader<OwnedReadHalf>>,
}

/// Opens a session and sends the handshake.
pub async fn connect(addr: impl ToSocketAddrs, k: usize, fps: f32) -> Result<(FrameSender, MessageReceiver)> {
    let stream = TcpStream::connect(addr).await?;
    stream.set_nodelay(true)?;
    let (r, w) = stream.into_split();
    let mut sender = FrameSender {
        writer: BufWriter::new(w),
    };
    sender
        .send(&ClientMessage::Hello {
            k,
            fps,
            format_version: PROTOCOL_VERSION,
        })
        .await?;
    Ok((
        sender,
        MessageReceiver {
            lines: BufReader::new(r).lines(),
        },
    ))
}

impl FrameSender {
    pub async fn send(&mut self, msg: &ClientMessage) -> Result<()> {
        let mut line = serde_json::to_vec(msg)?;
        line.push(b'\n');
        self.writer.write_all(&line).await?;
        self.writer.flush().await?;
        Ok(())
    }

    /// Sends a raw line, for protocol testing.
    pub async fn send_raw(&mut self, line: &str) -> Result<()> {
        self.writer.write_all(line.as_bytes()).await?;
        self.writer.write_all(b"\n").await?;
        self.writer.flush().await?;
        Ok(())
    }

    pub async fn frame(&mut self, t: u64, pose: &PoseSequence, row: usize) -> Result<()> {
        let k = pose.keypoints();
        let valid: Vec<bool> = (0..k).map(|j| pose.is_valid(row, j)).collect();
        self.send(&ClientMessage::Frame {
            t,
            kps: (0..k).map(|j| pose.point(row, j)).collect(),
            valid: (!valid.iter().all(|v| *v)).then_some(valid),
        })
        .await
    }

    /// Ends the input; the server answers what is queued and sends a summary.
    pub async fn finish(mut self) -> Result<()> {
        self.writer.shutdown().await?;
        Ok(())
    }
}

impl MessageReceiver {
    /// The next server message, or `None` once the server closed the session.
    pub async fn next(&mut self) -> Result<Option<ServerMessage>> {
        while let Some(line) = self.lines.next_line().await? {
            if !line.trim().is_empty() {
                return Ok(Some(serde_json::from_str(&line)?));
            }
        }
        Ok(None)
    }

    /// Reads until the session ends; each message is paired with its arrival time.
    pub async fn collect(mut self) -> Result<Vec<(Instant, ServerMessage)>> {
        let mut out = Vec::new();
        while let Some(m) = self.next().await? {
            out.push((Instant::now(), m));
        }
        Ok(out)
    }
}

/// What a paced replay observed.
#[derive(Debug, Clone)]
pub struct Replay {
    /// Send time of every frame.
    pub sent: Vec<Instant>,
    /// Every server message with its arrival time.
    pub received: Vec<(Instant, ServerMessage)>,
}

impl Replay {
    pub fn predictions(&self) -> impl Iterator<Item = (Instant, u64, &[(String, f64)])> {
        self.received.iter().filter_map(|(at, m)| match m {
            ServerMessage::Prediction { window_id, top_k, .. } => Some((*at, *window_id, top_k.as_slice())),
            _ => None,
        })
    }

    pub fn summary(&self) -> Option<(u64, u64, u64)> {
        self.received.iter().find_map(|(_, m)| match m {
            ServerMessage::Summary {
                windows,
                predicted,
                dropped,
            } => Some((*windows, *predicted, *dropped)),
            _ => None,
        })
    }

    pub fn error(&self) -> Option<&str> {
        self.received.iter().find_map(|(_, m)| match m {
            ServerMessage::Error { message } => Some(message.as_str()),
            _ => None,
        })
    }
}

/// Streams `frames` rows of `pose` (cycling when longer than the clip),
/// one every `1/fps` seconds when `paced`, else as fast as possible.
pub async fn replay(
    addr: impl ToSocketAddrs,
    pose: &PoseSequence,
    frames: usize,
    fps: f32,
    paced: bool,
) -> Result<Replay> {
    let (mut tx, rx) = connect(addr, pose.keypoints(), fps).await?;
    let reader = tokio::spawn(rx.collect());
    let period = Duration::from_secs_f64(1.0 / fps as f64);
    let start = tokio::time::Instant::now();
    let mut sent = Vec::with_capacity(frames);
    for t in 0..frames {
        if paced {
            tokio::time::sleep_until(start + period * t as u32).await;
        }
        tx.frame(t as u64, pose, t % pose.frames()).await?;
        sent.push(Instant::now());
    }
    tx.finish().await?;
    let received = reader.await.map_err(|e| ClientError::Server(e.to_string()))??;
    Ok(Replay { sent, received })
}

/// Client for the HTTP endpoints.
#[derive(Debug, Clone)]
pub struct HttpClient {
    base: String,
    http: reqwest::Client,
}

#[derive(Debug, Clone, Serialize)]
struct PredictBody {
    frames: Vec<Vec<[f32; 2]>>,
    valid: Vec<Vec<bool>>,
    fps: f32,
    #[serde(skip_serializing_if = "Option::is_none")]
    k: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct HttpPrediction {
    pub top_k: Vec<(String, f64)>,
    pub latency_ms: f64,
}

impl HttpClient {
    /// `base` like `http://127.0.0.1:8080`.
    pub fn new(base: impl Into<String>) -> Self {
        Self {
            base: base.into().trim_end_matches('/').to_string(),
            http: reqwest::Client::new(),
        }
    }

    async fn get_json<T: DeserializeOwned>(&self, path: &str) -> Result<T> {
        let resp = self.http.get(format!("{}{path}", self.base)).send().await?;
        decode(resp).await
    }

    pub async fn healthy(&self) -> Result<bool> {
        let resp = self.http.get(format!("{}/healthz", self.base)).send().await?;
        Ok(resp.status().is_success())
    }

    pub async fn model(&self) -> Result<serde_json::Value> {
        self.get_json("/v1/model").await
    }

    pub async fn stats(&self) -> Result<serde_json::Value> {
        self.get_json("/v1/stats").await
    }

    pub async fn predict(&self, pose: &PoseSequence, k: Option<usize>) -> Result<HttpPrediction> {
        let rows = 0..pose.frames();
        let body = PredictBody {
            frames: rows
                .clone()
                .map(|t| (0..pose.keypoints()).map(|j| pose.point(t, j)).collect())
                .collect(),
            valid: rows
                .map(|t| (0..pose.keypoints()).map(|j| pose.is_valid(t, j)).collect())
                .collect(),
            fps: pose.fps(),
            k,
        };
        let resp = self
            .http
            .post(format!("{}/v1/predict", self.base))
            .json(&body)
            .send()
            .await?;
        decode(resp).await
    }
}

async fn decode<T: DeserializeOwned>(resp: reqwest::Response) -> Result<T> {
    let status = resp.status();
    let text = resp.text().await?;
    if !status.is_success() {
        let message = serde_json::from_str::<serde_json::Value>(&text)
            .ok()
            .and_then(|v| v.get("error").and_then(|e| e.as_str()).map(str::to_string))
            .unwrap_or(text);
        return Err(ClientError::Server(format!("{status}: {message}")));
    }
    Ok(serde_json::from_str(&text)?)
}
