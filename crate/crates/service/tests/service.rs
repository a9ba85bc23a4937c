use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use slrkit_client::{connect, replay, HttpClient};
use slrkit_core::infer::{offline_windows, replay_lines, Predictor, ServerMessage, WindowConfig};
use slrkit_core::models::{Architecture, ModelConfig, Variant};
use slrkit_core::pose::{PoseSequence, SkeletonGraph};
use slrkit_core::synth::{make_synthetic_corpus, SynthSpec};
use slrkit_core::train::default_preprocess;
use slrkit_service::{serve, Endpoints, Service, ServiceConfig};

fn predictor(config: ModelConfig) -> Predictor {
    let arch = Architecture::new(config, SkeletonGraph::default_27()).unwrap();
    let params = arch.init(11).unwrap();
    let vocab = (0..arch.config.num_classes).map(|i| format!("SIGN{i}")).collect();
    Predictor::new(arch, params, vocab, default_preprocess()).unwrap()
}

fn toy(variant: Variant) -> Predictor {
    predictor(ModelConfig::toy(variant, 8, 27))
}

fn clip(seed: u64, frames: usize) -> PoseSequence {
    let c = make_synthetic_corpus(&SynthSpec::new(2, 1, frames, seed)).unwrap();
    c.samples[0].pose.clone()
}

struct Running {
    service: Arc<Service>,
    stream: SocketAddr,
    http: SocketAddr,
    task: tokio::task::JoinHandle<slrkit_service::Result<()>>,
}

async fn start(p: Predictor, config: ServiceConfig) -> Running {
    let service = Service::new(p, config).unwrap();
    let (tx, rx) = tokio::sync::oneshot::channel();
    let local: SocketAddr = "127.0.0.1:0".parse().unwrap();
    let endpoints = Endpoints {
        stream: Some(local),
        http: Some(local),
    };
    let task = tokio::spawn(serve(service.clone(), endpoints, move |b| {
        tx.send(b.clone()).unwrap();
    }));
    let bound = rx.await.unwrap();
    Running {
        service,
        stream: bound.stream.unwrap(),
        http: bound.http.unwrap(),
        task,
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn realtime_lstm_stream_has_no_drops_and_keeps_up() {
    let r = start(predictor(ModelConfig::new(Variant::Lstm, 50)), ServiceConfig::default()).await;
    let pose = clip(1, 90);
    let frames = 300;
    let out = replay(r.stream, &pose, frames, 30.0, true).await.unwrap();
    assert_eq!(out.error(), None);
    assert_eq!(out.summary(), Some((9, 9, 0)));
    let cfg = WindowConfig::default();
    for (i, (at, id, top)) in out.predictions().enumerate() {
        assert_eq!(id, i as u64);
        assert_eq!(top.len(), 5);
        assert!(top.windows(2).all(|w| w[0].1 >= w[1].1));
        let next = cfg.window_len - 1 + cfg.stride * (i + 1);
        if next < frames {
            assert!(
                at < out.sent[next],
                "window {i} answered after the next window completed"
            );
        }
    }
    r.service.shutdown();
    r.task.await.unwrap().unwrap();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn concurrent_sessions_are_isolated() {
    let p = toy(Variant::Stgcn);
    let offline = p.clone();
    let r = start(p, ServiceConfig::default()).await;
    let a = clip(2, 150);
    let b = clip(3, 210);
    let (ra, rb) = tokio::join!(
        replay(r.stream, &a, a.frames(), 30.0, false),
        replay(r.stream, &b, b.frames(), 30.0, false)
    );
    for (pose, out) in [(&a, ra.unwrap()), (&b, rb.unwrap())] {
        let windows = offline_windows(pose, &WindowConfig::default()).unwrap();
        let (_, predicted, dropped) = out.summary().unwrap();
        assert_eq!(predicted + dropped, windows.len() as u64);
        for (_, id, top) in out.predictions() {
            let expect = offline.predict(&windows[id as usize], 5).unwrap();
            for ((gloss, score), (c, s)) in top.iter().zip(&expect.top_k) {
                assert_eq!(gloss, &offline.vocabulary[*c]);
                assert!((score - s).abs() <= 1e-12);
            }
        }
    }
    assert_eq!(r.service.stats().sessions_started, 2);
    r.service.shutdown();
    r.task.await.unwrap().unwrap();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn overload_drops_oldest_and_stays_up() {
    let config = ServiceConfig {
        window: WindowConfig {
            window_len: 60,
            stride: 1,
            queue_depth: 2,
        },
        top_k: 3,
    };
    let r = start(predictor(ModelConfig::new(Variant::Transformer, 20)), config).await;
    let pose = clip(4, 120);
    let out = replay(r.stream, &pose, 1200, 30.0, false).await.unwrap();
    let (windows, predicted, dropped) = out.summary().unwrap();
    assert_eq!(windows, 1141);
    assert!(dropped > 0);
    assert_eq!(predicted + dropped, windows);
    let ids: Vec<u64> = out.predictions().map(|p| p.1).collect();
    assert!(ids.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(ids.last(), Some(&(windows - 1)));

    let http = HttpClient::new(format!("http://{}", r.http));
    assert!(http.healthy().await.unwrap());
    let again = replay(r.stream, &pose, 60, 30.0, false).await.unwrap();
    assert_eq!(again.summary(), Some((1, 1, 0)));
    r.service.shutdown();
    r.task.await.unwrap().unwrap();
}

#[tokio::test]
async fn malformed_message_gets_error_reply_and_close() {
    let r = start(toy(Variant::Lstm), ServiceConfig::default()).await;
    let (mut tx, mut rx) = connect(r.stream, 27, 30.0).await.unwrap();
    tx.send_raw("{\"type\":\"frame\",\"t\":0}").await.unwrap();
    match rx.next().await.unwrap() {
        Some(ServerMessage::Error { message }) => assert!(message.contains("malformed"), "{message}"),
        other => panic!("expected error, got {other:?}"),
    }
    assert!(rx.next().await.unwrap().is_none());

    let (mut tx, mut rx) = connect(r.stream, 27, 30.0).await.unwrap();
    let pose = clip(5, 10);
    tx.frame(5, &pose, 0).await.unwrap();
    tx.frame(5, &pose, 1).await.unwrap();
    assert!(matches!(rx.next().await.unwrap(), Some(ServerMessage::Error { .. })));
    assert_eq!(r.service.stats().session_errors, 2);
    r.service.shutdown();
    r.task.await.unwrap().unwrap();
}

#[tokio::test]
async fn short_stream_closes_cleanly_without_windows() {
    let r = start(toy(Variant::Lstm), ServiceConfig::default()).await;
    let out = replay(r.stream, &clip(6, 5), 5, 30.0, false).await.unwrap();
    assert_eq!(out.summary(), Some((0, 0, 0)));
    assert_eq!(out.received.len(), 1);
    r.service.shutdown();
    r.task.await.unwrap().unwrap();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn shutdown_drains_queued_windows() {
    let config = ServiceConfig {
        window: WindowConfig {
            window_len: 60,
            stride: 10,
            queue_depth: 64,
        },
        top_k: 1,
    };
    let r = start(predictor(ModelConfig::new(Variant::Lstm, 10)), config).await;
    let pose = clip(7, 300);
    let (mut tx, rx) = connect(r.stream, 27, 30.0).await.unwrap();
    let reader = tokio::spawn(rx.collect());
    for t in 0..pose.frames() {
        tx.frame(t as u64, &pose, t).await.unwrap();
    }
    while r.service.stats().windows < 25 {
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
    r.service.shutdown();
    let msgs = reader.await.unwrap().unwrap();
    let preds = msgs
        .iter()
        .filter(|(_, m)| matches!(m, ServerMessage::Prediction { .. }))
        .count();
    assert_eq!(preds, 25);
    assert!(matches!(
        msgs.last().map(|m| &m.1),
        Some(ServerMessage::Summary {
            windows: 25,
            predicted: 25,
            dropped: 0
        })
    ));
    r.task.await.unwrap().unwrap();
    drop(tx);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn http_endpoints() {
    let p = toy(Variant::Transformer);
    let offline = p.clone();
    let r = start(p, ServiceConfig::default()).await;
    let http = HttpClient::new(format!("http://{}", r.http));
    assert!(http.healthy().await.unwrap());
    let model = http.model().await.unwrap();
    assert_eq!(model["variant"], "transformer");
    assert_eq!(model["num_classes"], 8);
    assert_eq!(model["window"]["window_len"], 60);

    let pose = clip(8, 60);
    let got = http.predict(&pose, Some(3)).await.unwrap();
    let expect = offline.predict(&pose, 3).unwrap();
    assert_eq!(got.top_k.len(), 3);
    for ((g, s), (c, e)) in got.top_k.iter().zip(&expect.top_k) {
        assert_eq!(g, &offline.vocabulary[*c]);
        assert!((s - e).abs() <= 1e-12);
    }
    let err = http.predict(&pose, Some(9)).await.unwrap_err();
    assert!(err.to_string().contains("400"), "{err}");
    assert_eq!(http.stats().await.unwrap()["sessions_started"], 0);
    r.service.shutdown();
    r.task.await.unwrap().unwrap();
}

#[tokio::test]
async fn stdio_style_session_over_in_memory_pipes() {
    let service = Service::new(toy(Variant::Lstm), ServiceConfig::default()).unwrap();
    let pose = clip(9, 95);
    let input = replay_lines(&pose, 0).unwrap().join("\n");
    let mut output = Vec::new();
    let stats = service.session(input.as_bytes(), &mut output).await.unwrap();
    assert_eq!(stats.windows, 2);
    let lines: Vec<ServerMessage> = String::from_utf8(output)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 3);
}

#[test]
fn refuses_to_start_without_a_loadable_model() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.ckpt");
    assert!(Service::load(&missing, ServiceConfig::default()).is_err());
    let garbage = dir.path().join("garbage.ckpt");
    std::fs::write(&garbage, b"not a checkpoint").unwrap();
    assert!(Service::load(&garbage, ServiceConfig::default()).is_err());
    let bad_k = ServiceConfig {
        top_k: 9,
        ..ServiceConfig::default()
    };
    assert!(Service::new(toy(Variant::Lstm), bad_k).is_err());
}
