use std::io::Cursor;

use slrkit_core::infer::{
    offline_windows, replay_lines, run_session, top_k, DropOldestQueue, Predictor, ServerMessage, SessionParser,
    WindowAssembler, WindowConfig,
};
use slrkit_core::models::{load_classifier, save_classifier, ClassifierMeta, ModelConfig, Variant};
use slrkit_core::pose::{PoseSequence, SkeletonGraph};
use slrkit_core::synth::{make_synthetic_corpus, SynthSpec};
use slrkit_core::train::default_preprocess;

fn predictor(variant: Variant) -> Predictor {
    let skeleton = SkeletonGraph::default_27();
    let meta = ClassifierMeta {
        model: ModelConfig::toy(variant, 6, 27),
        vocabulary: (0..6).map(|i| format!("g{i}")).collect(),
        preprocess: default_preprocess(),
        edges: skeleton.edges().to_vec(),
    };
    let params = meta.architecture().unwrap().init(5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_classifier(&path, &params, &meta).unwrap();
    let (params, meta) = load_classifier(&path).unwrap();
    Predictor::from_meta(params, meta).unwrap()
}

fn clips(n: usize) -> Vec<PoseSequence> {
    let mut spec = SynthSpec::new(6, 2, 90, 3);
    spec.max_frames = 160;
    let c = make_synthetic_corpus(&spec).unwrap();
    c.samples.into_iter().take(n).map(|s| s.pose).collect()
}

fn frame(k: usize, v: f32) -> Vec<[f32; 2]> {
    vec![[v, v]; k]
}

#[test]
fn window_arithmetic() {
    let cfg = WindowConfig::default();
    let mut a = WindowAssembler::new(cfg, 3, 30.0).unwrap();
    let mut emitted = Vec::new();
    for t in 0..150u64 {
        if let Some(w) = a.push(t, &frame(3, t as f32), None).unwrap() {
            emitted.push((t, w.id, w.start_t, w.pose.frames()));
        }
    }
    assert_eq!(
        emitted,
        vec![(59, 0, 0, 60), (89, 1, 30, 60), (119, 2, 60, 60), (149, 3, 90, 60)]
    );

    let mut short = WindowAssembler::new(cfg, 3, 30.0).unwrap();
    for t in 0..5 {
        assert!(short.push(t, &frame(3, 0.0), None).unwrap().is_none());
    }
    assert_eq!(short.windows_emitted(), 0);
    assert!(short.push(4, &frame(3, 0.0), None).is_err());
    assert!(short.push(9, &frame(2, 0.0), None).is_err());

    let pose = PoseSequence::from_coords(150, 1, vec![0.0; 300], 30.0).unwrap();
    assert_eq!(offline_windows(&pose, &cfg).unwrap().len(), 4);
}

#[test]
fn drop_oldest_queue_counts_evictions() {
    let q = DropOldestQueue::new(2);
    assert_eq!(q.push(1), None);
    assert_eq!(q.push(2), None);
    assert_eq!(q.push(3), Some(1));
    assert_eq!(q.push(4), Some(2));
    assert_eq!(q.dropped(), 2);
    q.close();
    assert_eq!(q.pop(), Some(3));
    assert_eq!(q.pop(), Some(4));
    assert_eq!(q.pop(), None);
}

#[test]
fn top_k_ties_prefer_lower_index() {
    let t = top_k(&[1.0, 3.0, 3.0, 0.0], 3);
    assert_eq!(t.iter().map(|x| x.0).collect::<Vec<_>>(), vec![1, 2, 0]);
    assert!((t[0].1 - t[1].1).abs() == 0.0);
    let sum: f64 = top_k(&[0.1, -2.0, 5.0], 3).iter().map(|x| x.1).sum();
    assert!((sum - 1.0).abs() < 1e-12);
}

#[test]
fn streamed_windows_match_batch_windows_bitwise() {
    for variant in [Variant::Lstm, Variant::Transformer, Variant::Stgcn] {
        let p = predictor(variant);
        let cfg = WindowConfig::default();
        for clip in clips(10) {
            let offline = offline_windows(&clip, &cfg).unwrap();
            let mut parser = SessionParser::new(cfg, 27);
            let mut streamed = Vec::new();
            for line in replay_lines(&clip, 1000).unwrap() {
                if let Some(w) = parser.feed(&line).unwrap() {
                    streamed.push(w);
                }
            }
            assert_eq!(streamed.len(), offline.len());
            for (w, o) in streamed.iter().zip(&offline) {
                let a = p.predict(&w.pose, 6).unwrap();
                let b = p.predict(o, 6).unwrap();
                assert_eq!(a.logits, b.logits, "{variant:?} window {}", w.id);
                assert_eq!(a.top_k, b.top_k);
            }
        }
    }
}

#[test]
fn session_answers_every_window_and_reports_summary() {
    let p = predictor(Variant::Lstm);
    let cfg = WindowConfig {
        queue_depth: 64,
        ..WindowConfig::default()
    };
    let clip = &clips(1)[0];
    let input = replay_lines(clip, 0).unwrap().join("\n");
    let mut out = Vec::new();
    let stats = run_session(&p, cfg, 3, Cursor::new(input), &mut out).unwrap();
    let expected = offline_windows(clip, &cfg).unwrap().len() as u64;
    assert_eq!(stats.windows, expected);
    assert_eq!(stats.predicted + stats.dropped, expected);
    let msgs: Vec<ServerMessage> = String::from_utf8(out)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert!(matches!(msgs.last(), Some(ServerMessage::Summary { .. })));
    for m in &msgs[..msgs.len() - 1] {
        match m {
            ServerMessage::Prediction { top_k, .. } => assert_eq!(top_k.len(), 3),
            other => panic!("unexpected {other:?}"),
        }
    }
}

#[test]
fn protocol_errors() {
    let mut parser = SessionParser::new(WindowConfig::default(), 27);
    assert!(parser.feed(r#"{"type":"frame","t":0,"kps":[]}"#).is_err());
    assert!(parser
        .feed(r#"{"type":"hello","k":26,"fps":30,"format_version":1}"#)
        .is_err());
    assert!(parser
        .feed(r#"{"type":"hello","k":27,"fps":30,"format_version":9}"#)
        .is_err());
    assert!(parser.feed("not json").is_err());
    parser
        .feed(r#"{"type":"hello","k":27,"fps":30,"format_version":1}"#)
        .unwrap();
    assert!(parser
        .feed(r#"{"type":"hello","k":27,"fps":30,"format_version":1}"#)
        .is_err());
    let p = predictor(Variant::Lstm);
    let clip = &clips(1)[0];
    assert!(p.predict(clip, 0).is_err());
    assert!(p.predict(clip, 7).is_err());
}
