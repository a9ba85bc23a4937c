//! One PASS/FAIL line per acceptance criterion. Pass criterion numbers as
//! arguments to run a subset: `cargo test --test acceptance -- 1 3`.

use std::net::SocketAddr;
use std::time::Instant;

use slrkit_core::corpus::{pack, Corpus, Layout, PackOptions, StoredSample, SubsetSpec};
use slrkit_core::gradcheck::{check_gradients, GradCheckOptions};
use slrkit_core::graph::Reduction;
use slrkit_core::infer::{benchmark_latency, offline_windows, replay_lines, Predictor, SessionParser, WindowConfig};
use slrkit_core::models::{Architecture, ModelConfig, Variant};
use slrkit_core::params::ParameterSet;
use slrkit_core::pose::{PoseSequence, SkeletonGraph};
use slrkit_core::pretrain::{
    direction_labels, dpc_pretrain, infonce_loss, masked_pretrain, static_fraction, DpcConfig, DpcModel, MaskConfig,
    MaskedModel, PretrainSchedule, DEFAULT_STATIC_DELTA,
};
use slrkit_core::rng::RandomSource;
use slrkit_core::synth::{make_synthetic_corpus, SynthSpec};
use slrkit_core::train::{default_preprocess, evaluate, train_classifier, Dataset, TrainConfig};
use slrkit_core::transforms::{interpolate_missing, normalize_by_shoulders, rotate_by, shear_by};
use slrkit_service::{serve, Endpoints, Service, ServiceConfig};

const VARIANTS: [Variant; 3] = [Variant::Lstm, Variant::Transformer, Variant::Stgcn];

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn e(err: impl std::fmt::Display) -> String {
    err.to_string()
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [Criterion; 8] = [
        ("transform properties", transforms),
        ("gradient checks", gradients),
        ("InfoNCE oracle", infonce),
        ("overfit sanity", overfit),
        ("DPC fine-tune benefit", dpc_benefit),
        ("masked pretraining null result", masked_null),
        ("latency ordering and realtime serving", latency),
        ("storage round-trip and streaming equivalence", storage_and_streaming),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or(p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default())
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {n} {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {n} {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

fn random_pose(rng: &mut RandomSource, frames: usize, k: usize, missing: f64) -> PoseSequence {
    let data = (0..frames * k * 2).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
    let valid = (0..frames * k).map(|_| rng.next_f64() >= missing).collect();
    PoseSequence::new(frames, k, data, valid, 30.0).unwrap()
}

/// Moves keypoint 1 at least 0.2 away from keypoint 0 in every frame. A
/// near-zero shoulder span amplifies input rounding without bound.
fn spread_shoulders(pose: &mut PoseSequence, rng: &mut RandomSource) {
    for t in 0..pose.frames() {
        let [x, y] = pose.point(t, 0);
        let gap = rng.uniform(0.2, 1.0) as f32;
        let valid = pose.is_valid(t, 1);
        pose.set_point(t, 1, [x + gap, y + rng.uniform(-0.2, 0.2) as f32], valid);
    }
}

fn dist(a: [f32; 2], b: [f32; 2]) -> f64 {
    (a[0] as f64 - b[0] as f64).hypot(a[1] as f64 - b[1] as f64)
}

fn interpolate_oracle(pose: &PoseSequence) -> Option<Vec<f32>> {
    let (f, k) = (pose.frames(), pose.keypoints());
    let mut out = pose.data().to_vec();
    for kp in 0..k {
        for t in (0..f).filter(|&t| !pose.is_valid(t, kp)) {
            let left = (0..t).rev().find(|&s| pose.is_valid(s, kp));
            let right = (t + 1..f).find(|&s| pose.is_valid(s, kp));
            let p = match (left, right) {
                (Some(l), Some(r)) => {
                    let (a, b) = (pose.point(l, kp), pose.point(r, kp));
                    let w = (t - l) as f64 / (r - l) as f64;
                    [0, 1].map(|i| (a[i] as f64 + w * (b[i] as f64 - a[i] as f64)) as f32)
                }
                (Some(l), None) => pose.point(l, kp),
                (None, Some(r)) => pose.point(r, kp),
                (None, None) => return None,
            };
            out[(t * k + kp) * 2] = p[0];
            out[(t * k + kp) * 2 + 1] = p[1];
        }
    }
    Some(out)
}

fn transforms() -> Outcome {
    let mut rng = RandomSource::new(2024);
    let (mut rot_err, mut norm_err) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let f = rng.range_inclusive(1, 8);
        let k = rng.range_inclusive(2, 8);
        let mut pose = random_pose(&mut rng, f, k, 0.1);
        spread_shoulders(&mut pose, &mut rng);

        let r = rotate_by(&pose, rng.uniform(-3.2, 3.2));
        for t in 0..f {
            for a in 0..k {
                for b in 0..a {
                    let d = (dist(pose.point(t, a), pose.point(t, b)) - dist(r.point(t, a), r.point(t, b))).abs();
                    rot_err = rot_err.max(d);
                }
            }
        }

        let s = shear_by(&pose, rng.uniform(-0.5, 0.5) as f32);
        if pose
            .data()
            .chunks(2)
            .zip(s.data().chunks(2))
            .any(|(a, b)| a[1].to_bits() != b[1].to_bits())
        {
            return Err("shear changed a y coordinate".into());
        }

        let a = rng.uniform(0.25, 8.0) as f32;
        let (bx, by) = (rng.uniform(-4.0, 4.0) as f32, rng.uniform(-4.0, 4.0) as f32);
        let moved = pose.map_valid_points(|[x, y]| [a * x + bx, a * y + by]);
        if let Ok(n) = normalize_by_shoulders(&pose, 0, 1, 1.0) {
            let m = normalize_by_shoulders(&moved, 0, 1, 1.0).map_err(e)?;
            for (x, y) in n.data().iter().zip(m.data()) {
                norm_err = norm_err.max((x - y).abs() as f64);
            }
        }
    }

    let mut cases = 0u64;
    for f in 1..=8usize {
        for k in 1..=3usize {
            let slots = f * k;
            let data: Vec<f32> = (0..slots * 2).map(|_| rng.uniform(-5.0, 5.0) as f32).collect();
            for mask in 0u32..1 << slots {
                let valid = (0..slots).map(|i| mask >> i & 1 == 1).collect();
                let pose = PoseSequence::new(f, k, data.clone(), valid, 30.0).unwrap();
                let same = match (interpolate_missing(&pose), interpolate_oracle(&pose)) {
                    (Ok(got), Some(want)) => got.data() == &want[..],
                    (Err(_), None) => true,
                    _ => false,
                };
                if !same {
                    return Err(format!(
                        "interpolation differs from oracle at F={f} K={k} mask={mask:b}"
                    ));
                }
                cases += 1;
            }
        }
    }
    check(
        rot_err <= 1e-5 && norm_err <= 1e-4,
        format!(
            "1000 instances: rotation max distance error {rot_err:.2e} (<=1e-5), shear y exact, normalization max error {norm_err:.2e} (<=1e-4); interpolation exact on {cases} masks"
        ),
    )
}

fn gradients() -> Outcome {
    let mut rng = RandomSource::new(11);
    let skeleton = SkeletonGraph::new(5, vec![[0, 1], [1, 2], [2, 3], [1, 4]]).map_err(e)?;
    let mut parts = Vec::new();
    let mut ok = true;
    for v in VARIANTS {
        let arch = Architecture::new(ModelConfig::toy(v, 3, 5), skeleton.clone()).map_err(e)?;
        let params = arch.init(5).map_err(e)?;
        let pose = random_pose(&mut rng, 12, 5, 0.0).map_valid_points(|[x, y]| [2.0 * x, 2.0 * y]);
        let report = check_gradients(
            &params,
            |g, p| {
                let out = arch.forward(g, p, &pose)?;
                g.cross_entropy(out.logits, &[Some(2)], Reduction::Mean)
            },
            &mut rng,
            GradCheckOptions::default(),
        )
        .map_err(e)?;
        ok &= report.passed() && report.checked >= 100;
        parts.push(format!(
            "{} {}/{} coords agree ({} above the absolute floor), max rel {:.1e}",
            v.as_str(),
            report.checked - report.failures,
            report.checked,
            report.resolved,
            report.max_rel_error
        ));
    }
    check(ok, parts.join("; "))
}

fn infonce() -> Outcome {
    let mut rng = RandomSource::new(3);
    let mut vecs = |n: usize, dim: usize| -> Vec<Vec<f32>> {
        (0..n)
            .map(|_| (0..dim).map(|_| rng.uniform(-2.0, 2.0) as f32).collect())
            .collect()
    };
    let dot = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum::<f64>();
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let dim = 1 + i % 8;
        let (p, z) = (vecs(1 + i % 4, dim), vecs(1 + i % 4, dim));
        let n = vecs(i % 17, dim);
        let got = infonce_loss(&p, &z, &n).map_err(e)?;
        let want: f64 = p
            .iter()
            .zip(&z)
            .map(|(p, z)| {
                let num = dot(p, z).exp();
                -(num / (num + n.iter().map(|v| dot(p, v).exp()).sum::<f64>())).ln()
            })
            .sum();
        worst = worst.max((got - want).abs() / want.abs().max(1e-300));
    }
    let l = infonce_loss(&[vec![1.0, 0.0]], &[vec![1.0, 0.0]], &[vec![0.0, 1.0]]).map_err(e)?;
    let eu = std::f64::consts::E;
    let example = (l - -(eu / (eu + 1.0)).ln()).abs();
    check(
        worst <= 1e-6 && example <= 1e-4,
        format!(
            "max relative error {worst:.1e} over 1000 instances (<=1e-6); worked example {l:.4}, error {example:.1e}"
        ),
    )
}

fn dataset(samples: &[StoredSample], ids: &[String]) -> Dataset {
    let pre = default_preprocess();
    let mut d = Dataset::default();
    let mut rng = RandomSource::new(0);
    for s in samples.iter().filter(|s| ids.contains(&s.id)) {
        d.ids.push(s.id.clone());
        d.poses
            .push(slrkit_core::train::apply_pipeline(&pre, &s.pose, &mut rng).unwrap());
        d.labels.push(s.label.unwrap());
    }
    d
}

fn overfit() -> Outcome {
    let c = make_synthetic_corpus(&SynthSpec::new(5, 20, 80, 11)).map_err(e)?;
    let (tr, va, te) = (
        dataset(&c.samples, &c.splits["train"]),
        dataset(&c.samples, &c.splits["val"]),
        dataset(&c.samples, &c.splits["test"]),
    );
    let mut ok = true;
    let mut parts = Vec::new();
    for v in VARIANTS {
        let arch = Architecture::new(ModelConfig::toy(v, 5, 27), SkeletonGraph::default_27()).map_err(e)?;
        let mut cfg = TrainConfig::for_variant(v);
        cfg.batch_size = 8;
        cfg.learning_rate = 3e-3;
        cfg.max_epochs = 200;
        cfg.top_k = vec![1];
        let out = train_classifier(&cfg, &arch, &tr, &va, None, &mut |_| {}).map_err(e)?;
        let train_top1 = evaluate(&arch, &out.best, &tr, &[1]).map_err(e)?.0.top1;
        let test_top1 = evaluate(&arch, &out.best, &te, &[1]).map_err(e)?.0.top1;
        ok &= train_top1 >= 0.95 && test_top1 >= 0.80;
        parts.push(format!(
            "{} train {train_top1:.3} held-out {test_top1:.3} ({} epochs)",
            v.as_str(),
            out.history.last().map_or(0, |r| r.epoch)
        ));
    }
    check(ok, parts.join("; "))
}

/// Shared protocol for the pretraining criteria: 500 unlabeled clips for
/// pretraining, a labeled corpus for 3-per-class fine-tuning over 5 seeds.
struct LowResource {
    _dir: tempfile::TempDir,
    unlabeled: Corpus,
    labeled: Corpus,
    val: Dataset,
    test: Dataset,
}

const CLASSES: usize = 10;
const SEEDS: u64 = 5;

fn low_resource() -> Result<LowResource, String> {
    let dir = tempfile::tempdir().map_err(e)?;
    let mut u = SynthSpec::new(CLASSES, 50, 100, 1000);
    (u.min_frames, u.max_frames, u.unlabeled) = (70, 120, true);
    (u.jitter, u.noise, u.rotation) = (2.0, 2e-3, 0.0);
    let mut l = SynthSpec::new(CLASSES, 20, 80, 7);
    (l.min_frames, l.max_frames, l.split) = (70, 100, [0.3, 0.2]);
    (l.jitter, l.noise, l.rotation) = (2.0, 2e-3, 0.0);
    let open = |spec: &SynthSpec, name: &str| -> Result<Corpus, String> {
        let c = make_synthetic_corpus(spec).map_err(e)?;
        let mut options = PackOptions::new(name, Layout::Hdf5);
        options.vocabulary = c.vocabulary.clone();
        options.splits = c.splits.clone();
        let dest = dir.path().join(name);
        pack(c.samples, &dest, &options).map_err(e)?;
        Corpus::open(&dest).map_err(e)
    };
    let unlabeled = open(&u, "unlabeled")?;
    let labeled = open(&l, "labeled")?;
    let pre = default_preprocess();
    let val = Dataset::load(&labeled, labeled.split("val").map_err(e)?, &pre).map_err(e)?;
    let test = Dataset::load(&labeled, labeled.split("test").map_err(e)?, &pre).map_err(e)?;
    Ok(LowResource {
        _dir: dir,
        unlabeled,
        labeled,
        val,
        test,
    })
}

type Comparison = (f64, f64, Vec<(f64, f64)>);

/// Mean from-scratch and pretrained test top-1, and the per-seed pairs.
fn compare(
    lr: &LowResource,
    encoder: &ModelConfig,
    pretrained: &ParameterSet,
    learning_rate: f64,
) -> Result<Comparison, String> {
    let arch = Architecture::new(encoder.clone(), SkeletonGraph::default_27()).map_err(e)?;
    let mut pairs = Vec::new();
    for seed in 0..SEEDS {
        let ids = lr
            .labeled
            .subset_by_samples_per_class(
                "train",
                &SubsetSpec {
                    samples_per_class: 3,
                    seed,
                },
            )
            .map_err(e)?;
        let train = Dataset::load(&lr.labeled, &ids, &default_preprocess()).map_err(e)?;
        let mut cfg = TrainConfig::for_variant(encoder.variant);
        (cfg.batch_size, cfg.learning_rate, cfg.max_epochs, cfg.seed) = (8, learning_rate, 60, seed);
        cfg.top_k = vec![1];
        let score = |init: Option<&ParameterSet>| -> Result<f64, String> {
            let out = train_classifier(&cfg, &arch, &train, &lr.val, init, &mut |_| {}).map_err(e)?;
            Ok(evaluate(&arch, &out.best, &lr.test, &[1]).map_err(e)?.0.top1)
        };
        pairs.push((score(None)?, score(Some(pretrained))?));
    }
    let n = pairs.len() as f64;
    Ok((
        pairs.iter().map(|p| p.0).sum::<f64>() / n,
        pairs.iter().map(|p| p.1).sum::<f64>() / n,
        pairs,
    ))
}

fn dpc_benefit() -> Outcome {
    let lr = low_resource()?;
    let mut enc = ModelConfig::toy(Variant::Stgcn, CLASSES, 27);
    (enc.stgcn.channels, enc.stgcn.strides) = (vec![16, 16, 16], vec![1, 2, 1]);
    let model = DpcModel::new(
        DpcConfig {
            gru_hidden: 32,
            ..DpcConfig::default()
        },
        enc.clone(),
        SkeletonGraph::default_27(),
    )
    .map_err(e)?;
    let mut schedule = PretrainSchedule::new(800);
    (schedule.batch_size, schedule.learning_rate) = (16, 3e-3);
    let pre = dpc_pretrain(&lr.unlabeled, &model, &schedule, &mut |_| {}).map_err(e)?;
    let first = pre.history.first().map_or(f64::NAN, |r| r.loss);
    let last = pre.history.last().map_or(f64::NAN, |r| r.loss);
    let (scratch, tuned, pairs) = compare(&lr, &enc, &pre.encoder, 1e-3)?;
    let wins = pairs.iter().filter(|(s, p)| p > s).count();
    check(
        tuned > scratch && wins >= 4,
        format!(
            "DPC loss {first:.3} -> {last:.3}; 3/class fine-tuned {tuned:.3} vs from-scratch {scratch:.3}, margin {:+.1} points, {wins}/{SEEDS} seed wins",
            100.0 * (tuned - scratch)
        ),
    )
}

fn masked_null() -> Outcome {
    let lr = low_resource()?;
    let mut statics = Vec::new();
    for s in lr.unlabeled.ids().take(50) {
        let pose = lr.unlabeled.get(s).map_err(e)?.pose;
        statics.extend(direction_labels(&pose, DEFAULT_STATIC_DELTA).map_err(e)?);
    }
    let pretrain_share = static_fraction(&statics);
    // Default generator clips carry the STATIC claim; the share falls as noise
    // approaches the threshold, so the 2x-noise share is reported alongside.
    let share_at = |noise: f64| -> Result<f64, String> {
        let mut spec = SynthSpec::new(CLASSES, 5, 100, 99);
        (spec.unlabeled, spec.noise) = (true, noise);
        let mut labels = Vec::new();
        for s in make_synthetic_corpus(&spec).map_err(e)?.samples {
            labels.extend(direction_labels(&s.pose, DEFAULT_STATIC_DELTA).map_err(e)?);
        }
        Ok(static_fraction(&labels))
    };
    let default_noise = SynthSpec::new(1, 1, 2, 0).noise;
    let default_share = share_at(default_noise)?;
    let doubled_share = share_at(2.0 * default_noise)?;

    let mut enc = ModelConfig::toy(Variant::Transformer, CLASSES, 27);
    let t = &mut enc.transformer;
    (t.hidden, t.heads, t.head_dim, t.ffn_hidden) = (32, 2, 16, 64);
    let model = MaskedModel::new(MaskConfig::default(), enc.clone()).map_err(e)?;
    let mut schedule = PretrainSchedule::new(400);
    (schedule.batch_size, schedule.learning_rate) = (16, 1e-3);
    let pre = masked_pretrain(&lr.unlabeled, &model, &schedule, &mut |_| {}).map_err(e)?;
    let (scratch, tuned, _) = compare(&lr, &enc, &pre.encoder, 1e-3)?;
    let gap = 100.0 * (tuned - scratch);
    check(
        gap.abs() <= 2.0 && default_share > 0.5,
        format!(
            "fine-tuned {tuned:.3} vs from-scratch {scratch:.3}, gap {gap:+.1} points (within 2); STATIC fraction {default_share:.2} on default synthetic clips (>0.5), {doubled_share:.2} at twice the noise, {pretrain_share:.2} on the pretraining clips"
        ),
    )
}

fn full_size_predictor(variant: Variant) -> Result<Predictor, String> {
    let arch = Architecture::new(ModelConfig::new(variant, 50), SkeletonGraph::default_27()).map_err(e)?;
    let params = arch.init(1).map_err(e)?;
    let vocab = (0..50).map(|i| format!("SIGN{i:02}")).collect();
    Predictor::new(arch, params, vocab, default_preprocess()).map_err(e)
}

fn latency() -> Outcome {
    let clips: Vec<PoseSequence> = make_synthetic_corpus(&SynthSpec::new(5, 2, 60, 21))
        .map_err(e)?
        .samples
        .into_iter()
        .map(|s| s.pose)
        .collect();
    let mut means = Vec::new();
    for v in VARIANTS {
        let report = benchmark_latency(&full_size_predictor(v)?, &clips, 3).map_err(e)?;
        means.push((v, report.mean_ms));
    }
    let ordered = means[0].1 < means[1].1 && means[0].1 < means[2].1;
    let timing = means
        .iter()
        .map(|(v, m)| format!("{} {m:.2} ms", v.as_str()))
        .collect::<Vec<_>>()
        .join(", ");

    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()
        .map_err(e)?;
    let (windows, predicted, dropped, late) = rt.block_on(async {
        let service = Service::new(full_size_predictor(Variant::Lstm)?, ServiceConfig::default()).map_err(e)?;
        let (tx, rx) = tokio::sync::oneshot::channel();
        let local: SocketAddr = "127.0.0.1:0".parse().unwrap();
        let endpoints = Endpoints {
            stream: Some(local),
            http: None,
        };
        let task = tokio::spawn(serve(service.clone(), endpoints, move |b| {
            let _ = tx.send(b.stream);
        }));
        let addr = rx.await.map_err(e)?.ok_or("no stream endpoint")?;
        let frames = 30 * 60;
        let out = slrkit_client::replay(addr, &clips[0], frames, 30.0, true)
            .await
            .map_err(e)?;
        service.shutdown();
        task.await.map_err(e)?.map_err(e)?;
        let cfg = WindowConfig::default();
        let late = out
            .predictions()
            .enumerate()
            .filter(|(i, (at, _, _))| {
                let next = cfg.window_len - 1 + cfg.stride * (i + 1);
                next < frames && *at >= out.sent[next]
            })
            .count();
        let (w, p, d) = out
            .summary()
            .ok_or_else(|| "stream ended without a summary".to_string())?;
        Ok::<_, String>((w, p, d, late))
    })?;
    check(
        ordered && dropped == 0 && late == 0 && predicted == windows && windows > 0,
        format!(
            "mean latency {timing}; 60 s at 30 fps: {windows} windows, {predicted} answered, {dropped} dropped, {late} late"
        ),
    )
}

fn storage_and_streaming() -> Outcome {
    let dir = tempfile::tempdir().map_err(e)?;
    let mut rng = RandomSource::new(77);
    let samples: Vec<StoredSample> = (0..100)
        .map(|i| {
            let f = rng.range_inclusive(1, 120);
            let label = rng.below(7);
            StoredSample {
                id: format!("s{i:03}"),
                pose: {
                    let mut p = random_pose(&mut rng, f, 27, 0.1);
                    if i % 10 == 0 {
                        p = p.map_valid_points(|[x, y]| [x * 1e30, y * -1e-30]);
                    }
                    p
                },
                label: Some(label),
                gloss: Some(format!("G{label}")),
                signer: (i % 3 != 0).then(|| format!("signer{}", i % 5)),
            }
        })
        .collect();
    for layout in [Layout::Hdf5, Layout::Binary] {
        let dest = dir.path().join(format!("{layout:?}"));
        let mut options = PackOptions::new("roundtrip", layout);
        options.vocabulary = (0..7).map(|c| format!("G{c}")).collect();
        pack(samples.clone(), &dest, &options).map_err(e)?;
        let corpus = Corpus::open(&dest).map_err(e)?;
        for s in &samples {
            let got = corpus.get(&s.id).map_err(e)?;
            let bits = |p: &PoseSequence| p.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            if got != *s || bits(&got.pose) != bits(&s.pose) {
                return Err(format!("{layout:?}: sample {} differs after pack/get", s.id));
            }
        }
    }

    let predictor = full_size_predictor(Variant::Lstm)?;
    let cfg = WindowConfig::default();
    let mut compared = 0;
    for (i, s) in make_synthetic_corpus(&SynthSpec::new(10, 1, 150, 5))
        .map_err(e)?
        .samples
        .iter()
        .enumerate()
    {
        let offline = offline_windows(&s.pose, &cfg).map_err(e)?;
        let mut parser = SessionParser::new(cfg, 27);
        let mut streamed = Vec::new();
        for line in replay_lines(&s.pose, 100 * i as u64).map_err(e)? {
            if let Some(w) = parser.feed(&line).map_err(e)? {
                streamed.push(w);
            }
        }
        if streamed.len() != offline.len() {
            return Err(format!(
                "clip {i}: {} streamed windows, {} offline",
                streamed.len(),
                offline.len()
            ));
        }
        for (w, o) in streamed.iter().zip(&offline) {
            let (a, b) = (
                predictor.predict(&w.pose, 5).map_err(e)?,
                predictor.predict(o, 5).map_err(e)?,
            );
            let bits = |l: &[f32]| l.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            if bits(&a.logits) != bits(&b.logits) {
                return Err(format!("clip {i} window {}: logits differ", w.id));
            }
            compared += 1;
        }
    }
    check(
        true,
        format!("100 samples bit-exact in hdf5 and binary layouts; {compared} streamed windows from 10 clips match batch logits bitwise"),
    )
}
