use std::path::PathBuf;

use slrkit_core::gradcheck::{check_gradients, GradCheckOptions};
use slrkit_core::graph::{Graph, Reduction};
use slrkit_core::models::{
    init_parameters, load_checkpoint, save_checkpoint, transplant_encoder, Architecture, ModelConfig, Variant,
};
use slrkit_core::pose::{PoseSequence, SkeletonGraph};
use slrkit_core::rng::RandomSource;
use slrkit_core::tensor::Tensor;

fn random_pose(rng: &mut RandomSource, frames: usize, k: usize) -> PoseSequence {
    let data = (0..frames * k * 2).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
    PoseSequence::from_coords(frames, k, data, 30.0).unwrap()
}

fn toy_skeleton() -> SkeletonGraph {
    SkeletonGraph::new(5, vec![[0, 1], [1, 2], [2, 3], [1, 4]]).unwrap()
}

fn toy(variant: Variant) -> Architecture {
    Architecture::new(ModelConfig::toy(variant, 3, 5), toy_skeleton()).unwrap()
}

const ALL: [Variant; 3] = [Variant::Lstm, Variant::Transformer, Variant::Stgcn];

#[test]
fn logits_have_class_count_for_many_lengths() {
    let mut rng = RandomSource::new(3);
    for v in ALL {
        let arch = toy(v);
        let params = arch.init(1).unwrap();
        for f in [1, 2, 7, 60, 300, 512] {
            let pose = random_pose(&mut rng, f, 5);
            let logits = arch.logits(&params, &pose).unwrap();
            assert_eq!(logits.len(), 3, "{v:?} F={f}");
            assert!(logits.iter().all(|x| x.is_finite()));
        }
    }
}

#[test]
fn full_size_stgcn_shape() {
    let arch = Architecture::new(ModelConfig::new(Variant::Stgcn, 5), SkeletonGraph::default_27()).unwrap();
    let params = arch.init(0).unwrap();
    let mut rng = RandomSource::new(1);
    let logits = arch.logits(&params, &random_pose(&mut rng, 60, 27)).unwrap();
    assert_eq!(logits.len(), 5);
}

#[test]
fn empty_clip_and_wrong_keypoints_rejected() {
    let mut rng = RandomSource::new(3);
    for v in ALL {
        let arch = toy(v);
        let params = arch.init(1).unwrap();
        assert!(arch.logits(&params, &random_pose(&mut rng, 4, 6)).is_err());
    }
    let cfg = ModelConfig::toy(Variant::Stgcn, 3, 6);
    assert!(Architecture::new(cfg, toy_skeleton()).is_err());
}

#[test]
fn lstm_attention_sums_to_one_and_single_frame_is_one() {
    let arch = toy(Variant::Lstm);
    let params = arch.init(2).unwrap();
    let mut rng = RandomSource::new(4);
    for f in [1, 13] {
        let mut g = Graph::inference();
        let out = arch.forward(&mut g, &params, &random_pose(&mut rng, f, 5)).unwrap();
        let alpha = g.value(out.attention[0]);
        assert_eq!(alpha.len(), f);
        let s: f64 = alpha.iter().map(|a| *a as f64).sum();
        assert!((s - 1.0).abs() < 1e-6);
        if f == 1 {
            assert_eq!(alpha[0], 1.0);
        }
    }
}

#[test]
fn transformer_truncates_to_max_seq_and_rows_sum_to_one() {
    let arch = toy(Variant::Transformer);
    let params = arch.init(2).unwrap();
    let mut rng = RandomSource::new(5);
    let mut g = Graph::inference();
    let out = arch.forward(&mut g, &params, &random_pose(&mut rng, 300, 5)).unwrap();
    for map in &out.attention {
        assert_eq!(g.shape(*map), (256, 256));
        for row in g.value(*map).chunks(256) {
            let s: f64 = row.iter().map(|a| *a as f64).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn transformer_is_order_sensitive() {
    let arch = toy(Variant::Transformer);
    let params = arch.init(2).unwrap();
    let mut rng = RandomSource::new(6);
    let pose = random_pose(&mut rng, 12, 5);
    let reversed: Vec<usize> = (0..12).rev().collect();
    let flipped = pose.select_frames(&reversed).unwrap();
    assert_ne!(
        arch.logits(&params, &pose).unwrap(),
        arch.logits(&params, &flipped).unwrap()
    );
}

#[test]
fn stgcn_degenerate_weights_give_bias() {
    let arch = toy(Variant::Stgcn);
    let mut params = arch.init(2).unwrap();
    let names: Vec<String> = params.names().to_vec();
    for n in &names {
        if n != "head.b" && !n.ends_with(".g") {
            let shape = params.get(n).unwrap().shape().to_vec();
            params.set(n, Tensor::zeros(&shape)).unwrap();
        }
    }
    params
        .set("head.b", Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0]).unwrap())
        .unwrap();
    let mut rng = RandomSource::new(7);
    for f in [3, 20] {
        let logits = arch.logits(&params, &random_pose(&mut rng, f, 5)).unwrap();
        assert_eq!(logits, vec![0.5, -1.0, 2.0]);
    }
}

#[test]
fn stgcn_is_node_permutation_equivariant() {
    let arch = toy(Variant::Stgcn);
    let params = arch.init(9).unwrap();
    let mut rng = RandomSource::new(8);
    let pose = random_pose(&mut rng, 16, 5);
    // original node i becomes node perm[i]
    let perm = [3usize, 0, 4, 1, 2];
    let mut data = vec![0.0; pose.data().len()];
    for t in 0..16 {
        for (src, &dst) in perm.iter().enumerate() {
            let at = (t * 5 + dst) * 2;
            data[at..at + 2].copy_from_slice(&pose.point(t, src));
        }
    }
    let permuted_pose = PoseSequence::from_coords(16, 5, data, 30.0).unwrap();
    let permuted = Architecture::new(arch.config.clone(), arch.skeleton.permuted(&perm).unwrap()).unwrap();
    let a = arch.logits(&params, &pose).unwrap();
    let b = permuted.logits(&params, &permuted_pose).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-5, "{a:?} vs {b:?}");
    }
}

#[test]
fn forward_and_backward_are_bitwise_reproducible() {
    let mut rng = RandomSource::new(10);
    let pose = random_pose(&mut rng, 9, 5);
    for v in ALL {
        let arch = toy(v);
        let params = arch.init(4).unwrap();
        let run = || {
            let mut g = Graph::new();
            let out = arch.forward(&mut g, &params, &pose).unwrap();
            let loss = g.cross_entropy(out.logits, &[Some(1)], Reduction::Mean).unwrap();
            let grads = g.backward(loss).unwrap();
            let mut acc = params.clone();
            acc.accumulate(&grads).unwrap();
            (g.scalar(loss).to_bits(), acc.grad("head.w").unwrap().clone())
        };
        assert_eq!(run(), run());
    }
}

#[test]
fn toy_models_pass_gradient_check() {
    let mut rng = RandomSource::new(11);
    for v in ALL {
        let arch = toy(v);
        let params = arch.init(5).unwrap();
        let pose = random_pose(&mut rng, 6, 5);
        let report = check_gradients(
            &params,
            |g, p| {
                let out = arch.forward(g, p, &pose)?;
                g.cross_entropy(out.logits, &[Some(2)], Reduction::Mean)
            },
            &mut rng,
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed() && report.checked >= 100, "{v:?}: {report:?}");
    }
}

#[test]
fn unused_tensor_gets_exact_zero_gradient() {
    let arch = toy(Variant::Stgcn);
    let params = arch.init(1).unwrap();
    let mut rng = RandomSource::new(2);
    let pose = random_pose(&mut rng, 5, 5);
    let mut g = Graph::new();
    let out = arch.forward(&mut g, &params, &pose).unwrap();
    let loss = g.sum_all(out.embedding);
    let grads = g.backward(loss).unwrap();
    drop(g);
    let mut acc = params.clone();
    acc.zero_grads();
    acc.accumulate(&grads).unwrap();
    assert!(acc.grad("head.w").unwrap().data().iter().all(|x| *x == 0.0));
}

fn scratch(name: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join(name);
    (dir, path)
}

#[test]
fn checkpoint_round_trip_and_hash_guard() {
    let cfg = ModelConfig::toy(Variant::Lstm, 4, 5);
    let params = init_parameters(&cfg, 3).unwrap();
    let (_d, path) = scratch("m.ckpt");
    let meta = serde_json::json!({"vocabulary": ["a", "b", "c", "d"]});
    save_checkpoint(&path, &params, &meta).unwrap();
    let (back, m) = load_checkpoint(&path, Some(&cfg.config_hash()), false).unwrap();
    assert_eq!(back, params);
    assert_eq!(m.metadata, meta);
    assert_eq!(m.arch, "lstm");
    assert!(load_checkpoint(&path, Some("other"), false).is_err());
    assert!(load_checkpoint(&path, Some("other"), true).is_ok());
    std::fs::write(&path, b"garbage").unwrap();
    assert!(load_checkpoint(&path, None, false).is_err());
}

#[test]
fn transplant_copies_encoder_and_refreshes_head() {
    let src_cfg = ModelConfig::toy(Variant::Stgcn, 2, 5);
    let pretrained = init_parameters(&src_cfg, 1).unwrap();
    let target = ModelConfig::toy(Variant::Stgcn, 7, 5);
    let out = transplant_encoder(&pretrained, &target, 99, false).unwrap();
    for (name, t) in out.iter() {
        if name.starts_with("encoder.") {
            assert_eq!(t, pretrained.get(name).unwrap());
        }
    }
    assert_eq!(out.get("head.w").unwrap().shape(), &[8, 7]);

    let lstm = init_parameters(&ModelConfig::toy(Variant::Lstm, 2, 5), 1).unwrap();
    assert!(transplant_encoder(&lstm, &target, 1, false).is_err());

    let mut wide = target.clone();
    wide.stgcn.channels = vec![8, 16];
    assert!(transplant_encoder(&pretrained, &wide, 1, false).is_err());
    assert!(transplant_encoder(&pretrained, &wide, 1, true).is_ok());
}
