use proptest::prelude::*;
use slrkit_core::pose::PoseSequence;
use slrkit_core::rng::RandomSource;
use slrkit_core::transforms::*;

fn pose_strategy() -> impl Strategy<Value = PoseSequence> {
    (1usize..6, 2usize..6).prop_flat_map(|(f, k)| {
        (
            prop::collection::vec(-1.0f32..1.0, f * k * 2),
            prop::collection::vec(prop::bool::weighted(0.9), f * k),
        )
            .prop_map(move |(data, valid)| PoseSequence::new(f, k, data, valid, 30.0).unwrap())
    })
}

fn dist(a: [f32; 2], b: [f32; 2]) -> f64 {
    let (dx, dy) = (a[0] as f64 - b[0] as f64, a[1] as f64 - b[1] as f64);
    (dx * dx + dy * dy).sqrt()
}

fn angle(u: [f64; 2], v: [f64; 2]) -> f64 {
    (u[0] * v[1] - u[1] * v[0]).atan2(u[0] * v[0] + u[1] * v[1])
}

fn diff(p: &PoseSequence, t: usize, a: usize, b: usize) -> [f64; 2] {
    let (pa, pb) = (p.point(t, a), p.point(t, b));
    [pa[0] as f64 - pb[0] as f64, pa[1] as f64 - pb[1] as f64]
}

/// Linear interpolation along one track, found by scanning outwards.
fn interpolate_oracle(pose: &PoseSequence) -> Option<Vec<f32>> {
    let (f, k) = (pose.frames(), pose.keypoints());
    let mut out = pose.data().to_vec();
    for kp in 0..k {
        if !(0..f).any(|t| pose.is_valid(t, kp)) {
            return None;
        }
        for t in 0..f {
            if pose.is_valid(t, kp) {
                continue;
            }
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
                (None, None) => unreachable!(),
            };
            out[(t * k + kp) * 2] = p[0];
            out[(t * k + kp) * 2 + 1] = p[1];
        }
    }
    Some(out)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn rotation_preserves_distances(pose in pose_strategy(), theta in -3.2f64..3.2) {
        let r = rotate_by(&pose, theta);
        for t in 0..pose.frames() {
            for a in 0..pose.keypoints() {
                for b in 0..a {
                    prop_assert!((dist(pose.point(t, a), pose.point(t, b)) - dist(r.point(t, a), r.point(t, b))).abs() <= 1e-5);
                }
            }
        }
        prop_assert_eq!(r.valid(), pose.valid());
    }

    #[test]
    fn shear_keeps_y_exactly(pose in pose_strategy(), s in -0.5f32..0.5) {
        let out = shear_by(&pose, s);
        for (a, b) in pose.data().chunks(2).zip(out.data().chunks(2)) {
            prop_assert_eq!(a[1].to_bits(), b[1].to_bits());
        }
    }

    #[test]
    fn scale_preserves_angles(seed in any::<u64>(), factor in 0.1f32..10.0) {
        let mut rng = RandomSource::new(seed);
        let data = (0..4 * 3 * 2).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
        let pose = PoseSequence::from_coords(4, 3, data, 30.0).unwrap();
        let out = scale_by(&pose, factor);
        for t in 0..4 {
            let (u, v) = (diff(&pose, t, 0, 1), diff(&pose, t, 2, 1));
            let (su, sv) = (diff(&out, t, 0, 1), diff(&out, t, 2, 1));
            if u.iter().chain(&v).all(|c| c.abs() > 1e-2) {
                prop_assert!((angle(u, v) - angle(su, sv)).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn normalization_ignores_translation_and_scale(
        pose in pose_strategy(),
        gaps in prop::collection::vec((0.2f32..1.0, -0.2f32..0.2), 5),
        a in 0.25f32..8.0,
        b in (-4.0f32..4.0, -4.0f32..4.0),
    ) {
        // Shoulders at least 0.2 apart; a vanishing span amplifies rounding.
        let mut pose = pose;
        for (t, gap) in gaps.iter().enumerate().take(pose.frames()) {
            let [x, y] = pose.point(t, 0);
            let valid = pose.is_valid(t, 1);
            pose.set_point(t, 1, [x + gap.0, y + gap.1], valid);
        }
        let moved = pose.map_valid_points(|[x, y]| [a * x + b.0, a * y + b.1]);
        let (l, r) = (0, 1);
        let both = (0..pose.frames()).filter(|&t| pose.is_valid(t, l) && pose.is_valid(t, r)).count();
        match normalize_by_shoulders(&pose, l, r, 1.0) {
            Ok(n) => {
                let m = normalize_by_shoulders(&moved, l, r, 1.0).unwrap();
                for (x, y) in n.data().iter().zip(m.data()) {
                    prop_assert!((x - y).abs() <= 1e-4, "{} vs {}", x, y);
                }
            }
            Err(_) => prop_assert!(both == 0 || normalize_by_shoulders(&moved, l, r, 1.0).is_err()),
        }
    }

    #[test]
    fn augmentations_are_seed_deterministic(pose in pose_strategy(), seed in any::<u64>()) {
        let pipeline = vec![
            TransformConfig::Rotate { max_angle: 0.3 },
            TransformConfig::Shear { max_shear: 0.15 },
            TransformConfig::Scale { lo: 0.8, hi: 1.2 },
            TransformConfig::RandomShift { max_fraction: 0.5 },
        ];
        let run = || {
            let mut rng = RandomSource::new(seed);
            let mut p = pose.clone();
            for t in &pipeline {
                p = t.apply(&p, &mut rng).unwrap();
            }
            p
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn subsample_keeps_order_and_is_idempotent(f in 1usize..200, n in 1usize..60) {
        let idx = uniform_indices(f.max(n + 1), n);
        prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
        let data = (0..f * 2).map(|i| i as f32).collect();
        let pose = PoseSequence::from_coords(f, 1, data, 30.0).unwrap();
        let once = uniform_temporal_subsample(&pose, n).unwrap();
        prop_assert_eq!(uniform_temporal_subsample(&once, n).unwrap(), once.clone());
        let xs: Vec<f32> = once.data().chunks(2).map(|c| c[0]).collect();
        prop_assert!(xs.windows(2).all(|w| w[0] < w[1]));
    }
}

#[test]
fn interpolation_matches_oracle_on_every_small_mask() {
    let mut rng = RandomSource::new(7);
    for f in 1..=8usize {
        for k in 1..=3usize {
            let slots = f * k;
            let data: Vec<f32> = (0..slots * 2).map(|_| rng.uniform(-5.0, 5.0) as f32).collect();
            for mask in 0u32..1 << slots {
                let valid: Vec<bool> = (0..slots).map(|i| mask >> i & 1 == 1).collect();
                let pose = PoseSequence::new(f, k, data.clone(), valid, 30.0).unwrap();
                match (interpolate_missing(&pose), interpolate_oracle(&pose)) {
                    (Ok(got), Some(want)) => {
                        assert_eq!(got.data(), &want[..], "F={f} K={k} mask={mask:b}");
                        assert!(got.valid().iter().all(|v| *v));
                    }
                    (Err(_), None) => {}
                    (got, want) => panic!("F={f} K={k} mask={mask:b}: {got:?} vs {want:?}"),
                }
            }
        }
    }
    let full = PoseSequence::from_coords(3, 2, (0..12).map(|i| i as f32).collect(), 30.0).unwrap();
    assert_eq!(interpolate_missing(&full).unwrap(), full);
}
