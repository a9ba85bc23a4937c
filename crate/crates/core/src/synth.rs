//! Synthetic signing-like corpora on the default 27-point skeleton.
//!
//! Each class is a fixed motion program for the hands: the dominant hand
//! lifts from rest, drifts along a class-specific direction while
//! oscillating at a class-specific frequency, and holds its end position.
//! Odd classes also move the other hand, mirrored. Per clip the timing,
//! amplitude, phase and a global affine transform are randomized, and
//! Gaussian noise is added to every coordinate.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::corpus::StoredSample;
use crate::error::{invalid, Result};
use crate::pose::{PoseSequence, COORDS};
use crate::rng::{derive_seed, RandomSource};

pub const SYNTH_KEYPOINTS: usize = 27;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub classes: usize,
    pub samples_per_class: usize,
    /// Frame count range, inclusive; equal bounds give fixed-length clips.
    pub min_frames: usize,
    pub max_frames: usize,
    pub seed: u64,
    /// Standard deviation of per-coordinate noise.
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Scales every random nuisance (timing, amplitude, affine jitter).
    #[serde(default = "default_jitter")]
    pub jitter: f64,
    /// Largest per-clip in-plane rotation in radians, before `jitter` scaling.
    #[serde(default = "default_rotation")]
    pub rotation: f64,
    /// Drop labels and glosses (pretraining corpora).
    #[serde(default)]
    pub unlabeled: bool,
    /// Fraction of samples per class for the `train` and `val` splits; the
    /// rest goes to `test`.
    #[serde(default = "default_split")]
    pub split: [f64; 2],
}

fn default_noise() -> f64 {
    2e-4
}

fn default_jitter() -> f64 {
    1.0
}

fn default_rotation() -> f64 {
    0.15
}

fn default_split() -> [f64; 2] {
    [0.6, 0.2]
}

impl SynthSpec {
    pub fn new(classes: usize, samples_per_class: usize, frames: usize, seed: u64) -> Self {
        Self {
            classes,
            samples_per_class,
            min_frames: frames,
            max_frames: frames,
            seed,
            noise: default_noise(),
            jitter: default_jitter(),
            rotation: default_rotation(),
            unlabeled: false,
            split: default_split(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(invalid!("synthetic corpus needs at least 2 classes"));
        }
        if self.samples_per_class == 0 {
            return Err(invalid!("samples_per_class must be positive"));
        }
        if self.min_frames < 2 || self.min_frames > self.max_frames {
            return Err(invalid!("frame range must satisfy 2 <= min_frames <= max_frames"));
        }
        if !(self.noise >= 0.0 && self.jitter >= 0.0 && self.rotation >= 0.0) {
            return Err(invalid!("noise, jitter and rotation must be non-negative"));
        }
        let [tr, va] = self.split;
        if !(tr >= 0.0 && va >= 0.0 && tr + va <= 1.0) {
            return Err(invalid!("split fractions must be non-negative and sum to at most 1"));
        }
        Ok(())
    }

    pub fn vocabulary(&self) -> Vec<String> {
        if self.unlabeled {
            Vec::new()
        } else {
            (0..self.classes).map(|c| format!("SIGN{c:02}")).collect()
        }
    }
}

/// Generated samples plus their `train`/`val`/`test` split assignment.
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub samples: Vec<StoredSample>,
    pub vocabulary: Vec<String>,
    pub splits: BTreeMap<String, Vec<String>>,
}

/// Resting skeleton in normalized image coordinates (x right, y down).
fn rest_pose() -> [[f64; 2]; SYNTH_KEYPOINTS] {
    let mut p = [[0.0; 2]; SYNTH_KEYPOINTS];
    let body: [[f64; 2]; 11] = [
        [0.50, 0.30],
        [0.52, 0.28],
        [0.48, 0.28],
        [0.54, 0.29],
        [0.46, 0.29],
        [0.60, 0.42],
        [0.40, 0.42],
        [0.63, 0.56],
        [0.37, 0.56],
        [0.62, 0.70],
        [0.38, 0.70],
    ];
    p[..11].copy_from_slice(&body);
    for (wrist, start, mirror) in [(9, 11, -1.0), (10, 19, 1.0)] {
        let w = p[wrist];
        for (j, o) in hand_offsets(1.0).iter().enumerate() {
            p[start + j] = [w[0] + mirror * o[0], w[1] + o[1]];
        }
    }
    p
}

/// Hand points relative to the wrist for the right hand; `open` spreads fingers.
fn hand_offsets(open: f64) -> [[f64; 2]; 8] {
    let s = 0.01 + 0.015 * open;
    [
        [0.0, 0.0],
        [-s, 0.015],
        [-0.005, 0.03],
        [-0.005 - s * 0.5, 0.055],
        [0.005, 0.03],
        [0.005, 0.06],
        [0.015, 0.027],
        [0.015 + s * 0.5, 0.045],
    ]
}

struct ClassProgram {
    drift: [f64; 2],
    cycles: f64,
    ratio: f64,
    two_hands: bool,
    open: f64,
}

fn program(c: usize, classes: usize) -> ClassProgram {
    let angle = 2.0 * PI * c as f64 / classes as f64;
    ClassProgram {
        drift: [angle.cos(), angle.sin()],
        cycles: 1.0 + (c % 3) as f64,
        ratio: if c.is_multiple_of(2) { 1.0 } else { 0.35 },
        two_hands: c % 2 == 1,
        open: ((c * 7) % 5) as f64 / 4.0,
    }
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

/// One clip of class `class` with `frames` frames, nuisance settings from `spec`.
pub fn synth_clip(class: usize, frames: usize, spec: &SynthSpec, rng: &mut RandomSource) -> Result<PoseSequence> {
    let (noise, jitter) = (spec.noise, spec.jitter);
    let prog = program(class, spec.classes);
    let rest = rest_pose();
    let f = frames as f64;
    let onset = f * rng.uniform(0.05, 0.05 + 0.15 * jitter);
    let lift_len = f * 0.12;
    let active_end = f * (1.0 - rng.uniform(0.05, 0.05 + 0.15 * jitter));
    let amp = 1.0 + rng.uniform(-0.2, 0.2) * jitter;
    let phase = rng.uniform(-0.4, 0.4) * jitter;
    let theta = rng.uniform(-1.0, 1.0) * spec.rotation * jitter;
    let scale = 1.0 + rng.uniform(-0.15, 0.15) * jitter;
    let shift = [rng.uniform(-0.05, 0.05) * jitter, rng.uniform(-0.05, 0.05) * jitter];
    let (sin, cos) = theta.sin_cos();
    let center = [0.5, 0.5];

    let mut data = Vec::with_capacity(frames * SYNTH_KEYPOINTS * COORDS);
    for t in 0..frames {
        let t = t as f64;
        let lift = smoothstep((t - onset) / lift_len);
        let s = ((t - onset - lift_len) / (active_end - onset - lift_len)).clamp(0.0, 1.0);
        let arg = 2.0 * PI * prog.cycles * s + phase;
        let osc = [0.04 * arg.sin(), 0.04 * prog.ratio * (arg.cos() - phase.cos())];
        let mut disp = [0.0; 2];
        for d in 0..2 {
            let raise = [-0.08, -0.16][d];
            disp[d] = lift * raise + amp * (0.12 * s * prog.drift[d] + lift * osc[d]);
        }
        let mut pose = rest;
        let wiggle = 0.5 * (arg * 0.5).sin() * lift;
        move_arm(&mut pose, 10, 8, 19, disp, 1.0, prog.open, wiggle);
        if prog.two_hands {
            move_arm(&mut pose, 9, 7, 11, [-disp[0], disp[1]], -1.0, prog.open, wiggle);
        }
        for p in pose.iter() {
            let x = (p[0] - center[0]) * scale;
            let y = (p[1] - center[1]) * scale;
            let rx = cos * x - sin * y + center[0] + shift[0];
            let ry = sin * x + cos * y + center[1] + shift[1];
            data.push((rx + noise * rng.normal()) as f32);
            data.push((ry + noise * rng.normal()) as f32);
        }
    }
    PoseSequence::from_coords(frames, SYNTH_KEYPOINTS, data, 30.0)
}

#[allow(clippy::too_many_arguments)]
fn move_arm(
    pose: &mut [[f64; 2]; SYNTH_KEYPOINTS],
    wrist: usize,
    elbow: usize,
    hand: usize,
    disp: [f64; 2],
    mirror: f64,
    open: f64,
    wiggle: f64,
) {
    for d in 0..2 {
        pose[wrist][d] += disp[d];
        pose[elbow][d] += 0.5 * disp[d];
    }
    let (s, c) = wiggle.sin_cos();
    let w = pose[wrist];
    for (j, o) in hand_offsets(open).iter().enumerate() {
        let x = c * o[0] - s * o[1];
        let y = s * o[0] + c * o[1];
        pose[hand + j] = [w[0] + mirror * x, w[1] + y];
    }
}

/// Generates a whole corpus. Sample `i` of class `c` is drawn from its own
/// stream, so changing the sample count does not reshuffle earlier samples.
pub fn make_synthetic_corpus(spec: &SynthSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let vocabulary = spec.vocabulary();
    let mut samples = Vec::with_capacity(spec.classes * spec.samples_per_class);
    let mut splits: BTreeMap<String, Vec<String>> = ["train", "val", "test"]
        .iter()
        .map(|s| (s.to_string(), Vec::new()))
        .collect();
    let n_train = (spec.samples_per_class as f64 * spec.split[0]).round() as usize;
    let n_val = (spec.samples_per_class as f64 * spec.split[1]).round() as usize;
    for i in 0..spec.samples_per_class {
        for c in 0..spec.classes {
            let id = format!("c{c:02}_s{i:04}");
            let mut rng = RandomSource::new(derive_seed(spec.seed, &id));
            let frames = rng.range_inclusive(spec.min_frames, spec.max_frames);
            let pose = synth_clip(c, frames, spec, &mut rng)?;
            let split = if i < n_train {
                "train"
            } else if i < n_train + n_val {
                "val"
            } else {
                "test"
            };
            splits.get_mut(split).unwrap().push(id.clone());
            samples.push(StoredSample {
                id,
                pose,
                label: (!spec.unlabeled).then_some(c),
                gloss: (!spec.unlabeled).then(|| vocabulary[c].clone()),
                signer: Some(format!("synth{}", i % 4)),
            });
        }
    }
    splits.retain(|_, v| !v.is_empty());
    Ok(SynthCorpus {
        samples,
        vocabulary,
        splits,
    })
}

/// Per-clip mean frame-to-frame displacement, flattened to `K·2` values.
pub fn mean_motion(pose: &PoseSequence) -> Vec<f64> {
    let w = pose.keypoints() * COORDS;
    let mut out = vec![0.0; w];
    if pose.frames() < 2 {
        return out;
    }
    for t in 1..pose.frames() {
        let (prev, cur) = (pose.frame_row(t - 1), pose.frame_row(t));
        for j in 0..w {
            out[j] += (cur[j] - prev[j]) as f64;
        }
    }
    let n = (pose.frames() - 1) as f64;
    out.iter_mut().for_each(|v| *v /= n);
    out
}

/// Accuracy of a nearest-centroid classifier over [`mean_motion`] features,
/// fitted on `train` and scored on `test`. Ties go to the lowest class.
pub fn nearest_centroid_accuracy(train: &[(&PoseSequence, usize)], test: &[(&PoseSequence, usize)]) -> Result<f64> {
    if train.is_empty() || test.is_empty() {
        return Err(invalid!("nearest-centroid oracle needs train and test samples"));
    }
    let classes = train.iter().chain(test).map(|(_, c)| *c).max().unwrap() + 1;
    let width = train[0].0.keypoints() * COORDS;
    let mut sums = vec![vec![0.0; width]; classes];
    let mut counts = vec![0usize; classes];
    for (p, c) in train {
        for (s, v) in sums[*c].iter_mut().zip(mean_motion(p)) {
            *s += v;
        }
        counts[*c] += 1;
    }
    let mut correct = 0;
    for (p, c) in test {
        let m = mean_motion(p);
        let mut best = (f64::INFINITY, 0);
        for k in 0..classes {
            if counts[k] == 0 {
                continue;
            }
            let d: f64 = sums[k]
                .iter()
                .zip(&m)
                .map(|(s, v)| (s / counts[k] as f64 - v).powi(2))
                .sum();
            if d < best.0 {
                best = (d, k);
            }
        }
        correct += (best.1 == *c) as usize;
    }
    Ok(correct as f64 / test.len() as f64)
}
