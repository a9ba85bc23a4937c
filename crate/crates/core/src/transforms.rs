//! Preprocessing and augmentation transforms over [`PoseSequence`].
//!
//! Random parameters are drawn once per clip. Every transform touches only
//! valid keypoints and passes validity flags through, except
//! [`interpolate_missing`] which fills every slot.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::pose::{KeypointSelection, PoseSequence, COORDS};
use crate::rng::RandomSource;

/// One step of a transform pipeline, as written in run configs:
/// `{name: rotate, params: {max_angle: 1.047}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", content = "params", rename_all = "snake_case", deny_unknown_fields)]
pub enum TransformConfig {
    DimensionNormalize {
        width: f32,
        height: f32,
    },
    CenterAndScaleNormalize {
        #[serde(default = "one")]
        reference_span: f32,
        #[serde(default = "default_shoulder_left")]
        shoulder_left: usize,
        #[serde(default = "default_shoulder_right")]
        shoulder_right: usize,
    },
    InterpolateMissing,
    Shear {
        #[serde(default = "default_shear")]
        max_shear: f32,
    },
    Rotate {
        #[serde(default = "default_angle")]
        max_angle: f32,
    },
    Scale {
        #[serde(default = "default_scale_lo")]
        lo: f32,
        #[serde(default = "default_scale_hi")]
        hi: f32,
    },
    RandomShift {
        max_fraction: f32,
    },
    UniformTemporalSubsample {
        target_frames: usize,
    },
    RandomTemporalSubsample {
        target_frames: usize,
    },
}

fn one() -> f32 {
    1.0
}
fn default_shoulder_left() -> usize {
    5
}
fn default_shoulder_right() -> usize {
    6
}
fn default_shear() -> f32 {
    0.15
}
fn default_angle() -> f32 {
    std::f32::consts::FRAC_PI_3
}
fn default_scale_lo() -> f32 {
    0.8
}
fn default_scale_hi() -> f32 {
    1.2
}

impl TransformConfig {
    pub fn name(&self) -> &'static str {
        match self {
            Self::DimensionNormalize { .. } => "dimension_normalize",
            Self::CenterAndScaleNormalize { .. } => "center_and_scale_normalize",
            Self::InterpolateMissing => "interpolate_missing",
            Self::Shear { .. } => "shear",
            Self::Rotate { .. } => "rotate",
            Self::Scale { .. } => "scale",
            Self::RandomShift { .. } => "random_shift",
            Self::UniformTemporalSubsample { .. } => "uniform_temporal_subsample",
            Self::RandomTemporalSubsample { .. } => "random_temporal_subsample",
        }
    }

    /// True for steps that never consume randomness.
    pub fn is_deterministic(&self) -> bool {
        matches!(
            self,
            Self::DimensionNormalize { .. }
                | Self::CenterAndScaleNormalize { .. }
                | Self::InterpolateMissing
                | Self::UniformTemporalSubsample { .. }
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(format!("{}: {msg}", self.name())));
        match *self {
            Self::DimensionNormalize { width, height } => {
                if !(width > 0.0 && height > 0.0) {
                    return bad(format!("dimensions must be positive, got {width}x{height}"));
                }
            }
            Self::CenterAndScaleNormalize {
                reference_span,
                shoulder_left,
                shoulder_right,
            } => {
                if !(reference_span > 0.0) {
                    return bad("reference_span must be positive".into());
                }
                if shoulder_left == shoulder_right {
                    return bad("shoulder keypoints must differ".into());
                }
            }
            Self::InterpolateMissing => {}
            Self::Shear { max_shear } => {
                if !(max_shear >= 0.0) {
                    return bad("max_shear must be non-negative".into());
                }
            }
            Self::Rotate { max_angle } => {
                if !(0.0..=std::f32::consts::PI).contains(&max_angle) {
                    return bad("max_angle must lie in [0, pi]".into());
                }
            }
            Self::Scale { lo, hi } => {
                if !(lo > 0.0 && lo <= hi) {
                    return bad(format!("need 0 < lo <= hi, got [{lo}, {hi}]"));
                }
            }
            Self::RandomShift { max_fraction } => {
                if !(0.0..1.0).contains(&max_fraction) {
                    return bad("max_fraction must lie in [0, 1)".into());
                }
            }
            Self::UniformTemporalSubsample { target_frames } | Self::RandomTemporalSubsample { target_frames } => {
                if target_frames == 0 {
                    return bad("target_frames must be at least 1".into());
                }
            }
        }
        Ok(())
    }

    pub fn apply(&self, pose: &PoseSequence, rng: &mut RandomSource) -> Result<PoseSequence> {
        self.validate()?;
        match *self {
            Self::DimensionNormalize { width, height } => dimension_normalize(pose, width, height),
            Self::CenterAndScaleNormalize {
                reference_span,
                shoulder_left,
                shoulder_right,
            } => normalize_by_shoulders(pose, shoulder_left, shoulder_right, reference_span),
            Self::InterpolateMissing => interpolate_missing(pose),
            Self::Shear { max_shear } => Ok(shear(pose, rng, max_shear)),
            Self::Rotate { max_angle } => Ok(rotate(pose, rng, max_angle)),
            Self::Scale { lo, hi } => scale(pose, rng, lo, hi),
            Self::RandomShift { max_fraction } => random_shift(pose, rng, max_fraction),
            Self::UniformTemporalSubsample { target_frames } => uniform_temporal_subsample(pose, target_frames),
            Self::RandomTemporalSubsample { target_frames } => random_temporal_subsample(pose, rng, target_frames),
        }
    }
}

/// Applies the pipeline in order, stopping at the first error.
pub fn compose(pipeline: &[TransformConfig], pose: &PoseSequence, rng: &mut RandomSource) -> Result<PoseSequence> {
    let (first, rest) = pipeline
        .split_first()
        .ok_or_else(|| invalid!("transform pipeline is empty"))?;
    let mut out = first.apply(pose, rng)?;
    for step in rest {
        out = step.apply(&out, rng)?;
    }
    Ok(out)
}

pub fn dimension_normalize(pose: &PoseSequence, width: f32, height: f32) -> Result<PoseSequence> {
    if !(width > 0.0 && height > 0.0) {
        return Err(invalid!("frame dimensions must be positive, got {width}x{height}"));
    }
    Ok(pose.map_valid_points(|[x, y]| [x / width, y / height]))
}

/// Centers the mean shoulder midpoint at the origin and scales the mean
/// shoulder span to `reference_span`.
pub fn center_and_scale_normalize(
    pose: &PoseSequence,
    sel: &KeypointSelection,
    reference_span: f32,
) -> Result<PoseSequence> {
    let (l, r) = sel.shoulders();
    normalize_by_shoulders(pose, l, r, reference_span)
}

pub fn normalize_by_shoulders(
    pose: &PoseSequence,
    left: usize,
    right: usize,
    reference_span: f32,
) -> Result<PoseSequence> {
    if !(reference_span > 0.0) {
        return Err(invalid!("reference_span must be positive"));
    }
    let k = pose.keypoints();
    for s in [left, right] {
        if s >= k {
            return Err(Error::IndexOutOfRange {
                what: "keypoints",
                index: s,
                len: k,
            });
        }
    }
    let (mut span, mut cx, mut cy, mut n) = (0.0f64, 0.0f64, 0.0f64, 0usize);
    for t in 0..pose.frames() {
        if pose.is_valid(t, left) && pose.is_valid(t, right) {
            let [lx, ly] = pose.point(t, left).map(f64::from);
            let [rx, ry] = pose.point(t, right).map(f64::from);
            span += ((lx - rx).powi(2) + (ly - ry).powi(2)).sqrt();
            cx += 0.5 * (lx + rx);
            cy += 0.5 * (ly + ry);
            n += 1;
        }
    }
    if n == 0 {
        return Err(invalid!("shoulder keypoints are never simultaneously valid"));
    }
    let n = n as f64;
    let (span, cx, cy) = (span / n, cx / n, cy / n);
    if !(span > 0.0) || !span.is_finite() {
        return Err(Error::Numerical("degenerate pose: mean shoulder span is zero".into()));
    }
    let factor = reference_span as f64 / span;
    Ok(pose.map_valid_points(|[x, y]| [((x as f64 - cx) * factor) as f32, ((y as f64 - cy) * factor) as f32]))
}

/// Fills invalid slots per keypoint track: linear between the nearest valid
/// neighbors, nearest-copy at the ends. The output is fully valid.
pub fn interpolate_missing(pose: &PoseSequence) -> Result<PoseSequence> {
    let (f, k) = (pose.frames(), pose.keypoints());
    let mut data = pose.data().to_vec();
    for kp in 0..k {
        let valid_frames: Vec<usize> = (0..f).filter(|&t| pose.is_valid(t, kp)).collect();
        let (&first, &last) = match (valid_frames.first(), valid_frames.last()) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(invalid!("keypoint {kp} has no valid frame to interpolate from")),
        };
        let mut put = |t: usize, p: [f32; 2]| {
            let o = (t * k + kp) * COORDS;
            data[o] = p[0];
            data[o + 1] = p[1];
        };
        for t in 0..first {
            put(t, pose.point(first, kp));
        }
        for t in last + 1..f {
            put(t, pose.point(last, kp));
        }
        for pair in valid_frames.windows(2) {
            let (l, r) = (pair[0], pair[1]);
            let (pl, pr) = (pose.point(l, kp), pose.point(r, kp));
            for t in l + 1..r {
                let w = (t - l) as f64 / (r - l) as f64;
                put(
                    t,
                    [
                        (pl[0] as f64 + w * (pr[0] as f64 - pl[0] as f64)) as f32,
                        (pl[1] as f64 + w * (pr[1] as f64 - pl[1] as f64)) as f32,
                    ],
                );
            }
        }
    }
    PoseSequence::new(f, k, data, vec![true; f * k], pose.fps())
}

/// `(x, y) -> (x + s·y, y)`.
pub fn shear_by(pose: &PoseSequence, s: f32) -> PoseSequence {
    pose.map_valid_points(|[x, y]| [x + s * y, y])
}

pub fn shear(pose: &PoseSequence, rng: &mut RandomSource, max_shear: f32) -> PoseSequence {
    let s = rng.uniform(-max_shear as f64, max_shear as f64) as f32;
    shear_by(pose, s)
}

/// Counter-clockwise (in x-right/y-up terms) rotation about the origin.
pub fn rotate_by(pose: &PoseSequence, theta: f64) -> PoseSequence {
    let (s, c) = theta.sin_cos();
    pose.map_valid_points(|[x, y]| {
        let (x, y) = (x as f64, y as f64);
        [(c * x - s * y) as f32, (s * x + c * y) as f32]
    })
}

pub fn rotate(pose: &PoseSequence, rng: &mut RandomSource, max_angle: f32) -> PoseSequence {
    let theta = rng.uniform(-max_angle as f64, max_angle as f64);
    rotate_by(pose, theta)
}

pub fn scale_by(pose: &PoseSequence, factor: f32) -> PoseSequence {
    pose.map_valid_points(|[x, y]| [x * factor, y * factor])
}

pub fn scale(pose: &PoseSequence, rng: &mut RandomSource, lo: f32, hi: f32) -> Result<PoseSequence> {
    if !(lo > 0.0 && lo <= hi) {
        return Err(invalid!("scale range needs 0 < lo <= hi, got [{lo}, {hi}]"));
    }
    let factor = rng.uniform(lo as f64, hi as f64) as f32;
    Ok(scale_by(pose, factor))
}

/// Circular shift of the frame axis: frame `t` moves to `(t + offset) mod F`.
pub fn shift_by(pose: &PoseSequence, offset: usize) -> PoseSequence {
    let f = pose.frames();
    let idx: Vec<usize> = (0..f).map(|t| (t + f - offset % f) % f).collect();
    pose.select_frames(&idx).expect("indices are in range")
}

pub fn random_shift(pose: &PoseSequence, rng: &mut RandomSource, max_fraction: f32) -> Result<PoseSequence> {
    if !(0.0..1.0).contains(&max_fraction) {
        return Err(invalid!("max_fraction must lie in [0, 1), got {max_fraction}"));
    }
    let max_offset = (pose.frames() as f64 * max_fraction as f64).floor() as usize;
    let offset = rng.range_inclusive(0, max_offset);
    Ok(shift_by(pose, offset))
}

/// Source frame indices kept by [`uniform_temporal_subsample`].
///
/// Index `i` is `i·(F−1)/(n−1)` rounded half-to-even, computed exactly in
/// integers, so the first and last frames are always kept.
pub fn uniform_indices(frames: usize, n: usize) -> Vec<usize> {
    if n == 1 {
        return vec![0];
    }
    let den = n - 1;
    (0..n)
        .map(|i| {
            let num = i * (frames - 1);
            let (q, r) = (num / den, num % den);
            match (2 * r).cmp(&den) {
                std::cmp::Ordering::Less => q,
                std::cmp::Ordering::Greater => q + 1,
                std::cmp::Ordering::Equal => q + (q & 1),
            }
        })
        .collect()
}

pub fn uniform_temporal_subsample(pose: &PoseSequence, n: usize) -> Result<PoseSequence> {
    if n == 0 {
        return Err(invalid!("target frame count must be at least 1"));
    }
    if pose.frames() <= n {
        return Ok(pose.clone());
    }
    pose.select_frames(&uniform_indices(pose.frames(), n))
}

pub fn random_temporal_subsample(pose: &PoseSequence, rng: &mut RandomSource, n: usize) -> Result<PoseSequence> {
    if n == 0 {
        return Err(invalid!("target frame count must be at least 1"));
    }
    if pose.frames() <= n {
        return Ok(pose.clone());
    }
    let start = rng.range_inclusive(0, pose.frames() - n);
    pose.slice_frames(start, n)
}
