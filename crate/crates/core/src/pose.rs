//! Pose data model: keypoint sequences, keypoint selection and the skeleton graph.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Coordinates per keypoint. Only 2-D poses are supported.
pub const COORDS: usize = 2;

const DEFAULT_KEYPOINT_MAP: &str = include_str!("../data/keypoints_27.yaml");

/// A clip of `frames × keypoints × 2` coordinates with per-slot validity.
///
/// Coordinates are stored frame-major (`data[(t * K + k) * 2 + d]`). Slots
/// whose validity flag is false always hold `(0, 0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSequence {
    frames: usize,
    keypoints: usize,
    data: Vec<f32>,
    valid: Vec<bool>,
    fps: f32,
}

impl PoseSequence {
    /// Builds a sequence, zeroing the coordinates of invalid slots.
    ///
    /// Finiteness of valid slots is not checked here; [`validate_sequence`]
    /// reports it.
    pub fn new(frames: usize, keypoints: usize, mut data: Vec<f32>, valid: Vec<bool>, fps: f32) -> Result<Self> {
        if frames == 0 || keypoints == 0 {
            return Err(invalid!("pose needs at least one frame and one keypoint"));
        }
        if data.len() != frames * keypoints * COORDS {
            return Err(Error::Shape(format!(
                "pose data has {} values, expected {frames}x{keypoints}x{COORDS}",
                data.len()
            )));
        }
        if valid.len() != frames * keypoints {
            return Err(Error::Shape(format!(
                "validity mask has {} flags, expected {frames}x{keypoints}",
                valid.len()
            )));
        }
        if !(fps.is_finite() && fps > 0.0) {
            return Err(invalid!("fps must be positive, got {fps}"));
        }
        for (slot, ok) in valid.iter().enumerate() {
            if !ok {
                data[slot * COORDS] = 0.0;
                data[slot * COORDS + 1] = 0.0;
            }
        }
        Ok(Self {
            frames,
            keypoints,
            data,
            valid,
            fps,
        })
    }

    /// Fully valid sequence.
    pub fn from_coords(frames: usize, keypoints: usize, data: Vec<f32>, fps: f32) -> Result<Self> {
        Self::new(frames, keypoints, data, vec![true; frames * keypoints], fps)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn keypoints(&self) -> usize {
        self.keypoints
    }

    pub fn fps(&self) -> f32 {
        self.fps
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn point(&self, t: usize, k: usize) -> [f32; 2] {
        let o = (t * self.keypoints + k) * COORDS;
        [self.data[o], self.data[o + 1]]
    }

    pub fn is_valid(&self, t: usize, k: usize) -> bool {
        self.valid[t * self.keypoints + k]
    }

    /// Overwrites a slot; marking it invalid resets it to `(0, 0)`.
    pub fn set_point(&mut self, t: usize, k: usize, p: [f32; 2], valid: bool) {
        let slot = t * self.keypoints + k;
        self.valid[slot] = valid;
        let p = if valid { p } else { [0.0, 0.0] };
        self.data[slot * COORDS] = p[0];
        self.data[slot * COORDS + 1] = p[1];
    }

    /// Applies `f` to every valid point, leaving invalid slots untouched.
    pub fn map_valid_points(&self, mut f: impl FnMut([f32; 2]) -> [f32; 2]) -> Self {
        let mut out = self.clone();
        for slot in 0..self.frames * self.keypoints {
            if self.valid[slot] {
                let o = slot * COORDS;
                let q = f([self.data[o], self.data[o + 1]]);
                out.data[o] = q[0];
                out.data[o + 1] = q[1];
            }
        }
        out
    }

    /// New sequence made of the given source frames, in order.
    pub fn select_frames(&self, indices: &[usize]) -> Result<Self> {
        let kd = self.keypoints * COORDS;
        let mut data = Vec::with_capacity(indices.len() * kd);
        let mut valid = Vec::with_capacity(indices.len() * self.keypoints);
        for &t in indices {
            if t >= self.frames {
                return Err(Error::IndexOutOfRange {
                    what: "frames",
                    index: t,
                    len: self.frames,
                });
            }
            data.extend_from_slice(&self.data[t * kd..(t + 1) * kd]);
            valid.extend_from_slice(&self.valid[t * self.keypoints..(t + 1) * self.keypoints]);
        }
        Self::new(indices.len(), self.keypoints, data, valid, self.fps)
    }

    /// Contiguous frame range `[start, start + len)`.
    pub fn slice_frames(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.frames {
            return Err(invalid!(
                "frame range {start}..{} outside clip of {} frames",
                start + len,
                self.frames
            ));
        }
        let idx: Vec<usize> = (start..start + len).collect();
        self.select_frames(&idx)
    }

    /// Per-frame flattened rows of `K * 2` values, as consumed by sequence models.
    pub fn frame_row(&self, t: usize) -> &[f32] {
        let kd = self.keypoints * COORDS;
        &self.data[t * kd..(t + 1) * kd]
    }
}

/// A labeled clip.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub pose: PoseSequence,
    pub label: usize,
    pub gloss: String,
}

/// Source indices of the keypoints kept from a full estimator output, plus the
/// skeleton edges among them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeypointMap {
    pub format_version: u32,
    #[serde(default = "default_map_id")]
    pub id: String,
    pub indices: Vec<usize>,
    pub names: Vec<String>,
    pub edges: Vec<[usize; 2]>,
    pub shoulder_left: usize,
    pub shoulder_right: usize,
}

fn default_map_id() -> String {
    "custom".to_string()
}

impl KeypointMap {
    pub fn default_27() -> Self {
        Self::from_yaml(DEFAULT_KEYPOINT_MAP).expect("bundled keypoint map is valid")
    }

    pub fn from_yaml(text: &str) -> Result<Self> {
        let map: KeypointMap = serde_yaml::from_str(text)?;
        map.check()?;
        Ok(map)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_yaml(&text)
    }

    pub fn to_yaml(&self) -> Result<String> {
        Ok(serde_yaml::to_string(self)?)
    }

    fn check(&self) -> Result<()> {
        if self.format_version != 1 {
            return Err(invalid!(
                "unsupported keypoint map format_version {}",
                self.format_version
            ));
        }
        if self.names.len() != self.indices.len() {
            return Err(invalid!(
                "keypoint map has {} names for {} indices",
                self.names.len(),
                self.indices.len()
            ));
        }
        self.selection()?;
        self.graph()?;
        Ok(())
    }

    pub fn selection(&self) -> Result<KeypointSelection> {
        KeypointSelection::new(
            self.indices.clone(),
            self.names.clone(),
            self.shoulder_left,
            self.shoulder_right,
        )
    }

    pub fn graph(&self) -> Result<SkeletonGraph> {
        SkeletonGraph::new(self.indices.len(), self.edges.clone())
    }
}

/// Ordered list of source keypoint indices to keep.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSelection {
    indices: Vec<usize>,
    names: Vec<String>,
    shoulder_left: usize,
    shoulder_right: usize,
}

impl KeypointSelection {
    pub fn new(indices: Vec<usize>, names: Vec<String>, shoulder_left: usize, shoulder_right: usize) -> Result<Self> {
        if indices.is_empty() {
            return Err(invalid!("keypoint selection is empty"));
        }
        let unique: BTreeSet<_> = indices.iter().collect();
        if unique.len() != indices.len() {
            return Err(invalid!("keypoint selection contains duplicate indices"));
        }
        if names.len() != indices.len() {
            return Err(invalid!("names and indices differ in length"));
        }
        for (what, s) in [("shoulder_left", shoulder_left), ("shoulder_right", shoulder_right)] {
            if s >= indices.len() {
                return Err(invalid!(
                    "{what} = {s} is not a position in a selection of {}",
                    indices.len()
                ));
            }
        }
        if shoulder_left == shoulder_right {
            return Err(invalid!("shoulder indices must differ"));
        }
        Ok(Self {
            indices,
            names,
            shoulder_left,
            shoulder_right,
        })
    }

    /// Selection keeping every keypoint of a `k`-point pose, with the given
    /// shoulder positions.
    pub fn identity(k: usize, shoulder_left: usize, shoulder_right: usize) -> Result<Self> {
        Self::new(
            (0..k).collect(),
            (0..k).map(|i| format!("kp{i}")).collect(),
            shoulder_left,
            shoulder_right,
        )
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn shoulders(&self) -> (usize, usize) {
        (self.shoulder_left, self.shoulder_right)
    }
}

/// Keeps the selected keypoints, in selection order.
pub fn select_keypoints(full: &PoseSequence, sel: &KeypointSelection) -> Result<PoseSequence> {
    let k_in = full.keypoints();
    if let Some(&bad) = sel.indices().iter().find(|&&i| i >= k_in) {
        return Err(Error::IndexOutOfRange {
            what: "source keypoints",
            index: bad,
            len: k_in,
        });
    }
    let k_out = sel.len();
    let mut data = Vec::with_capacity(full.frames() * k_out * COORDS);
    let mut valid = Vec::with_capacity(full.frames() * k_out);
    for t in 0..full.frames() {
        for &k in sel.indices() {
            let p = full.point(t, k);
            data.extend_from_slice(&p);
            valid.push(full.is_valid(t, k));
        }
    }
    PoseSequence::new(full.frames(), k_out, data, valid, full.fps())
}

/// Skeleton over `node_count` keypoints with its normalized adjacency.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonGraph {
    node_count: usize,
    edges: Vec<[usize; 2]>,
    adjacency: Vec<f32>,
}

impl SkeletonGraph {
    /// Validates the edge list and computes the normalized adjacency.
    pub fn new(node_count: usize, edges: Vec<[usize; 2]>) -> Result<Self> {
        if node_count == 0 {
            return Err(invalid!("graph needs at least one node"));
        }
        let mut seen = BTreeSet::new();
        for &[a, b] in &edges {
            if a >= node_count || b >= node_count {
                return Err(invalid!("edge ({a}, {b}) references a node outside 0..{node_count}"));
            }
            if a == b {
                return Err(invalid!("edge ({a}, {b}) is a self-loop"));
            }
            if !seen.insert((a.min(b), a.max(b))) {
                return Err(invalid!("duplicate edge ({a}, {b})"));
            }
        }
        let mut g = Self {
            node_count,
            edges,
            adjacency: Vec::new(),
        };
        g.adjacency = build_adjacency(&g);
        Ok(g)
    }

    pub fn default_27() -> Self {
        KeypointMap::default_27().graph().expect("bundled skeleton is valid")
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edges(&self) -> &[[usize; 2]] {
        &self.edges
    }

    /// Row-major `K × K` normalized adjacency.
    pub fn adjacency_normalized(&self) -> &[f32] {
        &self.adjacency
    }

    /// Same graph with node `i` renamed to `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.node_count {
            return Err(invalid!("permutation length differs from node count"));
        }
        let edges = self.edges.iter().map(|&[a, b]| [perm[a], perm[b]]).collect();
        Self::new(self.node_count, edges)
    }
}

/// Symmetric normalization `D^-1/2 (A + I) D^-1/2` of the undirected edge list.
pub fn build_adjacency(graph: &SkeletonGraph) -> Vec<f32> {
    let n = graph.node_count;
    let mut a = vec![0.0f64; n * n];
    for i in 0..n {
        a[i * n + i] = 1.0;
    }
    for &[i, j] in &graph.edges {
        a[i * n + j] = 1.0;
        a[j * n + i] = 1.0;
    }
    let inv_sqrt_deg: Vec<f64> = (0..n)
        .map(|i| 1.0 / a[i * n..(i + 1) * n].iter().sum::<f64>().sqrt())
        .collect();
    let mut out = vec![0.0f32; n * n];
    for i in 0..n {
        for j in 0..=i {
            let v = (inv_sqrt_deg[i] * a[i * n + j] * inv_sqrt_deg[j]) as f32;
            out[i * n + j] = v;
            out[j * n + i] = v;
        }
    }
    out
}

/// Outcome of [`validate_sequence`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verdict {
    pub accepted: bool,
    pub missing_fraction: f64,
    pub reason: Option<String>,
}

/// Flags clips with too many missing slots or non-finite valid coordinates.
pub fn validate_sequence(pose: &PoseSequence, max_missing_fraction: f64) -> Verdict {
    let slots = pose.valid.len();
    let missing = pose.valid.iter().filter(|v| !**v).count();
    let missing_fraction = missing as f64 / slots as f64;
    let non_finite = pose
        .valid
        .iter()
        .enumerate()
        .filter(|(_, v)| **v)
        .find(|(s, _)| !(pose.data[s * COORDS].is_finite() && pose.data[s * COORDS + 1].is_finite()));
    let reason = if let Some((slot, _)) = non_finite {
        Some(format!(
            "non-finite coordinate at frame {}, keypoint {}",
            slot / pose.keypoints,
            slot % pose.keypoints
        ))
    } else if missing_fraction > max_missing_fraction {
        Some(format!(
            "{:.1}% of keypoint slots missing (limit {:.1}%)",
            100.0 * missing_fraction,
            100.0 * max_missing_fraction
        ))
    } else {
        None
    };
    Verdict {
        accepted: reason.is_none(),
        missing_fraction,
        reason,
    }
}
