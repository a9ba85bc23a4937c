//! Packed pose corpora with random access by sample id.
//!
//! A corpus is a directory holding `manifest.json` and one of two layouts:
//!
//! * `hdf5`: `corpus.h5`, one group per sample id containing dataset `pose`
//!   (f32, F×K×2), dataset `valid` (bool, F×K) and attributes `fps` (f32),
//!   `label` (i64, −1 when unlabeled), `gloss` and `signer` (strings, empty
//!   when absent).
//! * `binary`: `samples/<id>.bin`, see [`encode_sample`].

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use hdf5::types::VarLenUnicode;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::pose::{validate_sequence, PoseSequence, COORDS};
use crate::rng::RandomSource;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const HDF5_FILE: &str = "corpus.h5";
pub const SAMPLES_DIR: &str = "samples";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    Hdf5,
    Binary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: String,
    pub frame_count: usize,
    pub label: Option<usize>,
    pub signer_id: Option<String>,
    /// HDF5 group path or sample file path relative to the corpus directory.
    pub locator: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub format_version: u32,
    pub corpus_id: String,
    pub layout: Layout,
    /// Empty for unlabeled corpora.
    pub vocabulary: Vec<String>,
    pub keypoints: usize,
    pub fps: f32,
    pub keypoint_map_id: String,
    pub samples: Vec<SampleRecord>,
    pub splits: BTreeMap<String, Vec<String>>,
}

impl CorpusManifest {
    pub fn is_labeled(&self) -> bool {
        !self.vocabulary.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != MANIFEST_VERSION {
            return Err(Error::Corpus(format!(
                "unsupported manifest format_version {}",
                self.format_version
            )));
        }
        if self.samples.is_empty() {
            return Err(Error::Corpus("corpus has no samples".into()));
        }
        let mut glosses = HashSet::new();
        for g in &self.vocabulary {
            if !glosses.insert(g) {
                return Err(Error::Corpus(format!("duplicate gloss `{g}` in vocabulary")));
            }
        }
        let mut ids = HashSet::new();
        for r in &self.samples {
            check_id(&r.id)?;
            if !ids.insert(r.id.as_str()) {
                return Err(Error::Corpus(format!("duplicate sample id `{}`", r.id)));
            }
            if r.frame_count == 0 {
                return Err(Error::Corpus(format!("sample `{}` has no frames", r.id)));
            }
            match (r.label, self.is_labeled()) {
                (Some(l), true) if l < self.vocabulary.len() => {}
                (None, false) => {}
                (Some(l), true) => {
                    return Err(Error::Corpus(format!(
                        "sample `{}` has label {l}, vocabulary has {} glosses",
                        r.id,
                        self.vocabulary.len()
                    )))
                }
                (Some(_), false) => {
                    return Err(Error::Corpus(format!(
                        "unlabeled corpus, but sample `{}` has a label",
                        r.id
                    )))
                }
                (None, true) => return Err(Error::Corpus(format!("sample `{}` is missing its label", r.id))),
            }
        }
        for (name, members) in &self.splits {
            for m in members {
                if !ids.contains(m.as_str()) {
                    return Err(Error::Corpus(format!("split `{name}` references unknown sample `{m}`")));
                }
            }
        }
        Ok(())
    }
}

/// Sample ids name HDF5 groups and files, so path separators and dot-only
/// names are refused.
pub fn check_id(id: &str) -> Result<()> {
    if id.is_empty() || id == "." || id == ".." || id.contains(['/', '\\', '\0']) {
        return Err(invalid!("invalid sample id `{id}`"));
    }
    Ok(())
}

/// One sample as stored.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredSample {
    pub id: String,
    pub pose: PoseSequence,
    pub label: Option<usize>,
    pub gloss: Option<String>,
    pub signer: Option<String>,
}

/// Corpus-level options for [`pack`].
#[derive(Debug, Clone)]
pub struct PackOptions {
    pub corpus_id: String,
    pub layout: Layout,
    pub vocabulary: Vec<String>,
    pub keypoint_map_id: String,
    pub splits: BTreeMap<String, Vec<String>>,
    pub max_missing_fraction: f64,
}

impl PackOptions {
    pub fn new(corpus_id: impl Into<String>, layout: Layout) -> Self {
        Self {
            corpus_id: corpus_id.into(),
            layout,
            vocabulary: Vec::new(),
            keypoint_map_id: "holistic75-sparse27".into(),
            splits: BTreeMap::new(),
            max_missing_fraction: 1.0,
        }
    }
}

/// Writes a corpus directory at `dest`, which must not exist yet. On any
/// failure the partially written directory is removed.
pub fn pack<I>(samples: I, dest: &Path, options: &PackOptions) -> Result<CorpusManifest>
where
    I: IntoIterator<Item = StoredSample>,
{
    if dest.exists() {
        return Err(Error::Corpus(format!("{} already exists", dest.display())));
    }
    let partial = partial_path(dest);
    if partial.exists() {
        fs::remove_dir_all(&partial).map_err(|e| Error::io(&partial, e))?;
    }
    fs::create_dir_all(&partial).map_err(|e| Error::io(&partial, e))?;
    let result = pack_into(samples, &partial, options).and_then(|manifest| {
        fs::rename(&partial, dest).map_err(|e| Error::io(dest, e))?;
        Ok(manifest)
    });
    if result.is_err() {
        let _ = fs::remove_dir_all(&partial);
    }
    result
}

fn partial_path(dest: &Path) -> PathBuf {
    let mut name = dest.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".partial");
    dest.with_file_name(name)
}

enum Writer {
    Hdf5(hdf5::File),
    Binary(PathBuf),
}

fn pack_into<I>(samples: I, dir: &Path, options: &PackOptions) -> Result<CorpusManifest>
where
    I: IntoIterator<Item = StoredSample>,
{
    let writer = match options.layout {
        Layout::Hdf5 => Writer::Hdf5(hdf5::File::create(dir.join(HDF5_FILE))?),
        Layout::Binary => {
            let d = dir.join(SAMPLES_DIR);
            fs::create_dir(&d).map_err(|e| Error::io(&d, e))?;
            Writer::Binary(d)
        }
    };
    let labeled = !options.vocabulary.is_empty();
    let mut records = Vec::new();
    let mut shape: Option<(usize, f32)> = None;
    for s in samples {
        check_id(&s.id)?;
        let verdict = validate_sequence(&s.pose, options.max_missing_fraction);
        if !verdict.accepted {
            return Err(Error::Corpus(format!(
                "sample `{}` rejected: {}",
                s.id,
                verdict.reason.unwrap_or_default()
            )));
        }
        let (k, _) = *shape.get_or_insert((s.pose.keypoints(), s.pose.fps()));
        if s.pose.keypoints() != k {
            return Err(Error::Shape(format!(
                "sample `{}` has {} keypoints, earlier samples have {k}",
                s.id,
                s.pose.keypoints()
            )));
        }
        if labeled != s.label.is_some() {
            return Err(Error::Corpus(format!(
                "sample `{}`: label presence must match whether a vocabulary is given",
                s.id
            )));
        }
        if s.gloss.as_deref() == Some("") || s.signer.as_deref() == Some("") {
            return Err(invalid!("sample `{}`: empty gloss or signer; use none instead", s.id));
        }
        let locator = match &writer {
            Writer::Hdf5(f) => {
                write_hdf5_sample(f, &s)?;
                s.id.clone()
            }
            Writer::Binary(d) => {
                let rel = format!("{SAMPLES_DIR}/{}.bin", s.id);
                let path = d.join(format!("{}.bin", s.id));
                if path.exists() {
                    return Err(Error::Corpus(format!("duplicate sample id `{}`", s.id)));
                }
                fs::write(&path, encode_sample(&s)).map_err(|e| Error::io(&path, e))?;
                rel
            }
        };
        records.push(SampleRecord {
            id: s.id,
            frame_count: s.pose.frames(),
            label: s.label,
            signer_id: s.signer,
            locator,
        });
    }
    let Some((keypoints, fps)) = shape else {
        return Err(Error::Corpus("cannot pack an empty corpus".into()));
    };
    if let Writer::Hdf5(f) = writer {
        f.close()?;
    }
    let manifest = CorpusManifest {
        format_version: MANIFEST_VERSION,
        corpus_id: options.corpus_id.clone(),
        layout: options.layout,
        vocabulary: options.vocabulary.clone(),
        keypoints,
        fps,
        keypoint_map_id: options.keypoint_map_id.clone(),
        samples: records,
        splits: options.splits.clone(),
    };
    manifest.validate()?;
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn vlu(s: &str) -> Result<VarLenUnicode> {
    s.parse::<VarLenUnicode>()
        .map_err(|e| invalid!("string `{s}` cannot be stored: {e}"))
}

fn write_hdf5_sample(f: &hdf5::File, s: &StoredSample) -> Result<()> {
    if f.link_exists(&s.id) {
        return Err(Error::Corpus(format!("duplicate sample id `{}`", s.id)));
    }
    let (frames, k) = (s.pose.frames(), s.pose.keypoints());
    let g = f.create_group(&s.id)?;
    g.new_dataset::<f32>()
        .shape((frames, k, COORDS))
        .create("pose")?
        .write_raw(s.pose.data())?;
    g.new_dataset::<bool>()
        .shape((frames, k))
        .create("valid")?
        .write_raw(s.pose.valid())?;
    g.new_attr::<f32>().create("fps")?.write_scalar(&s.pose.fps())?;
    let label = s.label.map_or(-1, |l| l as i64);
    g.new_attr::<i64>().create("label")?.write_scalar(&label)?;
    let gloss = vlu(s.gloss.as_deref().unwrap_or(""))?;
    g.new_attr::<VarLenUnicode>().create("gloss")?.write_scalar(&gloss)?;
    let signer = vlu(s.signer.as_deref().unwrap_or(""))?;
    g.new_attr::<VarLenUnicode>().create("signer")?.write_scalar(&signer)?;
    Ok(())
}

fn read_hdf5_sample(f: &hdf5::File, id: &str) -> Result<StoredSample> {
    let g = f.group(id)?;
    let pose_ds = g.dataset("pose")?;
    let shape = pose_ds.shape();
    if shape.len() != 3 || shape[2] != COORDS {
        return Err(Error::Corpus(format!("`{id}/pose` has shape {shape:?}")));
    }
    let data: Vec<f32> = pose_ds.read_raw()?;
    let valid: Vec<bool> = g.dataset("valid")?.read_raw()?;
    let fps: f32 = g.attr("fps")?.read_scalar()?;
    let label: i64 = g.attr("label")?.read_scalar()?;
    let gloss: VarLenUnicode = g.attr("gloss")?.read_scalar()?;
    let signer: VarLenUnicode = g.attr("signer")?.read_scalar()?;
    let non_empty = |s: &str| (!s.is_empty()).then(|| s.to_string());
    Ok(StoredSample {
        id: id.to_string(),
        pose: PoseSequence::new(shape[0], shape[1], data, valid, fps)?,
        label: usize::try_from(label).ok(),
        gloss: non_empty(gloss.as_str()),
        signer: non_empty(signer.as_str()),
    })
}

const SAMPLE_MAGIC: &[u8; 8] = b"SLRKPOSE";
const SAMPLE_VERSION: u32 = 1;

fn put_opt_str(out: &mut Vec<u8>, s: Option<&str>) {
    match s {
        None => out.push(0),
        Some(s) => {
            out.push(1);
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        }
    }
}

/// Binary sample encoding, little-endian:
///
/// ```text
/// magic "SLRKPOSE" | u32 version | u32 frames | u32 keypoints | f32 fps
/// i64 label (−1 = none) | opt_str gloss | opt_str signer
/// f32 data[frames·keypoints·2] | u8 valid[frames·keypoints]
/// ```
/// where `opt_str` is a presence byte optionally followed by a u32 length
/// and UTF-8 bytes.
pub fn encode_sample(s: &StoredSample) -> Vec<u8> {
    let p = &s.pose;
    let mut out = Vec::with_capacity(64 + p.data().len() * 4 + p.valid().len());
    out.extend_from_slice(SAMPLE_MAGIC);
    out.extend_from_slice(&SAMPLE_VERSION.to_le_bytes());
    out.extend_from_slice(&(p.frames() as u32).to_le_bytes());
    out.extend_from_slice(&(p.keypoints() as u32).to_le_bytes());
    out.extend_from_slice(&p.fps().to_le_bytes());
    out.extend_from_slice(&s.label.map_or(-1i64, |l| l as i64).to_le_bytes());
    put_opt_str(&mut out, s.gloss.as_deref());
    put_opt_str(&mut out, s.signer.as_deref());
    for v in p.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend(p.valid().iter().map(|b| *b as u8));
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Corpus("sample file is truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn opt_str(&mut self) -> Result<Option<String>> {
        match self.take(1)?[0] {
            0 => Ok(None),
            1 => {
                let n = self.u32()? as usize;
                let bytes = self.take(n)?;
                String::from_utf8(bytes.to_vec())
                    .map(Some)
                    .map_err(|_| Error::Corpus("invalid UTF-8 in sample file".into()))
            }
            b => Err(Error::Corpus(format!("bad string marker {b}"))),
        }
    }
}

pub fn decode_sample(id: &str, buf: &[u8]) -> Result<StoredSample> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(8)? != SAMPLE_MAGIC {
        return Err(Error::Corpus(format!("`{id}` is not a pose sample file")));
    }
    let version = c.u32()?;
    if version != SAMPLE_VERSION {
        return Err(Error::Corpus(format!("`{id}` has unsupported version {version}")));
    }
    let frames = c.u32()? as usize;
    let k = c.u32()? as usize;
    let fps = f32::from_le_bytes(c.take(4)?.try_into().unwrap());
    let label = i64::from_le_bytes(c.take(8)?.try_into().unwrap());
    let gloss = c.opt_str()?;
    let signer = c.opt_str()?;
    let n = frames
        .checked_mul(k)
        .ok_or_else(|| Error::Corpus("implausible sample dimensions".into()))?;
    let data = c
        .take(n * COORDS * 4)?
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let valid = c.take(n)?.iter().map(|b| *b != 0).collect();
    if c.pos != buf.len() {
        return Err(Error::Corpus(format!("`{id}` has trailing bytes")));
    }
    Ok(StoredSample {
        id: id.to_string(),
        pose: PoseSequence::new(frames, k, data, valid, fps)?,
        label: usize::try_from(label).ok(),
        gloss,
        signer,
    })
}

/// Read handle over a packed corpus. Safe to share between reader threads.
pub struct Corpus {
    root: PathBuf,
    manifest: CorpusManifest,
    index: HashMap<String, usize>,
    h5: Option<hdf5::File>,
}

impl std::fmt::Debug for Corpus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Corpus")
            .field("root", &self.root)
            .field("corpus_id", &self.manifest.corpus_id)
            .field("samples", &self.manifest.samples.len())
            .finish()
    }
}

impl Corpus {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: CorpusManifest = serde_json::from_str(&text)?;
        manifest.validate()?;
        let index = manifest
            .samples
            .iter()
            .enumerate()
            .map(|(i, r)| (r.id.clone(), i))
            .collect();
        let h5 = match manifest.layout {
            Layout::Hdf5 => Some(hdf5::File::open(root.join(HDF5_FILE))?),
            Layout::Binary => None,
        };
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
            index,
            h5,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &CorpusManifest {
        &self.manifest
    }

    pub fn len(&self) -> usize {
        self.manifest.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.samples.is_empty()
    }

    pub fn record(&self, id: &str) -> Result<&SampleRecord> {
        self.index
            .get(id)
            .map(|i| &self.manifest.samples[*i])
            .ok_or_else(|| Error::UnknownSample(id.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.manifest.samples.iter().map(|r| r.id.as_str())
    }

    pub fn split(&self, name: &str) -> Result<&[String]> {
        self.manifest
            .splits
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Corpus(format!("corpus has no split `{name}`")))
    }

    pub fn get(&self, id: &str) -> Result<StoredSample> {
        let record = self.record(id)?;
        let sample = match &self.h5 {
            Some(f) => read_hdf5_sample(f, &record.locator)?,
            None => {
                let path = self.root.join(&record.locator);
                let buf = fs::read(&path).map_err(|e| Error::io(&path, e))?;
                decode_sample(id, &buf)?
            }
        };
        if sample.pose.frames() != record.frame_count {
            return Err(Error::Corpus(format!(
                "`{id}` has {} frames, manifest says {}",
                sample.pose.frames(),
                record.frame_count
            )));
        }
        Ok(StoredSample {
            id: id.to_string(),
            ..sample
        })
    }

    pub fn get_index(&self, i: usize) -> Result<StoredSample> {
        let record = self.manifest.samples.get(i).ok_or(Error::IndexOutOfRange {
            what: "samples",
            index: i,
            len: self.len(),
        })?;
        self.get(&record.id)
    }

    /// Keeps `min(k, |class|)` ids per class of `split`, drawn uniformly
    /// without replacement; classes are visited in ascending label order.
    pub fn subset_by_samples_per_class(&self, split: &str, spec: &SubsetSpec) -> Result<Vec<String>> {
        if !self.manifest.is_labeled() {
            return Err(Error::Corpus("cannot subset an unlabeled corpus by class".into()));
        }
        if spec.samples_per_class == 0 {
            return Err(invalid!("samples_per_class must be at least 1"));
        }
        let mut by_class: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
        for id in self.split(split)? {
            let label = self.record(id)?.label.expect("labeled corpus");
            by_class.entry(label).or_default().push(id);
        }
        let mut rng = RandomSource::new(spec.seed);
        let mut out = Vec::new();
        for members in by_class.values() {
            let picks = rng.sample_without_replacement(members.len(), spec.samples_per_class);
            out.extend(picks.into_iter().map(|i| members[i].to_string()));
        }
        Ok(out)
    }

    /// Draws a contiguous clip of length `L ~ U[min_len, min(max_len, F)]`
    /// from a sample picked uniformly among those with `F ≥ min_len`. With
    /// `among` set, only those ids are eligible.
    pub fn sample_pretraining_clip(
        &self,
        rng: &mut RandomSource,
        min_len: usize,
        max_len: usize,
        among: Option<&[String]>,
    ) -> Result<Clip> {
        if min_len == 0 || min_len > max_len {
            return Err(invalid!(
                "clip lengths need 1 <= min_len <= max_len, got {min_len}..{max_len}"
            ));
        }
        let eligible: Vec<&SampleRecord> = match among {
            Some(ids) => ids
                .iter()
                .map(|id| self.record(id))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .filter(|r| r.frame_count >= min_len)
                .collect(),
            None => self
                .manifest
                .samples
                .iter()
                .filter(|r| r.frame_count >= min_len)
                .collect(),
        };
        if eligible.is_empty() {
            return Err(Error::Corpus(format!("no sample has at least {min_len} frames")));
        }
        let record = eligible[rng.below(eligible.len())];
        let f = record.frame_count;
        let len = rng.range_inclusive(min_len, max_len.min(f));
        let start = rng.range_inclusive(0, f - len);
        let sample = self.get(&record.id)?;
        Ok(Clip {
            id: record.id.clone(),
            start,
            pose: sample.pose.slice_frames(start, len)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubsetSpec {
    pub samples_per_class: usize,
    pub seed: u64,
}

/// A contiguous excerpt of one stored sample.
#[derive(Debug, Clone)]
pub struct Clip {
    pub id: String,
    pub start: usize,
    pub pose: PoseSequence,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameLine {
    t: i64,
    kps: Vec<[f32; 2]>,
    valid: Option<Vec<bool>>,
}

/// Reads the JSON-lines ingestion format, one frame per line:
/// `{"t": 0, "kps": [[x, y], ...], "valid": [true, ...]}`. `valid` may be
/// omitted (all keypoints detected). Blank lines are skipped; `t` must
/// strictly increase.
pub fn read_jsonl_pose(reader: impl BufRead, fps: f32) -> Result<PoseSequence> {
    let mut data = Vec::new();
    let mut valid = Vec::new();
    let mut k = None;
    let mut last_t = None;
    let mut frames = 0;
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(Path::new("<jsonl>"), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let f: FrameLine = serde_json::from_str(&line).map_err(|e| invalid!("line {}: {e}", n + 1))?;
        if last_t.is_some_and(|t| f.t <= t) {
            return Err(invalid!("line {}: t={} does not increase", n + 1, f.t));
        }
        last_t = Some(f.t);
        let kk = *k.get_or_insert(f.kps.len());
        if f.kps.len() != kk {
            return Err(invalid!("line {}: {} keypoints, expected {kk}", n + 1, f.kps.len()));
        }
        let v = f.valid.unwrap_or_else(|| vec![true; kk]);
        if v.len() != kk {
            return Err(invalid!(
                "line {}: {} validity flags for {kk} keypoints",
                n + 1,
                v.len()
            ));
        }
        for (p, ok) in f.kps.iter().zip(&v) {
            if *ok {
                data.extend_from_slice(p);
            } else {
                data.extend_from_slice(&[0.0, 0.0]);
            }
        }
        valid.extend(v);
        frames += 1;
    }
    let k = k.ok_or_else(|| invalid!("no frames in input"))?;
    PoseSequence::new(frames, k, data, valid, fps)
}
