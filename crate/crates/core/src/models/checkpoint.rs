//! Single-file parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "SLRKCKPT" | u32 format_version
//! str arch | str config_hash | str metadata (JSON)
//! u32 tensor_count
//! per tensor: str name | u32 ndim | u64 dims[ndim] | f32 values[prod(dims)]
//! ```
//! where `str` is a u32 byte length followed by UTF-8 bytes.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParameterSet;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"SLRKCKPT";

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub arch: String,
    pub config_hash: String,
    /// Free-form JSON stored alongside the tensors (model config, vocabulary).
    pub metadata: serde_json::Value,
}

fn put_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

pub fn save_checkpoint(path: &Path, params: &ParameterSet, metadata: &serde_json::Value) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let write = || -> std::io::Result<()> {
        let mut w = BufWriter::new(fs::File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        put_str(&mut w, params.arch())?;
        put_str(&mut w, params.config_hash())?;
        put_str(&mut w, &metadata.to_string())?;
        w.write_all(&(params.len() as u32).to_le_bytes())?;
        for (name, t) in params.iter() {
            put_str(&mut w, name)?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for d in t.shape() {
                w.write_all(&(*d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| Error::Checkpoint("file is truncated".into()))?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        if n > 1 << 26 {
            return Err(Error::Checkpoint("implausible string length".into()));
        }
        String::from_utf8(self.bytes(n)?).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }
}

/// Reads a checkpoint. With `expected_hash` set, a different stored config
/// hash is refused unless `allow_mismatch` is true.
pub fn load_checkpoint(
    path: &Path,
    expected_hash: Option<&str>,
    allow_mismatch: bool,
) -> Result<(ParameterSet, CheckpointMeta)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        inner: BufReader::new(file),
    };
    if r.bytes(8)? != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    let format_version = r.u32()?;
    if format_version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format_version {format_version}"
        )));
    }
    let arch = r.string()?;
    let config_hash = r.string()?;
    if let Some(want) = expected_hash {
        if want != config_hash && !allow_mismatch {
            return Err(Error::Checkpoint(format!(
                "config hash mismatch: checkpoint has {config_hash}, expected {want}"
            )));
        }
    }
    let metadata: serde_json::Value = serde_json::from_str(&r.string()?)?;
    let count = r.u32()?;
    let mut params = ParameterSet::new(arch.clone(), config_hash.clone());
    for _ in 0..count {
        let name = r.string()?;
        let ndim = r.u32()? as usize;
        if ndim > 8 {
            return Err(Error::Checkpoint(format!("`{name}` has {ndim} dimensions")));
        }
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |acc, d| acc.checked_mul(*d));
        let n = n
            .filter(|n| *n <= 1 << 28)
            .ok_or_else(|| Error::Checkpoint(format!("`{name}` has implausible shape {shape:?}")))?;
        let raw = r.bytes(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.insert(name, Tensor::from_vec(&shape, data)?)?;
    }
    let meta = CheckpointMeta {
        format_version,
        arch,
        config_hash,
        metadata,
    };
    Ok((params, meta))
}

/// Everything needed besides the tensors to rebuild a classifier.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierMeta {
    pub model: super::ModelConfig,
    pub vocabulary: Vec<String>,
    pub preprocess: Vec<crate::transforms::TransformConfig>,
    /// Skeleton edges over the model's keypoints.
    pub edges: Vec<[usize; 2]>,
}

impl ClassifierMeta {
    pub fn architecture(&self) -> Result<super::Architecture> {
        let skeleton = crate::pose::SkeletonGraph::new(self.model.keypoints, self.edges.clone())?;
        super::Architecture::new(self.model.clone(), skeleton)
    }
}

pub fn save_classifier(path: &Path, params: &ParameterSet, meta: &ClassifierMeta) -> Result<()> {
    if meta.vocabulary.len() != meta.model.num_classes {
        return Err(Error::Checkpoint(format!(
            "{} glosses for a {}-class model",
            meta.vocabulary.len(),
            meta.model.num_classes
        )));
    }
    let value = serde_json::json!({ "classifier": meta });
    save_checkpoint(path, params, &value)
}

/// Loads a classifier checkpoint and checks its tensors against the stored
/// model config.
pub fn load_classifier(path: &Path) -> Result<(ParameterSet, ClassifierMeta)> {
    let (params, meta) = load_checkpoint(path, None, false)?;
    let stored = meta
        .metadata
        .get("classifier")
        .ok_or_else(|| Error::Checkpoint(format!("{} holds no classifier metadata", path.display())))?;
    let info: ClassifierMeta = serde_json::from_value(stored.clone())?;
    if info.model.config_hash() != params.config_hash() {
        return Err(Error::Checkpoint(
            "stored model config does not match the tensors".into(),
        ));
    }
    let fresh = super::init_parameters(&info.model, 0)?;
    for (name, t) in fresh.iter() {
        let got = params
            .get(name)
            .map_err(|_| Error::Checkpoint(format!("checkpoint lacks tensor `{name}`")))?;
        if got.shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "`{name}` has shape {:?}, expected {:?}",
                got.shape(),
                t.shape()
            )));
        }
    }
    Ok((params, info))
}
