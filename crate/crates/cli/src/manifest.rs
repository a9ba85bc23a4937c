//! Run manifests: what ran, with which inputs, producing which outputs.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HashedPath {
    pub path: PathBuf,
    /// Object id of a file, or tree id of a directory.
    pub hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Running,
    Complete,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub command: String,
    pub status: Status,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
    pub seed: u64,
    /// Resolved configuration, YAML.
    pub config: String,
    pub inputs: Vec<HashedPath>,
    pub outputs: Vec<HashedPath>,
    /// Set when the run failed after writing some outputs.
    pub partial: bool,
    pub tool_version: String,
    pub started_unix_s: u64,
    pub wall_time_s: f64,
}

/// `sha256("blob <len>\0" ‖ content)`, git's object-id scheme over SHA-256.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

/// File: its blob id. Directory: hash over the sorted `relative-path blob-id`
/// lines of every file below it.
pub fn content_hash(path: &Path) -> Result<String> {
    if path.is_file() {
        let bytes = std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
        return Ok(blob_hash(&bytes));
    }
    let mut entries = Vec::new();
    for entry in walkdir::WalkDir::new(path).sort_by_file_name() {
        let entry = entry.with_context(|| format!("hashing {}", path.display()))?;
        if entry.file_type().is_file() {
            let rel = entry.path().strip_prefix(path).unwrap_or(entry.path());
            let bytes = std::fs::read(entry.path()).with_context(|| format!("hashing {}", entry.path().display()))?;
            entries.push(format!("{} {}\n", rel.display(), blob_hash(&bytes)));
        }
    }
    let mut h = Sha256::new();
    h.update(format!("tree {}\0", entries.len()).as_bytes());
    for e in entries {
        h.update(e.as_bytes());
    }
    Ok(hex::encode(h.finalize()))
}

/// Tracks one run and rewrites its manifest on every state change.
#[derive(Debug)]
pub struct Recorder {
    dir: PathBuf,
    manifest: RunManifest,
    started: Instant,
    previous_outputs: Vec<PathBuf>,
}

impl Recorder {
    pub fn start(command: &str, config: &RunConfig) -> Result<Self> {
        let dir = config.output.clone();
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let previous_outputs = std::fs::read_to_string(dir.join(MANIFEST_FILE))
            .ok()
            .and_then(|t| serde_json::from_str::<RunManifest>(&t).ok())
            .map(|m| m.outputs.into_iter().map(|o| o.path).collect())
            .unwrap_or_default();
        let r = Self {
            dir,
            manifest: RunManifest {
                format_version: MANIFEST_VERSION,
                command: command.to_string(),
                status: Status::Running,
                error: None,
                seed: config.seed,
                config: config.to_yaml(),
                inputs: Vec::new(),
                outputs: Vec::new(),
                partial: false,
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                started_unix_s: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
                wall_time_s: 0.0,
            },
            started: Instant::now(),
            previous_outputs,
        };
        r.write()?;
        Ok(r)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Whether an earlier run into this directory recorded `path` as an output.
    pub fn produced_before(&self, path: &Path) -> bool {
        self.previous_outputs.iter().any(|p| p == path)
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let hash = content_hash(path)?;
        self.manifest.inputs.push(HashedPath {
            path: path.to_path_buf(),
            hash,
        });
        self.write()
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        let hash = content_hash(path)?;
        self.manifest.outputs.retain(|o| o.path != path);
        self.manifest.outputs.push(HashedPath {
            path: path.to_path_buf(),
            hash,
        });
        self.write()
    }

    pub fn finish(mut self, outcome: &Result<()>) -> Result<RunManifest> {
        self.manifest.wall_time_s = self.started.elapsed().as_secs_f64();
        match outcome {
            Ok(()) => self.manifest.status = Status::Complete,
            Err(e) => {
                self.manifest.status = Status::Failed;
                self.manifest.error = Some(crate::describe(e));
                self.manifest.partial = !self.manifest.outputs.is_empty();
            }
        }
        self.write()?;
        Ok(self.manifest)
    }

    fn write(&self) -> Result<()> {
        let path = self.dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self.manifest)?;
        std::fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }
}
