//! Run directories with content-addressed artifacts and a manifest.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datamodel::DatasetMeta;
use crate::error::{Error, IoContext, Result};
use crate::nn::checkpoint::{encode_params, save_checkpoint};
use crate::nn::{Backbone, Kcn, ReferenceCnn};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    Split,
    Checkpoint,
    Metrics,
    Predictions,
    Embeddings,
    Report,
}

impl ArtifactKind {
    fn dir(self) -> &'static str {
        match self {
            ArtifactKind::Split => "splits",
            ArtifactKind::Checkpoint => "checkpoints",
            ArtifactKind::Metrics => "metrics",
            ArtifactKind::Predictions => "predictions",
            ArtifactKind::Embeddings => "embeddings",
            ArtifactKind::Report => "reports",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub kind: ArtifactKind,
    /// Relative to the run directory.
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: serde_json::Value,
    pub artifacts: Vec<ArtifactEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// A run directory. Each write refreshes `manifest.json`.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
    manifest: Manifest,
}

impl RunDir {
    /// Creates the directory if needed; the config is echoed into the
    /// manifest.
    pub fn create(root: impl Into<PathBuf>, config: serde_json::Value) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).at(&root)?;
        let run = Self {
            root,
            manifest: Manifest {
                config,
                artifacts: Vec::new(),
            },
        };
        run.flush()?;
        Ok(run)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    fn flush(&self) -> Result<()> {
        let path = self.manifest_path();
        fs::write(&path, serde_json::to_vec_pretty(&self.manifest)?).at(&path)
    }

    fn record(&mut self, kind: ArtifactKind, rel: PathBuf, bytes: &[u8]) -> Result<ArtifactEntry> {
        let entry = ArtifactEntry {
            kind,
            path: rel,
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
        };
        self.manifest.artifacts.retain(|a| a.path != entry.path);
        self.manifest.artifacts.push(entry.clone());
        self.flush()?;
        Ok(entry)
    }

    /// Writes `<kind dir>/<stem>-<hash prefix>.<ext>`.
    pub fn write_artifact(
        &mut self,
        kind: ArtifactKind,
        stem: &str,
        ext: &str,
        bytes: &[u8],
    ) -> Result<ArtifactEntry> {
        let hash = sha256_hex(bytes);
        let rel = Path::new(kind.dir()).join(format!("{stem}-{}.{ext}", &hash[..16]));
        let full = self.root.join(&rel);
        let dir = full.parent().expect("artifact path has a parent");
        fs::create_dir_all(dir).at(dir)?;
        fs::write(&full, bytes).at(&full)?;
        self.record(kind, rel, bytes)
    }

    pub fn write_json<T: Serialize>(
        &mut self,
        kind: ArtifactKind,
        stem: &str,
        value: &T,
    ) -> Result<ArtifactEntry> {
        self.write_artifact(kind, stem, "json", &serde_json::to_vec_pretty(value)?)
    }

    pub fn write_jsonl<T: Serialize>(
        &mut self,
        kind: ArtifactKind,
        stem: &str,
        rows: &[T],
    ) -> Result<ArtifactEntry> {
        self.write_artifact(kind, stem, "jsonl", &to_jsonl(rows)?)
    }

    /// Stores the checkpoint blob and its sidecar, both named by the blob
    /// hash.
    pub fn write_checkpoint(
        &mut self,
        stem: &str,
        backbone: &ReferenceCnn,
        kcn: &Kcn,
        meta: &DatasetMeta,
        training: serde_json::Value,
        epoch: usize,
        metric: Option<f64>,
    ) -> Result<ArtifactEntry> {
        let blob = encode_params(backbone.params(), kcn);
        let rel = Path::new(ArtifactKind::Checkpoint.dir())
            .join(format!("{stem}-{}.bin", &sha256_hex(&blob)[..16]));
        let full = self.root.join(&rel);
        save_checkpoint(&full, backbone, kcn, meta, training, epoch, metric)?;
        let side_rel = rel.with_extension("json");
        let side = fs::read(self.root.join(&side_rel)).at(self.root.join(&side_rel))?;
        self.record(ArtifactKind::Checkpoint, side_rel, &side)?;
        self.record(ArtifactKind::Checkpoint, rel, &blob)
    }

    pub fn full_path(&self, entry: &ArtifactEntry) -> PathBuf {
        self.root.join(&entry.path)
    }
}

pub fn to_jsonl<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).at(path)?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.at(path)?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line).map_err(|e| Error::Annotation {
            record: format!("{}:{}", path.display(), i + 1),
            message: e.to_string(),
        })?);
    }
    Ok(rows)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&fs::read(path).at(path)?)?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).at(dir)?;
    }
    fs::write(path, serde_json::to_vec_pretty(value)?).at(path)
}
