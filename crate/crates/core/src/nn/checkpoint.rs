//! Checkpoints: a little-endian binary blob of parameters plus a JSON sidecar
//! with the metadata needed to rebuild the model.
//!
//! Blob layout: `KPSCKPT1`, then `u32` tensor count and per tensor the name
//! (`u32` length + UTF-8), `u32` rank, `u32` dims and `f32` values; then the
//! KCN as `u32` layer count and per layer `u32 out, u32 in`, `f64` weights
//! row-major and `f64` biases.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::backbone::{ReferenceCnn, ReferenceCnnConfig};
use super::kcn::{Kcn, KcnConfig, Linear};
use super::layers::{ParamStore, Tensor};
use crate::datamodel::DatasetMeta;
use crate::error::{Error, IoContext, Result};

const MAGIC: &[u8; 8] = b"KPSCKPT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointConfig {
    pub backbone: ReferenceCnnConfig,
    pub kcn: KcnConfig,
    /// Free-form training configuration echoed for provenance.
    #[serde(default)]
    pub training: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSidecar {
    pub meta: DatasetMeta,
    pub config: CheckpointConfig,
    pub epoch: usize,
    pub metric: Option<f64>,
    pub blob_sha256: String,
}

fn sidecar_path(blob: &Path) -> PathBuf {
    blob.with_extension("json")
}

pub fn encode_params(params: &ParamStore, kcn: &Kcn) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * params.num_params() + 8 * kcn.num_params());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(params.tensors.len() as u32).to_le_bytes());
    for (name, t) in params.names.iter().zip(&params.tensors) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&(kcn.layers.len() as u32).to_le_bytes());
    for l in &kcn.layers {
        let (o, i) = l.weight.dim();
        out.extend_from_slice(&(o as u32).to_le_bytes());
        out.extend_from_slice(&(i as u32).to_le_bytes());
        for &v in l.weight.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &v in l.bias.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated blob".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

pub fn decode_params(buf: &[u8], kcn_config: KcnConfig) -> Result<(ParamStore, Kcn)> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut params = ParamStore::default();
    for _ in 0..r.u32()? {
        let len = r.u32()?;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        params.push(name, Tensor { shape, data });
    }
    let mut layers = Vec::new();
    for _ in 0..r.u32()? {
        let (o, i) = (r.u32()?, r.u32()?);
        let w = (0..o * i).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let b = (0..o).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        layers.push(Linear {
            weight: Array2::from_shape_vec((o, i), w).expect("sized"),
            bias: Array1::from(b),
        });
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint("trailing bytes in blob".into()));
    }
    let expected = Kcn::zeros(kcn_config.clone());
    let same = layers.len() == expected.layers.len()
        && layers
            .iter()
            .zip(&expected.layers)
            .all(|(a, b)| a.weight.dim() == b.weight.dim());
    if !same {
        return Err(Error::Checkpoint(
            "KCN shapes do not match its config".into(),
        ));
    }
    Ok((
        params,
        Kcn {
            config: kcn_config,
            layers,
        },
    ))
}

/// Writes `<path>` (blob) and `<path>.json` (sidecar, extension replaced).
pub fn save_checkpoint(
    path: &Path,
    backbone: &ReferenceCnn,
    kcn: &Kcn,
    meta: &DatasetMeta,
    training: serde_json::Value,
    epoch: usize,
    metric: Option<f64>,
) -> Result<CheckpointSidecar> {
    use crate::nn::backbone::Backbone;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).at(dir)?;
    }
    let blob = encode_params(backbone.params(), kcn);
    let sidecar = CheckpointSidecar {
        meta: meta.clone(),
        config: CheckpointConfig {
            backbone: backbone.config.clone(),
            kcn: kcn.config.clone(),
            training,
        },
        epoch,
        metric,
        blob_sha256: hex::encode(Sha256::digest(&blob)),
    };
    fs::write(path, &blob).at(path)?;
    let side = sidecar_path(path);
    fs::write(&side, serde_json::to_vec_pretty(&sidecar)?).at(&side)?;
    Ok(sidecar)
}

pub fn load_checkpoint(path: &Path) -> Result<(ReferenceCnn, Kcn, CheckpointSidecar)> {
    let side = sidecar_path(path);
    let sidecar: CheckpointSidecar = serde_json::from_slice(&fs::read(&side).at(&side)?)?;
    let blob = fs::read(path).at(path)?;
    if hex::encode(Sha256::digest(&blob)) != sidecar.blob_sha256 {
        return Err(Error::Checkpoint(format!(
            "{} does not match its sidecar hash",
            path.display()
        )));
    }
    let (params, kcn) = decode_params(&blob, sidecar.config.kcn.clone())?;
    let mut backbone = ReferenceCnn::new(sidecar.config.backbone.clone())?;
    backbone.load_params(params)?;
    Ok((backbone, kcn, sidecar))
}
