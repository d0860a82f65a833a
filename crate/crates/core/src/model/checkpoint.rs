//! `MCKP` checkpoint files.
//!
//! Layout: magic `MCKP`, u32 version, u32 header length, UTF-8 JSON header,
//! then little-endian f32 values for every parameter in header order followed
//! by every norm buffer (running mean then running variance) in header order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use medconv_tensor::Tensor;
use serde::{Deserialize, Serialize};

use super::{build_model, ModelConfig, Network};
use crate::error::{Error, IoContext, Result};

const MAGIC: &[u8; 4] = b"MCKP";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub params: Vec<TensorEntry>,
    /// Norm layers; each contributes two buffers of `shape[0]` values.
    pub norms: Vec<TensorEntry>,
    /// Free-form provenance such as the producing config hash.
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

pub fn save_checkpoint(net: &Network<f32>, path: &Path, meta: &BTreeMap<String, String>) -> Result<()> {
    let header = CheckpointHeader {
        config: net.config().clone(),
        params: net
            .param_names()
            .iter()
            .zip(net.params())
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        norms: net
            .norm_names()
            .iter()
            .zip(net.norms())
            .map(|(name, r)| TensorEntry {
                name: name.clone(),
                shape: vec![r.mean.len()],
            })
            .collect(),
        meta: meta.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let floats = net.count_params() + net.norms().iter().map(|r| 2 * r.mean.len()).sum::<usize>();
    let mut buf = Vec::with_capacity(12 + json.len() + 4 * floats);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    let mut put = |vals: &[f32]| {
        for v in vals {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    };
    for p in net.params() {
        put(p.data());
    }
    for r in net.norms() {
        put(&r.mean);
        put(&r.var);
    }
    fs::write(path, buf).at(path)
}

fn split_header<'a>(path: &Path, bytes: &'a [u8]) -> Result<(CheckpointHeader, &'a [u8])> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic {
            path: path.into(),
            expected: "MCKP",
        });
    }
    if bytes.len() < 12 {
        return Err(Error::Truncated {
            path: path.into(),
            expected: 12,
            actual: bytes.len(),
        });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != VERSION {
        return Err(Error::Unsupported {
            path: path.into(),
            what: "checkpoint version",
            value: version,
        });
    }
    let len = word(8) as usize;
    if bytes.len() < 12 + len {
        return Err(Error::Truncated {
            path: path.into(),
            expected: 12 + len,
            actual: bytes.len(),
        });
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[12..12 + len])?;
    Ok((header, &bytes[12 + len..]))
}

pub fn read_checkpoint_header(path: &Path) -> Result<CheckpointHeader> {
    let bytes = fs::read(path).at(path)?;
    Ok(split_header(path, &bytes)?.0)
}

/// Loads a checkpoint, rebuilding the network from the stored config and
/// checking that the stored tensor table matches that architecture.
pub fn load_checkpoint(path: &Path) -> Result<(Network<f32>, CheckpointHeader)> {
    let bytes = fs::read(path).at(path)?;
    let (header, payload) = split_header(path, &bytes)?;
    let mut net: Network<f32> = build_model(&header.config, 0)?;
    let mismatch = |detail: String| Error::PayloadMismatch {
        path: path.into(),
        detail,
    };
    if header.params.len() != net.params().len() || header.norms.len() != net.norms().len() {
        return Err(mismatch(format!(
            "tensor table lists {} params and {} norms, config implies {} and {}",
            header.params.len(),
            header.norms.len(),
            net.params().len(),
            net.norms().len()
        )));
    }
    for (entry, (name, t)) in header.params.iter().zip(net.param_names().iter().zip(net.params())) {
        if &entry.name != name || entry.shape != t.shape() {
            return Err(mismatch(format!(
                "param {} {:?} does not match expected {} {:?}",
                entry.name,
                entry.shape,
                name,
                t.shape()
            )));
        }
    }
    for (entry, (name, r)) in header.norms.iter().zip(net.norm_names().iter().zip(net.norms())) {
        if &entry.name != name || entry.shape != [r.mean.len()] {
            return Err(mismatch(format!("norm {} {:?} does not match expected {name}", entry.name, entry.shape)));
        }
    }
    let floats = net.count_params() + net.norms().iter().map(|r| 2 * r.mean.len()).sum::<usize>();
    if payload.len() != 4 * floats {
        return Err(Error::Truncated {
            path: path.into(),
            expected: bytes.len() - payload.len() + 4 * floats,
            actual: bytes.len(),
        });
    }
    let mut values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    let mut fill = |dst: &mut [f32]| {
        for d in dst.iter_mut() {
            *d = values.next().unwrap();
        }
    };
    for p in net.params_mut() {
        let shape = p.shape().to_vec();
        let mut data = vec![0.0; p.numel()];
        fill(&mut data);
        *p = Tensor::from_vec(&shape, data)?;
    }
    for r in net.norms_mut() {
        fill(&mut r.mean);
        fill(&mut r.var);
    }
    Ok((net, header))
}
