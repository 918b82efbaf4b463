//! Binary checkpoint container.
//!
//! Layout: magic `NXTMCKPT`, version (u32 LE), header length (u32 LE), a
//! UTF-8 JSON header holding the model config, weight mode and tensor
//! manifest, then every tensor as little-endian f32 in manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::weights::{AdapterConfig, AdapterSet, BackboneWeights, LoraPair};
use super::{Model, ModelConfig, Role, WeightMode, Weights};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::numerics::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"NXTMCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    /// Byte offset relative to the start of the blob section.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointInfo {
    pub config: ModelConfig,
    pub mode: WeightMode,
    pub adapter: Option<AdapterConfig>,
    pub roles: Vec<Role>,
    pub tensors: Vec<TensorEntry>,
    /// Free-form provenance, e.g. the resolved run configuration.
    pub meta: serde_json::Value,
    /// Absolute file offset of the blob section.
    #[serde(skip)]
    pub data_start: u64,
}

fn prefixed<'a>(p: &str, v: Vec<(String, &'a Matrix)>) -> Vec<(String, &'a Matrix)> {
    v.into_iter().map(|(n, m)| (format!("{p}.{n}"), m)).collect()
}

fn named_tensors(model: &Model) -> Vec<(String, &Matrix)> {
    let mut out = Vec::new();
    match model.weights() {
        Weights::Full { decoder, encoder } => {
            out.extend(prefixed("decoder", decoder.named()));
            if let Some(e) = encoder {
                out.extend(prefixed("encoder", e.named()));
            }
        }
        Weights::Adapter {
            backbone,
            decoder,
            encoder,
        } => {
            out.extend(prefixed("backbone", backbone.named()));
            if let Some(d) = decoder {
                out.extend(prefixed("decoder", d.named()));
            }
            if let Some(e) = encoder {
                out.extend(prefixed("encoder", e.named()));
            }
        }
    }
    out
}

pub fn checkpoint_to_bytes(model: &Model, meta: &serde_json::Value) -> Result<Vec<u8>> {
    let tensors = named_tensors(model);
    let mut offset = 0u64;
    let manifest: Vec<TensorEntry> = tensors
        .iter()
        .map(|(name, m)| {
            let e = TensorEntry {
                name: name.clone(),
                shape: [m.rows(), m.cols()],
                offset,
            };
            offset += 4 * m.len() as u64;
            e
        })
        .collect();
    let adapter = match model.weights() {
        Weights::Adapter { decoder, encoder, .. } => decoder.as_ref().or(encoder.as_ref()).map(|a| a.config),
        Weights::Full { .. } => None,
    };
    let info = CheckpointInfo {
        config: model.config().clone(),
        mode: model.mode(),
        adapter,
        roles: [Role::Decoder, Role::Encoder]
            .into_iter()
            .filter(|&r| model.has_role(r))
            .collect(),
        tensors: manifest,
        meta: meta.clone(),
        data_start: 0,
    };
    let header = serde_json::to_vec(&info)?;
    let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, m) in &tensors {
        for x in m.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

fn parse_header(bytes: &[u8]) -> Result<CheckpointInfo> {
    if bytes.len() < 16 {
        return Err(Error::format(bytes.len() as u64, "file shorter than the fixed preamble"));
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::format(0, "bad magic, not a checkpoint"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let hlen = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let end = 16 + hlen;
    if bytes.len() < end {
        return Err(Error::format(bytes.len() as u64, "truncated header"));
    }
    let mut info: CheckpointInfo = serde_json::from_slice(&bytes[16..end])
        .map_err(|e| Error::format(16, format!("header: {e}")))?;
    info.data_start = end as u64;
    Ok(info)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(Model, serde_json::Value)> {
    let info = parse_header(bytes)?;
    let start = info.data_start as usize;
    let mut tensors = std::collections::HashMap::new();
    let mut expected_offset = 0u64;
    for t in &info.tensors {
        if t.offset != expected_offset {
            return Err(Error::format(start as u64 + t.offset, format!("tensor {} out of order", t.name)));
        }
        let n = t.shape[0] * t.shape[1];
        let lo = start + t.offset as usize;
        let hi = lo + 4 * n;
        if hi > bytes.len() {
            return Err(Error::format(bytes.len() as u64, format!("truncated tensor {}", t.name)));
        }
        let data = bytes[lo..hi]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.insert(t.name.clone(), Matrix::from_vec(t.shape[0], t.shape[1], data)?);
        expected_offset += 4 * n as u64;
    }
    let end = start as u64 + expected_offset;
    if end != bytes.len() as u64 {
        return Err(Error::format(end, "trailing bytes after the last tensor"));
    }

    let cfg = &info.config;
    let mut take = |name: String| -> Result<Matrix> {
        tensors
            .remove(&name)
            .ok_or_else(|| Error::format(info.data_start, format!("missing tensor {name}")))
    };
    let has = |r: Role| info.roles.contains(&r);
    let weights = match info.mode {
        WeightMode::Full => Weights::Full {
            decoder: read_backbone(cfg, "decoder", &mut take)?,
            encoder: if has(Role::Encoder) {
                Some(read_backbone(cfg, "encoder", &mut take)?)
            } else {
                None
            },
        },
        WeightMode::Adapter => {
            let ac = info
                .adapter
                .ok_or_else(|| Error::format(16, "adapter checkpoint without adapter config"))?;
            let backbone = read_backbone(cfg, "backbone", &mut take)?;
            let mut read = |role: Role| -> Result<Option<AdapterSet>> {
                if has(role) {
                    read_adapter(cfg, ac, role, &mut take).map(Some)
                } else {
                    Ok(None)
                }
            };
            let decoder = read(Role::Decoder)?;
            let encoder = read(Role::Encoder)?;
            Weights::Adapter {
                backbone,
                decoder,
                encoder,
            }
        }
    };
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::format(info.data_start, format!("unexpected tensor {extra}")));
    }
    Ok((Model::from_parts(info.config.clone(), weights)?, info.meta))
}

fn read_backbone(
    cfg: &ModelConfig,
    prefix: &str,
    take: &mut impl FnMut(String) -> Result<Matrix>,
) -> Result<BackboneWeights> {
    let mut w = BackboneWeights::<f32>::zeros(cfg);
    let names: Vec<String> = w.named().into_iter().map(|(n, _)| n).collect();
    for (name, slot) in names.into_iter().zip(w.params_mut()) {
        *slot = take(format!("{prefix}.{name}"))?;
    }
    Ok(w)
}

fn read_adapter(
    cfg: &ModelConfig,
    ac: AdapterConfig,
    role: Role,
    take: &mut impl FnMut(String) -> Result<Matrix>,
) -> Result<AdapterSet> {
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for i in 0..cfg.n_layers {
        let mut pairs = Vec::with_capacity(4);
        for t in super::weights::ADAPTER_TARGETS {
            let a = take(format!("{}.layers.{i}.lora_{t}.a", role.name()))?;
            let b = take(format!("{}.layers.{i}.lora_{t}.b", role.name()))?;
            pairs.push(LoraPair { a, b });
        }
        layers.push(pairs.try_into().expect("four targets"));
    }
    Ok(AdapterSet {
        role,
        config: ac,
        layers,
    })
}

pub fn save_checkpoint(path: &Path, model: &Model, meta: &serde_json::Value) -> Result<()> {
    write_atomic(path, &checkpoint_to_bytes(model, meta)?)
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, serde_json::Value)> {
    checkpoint_from_bytes(&std::fs::read(path)?)
}

/// Header and manifest only, without materializing tensors.
pub fn read_checkpoint_info(path: &Path) -> Result<CheckpointInfo> {
    parse_header(&std::fs::read(path)?)
}
