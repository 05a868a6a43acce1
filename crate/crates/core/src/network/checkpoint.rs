//! Versioned binary checkpoints.
//!
//! Layout: the 8-byte magic `LOCONCKP`, a little-endian `u32` format version, a
//! little-endian `u64` header length, a JSON header (network config echo, iteration
//! counter, optimizer settings, array names and lengths), then every array as raw
//! little-endian `f32` in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Group, NetworkConfig, Parameters};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig, GroupState};

const MAGIC: &[u8; 8] = b"LOCONCKP";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct OptimizerHeader {
    config: AdamConfig,
    steps: [u64; 3],
    /// Number of moment arrays per group.
    counts: [usize; 3],
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    network: NetworkConfig,
    iteration: u64,
    meta: serde_json::Value,
    optimizer: Option<OptimizerHeader>,
    arrays: Vec<ArrayEntry>,
}

/// Everything restored from a checkpoint file.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: Parameters<f32>,
    pub optimizer: Option<Adam<f32>>,
    pub iteration: u64,
    pub meta: serde_json::Value,
}

pub fn save_checkpoint(
    path: &Path,
    params: &Parameters<f32>,
    optimizer: Option<&Adam<f32>>,
    iteration: u64,
    meta: &serde_json::Value,
) -> Result<()> {
    let mut arrays: Vec<(String, &[f32])> = Vec::new();
    for g in Group::ALL {
        arrays.extend(params.group_arrays(g));
    }
    let opt_header = optimizer.map(|opt| {
        let mut steps = [0; 3];
        let mut counts = [0; 3];
        for (i, g) in Group::ALL.iter().enumerate() {
            let st = opt.group(*g);
            steps[i] = st.step;
            counts[i] = st.m.len();
            for (k, (m, v)) in st.m.iter().zip(&st.v).enumerate() {
                arrays.push((format!("adam.{}.m.{k}", g.prefix()), m));
                arrays.push((format!("adam.{}.v.{k}", g.prefix()), v));
            }
        }
        OptimizerHeader {
            config: opt.config,
            steps,
            counts,
        }
    });
    let header = Header {
        network: params.config.clone(),
        iteration,
        meta: meta.clone(),
        optimizer: opt_header,
        arrays: arrays
            .iter()
            .map(|(name, a)| ArrayEntry {
                name: name.clone(),
                len: a.len(),
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let payload: usize = arrays.iter().map(|(_, a)| a.len() * 4).sum();
    let mut buf = Vec::with_capacity(20 + header_bytes.len() + payload);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_bytes);
    for (_, a) in &arrays {
        for v in a.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn corrupt(reason: impl Into<String>) -> Error {
    Error::Checkpoint(reason.into())
}

/// Loads a checkpoint. When `expected` is given, the stored network config must match it.
pub fn load_checkpoint(path: &Path, expected: Option<&NetworkConfig>) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(corrupt(format!("{}: not a checkpoint file", path.display())));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(corrupt(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(20..20 + hlen).ok_or_else(|| corrupt("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| corrupt(format!("bad header: {e}")))?;
    if let Some(exp) = expected {
        if *exp != header.network {
            return Err(corrupt(format!(
                "network config mismatch: checkpoint has {:?}, expected {:?}",
                header.network, exp
            )));
        }
    }

    let mut cursor = 20 + hlen;
    let mut data: Vec<(String, Vec<f32>)> = Vec::with_capacity(header.arrays.len());
    for entry in &header.arrays {
        let end = cursor + entry.len * 4;
        let raw = bytes
            .get(cursor..end)
            .ok_or_else(|| corrupt(format!("truncated array {}", entry.name)))?;
        let vals = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        data.push((entry.name.clone(), vals));
        cursor = end;
    }
    if cursor != bytes.len() {
        return Err(corrupt("trailing bytes after payload"));
    }

    let mut params = Parameters::<f32>::init(&header.network, 0)?;
    let mut lookup: std::collections::HashMap<String, Vec<f32>> = data.into_iter().collect();
    let mut missing: Option<String> = None;
    for g in Group::ALL {
        params.visit_group_mut(g, &mut |name, arr| match lookup.remove(&name) {
            Some(v) if v.len() == arr.len() => *arr = v,
            _ => {
                missing.get_or_insert(name);
            }
        });
    }
    if let Some(name) = missing {
        return Err(corrupt(format!("array {name} missing or mis-sized")));
    }

    let optimizer = match header.optimizer {
        None => None,
        Some(oh) => {
            let mut adam = Adam::new(oh.config);
            for (i, g) in Group::ALL.iter().enumerate() {
                let mut st = GroupState {
                    step: oh.steps[i],
                    ..Default::default()
                };
                for k in 0..oh.counts[i] {
                    let m = lookup
                        .remove(&format!("adam.{}.m.{k}", g.prefix()))
                        .ok_or_else(|| corrupt("missing optimizer moment"))?;
                    let v = lookup
                        .remove(&format!("adam.{}.v.{k}", g.prefix()))
                        .ok_or_else(|| corrupt("missing optimizer moment"))?;
                    st.m.push(m);
                    st.v.push(v);
                }
                *adam.group_mut(*g) = st;
            }
            Some(adam)
        }
    };
    if !lookup.is_empty() {
        return Err(corrupt("checkpoint contains unknown arrays"));
    }
    Ok(Checkpoint {
        params,
        optimizer,
        iteration: header.iteration,
        meta: header.meta,
    })
}

/// Loads only the backbone from `path` into a network built from `cfg`; both heads are
/// freshly initialized from `seed`. The backbone architecture must match.
pub fn load_backbone(path: &Path, cfg: &NetworkConfig, seed: u64) -> Result<Parameters<f32>> {
    let ckpt = load_checkpoint(path, None)?;
    let src = &ckpt.params.config;
    let compatible = src.num_enc_blocks == cfg.num_enc_blocks
        && src.base_channels == cfg.base_channels
        && src.max_channels == cfg.max_channels;
    if !compatible {
        return Err(corrupt("backbone architecture mismatch"));
    }
    let mut params = Parameters::<f32>::init(cfg, seed)?;
    params.backbone = ckpt.params.backbone;
    Ok(params)
}
