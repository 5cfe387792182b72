//! Network checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   8 bytes   b"HLNET\x00\x01\x00"
//! hlen    u64       length of the JSON header in bytes
//! header  hlen      UTF-8 JSON, see `CheckpointHeader`
//! blocks            f64 values in the order listed by `header.blocks`
//! ```
//!
//! The blocks are `params` followed by `running_mean.<layer>` and
//! `running_var.<layer>` for each batch-normalized layer. Raw f64 bits are
//! stored, so a checkpoint round-trips exactly.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Architecture, DenseNet, RunningStats, BN_EPS, BN_MOMENTUM};
use crate::error::{HedgeError, Result};

const MAGIC: &[u8; 8] = b"HLNET\x00\x01\x00";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub name: String,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub architecture: Architecture,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub blocks: Vec<Block>,
    /// Caller metadata (step counters, action mapping, ...).
    pub meta: serde_json::Value,
}

pub fn write_checkpoint(net: &DenseNet, meta: serde_json::Value, path: &Path) -> Result<()> {
    let mut blocks = vec![Block {
        name: "params".into(),
        len: net.params.len(),
    }];
    let mut payload: Vec<f64> = net.params.clone();
    for (i, stats) in net.running.iter().enumerate() {
        if let Some(s) = stats {
            blocks.push(Block {
                name: format!("running_mean.{i}"),
                len: s.mean.len(),
            });
            payload.extend_from_slice(&s.mean);
            blocks.push(Block {
                name: format!("running_var.{i}"),
                len: s.var.len(),
            });
            payload.extend_from_slice(&s.var);
        }
    }
    let header = CheckpointHeader {
        format: "hedgelab-densenet".into(),
        version: 1,
        architecture: net.arch.clone(),
        bn_eps: BN_EPS,
        bn_momentum: BN_MOMENTUM,
        blocks,
        meta,
    };
    let json = serde_json::to_vec(&header)?;
    let mut bytes = Vec::with_capacity(16 + json.len() + 8 * payload.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for v in payload {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = fs::File::create(path).map_err(|e| HedgeError::io(path, e))?;
    file.write_all(&bytes).map_err(|e| HedgeError::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<(DenseNet, CheckpointHeader)> {
    if !path.exists() {
        return Err(HedgeError::MissingCheckpoint(path.to_path_buf()));
    }
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| HedgeError::io(path, e))?;
    decode(&bytes)
}

fn decode(bytes: &[u8]) -> Result<(DenseNet, CheckpointHeader)> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(HedgeError::Checkpoint("bad magic".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(16..16 + hlen)
        .ok_or_else(|| HedgeError::Checkpoint("truncated header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(body)?;
    let data = &bytes[16 + hlen..];
    let total: usize = header.blocks.iter().map(|b| b.len).sum();
    if data.len() != 8 * total {
        return Err(HedgeError::Checkpoint(format!(
            "expected {} payload bytes, found {}",
            8 * total,
            data.len()
        )));
    }
    let mut values = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));

    let mut params = Vec::new();
    let mut running: Vec<Option<RunningStats>> = vec![None; header.architecture.layers.len()];
    for block in &header.blocks {
        let vals: Vec<f64> = values.by_ref().take(block.len).collect();
        if block.name == "params" {
            params = vals;
            continue;
        }
        let (kind, layer) = block
            .name
            .split_once('.')
            .and_then(|(k, l)| l.parse::<usize>().ok().map(|l| (k, l)))
            .ok_or_else(|| HedgeError::Checkpoint(format!("unknown block {}", block.name)))?;
        let slot = running
            .get_mut(layer)
            .ok_or_else(|| HedgeError::Checkpoint(format!("block {} past last layer", block.name)))?
            .get_or_insert_with(|| RunningStats {
                mean: Vec::new(),
                var: Vec::new(),
            });
        match kind {
            "running_mean" => slot.mean = vals,
            "running_var" => slot.var = vals,
            _ => return Err(HedgeError::Checkpoint(format!("unknown block {}", block.name))),
        }
    }
    let net = DenseNet::from_parts(header.architecture.clone(), params, running)?;
    Ok((net, header))
}
