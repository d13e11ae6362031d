//! Model checkpoints: a small binary container holding a JSON header
//! (kind, architecture, dataset dims, normalizer, config hash, tensor
//! directory) followed by raw little-endian f64 tensor data in name order.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::autodiff::TensorValue;
use crate::error::{Error, Result};
use crate::network::{Model, ModelDims, ModelKind, NetworkConfig, ParameterSet};
use crate::norm::Normalizer;

const MAGIC: &[u8; 4] = b"FCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    kind: ModelKind,
    network: NetworkConfig,
    dims: ModelDims,
    normalizer: Normalizer,
    config_hash: String,
    tensors: Vec<TensorEntry>,
}

/// Everything stored alongside the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub kind: ModelKind,
    pub network: NetworkConfig,
    pub dims: ModelDims,
    pub normalizer: Normalizer,
    pub config_hash: String,
}

pub fn save(path: &Path, model: &Model, normalizer: &Normalizer, config_hash: &str) -> Result<()> {
    let header = Header {
        kind: model.kind,
        network: model.cfg.clone(),
        dims: model.dims.clone(),
        normalizer: *normalizer,
        config_hash: config_hash.to_string(),
        tensors: model
            .params
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for (_, tensor) in model.params.iter() {
        for &v in tensor.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Model, CheckpointMeta)> {
    let mut r = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint(format!("{}: too short for a checkpoint", path.display())))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: not a checkpoint file (bad magic)",
            path.display()
        )));
    }
    let mut v4 = [0u8; 4];
    r.read_exact(&mut v4)
        .map_err(|_| Error::Checkpoint("truncated version field".into()))?;
    let version = u32::from_le_bytes(v4);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version}, this build reads only version {CHECKPOINT_VERSION}"
        )));
    }
    let mut l8 = [0u8; 8];
    r.read_exact(&mut l8)
        .map_err(|_| Error::Checkpoint("truncated header length".into()))?;
    let header_len = u64::from_le_bytes(l8) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)
        .map_err(|_| Error::Checkpoint("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Checkpoint(format!("invalid header: {e}")))?;

    let mut tensors: BTreeMap<String, TensorValue> = BTreeMap::new();
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let mut buf = vec![0u8; n * 8];
        r.read_exact(&mut buf)
            .map_err(|_| Error::Checkpoint(format!("truncated data for tensor `{}`", entry.name)))?;
        let values: Vec<f64> = buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&entry.shape), values)
            .map_err(|e| Error::Checkpoint(format!("tensor `{}`: {e}", entry.name)))?;
        if tensors.insert(entry.name.clone(), arr).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor `{}`", entry.name)));
        }
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after tensor data".into()));
    }

    header.normalizer.validate()?;
    let params = ParameterSet::from_tensors(header.kind, &header.network, &header.dims, tensors)?;
    let model = Model::from_parts(header.kind, header.network.clone(), header.dims.clone(), params)?;
    let meta = CheckpointMeta {
        kind: header.kind,
        network: header.network,
        dims: header.dims,
        normalizer: header.normalizer,
        config_hash: header.config_hash,
    };
    Ok((model, meta))
}
