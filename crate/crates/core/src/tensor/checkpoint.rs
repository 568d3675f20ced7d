//! Checkpoint container: `b"FCKP"`, u32 version, u32 header length, a JSON
//! header, then one FMAT record per parameter in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{AdamConfig, ParameterSet, Tensor};
use crate::embeddings::fmat::{FmatArray, FmatData};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"FCKP";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParameterSet,
    pub optimizer: Option<AdamConfig>,
    pub epoch: usize,
    pub seed: u64,
    /// Model-specific configuration.
    pub model: Value,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    params: Vec<ParamEntry>,
    optimizer: Option<AdamConfig>,
    epoch: usize,
    seed: u64,
    model: Value,
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let header = Header {
        params: ckpt
            .params
            .iter()
            .map(|(n, t)| ParamEntry {
                name: n.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        optimizer: ckpt.optimizer,
        epoch: ckpt.epoch,
        seed: ckpt.seed,
        model: ckpt.model.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::invalid(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in ckpt.params.iter() {
        let rec = FmatArray::new(t.shape().to_vec(), FmatData::F64(t.data().to_vec()), Map::new())?;
        out.extend_from_slice(&rec.encode());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let parse = |reason: String| Error::Parse {
        path: path.to_path_buf(),
        reason,
    };
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[0..4] != MAGIC {
        return Err(parse("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(parse(format!("unsupported checkpoint version {version}")));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let json = bytes
        .get(12..12 + len)
        .ok_or_else(|| parse("truncated checkpoint header".into()))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| parse(e.to_string()))?;
    let mut pos = 12 + len;
    let mut params = ParameterSet::new();
    for entry in header.params {
        let (rec, used) = FmatArray::decode(&bytes[pos..])?;
        pos += used;
        if rec.shape != entry.shape {
            return Err(parse(format!(
                "parameter {} has shape {:?}, header says {:?}",
                entry.name, rec.shape, entry.shape
            )));
        }
        params.insert(entry.name, Tensor::new(rec.shape, rec.data.to_f64())?)?;
    }
    if pos != bytes.len() {
        return Err(parse(format!("{} trailing bytes", bytes.len() - pos)));
    }
    Ok(Checkpoint {
        params,
        optimizer: header.optimizer,
        epoch: header.epoch,
        seed: header.seed,
        model: header.model,
    })
}
