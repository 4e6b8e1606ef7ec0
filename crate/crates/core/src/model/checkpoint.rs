//! Checkpoint container.
//!
//! ```text
//! magic     8 bytes  "EMOCTXCK"
//! version   u32 LE   1
//! meta_len  u64 LE
//! meta      meta_len bytes of JSON (CheckpointMeta)
//! data      for each entry of meta.arrays, in order: product(shape) f64 LE
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"EMOCTXCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayHeader {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub epoch: usize,
    pub seed: u64,
    /// Free-form run information (mode, loss settings, validation scores).
    #[serde(default)]
    pub extra: serde_json::Value,
    pub arrays: Vec<ArrayHeader>,
}

fn bad(path: &Path, message: impl Into<String>) -> Error {
    Error::Checkpoint { path: path.to_path_buf(), message: message.into() }
}

/// Writes atomically: the data goes to a sibling temporary file that is
/// then renamed over `path`.
pub fn save_checkpoint(path: &Path, params: &ModelParams, epoch: usize, seed: u64, extra: serde_json::Value) -> Result<()> {
    let arrays = params.arrays();
    let meta = CheckpointMeta {
        config: params.config.clone(),
        epoch,
        seed,
        extra,
        arrays: arrays.iter().map(|a| ArrayHeader { name: a.name.clone(), shape: a.shape.clone() }).collect(),
    };
    let json = serde_json::to_vec(&meta).map_err(|e| bad(path, e.to_string()))?;
    let mut buf = Vec::with_capacity(json.len() + 8 * params.num_parameters() + 20);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for a in &arrays {
        for v in a.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

type Arrays = BTreeMap<String, (Vec<usize>, Vec<f64>)>;

fn read_raw(path: &Path) -> Result<(CheckpointMeta, Arrays)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad(path, "not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(bad(path, format!("unsupported version {version}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let json = bytes.get(20..20 + len).ok_or_else(|| bad(path, "truncated metadata"))?;
    let meta: CheckpointMeta = serde_json::from_slice(json).map_err(|e| bad(path, format!("metadata: {e}")))?;
    let mut pos = 20 + len;
    let mut arrays = BTreeMap::new();
    for h in &meta.arrays {
        let n: usize = h.shape.iter().product();
        let raw = bytes.get(pos..pos + 8 * n).ok_or_else(|| bad(path, format!("truncated data for {}", h.name)))?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        arrays.insert(h.name.clone(), (h.shape.clone(), data));
        pos += 8 * n;
    }
    if pos != bytes.len() {
        return Err(bad(path, "trailing bytes"));
    }
    Ok((meta, arrays))
}

/// All arrays of a checkpoint by name, for use as an import source.
pub fn read_arrays(path: &Path) -> Result<BTreeMap<String, (Vec<usize>, Vec<f64>)>> {
    Ok(read_raw(path)?.1)
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, CheckpointMeta)> {
    let (meta, mut arrays) = read_raw(path)?;
    let mut params = ModelParams::zeros(&meta.config).map_err(|e| bad(path, e.to_string()))?;
    for a in params.arrays_mut() {
        let (shape, data) = arrays.remove(&a.name).ok_or_else(|| bad(path, format!("missing array {}", a.name)))?;
        if shape != a.shape {
            return Err(bad(path, format!("{} has shape {shape:?}, config implies {:?}", a.name, a.shape)));
        }
        *a.data = data;
    }
    if let Some(name) = arrays.keys().next() {
        return Err(bad(path, format!("unexpected array {name}")));
    }
    Ok((params, meta))
}
