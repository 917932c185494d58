//! JSON checkpoints: a small header plus one entry per parameter holding its
//! shape and the row-major `f64` values as little-endian base64.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    shape: Vec<usize>,
    data: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model_config_hash: String,
    params: IndexMap<String, Entry>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, model_config_hash: &str) -> Self {
        let params = store
            .iter()
            .map(|(name, t)| {
                let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
                (name.to_string(), Entry { shape: t.shape().to_vec(), data: STANDARD.encode(bytes) })
            })
            .collect();
        Self { format_version: CHECKPOINT_FORMAT_VERSION, model_config_hash: model_config_hash.to_string(), params }
    }

    pub fn to_store(&self) -> Result<ParamStore> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format_version {} (expected {CHECKPOINT_FORMAT_VERSION})",
                self.format_version
            )));
        }
        let mut store = ParamStore::new();
        for (name, e) in &self.params {
            let bytes = STANDARD
                .decode(&e.data)
                .map_err(|err| Error::Checkpoint(format!("parameter `{name}`: bad base64: {err}")))?;
            let n: usize = e.shape.iter().product();
            if bytes.len() != n * 8 {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}`: shape {:?} needs {} bytes, found {}",
                    e.shape,
                    n * 8,
                    bytes.len()
                )));
            }
            let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            store
                .insert(name.clone(), Tensor::new(e.shape.clone(), data)?)
                .map_err(|err| Error::Checkpoint(err.to_string()))?;
        }
        Ok(store)
    }
}

pub fn save_checkpoint(path: &Path, store: &ParamStore, model_config_hash: &str) -> Result<()> {
    let ck = Checkpoint::from_store(store, model_config_hash);
    std::fs::write(path, serde_json::to_string_pretty(&ck)?)?;
    Ok(())
}

/// Loads a checkpoint; when `expected_hash` is given it must match the header.
pub fn load_checkpoint(path: &Path, expected_hash: Option<&str>) -> Result<ParamStore> {
    let text = std::fs::read_to_string(path)?;
    let ck: Checkpoint =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if let Some(h) = expected_hash {
        if ck.model_config_hash != h {
            return Err(Error::Checkpoint(format!(
                "model config hash mismatch: checkpoint has {}, expected {h}",
                ck.model_config_hash
            )));
        }
    }
    ck.to_store()
}
