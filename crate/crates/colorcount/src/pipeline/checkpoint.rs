//! Binary checkpoint format.
//!
//! Layout: 8-byte magic `CCKPT001`, a little-endian `u64` giving the length
//! of the JSON manifest, the manifest itself, then the raw `f32`
//! little-endian tensor data in exactly the order the manifest lists it.
//! Tensor names starting with `opt.` belong to optimizer state; everything
//! else is a network parameter.

use std::collections::BTreeMap;
use std::io::{Read as _, Write as _};
use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::NetworkSpec;
use crate::nn::{Optimizer, ParamStore};
use crate::quantization::QuantArtifacts;

const MAGIC: &[u8; 8] = b"CCKPT001";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub stage: u8,
    /// Epochs completed when this checkpoint was written.
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub seed: u64,
    pub config_hash: String,
    pub optimizer: String,
    pub networks: Vec<NetworkSpec>,
    pub quant: Option<QuantArtifacts>,
    pub tensors: Vec<TensorInfo>,
}

/// A checkpoint loaded back into memory.
#[derive(Debug)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub params: ParamStore,
    pub opt_state: BTreeMap<String, ArrayD<f32>>,
}

/// Serialize the parameter store plus optimizer state under the given
/// manifest header. Parameters are written in store (name) order, then
/// optimizer tensors.
pub fn save_checkpoint(
    path: &Path,
    mut manifest: CheckpointManifest,
    store: &ParamStore,
    optimizer: Option<&Optimizer>,
) -> Result<()> {
    let mut tensors: Vec<(String, ArrayD<f32>)> = store
        .ids_by_name()
        .map(|id| (store.name(id).to_string(), store.get(id).clone()))
        .collect();
    if let Some(opt) = optimizer {
        tensors.extend(opt.state_tensors(store));
    }
    manifest.tensors = tensors
        .iter()
        .map(|(name, t)| TensorInfo { name: name.clone(), shape: t.shape().to_vec() })
        .collect();
    let header = serde_json::to_vec(&manifest)?;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&(header.len() as u64).to_le_bytes()).map_err(io_err)?;
    w.write_all(&header).map_err(io_err)?;
    for (_, tensor) in &tensors {
        for v in tensor.iter() {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

/// Read a checkpoint, validating magic, tensor shapes and total length.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = std::io::BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| Error::corrupt(path, "truncated header"))?;
    if &magic != MAGIC {
        return Err(Error::corrupt(path, "bad magic"));
    }
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes).map_err(|_| Error::corrupt(path, "truncated header"))?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header = vec![0u8; header_len];
    r.read_exact(&mut header).map_err(|_| Error::corrupt(path, "truncated manifest"))?;
    let manifest: CheckpointManifest = serde_json::from_slice(&header)
        .map_err(|e| Error::corrupt(path, format!("manifest: {e}")))?;

    let mut params = ParamStore::new();
    let mut opt_state = BTreeMap::new();
    for info in &manifest.tensors {
        let count: usize = info.shape.iter().product();
        let mut bytes = vec![0u8; count * 4];
        r.read_exact(&mut bytes)
            .map_err(|_| Error::corrupt(path, format!("truncated tensor {}", info.name)))?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tensor = ArrayD::from_shape_vec(info.shape.clone(), data)
            .map_err(|e| Error::corrupt(path, format!("tensor {}: {e}", info.name)))?;
        if info.name.starts_with("opt.") {
            if opt_state.insert(info.name.clone(), tensor).is_some() {
                return Err(Error::corrupt(path, format!("duplicate tensor {}", info.name)));
            }
        } else {
            params
                .add(&info.name, tensor)
                .map_err(|_| Error::corrupt(path, format!("duplicate tensor {}", info.name)))?;
        }
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(|e| Error::io(path, e))?;
    if !rest.is_empty() {
        return Err(Error::corrupt(path, format!("{} trailing bytes", rest.len())));
    }
    Ok(Checkpoint { manifest, params, opt_state })
}

impl Checkpoint {
    /// Rebuild the optimizer recorded in the manifest with its saved state.
    pub fn optimizer(&self, lr: f64) -> Result<Optimizer> {
        let mut opt = Optimizer::from_kind(&self.manifest.optimizer, lr)?;
        opt.load_state(&self.params, &self.opt_state)?;
        Ok(opt)
    }
}
