//! Single-file checkpoint: a JSON manifest (config, schedule, named tensor
//! table) followed by raw little-endian tensor payloads, each 64-byte
//! aligned. Saving is canonical, so save -> load -> save is byte-identical.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::DualCondModel;
use crate::numerics::tensor::{Dtype, Scalar, Tensor};
use crate::params::ParamStore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::Path;

const MAGIC: &[u8; 8] = b"DCDIFF01";
const ALIGN: usize = 64;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    /// Absolute byte offset of the payload in the file.
    pub offset: usize,
    /// Payload length in bytes.
    pub len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub model: ModelConfig,
    pub train_step: usize,
    pub tensors: Vec<TensorEntry>,
}

fn align_up(v: usize) -> usize {
    v.div_ceil(ALIGN) * ALIGN
}

/// Serialize a model (sorted parameter order) into checkpoint bytes.
pub fn to_bytes<T: Scalar>(model: &DualCondModel<T>, train_step: usize) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(model.params.len());
    let mut payload_sizes = Vec::with_capacity(model.params.len());
    for (name, tensor) in model.params.iter() {
        let len = tensor.numel() * T::DTYPE.size_bytes();
        entries.push(TensorEntry {
            name: name.clone(),
            dtype: T::DTYPE,
            shape: tensor.shape().to_vec(),
            offset: 0,
            len,
        });
        payload_sizes.push(len);
    }

    // lay out offsets: they depend on the manifest length, which depends on
    // the offsets' digit count, so fix the manifest by iterating to a fixed
    // point (two passes suffice in practice; loop defensively)
    let mut manifest = Manifest {
        format: "dualcond.checkpoint".into(),
        version: 1,
        model: model.config.clone(),
        train_step,
        tensors: entries,
    };
    let mut header_len = 0usize;
    for _ in 0..8 {
        let mut offset = align_up(16 + serde_json::to_vec(&manifest)?.len());
        for (e, len) in manifest.tensors.iter_mut().zip(&payload_sizes) {
            e.offset = offset;
            offset = align_up(offset + len);
        }
        let new_len = align_up(16 + serde_json::to_vec(&manifest)?.len());
        if new_len == header_len {
            break;
        }
        header_len = new_len;
    }

    let manifest_bytes = serde_json::to_vec(&manifest)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest_bytes);
    for (entry, (_, tensor)) in manifest.tensors.iter().zip(model.params.iter()) {
        while out.len() < entry.offset {
            out.push(0);
        }
        debug_assert_eq!(out.len(), entry.offset);
        T::write_le_bytes(tensor.data(), &mut out);
    }
    Ok(out)
}

pub fn save<T: Scalar>(path: &Path, model: &DualCondModel<T>, train_step: usize) -> Result<()> {
    let bytes = to_bytes(model, train_step)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_manifest(bytes: &[u8]) -> Result<Manifest> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::format("not a checkpoint file (bad magic)"));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + mlen {
        return Err(Error::format("truncated checkpoint manifest"));
    }
    Ok(serde_json::from_slice(&bytes[16..16 + mlen])?)
}

/// Deserialize checkpoint bytes into a model of matching element type.
pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<(DualCondModel<T>, usize)> {
    let manifest = read_manifest(bytes)?;
    let mut params = ParamStore::new();
    for entry in &manifest.tensors {
        if entry.dtype != T::DTYPE {
            return Err(Error::format(format!(
                "tensor {} has dtype {:?}, expected {:?}",
                entry.name, entry.dtype, T::DTYPE
            )));
        }
        if entry.offset % ALIGN != 0 {
            return Err(Error::format(format!(
                "tensor {} payload is not {ALIGN}-byte aligned",
                entry.name
            )));
        }
        let end = entry.offset + entry.len;
        if end > bytes.len() {
            return Err(Error::format(format!(
                "tensor {} payload out of bounds",
                entry.name
            )));
        }
        let data = T::read_le_bytes(&bytes[entry.offset..end])?;
        params.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?);
    }
    Ok((
        DualCondModel {
            config: manifest.model,
            params,
        },
        manifest.train_step,
    ))
}

pub fn load<T: Scalar>(path: &Path) -> Result<(DualCondModel<T>, usize)> {
    let bytes = std::fs::read(path)?;
    from_bytes(&bytes)
}

/// Hex SHA-256 of a file; recorded in sample sidecars for reproducibility.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(sha256_hex(&bytes))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    #[test]
    fn save_load_save_is_byte_identical() {
        let model = DualCondModel::<f32>::init(ModelConfig::tiny(), 11).unwrap();
        let bytes = to_bytes(&model, 42).unwrap();
        let (loaded, step) = from_bytes::<f32>(&bytes).unwrap();
        assert_eq!(step, 42);
        let bytes2 = to_bytes(&loaded, step).unwrap();
        assert_eq!(bytes, bytes2);
        assert_eq!(model.params.len(), loaded.params.len());
        for ((na, ta), (nb, tb)) in model.params.iter().zip(loaded.params.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data());
        }
    }

    #[test]
    fn payloads_are_aligned() {
        let model = DualCondModel::<f32>::init(ModelConfig::tiny(), 3).unwrap();
        let bytes = to_bytes(&model, 0).unwrap();
        let manifest = read_manifest(&bytes).unwrap();
        assert_eq!(manifest.tensors.len(), model.params.len());
        for e in &manifest.tensors {
            assert_eq!(e.offset % 64, 0, "{} not aligned", e.name);
        }
    }

    #[test]
    fn dtype_mismatch_is_format_error() {
        let model = DualCondModel::<f32>::init(ModelConfig::tiny(), 3).unwrap();
        let bytes = to_bytes(&model, 0).unwrap();
        assert!(matches!(
            from_bytes::<f64>(&bytes),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn garbage_is_rejected() {
        assert!(from_bytes::<f32>(b"not a checkpoint").is_err());
    }
}
