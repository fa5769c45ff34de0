//! Single-file checkpoint format.
//!
//! Layout: an 8-byte little-endian `u64` giving the manifest length, the
//! manifest JSON, then the raw payload. The manifest maps tensor names to
//! shape, dtype, and byte offset into the payload; payload values are
//! little-endian IEEE-754 float64, so round trips are bit-exact. A `meta`
//! block carries the model configuration needed to rebuild the bundle.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::predictor::{ModelBundle, ModelConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    /// BTreeMap so the manifest serializes with a stable key order.
    pub tensors: BTreeMap<String, TensorEntry>,
    pub meta: ModelConfig,
}

/// Serialize the bundle to `path`.
pub fn save_bundle(path: &Path, bundle: &ModelBundle) -> Result<()> {
    let mut tensors = BTreeMap::new();
    let mut payload: Vec<u8> = Vec::new();
    let views = bundle
        .language
        .tensor_views()
        .into_iter()
        .map(|(name, t)| (format!("language.{name}"), t))
        .chain(bundle.projector.tensor_views())
        .collect::<Vec<_>>();
    for (name, tensor) in views {
        let entry = TensorEntry {
            shape: vec![tensor.rows, tensor.cols],
            dtype: "f64".into(),
            offset: payload.len(),
        };
        for v in &tensor.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        if tensors.insert(name.clone(), entry).is_some() {
            return Err(Error::Validation(format!("duplicate tensor name {name}")));
        }
    }
    let manifest = Manifest {
        tensors,
        meta: bundle.cfg,
    };
    let manifest_bytes = serde_json::to_vec(&manifest)?;
    let mut file = Vec::with_capacity(8 + manifest_bytes.len() + payload.len());
    file.extend_from_slice(&(manifest_bytes.len() as u64).to_le_bytes());
    file.extend_from_slice(&manifest_bytes);
    file.extend_from_slice(&payload);
    fs::write(path, file)?;
    Ok(())
}

/// Rebuild a bundle from `path`. Bit-exact inverse of [`save_bundle`].
pub fn load_bundle(path: &Path) -> Result<ModelBundle> {
    let bytes = fs::read(path)?;
    if bytes.len() < 8 {
        return Err(Error::Validation("checkpoint too short".into()));
    }
    let manifest_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + manifest_len {
        return Err(Error::Validation("manifest truncated".into()));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[8..8 + manifest_len])?;
    let payload = &bytes[8 + manifest_len..];

    // Template bundle with the right shapes, then overwrite every tensor.
    let mut rng = crate::rng::stream(0, "checkpoint-template");
    let mut bundle = ModelBundle::init(manifest.meta, &mut rng)?;
    let fill = |prefix: &str, views: Vec<(String, &mut crate::predictor::Tensor)>| -> Result<()> {
        for (name, tensor) in views {
            let key = if prefix.is_empty() {
                name
            } else {
                format!("{prefix}.{name}")
            };
            let entry = manifest
                .tensors
                .get(&key)
                .ok_or_else(|| Error::Validation(format!("checkpoint missing tensor {key}")))?;
            if entry.dtype != "f64" {
                return Err(Error::Validation(format!(
                    "tensor {key} has dtype {}, expected f64",
                    entry.dtype
                )));
            }
            if entry.shape != vec![tensor.rows, tensor.cols] {
                return Err(Error::Validation(format!(
                    "tensor {key} has shape {:?}, expected {:?}",
                    entry.shape,
                    (tensor.rows, tensor.cols)
                )));
            }
            let n_bytes = tensor.len() * 8;
            let end = entry.offset + n_bytes;
            if end > payload.len() {
                return Err(Error::Validation(format!(
                    "tensor {key} payload out of bounds"
                )));
            }
            for (i, chunk) in payload[entry.offset..end].chunks_exact(8).enumerate() {
                tensor.data[i] = f64::from_le_bytes(chunk.try_into().unwrap());
            }
        }
        Ok(())
    };
    fill("language", bundle.language.tensor_views_mut())?;
    fill("", bundle.projector.tensor_views_mut())?;
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::VisionStub;
    use crate::rng::stream;
    use crate::vocab::Vocab;

    fn tiny_bundle(seed: u64) -> ModelBundle {
        let vocab = Vocab::new(6).unwrap();
        let stub = VisionStub {
            n_cell_values: 4,
            max_height: 2,
            max_width: 2,
        };
        let cfg = ModelConfig {
            vocab,
            d_model: 8,
            n_heads: 2,
            n_blocks: 1,
            d_ff: 16,
            max_len: 16,
            d_proj_hidden: 8,
            stub,
        };
        ModelBundle::init(cfg, &mut stream(seed, "init")).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = std::env::temp_dir().join(format!("maskdiff-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ckpt");
        let bundle = tiny_bundle(42);
        save_bundle(&path, &bundle).unwrap();
        let loaded = load_bundle(&path).unwrap();
        for ((_, a), (_, b)) in bundle
            .language
            .tensor_views()
            .into_iter()
            .zip(loaded.language.tensor_views())
        {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        for ((_, a), (_, b)) in bundle
            .projector
            .tensor_views()
            .into_iter()
            .zip(loaded.projector.tensor_views())
        {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        assert_eq!(bundle.language_checksum(), loaded.language_checksum());
        // Same bundle saved twice produces identical bytes.
        let path2 = dir.join("model2.ckpt");
        save_bundle(&path2, &bundle).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let dir = std::env::temp_dir().join(format!("maskdiff-ckpt-t-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ckpt");
        let bundle = tiny_bundle(1);
        save_bundle(&path, &bundle).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load_bundle(&path).is_err());
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
