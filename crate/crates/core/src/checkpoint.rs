//! Checkpoint format: a JSON manifest plus a raw little-endian f64 blob.
//!
//! The manifest records the architecture, shapes, seed and training
//! metadata; the blob holds every parameter's values in manifest order.
//! Round-trips are bit-exact. Each parameter carries a SHA-256 digest so a
//! corrupt blob is rejected with the offending parameter's byte range.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::hex_string;
use crate::error::{CoreError, Result};
use crate::nn::{LayerSpec, Model};
use crate::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";

/// One parameter's slot in the blob.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
    /// Byte length (8 * element count).
    pub len: u64,
    pub sha256: String,
}

/// Checkpoint manifest. Deliberately free of wall-clock fields: identical
/// runs must produce byte-identical manifests.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ModelManifest {
    pub format_version: u32,
    pub model_id: String,
    pub tool_version: String,
    pub input_shape: Vec<usize>,
    pub architecture: Vec<LayerSpec>,
    pub seed: u64,
    pub frozen: bool,
    /// Training provenance: regime, epochs, dataset checksum, and every
    /// hyperparameter that the tables depend on.
    pub training: BTreeMap<String, serde_json::Value>,
    pub params: Vec<ParamEntry>,
    pub blob_sha256: String,
}

impl ModelManifest {
    /// Hash of the canonical manifest JSON; used for idempotent retraining.
    pub fn manifest_hash(&self) -> Result<String> {
        let bytes = serde_json::to_vec(self)?;
        Ok(hex_string(&Sha256::digest(&bytes)))
    }
}

fn tensor_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(t.numel() * 8);
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn tensor_from_bytes(shape: &[usize], bytes: &[u8]) -> Result<Tensor> {
    let data: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
        .collect();
    Tensor::from_vec(shape.to_vec(), data)
}

/// Serialize a model into `(manifest, blob)`.
pub fn encode_model(
    model: &Model,
    model_id: &str,
    seed: u64,
    training: BTreeMap<String, serde_json::Value>,
) -> Result<(ModelManifest, Vec<u8>)> {
    let mut blob = Vec::new();
    let mut entries = Vec::new();
    for (name, tensor) in model.params() {
        let bytes = tensor_bytes(tensor);
        entries.push(ParamEntry {
            name,
            shape: tensor.shape().to_vec(),
            offset: blob.len() as u64,
            len: bytes.len() as u64,
            sha256: hex_string(&Sha256::digest(&bytes)),
        });
        blob.extend_from_slice(&bytes);
    }
    let manifest = ModelManifest {
        format_version: 1,
        model_id: model_id.into(),
        tool_version: crate::TOOL_VERSION.into(),
        input_shape: model.input_shape().to_vec(),
        architecture: model.specs().to_vec(),
        seed,
        frozen: model.is_frozen(),
        training,
        params: entries,
        blob_sha256: hex_string(&Sha256::digest(&blob)),
    };
    Ok((manifest, blob))
}

/// Rebuild a model from a manifest and blob, verifying every parameter's
/// digest. Architecture weights are instantiated directly from the blob;
/// the manifest seed is provenance, not an init instruction.
pub fn decode_model(manifest: &ModelManifest, blob: &[u8]) -> Result<Model> {
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(manifest.seed);
    let mut model = Model::new(&manifest.input_shape, manifest.architecture.clone(), &mut rng)?;
    let mut values = Vec::with_capacity(manifest.params.len());
    for entry in &manifest.params {
        let (start, end) = (entry.offset as usize, (entry.offset + entry.len) as usize);
        if end > blob.len() {
            return Err(CoreError::Checkpoint {
                name: entry.name.clone(),
                start: entry.offset,
                end: end as u64,
                detail: format!("blob is only {} bytes", blob.len()),
            });
        }
        let bytes = &blob[start..end];
        let digest = hex_string(&Sha256::digest(bytes));
        if digest != entry.sha256 {
            return Err(CoreError::Checkpoint {
                name: entry.name.clone(),
                start: entry.offset,
                end: end as u64,
                detail: "sha256 mismatch (corrupt or tampered blob)".into(),
            });
        }
        values.push(tensor_from_bytes(&entry.shape, bytes)?);
    }
    model.load_params(&values)?;
    model.set_frozen(manifest.frozen);
    Ok(model)
}

/// Write `manifest.json` and `params.bin` under `dir`.
pub fn save_model(
    dir: &Path,
    model: &Model,
    model_id: &str,
    seed: u64,
    training: BTreeMap<String, serde_json::Value>,
) -> Result<ModelManifest> {
    fs::create_dir_all(dir)?;
    let (manifest, blob) = encode_model(model, model_id, seed, training)?;
    fs::write(dir.join(BLOB_FILE), &blob)?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Load a checkpoint directory written by [`save_model`].
pub fn load_model(dir: &Path) -> Result<(Model, ModelManifest)> {
    let manifest: ModelManifest =
        serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    let blob = fs::read(dir.join(BLOB_FILE))?;
    let whole = hex_string(&Sha256::digest(&blob));
    if whole != manifest.blob_sha256 {
        // fall through to per-parameter verification for a precise offset
        if let Some(entry) = manifest.params.iter().find(|e| {
            let (s, t) = (e.offset as usize, (e.offset + e.len) as usize);
            t > blob.len() || hex_string(&Sha256::digest(&blob[s..t])) != e.sha256
        }) {
            return Err(CoreError::Checkpoint {
                name: entry.name.clone(),
                start: entry.offset,
                end: entry.offset + entry.len,
                detail: "sha256 mismatch (corrupt or tampered blob)".into(),
            });
        }
        return Err(CoreError::Checkpoint {
            name: "<blob>".into(),
            start: 0,
            end: blob.len() as u64,
            detail: "blob digest mismatch".into(),
        });
    }
    let model = decode_model(&manifest, &blob)?;
    Ok((model, manifest))
}

/// True when `dir` holds a loadable checkpoint whose manifest hash matches
/// `expected_hash` (used for idempotent `train` runs).
pub fn matches_existing(dir: &Path, expected_hash: &str) -> bool {
    let Ok(bytes) = fs::read(dir.join(MANIFEST_FILE)) else {
        return false;
    };
    let Ok(manifest) = serde_json::from_slice::<ModelManifest>(&bytes) else {
        return false;
    };
    manifest.manifest_hash().map(|h| h == expected_hash).unwrap_or(false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::builders;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let model = builders::build_lenet5(10, &[1, 28, 28], &mut rng).unwrap();
        let (manifest, blob) = encode_model(&model, "c", 11, BTreeMap::new()).unwrap();
        let restored = decode_model(&manifest, &blob).unwrap();
        for ((n1, p1), (n2, p2)) in model.params().iter().zip(restored.params().iter()) {
            assert_eq!(n1, n2);
            assert_eq!(p1, p2, "parameter {n1} not bit-exact");
        }
        let (manifest2, blob2) = encode_model(&restored, "c", 11, BTreeMap::new()).unwrap();
        assert_eq!(blob, blob2);
        assert_eq!(manifest.manifest_hash().unwrap(), manifest2.manifest_hash().unwrap());
    }

    #[test]
    fn corrupt_byte_is_detected_with_parameter_name() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let model = builders::build_lenet5(10, &[1, 28, 28], &mut rng).unwrap();
        let (manifest, mut blob) = encode_model(&model, "c", 12, BTreeMap::new()).unwrap();
        // flip one byte inside the second parameter
        let target = &manifest.params[1];
        let pos = (target.offset + target.len / 2) as usize;
        blob[pos] ^= 0xff;
        let err = decode_model(&manifest, &blob).unwrap_err();
        match err {
            CoreError::Checkpoint { name, start, end, .. } => {
                assert_eq!(name, target.name);
                assert!(start <= pos as u64 && (pos as u64) < end);
            }
            other => panic!("expected checkpoint error, got {other}"),
        }
    }
}
