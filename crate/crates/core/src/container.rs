//! Tensor container file format: a magic tag and version byte, a
//! length-prefixed JSON manifest (tensor names, shapes, offsets, per-blob
//! checksums, and a free-form metadata map), then the raw little-endian f32
//! blobs in manifest order. Writes are byte-deterministic: tensors keep
//! insertion order and metadata is sorted.

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelWeights, WMat};
use crate::util::sha256_hex;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

pub const CONTAINER_MAGIC: &[u8; 4] = b"SDM1";
pub const CONTAINER_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    /// Byte offset into the blob region.
    offset: u64,
    byte_len: u64,
    sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    tensors: Vec<TensorRecord>,
    metadata: BTreeMap<String, String>,
}

/// In-memory container: named f32 tensors in insertion order plus metadata.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorContainer {
    tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
    metadata: BTreeMap<String, String>,
}

impl TensorContainer {
    pub fn new() -> Self {
        TensorContainer::default()
    }

    /// Add a tensor; names must be unique and the shape must match the data.
    pub fn insert(&mut self, name: &str, shape: Vec<usize>, data: Vec<f32>) {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor {name}: shape does not match data length"
        );
        assert!(self.tensors.iter().all(|(n, _, _)| n != name), "duplicate tensor name {name}");
        self.tensors.push((name.to_string(), shape, data));
    }

    pub fn get(&self, name: &str) -> Option<(&[usize], &[f32])> {
        self.tensors
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, s, d)| (s.as_slice(), d.as_slice()))
    }

    pub fn names(&self) -> Vec<&str> {
        self.tensors.iter().map(|(n, _, _)| n.as_str()).collect()
    }

    pub fn set_meta(&mut self, key: &str, value: &str) {
        self.metadata.insert(key.to_string(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.get(key).map(|s| s.as_str())
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    /// Serialize to bytes (exposed for tests; [`save`] writes these).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut blobs: Vec<u8> = Vec::new();
        let mut records = Vec::with_capacity(self.tensors.len());
        for (name, shape, data) in &self.tensors {
            let offset = blobs.len() as u64;
            let mut bytes = Vec::with_capacity(data.len() * 4);
            for v in data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            records.push(TensorRecord {
                name: name.clone(),
                dtype: "f32".to_string(),
                shape: shape.clone(),
                offset,
                byte_len: bytes.len() as u64,
                sha256: sha256_hex(&bytes),
            });
            blobs.extend_from_slice(&bytes);
        }
        let manifest = Manifest { tensors: records, metadata: self.metadata.clone() };
        let manifest_json =
            serde_json::to_vec(&manifest).expect("manifest serialization cannot fail");
        let mut out = Vec::with_capacity(9 + manifest_json.len() + blobs.len());
        out.extend_from_slice(CONTAINER_MAGIC);
        out.push(CONTAINER_VERSION);
        out.extend_from_slice(&(manifest_json.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest_json);
        out.extend_from_slice(&blobs);
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        file.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<TensorContainer> {
        let p = path.display().to_string();
        if bytes.len() < 13 {
            return Err(Error::TruncatedFile {
                path: p,
                detail: format!("{} bytes is too short for a header", bytes.len()),
            });
        }
        if &bytes[0..4] != CONTAINER_MAGIC {
            return Err(Error::BadMagic {
                path: p,
                expected: String::from_utf8_lossy(CONTAINER_MAGIC).to_string(),
            });
        }
        if bytes[4] != CONTAINER_VERSION {
            return Err(Error::ManifestMismatch {
                path: p,
                detail: format!("unsupported version {}", bytes[4]),
            });
        }
        let manifest_len = u64::from_le_bytes(bytes[5..13].try_into().unwrap()) as usize;
        let blob_start = 13 + manifest_len;
        if bytes.len() < blob_start {
            return Err(Error::TruncatedFile {
                path: p,
                detail: "manifest extends past end of file".to_string(),
            });
        }
        let manifest: Manifest = serde_json::from_slice(&bytes[13..blob_start])
            .map_err(|e| Error::ManifestMismatch { path: p.clone(), detail: e.to_string() })?;
        let blobs = &bytes[blob_start..];
        let mut out = TensorContainer { tensors: Vec::new(), metadata: manifest.metadata };
        for rec in manifest.tensors {
            if rec.dtype != "f32" {
                return Err(Error::ManifestMismatch {
                    path: p,
                    detail: format!("tensor {}: unsupported dtype {}", rec.name, rec.dtype),
                });
            }
            let start = rec.offset as usize;
            let end = start + rec.byte_len as usize;
            if end > blobs.len() {
                return Err(Error::TruncatedFile {
                    path: p,
                    detail: format!("tensor {} extends past end of file", rec.name),
                });
            }
            let expected = rec.shape.iter().product::<usize>() * 4;
            if expected != rec.byte_len as usize {
                return Err(Error::ManifestMismatch {
                    path: p,
                    detail: format!(
                        "tensor {}: shape {:?} needs {expected} bytes, manifest says {}",
                        rec.name, rec.shape, rec.byte_len
                    ),
                });
            }
            let blob = &blobs[start..end];
            if sha256_hex(blob) != rec.sha256 {
                return Err(Error::ChecksumMismatch { path: p, name: rec.name });
            }
            let data: Vec<f32> =
                blob.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            out.tensors.push((rec.name, rec.shape, data));
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<TensorContainer> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        TensorContainer::from_bytes(&bytes, path)
    }
}

/// Pack a model checkpoint (all weight tensors plus the config as metadata).
pub fn model_to_container(weights: &ModelWeights, config: &ModelConfig) -> TensorContainer {
    let mut container = TensorContainer::new();
    let d = config.d_model;
    let m = config.n_heads * config.head_dim;
    let p = config.d_mlp;
    for (name, data) in weights.tensor_entries() {
        let shape = match name.as_str() {
            "embed.weight" => vec![config.vocab_size, d],
            "pos.weight" => vec![config.max_seq_len, d],
            "norm_final" => vec![d],
            "output.weight" => vec![d, config.vocab_size],
            n if n.ends_with(".w_q") || n.ends_with(".w_k") || n.ends_with(".w_v") => {
                vec![m, d]
            }
            n if n.ends_with(".w_o") => vec![d, m],
            n if n.ends_with(".w_u") || n.ends_with(".w_g") => vec![p, d],
            n if n.ends_with(".w_d") => vec![d, p],
            _ => vec![d],
        };
        container.insert(&name, shape, data.to_vec());
    }
    container.set_meta("kind", "model-checkpoint");
    container.set_meta("config", &serde_json::to_string(config).expect("config serializes"));
    container
}

fn take_matrix(
    container: &TensorContainer,
    name: &str,
    rows: usize,
    cols: usize,
    path: &Path,
) -> Result<WMat> {
    let (shape, data) = container.get(name).ok_or_else(|| Error::ManifestMismatch {
        path: path.display().to_string(),
        detail: format!("missing tensor {name}"),
    })?;
    if shape != [rows, cols] {
        return Err(Error::ManifestMismatch {
            path: path.display().to_string(),
            detail: format!("tensor {name}: expected shape [{rows}, {cols}], found {shape:?}"),
        });
    }
    Ok(WMat::from_vec(rows, cols, data.to_vec()))
}

fn take_vector(
    container: &TensorContainer,
    name: &str,
    len: usize,
    path: &Path,
) -> Result<Vec<f32>> {
    let (shape, data) = container.get(name).ok_or_else(|| Error::ManifestMismatch {
        path: path.display().to_string(),
        detail: format!("missing tensor {name}"),
    })?;
    if shape != [len] {
        return Err(Error::ManifestMismatch {
            path: path.display().to_string(),
            detail: format!("tensor {name}: expected shape [{len}], found {shape:?}"),
        });
    }
    Ok(data.to_vec())
}

/// Unpack a model checkpoint written by [`model_to_container`].
pub fn model_from_container(
    container: &TensorContainer,
    path: &Path,
) -> Result<(ModelConfig, ModelWeights)> {
    let config_json = container.meta("config").ok_or_else(|| Error::ManifestMismatch {
        path: path.display().to_string(),
        detail: "missing config metadata".to_string(),
    })?;
    let config: ModelConfig = serde_json::from_str(config_json)?;
    config.validate()?;
    let d = config.d_model;
    let m = config.n_heads * config.head_dim;
    let p = config.d_mlp;
    let embed = take_matrix(container, "embed.weight", config.vocab_size, d, path)?;
    let pos = match config.positional_mode {
        crate::model::PositionalMode::AbsoluteLearned => {
            Some(take_matrix(container, "pos.weight", config.max_seq_len, d, path)?)
        }
        crate::model::PositionalMode::Rotary => None,
    };
    let mut blocks = Vec::with_capacity(config.depth);
    for bix in 0..config.depth {
        blocks.push(crate::model::BlockWeights {
            w_q: take_matrix(container, &format!("block{bix}.w_q"), m, d, path)?,
            w_k: take_matrix(container, &format!("block{bix}.w_k"), m, d, path)?,
            w_v: take_matrix(container, &format!("block{bix}.w_v"), m, d, path)?,
            w_o: take_matrix(container, &format!("block{bix}.w_o"), d, m, path)?,
            w_u: take_matrix(container, &format!("block{bix}.w_u"), p, d, path)?,
            w_g: take_matrix(container, &format!("block{bix}.w_g"), p, d, path)?,
            w_d: take_matrix(container, &format!("block{bix}.w_d"), d, p, path)?,
            norm_attn: take_vector(container, &format!("block{bix}.norm_attn"), d, path)?,
            norm_mlp: take_vector(container, &format!("block{bix}.norm_mlp"), d, path)?,
        });
    }
    let norm_final = take_vector(container, "norm_final", d, path)?;
    let w_out = take_matrix(container, "output.weight", d, config.vocab_size, path)?;
    Ok((config, ModelWeights { embed, pos, blocks, norm_final, w_out }))
}

/// Pack captured Grams. Matrices are stored as f32; the token count and
/// damping ride along as metadata.
pub fn grams_to_container(grams: &crate::model::GramSet, config: &ModelConfig) -> TensorContainer {
    let mut container = TensorContainer::new();
    for (bix, bg) in grams.per_block.iter().enumerate() {
        for (tag, m) in
            [("g_qkv", &bg.g_qkv), ("g_o", &bg.g_o), ("g_ug", &bg.g_ug), ("g_d", &bg.g_d)]
        {
            container.insert(
                &format!("block{bix}.{tag}"),
                vec![m.rows(), m.cols()],
                m.data().iter().map(|v| *v as f32).collect(),
            );
        }
    }
    container.set_meta("kind", "gram-set");
    container.set_meta("token_count", &grams.token_count.to_string());
    container.set_meta("damping", &grams.damping.to_string());
    container.set_meta("config", &serde_json::to_string(config).expect("config serializes"));
    container
}

/// Unpack Grams written by [`grams_to_container`].
pub fn grams_from_container(
    container: &TensorContainer,
    path: &Path,
) -> Result<crate::model::GramSet> {
    let config_json = container.meta("config").ok_or_else(|| Error::ManifestMismatch {
        path: path.display().to_string(),
        detail: "missing config metadata".to_string(),
    })?;
    let config: ModelConfig = serde_json::from_str(config_json)?;
    let token_count: u64 =
        container.meta("token_count").and_then(|v| v.parse().ok()).ok_or_else(|| {
            Error::ManifestMismatch {
                path: path.display().to_string(),
                detail: "missing or bad token_count metadata".to_string(),
            }
        })?;
    let damping: f64 = container.meta("damping").and_then(|v| v.parse().ok()).unwrap_or(0.0);
    let mut per_block = Vec::with_capacity(config.depth);
    for bix in 0..config.depth {
        let grab = |tag: &str| -> Result<crate::numerics::Matrix> {
            let name = format!("block{bix}.{tag}");
            let (shape, data) = container.get(&name).ok_or_else(|| Error::ManifestMismatch {
                path: path.display().to_string(),
                detail: format!("missing tensor {name}"),
            })?;
            if shape.len() != 2 {
                return Err(Error::ManifestMismatch {
                    path: path.display().to_string(),
                    detail: format!("tensor {name}: expected a matrix, found {shape:?}"),
                });
            }
            Ok(crate::numerics::Matrix::from_vec(
                shape[0],
                shape[1],
                data.iter().map(|v| *v as f64).collect(),
            ))
        };
        per_block.push(crate::model::BlockGrams {
            g_qkv: grab("g_qkv")?,
            g_o: grab("g_o")?,
            g_ug: grab("g_ug")?,
            g_d: grab("g_d")?,
        });
    }
    Ok(crate::model::GramSet { per_block, token_count, damping })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::CalibrationSet;
    use crate::model::{capture_grams, init_weights, LayerInputTap};
    use crate::util::derive_rng;
    use rand::Rng;

    fn sample_container() -> TensorContainer {
        let mut c = TensorContainer::new();
        c.insert("alpha", vec![2, 3], vec![1.0, -2.5, 3.25, 0.0, -0.0, 1e-30]);
        c.insert("beta", vec![4], vec![7.0, 8.0, 9.0, 10.0]);
        c.set_meta("kind", "test");
        c.set_meta("answer", "42");
        c
    }

    #[test]
    fn round_trips_bits_and_metadata() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.sdm");
        let c = sample_container();
        c.save(&path).unwrap();
        let loaded = TensorContainer::load(&path).unwrap();
        assert_eq!(loaded, c);
        let (shape, data) = loaded.get("alpha").unwrap();
        assert_eq!(shape, [2, 3]);
        // negative zero survives exactly
        assert!(data[4] == 0.0 && data[4].is_sign_negative());
        assert_eq!(loaded.meta("answer"), Some("42"));
        assert_eq!(loaded.names(), vec!["alpha", "beta"]);
    }

    #[test]
    fn writes_are_byte_identical() {
        let c = sample_container();
        assert_eq!(c.to_bytes(), c.to_bytes());
    }

    #[test]
    fn corrupt_blob_fails_checksum() {
        let c = sample_container();
        let mut bytes = c.to_bytes();
        let n = bytes.len();
        bytes[n - 3] ^= 0xff;
        let err = TensorContainer::from_bytes(&bytes, Path::new("t.sdm")).unwrap_err();
        assert!(matches!(err, Error::ChecksumMismatch { .. }), "got {err}");
    }

    #[test]
    fn truncated_file_is_reported() {
        let c = sample_container();
        let bytes = c.to_bytes();
        let err =
            TensorContainer::from_bytes(&bytes[..bytes.len() - 8], Path::new("t.sdm")).unwrap_err();
        assert!(matches!(err, Error::TruncatedFile { .. }), "got {err}");
        let err = TensorContainer::from_bytes(&bytes[..6], Path::new("t.sdm")).unwrap_err();
        assert!(matches!(err, Error::TruncatedFile { .. }), "got {err}");
    }

    #[test]
    fn wrong_magic_is_reported() {
        let mut bytes = sample_container().to_bytes();
        bytes[0] = b'X';
        let err = TensorContainer::from_bytes(&bytes, Path::new("t.sdm")).unwrap_err();
        assert!(matches!(err, Error::BadMagic { .. }), "got {err}");
    }

    #[test]
    fn wrong_version_is_reported() {
        let mut bytes = sample_container().to_bytes();
        bytes[4] = 99;
        let err = TensorContainer::from_bytes(&bytes, Path::new("t.sdm")).unwrap_err();
        assert!(matches!(err, Error::ManifestMismatch { .. }), "got {err}");
    }

    #[test]
    fn model_checkpoint_round_trips() {
        let config = crate::model::ModelConfig::toy();
        let weights = init_weights(&config, 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.sdm");
        model_to_container(&weights, &config).save(&path).unwrap();
        let loaded = TensorContainer::load(&path).unwrap();
        let (config2, weights2) = model_from_container(&loaded, &path).unwrap();
        assert_eq!(config2, config);
        assert_eq!(weights2, weights);
    }

    #[test]
    fn missing_tensor_is_manifest_mismatch() {
        let config = crate::model::ModelConfig::toy();
        let weights = init_weights(&config, 3);
        let mut container = model_to_container(&weights, &config);
        container.tensors.retain(|(n, _, _)| n != "block2.w_g");
        let err = model_from_container(&container, Path::new("m.sdm")).unwrap_err();
        assert!(matches!(err, Error::ManifestMismatch { .. }), "got {err}");
    }

    #[test]
    fn gram_set_round_trips_within_f32() {
        let config = crate::model::ModelConfig::toy();
        let weights = init_weights(&config, 4);
        let mut rng = derive_rng(5, &["calib"]);
        let sequences: Vec<Vec<u32>> =
            (0..4).map(|_| (0..10).map(|_| rng.gen_range(0..256u32)).collect()).collect();
        let calib = CalibrationSet { sequences, seed: 5, source: "t".to_string() };
        let grams = capture_grams(&weights, &config, &calib, &LayerInputTap::all()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grams.sdm");
        grams_to_container(&grams, &config).save(&path).unwrap();
        let loaded = grams_from_container(&TensorContainer::load(&path).unwrap(), &path).unwrap();
        assert_eq!(loaded.token_count, grams.token_count);
        for (a, b) in loaded.per_block.iter().zip(&grams.per_block) {
            let scale = b.g_qkv.max_abs().max(1e-9);
            assert!(a.g_qkv.sub(&b.g_qkv).max_abs() / scale < 1e-6);
            assert_eq!(a.g_d.rows(), b.g_d.rows());
        }
    }
}
