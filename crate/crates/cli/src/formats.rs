//! Binary file formats: per-video snippet features and model checkpoints.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use asmloc_core::model::{init_params, ModelConfig};
use asmloc_core::optim::ParameterStore;
use asmloc_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Feature file layout: magic, format version, then row-major f32 data.
pub const FEATURE_MAGIC: [u8; 4] = *b"ASML";
pub const FEATURE_VERSION: u32 = 1;

/// Write a T×D feature matrix: 16-byte header (magic, version, T, D, all
/// little-endian) followed by T*D f32 values.
pub fn write_features(path: &Path, features: &Tensor) -> Result<()> {
    let (t, d) = features
        .expect_matrix()
        .map_err(CliError::Core)?;
    let mut file = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut buf = Vec::with_capacity(16 + t * d * 4);
    buf.extend_from_slice(&FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(t as u32).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    for &v in features.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    file.write_all(&buf).map_err(|e| CliError::io(path, e))
}

/// Read a feature file, validating magic, version and payload length.
pub fn read_features(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| CliError::io(path, e))?;
    if bytes.len() < 16 {
        return Err(CliError::format(path, "file shorter than the 16-byte header"));
    }
    if bytes[..4] != FEATURE_MAGIC {
        return Err(CliError::format(path, "bad magic, not a feature file"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != FEATURE_VERSION {
        return Err(CliError::format(
            path,
            format!("unsupported format version {version}"),
        ));
    }
    let (t, d) = (word(8) as usize, word(12) as usize);
    let expected = 16 + t * d * 4;
    if bytes.len() != expected {
        return Err(CliError::format(
            path,
            format!(
                "truncated or oversized payload: {} bytes for {t}x{d} ({expected} expected)",
                bytes.len()
            ),
        ));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Tensor::new(vec![t, d], data).map_err(CliError::Core)
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointEntry {
    name: String,
    shape: Vec<usize>,
    /// Element offset into the value blob.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointIndex {
    model: ModelConfig,
    params: Vec<CheckpointEntry>,
}

/// Save a trained model as `checkpoint.json` (config + parameter index)
/// plus `checkpoint.bin` (concatenated little-endian f32 values).
pub fn save_checkpoint(dir: &Path, cfg: &ModelConfig, store: &ParameterStore) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut entries = Vec::new();
    let mut blob = Vec::new();
    let mut offset = 0usize;
    for (name, tensor) in store.export() {
        entries.push(CheckpointEntry {
            name,
            shape: tensor.shape().to_vec(),
            offset,
        });
        offset += tensor.numel();
        for &v in tensor.data() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let index = CheckpointIndex {
        model: cfg.clone(),
        params: entries,
    };
    let json_path = dir.join("checkpoint.json");
    let text = serde_json::to_string_pretty(&index)
        .map_err(|e| CliError::format(&json_path, e.to_string()))?;
    fs::write(&json_path, text).map_err(|e| CliError::io(&json_path, e))?;
    let bin_path = dir.join("checkpoint.bin");
    fs::write(&bin_path, blob).map_err(|e| CliError::io(&bin_path, e))
}

/// Load a checkpoint. The parameter set and every shape must match a fresh
/// initialization of the stored model configuration.
pub fn load_checkpoint(dir: &Path) -> Result<(ModelConfig, ParameterStore)> {
    let json_path = dir.join("checkpoint.json");
    let text = fs::read_to_string(&json_path).map_err(|e| CliError::io(&json_path, e))?;
    let index: CheckpointIndex = serde_json::from_str(&text)
        .map_err(|e| CliError::format(&json_path, format!("invalid JSON: {e}")))?;
    let bin_path = dir.join("checkpoint.bin");
    let blob = fs::read(&bin_path).map_err(|e| CliError::io(&bin_path, e))?;
    if blob.len() % 4 != 0 {
        return Err(CliError::format(&bin_path, "length not a multiple of 4"));
    }
    let values: Vec<f64> = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();

    let mut store = init_params(&index.model, 0).map_err(CliError::Core)?;
    let mut seen = 0usize;
    for entry in &index.params {
        if !store.contains(&entry.name) {
            return Err(CliError::format(
                &json_path,
                format!("unknown parameter '{}'", entry.name),
            ));
        }
        let numel: usize = entry.shape.iter().product();
        let end = entry.offset + numel;
        if end > values.len() {
            return Err(CliError::format(
                &bin_path,
                format!("parameter '{}' reads past the end of the blob", entry.name),
            ));
        }
        let tensor = Tensor::new(entry.shape.clone(), values[entry.offset..end].to_vec())
            .map_err(CliError::Core)?;
        store
            .set_value(&entry.name, tensor)
            .map_err(|e| CliError::format(&json_path, e.to_string()))?;
        seen += 1;
    }
    if seen != store.len() {
        return Err(CliError::format(
            &json_path,
            format!("checkpoint holds {seen} of {} parameters", store.len()),
        ));
    }
    Ok((index.model, store))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_roundtrip_preserves_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.asml");
        let t = Tensor::matrix(3, 2, vec![0.5, -1.25, 2.0, 3.5, -0.75, 4.0]).unwrap();
        write_features(&path, &t).unwrap();
        let back = read_features(&path).unwrap();
        assert_eq!(back.shape(), &[3, 2]);
        assert_eq!(back.data(), t.data());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.asml");
        std::fs::write(&path, b"NOPE\0\0\0\0\0\0\0\0\0\0\0\0").unwrap();
        let err = read_features(&path).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.asml");
        let t = Tensor::matrix(4, 3, vec![1.0; 12]).unwrap();
        write_features(&path, &t).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        let err = read_features(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn checkpoint_roundtrip_within_f32_precision() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ModelConfig::new(2, 4);
        cfg.embed_dim = 4;
        cfg.heads = 2;
        let store = init_params(&cfg, 3).unwrap();
        save_checkpoint(dir.path(), &cfg, &store).unwrap();
        let (cfg2, store2) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(cfg2.num_classes, 2);
        for (name, tensor) in store.export() {
            let loaded = store2.value(&name).unwrap();
            for (a, b) in tensor.data().iter().zip(loaded.data()) {
                assert!((a - b).abs() < 1e-6, "{name}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn corrupt_checkpoint_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ModelConfig::new(2, 4);
        cfg.embed_dim = 4;
        cfg.heads = 2;
        let store = init_params(&cfg, 3).unwrap();
        save_checkpoint(dir.path(), &cfg, &store).unwrap();
        std::fs::write(dir.path().join("checkpoint.bin"), [0u8; 8]).unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
    }
}
