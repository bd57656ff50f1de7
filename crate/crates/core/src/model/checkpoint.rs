//! Binary checkpoints: a versioned magic, a JSON manifest of parameter
//! names/shapes/offsets, then the raw little-endian f32 values. Loading is
//! bit-exact and validates the manifest against the configuration's
//! parameter layout before accepting anything.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ParameterStore};

const MAGIC: &[u8; 8] = b"MICLW001";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {kind}")]
    Io { path: String, kind: std::io::ErrorKind },
    #[error("checkpoint format: {0}")]
    Format(String),
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the value section, in f32 units.
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    params: Vec<ManifestEntry>,
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CheckpointError + '_ {
    move |e| CheckpointError::Io { path: path.display().to_string(), kind: e.kind() }
}

/// Writes the model atomically: a temporary file in the same directory is
/// renamed over the destination only after a complete write.
pub fn save(model: &Model, path: &Path) -> Result<(), CheckpointError> {
    let mut entries = Vec::with_capacity(model.params.len());
    let mut offset = 0usize;
    for p in model.params.iter() {
        entries.push(ManifestEntry {
            name: p.name.clone(),
            shape: p.shape.clone(),
            offset,
            len: p.values.len(),
        });
        offset += p.values.len();
    }
    let header = Header { config: model.config.clone(), params: entries };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| CheckpointError::Format(e.to_string()))?;

    let tmp = path.with_extension("tmp");
    {
        let file = std::fs::File::create(&tmp).map_err(io_err(&tmp))?;
        let mut w = std::io::BufWriter::new(file);
        w.write_all(MAGIC).map_err(io_err(&tmp))?;
        w.write_all(&(header_json.len() as u64).to_le_bytes()).map_err(io_err(&tmp))?;
        w.write_all(&header_json).map_err(io_err(&tmp))?;
        for p in model.params.iter() {
            for v in &p.values {
                w.write_all(&v.to_le_bytes()).map_err(io_err(&tmp))?;
            }
        }
        w.flush().map_err(io_err(&tmp))?;
    }
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

/// Reads a checkpoint back into a model, refusing malformed files and
/// manifests that disagree with the configuration's parameter layout.
pub fn load(path: &Path) -> Result<Model, CheckpointError> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut r = std::io::BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io_err(path))?;
    if &magic != MAGIC {
        return Err(CheckpointError::Format(format!(
            "bad magic {:?}; not a checkpoint or an unsupported version",
            String::from_utf8_lossy(&magic)
        )));
    }
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes).map_err(io_err(path))?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    if header_len > 64 * 1024 * 1024 {
        return Err(CheckpointError::Format(format!(
            "header of {header_len} bytes is implausibly large"
        )));
    }
    let mut header_json = vec![0u8; header_len];
    r.read_exact(&mut header_json).map_err(io_err(path))?;
    let header: Header = serde_json::from_slice(&header_json)
        .map_err(|e| CheckpointError::Format(format!("manifest: {e}")))?;

    // The manifest must be exactly the layout this configuration produces.
    let expected = header.config.layout();
    if header.params.len() != expected.len() {
        return Err(CheckpointError::Format(format!(
            "manifest lists {} parameters; configuration requires {}",
            header.params.len(),
            expected.len()
        )));
    }
    let mut offset = 0usize;
    for (entry, (name, shape)) in header.params.iter().zip(&expected) {
        if &entry.name != name || &entry.shape != shape {
            return Err(CheckpointError::Format(format!(
                "manifest entry {:?} {:?} does not match expected {:?} {:?}",
                entry.name, entry.shape, name, shape
            )));
        }
        let len: usize = entry.shape.iter().product();
        if entry.len != len || entry.offset != offset {
            return Err(CheckpointError::Format(format!(
                "entry {:?} has offset {} len {}; expected offset {} len {}",
                entry.name, entry.offset, entry.len, offset, len
            )));
        }
        offset += len;
    }

    let mut data = Vec::new();
    r.read_to_end(&mut data).map_err(io_err(path))?;
    if data.len() != offset * 4 {
        return Err(CheckpointError::Format(format!(
            "value section holds {} bytes; manifest requires {}",
            data.len(),
            offset * 4
        )));
    }
    let mut params = ParameterStore::new();
    for entry in &header.params {
        let start = entry.offset * 4;
        let values: Vec<f32> = data[start..start + entry.len * 4]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        params.insert(&entry.name, entry.shape.clone(), values);
    }
    Model::from_parts(header.config, params)
        .map_err(|e| CheckpointError::Format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny() -> Model {
        let cfg = ModelConfig {
            layers: 1,
            heads: 2,
            d_model: 8,
            d_ff: 16,
            vocab: 9,
            max_len: 16,
            dropout: 0.1,
            pre_norm: false,
        };
        Model::init(cfg, 3).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut model = tiny();
        // Plant values that stress exactness: negative zero, subnormals,
        // and values with no short decimal form.
        {
            let p = model.params.get_mut("out.b");
            p.values[0] = -0.0;
            p.values[1] = f32::MIN_POSITIVE / 8.0;
            p.values[2] = 0.1f32 + 0.2f32;
            p.values[3] = 1.0e-30;
        }
        save(&model, &path).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.config, model.config);
        for (a, b) in model.params.iter().zip(loaded.params.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            let bits_a: Vec<u32> = a.values.iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = b.values.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b, "parameter {} changed bits", a.name);
        }
    }

    #[test]
    fn save_leaves_no_temporary_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&tiny(), &path).unwrap();
        assert!(path.exists());
        assert!(!path.with_extension("tmp").exists());
    }

    #[test]
    fn load_rejects_foreign_and_truncated_files() {
        let dir = tempfile::tempdir().unwrap();
        let bogus = dir.path().join("bogus.ckpt");
        std::fs::write(&bogus, b"definitely not a checkpoint").unwrap();
        assert!(matches!(load(&bogus), Err(CheckpointError::Format(_))));

        let path = dir.path().join("model.ckpt");
        save(&tiny(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let truncated = dir.path().join("short.ckpt");
        std::fs::write(&truncated, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(load(&truncated), Err(CheckpointError::Format(_))));
    }

    #[test]
    fn load_rejects_manifest_layout_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&tiny(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // Corrupt a parameter name inside the JSON header.
        let pos = bytes.windows(5).position(|w| w == b"out.w").unwrap();
        bytes[pos..pos + 5].copy_from_slice(b"out.x");
        let tampered = dir.path().join("tampered.ckpt");
        std::fs::write(&tampered, &bytes).unwrap();
        assert!(matches!(load(&tampered), Err(CheckpointError::Format(_))));
    }
}
