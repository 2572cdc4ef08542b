//! Checkpoint file format.
//!
//! Layout: 8-byte magic `DCLZ0001`, a little-endian u64 byte length, a
//! UTF-8 JSON manifest (model config plus named entries with shapes and
//! byte offsets), then one little-endian f32 blob. Parameters round-trip
//! bit-exactly at 32-bit precision.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Group, Model, ModelConfig};

const MAGIC_TAG: &[u8; 4] = b"DCLZ";
const MAGIC_VERSION: &[u8; 4] = b"0001";

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the f32 blob.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    entries: Vec<ManifestEntry>,
}

/// Write every model parameter (the temporary pretraining head never
/// appears in a saved model) as f32.
pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let mut entries = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    for (_, e) in model.store.iter() {
        if e.group == Group::PretrainHead {
            return Err(Error::Contract(
                "save_checkpoint: model still carries the pretraining head".into(),
            ));
        }
        entries.push(ManifestEntry {
            name: e.name.clone(),
            shape: e.tensor.shape().to_vec(),
            offset: blob.len(),
        });
        for v in e.tensor.values() {
            blob.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let manifest = Manifest {
        config: model.cfg.clone(),
        entries,
    };
    let manifest_bytes =
        serde_json::to_vec(&manifest).map_err(|e| Error::CkptManifest(e.to_string()))?;
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC_TAG)?;
    out.write_all(MAGIC_VERSION)?;
    out.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
    out.write_all(&manifest_bytes)?;
    out.write_all(&blob)?;
    out.flush()?;
    Ok(())
}

/// Rebuild a model from a checkpoint. Bad magic, unknown version, corrupt
/// manifest and truncated blob are distinct errors; no partial model is
/// ever returned.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    reader
        .read_exact(&mut magic)
        .map_err(|_| Error::CkptBadMagic)?;
    if &magic[..4] != MAGIC_TAG {
        return Err(Error::CkptBadMagic);
    }
    if &magic[4..] != MAGIC_VERSION {
        return Err(Error::CkptVersion(
            String::from_utf8_lossy(&magic[4..]).into_owned(),
        ));
    }
    let mut len_bytes = [0u8; 8];
    reader
        .read_exact(&mut len_bytes)
        .map_err(|_| Error::CkptManifest("missing manifest length".into()))?;
    let manifest_len = u64::from_le_bytes(len_bytes) as usize;
    let mut manifest_bytes = vec![0u8; manifest_len];
    reader
        .read_exact(&mut manifest_bytes)
        .map_err(|_| Error::CkptManifest("manifest shorter than its declared length".into()))?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| Error::CkptManifest(e.to_string()))?;

    let mut blob = Vec::new();
    reader.read_to_end(&mut blob)?;

    let mut model = Model::new(manifest.config.clone())?;
    if manifest.entries.len() != model.store.len() {
        return Err(Error::CkptManifest(format!(
            "manifest has {} entries, model expects {}",
            manifest.entries.len(),
            model.store.len()
        )));
    }
    for entry in &manifest.entries {
        let id = model
            .store
            .by_name(&entry.name)
            .ok_or_else(|| Error::CkptManifest(format!("unknown parameter {}", entry.name)))?;
        let t = model.store.tensor_mut(id);
        if t.shape() != entry.shape.as_slice() {
            return Err(Error::CkptManifest(format!(
                "parameter {}: shape {:?} vs manifest {:?}",
                entry.name,
                t.shape(),
                entry.shape
            )));
        }
        let n = t.numel();
        let end = entry.offset + 4 * n;
        if end > blob.len() {
            return Err(Error::CkptTruncated {
                expected: end,
                found: blob.len(),
            });
        }
        let vals = t.values_mut();
        for i in 0..n {
            let off = entry.offset + 4 * i;
            let raw: [u8; 4] = blob[off..off + 4].try_into().expect("bounds checked");
            vals[i] = f32::from_le_bytes(raw) as f64;
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::EncoderConfig;

    fn tiny_config() -> ModelConfig {
        let enc = EncoderConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            vocab_size: 16,
            max_seq: 16,
            patch_dim: 4,
            n_patches: 2,
        };
        ModelConfig {
            ctx_enc: enc.clone(),
            enc,
            ctx_len: 2,
            domain_len: 1,
            insert_layer: 0,
            proj_dim: 4,
            bottleneck: 16,
            use_cpg: true,
            single_expert: false,
            init_seed: 42,
        }
    }

    #[test]
    fn roundtrip_is_f32_exact() {
        let model = Model::new(tiny_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.dcl");
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.cfg, model.cfg);
        for (id, e) in model.store.iter() {
            let l = loaded.store.tensor(loaded.store.by_name(&e.name).unwrap());
            assert_eq!(l.shape(), e.tensor.shape(), "{}", e.name);
            for (a, b) in e.tensor.values().iter().zip(l.values()) {
                assert_eq!(*a as f32, *b as f32, "{} ({:?})", e.name, id);
            }
        }
        // Save-load-save produces identical bytes.
        let path2 = dir.path().join("m2.dcl");
        save_checkpoint(&loaded, &path2).unwrap();
        let load2 = load_checkpoint(&path2).unwrap();
        for (_, e) in loaded.store.iter() {
            let l = load2.store.tensor(load2.store.by_name(&e.name).unwrap());
            assert_eq!(e.tensor.values(), l.values());
        }
    }

    #[test]
    fn truncated_blob_is_detected() {
        let model = Model::new(tiny_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.dcl");
        save_checkpoint(&model, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = dir.path().join("cut.dcl");
        std::fs::write(&cut, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(
            load_checkpoint(&cut),
            Err(Error::CkptTruncated { .. })
        ));
    }

    #[test]
    fn version_and_magic_checked() {
        let model = Model::new(tiny_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.dcl");
        save_checkpoint(&model, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[7] = b'9'; // version DCLZ0009
        let vpath = dir.path().join("v.dcl");
        std::fs::write(&vpath, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&vpath), Err(Error::CkptVersion(_))));

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        let mpath = dir.path().join("x.dcl");
        std::fs::write(&mpath, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&mpath), Err(Error::CkptBadMagic)));
    }

    #[test]
    fn corrupt_manifest_is_detected() {
        let model = Model::new(tiny_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.dcl");
        save_checkpoint(&model, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[20] = b'!'; // stomp inside the JSON manifest
        let cpath = dir.path().join("c.dcl");
        std::fs::write(&cpath, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&cpath),
            Err(Error::CkptManifest(_))
        ));
    }
}
