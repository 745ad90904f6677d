//! Model checkpoints: a JSON manifest plus a companion blob of
//! little-endian `f32` parameters.
//!
//! The manifest binds the blob through its SHA-256 and the config through
//! a hash of its canonical JSON, so an edited config, a truncated blob or a
//! shape change are all rejected on load. Both files are written to
//! temporaries and renamed into place.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::network::{build_model, Model, ModelConfig};

pub const FORMAT: &str = "planemorph-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub config: ModelConfig,
    pub config_hash: String,
    /// Blob file name, relative to the manifest's directory.
    pub blob: String,
    pub blob_bytes: usize,
    pub blob_sha256: String,
    pub params: BTreeMap<String, ParamEntry>,
}

pub fn config_hash(cfg: &ModelConfig) -> String {
    let canonical = serde_json::to_vec(cfg).expect("config serializes");
    hex::encode(Sha256::digest(&canonical))
}

/// Blob path for a manifest path: same stem, `.bin` extension.
pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| Error::invalid(format!("no file name in {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).and_then(|_| f.sync_all()).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn encode_params(m: &Model) -> (Vec<u8>, BTreeMap<String, ParamEntry>) {
    let mut blob = Vec::with_capacity(m.store.count() * 4);
    let mut params = BTreeMap::new();
    for (name, t) in m.store.iter() {
        params.insert(name.to_string(), ParamEntry { shape: t.shape().to_vec(), offset: blob.len() });
        for &v in t.data() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    (blob, params)
}

pub fn save_checkpoint(m: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (blob, params) = encode_params(m);
    let bpath = blob_path(path);
    let manifest = Manifest {
        format: FORMAT.into(),
        config: m.cfg.clone(),
        config_hash: config_hash(&m.cfg),
        blob: bpath.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        blob_bytes: blob.len(),
        blob_sha256: hex::encode(Sha256::digest(&blob)),
        params,
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write_atomic(&bpath, &blob)?;
    write_atomic(path, &json)
}

/// Rebuild a model from a manifest and blob already in memory.
pub fn decode_checkpoint(manifest: &Manifest, blob: &[u8]) -> Result<Model> {
    let bad = |msg: String| Err(Error::Checkpoint(msg));
    if manifest.format != FORMAT {
        return bad(format!("unknown format {:?}", manifest.format));
    }
    if config_hash(&manifest.config) != manifest.config_hash {
        return bad("config hash does not match the stored config".into());
    }
    if blob.len() != manifest.blob_bytes {
        return bad(format!("blob size mismatch: manifest says {} bytes, found {}", manifest.blob_bytes, blob.len()));
    }
    if hex::encode(Sha256::digest(blob)) != manifest.blob_sha256 {
        return bad("blob checksum mismatch".into());
    }
    let mut m = build_model(&manifest.config)?;
    if manifest.params.len() != m.store.len() {
        return bad(format!("manifest lists {} parameters, model has {}", manifest.params.len(), m.store.len()));
    }
    for id in m.store.ids().collect::<Vec<_>>() {
        let name = m.store.name(id).to_string();
        let Some(entry) = manifest.params.get(&name) else {
            return bad(format!("parameter {name} missing from manifest"));
        };
        let t = m.store.get_mut(id);
        if entry.shape != t.shape() {
            return bad(format!("parameter {name}: manifest shape {:?}, model shape {:?}", entry.shape, t.shape()));
        }
        let end = entry.offset.checked_add(t.len() * 4).filter(|&e| e <= blob.len());
        let Some(end) = end else {
            return bad(format!("parameter {name} extends past the blob"));
        };
        for (v, chunk) in t.data_mut().iter_mut().zip(blob[entry.offset..end].chunks_exact(4)) {
            *v = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk")) as f64;
        }
    }
    Ok(m)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&text).map_err(|e| Error::Checkpoint(format!("corrupt manifest {}: {e}", path.display())))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let manifest = read_manifest(path)?;
    let bpath = path.parent().unwrap_or(Path::new("")).join(&manifest.blob);
    let blob = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    decode_checkpoint(&manifest, &blob)
}
