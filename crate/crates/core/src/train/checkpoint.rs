//! Binary container for named tensors.
//!
//! ```text
//! 8 bytes   magic "CBCCKPT\0"
//! u32 LE    manifest length in bytes
//! ...       manifest, UTF-8 JSON (see `Manifest`)
//! ...       for each manifest tensor in order: prod(shape) f32 LE values
//! ```

use crate::error::{Error, Result};
use crate::nn::{ArchitectureSpec, Model, Param};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"CBCCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(default)]
    pub frozen: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    /// Architecture the tensors instantiate; absent for plain tensor dumps.
    pub spec: Option<ArchitectureSpec>,
    pub seed: u64,
    /// Free-form provenance (e.g. training protocol, attack).
    #[serde(default)]
    pub note: String,
    pub tensors: Vec<TensorEntry>,
}

/// Writes named tensors with a manifest.
pub fn write_tensors(
    path: impl AsRef<Path>,
    spec: Option<&ArchitectureSpec>,
    seed: u64,
    note: &str,
    tensors: &[(&str, &Tensor, bool)],
) -> Result<()> {
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        spec: spec.cloned(),
        seed,
        note: note.to_string(),
        tensors: tensors
            .iter()
            .map(|(name, t, frozen)| TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                frozen: *frozen,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let total: usize = tensors.iter().map(|(_, t, _)| t.len() * 4).sum();
    let mut out = Vec::with_capacity(12 + json.len() + total);
    out.extend_from_slice(MAGIC);
    out.extend((json.len() as u32).to_le_bytes());
    out.extend(json);
    for (_, t, _) in tensors {
        for v in t.data() {
            out.extend(v.to_le_bytes());
        }
    }
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a container written by [`write_tensors`].
pub fn read_tensors(path: impl AsRef<Path>) -> Result<(Manifest, Vec<Tensor>)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |offset: usize, reason: String| Error::Parse {
        path: path.display().to_string(),
        offset: offset as u64,
        reason,
    };
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(bad(0, "not a checkpoint (bad magic)".into()));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let json = bytes
        .get(12..12 + len)
        .ok_or_else(|| bad(8, format!("manifest of {len} bytes runs past end of file")))?;
    let manifest: Manifest = serde_json::from_slice(json).map_err(|e| bad(12, format!("manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(bad(12, format!("unsupported format version {}", manifest.format_version)));
    }
    let mut offset = 12 + len;
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        let n: usize = entry.shape.iter().product();
        let raw = bytes
            .get(offset..offset + 4 * n)
            .ok_or_else(|| bad(offset, format!("tensor `{}` truncated", entry.name)))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push(Tensor::new(entry.shape.clone(), data)?);
        offset += 4 * n;
    }
    if offset != bytes.len() {
        return Err(bad(offset, format!("{} trailing bytes", bytes.len() - offset)));
    }
    Ok((manifest, tensors))
}

pub fn save_model(path: impl AsRef<Path>, model: &Model, seed: u64, note: &str) -> Result<()> {
    let tensors: Vec<(&str, &Tensor, bool)> = model
        .params()
        .iter()
        .map(|p| (p.name.as_str(), &p.value, p.frozen))
        .collect();
    write_tensors(path, Some(model.spec()), seed, note, &tensors)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<(Model, Manifest)> {
    let (manifest, tensors) = read_tensors(&path)?;
    let spec = manifest
        .spec
        .clone()
        .ok_or_else(|| Error::Checkpoint(format!("{} holds no architecture", path.as_ref().display())))?;
    let params = manifest
        .tensors
        .iter()
        .zip(tensors)
        .map(|(e, value)| Param {
            name: e.name.clone(),
            layer: 0,
            value,
            frozen: e.frozen,
        })
        .collect();
    Ok((Model::from_params(&spec, params)?, manifest))
}
