//! Model checkpoints: a JSON manifest naming tensors, shapes, and encoding
//! precision, with the raw little-endian 32-bit float payloads either
//! embedded as base64 or concatenated in a sidecar binary file. Both
//! payload styles load through the same entry point.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{ParamSet, Tensor};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use std::path::Path;

const CKPT_FORMAT_VERSION: u32 = 1;

pub fn f32s_to_le_bytes(data: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() * 4);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn f32s_from_le_bytes(bytes: &[u8]) -> Result<Vec<f32>> {
    if bytes.len() % 4 != 0 {
        return Err(Error::checkpoint(format!(
            "payload length {} is not a multiple of 4",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Row-major tensor data as base64 little-endian f32.
pub fn encode_f32_base64(t: &Tensor<f32>) -> String {
    B64.encode(f32s_to_le_bytes(t.data()))
}

pub fn decode_f32_base64(text: &str, shape: Vec<usize>) -> Result<Tensor<f32>> {
    let bytes = B64
        .decode(text)
        .map_err(|e| Error::checkpoint(format!("base64: {}", e)))?;
    let vals = f32s_from_le_bytes(&bytes)?;
    let want: usize = shape.iter().product();
    if vals.len() != want {
        return Err(Error::checkpoint(format!(
            "decoded {} values, shape {:?} wants {}",
            vals.len(),
            shape,
            want
        )));
    }
    Tensor::new(shape, vals)
}

/// Where tensor payloads live relative to the manifest.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PayloadMode {
    /// Base64 strings inside the manifest itself.
    Embedded,
    /// One binary file next to the manifest, tensors concatenated in
    /// manifest order.
    Sidecar,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    data: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    offset: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    byte_len: Option<usize>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct ManifestFile {
    format_version: u32,
    /// Encoding precision of the payload arrays.
    precision: String,
    /// Free-form model metadata (architecture configuration and the like).
    meta: serde_json::Value,
    /// Sidecar file name, relative to the manifest; absent when embedded.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    payload: Option<String>,
    tensors: Vec<TensorEntry>,
}

fn sidecar_name(manifest_path: &Path) -> String {
    let stem = manifest_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "checkpoint".to_string());
    format!("{}.bin", stem)
}

/// Write `params` (converted to f32) plus caller metadata to a manifest at
/// `path`, embedding payloads or writing a `.bin` sidecar next to it.
pub fn save_checkpoint<T: Real>(
    path: &Path,
    meta: &serde_json::Value,
    params: &ParamSet<T>,
    mode: PayloadMode,
) -> Result<()> {
    let mut tensors = Vec::with_capacity(params.len());
    let mut blob = Vec::new();
    for (name, t) in params.iter() {
        let t32 = t.cast::<f32>();
        match mode {
            PayloadMode::Embedded => tensors.push(TensorEntry {
                name: name.clone(),
                shape: t32.shape().to_vec(),
                data: Some(encode_f32_base64(&t32)),
                offset: None,
                byte_len: None,
            }),
            PayloadMode::Sidecar => {
                let bytes = f32s_to_le_bytes(t32.data());
                tensors.push(TensorEntry {
                    name: name.clone(),
                    shape: t32.shape().to_vec(),
                    data: None,
                    offset: Some(blob.len()),
                    byte_len: Some(bytes.len()),
                });
                blob.extend_from_slice(&bytes);
            }
        }
    }
    let payload = match mode {
        PayloadMode::Embedded => None,
        PayloadMode::Sidecar => Some(sidecar_name(path)),
    };
    let manifest = ManifestFile {
        format_version: CKPT_FORMAT_VERSION,
        precision: "f32".to_string(),
        meta: meta.clone(),
        payload,
        tensors,
    };
    std::fs::write(path, serde_json::to_string_pretty(&manifest)?)?;
    if let Some(name) = &manifest.payload {
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        std::fs::write(dir.join(name), &blob)?;
    }
    Ok(())
}

/// Load a checkpoint manifest, resolving embedded or sidecar payloads.
/// Returns the metadata and the parameters cast to the requested scalar.
pub fn load_checkpoint<T: Real>(path: &Path) -> Result<(serde_json::Value, ParamSet<T>)> {
    let text = std::fs::read_to_string(path)?;
    let manifest: ManifestFile = serde_json::from_str(&text)?;
    if manifest.format_version != CKPT_FORMAT_VERSION {
        return Err(Error::checkpoint(format!(
            "checkpoint format version {} (supported: {})",
            manifest.format_version, CKPT_FORMAT_VERSION
        )));
    }
    if manifest.precision != "f32" {
        return Err(Error::checkpoint(format!(
            "unsupported payload precision '{}'",
            manifest.precision
        )));
    }
    let blob: Option<Vec<u8>> = match &manifest.payload {
        Some(name) => {
            let dir = path.parent().unwrap_or_else(|| Path::new("."));
            Some(std::fs::read(dir.join(name))?)
        }
        None => None,
    };

    let mut params = ParamSet::new();
    for e in &manifest.tensors {
        let t32 = match (&e.data, e.offset, e.byte_len) {
            (Some(b64), _, _) => decode_f32_base64(b64, e.shape.clone())
                .map_err(|err| Error::checkpoint(format!("tensor '{}': {}", e.name, err)))?,
            (None, Some(off), Some(len)) => {
                let blob = blob.as_ref().ok_or_else(|| {
                    Error::checkpoint(format!(
                        "tensor '{}' wants sidecar data but no payload file is named",
                        e.name
                    ))
                })?;
                if off + len > blob.len() {
                    return Err(Error::checkpoint(format!(
                        "tensor '{}': range {}..{} exceeds payload of {} bytes",
                        e.name,
                        off,
                        off + len,
                        blob.len()
                    )));
                }
                let vals = f32s_from_le_bytes(&blob[off..off + len])?;
                let want: usize = e.shape.iter().product();
                if vals.len() != want {
                    return Err(Error::checkpoint(format!(
                        "tensor '{}': {} values, shape {:?} wants {}",
                        e.name,
                        vals.len(),
                        e.shape,
                        want
                    )));
                }
                Tensor::new(e.shape.clone(), vals)?
            }
            _ => {
                return Err(Error::checkpoint(format!(
                    "tensor '{}' has neither embedded data nor a payload range",
                    e.name
                )))
            }
        };
        if params.contains(&e.name) {
            return Err(Error::checkpoint(format!("duplicate tensor '{}'", e.name)));
        }
        params.insert(e.name.clone(), t32.cast::<T>());
    }
    Ok((manifest.meta, params))
}
