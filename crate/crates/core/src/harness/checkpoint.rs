//! Checkpoints: a JSON manifest next to a raw little-endian `f32` blob.
//!
//! `<stem>.json` holds the architecture, the tensor index (name, shape, byte
//! offset) and, for quantized models, the format and per-layer scales.
//! `<stem>.bin` is every tensor concatenated in manifest order.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{sha256_hex, Method};
use crate::error::{Error, Result};
use crate::lm::{layout, ModelConfig, Parameters};
use crate::quant::{CalibratedQuantizer, ModelQuantizers, QuantFormat};
use crate::tensor::Tensor;

const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaleEntry {
    pub layer: String,
    pub scale: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantizationInfo {
    pub method: Method,
    pub format: QuantFormat,
    pub scales: Vec<ScaleEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub model: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    pub blob_bytes: u64,
    pub blob_sha256: String,
    pub quantization: Option<QuantizationInfo>,
}

/// Parameters plus the frozen quantizers they were produced with, if any.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: Parameters,
    pub quantization: Option<(Method, ModelQuantizers)>,
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("bin"))
}

pub fn checkpoint_exists(stem: &Path) -> bool {
    let (m, b) = paths(stem);
    m.is_file() && b.is_file()
}

fn encode(params: &Parameters) -> (Vec<TensorEntry>, Vec<u8>) {
    let mut entries = Vec::with_capacity(params.len());
    let mut blob = Vec::with_capacity(4 * params.total_params());
    for (name, t) in params.names().iter().zip(params.tensors()) {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: blob.len() as u64,
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    (entries, blob)
}

/// Writes `<stem>.json` and `<stem>.bin`.
pub fn save_checkpoint(
    params: &Parameters,
    quantization: Option<(Method, &ModelQuantizers)>,
    stem: &Path,
) -> Result<()> {
    let (manifest_path, blob_path) = paths(stem);
    if let Some(dir) = stem.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let (tensors, blob) = encode(params);
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        model: params.config().clone(),
        tensors,
        blob_bytes: blob.len() as u64,
        blob_sha256: sha256_hex(&blob),
        quantization: quantization.map(|(method, q)| QuantizationInfo {
            method,
            format: q.format,
            scales: q
                .layers
                .iter()
                .map(|(l, c)| ScaleEntry {
                    layer: l.to_string(),
                    scale: c.scale,
                })
                .collect(),
        }),
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
    std::fs::write(&manifest_path, json + "\n").map_err(|e| Error::io(&manifest_path, e))?;
    Ok(())
}

pub fn load_checkpoint(stem: &Path) -> Result<Checkpoint> {
    let (manifest_path, blob_path) = paths(stem);
    let corrupt = |detail: String| Error::Corruption {
        path: manifest_path.clone(),
        detail,
    };
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| corrupt(format!("unreadable manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(corrupt(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }
    manifest.model.validate().map_err(|e| corrupt(e.to_string()))?;
    let blob = std::fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    if blob.len() as u64 != manifest.blob_bytes {
        return Err(corrupt(format!(
            "blob has {} bytes, manifest says {}",
            blob.len(),
            manifest.blob_bytes
        )));
    }
    let expected = layout(&manifest.model);
    if expected.len() != manifest.tensors.len() {
        return Err(corrupt(format!(
            "{} tensors listed, architecture has {}",
            manifest.tensors.len(),
            expected.len()
        )));
    }
    let mut offset = 0u64;
    let mut tensors = Vec::with_capacity(expected.len());
    for ((name, shape, _), entry) in expected.iter().zip(&manifest.tensors) {
        if &entry.name != name || &entry.shape != shape || entry.offset != offset {
            return Err(corrupt(format!(
                "tensor {:?} (shape {:?}, offset {}) does not match expected {name:?} {shape:?} at {offset}",
                entry.name, entry.shape, entry.offset
            )));
        }
        let n: usize = shape.iter().product();
        let end = offset + 4 * n as u64;
        if end > blob.len() as u64 {
            return Err(corrupt(format!("tensor {name} runs past the end of the blob")));
        }
        let data: Vec<f32> = blob[offset as usize..end as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push(Tensor::new(shape.clone(), data)?);
        offset = end;
    }
    if offset != blob.len() as u64 {
        return Err(corrupt(format!(
            "blob has {} bytes, tensors cover {offset}",
            blob.len()
        )));
    }
    if sha256_hex(&blob) != manifest.blob_sha256 {
        return Err(corrupt("blob checksum mismatch".into()));
    }
    let params = Parameters::from_tensors(&manifest.model, tensors)?;
    let quantization = match manifest.quantization {
        None => None,
        Some(info) => {
            let layers = params.config().quantized_layers();
            if info.scales.len() != layers.len() {
                return Err(corrupt(format!(
                    "{} scales for {} quantized layers",
                    info.scales.len(),
                    layers.len()
                )));
            }
            let mut qs = Vec::with_capacity(layers.len());
            for (layer, entry) in layers.into_iter().zip(&info.scales) {
                if entry.layer != layer.to_string() {
                    return Err(corrupt(format!(
                        "scale for {} listed where {layer} expected",
                        entry.layer
                    )));
                }
                let q = CalibratedQuantizer::new(info.format, entry.scale).map_err(|e| corrupt(e.to_string()))?;
                qs.push((layer, q));
            }
            Some((
                info.method,
                ModelQuantizers {
                    format: info.format,
                    layers: qs,
                },
            ))
        }
    };
    Ok(Checkpoint { params, quantization })
}
