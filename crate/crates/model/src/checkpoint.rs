//! Checkpoints: a JSON manifest beside one flat little-endian fp32 blob.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{ModelError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: EncoderConfig,
    /// Blob file name, relative to the manifest.
    pub blob: String,
    pub tensors: Vec<TensorEntry>,
}

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Writes `params` to `manifest` (JSON) and a sibling `.bin` blob.
pub fn save(params: &EncoderParams, manifest: &Path) -> Result<Manifest> {
    let blob = blob_path(manifest);
    let mut bytes = Vec::new();
    let mut tensors = Vec::new();
    for ((name, shape, _), data) in params.tensor_info().into_iter().zip(params.tensors()) {
        tensors.push(TensorEntry {
            name,
            shape,
            dtype: "f32".into(),
            offset: bytes.len(),
        });
        for &v in data {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let m = Manifest {
        config: params.cfg.clone(),
        blob: blob
            .file_name()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string(),
        tensors,
    };
    fs::write(&blob, bytes)?;
    let mut text = serde_json::to_string_pretty(&m)?;
    text.push('\n');
    fs::write(manifest, text)?;
    Ok(m)
}

/// Reads a checkpoint. When `expect` is given, the stored configuration
/// must agree with it on every shape-determining field.
pub fn load(manifest: &Path, expect: Option<&EncoderConfig>) -> Result<EncoderParams> {
    let m: Manifest = serde_json::from_slice(&fs::read(manifest)?)?;
    m.config.validate()?;
    if let Some(e) = expect {
        let key = |c: &EncoderConfig| (c.d_model, c.n_state, c.n_layers, c.n_tokens_max, c.l_s);
        if key(e) != key(&m.config) {
            return Err(ModelError::Shape(format!(
                "checkpoint has (d_model, n_state, n_layers, n_tokens_max, L_s) = {:?}, config wants {:?}",
                key(&m.config),
                key(e)
            )));
        }
    }
    let bytes = fs::read(manifest.with_file_name(&m.blob))?;
    let mut params = EncoderParams::zeros(&m.config);
    let info = params.tensor_info();
    if info.len() != m.tensors.len() {
        return Err(ModelError::Shape(format!(
            "expected {} tensors, found {}",
            info.len(),
            m.tensors.len()
        )));
    }
    for ((entry, (name, shape, _)), dst) in m.tensors.iter().zip(&info).zip(params.tensors_mut()) {
        if &entry.name != name || &entry.shape != shape || entry.dtype != "f32" {
            return Err(ModelError::Shape(format!(
                "tensor {} {:?} does not match {name} {shape:?}",
                entry.name, entry.shape
            )));
        }
        let end = entry.offset + 4 * dst.len();
        let raw = bytes
            .get(entry.offset..end)
            .ok_or_else(|| ModelError::Shape(format!("blob too short for {name}")))?;
        for (v, c) in dst.iter_mut().zip(raw.chunks_exact(4)) {
            *v = f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64;
        }
    }
    if !params.is_finite() {
        return Err(ModelError::Shape("checkpoint holds non-finite values".into()));
    }
    Ok(params)
}

/// Rounds every tensor to fp32, matching a save/load round trip.
pub fn round_to_f32(params: &mut EncoderParams) {
    for t in params.tensors_mut() {
        t.iter_mut().for_each(|v| *v = *v as f32 as f64);
    }
}
