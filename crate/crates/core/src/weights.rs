//! Named-tensor collections with a bit-exact on-disk format, shared by the
//! U-Net and the perceptual loss network: a `<name>.wts.json` manifest plus a
//! single densely packed `<name>.wts.raw` f32le blob.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Array;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub array: Array,
}

/// An ordered named-tensor collection. `input_offset`/`input_scale` carry the
/// per-channel input transform of a loss network; `unet_config` lets a U-Net
/// weight file describe its own architecture.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelWeights {
    pub tensors: Vec<NamedTensor>,
    pub input_offset: Option<[f64; 3]>,
    pub input_scale: Option<[f64; 3]>,
    pub unet_config: Option<serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    tensors: Vec<TensorEntry>,
    #[serde(skip_serializing_if = "Option::is_none")]
    input_offset: Option<[f64; 3]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    input_scale: Option<[f64; 3]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    unet_config: Option<serde_json::Value>,
    data: String,
}

fn wts_paths(path: &Path) -> (PathBuf, String) {
    let s = path.to_string_lossy();
    let base = s.strip_suffix(".wts.json").unwrap_or(&s).to_string();
    let manifest = PathBuf::from(format!("{base}.wts.json"));
    let stem = Path::new(&base)
        .file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_else(|| base.clone());
    (manifest, stem)
}

impl ModelWeights {
    pub fn validate(&self) -> Result<()> {
        for (i, t) in self.tensors.iter().enumerate() {
            if self.tensors[..i].iter().any(|o| o.name == t.name) {
                return Err(Error::invalid("tensors", format!("duplicate tensor name {:?}", t.name)));
            }
        }
        Ok(())
    }

    /// Writes `<name>.wts.json` + `<name>.wts.raw`. Values are stored as f32;
    /// offsets are ascending and densely packed.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.validate()?;
        let (manifest_path, stem) = wts_paths(path.as_ref());
        let raw_name = format!("{stem}.wts.raw");
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut blob: Vec<u8> = Vec::new();
        for t in &self.tensors {
            let offset = blob.len() as u64;
            for v in t.array.data() {
                blob.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            entries.push(TensorEntry {
                name: t.name.clone(),
                shape: t.array.shape().to_vec(),
                dtype: "f32le".to_string(),
                offset,
                len: blob.len() as u64 - offset,
            });
        }
        let manifest = Manifest {
            tensors: entries,
            input_offset: self.input_offset,
            input_scale: self.input_scale,
            unet_config: self.unet_config.clone(),
            data: raw_name.clone(),
        };
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;
        let raw_path = manifest_path.with_file_name(&raw_name);
        fs::write(&raw_path, blob).map_err(|e| Error::io(&raw_path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (manifest_path, _) = wts_paths(path.as_ref());
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format {
            what: "weights manifest",
            path: manifest_path.clone(),
            reason: e.to_string(),
        })?;
        let raw_path = manifest_path.with_file_name(&manifest.data);
        let blob = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        let mut expected_offset = 0u64;
        for e in &manifest.tensors {
            if e.dtype != "f32le" {
                return Err(Error::WeightMismatch {
                    name: e.name.clone(),
                    reason: format!("unsupported dtype {:?}", e.dtype),
                });
            }
            let numel: usize = e.shape.iter().product();
            if e.len != numel as u64 * 4 {
                return Err(Error::WeightMismatch {
                    name: e.name.clone(),
                    reason: format!("len {} does not match shape {:?}", e.len, e.shape),
                });
            }
            if e.offset != expected_offset {
                return Err(Error::WeightMismatch {
                    name: e.name.clone(),
                    reason: format!("offset {} not densely packed (expected {expected_offset})", e.offset),
                });
            }
            expected_offset += e.len;
            let start = e.offset as usize;
            let end = start + e.len as usize;
            if end > blob.len() {
                return Err(Error::LengthMismatch {
                    path: raw_path.clone(),
                    expected: expected_offset,
                    found: blob.len() as u64,
                });
            }
            let data: Vec<f64> = blob[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            tensors.push(NamedTensor { name: e.name.clone(), array: Array::from_vec(&e.shape, data)? });
        }
        if expected_offset != blob.len() as u64 {
            return Err(Error::LengthMismatch {
                path: raw_path,
                expected: expected_offset,
                found: blob.len() as u64,
            });
        }
        let weights = ModelWeights {
            tensors,
            input_offset: manifest.input_offset,
            input_scale: manifest.input_scale,
            unet_config: manifest.unet_config,
        };
        weights.validate()?;
        Ok(weights)
    }
}
