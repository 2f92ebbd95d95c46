//! JSON manifest + raw little-endian blob input format.
//!
//! ```json
//! {
//!   "tensors": [
//!     {"name": "layers.0.mlp.up_proj.weight", "rows": 2, "cols": 2,
//!      "dtype": "f32", "path": "up.bin"}
//!   ],
//!   "metadata": {"source": "synthetic"}
//! }
//! ```
//!
//! Blob paths are relative to the manifest's directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use half::f16;
use serde::{Deserialize, Serialize};

use super::{ModelWeights, WeightMatrix};
use crate::error::{ClaqError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F16,
}

impl Dtype {
    pub fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F16 => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub dtype: Dtype,
    pub path: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub tensors: Vec<ManifestEntry>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

fn decode_blob(entry: &ManifestEntry, bytes: &[u8]) -> Result<Vec<f64>> {
    let expected = entry.rows * entry.cols * entry.dtype.width();
    if bytes.len() != expected {
        return Err(ClaqError::SizeMismatch {
            name: entry.name.clone(),
            expected,
            found: bytes.len(),
        });
    }
    let values = match entry.dtype {
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        Dtype::F16 => bytes
            .chunks_exact(2)
            .map(|c| f16::from_le_bytes([c[0], c[1]]).to_f64())
            .collect(),
    };
    Ok(values)
}

pub fn load_model(manifest_path: impl AsRef<Path>) -> Result<ModelWeights> {
    let manifest_path = manifest_path.as_ref();
    let text = fs::read(manifest_path).map_err(|e| ClaqError::io(manifest_path, e))?;
    let manifest: ModelManifest = serde_json::from_slice(&text)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));

    let mut seen = std::collections::HashSet::new();
    let mut matrices = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        if !seen.insert(entry.name.as_str()) {
            return Err(ClaqError::DuplicateName(entry.name.clone()));
        }
        let blob_path = base.join(&entry.path);
        let bytes = fs::read(&blob_path).map_err(|e| ClaqError::io(&blob_path, e))?;
        let data = decode_blob(entry, &bytes)?;
        matrices.push(WeightMatrix::new(&entry.name, entry.rows, entry.cols, data)?);
    }
    ModelWeights::new(matrices, manifest.metadata)
}

/// Write `model` as f32 blobs next to `manifest_path`.
///
/// Values are narrowed to f32; anything that came from an f16 or f32 source
/// round-trips exactly.
pub fn save_model(model: &ModelWeights, manifest_path: impl AsRef<Path>) -> Result<()> {
    let manifest_path = manifest_path.as_ref();
    let base: PathBuf = manifest_path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&base).map_err(|e| ClaqError::io(&base, e))?;
    let stem = manifest_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("model");

    let mut entries = Vec::with_capacity(model.matrices.len());
    for (i, m) in model.matrices.iter().enumerate() {
        let file = format!("{stem}.{i:04}.f32.bin");
        let mut bytes = Vec::with_capacity(m.len() * 4);
        for &v in m.data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        let p = base.join(&file);
        fs::write(&p, bytes).map_err(|e| ClaqError::io(&p, e))?;
        entries.push(ManifestEntry {
            name: m.name().to_string(),
            rows: m.rows(),
            cols: m.cols(),
            dtype: Dtype::F32,
            path: file,
        });
    }
    let manifest = ModelManifest {
        tensors: entries,
        metadata: model.metadata.clone(),
    };
    let json = serde_json::to_vec_pretty(&manifest)?;
    fs::write(manifest_path, json).map_err(|e| ClaqError::io(manifest_path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_manifest(dir: &Path, entries: &[(&str, usize, usize, &str, &str)]) -> PathBuf {
        let tensors: Vec<serde_json::Value> = entries
            .iter()
            .map(|(n, r, c, d, p)| {
                serde_json::json!({"name": n, "rows": r, "cols": c, "dtype": d, "path": p})
            })
            .collect();
        let path = dir.join("model.json");
        fs::write(&path, serde_json::to_vec(&serde_json::json!({ "tensors": tensors })).unwrap())
            .unwrap();
        path
    }

    fn f32_bytes(v: &[f32]) -> Vec<u8> {
        v.iter().flat_map(|x| x.to_le_bytes()).collect()
    }

    #[test]
    fn loads_f32_tensor() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.bin"), f32_bytes(&[1.0, 2.0, 3.0, 4.0])).unwrap();
        let m = load_model(write_manifest(dir.path(), &[("a", 2, 2, "f32", "a.bin")])).unwrap();
        assert_eq!(m.matrices.len(), 1);
        assert_eq!(m.matrices[0].rows(), 2);
        assert_eq!(m.matrices[0].data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn widens_f16_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let bytes: Vec<u8> = [0.5f32, -2.0]
            .iter()
            .flat_map(|&v| f16::from_f32(v).to_le_bytes())
            .collect();
        fs::write(dir.path().join("h.bin"), bytes).unwrap();
        let m = load_model(write_manifest(dir.path(), &[("h", 1, 2, "f16", "h.bin")])).unwrap();
        assert_eq!(m.matrices[0].data(), &[0.5, -2.0]);
    }

    #[test]
    fn wrong_blob_length_is_size_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.bin"), f32_bytes(&[1.0, 2.0, 3.0])).unwrap();
        let err = load_model(write_manifest(dir.path(), &[("a", 2, 2, "f32", "a.bin")])).unwrap_err();
        assert!(err.to_string().contains("size mismatch"), "{err}");
    }

    #[test]
    fn duplicate_names_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.bin"), f32_bytes(&[1.0])).unwrap();
        let err = load_model(write_manifest(
            dir.path(),
            &[("a", 1, 1, "f32", "a.bin"), ("a", 1, 1, "f32", "a.bin")],
        ))
        .unwrap_err();
        assert!(err.to_string().contains("duplicate name"), "{err}");
    }

    #[test]
    fn missing_blob_and_non_finite_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_model(write_manifest(dir.path(), &[("a", 1, 1, "f32", "nope.bin")])).unwrap_err();
        assert!(matches!(err, ClaqError::Io { .. }));

        fs::write(dir.path().join("n.bin"), f32_bytes(&[f32::NAN])).unwrap();
        let err = load_model(write_manifest(dir.path(), &[("n", 1, 1, "f32", "n.bin")])).unwrap_err();
        assert!(matches!(err, ClaqError::NonFinite(_)));
    }

    #[test]
    fn save_then_load_preserves_order_and_values() {
        let dir = tempfile::tempdir().unwrap();
        let model = ModelWeights::new(
            vec![
                WeightMatrix::new("z", 1, 3, vec![0.25, -1.5, 3.0]).unwrap(),
                WeightMatrix::new("a", 2, 1, vec![7.0, 8.0]).unwrap(),
            ],
            BTreeMap::from([("k".to_string(), "v".to_string())]),
        )
        .unwrap();
        let path = dir.path().join("out.json");
        save_model(&model, &path).unwrap();
        assert_eq!(load_model(&path).unwrap(), model);
    }
}
