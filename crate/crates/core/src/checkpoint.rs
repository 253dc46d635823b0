//! Checkpoint format: a JSON manifest plus one binary blob per parameter.
//!
//! The manifest (`manifest.json`) lists parameter names, shapes, and dtype.
//! Each parameter lives in `<name>.bin` as little-endian row-major floats.
//! Portable checkpoints store `f32` (rounded explicitly on save); training
//! resume states store `f64` so a resumed run continues bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    pub file: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub params: Vec<ManifestEntry>,
}

pub const MANIFEST_FORMAT: &str = "laylora-checkpoint-v1";
pub const MANIFEST_FILE: &str = "manifest.json";

fn blob_file_name(param: &str) -> String {
    format!("{param}.bin")
}

/// Writes all parameters into `dir` (created if missing).
pub fn save_checkpoint(dir: &Path, params: &[(String, &Tensor)], dtype: Dtype) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(params.len());
    for (name, tensor) in params {
        let file = blob_file_name(name);
        let mut bytes = Vec::with_capacity(tensor.numel() * 8);
        match dtype {
            Dtype::F32 => {
                for &v in tensor.data() {
                    bytes.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            Dtype::F64 => {
                for &v in tensor.data() {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        fs::write(dir.join(&file), bytes)?;
        entries.push(ManifestEntry {
            name: name.clone(),
            shape: tensor.shape().to_vec(),
            dtype,
            file,
        });
    }
    let manifest = Manifest { format: MANIFEST_FORMAT.into(), params: entries };
    let json = serde_json::to_string_pretty(&manifest).expect("serializable manifest");
    fs::write(dir.join(MANIFEST_FILE), json)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(Error::Checkpoint(format!("unknown checkpoint format {:?}", manifest.format)));
    }
    Ok(manifest)
}

/// Loads every parameter named by the manifest, widened to f64.
pub fn load_checkpoint(dir: &Path) -> Result<Vec<(String, Tensor)>> {
    let manifest = read_manifest(dir)?;
    let mut out = Vec::with_capacity(manifest.params.len());
    for entry in &manifest.params {
        let bytes = fs::read(dir.join(&entry.file))
            .map_err(|e| Error::Checkpoint(format!("cannot read blob {}: {e}", entry.file)))?;
        let numel: usize = entry.shape.iter().product();
        let width = match entry.dtype {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        };
        if bytes.len() != numel * width {
            return Err(Error::Checkpoint(format!(
                "blob {} has {} bytes, expected {}",
                entry.file,
                bytes.len(),
                numel * width
            )));
        }
        let data: Vec<f64> = match entry.dtype {
            Dtype::F32 => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect(),
            Dtype::F64 => bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
                .collect(),
        };
        out.push((entry.name.clone(), Tensor::from_vec(entry.shape.clone(), data)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_f64_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = Tensor::randn(vec![3, 5], 0.7, &mut rng);
        save_checkpoint(dir.path(), &[("x.w".into(), &t)], Dtype::F64).unwrap();
        let loaded = load_checkpoint(dir.path()).unwrap();
        assert_eq!(loaded.len(), 1);
        assert_eq!(loaded[0].0, "x.w");
        assert_eq!(loaded[0].1.data(), t.data());
    }

    #[test]
    fn f32_round_trip_rounds_to_f32_precision() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::vector(vec![0.1, -2.5, 1e-9]);
        save_checkpoint(dir.path(), &[("v".into(), &t)], Dtype::F32).unwrap();
        let loaded = load_checkpoint(dir.path()).unwrap();
        for (orig, got) in t.data().iter().zip(loaded[0].1.data()) {
            assert_eq!(*got, *orig as f32 as f64);
        }
    }

    #[test]
    fn size_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::vector(vec![1.0, 2.0]);
        save_checkpoint(dir.path(), &[("v".into(), &t)], Dtype::F32).unwrap();
        std::fs::write(dir.path().join("v.bin"), [0u8; 4]).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Checkpoint(_))));
    }
}
