//! Parameter checkpoints: a JSON manifest plus a raw little-endian `f64` blob.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset of the first value in the blob.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// Blob file name, relative to the manifest's directory.
    pub blob: String,
    pub total_bytes: usize,
    pub params: Vec<ManifestEntry>,
}

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Writes `<path>` (manifest) and `<path>.bin` (blob, extension replaced).
pub fn save<T: Scalar>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    let mut blob = Vec::with_capacity(store.numel() * 8);
    let mut params = Vec::with_capacity(store.len());
    for (name, t) in store.names().iter().zip(store.tensors()) {
        params.push(ManifestEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: blob.len(),
        });
        for v in t.data() {
            blob.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    let bpath = blob_path(path);
    let manifest = Manifest {
        blob: bpath
            .file_name()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_owned(),
        total_bytes: blob.len(),
        params,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(path, json).map_err(|e| Error::io(path, e))?;
    fs::write(&bpath, blob).map_err(|e| Error::io(&bpath, e))
}

pub fn load<T: Scalar>(path: &Path) -> Result<ParamStore<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let bpath = path.with_file_name(&manifest.blob);
    let blob = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    if blob.len() != manifest.total_bytes {
        return Err(Error::Format(format!(
            "blob holds {} bytes, manifest declares {}",
            blob.len(),
            manifest.total_bytes
        )));
    }
    let mut store = ParamStore::new();
    let mut expected_offset = 0;
    for e in &manifest.params {
        let n: usize = e.shape.iter().product();
        if e.offset != expected_offset || e.offset + n * 8 > blob.len() {
            return Err(Error::Format(format!(
                "bad offset for parameter {}",
                e.name
            )));
        }
        let data = blob[e.offset..e.offset + n * 8]
            .chunks_exact(8)
            .map(|c| T::of(f64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        store.add(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
        expected_offset += n * 8;
    }
    if expected_offset != blob.len() {
        return Err(Error::Format("trailing bytes in blob".into()));
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_length_validation() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::<f64>::new();
        store.add(
            "w",
            Tensor::from_f64([2, 2], &[1.0, -2.5, 3.25, 1e-300]).unwrap(),
        );
        store.add(
            "b",
            Tensor::from_f64([2], &[0.1, f64::MIN_POSITIVE]).unwrap(),
        );
        let path = dir.path().join("ckpt.json");
        save(&store, &path).unwrap();
        let back: ParamStore<f64> = load(&path).unwrap();
        assert_eq!(back, store);

        let bin = dir.path().join("ckpt.bin");
        let mut bytes = fs::read(&bin).unwrap();
        bytes.pop();
        fs::write(&bin, bytes).unwrap();
        assert!(matches!(load::<f64>(&path), Err(Error::Format(_))));
    }
}
