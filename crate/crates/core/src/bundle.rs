//! Named-tensor bundles on disk.
//!
//! A bundle is a directory holding
//!
//! * `manifest.json`: `{"format": "kenet-bundle", "version": 1, "meta": {..},
//!   "tensors": [{"name", "shape": [rows, cols], "offset", "sha256"}]}`
//! * `tensors.bin`: every tensor's row-major `f64` values, little-endian,
//!   concatenated in manifest order. `offset` counts elements, not bytes.
//!
//! Tensors are written sorted by name, so identical contents always produce
//! byte-identical files. `sha256` covers the tensor's little-endian bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tape::Matrix;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DATA_FILE: &str = "tensors.bin";
const FORMAT: &str = "kenet-bundle";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub offset: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Bundle {
    pub meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Matrix>,
}

pub fn tensor_bytes(m: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(m.len() * 8);
    for v in m.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn tensor_hash(m: &Matrix) -> String {
    let mut h = Sha256::new();
    h.update((m.nrows() as u64).to_le_bytes());
    h.update((m.ncols() as u64).to_le_bytes());
    h.update(tensor_bytes(m));
    hex::encode(h.finalize())
}

impl Bundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, m: Matrix) {
        self.tensors.insert(name.into(), m);
    }

    pub fn get(&self, name: &str) -> Result<&Matrix> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Lookup(format!("tensor `{name}` not in bundle")))
    }

    pub fn manifest(&self) -> Manifest {
        let mut offset = 0;
        let tensors = self
            .tensors
            .iter()
            .map(|(name, m)| {
                let e = TensorEntry {
                    name: name.clone(),
                    shape: [m.nrows(), m.ncols()],
                    offset,
                    sha256: sha256_hex(&tensor_bytes(m)),
                };
                offset += m.len();
                e
            })
            .collect();
        Manifest {
            format: FORMAT.to_string(),
            version: 1,
            meta: self.meta.clone(),
            tensors,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut data = Vec::new();
        for m in self.tensors.values() {
            data.extend(tensor_bytes(m));
        }
        let manifest = serde_json::to_string_pretty(&self.manifest())?;
        write_file(&dir.join(DATA_FILE), &data)?;
        write_file(&dir.join(MANIFEST_FILE), manifest.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = read_manifest(dir)?;
        let data_path = dir.join(DATA_FILE);
        let data = fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
        let mut tensors = BTreeMap::new();
        for entry in manifest.tensors {
            let [rows, cols] = entry.shape;
            let start = entry.offset * 8;
            let end = start + rows * cols * 8;
            let bytes = data.get(start..end).ok_or_else(|| {
                Error::Serde(format!("tensor `{}` runs past end of {}", entry.name, DATA_FILE))
            })?;
            if sha256_hex(bytes) != entry.sha256 {
                return Err(Error::Serde(format!("hash mismatch for tensor `{}`", entry.name)));
            }
            let values = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let m = Matrix::from_shape_vec((rows, cols), values)
                .map_err(|e| Error::Serde(e.to_string()))?;
            tensors.insert(entry.name, m);
        }
        Ok(Bundle {
            meta: manifest.meta,
            tensors,
        })
    }
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != FORMAT {
        return Err(Error::Serde(format!("{} is not a {FORMAT} manifest", path.display())));
    }
    Ok(manifest)
}

/// Writes via a temporary sibling and rename, so readers never see a torn file.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension(format!(
        "tmp{}-{:?}",
        std::process::id(),
        std::thread::current().id()
    ));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}
