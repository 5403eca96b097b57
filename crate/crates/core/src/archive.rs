//! Tensor archive: a directory holding `index.json` (tensor name -> shape,
//! dtype, byte offset) plus `blob.bin`, a single little-endian buffer of
//! row-major 32-bit floats. Round-trips bit-exactly.

use crate::error::{Error, Result};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct IndexEntry {
    shape: Vec<usize>,
    dtype: String,
    /// Byte offset into blob.bin.
    offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
struct Index {
    tensors: BTreeMap<String, IndexEntry>,
    #[serde(default)]
    meta: BTreeMap<String, serde_json::Value>,
}

/// In-memory archive; tensors are stored as f64 but serialized as f32.
#[derive(Debug, Clone, Default)]
pub struct TensorArchive {
    tensors: BTreeMap<String, ArrayD<f64>>,
    meta: BTreeMap<String, serde_json::Value>,
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: ArrayD<f64>) {
        self.tensors.insert(name.to_string(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.tensors.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.get(name).ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn set_meta(&mut self, key: &str, value: serde_json::Value) {
        self.meta.insert(key.to_string(), value);
    }

    pub fn meta(&self, key: &str) -> Option<&serde_json::Value> {
        self.meta.get(key)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut index = Index { meta: self.meta.clone(), ..Index::default() };
        let mut blob: Vec<u8> = Vec::new();
        for (name, t) in &self.tensors {
            let offset = blob.len() as u64;
            for &v in t.iter() {
                blob.extend_from_slice(&(v as f32).to_le_bytes());
            }
            index.tensors.insert(
                name.clone(),
                IndexEntry { shape: t.shape().to_vec(), dtype: "f32".into(), offset },
            );
        }
        let mut f = std::fs::File::create(dir.join("blob.bin"))?;
        f.write_all(&blob)?;
        let json = serde_json::to_string_pretty(&index)?;
        std::fs::write(dir.join("index.json"), json)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let index: Index = serde_json::from_str(&std::fs::read_to_string(dir.join("index.json"))?)?;
        let mut blob = Vec::new();
        std::fs::File::open(dir.join("blob.bin"))?.read_to_end(&mut blob)?;
        let mut tensors = BTreeMap::new();
        for (name, e) in &index.tensors {
            if e.dtype != "f32" {
                return Err(Error::Archive(format!("unsupported dtype {} for {name}", e.dtype)));
            }
            let count: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + count * 4;
            if end > blob.len() {
                return Err(Error::Archive(format!("tensor {name} extends past blob end")));
            }
            let vals: Vec<f64> = blob[start..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            let arr = ArrayD::from_shape_vec(IxDyn(&e.shape), vals)
                .map_err(|e| Error::Archive(e.to_string()))?;
            tensors.insert(name.clone(), arr);
        }
        Ok(Self { tensors, meta: index.meta })
    }
}
