//! Packed tensor stores: a binary blob of little-endian `f64` rows plus a JSON
//! index keyed by sample id.
//!
//! Layout of a store directory:
//!
//! ```text
//! index.json    { version, fingerprint, dims, synthetic, entries: [{key, class_id, offset, shape}] }
//! tensors.bin   "ZSGT" magic, u32 version, then raw f64 payloads at the recorded offsets
//! ```

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::Mat;

pub const STORE_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"ZSGT";
const HEADER_LEN: u64 = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoreEntry {
    pub key: String,
    pub class_id: Option<usize>,
    pub offset: u64,
    pub shape: (usize, usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoreIndex {
    pub version: u32,
    /// Identifies what produced the tensors (provider settings, model hash).
    pub fingerprint: String,
    pub dims: Vec<usize>,
    pub synthetic: bool,
    pub entries: Vec<StoreEntry>,
}

/// In-memory tensors keyed by sample id, preserving insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorStore {
    pub fingerprint: String,
    pub dims: Vec<usize>,
    pub synthetic: bool,
    keys: Vec<String>,
    class_ids: Vec<Option<usize>>,
    tensors: Vec<Mat>,
    lookup: HashMap<String, usize>,
}

impl TensorStore {
    pub fn new(fingerprint: impl Into<String>, dims: Vec<usize>, synthetic: bool) -> Self {
        Self {
            fingerprint: fingerprint.into(),
            dims,
            synthetic,
            ..Self::default()
        }
    }

    pub fn insert(&mut self, key: impl Into<String>, class_id: Option<usize>, tensor: Mat) -> Result<()> {
        let key = key.into();
        if self.lookup.contains_key(&key) {
            return Err(Error::Invalid(format!("duplicate tensor key {key}")));
        }
        self.lookup.insert(key.clone(), self.keys.len());
        self.keys.push(key);
        self.class_ids.push(class_id);
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn get(&self, key: &str) -> Option<&Mat> {
        self.lookup.get(key).map(|&i| &self.tensors[i])
    }

    pub fn class_id(&self, key: &str) -> Option<usize> {
        self.lookup.get(key).and_then(|&i| self.class_ids[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Option<usize>, &Mat)> {
        self.keys
            .iter()
            .zip(&self.class_ids)
            .zip(&self.tensors)
            .map(|((k, c), t)| (k.as_str(), *c, t))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let bin_path = dir.join("tensors.bin");
        let mut blob = Vec::with_capacity(HEADER_LEN as usize + self.tensors.iter().map(|t| t.len() * 8).sum::<usize>());
        blob.extend_from_slice(MAGIC);
        blob.extend_from_slice(&STORE_VERSION.to_le_bytes());
        let mut entries = Vec::with_capacity(self.len());
        for ((key, class_id), t) in self.keys.iter().zip(&self.class_ids).zip(&self.tensors) {
            entries.push(StoreEntry {
                key: key.clone(),
                class_id: *class_id,
                offset: blob.len() as u64,
                shape: t.dim(),
            });
            for v in t.iter() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        write_atomic(&bin_path, &blob)?;
        let index = StoreIndex {
            version: STORE_VERSION,
            fingerprint: self.fingerprint.clone(),
            dims: self.dims.clone(),
            synthetic: self.synthetic,
            entries,
        };
        write_atomic(&dir.join("index.json"), serde_json::to_string_pretty(&index)?.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let index_path = dir.join("index.json");
        let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
        let index: StoreIndex = serde_json::from_str(&text)?;
        let bin_path = dir.join("tensors.bin");
        let corrupt = |msg: String| Error::Archive {
            path: bin_path.clone(),
            msg,
        };
        if index.version != STORE_VERSION {
            return Err(corrupt(format!("unsupported store version {}", index.version)));
        }
        let blob = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
        if blob.len() < HEADER_LEN as usize || &blob[..4] != MAGIC {
            return Err(corrupt("bad magic".into()));
        }
        let mut store = TensorStore::new(index.fingerprint, index.dims, index.synthetic);
        for e in index.entries {
            let n = e.shape.0 * e.shape.1;
            let start = e.offset as usize;
            let end = start + n * 8;
            if end > blob.len() {
                return Err(corrupt(format!("entry {} runs past the end of the blob", e.key)));
            }
            let data: Vec<f64> = blob[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Mat::from_shape_vec(e.shape, data).map_err(|err| corrupt(err.to_string()))?;
            store.insert(e.key, e.class_id, t)?;
        }
        Ok(store)
    }

    pub fn exists(dir: &Path) -> bool {
        dir.join("index.json").is_file() && dir.join("tensors.bin").is_file()
    }
}

/// Writes through a temporary file and renames into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp: PathBuf = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn store_round_trips_bit_exactly(
            rows in 1usize..4,
            cols in 1usize..5,
            values in proptest::collection::vec(proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL, 20),
        ) {
            let dir = tempfile::tempdir().unwrap();
            let mut store = TensorStore::new("fp", vec![rows, cols], false);
            let t = Mat::from_shape_fn((rows, cols), |(i, j)| values[(i * cols + j) % values.len()]);
            store.insert("a", Some(3), t.clone()).unwrap();
            store.insert("b", None, t.mapv(|v| -v)).unwrap();
            store.save(dir.path()).unwrap();
            let back = TensorStore::load(dir.path()).unwrap();
            prop_assert_eq!(&back, &store);
            let bits = |m: &Mat| m.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(back.get("a").unwrap()), bits(&t));
            prop_assert_eq!(back.class_id("a"), Some(3));
        }
    }

    #[test]
    fn rejects_truncated_blob() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = TensorStore::new("fp", vec![2, 2], true);
        store.insert("x", None, Mat::ones((2, 2))).unwrap();
        store.save(dir.path()).unwrap();
        let bin = dir.path().join("tensors.bin");
        let bytes = fs::read(&bin).unwrap();
        fs::write(&bin, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(TensorStore::load(dir.path()), Err(Error::Archive { .. })));
    }

    #[test]
    fn rejects_duplicate_keys() {
        let mut store = TensorStore::new("fp", vec![], false);
        store.insert("x", None, Mat::ones((1, 1))).unwrap();
        assert!(store.insert("x", None, Mat::ones((1, 1))).is_err());
    }
}
