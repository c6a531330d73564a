//! Bucket/key object storage for model exchange, plus the binary weight
//! format.
//!
//! Weight objects are laid out as
//!
//! ```text
//! byte 0        format version (currently 1)
//! bytes 1..9    value count n, u64 little-endian
//! bytes 9..     n × f64 little-endian
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParameterVector;

pub const MODEL_FORMAT_VERSION: u8 = 1;
const HEADER_LEN: usize = 9;

pub fn encode_weights(weights: &ParameterVector) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * weights.len());
    out.push(MODEL_FORMAT_VERSION);
    out.extend_from_slice(&(weights.len() as u64).to_le_bytes());
    for v in weights.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_weights(bytes: &[u8]) -> Result<ParameterVector> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if bytes[0] != MODEL_FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format version {}", bytes[0])));
    }
    let n = u64::from_le_bytes(bytes[1..HEADER_LEN].try_into().expect("8 bytes")) as usize;
    let body = &bytes[HEADER_LEN..];
    if body.len() != n.saturating_mul(8) {
        return Err(Error::Format(format!("header says {n} values, body has {} bytes", body.len())));
    }
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    ParameterVector::new(values)
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ObjectKey {
    pub bucket: String,
    pub path: String,
}

impl ObjectKey {
    pub fn new(bucket: impl Into<String>, path: impl Into<String>) -> Result<Self> {
        let key = Self {
            bucket: bucket.into(),
            path: path.into(),
        };
        key.validate()?;
        Ok(key)
    }

    /// Splits `"bucket/rest/of/path"` into bucket and path.
    pub fn parse(full: &str) -> Result<Self> {
        let (bucket, path) = full
            .split_once('/')
            .ok_or_else(|| Error::Storage(format!("`{full}` has no bucket prefix")))?;
        ObjectKey::new(bucket, path)
    }

    fn validate(&self) -> Result<()> {
        if !valid_bucket(&self.bucket) {
            return Err(Error::Storage(format!("invalid bucket name `{}`", self.bucket)));
        }
        let p = Path::new(&self.path);
        if self.path.is_empty()
            || p.components().any(|c| !matches!(c, Component::Normal(_)))
        {
            return Err(Error::Storage(format!("invalid object path `{}`", self.path)));
        }
        Ok(())
    }
}

impl std::fmt::Display for ObjectKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.bucket, self.path)
    }
}

fn valid_bucket(name: &str) -> bool {
    !name.is_empty()
        && name != "."
        && name != ".."
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BucketStatus {
    Created,
    Exists,
}

/// Running byte totals, the communication-cost proxy.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferStats {
    pub bytes_in: u64,
    pub bytes_out: u64,
    pub puts: u64,
    pub gets: u64,
}

pub trait ObjectStore {
    fn create_bucket(&mut self, name: &str) -> Result<BucketStatus>;
    fn list_buckets(&self) -> Vec<String>;
    /// Stores `payload`; returns the key's version token (1 on first write).
    fn put(&mut self, key: &ObjectKey, payload: &[u8]) -> Result<u64>;
    fn get(&mut self, key: &ObjectKey) -> Result<Vec<u8>>;
    /// Idempotent; deleting a missing key is not an error.
    fn delete(&mut self, key: &ObjectKey) -> Result<()>;
    fn list(&self, bucket: &str) -> Result<Vec<String>>;
    fn stats(&self) -> TransferStats;
}

#[derive(Debug, Clone, Default)]
pub struct MemoryStore {
    buckets: BTreeMap<String, BTreeMap<String, (u64, Vec<u8>)>>,
    tokens: BTreeMap<ObjectKey, u64>,
    stats: TransferStats,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Every stored object, for post-run inspection.
    pub fn objects(&self) -> impl Iterator<Item = (ObjectKey, &[u8])> {
        self.buckets.iter().flat_map(|(b, objs)| {
            objs.iter().map(move |(p, (_, bytes))| {
                (
                    ObjectKey {
                        bucket: b.clone(),
                        path: p.clone(),
                    },
                    bytes.as_slice(),
                )
            })
        })
    }
}

fn missing_bucket(name: &str) -> Error {
    Error::Storage(format!("bucket `{name}` does not exist"))
}

impl ObjectStore for MemoryStore {
    fn create_bucket(&mut self, name: &str) -> Result<BucketStatus> {
        if !valid_bucket(name) {
            return Err(Error::Storage(format!("invalid bucket name `{name}`")));
        }
        if self.buckets.contains_key(name) {
            return Ok(BucketStatus::Exists);
        }
        self.buckets.insert(name.to_string(), BTreeMap::new());
        Ok(BucketStatus::Created)
    }

    fn list_buckets(&self) -> Vec<String> {
        self.buckets.keys().cloned().collect()
    }

    fn put(&mut self, key: &ObjectKey, payload: &[u8]) -> Result<u64> {
        key.validate()?;
        let bucket = self
            .buckets
            .get_mut(&key.bucket)
            .ok_or_else(|| missing_bucket(&key.bucket))?;
        // tokens survive deletes so a re-created key never reuses one
        let token = self.tokens.entry(key.clone()).or_insert(0);
        *token += 1;
        bucket.insert(key.path.clone(), (*token, payload.to_vec()));
        self.stats.bytes_in += payload.len() as u64;
        self.stats.puts += 1;
        Ok(*token)
    }

    fn get(&mut self, key: &ObjectKey) -> Result<Vec<u8>> {
        let bytes = self
            .buckets
            .get(&key.bucket)
            .and_then(|b| b.get(&key.path))
            .map(|(_, bytes)| bytes.clone())
            .ok_or_else(|| Error::NotFound {
                bucket: key.bucket.clone(),
                path: key.path.clone(),
            })?;
        self.stats.bytes_out += bytes.len() as u64;
        self.stats.gets += 1;
        Ok(bytes)
    }

    fn delete(&mut self, key: &ObjectKey) -> Result<()> {
        if let Some(b) = self.buckets.get_mut(&key.bucket) {
            b.remove(&key.path);
        }
        Ok(())
    }

    fn list(&self, bucket: &str) -> Result<Vec<String>> {
        self.buckets
            .get(bucket)
            .map(|b| b.keys().cloned().collect())
            .ok_or_else(|| missing_bucket(bucket))
    }

    fn stats(&self) -> TransferStats {
        self.stats
    }
}

/// Maps `<root>/<bucket>/<path>` onto the filesystem. Writes go to a
/// temporary sibling and are renamed into place, so readers never observe
/// a partial object.
#[derive(Debug, Clone)]
pub struct FsStore {
    root: PathBuf,
    tokens: BTreeMap<ObjectKey, u64>,
    stats: TransferStats,
}

impl FsStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self {
            root,
            tokens: BTreeMap::new(),
            stats: TransferStats::default(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn file(&self, key: &ObjectKey) -> PathBuf {
        self.root.join(&key.bucket).join(&key.path)
    }
}

impl ObjectStore for FsStore {
    fn create_bucket(&mut self, name: &str) -> Result<BucketStatus> {
        if !valid_bucket(name) {
            return Err(Error::Storage(format!("invalid bucket name `{name}`")));
        }
        let dir = self.root.join(name);
        if dir.is_dir() {
            return Ok(BucketStatus::Exists);
        }
        fs::create_dir_all(dir)?;
        Ok(BucketStatus::Created)
    }

    fn list_buckets(&self) -> Vec<String> {
        let mut names: Vec<String> = fs::read_dir(&self.root)
            .into_iter()
            .flatten()
            .flatten()
            .filter(|e| e.path().is_dir())
            .filter_map(|e| e.file_name().into_string().ok())
            .collect();
        names.sort();
        names
    }

    fn put(&mut self, key: &ObjectKey, payload: &[u8]) -> Result<u64> {
        key.validate()?;
        if !self.root.join(&key.bucket).is_dir() {
            return Err(missing_bucket(&key.bucket));
        }
        let path = self.file(key);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let tmp = path.with_extension("partial");
        fs::write(&tmp, payload)?;
        fs::rename(&tmp, &path)?;
        let token = self.tokens.entry(key.clone()).or_insert(0);
        *token += 1;
        self.stats.bytes_in += payload.len() as u64;
        self.stats.puts += 1;
        Ok(*token)
    }

    fn get(&mut self, key: &ObjectKey) -> Result<Vec<u8>> {
        match fs::read(self.file(key)) {
            Ok(bytes) => {
                self.stats.bytes_out += bytes.len() as u64;
                self.stats.gets += 1;
                Ok(bytes)
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::NotFound {
                bucket: key.bucket.clone(),
                path: key.path.clone(),
            }),
            Err(e) => Err(e.into()),
        }
    }

    fn delete(&mut self, key: &ObjectKey) -> Result<()> {
        match fs::remove_file(self.file(key)) {
            Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(e.into()),
            _ => Ok(()),
        }
    }

    fn list(&self, bucket: &str) -> Result<Vec<String>> {
        let dir = self.root.join(bucket);
        if !dir.is_dir() {
            return Err(missing_bucket(bucket));
        }
        let mut out = Vec::new();
        let mut stack = vec![dir.clone()];
        while let Some(d) = stack.pop() {
            for entry in fs::read_dir(&d)? {
                let p = entry?.path();
                if p.is_dir() {
                    stack.push(p);
                } else if let Ok(rel) = p.strip_prefix(&dir) {
                    out.push(rel.to_string_lossy().replace('\\', "/"));
                }
            }
        }
        out.sort();
        Ok(out)
    }

    fn stats(&self) -> TransferStats {
        self.stats
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exercise(store: &mut dyn ObjectStore) {
        assert_eq!(store.create_bucket("b").unwrap(), BucketStatus::Created);
        assert_eq!(store.create_bucket("b").unwrap(), BucketStatus::Exists);
        assert!(store.list_buckets().contains(&"b".to_string()));

        let k1 = ObjectKey::new("b", "id001/epoch_1.pkl").unwrap();
        let k2 = ObjectKey::new("b", "id001/epoch_2.pkl").unwrap();
        assert_eq!(store.put(&k1, b"one").unwrap(), 1);
        assert_eq!(store.put(&k2, b"two").unwrap(), 1);
        assert_eq!(store.get(&k1).unwrap(), b"one");
        assert_eq!(store.get(&k2).unwrap(), b"two");

        assert_eq!(store.put(&k1, b"uno").unwrap(), 2);
        assert_eq!(store.get(&k1).unwrap(), b"uno");

        store.delete(&k1).unwrap();
        assert!(matches!(store.get(&k1), Err(Error::NotFound { .. })));
        store.delete(&k1).unwrap();
        assert_eq!(store.list("b").unwrap(), vec!["id001/epoch_2.pkl".to_string()]);

        let missing = ObjectKey::new("nope", "x").unwrap();
        assert!(matches!(store.put(&missing, b"x"), Err(Error::Storage(_))));
    }

    #[test]
    fn memory_store_contract() {
        exercise(&mut MemoryStore::new());
    }

    #[test]
    fn fs_store_contract() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = FsStore::open(dir.path()).unwrap();
        exercise(&mut store);
        assert!(dir.path().join("b/id001/epoch_2.pkl").is_file());
    }

    #[test]
    fn weight_format_round_trip() {
        let w = ParameterVector::new(vec![1.5, -2.0, 0.0, 1e-300]).unwrap();
        let bytes = encode_weights(&w);
        assert_eq!(bytes.len(), 9 + 32);
        assert_eq!(bytes[0], 1);
        assert_eq!(&bytes[1..9], &4u64.to_le_bytes());
        assert_eq!(decode_weights(&bytes).unwrap(), w);
    }

    #[test]
    fn weight_format_rejects_truncation_and_version() {
        let w = ParameterVector::new(vec![1.0, 2.0]).unwrap();
        let mut bytes = encode_weights(&w);
        assert!(decode_weights(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] = 9;
        assert!(decode_weights(&bytes).is_err());
    }

    #[test]
    fn keys_reject_traversal() {
        assert!(ObjectKey::new("b", "../etc/passwd").is_err());
        assert!(ObjectKey::new("", "x").is_err());
        assert_eq!(
            ObjectKey::parse("cifar10_5w/id001/epoch_1.pkl").unwrap(),
            ObjectKey::new("cifar10_5w", "id001/epoch_1.pkl").unwrap()
        );
    }

    #[test]
    fn byte_counters_track_transfers() {
        let mut s = MemoryStore::new();
        s.create_bucket("b").unwrap();
        let k = ObjectKey::new("b", "x").unwrap();
        s.put(&k, &[0u8; 10]).unwrap();
        s.get(&k).unwrap();
        s.get(&k).unwrap();
        let st = s.stats();
        assert_eq!((st.bytes_in, st.bytes_out, st.puts, st.gets), (10, 20, 1, 2));
    }
}
