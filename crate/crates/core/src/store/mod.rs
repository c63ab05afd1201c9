//! Content-addressed parameter store and the sub-plan materialization cache.
//!
//! Parameters are keyed by the SHA-256 of their canonical bytes. Putting bytes that are
//! already present is a no-op, so co-located pipelines that were trained with the same
//! dictionary end up pointing at one physical blob.

mod lru;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, OnceLock};

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

pub use lru::{ByteLru, Inserted};

use crate::ops::DataVector;
use crate::params::{CodecError, ParamView, Params};

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Checksum(pub [u8; 32]);

impl Checksum {
    pub fn of(bytes: &[u8]) -> Self {
        Checksum(Sha256::digest(bytes).into())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn short(&self) -> String {
        hex::encode(&self.0[..6])
    }
}

impl fmt::Display for Checksum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for Checksum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Checksum({})", self.short())
    }
}

impl FromStr for Checksum {
    type Err = hex::FromHexError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out)?;
        Ok(Checksum(out))
    }
}

impl Serialize for Checksum {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Checksum {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Incremental SHA-256 used to digest request records without buffering them.
#[derive(Clone, Default)]
pub struct Digester(Sha256);

impl Digester {
    #[inline]
    pub fn update(&mut self, bytes: &[u8]) {
        self.0.update(bytes);
    }

    pub fn finish(self) -> Checksum {
        Checksum(self.0.finalize().into())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StoreError {
    #[error("corrupt parameter payload: {0}")]
    Corrupt(#[from] CodecError),
    #[error("parameters {0} not found")]
    NotFound(Checksum),
}

/// An immutable parameter payload. The typed view is decoded on first use.
pub struct ParameterBlob {
    checksum: Checksum,
    bytes: Box<[u8]>,
    decoded: OnceLock<Arc<ParamView>>,
    refcount: AtomicUsize,
}

impl fmt::Debug for ParameterBlob {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ParameterBlob")
            .field("checksum", &self.checksum)
            .field("bytes", &self.bytes.len())
            .field("decoded", &self.decoded.get().is_some())
            .finish()
    }
}

impl ParameterBlob {
    pub fn checksum(&self) -> Checksum {
        self.checksum
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn refcount(&self) -> usize {
        self.refcount.load(Ordering::Acquire)
    }

    pub fn is_decoded(&self) -> bool {
        self.decoded.get().is_some()
    }

    pub fn view(&self) -> Result<Arc<ParamView>, StoreError> {
        if let Some(v) = self.decoded.get() {
            return Ok(v.clone());
        }
        let view = Arc::new(ParamView::decode(&self.bytes)?);
        Ok(self.decoded.get_or_init(|| view).clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct StoreConfig {
    /// When false every put keeps its own copy; used to measure what sharing saves.
    pub dedup: bool,
    pub cache_budget_bytes: usize,
}

impl Default for StoreConfig {
    fn default() -> Self {
        StoreConfig {
            dedup: true,
            cache_budget_bytes: 64 << 20,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct StoreStats {
    pub blob_count: usize,
    pub stored_bytes: u64,
    /// Bytes that would be stored without deduplication.
    pub logical_bytes: u64,
    pub dedup_ratio: f64,
    pub decoded_blobs: usize,
    pub decoded_bytes: u64,
    pub cache: CacheStats,
}

#[derive(Default)]
pub struct ObjectStore {
    blobs: RwLock<HashMap<Checksum, Arc<ParameterBlob>>>,
    copies: Mutex<Vec<Arc<ParameterBlob>>>,
    config: StoreConfig,
    logical_bytes: AtomicU64,
    cache: MaterializationCache,
}

impl ObjectStore {
    pub fn new() -> Self {
        Self::with_config(StoreConfig::default())
    }

    pub fn with_config(config: StoreConfig) -> Self {
        ObjectStore {
            blobs: RwLock::new(HashMap::new()),
            copies: Mutex::new(Vec::new()),
            config,
            logical_bytes: AtomicU64::new(0),
            cache: MaterializationCache::new(config.cache_budget_bytes),
        }
    }

    pub fn config(&self) -> StoreConfig {
        self.config
    }

    /// Stores canonical parameter bytes and returns their checksum. Idempotent.
    pub fn put_params(&self, bytes: &[u8]) -> Result<Checksum, StoreError> {
        let sum = Checksum::of(bytes);
        self.logical_bytes.fetch_add(bytes.len() as u64, Ordering::Relaxed);
        if self.config.dedup && self.blobs.read().contains_key(&sum) {
            return Ok(sum);
        }
        Params::decode(bytes)?;
        let blob = Arc::new(ParameterBlob {
            checksum: sum,
            bytes: bytes.into(),
            decoded: OnceLock::new(),
            refcount: AtomicUsize::new(0),
        });
        let mut map = self.blobs.write();
        if let std::collections::hash_map::Entry::Vacant(e) = map.entry(sum) {
            e.insert(blob);
        } else {
            if !self.config.dedup {
                self.copies.lock().push(blob);
            }
        }
        Ok(sum)
    }

    pub fn put(&self, params: &Params) -> Result<Checksum, StoreError> {
        self.put_params(&params.encode())
    }

    pub fn contains(&self, sum: &Checksum) -> bool {
        self.blobs.read().contains_key(sum)
    }

    pub fn get(&self, sum: &Checksum) -> Option<Arc<ParameterBlob>> {
        self.blobs.read().get(sum).cloned()
    }

    pub fn view(&self, sum: &Checksum) -> Result<Arc<ParamView>, StoreError> {
        self.get(sum).ok_or(StoreError::NotFound(*sum))?.view()
    }

    pub fn retain(&self, sum: &Checksum) -> Result<(), StoreError> {
        let blob = self.get(sum).ok_or(StoreError::NotFound(*sum))?;
        blob.refcount.fetch_add(1, Ordering::AcqRel);
        Ok(())
    }

    pub fn release(&self, sum: &Checksum) {
        if let Some(blob) = self.get(sum) {
            let _ = blob
                .refcount
                .fetch_update(Ordering::AcqRel, Ordering::Acquire, |c| c.checked_sub(1));
        }
    }

    pub fn blob_count(&self) -> usize {
        self.blobs.read().len() + self.copies.lock().len()
    }

    pub fn checksums(&self) -> Vec<Checksum> {
        let mut v: Vec<_> = self.blobs.read().keys().copied().collect();
        v.sort();
        v
    }

    pub fn materialization(&self) -> &MaterializationCache {
        &self.cache
    }

    pub fn stats(&self) -> StoreStats {
        let map = self.blobs.read();
        let copies = self.copies.lock();
        let mut stored = 0u64;
        let mut decoded_blobs = 0;
        let mut decoded_bytes = 0u64;
        for b in map.values().chain(copies.iter()) {
            stored += b.bytes.len() as u64;
            if let Some(v) = b.decoded.get() {
                decoded_blobs += 1;
                decoded_bytes += v.heap_bytes() as u64;
            }
        }
        let logical = self.logical_bytes.load(Ordering::Relaxed);
        StoreStats {
            blob_count: map.len() + copies.len(),
            stored_bytes: stored,
            logical_bytes: logical,
            dedup_ratio: if stored == 0 {
                1.0
            } else {
                logical as f64 / stored as f64
            },
            decoded_blobs,
            decoded_bytes,
            cache: self.cache.stats(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CacheKey {
    /// Identifies the shared stage prefix whose outputs are cached.
    pub stage: u64,
    /// Digest of the raw request record.
    pub input: Checksum,
}

/// Copies of the values a cached stage prefix produced, in binding order.
#[derive(Debug, Clone, PartialEq)]
pub struct CachedOutputs {
    pub vectors: Vec<DataVector>,
}

impl CachedOutputs {
    pub fn size_bytes(&self) -> usize {
        self.vectors.iter().map(|v| v.payload_bytes()).sum::<usize>() + 64
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct CacheStats {
    pub entries: usize,
    pub bytes: usize,
    pub budget_bytes: usize,
    pub hits: u64,
    pub misses: u64,
    pub evictions: u64,
    pub hit_rate: f64,
}

/// Stage-output cache shared by every plan on the store, strict LRU under a byte budget.
pub struct MaterializationCache {
    lru: Mutex<ByteLru<CacheKey, Arc<CachedOutputs>>>,
    hits: AtomicU64,
    misses: AtomicU64,
    evictions: AtomicU64,
}

impl Default for MaterializationCache {
    fn default() -> Self {
        Self::new(StoreConfig::default().cache_budget_bytes)
    }
}

impl MaterializationCache {
    pub fn new(budget_bytes: usize) -> Self {
        MaterializationCache {
            lru: Mutex::new(ByteLru::new(budget_bytes)),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
            evictions: AtomicU64::new(0),
        }
    }

    pub fn lookup(&self, key: &CacheKey) -> Option<Arc<CachedOutputs>> {
        let hit = self.lru.lock().get(key).cloned();
        match hit {
            Some(_) => self.hits.fetch_add(1, Ordering::Relaxed),
            None => self.misses.fetch_add(1, Ordering::Relaxed),
        };
        hit
    }

    /// Inserts a result, returning the keys evicted to make room.
    pub fn insert(&self, key: CacheKey, value: CachedOutputs) -> Inserted<CacheKey> {
        let size = value.size_bytes();
        let out = self.lru.lock().insert(key, Arc::new(value), size);
        self.evictions.fetch_add(out.evicted.len() as u64, Ordering::Relaxed);
        out
    }

    pub fn bytes(&self) -> usize {
        self.lru.lock().bytes()
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn clear(&self) {
        self.lru.lock().clear();
    }

    pub fn stats(&self) -> CacheStats {
        let lru = self.lru.lock();
        let hits = self.hits.load(Ordering::Relaxed);
        let misses = self.misses.load(Ordering::Relaxed);
        CacheStats {
            entries: lru.len(),
            bytes: lru.bytes(),
            budget_bytes: lru.budget(),
            hits,
            misses,
            evictions: self.evictions.load(Ordering::Relaxed),
            hit_rate: if hits + misses == 0 {
                0.0
            } else {
                hits as f64 / (hits + misses) as f64
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{NgramParams, TokenizerParams};

    #[test]
    fn put_is_idempotent() {
        let store = ObjectStore::new();
        let b = Params::Tokenizer(TokenizerParams::default()).encode();
        let a = store.put_params(&b).unwrap();
        let before = store.stats().stored_bytes;
        assert_eq!(store.put_params(&b).unwrap(), a);
        assert_eq!(store.stats().stored_bytes, before);
        assert_eq!(store.blob_count(), 1);
    }

    #[test]
    fn near_identical_dictionaries_are_distinct() {
        let store = ObjectStore::new();
        let terms: Vec<String> = (0..1000).map(|i| format!("t{i}")).collect();
        let mut other = terms.clone();
        other[500] = "changed".into();
        let a = store.put(&Params::Ngram(NgramParams::new(1, terms))).unwrap();
        let b = store.put(&Params::Ngram(NgramParams::new(1, other))).unwrap();
        assert_ne!(a, b);
        assert_eq!(store.blob_count(), 2);
    }

    #[test]
    fn corrupt_payload_rejected() {
        let store = ObjectStore::new();
        assert!(matches!(
            store.put_params(b"not a payload"),
            Err(StoreError::Corrupt(_))
        ));
        assert_eq!(store.blob_count(), 0);
    }

    #[test]
    fn dedup_off_keeps_copies() {
        let store = ObjectStore::with_config(StoreConfig {
            dedup: false,
            ..Default::default()
        });
        let b = Params::Tokenizer(TokenizerParams::default()).encode();
        store.put_params(&b).unwrap();
        store.put_params(&b).unwrap();
        let s = store.stats();
        assert_eq!(s.blob_count, 2);
        assert_eq!(s.stored_bytes, 2 * b.len() as u64);
        assert!((s.dedup_ratio - 1.0).abs() < 1e-12);
    }

    #[test]
    fn view_is_decoded_once_and_shared() {
        let store = ObjectStore::new();
        let sum = store
            .put(&Params::Ngram(NgramParams::new(1, vec!["a".into()])))
            .unwrap();
        assert!(!store.get(&sum).unwrap().is_decoded());
        let v1 = store.view(&sum).unwrap();
        let v2 = store.view(&sum).unwrap();
        assert!(Arc::ptr_eq(&v1, &v2));
    }

    #[test]
    fn checksum_hex_roundtrip() {
        let c = Checksum::of(b"abc");
        assert_eq!(
            c.to_hex(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert_eq!(c.to_hex().parse::<Checksum>().unwrap(), c);
    }

    #[test]
    fn cache_hit_and_miss() {
        let cache = MaterializationCache::new(1 << 20);
        let k = CacheKey {
            stage: 1,
            input: Checksum::of(b"x"),
        };
        let v = CachedOutputs {
            vectors: vec![DataVector::from_dense(&[1.0, 2.0])],
        };
        cache.insert(k, v.clone());
        assert_eq!(cache.lookup(&k).as_deref(), Some(&v));
        let other = CacheKey {
            stage: 1,
            input: Checksum::of(b"y"),
        };
        assert!(cache.lookup(&other).is_none());
        let s = cache.stats();
        assert_eq!((s.hits, s.misses), (1, 1));
    }
}
