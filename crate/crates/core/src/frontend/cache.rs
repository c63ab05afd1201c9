use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::Mutex;
use serde::Serialize;

use crate::runtime::{PlanId, Prediction};
use crate::store::{ByteLru, Checksum};

/// Each entry is charged one unit; the budget is the entry count.
const ENTRY_COST: usize = 1;

/// End-to-end prediction cache keyed by (plan, record digest), LRU eviction.
#[derive(Debug)]
pub struct ResultCache {
    lru: Mutex<ByteLru<(PlanId, Checksum), Prediction>>,
    hits: AtomicU64,
    misses: AtomicU64,
    evictions: AtomicU64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct ResultCacheStats {
    pub entries: usize,
    pub capacity: usize,
    pub hits: u64,
    pub misses: u64,
    pub evictions: u64,
}

impl ResultCache {
    pub fn new(entries: usize) -> Self {
        ResultCache {
            lru: Mutex::new(ByteLru::new(entries * ENTRY_COST)),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
            evictions: AtomicU64::new(0),
        }
    }

    pub fn get(&self, plan: PlanId, digest: Checksum) -> Option<Prediction> {
        let hit = self.lru.lock().get(&(plan, digest)).copied();
        let counter = if hit.is_some() { &self.hits } else { &self.misses };
        counter.fetch_add(1, Ordering::Relaxed);
        hit
    }

    pub fn insert(&self, plan: PlanId, digest: Checksum, p: Prediction) {
        let out = self.lru.lock().insert((plan, digest), p, ENTRY_COST);
        self.evictions.fetch_add(out.evicted.len() as u64, Ordering::Relaxed);
    }

    pub fn stats(&self) -> ResultCacheStats {
        let lru = self.lru.lock();
        ResultCacheStats {
            entries: lru.len(),
            capacity: lru.budget() / ENTRY_COST,
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
            evictions: self.evictions.load(Ordering::Relaxed),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(score: f64) -> Prediction {
        Prediction {
            score,
            probability: None,
        }
    }

    #[test]
    fn lru_eviction() {
        let c = ResultCache::new(2);
        let d = |b: u8| Checksum([b; 32]);
        c.insert(PlanId(0), d(1), p(1.0));
        c.insert(PlanId(0), d(2), p(2.0));
        assert_eq!(c.get(PlanId(0), d(1)), Some(p(1.0)));
        c.insert(PlanId(0), d(3), p(3.0));
        assert_eq!(c.get(PlanId(0), d(2)), None);
        assert_eq!(c.get(PlanId(1), d(1)), None);
        let s = c.stats();
        assert_eq!((s.entries, s.hits, s.misses, s.evictions), (2, 1, 2, 1));
    }
}
