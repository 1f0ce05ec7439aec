//! Per-node caches of version tables and of their addresses.
//!
//! The version-table cache only ever serves keys whose lock the caller
//! holds on this node. Local committers update it in place; a write lock
//! granted to another node's transaction drops the entry first. Those two
//! rules keep every hit equal to memory without coherence traffic.

use std::collections::HashMap;
use std::num::NonZeroUsize;
use std::sync::atomic::{AtomicU64, Ordering};

use lru::LruCache;
use parking_lot::Mutex;

use crate::locktable::mix64;
use crate::memstore::{Cvt, CvtHeader, LotusKey};
use crate::sharding::shard_of;

pub struct VtCache {
    subs: Vec<Mutex<LruCache<LotusKey, Cvt>>>,
    hits: AtomicU64,
    misses: AtomicU64,
    evictions: AtomicU64,
}

impl VtCache {
    /// `capacity` entries split over `partitions` LRU sub-caches.
    pub fn new(capacity: usize, partitions: usize) -> Self {
        let partitions = partitions.max(1);
        let per = NonZeroUsize::new(capacity.div_ceil(partitions).max(1)).unwrap();
        VtCache {
            subs: (0..partitions).map(|_| Mutex::new(LruCache::new(per))).collect(),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
            evictions: AtomicU64::new(0),
        }
    }

    pub fn partition_of(&self, key: LotusKey) -> usize {
        (mix64(key) % self.subs.len() as u64) as usize
    }

    pub fn lookup(&self, key: LotusKey) -> Option<Cvt> {
        let got = self.subs[self.partition_of(key)].lock().get(&key).cloned();
        match got {
            Some(_) => self.hits.fetch_add(1, Ordering::Relaxed),
            None => self.misses.fetch_add(1, Ordering::Relaxed),
        };
        got
    }

    pub fn update_local(&self, key: LotusKey, cvt: Cvt) {
        let mut sub = self.subs[self.partition_of(key)].lock();
        if let Some((old, _)) = sub.push(key, cvt) {
            if old != key {
                self.evictions.fetch_add(1, Ordering::Relaxed);
            }
        }
    }

    pub fn invalidate(&self, key: LotusKey) {
        self.subs[self.partition_of(key)].lock().pop(&key);
    }

    /// Drop every entry of `shard`; returns how many were dropped.
    pub fn clear_shard(&self, shard: u16) -> usize {
        let mut n = 0;
        for sub in &self.subs {
            let mut sub = sub.lock();
            let keys: Vec<LotusKey> = sub.iter().map(|(k, _)| *k).filter(|k| shard_of(*k) == shard).collect();
            for k in keys {
                sub.pop(&k);
                n += 1;
            }
        }
        n
    }

    pub fn clear(&self) {
        for sub in &self.subs {
            sub.lock().clear();
        }
    }

    pub fn contains(&self, key: LotusKey) -> bool {
        self.subs[self.partition_of(key)].lock().contains(&key)
    }

    pub fn len(&self) -> usize {
        self.subs.iter().map(|s| s.lock().len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn capacity(&self) -> usize {
        self.subs.iter().map(|s| s.lock().cap().get()).sum()
    }

    pub fn partitions(&self) -> usize {
        self.subs.len()
    }

    pub fn keys(&self) -> Vec<LotusKey> {
        let mut v: Vec<LotusKey> = self.subs.iter().flat_map(|s| s.lock().iter().map(|(k, _)| *k).collect::<Vec<_>>()).collect();
        v.sort_unstable();
        v
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }

    pub fn evictions(&self) -> u64 {
        self.evictions.load(Ordering::Relaxed)
    }
}

/// Key to CVT address. Entries may go stale; readers check the header.
#[derive(Default)]
pub struct AddrCache {
    map: Mutex<HashMap<LotusKey, u64>>,
    hits: AtomicU64,
    misses: AtomicU64,
    stale: AtomicU64,
}

impl AddrCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn lookup(&self, key: LotusKey) -> Option<u64> {
        let got = self.map.lock().get(&key).copied();
        match got {
            Some(_) => self.hits.fetch_add(1, Ordering::Relaxed),
            None => self.misses.fetch_add(1, Ordering::Relaxed),
        };
        got
    }

    pub fn insert(&self, key: LotusKey, addr: u64) {
        self.map.lock().insert(key, addr);
    }

    pub fn remove(&self, key: LotusKey) {
        self.map.lock().remove(&key);
    }

    pub fn clear(&self) {
        self.map.lock().clear();
    }

    /// True iff the fetched header still describes `key`. A false result is
    /// counted as a stale hit.
    pub fn validate(&self, header: &CvtHeader, key: LotusKey) -> bool {
        let fresh = header.occupied && header.key == key;
        if !fresh {
            self.stale.fetch_add(1, Ordering::Relaxed);
        }
        fresh
    }

    pub fn len(&self) -> usize {
        self.map.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }

    pub fn stale(&self) -> u64 {
        self.stale.load(Ordering::Relaxed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memstore::CvtCell;

    fn cvt(key: u64, version: u64) -> Cvt {
        let mut c = Cvt::empty(key, 1, 8, 2);
        c.cells[0] = CvtCell {
            valid: true,
            version,
            head_cv: 1,
            tail_cv: 1,
            address: 0x100,
            tombstone: false,
        };
        c
    }

    #[test]
    fn update_then_lookup() {
        let c = VtCache::new(16, 2);
        assert!(c.lookup(5).is_none());
        c.update_local(5, cvt(5, 10));
        assert_eq!(c.lookup(5), Some(cvt(5, 10)));
        c.update_local(5, cvt(5, 20));
        assert_eq!(c.lookup(5), Some(cvt(5, 20)));
        assert_eq!((c.hits(), c.misses()), (2, 1));
    }

    #[test]
    fn invalidate_is_idempotent() {
        let c = VtCache::new(16, 2);
        c.invalidate(9);
        c.update_local(9, cvt(9, 1));
        c.invalidate(9);
        c.invalidate(9);
        assert!(c.lookup(9).is_none());
    }

    #[test]
    fn lru_eviction() {
        let c = VtCache::new(3, 1);
        for k in 0..3 {
            c.update_local(k, cvt(k, 1));
        }
        c.lookup(0);
        c.update_local(3, cvt(3, 1));
        assert!(!c.contains(1));
        assert!(c.contains(0) && c.contains(2) && c.contains(3));
        assert_eq!(c.len(), 3);
        assert_eq!(c.evictions(), 1);
    }

    #[test]
    fn capacity_is_never_exceeded() {
        let c = VtCache::new(100, 8);
        for k in 0..10_000 {
            c.update_local(k * 7919, cvt(k, 1));
            assert!(c.len() <= c.capacity());
        }
        assert!(c.capacity() >= 100);
    }

    #[test]
    fn shard_clear() {
        let c = VtCache::new(64, 4);
        c.update_local(1 << 12 | 7, cvt(0, 1));
        c.update_local(2 << 12 | 7, cvt(0, 1));
        c.update_local(3 << 12 | 8, cvt(0, 1));
        assert_eq!(c.clear_shard(7), 2);
        assert_eq!(c.keys(), vec![3 << 12 | 8]);
    }

    #[test]
    fn partitions_are_disjoint() {
        let c = VtCache::new(64, 4);
        for k in 0..1000u64 {
            let p = c.partition_of(k);
            assert_eq!(p, c.partition_of(k));
            assert!(p < 4);
        }
    }

    #[test]
    fn addr_validation() {
        let a = AddrCache::new();
        assert!(a.lookup(1).is_none());
        a.insert(1, 0x4000);
        assert_eq!(a.lookup(1), Some(0x4000));
        let mut h = cvt(1, 1).header;
        assert!(a.validate(&h, 1));
        h.key = 2;
        assert!(!a.validate(&h, 1));
        h.key = 1;
        h.occupied = false;
        assert!(!a.validate(&h, 1));
        assert_eq!(a.stale(), 2);
    }
}
