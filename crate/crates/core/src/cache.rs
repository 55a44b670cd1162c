// SPDX-License-Identifier: Apache-2.0

//! Trusted LRU cache of authenticated node digests with write-back.
//!
//! An entry in the cache is the truth for its node. The copy on the untrusted
//! store may be stale while the entry is dirty; dirty victims are handed back
//! to the caller on eviction so it can write them out.

use std::num::NonZeroUsize;

use lru::LruCache;
use serde::{Deserialize, Serialize};

use crate::crypto::Iv;
use crate::error::{Error, Result};
use crate::model::{Digest, NodeId};

/// Leaf payload carried alongside the digest.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LeafMeta {
    pub iv: Iv,
    pub written: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CacheEntry {
    pub digest: Digest,
    /// Never negative.
    pub hotness: i64,
    pub dirty: bool,
    pub leaf: Option<LeafMeta>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheConfig {
    pub capacity_entries: usize,
}

impl CacheConfig {
    /// Sizes the cache as a fraction of the tree's node count, at least one entry.
    pub fn from_ratio(ratio: f64, tree_nodes: u64) -> Result<Self> {
        if !(ratio > 0.0 && ratio <= 1.0) {
            return Err(Error::usage(format!("cache ratio {ratio} outside (0, 1]")));
        }
        let capacity_entries = ((ratio * tree_nodes as f64).floor() as usize).max(1);
        Ok(CacheConfig { capacity_entries })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub evictions: u64,
    pub dirty_evictions: u64,
}

impl CacheStats {
    pub fn miss_rate(&self) -> f64 {
        let total = self.hits + self.misses;
        if total == 0 {
            0.0
        } else {
            self.misses as f64 / total as f64
        }
    }

    pub fn hit_rate(&self) -> f64 {
        let total = self.hits + self.misses;
        if total == 0 {
            0.0
        } else {
            self.hits as f64 / total as f64
        }
    }
}

/// A dirty entry pushed out by an insertion.
pub type Victim = (NodeId, CacheEntry);

pub struct SecureCache {
    lru: LruCache<NodeId, CacheEntry>,
    stats: CacheStats,
}

impl std::fmt::Debug for SecureCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SecureCache")
            .field("len", &self.lru.len())
            .field("capacity", &self.lru.cap())
            .field("stats", &self.stats)
            .finish()
    }
}

impl SecureCache {
    pub fn new(config: CacheConfig) -> Self {
        let cap = NonZeroUsize::new(config.capacity_entries.max(1)).unwrap();
        SecureCache { lru: LruCache::new(cap), stats: CacheStats::default() }
    }

    pub fn capacity(&self) -> usize {
        self.lru.cap().get()
    }

    pub fn len(&self) -> usize {
        self.lru.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lru.is_empty()
    }

    pub fn stats(&self) -> CacheStats {
        self.stats
    }

    /// Lookup that refreshes recency and counts a hit or miss.
    pub fn get(&mut self, node: NodeId) -> Option<&CacheEntry> {
        match self.lru.get(&node) {
            Some(e) => {
                self.stats.hits += 1;
                Some(e)
            }
            None => {
                self.stats.misses += 1;
                None
            }
        }
    }

    /// Lookup without touching recency or counters.
    pub fn peek(&self, node: NodeId) -> Option<&CacheEntry> {
        self.lru.peek(&node)
    }

    pub fn contains(&self, node: NodeId) -> bool {
        self.lru.contains(&node)
    }

    fn push(&mut self, node: NodeId, entry: CacheEntry) -> Option<Victim> {
        // `push` also returns the replaced value when `node` was present.
        let victim = match self.lru.push(node, entry) {
            Some((k, v)) if k != node => (k, v),
            _ => return None,
        };
        self.stats.evictions += 1;
        if victim.1.dirty {
            self.stats.dirty_evictions += 1;
            Some(victim)
        } else {
            None
        }
    }

    /// Caches a freshly authenticated clean node with hotness 0. A node that
    /// is already present only has its recency refreshed.
    pub fn insert_authenticated(&mut self, node: NodeId, digest: Digest, leaf: Option<LeafMeta>) -> Option<Victim> {
        if self.lru.contains(&node) {
            self.lru.promote(&node);
            return None;
        }
        self.push(node, CacheEntry { digest, hotness: 0, dirty: false, leaf })
    }

    /// Records a new trusted value for `node` and marks it dirty. Hotness is
    /// kept if the node was cached. `leaf = None` keeps any existing leaf payload.
    pub fn put_dirty(&mut self, node: NodeId, digest: Digest, leaf: Option<LeafMeta>) -> Option<Victim> {
        if let Some(e) = self.lru.get_mut(&node) {
            e.digest = digest;
            e.dirty = true;
            if leaf.is_some() {
                e.leaf = leaf;
            }
            return None;
        }
        self.push(node, CacheEntry { digest, hotness: 0, dirty: true, leaf })
    }

    /// `hotness := max(0, hotness + delta)` for a cached node; `None` on a miss.
    pub fn adjust_hotness(&mut self, node: NodeId, delta: i64) -> Option<i64> {
        let e = self.lru.peek_mut(&node)?;
        e.hotness = e.hotness.saturating_add(delta).max(0);
        Some(e.hotness)
    }

    pub fn hotness(&self, node: NodeId) -> Option<i64> {
        self.lru.peek(&node).map(|e| e.hotness)
    }

    /// Hands every dirty entry to `sink` in node-id order, then marks it clean.
    pub fn flush_dirty<F>(&mut self, mut sink: F) -> Result<usize>
    where
        F: FnMut(NodeId, &CacheEntry) -> Result<()>,
    {
        let mut dirty: Vec<NodeId> = self.lru.iter().filter(|(_, e)| e.dirty).map(|(k, _)| *k).collect();
        dirty.sort_unstable();
        for &node in &dirty {
            let e = self.lru.peek_mut(&node).expect("dirty entry present");
            sink(node, e)?;
            e.dirty = false;
        }
        Ok(dirty.len())
    }

    pub fn dirty_count(&self) -> usize {
        self.lru.iter().filter(|(_, e)| e.dirty).count()
    }

    /// Drops every entry. Callers flush first; dirty state is lost otherwise.
    pub fn clear(&mut self) {
        self.lru.clear();
    }

    pub fn reset_stats(&mut self) {
        self.stats = CacheStats::default();
    }

    /// Node ids from most to least recently used.
    pub fn recency_order(&self) -> Vec<NodeId> {
        self.lru.iter().map(|(k, _)| *k).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::VecDeque;

    fn d(b: u8) -> Digest {
        Digest([b; 32])
    }

    fn cache(cap: usize) -> SecureCache {
        SecureCache::new(CacheConfig { capacity_entries: cap })
    }

    #[test]
    fn insert_then_get_hits() {
        let mut c = cache(4);
        c.insert_authenticated(NodeId(1), d(1), None);
        assert_eq!(c.get(NodeId(1)).unwrap().digest, d(1));
        assert_eq!(c.stats().hits, 1);
    }

    #[test]
    fn lru_eviction() {
        let mut c = cache(2);
        for i in 0..3 {
            c.insert_authenticated(NodeId(i), d(i as u8), None);
        }
        assert!(c.get(NodeId(0)).is_none());
        assert!(c.get(NodeId(1)).is_some());
        assert!(c.get(NodeId(2)).is_some());
    }

    #[test]
    fn miss_rate_arithmetic() {
        let mut c = cache(2);
        c.insert_authenticated(NodeId(0), d(0), None);
        for _ in 0..99 {
            c.get(NodeId(0));
        }
        c.get(NodeId(5));
        assert!((c.stats().miss_rate() - 0.01).abs() < 1e-12);
    }

    #[test]
    fn fresh_insert_has_zero_hotness_and_reinsert_keeps_state() {
        let mut c = cache(3);
        c.insert_authenticated(NodeId(1), d(1), None);
        c.insert_authenticated(NodeId(2), d(2), None);
        assert_eq!(c.hotness(NodeId(1)), Some(0));
        c.adjust_hotness(NodeId(1), 4);
        c.put_dirty(NodeId(1), d(9), None);
        c.insert_authenticated(NodeId(1), d(7), None);
        let e = *c.peek(NodeId(1)).unwrap();
        assert_eq!((e.digest, e.hotness, e.dirty), (d(9), 4, true));
        assert_eq!(c.recency_order()[0], NodeId(1));
    }

    #[test]
    fn hotness_clamps_at_zero_and_ignores_misses() {
        let mut c = cache(2);
        c.insert_authenticated(NodeId(1), d(1), None);
        assert_eq!(c.adjust_hotness(NodeId(1), -1), Some(0));
        assert_eq!(c.adjust_hotness(NodeId(1), 3), Some(3));
        assert_eq!(c.adjust_hotness(NodeId(1), 2), Some(5));
        assert_eq!(c.adjust_hotness(NodeId(8), 2), None);
        assert!(!c.contains(NodeId(8)));
    }

    #[test]
    fn dirty_victim_is_returned() {
        let mut c = cache(1);
        assert!(c.put_dirty(NodeId(1), d(1), None).is_none());
        let (node, e) = c.insert_authenticated(NodeId(2), d(2), None).unwrap();
        assert_eq!(node, NodeId(1));
        assert!(e.dirty);
        assert!(c.insert_authenticated(NodeId(3), d(3), None).is_none());
        assert_eq!(c.stats().evictions, 2);
        assert_eq!(c.stats().dirty_evictions, 1);
    }

    #[test]
    fn flush_writes_each_dirty_entry_once() {
        let mut c = cache(8);
        c.insert_authenticated(NodeId(0), d(0), None);
        assert_eq!(c.flush_dirty(|_, _| Ok(())).unwrap(), 0);
        for i in [5, 2, 7] {
            c.put_dirty(NodeId(i), d(i as u8), None);
        }
        let mut seen = Vec::new();
        assert_eq!(
            c.flush_dirty(|n, _| {
                seen.push(n);
                Ok(())
            })
            .unwrap(),
            3
        );
        assert_eq!(seen, vec![NodeId(2), NodeId(5), NodeId(7)]);
        assert_eq!(c.flush_dirty(|_, _| Ok(())).unwrap(), 0);
    }

    #[test]
    fn ratio_sizing() {
        assert_eq!(CacheConfig::from_ratio(0.1, 131071).unwrap().capacity_entries, 13107);
        assert_eq!(CacheConfig::from_ratio(0.001, 10).unwrap().capacity_entries, 1);
        assert!(CacheConfig::from_ratio(0.0, 10).is_err());
        assert!(CacheConfig::from_ratio(1.5, 10).is_err());
    }

    #[derive(Clone, Debug)]
    enum Op {
        Get(u64),
        Insert(u64),
        Put(u64),
        Hot(u64, i64),
    }

    fn op() -> impl Strategy<Value = Op> {
        prop_oneof![
            (0..12u64).prop_map(Op::Get),
            (0..12u64).prop_map(Op::Insert),
            (0..12u64).prop_map(Op::Put),
            (0..12u64, -3..4i64).prop_map(|(n, h)| Op::Hot(n, h)),
        ]
    }

    proptest! {
        #[test]
        fn matches_reference_lru(cap in 1usize..6, ops in prop::collection::vec(op(), 0..200)) {
            let mut c = cache(cap);
            // Front = most recent.
            let mut model: VecDeque<u64> = VecDeque::new();
            let touch = |m: &mut VecDeque<u64>, n: u64| {
                if let Some(i) = m.iter().position(|&x| x == n) {
                    m.remove(i);
                }
                m.push_front(n);
                if m.len() > cap {
                    m.pop_back();
                }
            };
            for op in ops {
                match op {
                    Op::Get(n) => {
                        let hit = c.get(NodeId(n)).is_some();
                        prop_assert_eq!(hit, model.contains(&n));
                        if hit {
                            touch(&mut model, n);
                        }
                    }
                    Op::Insert(n) => {
                        c.insert_authenticated(NodeId(n), d(n as u8), None);
                        touch(&mut model, n);
                    }
                    Op::Put(n) => {
                        c.put_dirty(NodeId(n), d(n as u8), None);
                        touch(&mut model, n);
                    }
                    Op::Hot(n, h) => {
                        let r = c.adjust_hotness(NodeId(n), h);
                        prop_assert_eq!(r.is_some(), model.contains(&n));
                        if let Some(v) = r {
                            prop_assert!(v >= 0);
                        }
                    }
                }
                prop_assert!(c.len() <= cap);
                let order: Vec<u64> = c.recency_order().iter().map(|n| n.0).collect();
                prop_assert_eq!(order, model.iter().copied().collect::<Vec<_>>());
            }
        }
    }
}
