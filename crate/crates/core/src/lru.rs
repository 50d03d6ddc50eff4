//! Byte-budgeted LRU store used by both caches.
//!
//! Recency is a monotonic stamp per entry; a `BTreeMap` from stamp to key
//! gives the eviction order. Pinned entries and entries in the caller's
//! protected set are skipped during eviction. When the budget cannot be met
//! without touching those, the incoming entry is rejected rather than stored.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::hash::Hash;

#[derive(Debug)]
struct Slot<V> {
    value: V,
    bytes: u64,
    stamp: u64,
    pins: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InsertOutcome<K> {
    /// Stored; `evicted` lists victims in eviction order (least recent first).
    Stored { evicted: Vec<K> },
    /// Larger than the budget, or the budget is held by pinned entries.
    Rejected,
}

impl<K> InsertOutcome<K> {
    pub fn is_stored(&self) -> bool {
        matches!(self, InsertOutcome::Stored { .. })
    }
}

#[derive(Debug)]
pub struct ByteBudgetLru<K, V> {
    budget: u64,
    resident: u64,
    next_stamp: u64,
    entries: HashMap<K, Slot<V>>,
    order: BTreeMap<u64, K>,
}

impl<K: Eq + Hash + Clone, V> ByteBudgetLru<K, V> {
    pub fn new(budget: u64) -> Self {
        assert!(budget > 0, "byte budget must be positive");
        Self {
            budget,
            resident: 0,
            next_stamp: 0,
            entries: HashMap::new(),
            order: BTreeMap::new(),
        }
    }

    pub fn budget(&self) -> u64 {
        self.budget
    }

    pub fn resident_bytes(&self) -> u64 {
        self.resident
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, key: &K) -> bool {
        self.entries.contains_key(key)
    }

    fn bump(&mut self) -> u64 {
        let s = self.next_stamp;
        self.next_stamp += 1;
        s
    }

    /// Looks up `key` and marks it most recently used.
    pub fn get(&mut self, key: &K) -> Option<&V> {
        let stamp = self.bump();
        let slot = self.entries.get_mut(key)?;
        self.order.remove(&slot.stamp);
        slot.stamp = stamp;
        self.order.insert(stamp, key.clone());
        Some(&slot.value)
    }

    pub fn get_mut(&mut self, key: &K) -> Option<&mut V> {
        self.get(key)?;
        self.entries.get_mut(key).map(|s| &mut s.value)
    }

    /// Looks up `key` without touching recency.
    pub fn peek(&self, key: &K) -> Option<&V> {
        self.entries.get(key).map(|s| &s.value)
    }

    /// Keys from least to most recently used.
    pub fn keys_lru_order(&self) -> impl Iterator<Item = &K> {
        self.order.values()
    }

    pub fn insert(&mut self, key: K, value: V, bytes: u64) -> InsertOutcome<K> {
        self.insert_protected(key, value, bytes, &HashSet::new())
    }

    /// Inserts without evicting anything in `protected`.
    pub fn insert_protected(
        &mut self,
        key: K,
        value: V,
        bytes: u64,
        protected: &HashSet<K>,
    ) -> InsertOutcome<K> {
        if bytes > self.budget {
            return InsertOutcome::Rejected;
        }
        // A replaced entry's bytes are released up front, and it keeps its pins.
        let old_pins = self.entries.get(&key).map(|s| s.pins).unwrap_or(0);
        let old_bytes = self.entries.get(&key).map(|s| s.bytes).unwrap_or(0);

        let mut need = (self.resident - old_bytes + bytes).saturating_sub(self.budget);
        let mut victims = Vec::new();
        if need > 0 {
            for k in self.order.values() {
                if *k == key || protected.contains(k) {
                    continue;
                }
                let slot = &self.entries[k];
                if slot.pins > 0 {
                    continue;
                }
                victims.push(k.clone());
                need = need.saturating_sub(slot.bytes);
                if need == 0 {
                    break;
                }
            }
            if need > 0 {
                return InsertOutcome::Rejected;
            }
        }
        for k in &victims {
            self.remove(k);
        }
        self.remove(&key);
        let stamp = self.bump();
        self.order.insert(stamp, key.clone());
        self.entries.insert(
            key,
            Slot {
                value,
                bytes,
                stamp,
                pins: old_pins,
            },
        );
        self.resident += bytes;
        debug_assert!(self.resident <= self.budget);
        InsertOutcome::Stored { evicted: victims }
    }

    pub fn remove(&mut self, key: &K) -> Option<V> {
        let slot = self.entries.remove(key)?;
        self.order.remove(&slot.stamp);
        self.resident -= slot.bytes;
        Some(slot.value)
    }

    /// Pinned entries are never evicted. Returns false if `key` is absent.
    pub fn pin(&mut self, key: &K) -> bool {
        match self.entries.get_mut(key) {
            Some(slot) => {
                slot.pins += 1;
                true
            }
            None => false,
        }
    }

    pub fn unpin(&mut self, key: &K) {
        if let Some(slot) = self.entries.get_mut(key) {
            slot.pins = slot.pins.saturating_sub(1);
        }
    }

    pub fn is_pinned(&self, key: &K) -> bool {
        self.entries.get(key).is_some_and(|s| s.pins > 0)
    }

    pub fn clear(&mut self) {
        self.entries.clear();
        self.order.clear();
        self.resident = 0;
    }
}
