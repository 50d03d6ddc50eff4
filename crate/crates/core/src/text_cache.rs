//! Digest-keyed store of KV snapshots for shared prompt prefixes.
//!
//! Snapshots live at multiples of `block_granularity` plus the full prompt
//! length. A lookup hashes the query once, incrementally, cloning the running
//! hasher at every length for which some entry exists, and then tries those
//! lengths longest first.

use std::collections::{BTreeMap, HashSet};

use serde::Serialize;

use crate::domain::{ContentDigest, KVState, TokenId, TokenPrefixHasher};
use crate::lru::{ByteBudgetLru, InsertOutcome};

pub const DEFAULT_BYTE_BUDGET: u64 = 512 * 1024 * 1024;
pub const DEFAULT_BLOCK_GRANULARITY: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TextCacheConfig {
    pub byte_budget: u64,
    /// Tokens between stored snapshot boundaries; 1 stores every prefix.
    pub block_granularity: usize,
}

impl Default for TextCacheConfig {
    fn default() -> Self {
        Self {
            byte_budget: DEFAULT_BYTE_BUDGET,
            block_granularity: DEFAULT_BLOCK_GRANULARITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrefixCacheEntry {
    pub digest: ContentDigest,
    pub kv: KVState,
    pub prefix_len: usize,
    pub byte_size: u64,
    pub last_used: u64,
}

/// Result of a prefix lookup. `start` is where prefill has to resume.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrefixMatch {
    pub kv: Option<KVState>,
    pub start: usize,
}

impl PrefixMatch {
    pub const MISS: PrefixMatch = PrefixMatch { kv: None, start: 0 };
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct TextCacheStats {
    pub full_hits: u64,
    pub partial_hits: u64,
    pub misses: u64,
    pub inserted: u64,
    pub evictions: u64,
    pub rejected: u64,
    pub entries: u64,
    pub bytes_resident: u64,
    pub byte_budget: u64,
}

/// The prefix length is part of the key so evictions can keep the
/// per-length index in sync without looking at the evicted value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct Key {
    len: usize,
    digest: ContentDigest,
}

#[derive(Debug)]
pub struct TextPrefixCache {
    config: TextCacheConfig,
    store: ByteBudgetLru<Key, PrefixCacheEntry>,
    /// Stored prefix length -> number of entries with that length.
    lengths: BTreeMap<usize, usize>,
    clock: u64,
    stats: TextCacheStats,
}

impl TextPrefixCache {
    pub fn new(config: TextCacheConfig) -> Self {
        assert!(config.byte_budget > 0, "byte_budget must be positive");
        assert!(config.block_granularity >= 1, "block_granularity must be >= 1");
        Self {
            config,
            store: ByteBudgetLru::new(config.byte_budget),
            lengths: BTreeMap::new(),
            clock: 0,
            stats: TextCacheStats {
                byte_budget: config.byte_budget,
                ..TextCacheStats::default()
            },
        }
    }

    pub fn config(&self) -> &TextCacheConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.store.len()
    }

    pub fn is_empty(&self) -> bool {
        self.store.is_empty()
    }

    pub fn stats(&self) -> TextCacheStats {
        TextCacheStats {
            entries: self.store.len() as u64,
            bytes_resident: self.store.resident_bytes(),
            ..self.stats
        }
    }

    /// Entries from least to most recently used.
    pub fn entries(&self) -> impl Iterator<Item = &PrefixCacheEntry> {
        self.store
            .keys_lru_order()
            .filter_map(|k| self.store.peek(k))
    }

    pub fn contains(&self, prefix: &[TokenId]) -> bool {
        if prefix.is_empty() {
            return false;
        }
        let mut h = TokenPrefixHasher::new();
        h.extend(prefix);
        self.store.contains(&Key {
            len: prefix.len(),
            digest: h.digest(),
        })
    }

    /// Longest cached prefix of `prompt`, refreshing its recency on a hit.
    pub fn lookup_prefix(&mut self, prompt: &[TokenId]) -> PrefixMatch {
        if prompt.is_empty() {
            self.stats.misses += 1;
            return PrefixMatch::MISS;
        }
        let candidates: Vec<usize> = self
            .lengths
            .range(1..=prompt.len())
            .map(|(&len, _)| len)
            .collect();
        if candidates.is_empty() {
            self.stats.misses += 1;
            return PrefixMatch::MISS;
        }

        let mut digests = Vec::with_capacity(candidates.len());
        let mut h = TokenPrefixHasher::new();
        let mut next = candidates.iter().peekable();
        for (i, &t) in prompt.iter().enumerate() {
            h.push(t);
            if next.peek() == Some(&&(i + 1)) {
                next.next();
                digests.push(h.digest());
            }
            if next.peek().is_none() {
                break;
            }
        }

        for (&len, digest) in candidates.iter().zip(&digests).rev() {
            let key = Key {
                len,
                digest: *digest,
            };
            self.clock += 1;
            let stamp = self.clock;
            if let Some(entry) = self.store.get_mut(&key) {
                entry.last_used = stamp;
                let kv = entry.kv;
                if len == prompt.len() {
                    self.stats.full_hits += 1;
                } else {
                    self.stats.partial_hits += 1;
                }
                return PrefixMatch {
                    kv: Some(kv),
                    start: len,
                };
            }
        }
        self.stats.misses += 1;
        PrefixMatch::MISS
    }

    /// Prefix lengths in `(start, prompt_len]` that get a snapshot: every
    /// multiple of the granularity, plus the full length.
    pub fn boundaries(&self, prompt_len: usize, start: usize) -> Vec<usize> {
        let g = self.config.block_granularity;
        let mut out: Vec<usize> = ((start / g + 1) * g..=prompt_len).step_by(g).collect();
        if prompt_len > start && out.last() != Some(&prompt_len) {
            out.push(prompt_len);
        }
        out
    }

    /// Stores `snapshots`, each a `(prefix_len, kv)` pair for a prefix of
    /// `prompt`. Entries are inserted longest first; an entry that would
    /// only fit by evicting one stored earlier in the same call is skipped.
    pub fn insert(&mut self, prompt: &[TokenId], snapshots: &[(usize, KVState)]) -> InsertReport {
        let mut report = InsertReport::default();
        let mut by_len: Vec<(usize, KVState)> = snapshots
            .iter()
            .copied()
            .filter(|&(len, _)| len >= 1 && len <= prompt.len())
            .collect();
        by_len.sort_by_key(|e| std::cmp::Reverse(e.0));
        by_len.dedup_by_key(|s| s.0);

        // One pass over the prompt yields every needed digest.
        let mut digests = BTreeMap::new();
        let mut h = TokenPrefixHasher::new();
        let wanted: HashSet<usize> = by_len.iter().map(|s| s.0).collect();
        let longest = by_len.first().map_or(0, |s| s.0);
        for (i, &t) in prompt[..longest].iter().enumerate() {
            h.push(t);
            if wanted.contains(&(i + 1)) {
                digests.insert(i + 1, h.digest());
            }
        }

        let mut protected = HashSet::new();
        for (len, kv) in by_len {
            debug_assert_eq!(kv.token_count(), len as u64, "snapshot length mismatch");
            let key = Key {
                len,
                digest: digests[&len],
            };
            let byte_size = kv.byte_size().max(1);
            self.clock += 1;
            let entry = PrefixCacheEntry {
                digest: key.digest,
                kv,
                prefix_len: len,
                byte_size,
                last_used: self.clock,
            };
            let existed = self.store.contains(&key);
            match self.store.insert_protected(key, entry, byte_size, &protected) {
                InsertOutcome::Stored { evicted } => {
                    for k in &evicted {
                        self.forget_length(k.len);
                    }
                    self.stats.evictions += evicted.len() as u64;
                    report.evicted += evicted.len();
                    if !existed {
                        *self.lengths.entry(len).or_default() += 1;
                    }
                    self.stats.inserted += 1;
                    report.stored.push(len);
                    protected.insert(key);
                }
                InsertOutcome::Rejected => {
                    self.stats.rejected += 1;
                    report.rejected.push(len);
                }
            }
        }
        report
    }

    fn forget_length(&mut self, len: usize) {
        if let Some(n) = self.lengths.get_mut(&len) {
            *n -= 1;
            if *n == 0 {
                self.lengths.remove(&len);
            }
        }
    }

    pub fn clear(&mut self) {
        self.store.clear();
        self.lengths.clear();
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InsertReport {
    /// Prefix lengths stored, longest first.
    pub stored: Vec<usize>,
    pub rejected: Vec<usize>,
    pub evicted: usize,
}
