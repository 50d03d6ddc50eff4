//! Content-addressed cache for vision embeddings and multimodal KV state.
//!
//! Embeddings are keyed by the digest of an image's decoded pixels, so the
//! same picture hits no matter how it was delivered. KV state is keyed by a
//! composite digest over every image digest in the request plus the prompt
//! tokens up to and including the last image placeholder: it is only reused
//! when the entire multimodal prefix matches. Both kinds of entry share one
//! byte budget and one LRU order.

use std::collections::HashSet;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::domain::{CanonicalImage, ContentDigest, KVState, MediaItem, TokenId, VisionEmbedding};
use crate::lru::{ByteBudgetLru, InsertOutcome};

pub const DEFAULT_BYTE_BUDGET: u64 = 512 * 1024 * 1024;

const KV_KEY_TAG: &[u8] = b"kvserve/multimodal-kv/v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MediaCacheConfig {
    pub byte_budget: u64,
    /// Reuse per-image vision embeddings.
    pub embed_reuse: bool,
    /// Reuse KV state of a whole multimodal prefix.
    pub kv_reuse: bool,
}

impl Default for MediaCacheConfig {
    fn default() -> Self {
        Self {
            byte_budget: DEFAULT_BYTE_BUDGET,
            embed_reuse: true,
            kv_reuse: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MediaCacheEntry {
    pub digest: ContentDigest,
    pub embeddings: Option<VisionEmbedding>,
    pub kv: Option<KVState>,
    pub byte_size: u64,
    pub last_used: u64,
    /// Lookups that found this entry.
    pub reuse_count: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct MediaCacheStats {
    /// Embedding lookups answered from the cache.
    pub hits: u64,
    /// Embedding lookups that had to run the encoder.
    pub misses: u64,
    pub kv_hits: u64,
    pub kv_misses: u64,
    pub evictions: u64,
    /// Entries refused because they could not fit.
    pub rejected: u64,
    pub entries: u64,
    pub bytes_resident: u64,
    pub byte_budget: u64,
}

/// Embedding for one media item as seen by the caller.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MediaLookup {
    pub digest: ContentDigest,
    pub embedding: VisionEmbedding,
    pub hit: bool,
    /// The hit was the first reuse of a stored entry.
    pub first_reuse: bool,
}

/// Embeddings for a request's media, in order. Entries listed in `pinned`
/// stay resident until handed back to [`MediaCache::release`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MediaResolution {
    pub items: Vec<MediaLookup>,
    pub pinned: Vec<ContentDigest>,
}

impl MediaResolution {
    pub fn hits(&self) -> usize {
        self.items.iter().filter(|l| l.hit).count()
    }

    pub fn any_first_reuse(&self) -> bool {
        self.items.iter().any(|l| l.first_reuse)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KvHit {
    pub kv: KVState,
    pub first_reuse: bool,
}

/// Encoder failure for the item at `index`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodeFailure<E> {
    pub index: usize,
    pub error: E,
}

/// Key for KV state over a multimodal prefix.
pub fn composite_digest(image_digests: &[ContentDigest], prefix_tokens: &[TokenId]) -> ContentDigest {
    let mut h = Sha256::new();
    h.update(KV_KEY_TAG);
    h.update((image_digests.len() as u64).to_be_bytes());
    for d in image_digests {
        h.update(d.as_bytes());
    }
    for t in prefix_tokens {
        h.update(t.0.to_be_bytes());
    }
    ContentDigest::from_hasher(h)
}

#[derive(Debug)]
pub struct MediaCache {
    config: MediaCacheConfig,
    store: ByteBudgetLru<ContentDigest, MediaCacheEntry>,
    clock: u64,
    stats: MediaCacheStats,
}

impl MediaCache {
    pub fn new(config: MediaCacheConfig) -> Self {
        assert!(config.byte_budget > 0, "byte_budget must be positive");
        Self {
            config,
            store: ByteBudgetLru::new(config.byte_budget),
            clock: 0,
            stats: MediaCacheStats {
                byte_budget: config.byte_budget,
                ..MediaCacheStats::default()
            },
        }
    }

    pub fn config(&self) -> &MediaCacheConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.store.len()
    }

    pub fn is_empty(&self) -> bool {
        self.store.is_empty()
    }

    pub fn stats(&self) -> MediaCacheStats {
        MediaCacheStats {
            entries: self.store.len() as u64,
            bytes_resident: self.store.resident_bytes(),
            ..self.stats
        }
    }

    /// Entries from least to most recently used.
    pub fn entries(&self) -> impl Iterator<Item = &MediaCacheEntry> {
        self.store
            .keys_lru_order()
            .filter_map(|k| self.store.peek(k))
    }

    pub fn embedding_entries(&self) -> usize {
        self.entries().filter(|e| e.embeddings.is_some()).count()
    }

    pub fn contains(&self, digest: &ContentDigest) -> bool {
        self.store.contains(digest)
    }

    pub fn is_pinned(&self, digest: &ContentDigest) -> bool {
        self.store.is_pinned(digest)
    }

    fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    /// Looks up `digest`, refreshing recency and counting the reuse.
    fn touch(&mut self, digest: &ContentDigest) -> Option<(MediaCacheEntry, bool)> {
        let stamp = self.tick();
        let entry = self.store.get_mut(digest)?;
        entry.last_used = stamp;
        let first = entry.reuse_count == 0;
        entry.reuse_count += 1;
        Some((entry.clone(), first))
    }

    /// Resolves an embedding for every item, running `encode` only for
    /// content that is not cached. Fresh embeddings are stored straight
    /// away, so a picture repeated within one request is encoded once.
    /// Every resolved entry is pinned.
    pub fn get_or_encode<E>(
        &mut self,
        items: &[MediaItem],
        mut encode: impl FnMut(&CanonicalImage) -> Result<VisionEmbedding, E>,
    ) -> Result<MediaResolution, EncodeFailure<E>> {
        let mut out = MediaResolution::default();
        for (index, item) in items.iter().enumerate() {
            let digest = item.digest();
            if self.config.embed_reuse {
                if let Some((entry, first)) = self.touch(&digest) {
                    if let Some(embedding) = entry.embeddings {
                        self.stats.hits += 1;
                        self.store.pin(&digest);
                        out.pinned.push(digest);
                        out.items.push(MediaLookup {
                            digest,
                            embedding,
                            hit: true,
                            first_reuse: first,
                        });
                        continue;
                    }
                }
            }
            self.stats.misses += 1;
            let embedding = match encode(&item.decoded) {
                Ok(e) => e,
                Err(error) => {
                    self.release(&out.pinned);
                    return Err(EncodeFailure { index, error });
                }
            };
            if self.config.embed_reuse && self.store_entry(digest, Some(embedding), None) {
                self.store.pin(&digest);
                out.pinned.push(digest);
            }
            out.items.push(MediaLookup {
                digest,
                embedding,
                hit: false,
                first_reuse: false,
            });
        }
        Ok(out)
    }

    /// Unpins entries returned by [`MediaCache::get_or_encode`] or
    /// [`MediaCache::pin`].
    pub fn release(&mut self, digests: &[ContentDigest]) {
        for d in digests {
            self.store.unpin(d);
        }
    }

    pub fn pin(&mut self, digest: &ContentDigest) -> bool {
        self.store.pin(digest)
    }

    pub fn lookup_kv(&mut self, key: &ContentDigest) -> Option<KvHit> {
        if !self.config.kv_reuse {
            return None;
        }
        match self.touch(key) {
            Some((MediaCacheEntry { kv: Some(kv), .. }, first)) => {
                self.stats.kv_hits += 1;
                Some(KvHit {
                    kv,
                    first_reuse: first,
                })
            }
            _ => {
                self.stats.kv_misses += 1;
                None
            }
        }
    }

    /// Stores KV state for a multimodal prefix. No-op when KV reuse is off.
    pub fn store_kv(&mut self, key: ContentDigest, kv: KVState) -> bool {
        self.config.kv_reuse && self.store_entry(key, None, Some(kv))
    }

    /// Inserts an entry, evicting least recently used unpinned entries until
    /// it fits. Returns false if it cannot fit at all.
    pub fn store(
        &mut self,
        digest: ContentDigest,
        embeddings: Option<VisionEmbedding>,
        kv: Option<KVState>,
    ) -> bool {
        self.store_entry(digest, embeddings, kv)
    }

    fn store_entry(
        &mut self,
        digest: ContentDigest,
        embeddings: Option<VisionEmbedding>,
        kv: Option<KVState>,
    ) -> bool {
        let byte_size = (embeddings.map_or(0, |e| e.byte_size) + kv.map_or(0, |k| k.byte_size())).max(1);
        let last_used = self.tick();
        let entry = MediaCacheEntry {
            digest,
            embeddings,
            kv,
            byte_size,
            last_used,
            reuse_count: 0,
        };
        match self.store.insert_protected(digest, entry, byte_size, &HashSet::new()) {
            InsertOutcome::Stored { evicted } => {
                self.stats.evictions += evicted.len() as u64;
                true
            }
            InsertOutcome::Rejected => {
                self.stats.rejected += 1;
                false
            }
        }
    }

    pub fn clear(&mut self) {
        self.store.clear();
    }
}
