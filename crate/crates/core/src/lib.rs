//! Serving engine for token-generating models.
//!
//! The crate is organised around a single-threaded continuous-batching
//! [`scheduler::Engine`] that drives a pluggable [`backend::Backend`]. Two
//! caches sit in front of prefill:
//!
//! * [`text_cache::TextPrefixCache`] maps SHA-256 digests of token prefixes to
//!   KV snapshots and answers longest-prefix queries.
//! * [`media_cache::MediaCache`] maps digests of decoded pixels to vision
//!   embeddings, plus KV state keyed by the full multimodal prefix.
//!
//! Both caches are byte-budgeted LRU stores ([`lru::ByteBudgetLru`]).
//!
//! The bundled [`backend::SimBackend`] is a deterministic causal toy model
//! whose timing comes from a [`backend::CostModel`], charged either to a
//! virtual clock or as real sleeps.

pub mod backend;
pub mod domain;
pub mod lru;
pub mod media_cache;
pub mod scheduler;
pub mod streaming;
pub mod text_cache;

pub use backend::{Backend, BackendError, Clock, CostModel, SimBackend, TimeMode, ToyTokenizer};
pub use domain::{
    content_hash, token_prefix_hash, CanonicalImage, ContentDigest, GenerationRequest, KVState,
    MediaItem, MediaSource, RequestId, Timestamp, TokenId, VisionEmbedding,
};
pub use scheduler::{Engine, EngineConfig, EngineEvent};
