//! Core value types shared by every other module.
//!
//! Everything here is immutable once constructed and safe to share across
//! threads.

mod digest;
mod image;
mod kv;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use self::digest::{
    content_hash, token_prefix_hash, ContentDigest, EmptySequence, TokenPrefixHasher,
};
pub use self::image::{canonical_decode, CanonicalImage, DecodeOptions, MediaError, MediaSource};
pub use self::kv::{KVState, VisionEmbedding};

/// A token id in `[0, vocab_size)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct TokenId(pub u32);

impl TokenId {
    /// Returns `None` when `value` is outside the vocabulary.
    pub fn checked(value: u32, vocab_size: u32) -> Option<Self> {
        (vocab_size >= 2 && value < vocab_size).then_some(Self(value))
    }

    pub fn value(self) -> u32 {
        self.0
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct RequestId(pub u64);

impl fmt::Display for RequestId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "req-{}", self.0)
    }
}

/// Monotonic engine time in nanoseconds.
///
/// Integer nanoseconds keep simulated-clock accounting exact: a sum of charges
/// equals its closed form with no floating-point drift.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Timestamp(pub u64);

impl Timestamp {
    pub const ZERO: Timestamp = Timestamp(0);

    pub fn from_millis(ms: u64) -> Self {
        Self(ms * 1_000_000)
    }

    /// Rounds to the nearest nanosecond; negative input clamps to zero.
    pub fn from_millis_f64(ms: f64) -> Self {
        Self(millis_to_nanos(ms))
    }

    pub fn as_millis_f64(self) -> f64 {
        self.0 as f64 / 1e6
    }

    pub fn saturating_sub(self, other: Timestamp) -> Timestamp {
        Timestamp(self.0.saturating_sub(other.0))
    }

    pub fn plus_millis(self, ms: f64) -> Timestamp {
        Timestamp(self.0 + millis_to_nanos(ms))
    }
}

pub(crate) fn millis_to_nanos(ms: f64) -> u64 {
    if ms.is_finite() && ms > 0.0 {
        (ms * 1e6).round() as u64
    } else {
        0
    }
}

/// One image (or video frame) attached to a request, already decoded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MediaItem {
    pub source: MediaSource,
    pub decoded: Arc<CanonicalImage>,
    digest: ContentDigest,
}

impl MediaItem {
    pub fn decode(source: MediaSource, options: &DecodeOptions) -> Result<Self, MediaError> {
        let decoded = canonical_decode(&source, options)?;
        Ok(Self::from_parts(source, decoded))
    }

    /// Wraps a raster that never went through a container format.
    pub fn inline(image: CanonicalImage) -> Self {
        Self::from_parts(MediaSource::Inline, image)
    }

    pub fn from_parts(source: MediaSource, image: CanonicalImage) -> Self {
        Self {
            source,
            digest: content_hash(&image),
            decoded: Arc::new(image),
        }
    }

    /// Digest of the decoded pixels, computed once at construction.
    pub fn digest(&self) -> ContentDigest {
        self.digest
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum InvalidRequest {
    #[error("request has neither prompt tokens nor media")]
    Empty,
    #[error("max_new_tokens must be at least 1")]
    ZeroMaxTokens,
    #[error("prompt has {placeholders} image placeholders but {media} media items")]
    PlaceholderMismatch { placeholders: usize, media: usize },
}

/// One client request.
///
/// Media items are spliced into the prompt at placeholder tokens: the i-th
/// occurrence of the placeholder id stands for `media[i]`.
#[derive(Debug, Clone)]
pub struct GenerationRequest {
    pub id: RequestId,
    pub prompt_tokens: Vec<TokenId>,
    pub media: Vec<MediaItem>,
    pub max_new_tokens: u32,
    pub eos_token: TokenId,
    /// Stop only on `max_new_tokens` (benchmark runs need fixed lengths).
    pub ignore_eos: bool,
    pub arrival_time: Timestamp,
    pub stream: bool,
}

impl GenerationRequest {
    /// A text-only request arriving at time zero.
    pub fn text(id: u64, prompt: Vec<TokenId>, max_new_tokens: u32, eos_token: TokenId) -> Self {
        Self {
            id: RequestId(id),
            prompt_tokens: prompt,
            media: Vec::new(),
            max_new_tokens,
            eos_token,
            ignore_eos: false,
            arrival_time: Timestamp::ZERO,
            stream: false,
        }
    }

    pub fn with_media(mut self, media: Vec<MediaItem>) -> Self {
        self.media = media;
        self
    }

    pub fn arriving_at(mut self, at: Timestamp) -> Self {
        self.arrival_time = at;
        self
    }

    pub fn ignoring_eos(mut self) -> Self {
        self.ignore_eos = true;
        self
    }

    pub fn validate(&self, placeholder: TokenId) -> Result<(), InvalidRequest> {
        if self.prompt_tokens.is_empty() && self.media.is_empty() {
            return Err(InvalidRequest::Empty);
        }
        if self.max_new_tokens == 0 {
            return Err(InvalidRequest::ZeroMaxTokens);
        }
        let placeholders = self
            .prompt_tokens
            .iter()
            .filter(|&&t| t == placeholder)
            .count();
        if placeholders != self.media.len() {
            return Err(InvalidRequest::PlaceholderMismatch {
                placeholders,
                media: self.media.len(),
            });
        }
        Ok(())
    }

    /// Index of the last placeholder in the prompt, if any.
    pub fn last_placeholder(&self, placeholder: TokenId) -> Option<usize> {
        self.prompt_tokens.iter().rposition(|&t| t == placeholder)
    }
}
