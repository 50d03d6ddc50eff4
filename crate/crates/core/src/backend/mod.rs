//! Model backend abstraction and the deterministic simulated backend.

mod clock;
mod cost;
mod sim;
pub mod tokenizer;

use std::sync::Arc;

use thiserror::Error;

use crate::domain::{CanonicalImage, KVState, TokenId, VisionEmbedding};

pub use self::clock::{Clock, TimeMode};
pub use self::cost::{
    CacheReuse, CostModel, ModelProfile, MultimodalWorkload, ProfileError, DEFAULT_PROFILE,
};
pub use self::sim::{fnv1a_64, SimBackend};
pub use self::tokenizer::{Tokenizer, ToyTokenizer};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BackendError {
    #[error("context overflow: {needed} positions exceed the {max}-position window")]
    ContextOverflow { needed: u64, max: u64 },
    #[error("cannot generate from an empty KV state")]
    EmptyState,
    #[error("backend failure: {0}")]
    Failed(String),
}

/// One unit of prefill content.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrefillItem {
    Token(TokenId),
    Image(VisionEmbedding),
}

impl PrefillItem {
    /// Context positions this item occupies.
    pub fn positions(&self) -> u64 {
        match self {
            PrefillItem::Token(_) => 1,
            PrefillItem::Image(e) => u64::from(e.patch_count),
        }
    }
}

/// A token-generating model as seen by the scheduler.
///
/// Implementations must be causal and deterministic: `generate_token` is a
/// pure function of the absorbed prefix. Every method that models work charges
/// its cost to [`Backend::clock`].
pub trait Backend: Send {
    type Tok: Tokenizer + Clone + 'static;

    fn tokenizer(&self) -> &Self::Tok;
    fn cost_model(&self) -> &CostModel;
    fn clock(&self) -> &Arc<Clock>;
    fn max_context(&self) -> u64;
    fn kv_bytes_per_token(&self) -> u64;

    fn empty_state(&self) -> KVState {
        KVState::empty(self.kv_bytes_per_token())
    }

    /// Absorbs `items` on top of `start` (or an empty state), returning the
    /// final state plus snapshots taken after `snapshot_at[i]` items.
    /// `snapshot_at` must be ascending and within `1..=items.len()`.
    fn prefill_with_snapshots(
        &self,
        start: Option<&KVState>,
        items: &[PrefillItem],
        snapshot_at: &[usize],
    ) -> Result<(KVState, Vec<KVState>), BackendError>;

    fn prefill(
        &self,
        start: Option<&KVState>,
        items: &[PrefillItem],
    ) -> Result<KVState, BackendError> {
        self.prefill_with_snapshots(start, items, &[]).map(|(kv, _)| kv)
    }

    /// Greedy next token for a single sequence, charged as a batch of one.
    fn generate_token(&self, kv: &KVState) -> Result<(TokenId, KVState), BackendError>;

    /// One decode step over the whole batch, charged once for the batch.
    fn batched_step(&self, kvs: &[&KVState]) -> Vec<Result<(TokenId, KVState), BackendError>>;

    fn encode_image(&self, img: &CanonicalImage) -> Result<VisionEmbedding, BackendError>;
}
