use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use sha2::{Digest, Sha256};

use super::{Backend, BackendError, Clock, CostModel, ModelProfile, PrefillItem, ToyTokenizer};
use crate::backend::tokenizer::EOS;
use crate::domain::{content_hash, CanonicalImage, ContentDigest, KVState, TokenId, VisionEmbedding};

pub fn fnv1a_64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Deterministic causal toy model.
///
/// The next token is FNV-1a of the KV state digest reduced modulo the
/// vocabulary, with end-of-sequence whenever the hash is divisible by the
/// profile's `eos_period`. Outputs therefore depend on the absorbed prefix
/// and nothing else.
#[derive(Debug)]
pub struct SimBackend {
    profile: ModelProfile,
    tokenizer: ToyTokenizer,
    clock: Arc<Clock>,
    encoder_calls: AtomicU64,
}

impl SimBackend {
    /// Uses the profile's own time mode with an unscaled wall clock.
    pub fn new(profile: ModelProfile) -> Self {
        let clock = Arc::new(Clock::for_mode(profile.cost.time_mode, 1.0));
        Self::with_clock(profile, clock)
    }

    pub fn with_clock(profile: ModelProfile, clock: Arc<Clock>) -> Self {
        Self {
            tokenizer: ToyTokenizer::new(profile.vocab_size),
            profile,
            clock,
            encoder_calls: AtomicU64::new(0),
        }
    }

    pub fn profile(&self) -> &ModelProfile {
        &self.profile
    }

    /// Number of times the vision encoder actually ran.
    pub fn encoder_calls(&self) -> u64 {
        self.encoder_calls.load(Ordering::Relaxed)
    }

    fn next_token(&self, kv: &KVState) -> Result<(TokenId, KVState), BackendError> {
        if kv.token_count() == 0 {
            return Err(BackendError::EmptyState);
        }
        let needed = kv.token_count() + 1;
        if needed > self.profile.max_context {
            return Err(BackendError::ContextOverflow {
                needed,
                max: self.profile.max_context,
            });
        }
        let h = fnv1a_64(kv.state_digest().as_bytes());
        let period = self.profile.eos_period;
        let token = if period > 0 && h.is_multiple_of(period) {
            EOS
        } else {
            TokenId((h % u64::from(self.profile.vocab_size)) as u32)
        };
        let mut next = *kv;
        next.absorb_token(token);
        Ok((token, next))
    }
}

impl Backend for SimBackend {
    type Tok = ToyTokenizer;

    fn tokenizer(&self) -> &ToyTokenizer {
        &self.tokenizer
    }

    fn cost_model(&self) -> &CostModel {
        &self.profile.cost
    }

    fn clock(&self) -> &Arc<Clock> {
        &self.clock
    }

    fn max_context(&self) -> u64 {
        self.profile.max_context
    }

    fn kv_bytes_per_token(&self) -> u64 {
        self.profile.kv_bytes_per_token
    }

    fn prefill_with_snapshots(
        &self,
        start: Option<&KVState>,
        items: &[PrefillItem],
        snapshot_at: &[usize],
    ) -> Result<(KVState, Vec<KVState>), BackendError> {
        let mut kv = start.copied().unwrap_or_else(|| self.empty_state());
        let new_positions: u64 = items.iter().map(PrefillItem::positions).sum();
        let needed = kv.token_count() + new_positions;
        if needed > self.profile.max_context {
            return Err(BackendError::ContextOverflow {
                needed,
                max: self.profile.max_context,
            });
        }
        debug_assert!(snapshot_at.windows(2).all(|w| w[0] < w[1]));

        let mut snapshots = Vec::with_capacity(snapshot_at.len());
        let mut pending = snapshot_at.iter().peekable();
        for (i, item) in items.iter().enumerate() {
            match item {
                PrefillItem::Token(t) => kv.absorb_token(*t),
                PrefillItem::Image(e) => kv.absorb_embedding(e),
            }
            if pending.peek() == Some(&&(i + 1)) {
                pending.next();
                snapshots.push(kv);
            }
        }
        if pending.next().is_some() {
            return Err(BackendError::Failed(
                "snapshot position outside prefill range".into(),
            ));
        }
        self.clock.charge_millis(self.profile.cost.prefill_cost(new_positions));
        Ok((kv, snapshots))
    }

    fn generate_token(&self, kv: &KVState) -> Result<(TokenId, KVState), BackendError> {
        let out = self.next_token(kv);
        self.clock.charge_millis(self.profile.cost.step_cost(1));
        out
    }

    fn batched_step(&self, kvs: &[&KVState]) -> Vec<Result<(TokenId, KVState), BackendError>> {
        if kvs.is_empty() {
            return Vec::new();
        }
        let out = kvs.iter().map(|kv| self.next_token(kv)).collect();
        self.clock.charge_millis(self.profile.cost.step_cost(kvs.len()));
        out
    }

    fn encode_image(&self, img: &CanonicalImage) -> Result<VisionEmbedding, BackendError> {
        let patches = self.profile.patches_for(img.width(), img.height());
        let mut h = Sha256::new();
        h.update(b"vision-embedding");
        h.update(content_hash(img).as_bytes());
        let values_digest = ContentDigest(h.finalize().into());
        self.encoder_calls.fetch_add(1, Ordering::Relaxed);
        self.clock
            .charge_millis(self.profile.cost.encode_cost(u64::from(patches)));
        Ok(VisionEmbedding::new(
            patches,
            values_digest,
            u64::from(patches) * self.profile.embed_bytes_per_patch,
        ))
    }
}
