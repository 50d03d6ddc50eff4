use sha2::{Digest, Sha256};

use super::{ContentDigest, TokenId};

const TAG_TOKEN: u8 = 0x00;
const TAG_EMBEDDING: u8 = 0x01;

/// Abstract, replayable attention state.
///
/// Each absorbed item folds into a SHA-256 chain, so absorbing `a` then `b`
/// yields exactly the state of absorbing `a ‖ b`. Two states compare equal iff
/// they absorbed the same content in the same order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct KVState {
    token_count: u64,
    state_digest: ContentDigest,
    bytes_per_token: u64,
}

impl KVState {
    pub fn empty(bytes_per_token: u64) -> Self {
        Self {
            token_count: 0,
            state_digest: ContentDigest([0; 32]),
            bytes_per_token,
        }
    }

    pub fn token_count(&self) -> u64 {
        self.token_count
    }

    pub fn state_digest(&self) -> &ContentDigest {
        &self.state_digest
    }

    pub fn bytes_per_token(&self) -> u64 {
        self.bytes_per_token
    }

    /// Accounted memory footprint.
    pub fn byte_size(&self) -> u64 {
        self.token_count * self.bytes_per_token
    }

    pub fn absorb_token(&mut self, token: TokenId) {
        let mut h = Sha256::new();
        h.update(self.state_digest.0);
        h.update([TAG_TOKEN]);
        h.update(token.0.to_be_bytes());
        self.state_digest = ContentDigest::from_hasher(h);
        self.token_count += 1;
    }

    pub fn absorb_tokens(&mut self, tokens: &[TokenId]) {
        for &t in tokens {
            self.absorb_token(t);
        }
    }

    /// An embedding occupies `patch_count` context positions.
    pub fn absorb_embedding(&mut self, emb: &VisionEmbedding) {
        let mut h = Sha256::new();
        h.update(self.state_digest.0);
        h.update([TAG_EMBEDDING]);
        h.update(emb.values_digest.0);
        h.update(emb.patch_count.to_be_bytes());
        self.state_digest = ContentDigest::from_hasher(h);
        self.token_count += u64::from(emb.patch_count);
    }
}

/// Output of the vision encoder for one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VisionEmbedding {
    pub patch_count: u32,
    pub values_digest: ContentDigest,
    pub byte_size: u64,
}

impl VisionEmbedding {
    pub fn new(patch_count: u32, values_digest: ContentDigest, byte_size: u64) -> Self {
        Self {
            patch_count,
            values_digest,
            byte_size,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(v: &[u32]) -> Vec<TokenId> {
        v.iter().copied().map(TokenId).collect()
    }

    #[test]
    fn byte_size_tracks_positions() {
        let mut kv = KVState::empty(100);
        kv.absorb_tokens(&toks(&[1, 2, 3]));
        assert_eq!(kv.byte_size(), 300);
        let emb = VisionEmbedding::new(4, ContentDigest([9; 32]), 1);
        kv.absorb_embedding(&emb);
        assert_eq!(kv.token_count(), 7);
        assert_eq!(kv.byte_size(), 700);
    }

    #[test]
    fn order_matters() {
        let mut a = KVState::empty(1);
        a.absorb_tokens(&toks(&[1, 2]));
        let mut b = KVState::empty(1);
        b.absorb_tokens(&toks(&[2, 1]));
        assert_ne!(a, b);
    }

    #[test]
    fn embedding_and_token_do_not_collide() {
        let emb = VisionEmbedding::new(1, ContentDigest([0; 32]), 1);
        let mut a = KVState::empty(1);
        a.absorb_embedding(&emb);
        let mut b = KVState::empty(1);
        b.absorb_token(TokenId(0));
        assert_eq!(a.token_count(), b.token_count());
        assert_ne!(a, b);
    }

    proptest! {
        #[test]
        fn replay_is_associative(
            a in proptest::collection::vec(0u32..50_000, 0..40),
            b in proptest::collection::vec(0u32..50_000, 0..40),
        ) {
            let mut split = KVState::empty(8);
            split.absorb_tokens(&toks(&a));
            split.absorb_tokens(&toks(&b));
            let mut whole = KVState::empty(8);
            let ab: Vec<u32> = a.iter().chain(b.iter()).copied().collect();
            whole.absorb_tokens(&toks(&ab));
            prop_assert_eq!(split, whole);
        }
    }
}
