use std::fmt;

use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{CanonicalImage, TokenId};

/// A 32-byte SHA-256 digest.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ContentDigest(pub [u8; 32]);

impl ContentDigest {
    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        format!("{self:x}")
    }

    /// SHA-256 of an arbitrary byte string.
    pub fn of_bytes(bytes: &[u8]) -> Self {
        Self(Sha256::digest(bytes).into())
    }

    pub(crate) fn from_hasher(hasher: Sha256) -> Self {
        Self(hasher.finalize().into())
    }
}

impl fmt::LowerHex for ContentDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.0 {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

impl fmt::Display for ContentDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:x}")
    }
}

impl fmt::Debug for ContentDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let hex = self.to_hex();
        write!(f, "ContentDigest({})", &hex[..12])
    }
}

/// Digest of decoded pixels.
///
/// Preimage: width as u64 big-endian, height as u64 big-endian, then the RGB8
/// raster. The container the pixels arrived in never enters the hash.
pub fn content_hash(img: &CanonicalImage) -> ContentDigest {
    let mut hasher = Sha256::new();
    hasher.update((img.width() as u64).to_be_bytes());
    hasher.update((img.height() as u64).to_be_bytes());
    hasher.update(img.pixels());
    ContentDigest::from_hasher(hasher)
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
#[error("cannot hash an empty token sequence")]
pub struct EmptySequence;

/// Digest of a token sequence, each id serialized as 4 bytes big-endian.
pub fn token_prefix_hash(tokens: &[TokenId]) -> Result<ContentDigest, EmptySequence> {
    if tokens.is_empty() {
        return Err(EmptySequence);
    }
    let mut hasher = TokenPrefixHasher::new();
    hasher.extend(tokens);
    Ok(hasher.digest())
}

/// Running SHA-256 over a token stream.
///
/// `digest()` at length `i` equals `token_prefix_hash(&tokens[..i])`, so a
/// single pass yields the digest of every prefix.
#[derive(Clone, Default)]
pub struct TokenPrefixHasher {
    inner: Sha256,
    len: usize,
}

impl TokenPrefixHasher {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, token: TokenId) {
        self.inner.update(token.0.to_be_bytes());
        self.len += 1;
    }

    pub fn extend(&mut self, tokens: &[TokenId]) {
        for &t in tokens {
            self.push(t);
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn digest(&self) -> ContentDigest {
        ContentDigest::from_hasher(self.inner.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Golden values computed with Python's hashlib, independently of this crate.
    const BLACK_1X1: &str = "ddf33e0e24e16284b6eb0bc2e858cf1a177c3328890bc23b41c23c0e2cfb33e2";
    const RED_2X2: &str = "483e6364ed73d4d26ee7300a6e564f2b4bb08b33e19c54c005b5ccc97f35981c";
    const TOKENS_7: &str = "1561ade0621c5acf44b780521f95a1e0b19b4e5032945b860c4032fc28a3a23b";
    const TOKENS_123: &str = "7b0b5ea3ff36958c8e32ccf24b71da9ac68e51d0881bf75e62b837ec9ea6f3a5";

    fn toks(v: &[u32]) -> Vec<TokenId> {
        v.iter().copied().map(TokenId).collect()
    }

    #[test]
    fn black_pixel_golden() {
        let img = CanonicalImage::new(1, 1, vec![0, 0, 0]).unwrap();
        assert_eq!(content_hash(&img).to_hex(), BLACK_1X1);
    }

    #[test]
    fn red_square_golden() {
        let img = CanonicalImage::new(2, 2, [255, 0, 0].repeat(4)).unwrap();
        assert_eq!(content_hash(&img).to_hex(), RED_2X2);
    }

    #[test]
    fn one_channel_flip_changes_digest() {
        let a = CanonicalImage::new(2, 2, [255, 0, 0].repeat(4)).unwrap();
        let mut px = a.pixels().to_vec();
        px[7] += 1;
        let b = CanonicalImage::new(2, 2, px).unwrap();
        assert_ne!(content_hash(&a), content_hash(&b));
    }

    #[test]
    fn dimensions_are_part_of_preimage() {
        let wide = CanonicalImage::new(2, 1, vec![0; 6]).unwrap();
        let tall = CanonicalImage::new(1, 2, vec![0; 6]).unwrap();
        assert_ne!(content_hash(&wide), content_hash(&tall));
    }

    #[test]
    fn token_goldens() {
        assert_eq!(token_prefix_hash(&toks(&[7])).unwrap().to_hex(), TOKENS_7);
        assert_eq!(token_prefix_hash(&toks(&[1, 2, 3])).unwrap().to_hex(), TOKENS_123);
    }

    #[test]
    fn token_hash_determinism_and_sensitivity() {
        let a = token_prefix_hash(&toks(&[1, 2, 3])).unwrap();
        assert_eq!(a, token_prefix_hash(&toks(&[1, 2, 3])).unwrap());
        assert_ne!(a, token_prefix_hash(&toks(&[1, 2, 4])).unwrap());
    }

    #[test]
    fn empty_sequence_rejected() {
        assert_eq!(token_prefix_hash(&[]), Err(EmptySequence));
    }

    #[test]
    fn running_hasher_matches_every_prefix() {
        let seq = toks(&[5, 9, 1, 70000, 3]);
        let mut h = TokenPrefixHasher::new();
        for i in 0..seq.len() {
            h.push(seq[i]);
            assert_eq!(h.digest(), token_prefix_hash(&seq[..=i]).unwrap());
        }
        assert_eq!(h.len(), 5);
    }
}
