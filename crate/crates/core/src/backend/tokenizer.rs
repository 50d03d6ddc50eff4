//! Byte-level toy tokenizer.
//!
//! Vocabulary layout:
//!
//! | ids            | meaning                                   |
//! |----------------|-------------------------------------------|
//! | `0..=255`      | one raw byte each                         |
//! | `256`          | end of sequence                           |
//! | `257`          | image placeholder                         |
//! | `258..vocab`   | fixed text pieces, cycling through a table |
//!
//! Encoding only ever produces byte tokens, so a multi-byte code point becomes
//! several tokens and `decode(encode(s)) == s` for any string. Piece tokens
//! only show up in generated output.

use crate::domain::TokenId;
use crate::streaming::TokenBytes;

pub const EOS: TokenId = TokenId(256);
pub const IMAGE_PLACEHOLDER: TokenId = TokenId(257);
pub const FIRST_PIECE: TokenId = TokenId(258);

const PIECES: &[&str] = &[
    " the", " a", " of", " and", " to", " in", " is", " that", " it", " with",
    " model", " cache", " token", " image", " frame", " batch", " prefix", " memory",
    " fast", " red", " blue", " cat", " sky", " light", " shows", " scene", ",", ".",
    "ing", "ed", "s", " café", " naïve", " 東京", " 中文", " 🙂", " €", " Ω",
    "\n",
];

static BYTES: [u8; 256] = {
    let mut t = [0u8; 256];
    let mut i = 0;
    while i < 256 {
        t[i] = i as u8;
        i += 1;
    }
    t
};

/// Tokenizer surface the engine and server rely on.
pub trait Tokenizer: TokenBytes + Send + Sync {
    fn vocab_size(&self) -> u32;
    fn encode(&self, text: &str) -> Vec<TokenId>;
    fn eos(&self) -> TokenId;
    fn image_placeholder(&self) -> TokenId;

    /// Lossy decode of a whole token sequence; special tokens yield no text.
    fn decode(&self, tokens: &[TokenId]) -> String {
        let mut bytes = Vec::new();
        for &t in tokens {
            bytes.extend_from_slice(self.token_bytes(t));
        }
        String::from_utf8_lossy(&bytes).into_owned()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyTokenizer {
    vocab_size: u32,
}

impl ToyTokenizer {
    pub fn new(vocab_size: u32) -> Self {
        assert!(
            vocab_size > FIRST_PIECE.0,
            "toy vocabulary needs more than {} ids",
            FIRST_PIECE.0
        );
        Self { vocab_size }
    }
}

impl Default for ToyTokenizer {
    fn default() -> Self {
        Self::new(50_000)
    }
}

impl TokenBytes for ToyTokenizer {
    fn token_bytes(&self, token: TokenId) -> &[u8] {
        match token.0 {
            b @ 0..=255 => &BYTES[b as usize..=b as usize],
            t if t >= FIRST_PIECE.0 && t < self.vocab_size => {
                PIECES[((t - FIRST_PIECE.0) as usize) % PIECES.len()].as_bytes()
            }
            _ => &[],
        }
    }
}

impl Tokenizer for ToyTokenizer {
    fn vocab_size(&self) -> u32 {
        self.vocab_size
    }

    fn encode(&self, text: &str) -> Vec<TokenId> {
        text.bytes().map(|b| TokenId(u32::from(b))).collect()
    }

    fn eos(&self) -> TokenId {
        EOS
    }

    fn image_placeholder(&self) -> TokenId {
        IMAGE_PLACEHOLDER
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn multibyte_code_points_span_tokens() {
        let tok = ToyTokenizer::default();
        let ids = tok.encode("€");
        assert_eq!(ids, vec![TokenId(0xE2), TokenId(0x82), TokenId(0xAC)]);
        assert_eq!(tok.decode(&ids), "€");
    }

    #[test]
    fn specials_decode_to_nothing() {
        let tok = ToyTokenizer::default();
        assert_eq!(tok.decode(&[TokenId(b'a' as u32), EOS, IMAGE_PLACEHOLDER]), "a");
        assert_eq!(tok.token_bytes(TokenId(60_000)), b"");
    }

    #[test]
    fn pieces_are_valid_utf8() {
        let tok = ToyTokenizer::new(1000);
        for t in FIRST_PIECE.0..1000 {
            assert!(std::str::from_utf8(tok.token_bytes(TokenId(t))).is_ok());
            assert!(!tok.token_bytes(TokenId(t)).is_empty());
        }
    }

    proptest! {
        #[test]
        fn round_trip(s in "\\PC*") {
            let tok = ToyTokenizer::default();
            prop_assert_eq!(tok.decode(&tok.encode(&s)), s);
        }

        #[test]
        fn round_trip_astral(chars in proptest::collection::vec(
            prop_oneof![
                proptest::char::range('\u{10000}', '\u{10FFFF}'),
                proptest::char::any(),
            ],
            0..64,
        )) {
            let s: String = chars.into_iter().collect();
            let tok = ToyTokenizer::default();
            prop_assert_eq!(tok.decode(&tok.encode(&s)), s);
        }
    }
}
