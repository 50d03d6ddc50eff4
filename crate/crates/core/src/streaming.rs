//! Incremental detokenization for token-by-token streaming.
//!
//! A byte-level tokenizer can split one code point across several tokens, so
//! a naive per-token decode would emit broken characters. [`StreamDecoder`]
//! holds back an incomplete trailing sequence until the bytes that finish it
//! arrive, and only ever releases valid UTF-8.

use crate::domain::TokenId;

/// Maps a token to the raw bytes it stands for.
pub trait TokenBytes {
    fn token_bytes(&self, token: TokenId) -> &[u8];
}

pub struct StreamDecoder<'a, T: TokenBytes + ?Sized> {
    tokenizer: &'a T,
    held: Vec<u8>,
    emitted_len: usize,
}

impl<'a, T: TokenBytes + ?Sized> StreamDecoder<'a, T> {
    pub fn new(tokenizer: &'a T) -> Self {
        Self {
            tokenizer,
            held: Vec::with_capacity(8),
            emitted_len: 0,
        }
    }

    /// Bytes waiting for the rest of their code point.
    pub fn held_bytes(&self) -> &[u8] {
        &self.held
    }

    /// Bytes of text released so far.
    pub fn emitted_len(&self) -> usize {
        self.emitted_len
    }

    /// Appends one token and returns whatever text became complete.
    ///
    /// Invalid sequences (as opposed to merely unfinished ones) are released
    /// as U+FFFD right away so they cannot stall the stream.
    pub fn push_token(&mut self, token: TokenId) -> String {
        self.held.extend_from_slice(self.tokenizer.token_bytes(token));
        let mut out = String::new();
        let mut rest: &[u8] = &self.held;
        loop {
            match std::str::from_utf8(rest) {
                Ok(s) => {
                    out.push_str(s);
                    rest = &[];
                    break;
                }
                Err(e) => {
                    let (valid, after) = rest.split_at(e.valid_up_to());
                    // `valid_up_to` guarantees this prefix decodes.
                    out.push_str(std::str::from_utf8(valid).unwrap_or_default());
                    match e.error_len() {
                        Some(bad) => {
                            out.push(char::REPLACEMENT_CHARACTER);
                            rest = &after[bad..];
                        }
                        None => {
                            rest = after;
                            break;
                        }
                    }
                }
            }
        }
        let keep = rest.len();
        self.held.drain(..self.held.len() - keep);
        self.emitted_len += out.len();
        out
    }

    /// Flushes held bytes, replacing a dangling partial sequence with U+FFFD.
    pub fn finish(&mut self) -> String {
        let out = String::from_utf8_lossy(&self.held).into_owned();
        self.held.clear();
        self.emitted_len += out.len();
        out
    }
}
