//! Procedural request content: seeded noise rasters and fixed-length text.

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use kvserve_core::backend::Tokenizer;
use kvserve_core::{CanonicalImage, GenerationRequest, MediaItem, ToyTokenizer};
use kvserve_server::api::{ChatMessage, ChatRequest, ContentPart, ImageUrl, MessageContent, Role};
use kvserve_server::template::render;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One chat message: images first, then text.
#[derive(Debug, Clone)]
pub struct BenchMessage {
    pub role: Role,
    pub images: Vec<MediaItem>,
    pub text: String,
}

impl BenchMessage {
    pub fn text(role: Role, text: impl Into<String>) -> Self {
        Self {
            role,
            images: Vec::new(),
            text: text.into(),
        }
    }

    pub fn with_images(role: Role, images: Vec<MediaItem>, text: impl Into<String>) -> Self {
        Self {
            role,
            images,
            text: text.into(),
        }
    }
}

/// A request as the benchmark sees it; always generates exactly
/// `max_tokens` tokens.
#[derive(Debug, Clone)]
pub struct BenchRequest {
    pub messages: Vec<BenchMessage>,
    pub max_tokens: u32,
}

impl BenchRequest {
    pub fn new(messages: Vec<BenchMessage>, max_tokens: u32) -> Self {
        Self {
            messages,
            max_tokens,
        }
    }

    fn chat_messages(&self, image_url: impl Fn(&MediaItem) -> String) -> Vec<ChatMessage> {
        self.messages
            .iter()
            .map(|m| {
                let content = if m.images.is_empty() {
                    MessageContent::Text(m.text.clone())
                } else {
                    let mut parts: Vec<ContentPart> = m
                        .images
                        .iter()
                        .map(|img| ContentPart::ImageUrl {
                            image_url: ImageUrl { url: image_url(img) },
                        })
                        .collect();
                    parts.push(ContentPart::Text {
                        text: m.text.clone(),
                    });
                    MessageContent::Parts(parts)
                };
                ChatMessage {
                    role: m.role,
                    content,
                }
            })
            .collect()
    }

    /// Wire form, with images as PNG data URIs.
    pub fn to_chat_request(&self, model: &str) -> ChatRequest {
        ChatRequest {
            model: model.to_string(),
            messages: self.chat_messages(|img| png_data_uri(&img.decoded)),
            max_tokens: Some(self.max_tokens),
            max_completion_tokens: None,
            stream: false,
            ignore_eos: true,
        }
    }

    /// Engine form, rendered through the server's chat template.
    pub fn to_generation_request(&self, id: u64, tokenizer: &ToyTokenizer) -> GenerationRequest {
        let rendered = render(tokenizer, &self.chat_messages(|_| String::new()));
        let media = self.messages.iter().flat_map(|m| m.images.iter().cloned()).collect();
        GenerationRequest::text(id, rendered.tokens, self.max_tokens, tokenizer.eos())
            .with_media(media)
            .ignoring_eos()
    }

    pub fn prompt_len(&self, tokenizer: &ToyTokenizer) -> usize {
        self.to_generation_request(0, tokenizer).prompt_tokens.len()
    }
}

pub fn png_data_uri(img: &CanonicalImage) -> String {
    format!("data:image/png;base64,{}", STANDARD.encode(img.to_png()))
}

/// Deterministic stream of content for one benchmark iteration.
pub struct ContentRng(ChaCha8Rng);

impl ContentRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self(rng)
    }

    /// Uniform RGB noise raster.
    pub fn noise_image(&mut self, width: u32, height: u32) -> MediaItem {
        let mut px = vec![0u8; 3 * width as usize * height as usize];
        self.0.fill(&mut px[..]);
        let img = CanonicalImage::new(width, height, px).expect("dimensions are positive");
        MediaItem::inline(img)
    }

    /// Printable ASCII text; the toy tokenizer maps it to exactly `len` tokens.
    pub fn text(&mut self, len: usize) -> String {
        const ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz      ,.?";
        (0..len)
            .map(|_| ALPHABET[self.0.random_range(0..ALPHABET.len())] as char)
            .collect()
    }
}
