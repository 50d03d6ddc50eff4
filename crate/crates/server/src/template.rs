//! Chat template: flattens messages into prompt tokens.
//!
//! Each message renders as `<role>\n<content>\n`, and the prompt ends with
//! `assistant\n`. Text parts are tokenized in place; each image part becomes
//! one image placeholder token, in order.

use std::path::PathBuf;

use kvserve_core::backend::Tokenizer;
use kvserve_core::{MediaSource, TokenId};

use crate::api::{ChatMessage, ContentPart, MessageContent, Role};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub tokens: Vec<TokenId>,
    /// Image URLs in placeholder order.
    pub image_urls: Vec<String>,
}

pub fn render<T: Tokenizer + ?Sized>(tokenizer: &T, messages: &[ChatMessage]) -> RenderedPrompt {
    let mut tokens = Vec::new();
    let mut image_urls = Vec::new();
    for m in messages {
        tokens.extend(tokenizer.encode(m.role.as_str()));
        tokens.extend(tokenizer.encode("\n"));
        match &m.content {
            MessageContent::Text(text) => tokens.extend(tokenizer.encode(text)),
            MessageContent::Parts(parts) => {
                for part in parts {
                    match part {
                        ContentPart::Text { text } => tokens.extend(tokenizer.encode(text)),
                        ContentPart::ImageUrl { image_url } => {
                            tokens.push(tokenizer.image_placeholder());
                            image_urls.push(image_url.url.clone());
                        }
                    }
                }
            }
        }
        tokens.extend(tokenizer.encode("\n"));
    }
    tokens.extend(tokenizer.encode(Role::Assistant.as_str()));
    tokens.extend(tokenizer.encode("\n"));
    RenderedPrompt { tokens, image_urls }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SourceError {
    LocalFilesDisabled,
    BadFileUrl(String),
    UnsupportedScheme(String),
}

impl std::fmt::Display for SourceError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SourceError::LocalFilesDisabled => {
                f.write_str("file:// image URLs require --allow-local-files")
            }
            SourceError::BadFileUrl(u) => write!(f, "invalid file URL: {u}"),
            SourceError::UnsupportedScheme(u) => write!(f, "unsupported image URL: {u}"),
        }
    }
}

/// Classifies an `image_url.url` value.
pub fn media_source(url: &str, allow_local_files: bool) -> Result<MediaSource, SourceError> {
    if url.starts_with("data:") {
        return Ok(MediaSource::Base64(url.to_string()));
    }
    if url.starts_with("http://") || url.starts_with("https://") {
        return Ok(MediaSource::Url(url.to_string()));
    }
    if url.starts_with("file://") {
        if !allow_local_files {
            return Err(SourceError::LocalFilesDisabled);
        }
        let path: PathBuf = url::Url::parse(url)
            .ok()
            .and_then(|u| u.to_file_path().ok())
            .ok_or_else(|| SourceError::BadFileUrl(url.to_string()))?;
        return Ok(MediaSource::FilePath(path));
    }
    let shown: String = url.chars().take(40).collect();
    Err(SourceError::UnsupportedScheme(shown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::api::ImageUrl;
    use kvserve_core::backend::tokenizer::IMAGE_PLACEHOLDER;
    use kvserve_core::ToyTokenizer;

    fn text(role: Role, s: &str) -> ChatMessage {
        ChatMessage {
            role,
            content: MessageContent::Text(s.into()),
        }
    }

    #[test]
    fn renders_fixed_template() {
        let tok = ToyTokenizer::default();
        let p = render(&tok, &[text(Role::System, "S"), text(Role::User, "hi")]);
        assert_eq!(tok.decode(&p.tokens), "system\nS\nuser\nhi\nassistant\n");
        assert!(p.image_urls.is_empty());
    }

    #[test]
    fn images_become_placeholders_in_order() {
        let tok = ToyTokenizer::default();
        let msg = ChatMessage {
            role: Role::User,
            content: MessageContent::Parts(vec![
                ContentPart::Text { text: "a".into() },
                ContentPart::ImageUrl {
                    image_url: ImageUrl { url: "u1".into() },
                },
                ContentPart::ImageUrl {
                    image_url: ImageUrl { url: "u2".into() },
                },
                ContentPart::Text { text: "b".into() },
            ]),
        };
        let p = render(&tok, &[msg]);
        let expected: Vec<TokenId> = [
            tok.encode("user\na"),
            vec![IMAGE_PLACEHOLDER, IMAGE_PLACEHOLDER],
            tok.encode("b\nassistant\n"),
        ]
        .concat();
        assert_eq!(p.tokens, expected);
        assert_eq!(p.image_urls, vec!["u1", "u2"]);
    }

    #[test]
    fn shared_system_prompt_shares_token_prefix() {
        let tok = ToyTokenizer::default();
        let a = render(&tok, &[text(Role::System, "same"), text(Role::User, "one")]);
        let b = render(&tok, &[text(Role::System, "same"), text(Role::User, "two")]);
        let n = tok.encode("system\nsame\nuser\n").len();
        assert_eq!(a.tokens[..n], b.tokens[..n]);
    }

    #[test]
    fn url_classification() {
        assert!(matches!(media_source("data:image/png;base64,AA", false), Ok(MediaSource::Base64(_))));
        assert!(matches!(media_source("https://x/y.png", false), Ok(MediaSource::Url(_))));
        assert_eq!(media_source("file:///tmp/a.png", false), Err(SourceError::LocalFilesDisabled));
        assert_eq!(
            media_source("file:///tmp/a%20b.png", true),
            Ok(MediaSource::FilePath("/tmp/a b.png".into()))
        );
        assert!(matches!(media_source("ftp://x", true), Err(SourceError::UnsupportedScheme(_))));
    }
}
