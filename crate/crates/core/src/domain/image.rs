use std::path::PathBuf;
use std::time::Duration;

use base64::Engine as _;
use image::{DynamicImage, ImageFormat};
use thiserror::Error;

/// Row-major RGB8 raster, `3 * width * height` bytes.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct CanonicalImage {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl std::fmt::Debug for CanonicalImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CanonicalImage")
            .field("width", &self.width)
            .field("height", &self.height)
            .finish_non_exhaustive()
    }
}

impl CanonicalImage {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self, MediaError> {
        if width == 0 || height == 0 {
            return Err(MediaError::Decode(format!(
                "degenerate raster {width}x{height}"
            )));
        }
        let expected = 3 * width as usize * height as usize;
        if pixels.len() != expected {
            return Err(MediaError::Decode(format!(
                "raster {width}x{height} needs {expected} bytes, got {}",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    /// Decodes PNG or JPEG bytes. Alpha is composited over black.
    pub fn from_encoded(bytes: &[u8]) -> Result<Self, MediaError> {
        let format = image::guess_format(bytes)
            .map_err(|_| MediaError::UnsupportedFormat("unrecognised container".into()))?;
        if !matches!(format, ImageFormat::Png | ImageFormat::Jpeg) {
            return Err(MediaError::UnsupportedFormat(format!("{format:?}")));
        }
        let decoded = image::load_from_memory_with_format(bytes, format)
            .map_err(|e| MediaError::Decode(e.to_string()))?;
        Ok(Self::from_dynamic(decoded))
    }

    fn from_dynamic(img: DynamicImage) -> Self {
        let (width, height) = (img.width(), img.height());
        let pixels = if img.color().has_alpha() {
            let rgba = img.into_rgba8();
            let mut out = Vec::with_capacity(3 * width as usize * height as usize);
            for px in rgba.pixels() {
                let a = u32::from(px[3]);
                for c in &px.0[..3] {
                    out.push(((u32::from(*c) * a + 127) / 255) as u8);
                }
            }
            out
        } else {
            img.into_rgb8().into_raw()
        };
        Self {
            width,
            height,
            pixels,
        }
    }

    /// Lossless PNG encoding of this raster.
    pub fn to_png(&self) -> Vec<u8> {
        let buf = image::RgbImage::from_raw(self.width, self.height, self.pixels.clone())
            .expect("raster length checked at construction");
        let mut out = std::io::Cursor::new(Vec::new());
        buf.write_to(&mut out, ImageFormat::Png)
            .expect("PNG encoding into memory cannot fail");
        out.into_inner()
    }
}

/// Where an image came from before decoding.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum MediaSource {
    Url(String),
    /// Base64 payload, with or without a `data:image/...;base64,` prefix.
    Base64(String),
    FilePath(PathBuf),
    /// Raster handed over already decoded.
    Inline,
}

#[derive(Debug, Clone)]
pub struct DecodeOptions {
    pub fetch_timeout: Duration,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            fetch_timeout: Duration::from_secs(10),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MediaError {
    #[error("image decode failed: {0}")]
    Decode(String),
    #[error("image fetch failed: {0}")]
    Fetch(String),
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),
}

/// Resolves a media source to bytes and decodes it to the canonical raster.
pub fn canonical_decode(
    source: &MediaSource,
    options: &DecodeOptions,
) -> Result<CanonicalImage, MediaError> {
    let bytes = match source {
        MediaSource::Url(url) => fetch(url, options.fetch_timeout)?,
        MediaSource::Base64(data) => decode_base64(data)?,
        MediaSource::FilePath(path) => std::fs::read(path)
            .map_err(|e| MediaError::Decode(format!("{}: {e}", path.display())))?,
        MediaSource::Inline => {
            return Err(MediaError::Decode(
                "inline media has no encoded form".into(),
            ))
        }
    };
    CanonicalImage::from_encoded(&bytes)
}

fn decode_base64(data: &str) -> Result<Vec<u8>, MediaError> {
    let payload = match data.strip_prefix("data:") {
        Some(rest) => {
            let (header, body) = rest
                .split_once(',')
                .ok_or_else(|| MediaError::Decode("data URI without payload".into()))?;
            if !header.ends_with(";base64") {
                return Err(MediaError::UnsupportedFormat(format!(
                    "data URI is not base64: {header}"
                )));
            }
            if !header.starts_with("image/") {
                return Err(MediaError::UnsupportedFormat(header.to_string()));
            }
            body
        }
        None => data,
    };
    let compact: String = payload.chars().filter(|c| !c.is_whitespace()).collect();
    base64::engine::general_purpose::STANDARD
        .decode(compact)
        .map_err(|e| MediaError::Decode(format!("base64: {e}")))
}

fn fetch(url: &str, timeout: Duration) -> Result<Vec<u8>, MediaError> {
    let client = reqwest::blocking::Client::builder()
        .timeout(timeout)
        .build()
        .map_err(|e| MediaError::Fetch(e.to_string()))?;
    let resp = client
        .get(url)
        .send()
        .map_err(|e| MediaError::Fetch(e.to_string()))?;
    if !resp.status().is_success() {
        return Err(MediaError::Fetch(format!("{url}: HTTP {}", resp.status())));
    }
    resp.bytes()
        .map(|b| b.to_vec())
        .map_err(|e| MediaError::Fetch(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::content_hash;
    use base64::engine::general_purpose::STANDARD;
    use std::io::{Read, Write};
    use std::net::TcpListener;

    fn red_2x2() -> CanonicalImage {
        CanonicalImage::new(2, 2, [255, 0, 0].repeat(4)).unwrap()
    }

    #[test]
    fn raster_length_enforced() {
        assert!(CanonicalImage::new(2, 2, vec![0; 11]).is_err());
        assert!(CanonicalImage::new(0, 2, vec![]).is_err());
    }

    #[test]
    fn file_and_data_uri_agree() {
        let png = red_2x2().to_png();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("red.png");
        std::fs::write(&path, &png).unwrap();

        let opts = DecodeOptions::default();
        let from_file = canonical_decode(&MediaSource::FilePath(path), &opts).unwrap();
        let uri = format!("data:image/png;base64,{}", STANDARD.encode(&png));
        let from_uri = canonical_decode(&MediaSource::Base64(uri), &opts).unwrap();
        let bare = canonical_decode(&MediaSource::Base64(STANDARD.encode(&png)), &opts).unwrap();

        assert_eq!(from_file, red_2x2());
        assert_eq!(from_file.pixels(), from_uri.pixels());
        assert_eq!(content_hash(&from_uri), content_hash(&bare));
    }

    #[test]
    fn black_pixel_png() {
        let png = CanonicalImage::new(1, 1, vec![0, 0, 0]).unwrap().to_png();
        let img = CanonicalImage::from_encoded(&png).unwrap();
        assert_eq!((img.width(), img.height()), (1, 1));
        assert_eq!(img.pixels(), &[0, 0, 0]);
    }

    #[test]
    fn alpha_composites_over_black() {
        let rgba = image::RgbaImage::from_raw(2, 1, vec![200, 100, 50, 255, 200, 100, 50, 0])
            .unwrap();
        let mut buf = std::io::Cursor::new(Vec::new());
        rgba.write_to(&mut buf, ImageFormat::Png).unwrap();
        let img = CanonicalImage::from_encoded(buf.get_ref()).unwrap();
        assert_eq!(img.pixels(), &[200, 100, 50, 0, 0, 0]);
    }

    #[test]
    fn grayscale_expands_to_rgb() {
        let gray = image::GrayImage::from_raw(1, 1, vec![77]).unwrap();
        let mut buf = std::io::Cursor::new(Vec::new());
        gray.write_to(&mut buf, ImageFormat::Png).unwrap();
        let img = CanonicalImage::from_encoded(buf.get_ref()).unwrap();
        assert_eq!(img.pixels(), &[77, 77, 77]);
    }

    #[test]
    fn jpeg_matches_reference_decoder() {
        let src = image::RgbImage::from_fn(16, 16, |x, y| image::Rgb([x as u8 * 16, y as u8 * 16, 90]));
        let mut buf = std::io::Cursor::new(Vec::new());
        src.write_to(&mut buf, ImageFormat::Jpeg).unwrap();
        let ours = CanonicalImage::from_encoded(buf.get_ref()).unwrap();
        let reference = image::load_from_memory(buf.get_ref()).unwrap().into_rgb8();
        assert_eq!(ours.pixels(), reference.as_raw().as_slice());
    }

    #[test]
    fn corrupt_and_unsupported_inputs() {
        let mut png = red_2x2().to_png();
        png.truncate(png.len() / 2);
        assert!(matches!(
            CanonicalImage::from_encoded(&png),
            Err(MediaError::Decode(_))
        ));
        assert!(matches!(
            CanonicalImage::from_encoded(b"GIF89a\x01\x00\x01\x00"),
            Err(MediaError::UnsupportedFormat(_))
        ));
        assert!(matches!(
            CanonicalImage::from_encoded(b"hello world"),
            Err(MediaError::UnsupportedFormat(_))
        ));
        let opts = DecodeOptions::default();
        assert!(matches!(
            canonical_decode(&MediaSource::Base64("!!!".into()), &opts),
            Err(MediaError::Decode(_))
        ));
        assert!(matches!(
            canonical_decode(&MediaSource::Base64("data:text/plain;base64,aGk=".into()), &opts),
            Err(MediaError::UnsupportedFormat(_))
        ));
    }

    #[test]
    fn url_fetch_round_trip() {
        let png = red_2x2().to_png();
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let body = png.clone();
        let server = std::thread::spawn(move || {
            let (mut conn, _) = listener.accept().unwrap();
            let mut req = [0u8; 1024];
            let _ = conn.read(&mut req).unwrap();
            let head = format!(
                "HTTP/1.1 200 OK\r\nContent-Type: image/png\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
                body.len()
            );
            conn.write_all(head.as_bytes()).unwrap();
            conn.write_all(&body).unwrap();
        });
        let url = format!("http://{addr}/red.png");
        let img = canonical_decode(&MediaSource::Url(url), &DecodeOptions::default()).unwrap();
        server.join().unwrap();
        assert_eq!(img, red_2x2());
    }

    #[test]
    fn unreachable_url_is_fetch_error() {
        // Bind then drop to get a port nothing listens on.
        let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let opts = DecodeOptions {
            fetch_timeout: Duration::from_secs(2),
        };
        let err = canonical_decode(&MediaSource::Url(format!("http://127.0.0.1:{port}/x.png")), &opts)
            .unwrap_err();
        assert!(matches!(err, MediaError::Fetch(_)));
    }
}
