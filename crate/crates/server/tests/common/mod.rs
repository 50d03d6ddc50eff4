#![allow(dead_code)]

use std::io::Cursor;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use clap::Parser;
use image::{ImageFormat, RgbImage};
use kvserve_server::{serve_on, AppState, ServerConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tokio::net::TcpListener;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

pub struct TestServer {
    pub base: String,
    pub client: reqwest::Client,
    pub state: AppState,
    stop: Option<oneshot::Sender<()>>,
    task: Option<JoinHandle<anyhow::Result<()>>>,
}

impl TestServer {
    pub async fn start(args: &[&str]) -> Self {
        let argv = std::iter::once("kvserve").chain(args.iter().copied());
        let config = ServerConfig::parse_from(argv);
        let state = AppState::start(&config).expect("server state");
        Self::with_state(state).await
    }

    pub async fn with_state(state: AppState) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
        let base = format!("http://{}", listener.local_addr().unwrap());
        let (stop, rx) = oneshot::channel::<()>();
        let task = tokio::spawn(serve_on(listener, state.clone(), async {
            let _ = rx.await;
        }));
        Self {
            base,
            client: reqwest::Client::new(),
            state,
            stop: Some(stop),
            task: Some(task),
        }
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}{}", self.base, path)
    }

    pub async fn chat(&self, body: &Value) -> reqwest::Response {
        self.client
            .post(self.url("/v1/chat/completions"))
            .json(body)
            .send()
            .await
            .unwrap()
    }

    pub async fn get_json(&self, path: &str) -> Value {
        self.client.get(self.url(path)).send().await.unwrap().json().await.unwrap()
    }

    pub async fn stop(mut self) {
        if let Some(s) = self.stop.take() {
            let _ = s.send(());
        }
        if let Some(t) = self.task.take() {
            t.await.unwrap().unwrap();
        }
    }
}

pub fn noise_png(seed: u64, width: u32, height: u32) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let img = RgbImage::from_fn(width, height, |_, _| image::Rgb(rng.random()));
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png).unwrap();
    out.into_inner()
}

/// Random solid squares: a full-size raster with a small encoding.
pub fn blocky_png(seed: u64, width: u32, height: u32, block: u32) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cols = width.div_ceil(block);
    let colors: Vec<[u8; 3]> = (0..cols * height.div_ceil(block)).map(|_| rng.random()).collect();
    let img = RgbImage::from_fn(width, height, |x, y| image::Rgb(colors[((y / block) * cols + x / block) as usize]));
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png).unwrap();
    out.into_inner()
}

pub fn data_uri(png: &[u8]) -> String {
    format!("data:image/png;base64,{}", STANDARD.encode(png))
}

pub fn text_request(model: &str, system: &str, user: &str, max_tokens: u32) -> Value {
    json!({
        "model": model,
        "messages": [
            {"role": "system", "content": system},
            {"role": "user", "content": user},
        ],
        "max_tokens": max_tokens,
    })
}

pub fn image_request(model: &str, url: &str, question: &str, max_tokens: u32) -> Value {
    json!({
        "model": model,
        "messages": [{
            "role": "user",
            "content": [
                {"type": "image_url", "image_url": {"url": url}},
                {"type": "text", "text": question},
            ],
        }],
        "max_tokens": max_tokens,
    })
}

/// Replaces every `"created":<digits>` value with 0.
pub fn zero_created(s: &str) -> String {
    const KEY: &str = "\"created\":";
    let mut out = String::with_capacity(s.len());
    let mut rest = s;
    while let Some(i) = rest.find(KEY) {
        out.push_str(&rest[..i + KEY.len()]);
        rest = rest[i + KEY.len()..].trim_start_matches(|c: char| c.is_ascii_digit());
        out.push('0');
    }
    out.push_str(rest);
    out
}

/// Splits an SSE body into `data:` payloads, asserting exact framing.
pub fn sse_payloads(body: &str) -> Vec<&str> {
    assert!(body.ends_with("data: [DONE]\n\n"), "missing terminator: {body:?}");
    let frames: Vec<&str> = body.split_terminator("\n\n").collect();
    let rebuilt: String = frames.iter().map(|f| format!("{f}\n\n")).collect();
    assert_eq!(rebuilt, body);
    frames
        .iter()
        .map(|f| {
            let payload = f.strip_prefix("data: ").unwrap_or_else(|| panic!("bad frame {f:?}"));
            assert!(!payload.contains('\n'));
            payload
        })
        .collect()
}

pub fn streamed_content(body: &str) -> (String, Option<String>) {
    let payloads = sse_payloads(body);
    assert_eq!(payloads.last(), Some(&"[DONE]"));
    let mut content = String::new();
    let mut finish = None;
    for p in &payloads[..payloads.len() - 1] {
        let v: Value = serde_json::from_str(p).unwrap();
        let choice = &v["choices"][0];
        if let Some(c) = choice["delta"]["content"].as_str() {
            content.push_str(c);
        }
        if let Some(f) = choice["finish_reason"].as_str() {
            finish = Some(f.to_string());
        }
    }
    (content, finish)
}

pub fn golden_path(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

/// Compares against a checked-in file; `UPDATE_GOLDEN=1` rewrites it.
pub fn assert_golden(name: &str, actual: &str) {
    let path = golden_path(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, actual).unwrap();
        return;
    }
    let expected = std::fs::read_to_string(&path)
        .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(actual, expected, "golden mismatch for {name}");
}
