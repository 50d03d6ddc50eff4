//! OpenAI-compatible HTTP server in front of the kvserve engine.
//!
//! Endpoints:
//!
//! * `POST /v1/chat/completions`, plain JSON or SSE (`stream: true`)
//! * `GET /v1/models`
//! * `GET /admin/cache/stats`
//! * `GET /health`

pub mod api;
mod routes;
pub mod template;

use std::net::SocketAddr;
use std::sync::Arc;

use anyhow::{bail, Context};
use axum::extract::DefaultBodyLimit;
use axum::routing::{get, post};
use axum::Router;
use clap::{Parser, ValueEnum};
use kvserve_core::backend::{ModelProfile, DEFAULT_PROFILE};
use kvserve_core::domain::DecodeOptions;
use kvserve_core::media_cache::MediaCacheConfig;
use kvserve_core::scheduler::{spawn, EngineConfig, EngineHandle};
use kvserve_core::text_cache::TextCacheConfig;
use kvserve_core::{Clock, Engine, SimBackend, TimeMode, ToyTokenizer};
use tokio::net::TcpListener;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TimeModeArg {
    /// Virtual clock: costs are accounted, nothing sleeps.
    Sim,
    /// Costs are slept for real (scaled by --time-scale).
    Wall,
}

#[derive(Debug, Clone, Parser)]
#[command(name = "kvserve", version, about = "OpenAI-compatible continuous-batching server")]
pub struct ServerConfig {
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8000)]
    pub port: u16,
    #[arg(long, default_value_t = 16)]
    pub max_batch_size: usize,
    /// Preset name or path to a TOML profile.
    #[arg(long, default_value = DEFAULT_PROFILE)]
    pub cost_profile: String,
    #[arg(long, default_value_t = 536_870_912)]
    pub text_cache_bytes: u64,
    /// Tokens between stored prefix snapshots.
    #[arg(long, default_value_t = 16)]
    pub prefix_block: usize,
    #[arg(long)]
    pub no_text_cache: bool,
    #[arg(long, default_value_t = 536_870_912)]
    pub media_cache_bytes: u64,
    #[arg(long)]
    pub no_media_cache: bool,
    #[arg(long)]
    pub no_kv_reuse: bool,
    #[arg(long)]
    pub no_embed_reuse: bool,
    /// Defaults to the profile's own time mode.
    #[arg(long, value_enum)]
    pub time_mode: Option<TimeModeArg>,
    /// Real seconds slept per model second in wall mode.
    #[arg(long, default_value_t = 1.0)]
    pub time_scale: f64,
    /// Accept `file://` image URLs.
    #[arg(long)]
    pub allow_local_files: bool,
    /// Reject requests with 503 once this many are waiting.
    #[arg(long)]
    pub queue_bound: Option<usize>,
    /// `max_tokens` used when the request gives none.
    #[arg(long, default_value_t = 256)]
    pub default_max_tokens: u32,
    /// Largest accepted request body; inline images make bodies large.
    #[arg(long, default_value_t = 134_217_728)]
    pub max_body_bytes: usize,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self::parse_from(["kvserve"])
    }
}

impl ServerConfig {
    pub fn addr(&self) -> anyhow::Result<SocketAddr> {
        format!("{}:{}", self.host, self.port)
            .parse()
            .with_context(|| format!("invalid listen address {}:{}", self.host, self.port))
    }

    pub fn engine_config(&self) -> EngineConfig {
        EngineConfig {
            max_batch_size: self.max_batch_size,
            text_cache: (!self.no_text_cache).then_some(TextCacheConfig {
                byte_budget: self.text_cache_bytes,
                block_granularity: self.prefix_block,
            }),
            media_cache: (!self.no_media_cache).then_some(MediaCacheConfig {
                byte_budget: self.media_cache_bytes,
                embed_reuse: !self.no_embed_reuse,
                kv_reuse: !self.no_kv_reuse,
            }),
            queue_bound: self.queue_bound,
        }
    }

    fn validate(&self) -> anyhow::Result<()> {
        if self.max_batch_size == 0 {
            bail!("--max-batch-size must be at least 1");
        }
        if self.prefix_block == 0 {
            bail!("--prefix-block must be at least 1");
        }
        if self.text_cache_bytes == 0 || self.media_cache_bytes == 0 {
            bail!("cache budgets must be positive (use --no-text-cache / --no-media-cache to disable)");
        }
        if !(self.time_scale.is_finite() && self.time_scale > 0.0) {
            bail!("--time-scale must be positive");
        }
        if self.default_max_tokens == 0 {
            bail!("--default-max-tokens must be at least 1");
        }
        Ok(())
    }
}

/// Shared by every handler.
#[derive(Clone)]
pub struct AppState {
    inner: Arc<AppInner>,
}

struct AppInner {
    engine: EngineHandle,
    model: String,
    tokenizer: ToyTokenizer,
    allow_local_files: bool,
    default_max_tokens: u32,
    max_body_bytes: usize,
    decode: DecodeOptions,
}

impl AppState {
    /// Loads the profile and starts the engine thread.
    pub fn start(config: &ServerConfig) -> anyhow::Result<Self> {
        config.validate()?;
        let profile = ModelProfile::resolve(&config.cost_profile)
            .with_context(|| format!("loading cost profile {}", config.cost_profile))?;
        let mode = match config.time_mode {
            Some(TimeModeArg::Sim) => TimeMode::Simulated,
            Some(TimeModeArg::Wall) => TimeMode::WallClock,
            None => profile.cost.time_mode,
        };
        let clock = Arc::new(Clock::for_mode(mode, config.time_scale));
        let model = profile.name.clone();
        let backend = SimBackend::with_clock(profile, clock);
        let tokenizer = *kvserve_core::Backend::tokenizer(&backend);
        let engine = spawn(Engine::new(backend, config.engine_config()));
        Ok(Self {
            inner: Arc::new(AppInner {
                engine,
                model,
                tokenizer,
                allow_local_files: config.allow_local_files,
                default_max_tokens: config.default_max_tokens,
                max_body_bytes: config.max_body_bytes,
                decode: DecodeOptions::default(),
            }),
        })
    }

    pub fn engine(&self) -> &EngineHandle {
        &self.inner.engine
    }

    pub fn model(&self) -> &str {
        &self.inner.model
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/chat/completions", post(routes::chat_completions))
        .route("/v1/models", get(routes::list_models))
        .route("/admin/cache/stats", get(routes::cache_stats))
        .route("/health", get(|| async { "ok" }))
        .layer(DefaultBodyLimit::max(state.inner.max_body_bytes))
        .with_state(state)
}

/// Serves on an already bound listener until `shutdown` resolves, then
/// drains the engine.
pub async fn serve_on(
    listener: TcpListener,
    state: AppState,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> anyhow::Result<()> {
    axum::serve(listener, router(state.clone()))
        .with_graceful_shutdown(shutdown)
        .await
        .context("serving HTTP")?;
    let engine = state.engine().clone();
    tokio::task::spawn_blocking(move || engine.shutdown(true))
        .await
        .context("stopping engine")?;
    Ok(())
}

pub async fn serve(config: ServerConfig) -> anyhow::Result<()> {
    let state = AppState::start(&config)?;
    let addr = config.addr()?;
    let listener = TcpListener::bind(addr)
        .await
        .with_context(|| format!("binding {addr}"))?;
    tracing::info!(%addr, model = state.model(), "listening");
    serve_on(listener, state, async {
        let _ = tokio::signal::ctrl_c().await;
        tracing::info!("shutting down");
    })
    .await
}
