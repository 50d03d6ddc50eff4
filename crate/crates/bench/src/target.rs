//! Where benchmark requests run: an in-process engine or a live server.

use std::sync::Arc;
use std::time::Duration;

use kvserve_core::backend::{Clock, ModelProfile};
use kvserve_core::media_cache::MediaCacheConfig;
use kvserve_core::scheduler::EngineError;
use kvserve_core::{Backend, Engine, EngineConfig, EngineEvent, SimBackend, ToyTokenizer};
use kvserve_server::api::{ChatResponse, ModelList};

use crate::workload::BenchRequest;
use crate::BenchError;

/// Engine-clock timings of one finished request, in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurement {
    pub arrival_ms: f64,
    pub first_token_ms: f64,
    pub finish_ms: f64,
    pub completion_tokens: u64,
}

impl Measurement {
    pub fn latency_ms(&self) -> f64 {
        self.finish_ms - self.arrival_ms
    }

    pub fn ttft_ms(&self) -> f64 {
        self.first_token_ms - self.arrival_ms
    }
}

/// Results of requests submitted together, in submission order.
#[derive(Debug, Clone)]
pub struct BatchResult {
    pub requests: Vec<Measurement>,
}

impl BatchResult {
    /// First arrival to last finish.
    pub fn makespan_ms(&self) -> f64 {
        let start = self.requests.iter().map(|m| m.arrival_ms).fold(f64::INFINITY, f64::min);
        let end = self.requests.iter().map(|m| m.finish_ms).fold(f64::NEG_INFINITY, f64::max);
        end - start
    }

    pub fn total_tokens(&self) -> u64 {
        self.requests.iter().map(|m| m.completion_tokens).sum()
    }
}

pub trait Target {
    fn model(&self) -> &str;

    /// Submits every request at once and waits for all of them.
    fn run_batch(&mut self, requests: &[BenchRequest]) -> Result<BatchResult, BenchError>;

    fn run_one(&mut self, request: &BenchRequest) -> Result<Measurement, BenchError> {
        Ok(self.run_batch(std::slice::from_ref(request))?.requests[0])
    }
}

/// Cache settings a scenario asks for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheSetup {
    pub embed_reuse: bool,
    pub kv_reuse: bool,
}

impl Default for CacheSetup {
    fn default() -> Self {
        Self {
            embed_reuse: true,
            kv_reuse: true,
        }
    }
}

/// How to obtain a [`Target`].
#[derive(Debug, Clone)]
pub enum TargetSpec {
    Embedded(EmbeddedOptions),
    Http { base_url: String },
}

#[derive(Debug, Clone)]
pub struct EmbeddedOptions {
    pub profile: Option<ModelProfile>,
    pub max_batch_size: usize,
    pub media_cache_bytes: u64,
    pub text_cache_bytes: u64,
}

impl Default for EmbeddedOptions {
    fn default() -> Self {
        let engine = EngineConfig::default();
        Self {
            profile: None,
            max_batch_size: engine.max_batch_size,
            media_cache_bytes: engine.media_cache.map_or(0, |c| c.byte_budget),
            text_cache_bytes: engine.text_cache.map_or(0, |c| c.byte_budget),
        }
    }
}

impl TargetSpec {
    pub fn is_embedded(&self) -> bool {
        matches!(self, TargetSpec::Embedded(_))
    }

    /// `default_profile` applies to embedded targets without an explicit one.
    pub fn connect(
        &self,
        default_profile: &str,
        caches: CacheSetup,
    ) -> Result<Box<dyn Target>, BenchError> {
        match self {
            TargetSpec::Embedded(opts) => {
                let profile = match &opts.profile {
                    Some(p) => p.clone(),
                    None => ModelProfile::preset(default_profile)
                        .map_err(|e| BenchError::InvalidParameter(e.to_string()))?,
                };
                Ok(Box::new(EmbeddedTarget::new(profile, opts, caches)))
            }
            TargetSpec::Http { base_url } => {
                if caches != CacheSetup::default() {
                    return Err(BenchError::ScenarioFailed(
                        "cache ablation reconfigures the engine; run it without --target".into(),
                    ));
                }
                Ok(Box::new(HttpTarget::connect(base_url)?))
            }
        }
    }
}

/// An engine on a simulated clock; fully deterministic.
pub struct EmbeddedTarget {
    engine: Engine<SimBackend>,
    model: String,
    tokenizer: ToyTokenizer,
    next_id: u64,
}

impl EmbeddedTarget {
    pub fn new(profile: ModelProfile, opts: &EmbeddedOptions, caches: CacheSetup) -> Self {
        let mut config = EngineConfig {
            max_batch_size: opts.max_batch_size,
            ..EngineConfig::default()
        };
        if let Some(t) = config.text_cache.as_mut() {
            t.byte_budget = opts.text_cache_bytes;
        }
        config.media_cache = Some(MediaCacheConfig {
            byte_budget: opts.media_cache_bytes,
            embed_reuse: caches.embed_reuse,
            kv_reuse: caches.kv_reuse,
        });
        let model = profile.name.clone();
        let backend = SimBackend::with_clock(profile, Arc::new(Clock::simulated()));
        let tokenizer = *Backend::tokenizer(&backend);
        Self {
            engine: Engine::new(backend, config),
            model,
            tokenizer,
            next_id: 0,
        }
    }

    pub fn engine(&self) -> &Engine<SimBackend> {
        &self.engine
    }
}

impl Target for EmbeddedTarget {
    fn model(&self) -> &str {
        &self.model
    }

    fn run_batch(&mut self, requests: &[BenchRequest]) -> Result<BatchResult, BenchError> {
        let now = self.engine.now();
        let first_id = self.next_id;
        for r in requests {
            let req = r
                .to_generation_request(self.next_id, &self.tokenizer)
                .arriving_at(now);
            self.next_id += 1;
            self.engine.submit(req).map_err(failed)?;
        }
        let mut out: Vec<Option<Measurement>> = vec![None; requests.len()];
        for ev in self.engine.run_to_completion() {
            match ev {
                EngineEvent::Finished(c) => {
                    out[(c.id.0 - first_id) as usize] = Some(Measurement {
                        arrival_ms: c.timings.arrival.as_millis_f64(),
                        first_token_ms: c.timings.first_token.as_millis_f64(),
                        finish_ms: c.timings.finished.as_millis_f64(),
                        completion_tokens: c.output.len() as u64,
                    });
                }
                EngineEvent::Failed { error, .. } => return Err(failed(error)),
                _ => {}
            }
        }
        let requests = out
            .into_iter()
            .map(|m| m.ok_or_else(|| BenchError::ScenarioFailed("request never finished".into())))
            .collect::<Result<_, _>>()?;
        Ok(BatchResult { requests })
    }
}

fn failed(e: EngineError) -> BenchError {
    BenchError::ScenarioFailed(e.to_string())
}

/// A running server reached over HTTP. Timings come from the server's
/// `x-engine-*` headers, so they are on the engine clock either way.
pub struct HttpTarget {
    client: reqwest::blocking::Client,
    base: String,
    model: String,
}

impl HttpTarget {
    pub fn connect(base_url: &str) -> Result<Self, BenchError> {
        let base = base_url.trim_end_matches('/').to_string();
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(600))
            .build()
            .map_err(|e| BenchError::ScenarioFailed(e.to_string()))?;
        let unreachable = |reason: String| BenchError::TargetUnreachable {
            url: base.clone(),
            reason,
        };
        let models: ModelList = client
            .get(format!("{base}/v1/models"))
            .send()
            .and_then(|r| r.error_for_status())
            .map_err(|e| unreachable(e.to_string()))?
            .json()
            .map_err(|e| unreachable(e.to_string()))?;
        let model = models
            .data
            .into_iter()
            .next()
            .ok_or_else(|| unreachable("server lists no models".into()))?
            .id;
        Ok(Self {
            client,
            base,
            model,
        })
    }

    fn post(&self, body: &str) -> Result<Measurement, BenchError> {
        let resp = self
            .client
            .post(format!("{}/v1/chat/completions", self.base))
            .header("content-type", "application/json")
            .body(body.to_string())
            .send()
            .map_err(|e| BenchError::ScenarioFailed(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            let text = resp.text().unwrap_or_default();
            return Err(BenchError::ScenarioFailed(format!("HTTP {status}: {text}")));
        }
        let header = |name: &str| -> Result<f64, BenchError> {
            resp.headers()
                .get(name)
                .and_then(|v| v.to_str().ok())
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| BenchError::ScenarioFailed(format!("missing {name} header")))
        };
        let arrival_ms = header("x-engine-arrival-ms")?;
        let first_token_ms = header("x-engine-first-token-ms")?;
        let finish_ms = header("x-engine-finish-ms")?;
        let body: ChatResponse = resp
            .json()
            .map_err(|e| BenchError::ScenarioFailed(e.to_string()))?;
        Ok(Measurement {
            arrival_ms,
            first_token_ms,
            finish_ms,
            completion_tokens: body.usage.completion_tokens,
        })
    }
}

impl Target for HttpTarget {
    fn model(&self) -> &str {
        &self.model
    }

    fn run_batch(&mut self, requests: &[BenchRequest]) -> Result<BatchResult, BenchError> {
        let bodies: Vec<String> = requests
            .iter()
            .map(|r| serde_json::to_string(&r.to_chat_request(&self.model)).expect("serializable"))
            .collect();
        let this = &*self;
        let results: Vec<Result<Measurement, BenchError>> = std::thread::scope(|s| {
            let handles: Vec<_> = bodies.iter().map(|b| s.spawn(move || this.post(b))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("request thread panicked"))
                .collect()
        });
        Ok(BatchResult {
            requests: results.into_iter().collect::<Result<_, _>>()?,
        })
    }
}
