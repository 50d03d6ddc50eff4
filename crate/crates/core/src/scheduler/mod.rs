//! Continuous-batching engine.
//!
//! Each [`Engine::run_iteration`] is one pass of the serving loop:
//!
//! 1. admit queued requests in FIFO order while the batch has room;
//! 2. prefill every newly admitted request, consulting the caches;
//! 3. run one batched decode step, giving every active slot one token;
//! 4. retire finished slots at once, so the next admission sees their room.
//!
//! Steps are numbered from zero. A request admitted before step `a` is part
//! of step `a` and, if it produces `n` tokens, leaves after step `a + n - 1`.

mod queue;
mod runtime;

use serde::Serialize;
use thiserror::Error;

use crate::backend::{Backend, BackendError, PrefillItem, Tokenizer};
use crate::domain::{
    ContentDigest, GenerationRequest, InvalidRequest, KVState, RequestId, Timestamp, TokenId,
    VisionEmbedding,
};
use crate::media_cache::{composite_digest, MediaCache, MediaCacheConfig, MediaCacheStats};
use crate::text_cache::{TextCacheConfig, TextCacheStats, TextPrefixCache};
use crate::TimeMode;

pub use self::queue::PendingQueue;
pub use self::runtime::{spawn, EngineHandle, EventSink};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EngineConfig {
    pub max_batch_size: usize,
    pub text_cache: Option<TextCacheConfig>,
    pub media_cache: Option<MediaCacheConfig>,
    /// Maximum number of queued (not yet admitted) requests.
    pub queue_bound: Option<usize>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            max_batch_size: 16,
            text_cache: Some(TextCacheConfig::default()),
            media_cache: Some(MediaCacheConfig::default()),
            queue_bound: None,
        }
    }
}

impl EngineConfig {
    /// No caches; every request is prefilled from scratch.
    pub fn uncached(max_batch_size: usize) -> Self {
        Self {
            max_batch_size,
            text_cache: None,
            media_cache: None,
            queue_bound: None,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EngineError {
    #[error("request queue is full")]
    QueueFull,
    #[error("engine is shutting down")]
    ShuttingDown,
    #[error("invalid request: {0}")]
    Invalid(#[from] InvalidRequest),
    #[error("request id {0} is already queued")]
    DuplicateId(RequestId),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("encoding media item {index}: {source}")]
    Encoder { index: usize, source: BackendError },
    #[error("request was cancelled")]
    Cancelled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotState {
    Prefilling,
    Decoding,
    Complete,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    /// The model produced the end-of-sequence token.
    Stop,
    /// `max_new_tokens` reached.
    Length,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RequestTimings {
    pub arrival: Timestamp,
    pub admitted: Timestamp,
    pub first_token: Timestamp,
    pub finished: Timestamp,
}

impl RequestTimings {
    pub fn ttft_ms(&self) -> f64 {
        self.first_token.saturating_sub(self.arrival).as_millis_f64()
    }

    pub fn latency_ms(&self) -> f64 {
        self.finished.saturating_sub(self.arrival).as_millis_f64()
    }
}

/// A retired request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub id: RequestId,
    pub output: Vec<TokenId>,
    pub finish_reason: FinishReason,
    pub timings: RequestTimings,
    pub admitted_at_step: u64,
    pub finished_at_step: u64,
    /// Context positions in the prompt (image patches count as positions).
    pub prompt_positions: u64,
    /// Prompt positions restored from a cache rather than prefilled.
    pub cached_positions: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EngineEvent {
    Admitted {
        id: RequestId,
        step: u64,
        at: Timestamp,
    },
    Token {
        id: RequestId,
        token: TokenId,
        index: usize,
        at: Timestamp,
    },
    Finished(Completion),
    Failed {
        id: RequestId,
        error: EngineError,
        at: Timestamp,
    },
}

impl EngineEvent {
    pub fn request_id(&self) -> RequestId {
        match self {
            EngineEvent::Admitted { id, .. }
            | EngineEvent::Token { id, .. }
            | EngineEvent::Failed { id, .. } => *id,
            EngineEvent::Finished(c) => c.id,
        }
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self, EngineEvent::Finished(_) | EngineEvent::Failed { .. })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EngineStats {
    pub queued: usize,
    pub active: usize,
    pub steps: u64,
    pub completed: u64,
    pub failed: u64,
    pub generated_tokens: u64,
    pub prompt_positions: u64,
    pub cached_positions: u64,
    pub clock_ms: f64,
    pub text_cache: Option<TextCacheStats>,
    pub media_cache: Option<MediaCacheStats>,
}

#[derive(Debug, Clone)]
pub struct BatchSlot {
    pub request: GenerationRequest,
    pub kv: KVState,
    pub output: Vec<TokenId>,
    pub admitted_at_step: u64,
    pub state: SlotState,
    admitted_at: Timestamp,
    first_token_at: Option<Timestamp>,
    prompt_positions: u64,
    cached_positions: u64,
    pinned: Vec<ContentDigest>,
}

impl BatchSlot {
    fn stop_reason(&self, token: TokenId) -> Option<FinishReason> {
        if token == self.request.eos_token && !self.request.ignore_eos {
            Some(FinishReason::Stop)
        } else if self.output.len() >= self.request.max_new_tokens as usize {
            Some(FinishReason::Length)
        } else {
            None
        }
    }
}

struct Prefilled {
    kv: KVState,
    prompt_positions: u64,
    cached_positions: u64,
    pinned: Vec<ContentDigest>,
}

pub struct Engine<B: Backend> {
    backend: B,
    config: EngineConfig,
    queue: PendingQueue,
    batch: Vec<BatchSlot>,
    text_cache: Option<TextPrefixCache>,
    media_cache: Option<MediaCache>,
    step: u64,
    stats: EngineStats,
}

impl<B: Backend> Engine<B> {
    pub fn new(backend: B, config: EngineConfig) -> Self {
        assert!(config.max_batch_size >= 1, "max_batch_size must be >= 1");
        Self {
            text_cache: config.text_cache.map(TextPrefixCache::new),
            media_cache: config.media_cache.map(MediaCache::new),
            backend,
            config,
            queue: PendingQueue::new(),
            batch: Vec::new(),
            step: 0,
            stats: EngineStats::default(),
        }
    }

    pub fn backend(&self) -> &B {
        &self.backend
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn now(&self) -> Timestamp {
        self.backend.clock().now()
    }

    /// Index of the next decode step.
    pub fn current_step(&self) -> u64 {
        self.step
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    pub fn active(&self) -> &[BatchSlot] {
        &self.batch
    }

    pub fn is_idle(&self) -> bool {
        self.batch.is_empty() && self.queue.is_empty()
    }

    pub fn next_arrival(&self) -> Option<Timestamp> {
        self.queue.next_arrival()
    }

    pub fn text_cache(&self) -> Option<&TextPrefixCache> {
        self.text_cache.as_ref()
    }

    pub fn media_cache(&self) -> Option<&MediaCache> {
        self.media_cache.as_ref()
    }

    pub fn stats(&self) -> EngineStats {
        EngineStats {
            queued: self.queue.len(),
            active: self.batch.len(),
            steps: self.step,
            clock_ms: self.now().as_millis_f64(),
            text_cache: self.text_cache.as_ref().map(TextPrefixCache::stats),
            media_cache: self.media_cache.as_ref().map(MediaCache::stats),
            ..self.stats.clone()
        }
    }

    /// Enqueues a request. Never blocks.
    pub fn submit(&mut self, request: GenerationRequest) -> Result<(), EngineError> {
        request.validate(self.backend.tokenizer().image_placeholder())?;
        if let Some(bound) = self.config.queue_bound {
            if self.queue.len() >= bound {
                return Err(EngineError::QueueFull);
            }
        }
        self.queue
            .push(request)
            .map_err(|r| EngineError::DuplicateId(r.id))
    }

    /// Drops a queued or running request. Returns false if it is unknown.
    pub fn cancel(&mut self, id: RequestId) -> bool {
        if self.queue.remove(id).is_some() {
            return true;
        }
        if let Some(pos) = self.batch.iter().position(|s| s.request.id == id) {
            let slot = self.batch.remove(pos);
            self.release(&slot.pinned);
            return true;
        }
        false
    }

    /// Fails every queued and running request with `ShuttingDown`.
    pub fn abort_all(&mut self) -> Vec<EngineEvent> {
        let at = self.now();
        let mut ids: Vec<RequestId> = self.batch.iter().map(|s| s.request.id).collect();
        ids.extend(self.queue.drain().map(|r| r.id));
        for slot in std::mem::take(&mut self.batch) {
            self.release(&slot.pinned);
        }
        self.stats.failed += ids.len() as u64;
        ids.into_iter()
            .map(|id| EngineEvent::Failed {
                id,
                error: EngineError::ShuttingDown,
                at,
            })
            .collect()
    }

    /// Runs iterations until queue and batch are empty.
    pub fn run_to_completion(&mut self) -> Vec<EngineEvent> {
        let mut events = Vec::new();
        while !self.is_idle() {
            events.extend(self.run_iteration());
        }
        events
    }

    /// One admit / prefill / step / retire pass.
    ///
    /// With nothing running and only future arrivals queued, a simulated
    /// clock jumps to the next arrival; a wall clock returns immediately and
    /// leaves waiting to the caller.
    pub fn run_iteration(&mut self) -> Vec<EngineEvent> {
        let mut events = Vec::new();
        if self.batch.is_empty() {
            if let Some(next) = self.queue.next_arrival() {
                let clock = self.backend.clock();
                if next > clock.now() && clock.mode() == TimeMode::Simulated {
                    clock.advance_to(next);
                }
            }
        }
        self.admit(&mut events);
        if !self.batch.is_empty() {
            self.decode_step(&mut events);
        }
        events
    }

    fn admit(&mut self, events: &mut Vec<EngineEvent>) {
        let mut burst = Vec::new();
        while self.batch.len() + burst.len() < self.config.max_batch_size {
            match self.queue.pop_ready(self.now()) {
                Some(r) => burst.push(r),
                None => break,
            }
        }
        for request in burst {
            let id = request.id;
            let admitted_at = self.now();
            events.push(EngineEvent::Admitted {
                id,
                step: self.step,
                at: admitted_at,
            });
            match self.prefill(&request) {
                Ok(p) => {
                    self.stats.prompt_positions += p.prompt_positions;
                    self.stats.cached_positions += p.cached_positions;
                    self.batch.push(BatchSlot {
                        request,
                        kv: p.kv,
                        output: Vec::new(),
                        admitted_at_step: self.step,
                        state: SlotState::Decoding,
                        admitted_at,
                        first_token_at: None,
                        prompt_positions: p.prompt_positions,
                        cached_positions: p.cached_positions,
                        pinned: p.pinned,
                    });
                }
                Err(error) => {
                    self.stats.failed += 1;
                    events.push(EngineEvent::Failed {
                        id,
                        error,
                        at: self.now(),
                    });
                }
            }
        }
    }

    fn prefill(&mut self, request: &GenerationRequest) -> Result<Prefilled, EngineError> {
        if request.media.is_empty() {
            self.prefill_text(request)
        } else {
            self.prefill_multimodal(request)
        }
    }

    fn charge_restore(&self, positions: u64) {
        let cost = self.backend.cost_model().kv_restore_per_token * positions as f64;
        self.backend.clock().charge_millis(cost);
    }

    fn prefill_text(&mut self, request: &GenerationRequest) -> Result<Prefilled, EngineError> {
        let prompt = &request.prompt_tokens;
        let items: Vec<PrefillItem> = prompt.iter().map(|&t| PrefillItem::Token(t)).collect();
        let Some(cache) = self.text_cache.as_mut() else {
            let kv = self.backend.prefill(None, &items)?;
            return Ok(Prefilled {
                kv,
                prompt_positions: prompt.len() as u64,
                cached_positions: 0,
                pinned: Vec::new(),
            });
        };

        let hit = cache.lookup_prefix(prompt);
        let boundaries = cache.boundaries(prompt.len(), hit.start);
        let offsets: Vec<usize> = boundaries.iter().map(|b| b - hit.start).collect();
        self.charge_restore(hit.start as u64);
        let (kv, snapshots) =
            self.backend
                .prefill_with_snapshots(hit.kv.as_ref(), &items[hit.start..], &offsets)?;
        if !boundaries.is_empty() {
            let pairs: Vec<(usize, KVState)> = boundaries.into_iter().zip(snapshots).collect();
            if let Some(cache) = self.text_cache.as_mut() {
                cache.insert(prompt, &pairs);
            }
        }
        Ok(Prefilled {
            kv,
            prompt_positions: prompt.len() as u64,
            cached_positions: hit.start as u64,
            pinned: Vec::new(),
        })
    }

    fn encode_all(&mut self, request: &GenerationRequest) -> Result<(Vec<VisionEmbedding>, Vec<ContentDigest>, bool, bool), EngineError> {
        let backend = &self.backend;
        let mut encoded = 0usize;
        let mut encode = |img: &_| {
            encoded += 1;
            backend.encode_image(img)
        };
        let result = match self.media_cache.as_mut() {
            Some(cache) => {
                let r = cache
                    .get_or_encode(&request.media, &mut encode)
                    .map_err(|f| EngineError::Encoder {
                        index: f.index,
                        source: f.error,
                    })?;
                let first = r.any_first_reuse();
                let embs = r.items.iter().map(|l| l.embedding).collect();
                (embs, r.pinned, first)
            }
            None => {
                let mut embs = Vec::with_capacity(request.media.len());
                for (index, item) in request.media.iter().enumerate() {
                    embs.push(
                        encode(&item.decoded)
                            .map_err(|source| EngineError::Encoder { index, source })?,
                    );
                }
                (embs, Vec::new(), false)
            }
        };
        Ok((result.0, result.1, result.2, encoded > 0))
    }

    fn prefill_multimodal(&mut self, request: &GenerationRequest) -> Result<Prefilled, EngineError> {
        let placeholder = self.backend.tokenizer().image_placeholder();
        let (embeddings, mut pinned, mut first_reuse, encoded_any) = self.encode_all(request)?;
        if encoded_any {
            let cost = self.backend.cost_model().vision_per_request;
            self.backend.clock().charge_millis(cost);
        }

        let mut images = embeddings.iter();
        let items: Vec<PrefillItem> = request
            .prompt_tokens
            .iter()
            .map(|&t| match (t == placeholder).then(|| images.next()).flatten() {
                Some(e) => PrefillItem::Image(*e),
                None => PrefillItem::Token(t),
            })
            .collect();
        let prompt_positions: u64 = items.iter().map(PrefillItem::positions).sum();
        // Validation guarantees at least one placeholder here.
        let split = request.last_placeholder(placeholder).map_or(0, |i| i + 1);

        let digests: Vec<ContentDigest> = request.media.iter().map(|m| m.digest()).collect();
        let key = composite_digest(&digests, &request.prompt_tokens[..split]);
        let kv_hit = self.media_cache.as_mut().and_then(|c| c.lookup_kv(&key));

        let result = match kv_hit {
            Some(hit) => {
                first_reuse |= hit.first_reuse;
                self.charge_restore(hit.kv.token_count());
                self.backend
                    .prefill(Some(&hit.kv), &items[split..])
                    .map(|kv| (kv, hit.kv.token_count()))
            }
            None => self
                .backend
                .prefill_with_snapshots(None, &items, &[split])
                .map(|(kv, snaps)| {
                    if let Some(cache) = self.media_cache.as_mut() {
                        cache.store_kv(key, snaps[0]);
                    }
                    (kv, 0)
                }),
        };
        let (kv, cached_positions) = match result {
            Ok(r) => r,
            Err(e) => {
                self.release(&pinned);
                return Err(e.into());
            }
        };
        if let Some(cache) = self.media_cache.as_mut() {
            if cache.pin(&key) {
                pinned.push(key);
            }
        }
        if first_reuse {
            let cost = self.backend.cost_model().first_hit_overhead;
            self.backend.clock().charge_millis(cost);
        }
        Ok(Prefilled {
            kv,
            prompt_positions,
            cached_positions,
            pinned,
        })
    }

    fn release(&mut self, pinned: &[ContentDigest]) {
        if let Some(cache) = self.media_cache.as_mut() {
            cache.release(pinned);
        }
    }

    fn decode_step(&mut self, events: &mut Vec<EngineEvent>) {
        let step = self.step;
        let kvs: Vec<&KVState> = self.batch.iter().map(|s| &s.kv).collect();
        let results = self.backend.batched_step(&kvs);
        let at = self.now();
        self.step += 1;

        let mut retired = Vec::new();
        for (i, (slot, result)) in self.batch.iter_mut().zip(results).enumerate() {
            match result {
                Ok((token, kv)) => {
                    slot.kv = kv;
                    slot.output.push(token);
                    slot.first_token_at.get_or_insert(at);
                    self.stats.generated_tokens += 1;
                    events.push(EngineEvent::Token {
                        id: slot.request.id,
                        token,
                        index: slot.output.len() - 1,
                        at,
                    });
                    if let Some(reason) = slot.stop_reason(token) {
                        slot.state = SlotState::Complete;
                        retired.push((i, Ok(reason)));
                    }
                }
                Err(e) => retired.push((i, Err(e))),
            }
        }

        let mut done = Vec::with_capacity(retired.len());
        for (i, outcome) in retired.into_iter().rev() {
            let slot = self.batch.remove(i);
            self.release(&slot.pinned);
            let id = slot.request.id;
            let event = match outcome {
                Ok(finish_reason) => {
                    self.stats.completed += 1;
                    EngineEvent::Finished(Completion {
                        id,
                        finish_reason,
                        timings: RequestTimings {
                            arrival: slot.request.arrival_time,
                            admitted: slot.admitted_at,
                            first_token: slot.first_token_at.unwrap_or(at),
                            finished: at,
                        },
                        admitted_at_step: slot.admitted_at_step,
                        finished_at_step: step,
                        prompt_positions: slot.prompt_positions,
                        cached_positions: slot.cached_positions,
                        output: slot.output,
                    })
                }
                Err(e) => {
                    self.stats.failed += 1;
                    EngineEvent::Failed {
                        id,
                        error: e.into(),
                        at,
                    }
                }
            };
            done.push(event);
        }
        events.extend(done.into_iter().rev());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{Clock, ModelProfile, SimBackend};
    use crate::domain::{CanonicalImage, MediaItem};
    use std::sync::Arc;

    const EOS: TokenId = TokenId(256);

    fn free_backend() -> SimBackend {
        SimBackend::with_clock(ModelProfile::free("t"), Arc::new(Clock::simulated()))
    }

    fn stepped_backend() -> SimBackend {
        let mut p = ModelProfile::free("t");
        p.cost.step_base = 1.0;
        SimBackend::with_clock(p, Arc::new(Clock::simulated()))
    }

    fn req(id: u64, len: u32) -> GenerationRequest {
        GenerationRequest::text(id, vec![TokenId(id as u32 + 1), TokenId(7)], len, EOS)
            .ignoring_eos()
    }

    fn finished(events: &[EngineEvent]) -> Vec<Completion> {
        events
            .iter()
            .filter_map(|e| match e {
                EngineEvent::Finished(c) => Some(c.clone()),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn three_requests_two_slots() {
        let mut e = Engine::new(stepped_backend(), EngineConfig::uncached(2));
        for id in 1..=3 {
            e.submit(req(id, 3)).unwrap();
        }
        let done = finished(&e.run_to_completion());
        let steps: Vec<(u64, u64, u64)> = done
            .iter()
            .map(|c| (c.id.0, c.admitted_at_step, c.finished_at_step))
            .collect();
        assert_eq!(steps, vec![(1, 0, 2), (2, 0, 2), (3, 3, 5)]);
        assert_eq!(e.now(), Timestamp::from_millis(6));
    }

    #[test]
    fn batch_never_exceeds_limit() {
        let mut e = Engine::new(free_backend(), EngineConfig::uncached(4));
        for id in 0..10 {
            e.submit(req(id, 1 + id as u32 % 5)).unwrap();
        }
        while !e.is_idle() {
            e.run_iteration();
            assert!(e.active().len() <= 4);
        }
    }

    #[test]
    fn eos_stops_early() {
        let backend = free_backend();
        // Find a prompt whose greedy continuation hits EOS within a few tokens.
        let prompt = (0u32..)
            .map(|i| vec![TokenId(i % 256), TokenId(i / 256)])
            .find(|p| {
                let mut kv = backend.prefill(None, &p.iter().map(|&t| PrefillItem::Token(t)).collect::<Vec<_>>()).unwrap();
                for _ in 0..3 {
                    let (t, next) = backend.generate_token(&kv).unwrap();
                    if t == EOS {
                        return true;
                    }
                    kv = next;
                }
                false
            })
            .unwrap();
        let mut e = Engine::new(backend, EngineConfig::uncached(1));
        e.submit(GenerationRequest::text(1, prompt, 10, EOS)).unwrap();
        let c = &finished(&e.run_to_completion())[0];
        assert_eq!(c.finish_reason, FinishReason::Stop);
        assert_eq!(c.output.last(), Some(&EOS));
        assert!(c.output.len() <= 3);
    }

    #[test]
    fn idle_clock_jumps_to_arrival() {
        let mut e = Engine::new(stepped_backend(), EngineConfig::uncached(1));
        e.submit(req(1, 2).arriving_at(Timestamp::from_millis(100))).unwrap();
        let c = &finished(&e.run_to_completion())[0];
        assert_eq!(c.timings.admitted, Timestamp::from_millis(100));
        assert_eq!(c.timings.finished, Timestamp::from_millis(102));
    }

    #[test]
    fn queue_bound_and_validation() {
        let mut e = Engine::new(
            free_backend(),
            EngineConfig {
                queue_bound: Some(1),
                ..EngineConfig::uncached(1)
            },
        );
        e.submit(req(1, 1)).unwrap();
        assert_eq!(e.submit(req(2, 1)), Err(EngineError::QueueFull));
        let bad = GenerationRequest::text(3, vec![TokenId(257)], 1, EOS);
        assert!(matches!(e.submit(bad), Err(EngineError::Invalid(_))));
    }

    #[test]
    fn context_overflow_fails_only_that_slot() {
        let mut p = ModelProfile::free("t");
        p.max_context = 4;
        let b = SimBackend::with_clock(p, Arc::new(Clock::simulated()));
        let mut e = Engine::new(b, EngineConfig::uncached(2));
        e.submit(GenerationRequest::text(1, vec![TokenId(1); 3], 5, EOS).ignoring_eos())
            .unwrap();
        e.submit(GenerationRequest::text(2, vec![TokenId(2)], 2, EOS).ignoring_eos())
            .unwrap();
        let events = e.run_to_completion();
        let failed: Vec<RequestId> = events
            .iter()
            .filter_map(|ev| match ev {
                EngineEvent::Failed { id, error: EngineError::Backend(BackendError::ContextOverflow { .. }), .. } => Some(*id),
                _ => None,
            })
            .collect();
        assert_eq!(failed, vec![RequestId(1)]);
        assert_eq!(finished(&events)[0].id, RequestId(2));
    }

    #[test]
    fn cancel_releases_slot() {
        let mut e = Engine::new(free_backend(), EngineConfig::uncached(1));
        e.submit(req(1, 100)).unwrap();
        e.submit(req(2, 1)).unwrap();
        e.run_iteration();
        assert!(e.cancel(RequestId(1)));
        assert!(!e.cancel(RequestId(1)));
        let done = finished(&e.run_to_completion());
        assert_eq!(done.len(), 1);
        assert_eq!(done[0].id, RequestId(2));
    }

    #[test]
    fn prefix_hit_matches_cold_output() {
        let prompt: Vec<TokenId> = (0..40).map(TokenId).collect();
        let mut cold = Engine::new(free_backend(), EngineConfig::uncached(1));
        cold.submit(GenerationRequest::text(1, prompt.clone(), 8, EOS).ignoring_eos()).unwrap();
        let reference = finished(&cold.run_to_completion())[0].output.clone();

        let mut e = Engine::new(free_backend(), EngineConfig::default());
        for id in 1..=2 {
            e.submit(GenerationRequest::text(id, prompt.clone(), 8, EOS).ignoring_eos()).unwrap();
            let c = &finished(&e.run_to_completion())[0];
            assert_eq!(c.output, reference);
            assert_eq!(c.cached_positions, if id == 1 { 0 } else { 40 });
        }
    }

    #[test]
    fn multimodal_second_turn_reuses_everything() {
        let img = CanonicalImage::new(56, 28, vec![9; 56 * 28 * 3]).unwrap();
        let mut prompt = vec![TokenId(1), TokenId(257)];
        prompt.extend([TokenId(5), TokenId(6)]);
        let make = |id| {
            GenerationRequest::text(id, prompt.clone(), 4, EOS)
                .ignoring_eos()
                .with_media(vec![MediaItem::inline(img.clone())])
        };
        let mut e = Engine::new(free_backend(), EngineConfig::default());
        e.submit(make(1)).unwrap();
        let first = finished(&e.run_to_completion()).remove(0);
        e.submit(make(2)).unwrap();
        let second = finished(&e.run_to_completion()).remove(0);
        assert_eq!(first.output, second.output);
        assert_eq!(first.prompt_positions, 1 + 2 + 2);
        assert_eq!(second.cached_positions, 3);
        assert_eq!(e.backend().encoder_calls(), 1);
        let s = e.media_cache().unwrap().stats();
        assert_eq!((s.hits, s.kv_hits), (1, 1));
        assert!(e.media_cache().unwrap().entries().all(|en| !e.media_cache().unwrap().is_pinned(&en.digest)));
    }
}
