//! Runs an [`Engine`] on a dedicated thread.
//!
//! The engine thread owns the batch and both caches. Other threads talk to
//! it through an [`EngineHandle`]: requests go in over a channel together
//! with an [`EventSink`], and the thread pushes each request's events into
//! its sink. When there is nothing to do the thread blocks on the channel.

use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use super::{Engine, EngineError, EngineEvent, EngineStats};
use crate::backend::{Backend, Clock, TimeMode};
use crate::domain::{GenerationRequest, RequestId, Timestamp};

/// Receives the events of one request. Returning false means the receiver
/// has gone away, and the request is cancelled.
pub trait EventSink: Send {
    fn send(&mut self, event: EngineEvent) -> bool;
}

impl EventSink for Sender<EngineEvent> {
    fn send(&mut self, event: EngineEvent) -> bool {
        Sender::send(self, event).is_ok()
    }
}

impl<F> EventSink for F
where
    F: FnMut(EngineEvent) -> bool + Send,
{
    fn send(&mut self, event: EngineEvent) -> bool {
        self(event)
    }
}

enum Command {
    Submit(GenerationRequest, Box<dyn EventSink>),
    Cancel(RequestId),
    Shutdown { drain: bool },
}

struct Shared {
    /// Submitted but not yet admitted (or dropped).
    pending: AtomicUsize,
    queue_bound: Option<usize>,
    shutting_down: AtomicBool,
    next_id: AtomicU64,
    stats: Mutex<EngineStats>,
    clock: Arc<Clock>,
}

#[derive(Clone)]
pub struct EngineHandle {
    tx: Sender<Command>,
    shared: Arc<Shared>,
    thread: Arc<Mutex<Option<JoinHandle<()>>>>,
}

impl std::fmt::Debug for EngineHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EngineHandle")
            .field("pending", &self.shared.pending.load(Ordering::Relaxed))
            .finish_non_exhaustive()
    }
}

/// Moves `engine` onto its own thread.
pub fn spawn<B: Backend + 'static>(engine: Engine<B>) -> EngineHandle {
    let (tx, rx) = mpsc::channel();
    let shared = Arc::new(Shared {
        pending: AtomicUsize::new(0),
        queue_bound: engine.config().queue_bound,
        shutting_down: AtomicBool::new(false),
        next_id: AtomicU64::new(1),
        stats: Mutex::new(engine.stats()),
        clock: Arc::clone(engine.backend().clock()),
    });
    let worker_shared = Arc::clone(&shared);
    let thread = std::thread::Builder::new()
        .name("engine".into())
        .spawn(move || Worker::new(engine, rx, worker_shared).run())
        .expect("spawning engine thread");
    EngineHandle {
        tx,
        shared,
        thread: Arc::new(Mutex::new(Some(thread))),
    }
}

impl EngineHandle {
    /// Engine clock time, for stamping arrivals.
    pub fn now(&self) -> Timestamp {
        self.shared.clock.now()
    }

    pub fn clock(&self) -> &Arc<Clock> {
        &self.shared.clock
    }

    pub fn next_request_id(&self) -> RequestId {
        RequestId(self.shared.next_id.fetch_add(1, Ordering::Relaxed))
    }

    /// Hands a request to the engine thread without waiting for it.
    /// Validation errors arrive through the sink as a `Failed` event.
    pub fn submit(
        &self,
        request: GenerationRequest,
        sink: impl EventSink + 'static,
    ) -> Result<(), EngineError> {
        if self.shared.shutting_down.load(Ordering::Acquire) {
            return Err(EngineError::ShuttingDown);
        }
        let bound = self.shared.queue_bound.unwrap_or(usize::MAX);
        let reserved = self
            .shared
            .pending
            .fetch_update(Ordering::AcqRel, Ordering::Acquire, |n| (n < bound).then_some(n + 1));
        if reserved.is_err() {
            return Err(EngineError::QueueFull);
        }
        self.tx
            .send(Command::Submit(request, Box::new(sink)))
            .map_err(|_| {
                self.shared.pending.fetch_sub(1, Ordering::AcqRel);
                EngineError::ShuttingDown
            })
    }

    pub fn cancel(&self, id: RequestId) {
        let _ = self.tx.send(Command::Cancel(id));
    }

    pub fn stats(&self) -> EngineStats {
        self.shared
            .stats
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .clone()
    }

    pub fn is_shutting_down(&self) -> bool {
        self.shared.shutting_down.load(Ordering::Acquire)
    }

    /// Stops accepting requests. With `drain`, queued and running requests
    /// finish first; otherwise they fail with `ShuttingDown`. Blocks until
    /// the engine thread exits.
    pub fn shutdown(&self, drain: bool) {
        self.shared.shutting_down.store(true, Ordering::Release);
        let _ = self.tx.send(Command::Shutdown { drain });
        let thread = self.thread.lock().unwrap_or_else(|e| e.into_inner()).take();
        if let Some(t) = thread {
            let _ = t.join();
        }
    }
}

struct Worker<B: Backend> {
    engine: Engine<B>,
    rx: Receiver<Command>,
    shared: Arc<Shared>,
    sinks: HashMap<RequestId, Box<dyn EventSink>>,
    queued: HashSet<RequestId>,
    shutdown: Option<bool>,
}

impl<B: Backend> Worker<B> {
    fn new(engine: Engine<B>, rx: Receiver<Command>, shared: Arc<Shared>) -> Self {
        Self {
            engine,
            rx,
            shared,
            sinks: HashMap::new(),
            queued: HashSet::new(),
            shutdown: None,
        }
    }

    fn run(mut self) {
        loop {
            if self.engine.is_idle() && self.shutdown.is_none() {
                match self.rx.recv() {
                    Ok(cmd) => self.handle(cmd),
                    Err(_) => break,
                }
            } else if self.engine.active().is_empty()
                && self.shutdown.is_none()
                && self.shared.clock.mode() == TimeMode::WallClock
            {
                // Only future arrivals queued on a wall clock: wait for them
                // or for new commands, whichever comes first.
                if let Some(next) = self.engine.next_arrival() {
                    let wait = next.saturating_sub(self.engine.now());
                    if wait > Timestamp::ZERO {
                        match self.rx.recv_timeout(Duration::from_nanos(wait.0).min(Duration::from_millis(50))) {
                            Ok(cmd) => self.handle(cmd),
                            Err(RecvTimeoutError::Timeout) => {}
                            Err(RecvTimeoutError::Disconnected) => break,
                        }
                    }
                }
            }
            while let Ok(cmd) = self.rx.try_recv() {
                self.handle(cmd);
            }
            match self.shutdown {
                Some(false) => {
                    let events = self.engine.abort_all();
                    self.dispatch(events);
                    break;
                }
                Some(true) if self.engine.is_idle() => break,
                _ => {}
            }
            let events = self.engine.run_iteration();
            // Stats first, so a client that just got its answer sees them.
            self.publish_stats();
            self.dispatch(events);
        }
        self.publish_stats();
    }

    fn handle(&mut self, cmd: Command) {
        match cmd {
            Command::Submit(request, mut sink) => {
                let id = request.id;
                if self.shutdown.is_some() {
                    self.shared.pending.fetch_sub(1, Ordering::AcqRel);
                    let at = self.engine.now();
                    sink.send(EngineEvent::Failed {
                        id,
                        error: EngineError::ShuttingDown,
                        at,
                    });
                    return;
                }
                match self.engine.submit(request) {
                    Ok(()) => {
                        self.sinks.insert(id, sink);
                        self.queued.insert(id);
                    }
                    Err(error) => {
                        self.shared.pending.fetch_sub(1, Ordering::AcqRel);
                        let at = self.engine.now();
                        sink.send(EngineEvent::Failed { id, error, at });
                    }
                }
            }
            Command::Cancel(id) => self.cancel(id),
            Command::Shutdown { drain } => self.shutdown = Some(drain),
        }
    }

    fn cancel(&mut self, id: RequestId) {
        if self.engine.cancel(id) {
            self.unqueue(id);
            self.sinks.remove(&id);
        }
    }

    fn unqueue(&mut self, id: RequestId) {
        if self.queued.remove(&id) {
            self.shared.pending.fetch_sub(1, Ordering::AcqRel);
        }
    }

    fn dispatch(&mut self, events: Vec<EngineEvent>) {
        let mut gone = Vec::new();
        for event in events {
            let id = event.request_id();
            if matches!(event, EngineEvent::Admitted { .. }) || event.is_terminal() {
                self.unqueue(id);
            }
            let terminal = event.is_terminal();
            let alive = match self.sinks.get_mut(&id) {
                Some(sink) => sink.send(event),
                None => continue,
            };
            if terminal {
                self.sinks.remove(&id);
            } else if !alive {
                gone.push(id);
            }
        }
        for id in gone {
            self.cancel(id);
        }
    }

    fn publish_stats(&self) {
        let stats = self.engine.stats();
        *self.shared.stats.lock().unwrap_or_else(|e| e.into_inner()) = stats;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{ModelProfile, SimBackend};
    use crate::domain::TokenId;
    use crate::scheduler::EngineConfig;

    fn handle(config: EngineConfig) -> EngineHandle {
        let backend = SimBackend::with_clock(ModelProfile::free("t"), Arc::new(Clock::simulated()));
        spawn(Engine::new(backend, config))
    }

    fn request(id: u64, n: u32) -> GenerationRequest {
        GenerationRequest::text(id, vec![TokenId(1), TokenId(2)], n, TokenId(256)).ignoring_eos()
    }

    #[test]
    fn events_reach_their_sinks() {
        let h = handle(EngineConfig::uncached(4));
        let mut rxs = Vec::new();
        for id in 1..=6 {
            let (tx, rx) = mpsc::channel();
            h.submit(request(id, 5), tx).unwrap();
            rxs.push(rx);
        }
        for (i, rx) in rxs.into_iter().enumerate() {
            let events: Vec<EngineEvent> = rx.iter().take_while(|e| !e.is_terminal()).collect();
            assert!(events.iter().all(|e| e.request_id() == RequestId(i as u64 + 1)));
            assert_eq!(events.iter().filter(|e| matches!(e, EngineEvent::Token { .. })).count(), 5);
        }
        h.shutdown(true);
        assert_eq!(h.stats().completed, 6);
        assert!(matches!(h.submit(request(9, 1), |_| true), Err(EngineError::ShuttingDown)));
    }

    #[test]
    fn invalid_request_fails_through_sink() {
        let h = handle(EngineConfig::uncached(1));
        let (tx, rx) = mpsc::channel();
        h.submit(request(1, 0), tx).unwrap();
        assert!(matches!(rx.recv().unwrap(), EngineEvent::Failed { error: EngineError::Invalid(_), .. }));
        h.shutdown(false);
    }

    #[test]
    fn dropped_receiver_cancels() {
        let h = handle(EngineConfig::uncached(1));
        let (tx, rx) = mpsc::channel();
        drop(rx);
        h.submit(request(1, 1_000_000), tx).unwrap();
        let (tx2, rx2) = mpsc::channel();
        h.submit(request(2, 1), tx2).unwrap();
        let last = rx2.iter().find(|e| e.is_terminal()).unwrap();
        assert!(matches!(last, EngineEvent::Finished(_)));
        h.shutdown(true);
    }

    #[test]
    fn abort_on_shutdown_without_drain() {
        let mut p = ModelProfile::free("t");
        p.cost.step_base = 1.0;
        let backend = SimBackend::with_clock(p, Arc::new(Clock::wall(0.01)));
        let h = spawn(Engine::new(backend, EngineConfig::uncached(1)));
        let (tx, rx) = mpsc::channel();
        h.submit(request(1, 100_000), tx).unwrap();
        std::thread::sleep(Duration::from_millis(20));
        h.shutdown(false);
        let last = rx.iter().find(|e| e.is_terminal()).unwrap();
        assert!(matches!(last, EngineEvent::Failed { error: EngineError::ShuttingDown, .. }));
    }
}
