use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::domain::{millis_to_nanos, Timestamp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TimeMode {
    /// Costs advance a virtual clock; nothing sleeps.
    #[default]
    Simulated,
    /// Costs are slept for real, scaled by the clock's time scale.
    WallClock,
}

/// Engine time source that backend costs are charged to.
#[derive(Debug)]
pub struct Clock {
    inner: Inner,
}

#[derive(Debug)]
enum Inner {
    Simulated {
        now_ns: AtomicU64,
    },
    Wall {
        origin: Instant,
        scale: f64,
        // Sleeping to an absolute deadline absorbs oversleep from earlier charges.
        deadline: Mutex<Instant>,
    },
}

impl Clock {
    pub fn simulated() -> Self {
        Self {
            inner: Inner::Simulated {
                now_ns: AtomicU64::new(0),
            },
        }
    }

    /// Wall-clock mode. A charge of `c` ms sleeps `c * scale` ms of real time,
    /// and `now()` reports real elapsed time divided by `scale`, so reported
    /// engine times stay in unscaled model milliseconds.
    pub fn wall(scale: f64) -> Self {
        assert!(scale > 0.0 && scale.is_finite(), "time scale must be positive");
        let origin = Instant::now();
        Self {
            inner: Inner::Wall {
                origin,
                scale,
                deadline: Mutex::new(origin),
            },
        }
    }

    pub fn for_mode(mode: TimeMode, scale: f64) -> Self {
        match mode {
            TimeMode::Simulated => Self::simulated(),
            TimeMode::WallClock => Self::wall(scale),
        }
    }

    pub fn mode(&self) -> TimeMode {
        match self.inner {
            Inner::Simulated { .. } => TimeMode::Simulated,
            Inner::Wall { .. } => TimeMode::WallClock,
        }
    }

    pub fn now(&self) -> Timestamp {
        match &self.inner {
            Inner::Simulated { now_ns } => Timestamp(now_ns.load(Ordering::Acquire)),
            Inner::Wall { origin, scale, .. } => {
                let real = origin.elapsed().as_nanos() as f64;
                Timestamp((real / scale).round() as u64)
            }
        }
    }

    pub fn charge_millis(&self, ms: f64) {
        let ns = millis_to_nanos(ms);
        if ns == 0 {
            return;
        }
        match &self.inner {
            Inner::Simulated { now_ns } => {
                now_ns.fetch_add(ns, Ordering::AcqRel);
            }
            Inner::Wall {
                scale, deadline, ..
            } => {
                let real = Duration::from_nanos((ns as f64 * scale).round() as u64);
                let target = {
                    let mut d = deadline.lock().unwrap_or_else(|e| e.into_inner());
                    let base = (*d).max(Instant::now());
                    *d = base + real;
                    *d
                };
                sleep_until(target);
            }
        }
    }

    /// Moves time forward to `t` if it lies in the future.
    pub fn advance_to(&self, t: Timestamp) {
        match &self.inner {
            Inner::Simulated { now_ns } => {
                now_ns.fetch_max(t.0, Ordering::AcqRel);
            }
            Inner::Wall { origin, scale, .. } => {
                let real = Duration::from_nanos((t.0 as f64 * scale).round() as u64);
                sleep_until(*origin + real);
            }
        }
    }
}

fn sleep_until(target: Instant) {
    let now = Instant::now();
    if target > now {
        std::thread::sleep(target - now);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simulated_charges_are_exact() {
        let clock = Clock::simulated();
        for _ in 0..1000 {
            clock.charge_millis(0.36);
        }
        assert_eq!(clock.now(), Timestamp(360_000_000));
        clock.advance_to(Timestamp(10));
        assert_eq!(clock.now(), Timestamp(360_000_000));
        clock.advance_to(Timestamp(400_000_000));
        assert_eq!(clock.now(), Timestamp(400_000_000));
    }

    #[test]
    fn wall_clock_sleeps_scaled() {
        let clock = Clock::wall(0.1);
        let start = Instant::now();
        clock.charge_millis(100.0);
        let real = start.elapsed();
        assert!(real >= Duration::from_millis(10), "{real:?}");
        assert!(real < Duration::from_millis(200), "{real:?}");
        // Reported in model time.
        assert!(clock.now().as_millis_f64() >= 100.0);
    }
}
