//! The benchmark scenarios and their parameter grids.

use std::fmt;

use clap::ValueEnum;
use kvserve_server::api::Role;

use crate::report::Row;
use crate::stats::{latency_speedup, median, rate_speedup};
use crate::target::{CacheSetup, Target, TargetSpec};
use crate::workload::{BenchMessage, BenchRequest, ContentRng};
use crate::BenchError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, ValueEnum)]
pub enum Scenario {
    /// Aggregate decode throughput at 1..16 concurrent requests.
    Concurrency,
    /// Repeated multi-turn conversation about one image.
    MultiturnImage,
    /// TTFT with and without a cached 512-token prefix.
    TextPrefix,
    /// Cold vs cached latency across video frame counts.
    VideoFrames,
    /// Cold vs cached latency across image resolutions.
    ResolutionSweep,
    /// Turn-2 latency with each media cache component disabled.
    CacheAblation,
}

impl Scenario {
    pub const ALL: [Scenario; 6] = [
        Scenario::Concurrency,
        Scenario::MultiturnImage,
        Scenario::TextPrefix,
        Scenario::VideoFrames,
        Scenario::ResolutionSweep,
        Scenario::CacheAblation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Concurrency => "concurrency",
            Scenario::MultiturnImage => "multiturn-image",
            Scenario::TextPrefix => "text-prefix",
            Scenario::VideoFrames => "video-frames",
            Scenario::ResolutionSweep => "resolution-sweep",
            Scenario::CacheAblation => "cache-ablation",
        }
    }

    pub fn default_profile(self) -> &'static str {
        match self {
            Scenario::Concurrency => "qwen3-0.6b-sim",
            Scenario::TextPrefix => "qwen3-4b-sim",
            Scenario::VideoFrames | Scenario::ResolutionSweep => "qwen3-vl-4b-sim",
            Scenario::MultiturnImage | Scenario::CacheAblation => "qwen3-vl-8b-sim",
        }
    }

    /// The swept values, if the scenario has a numeric grid.
    pub fn default_grid(self) -> Option<&'static [u32]> {
        match self {
            Scenario::Concurrency => Some(&[1, 2, 4, 8, 16]),
            Scenario::VideoFrames => Some(&[4, 8, 16, 32, 64]),
            Scenario::ResolutionSweep => Some(&[224, 448, 768, 1024]),
            _ => None,
        }
    }

    fn grid_range(self) -> (u32, u32) {
        match self {
            Scenario::Concurrency => (1, 256),
            Scenario::VideoFrames => (1, 128),
            Scenario::ResolutionSweep => (28, 2048),
            _ => (0, 0),
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub warmup: usize,
    pub iterations: usize,
    pub seed: u64,
    /// Turns of the multi-turn scenario.
    pub turns: u32,
    /// Overrides [`Scenario::default_grid`].
    pub grid: Option<Vec<u32>>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            warmup: 3,
            iterations: 10,
            seed: 0,
            turns: 3,
            grid: None,
        }
    }
}

impl BenchConfig {
    fn grid(&self, scenario: Scenario) -> Result<Vec<u32>, BenchError> {
        let Some(default) = scenario.default_grid() else {
            if self.grid.is_some() {
                return Err(BenchError::InvalidParameter(format!("{scenario} takes no grid")));
            }
            return Ok(Vec::new());
        };
        let mut grid = self.grid.clone().unwrap_or_else(|| default.to_vec());
        grid.sort_unstable();
        grid.dedup();
        let (lo, hi) = scenario.grid_range();
        if grid.is_empty() || grid.iter().any(|&g| g < lo || g > hi) {
            return Err(BenchError::InvalidParameter(format!(
                "{scenario} grid values must lie in {lo}..={hi}"
            )));
        }
        if scenario == Scenario::Concurrency && grid[0] != 1 {
            grid.insert(0, 1);
        }
        Ok(grid)
    }

    fn validate(&self) -> Result<(), BenchError> {
        if self.iterations == 0 {
            return Err(BenchError::InvalidParameter("iterations must be at least 1".into()));
        }
        if !(1..=16).contains(&self.turns) {
            return Err(BenchError::InvalidParameter("turns must lie in 1..=16".into()));
        }
        Ok(())
    }

    /// Runs warmups, then returns the measured iterations' outputs. Each
    /// iteration gets its own content stream, so every iteration starts cold.
    fn iterate<T>(
        &self,
        group: u64,
        mut f: impl FnMut(ContentRng) -> Result<T, BenchError>,
    ) -> Result<Vec<T>, BenchError> {
        let mut out = Vec::with_capacity(self.iterations);
        for i in 0..(self.warmup + self.iterations) {
            let value = f(ContentRng::new(self.seed, (group << 32) | i as u64))?;
            if i >= self.warmup {
                out.push(value);
            }
        }
        Ok(out)
    }
}

/// Tokens per rendered prompt segment in the image workloads.
const IMAGE_TEXT_BEFORE: usize = 41;
const IMAGE_TEXT_AFTER: usize = 41;
const IMAGE_DECODE: u32 = 32;
const VIDEO_DECODE: u32 = 16;
const CONCURRENCY_PROMPT: usize = 32;
const CONCURRENCY_DECODE: u32 = 256;
const SHARED_PREFIX: usize = 512;
const PREFIX_QUESTION: usize = 32;
const PREFIX_DECODE: u32 = 8;

// Template framing, in tokens: "system\n" + text + "\n", "user\n" + text + "\n",
// "assistant\n".
const SYSTEM_FRAME: usize = 8;
const USER_OPEN: usize = 5;
const USER_CLOSE: usize = 1 + 10;

pub fn run_scenario(
    scenario: Scenario,
    target: &TargetSpec,
    config: &BenchConfig,
) -> Result<Vec<Row>, BenchError> {
    config.validate()?;
    let grid = config.grid(scenario)?;
    let profile = scenario.default_profile();
    match scenario {
        Scenario::Concurrency => {
            concurrency(target.connect(profile, CacheSetup::default())?.as_mut(), config, &grid)
        }
        Scenario::MultiturnImage => {
            multiturn(target.connect(profile, CacheSetup::default())?.as_mut(), config)
        }
        Scenario::TextPrefix => {
            text_prefix(target.connect(profile, CacheSetup::default())?.as_mut(), config)
        }
        Scenario::VideoFrames => cold_vs_cached(
            target.connect(profile, CacheSetup::default())?.as_mut(),
            config,
            scenario,
            &grid,
            video_request,
        ),
        Scenario::ResolutionSweep => cold_vs_cached(
            target.connect(profile, CacheSetup::default())?.as_mut(),
            config,
            scenario,
            &grid,
            resolution_request,
        ),
        Scenario::CacheAblation => ablation(target, config),
    }
}

fn row(scenario: Scenario, params: String, latency: &[f64], tps: &[f64], rps: &[f64], speedup: f64) -> Row {
    Row::new(
        scenario.name(),
        params,
        median(latency).unwrap_or(f64::NAN),
        median(tps).unwrap_or(f64::NAN),
        median(rps).unwrap_or(f64::NAN),
        speedup,
    )
}

/// Per-request latency, decode rate, and request rate.
fn single_metrics(latencies: &[f64], tokens: u32) -> (Vec<f64>, Vec<f64>) {
    let tps = latencies.iter().map(|l| 1000.0 * f64::from(tokens) / l).collect();
    let rps = latencies.iter().map(|l| 1000.0 / l).collect();
    (tps, rps)
}

fn concurrency(target: &mut dyn Target, config: &BenchConfig, grid: &[u32]) -> Result<Vec<Row>, BenchError> {
    struct Sample {
        latency: f64,
        tps: f64,
        rps: f64,
    }
    let mut measured = Vec::new();
    for (g, &level) in grid.iter().enumerate() {
        let samples = config.iterate(g as u64, |mut rng| {
            let requests: Vec<BenchRequest> = (0..level)
                .map(|_| {
                    let msg = BenchMessage::text(Role::User, rng.text(CONCURRENCY_PROMPT));
                    BenchRequest::new(vec![msg], CONCURRENCY_DECODE)
                })
                .collect();
            let batch = target.run_batch(&requests)?;
            let span_s = batch.makespan_ms() / 1000.0;
            let latencies: Vec<f64> = batch.requests.iter().map(|m| m.latency_ms()).collect();
            Ok(Sample {
                latency: median(&latencies).unwrap_or(f64::NAN),
                tps: batch.total_tokens() as f64 / span_s,
                rps: f64::from(level) / span_s,
            })
        })?;
        measured.push((level, samples));
    }
    let base_tps: Vec<f64> = measured[0].1.iter().map(|s| s.tps).collect();
    Ok(measured
        .iter()
        .map(|(level, samples)| {
            let latency: Vec<f64> = samples.iter().map(|s| s.latency).collect();
            let tps: Vec<f64> = samples.iter().map(|s| s.tps).collect();
            let rps: Vec<f64> = samples.iter().map(|s| s.rps).collect();
            let speedup = rate_speedup(&base_tps, &tps).unwrap_or(f64::NAN);
            row(Scenario::Concurrency, format!("concurrency={level}"), &latency, &tps, &rps, speedup)
        })
        .collect())
}

/// One user turn about a 1024x1024 image, framed by a short system prompt.
fn image_turn(rng: &mut ContentRng) -> BenchRequest {
    let system = rng.text(IMAGE_TEXT_BEFORE - SYSTEM_FRAME - USER_OPEN);
    let image = rng.noise_image(1024, 1024);
    let question = rng.text(IMAGE_TEXT_AFTER - USER_CLOSE);
    BenchRequest::new(
        vec![
            BenchMessage::text(Role::System, system),
            BenchMessage::with_images(Role::User, vec![image], question),
        ],
        IMAGE_DECODE,
    )
}

/// Latency of each identical resubmission of `request`.
fn turns(target: &mut dyn Target, request: &BenchRequest, n: u32) -> Result<Vec<f64>, BenchError> {
    (0..n).map(|_| Ok(target.run_one(request)?.latency_ms())).collect()
}

fn multiturn(target: &mut dyn Target, config: &BenchConfig) -> Result<Vec<Row>, BenchError> {
    let samples = config.iterate(0, |mut rng| turns(target, &image_turn(&mut rng), config.turns))?;
    let per_turn: Vec<Vec<f64>> = (0..config.turns as usize)
        .map(|t| samples.iter().map(|s| s[t]).collect())
        .collect();
    Ok(per_turn
        .iter()
        .enumerate()
        .map(|(t, lat)| {
            let (tps, rps) = single_metrics(lat, IMAGE_DECODE);
            let speedup = latency_speedup(&per_turn[0], lat).unwrap_or(f64::NAN);
            row(Scenario::MultiturnImage, format!("turn={}", t + 1), lat, &tps, &rps, speedup)
        })
        .collect())
}

fn text_prefix(target: &mut dyn Target, config: &BenchConfig) -> Result<Vec<Row>, BenchError> {
    let samples = config.iterate(0, |mut rng| {
        let system = rng.text(SHARED_PREFIX - SYSTEM_FRAME);
        let mut ask = |rng: &mut ContentRng| -> Result<f64, BenchError> {
            let req = BenchRequest::new(
                vec![
                    BenchMessage::text(Role::System, system.clone()),
                    BenchMessage::text(Role::User, rng.text(PREFIX_QUESTION)),
                ],
                PREFIX_DECODE,
            );
            Ok(target.run_one(&req)?.ttft_ms())
        };
        let cold = ask(&mut rng)?;
        let warm = ask(&mut rng)?;
        Ok((cold, warm))
    })?;
    let cold: Vec<f64> = samples.iter().map(|s| s.0).collect();
    let warm: Vec<f64> = samples.iter().map(|s| s.1).collect();
    let mk = |phase: &str, ttft: &[f64]| {
        let (tps, rps) = single_metrics(ttft, 1);
        let speedup = latency_speedup(&cold, ttft).unwrap_or(f64::NAN);
        row(
            Scenario::TextPrefix,
            format!("prefix={SHARED_PREFIX};phase={phase};metric=ttft"),
            ttft,
            &tps,
            &rps,
            speedup,
        )
    };
    Ok(vec![mk("cold", &cold), mk("cached", &warm)])
}

fn video_request(rng: &mut ContentRng, frames: u32) -> BenchRequest {
    let images = (0..frames).map(|_| rng.noise_image(448, 448)).collect();
    let question = rng.text(IMAGE_TEXT_AFTER - USER_CLOSE);
    BenchRequest::new(vec![BenchMessage::with_images(Role::User, images, question)], VIDEO_DECODE)
}

fn resolution_request(rng: &mut ContentRng, side: u32) -> BenchRequest {
    let image = rng.noise_image(side, side);
    let question = rng.text(IMAGE_TEXT_AFTER - USER_CLOSE);
    BenchRequest::new(vec![BenchMessage::with_images(Role::User, vec![image], question)], VIDEO_DECODE)
}

fn cold_vs_cached(
    target: &mut dyn Target,
    config: &BenchConfig,
    scenario: Scenario,
    grid: &[u32],
    make: impl Fn(&mut ContentRng, u32) -> BenchRequest,
) -> Result<Vec<Row>, BenchError> {
    let key = match scenario {
        Scenario::VideoFrames => "frames",
        _ => "resolution",
    };
    let mut rows = Vec::new();
    for (g, &value) in grid.iter().enumerate() {
        let samples = config.iterate(g as u64, |mut rng| turns(target, &make(&mut rng, value), 2))?;
        let cold: Vec<f64> = samples.iter().map(|s| s[0]).collect();
        let cached: Vec<f64> = samples.iter().map(|s| s[1]).collect();
        for (phase, lat) in [("cold", &cold), ("cached", &cached)] {
            let (tps, rps) = single_metrics(lat, VIDEO_DECODE);
            let speedup = latency_speedup(&cold, lat).unwrap_or(f64::NAN);
            rows.push(row(scenario, format!("{key}={value};phase={phase}"), lat, &tps, &rps, speedup));
        }
    }
    Ok(rows)
}

/// Cache configurations of the ablation, baseline first.
pub const ABLATION: [(&str, CacheSetup); 4] = [
    ("none", CacheSetup { embed_reuse: false, kv_reuse: false }),
    ("kv-only", CacheSetup { embed_reuse: false, kv_reuse: true }),
    ("embeddings-only", CacheSetup { embed_reuse: true, kv_reuse: false }),
    ("both", CacheSetup { embed_reuse: true, kv_reuse: true }),
];

fn ablation(target: &TargetSpec, config: &BenchConfig) -> Result<Vec<Row>, BenchError> {
    if !target.is_embedded() {
        return Err(BenchError::ScenarioFailed(
            "cache-ablation reconfigures the engine; run it without --target".into(),
        ));
    }
    let profile = Scenario::CacheAblation.default_profile();
    let mut turn2 = Vec::new();
    for (name, setup) in ABLATION {
        let mut t = target.connect(profile, setup)?;
        // Same seed and stream for every variant: identical images and text.
        let samples = config.iterate(0, |mut rng| Ok(turns(t.as_mut(), &image_turn(&mut rng), 2)?[1]))?;
        turn2.push((name, samples));
    }
    let baseline = turn2[0].1.clone();
    Ok(turn2
        .iter()
        .map(|(name, lat)| {
            let (tps, rps) = single_metrics(lat, IMAGE_DECODE);
            let speedup = latency_speedup(&baseline, lat).unwrap_or(f64::NAN);
            row(Scenario::CacheAblation, format!("reuse={name};turn=2"), lat, &tps, &rps, speedup)
        })
        .collect())
}
