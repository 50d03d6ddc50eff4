use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, ValueEnum};
use kvserve_bench::report::{summary_table, write_csv, write_svg};
use kvserve_bench::target::HttpTarget;
use kvserve_bench::target::Target;
use kvserve_bench::{run_scenario, BenchConfig, EmbeddedOptions, Scenario, TargetSpec};
use kvserve_core::backend::ModelProfile;

#[derive(Debug, Parser)]
#[command(name = "bench", version, about = "Reproduce kvserve benchmark scenarios")]
struct Cli {
    /// Scenario name, or `all`.
    #[arg(value_parser = parse_which)]
    scenario: Which,
    /// Base URL of a running server; omit to use an in-process engine on a
    /// simulated clock.
    #[arg(long)]
    target: Option<String>,
    /// Cost profile (preset or TOML path) for the in-process engine. With
    /// --target, the server must be running this model.
    #[arg(long)]
    profile: Option<String>,
    /// CSV file, or a directory when running `all`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write an SVG chart next to each CSV.
    #[arg(long)]
    plots: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    warmup: usize,
    #[arg(long, default_value_t = 10)]
    iterations: usize,
    /// Turns of `multiturn-image`.
    #[arg(long, default_value_t = 3)]
    turns: u32,
    /// Comma-separated grid override (concurrency levels, frame counts, or
    /// resolutions).
    #[arg(long, value_delimiter = ',')]
    grid: Option<Vec<u32>>,
    #[arg(long, default_value_t = 16)]
    max_batch_size: usize,
    #[arg(long, default_value_t = 536_870_912)]
    media_cache_bytes: u64,
    #[arg(long, default_value_t = 536_870_912)]
    text_cache_bytes: u64,
}

#[derive(Debug, Clone, Copy)]
enum Which {
    All,
    One(Scenario),
}

fn parse_which(s: &str) -> Result<Which, String> {
    if s == "all" {
        return Ok(Which::All);
    }
    Scenario::from_str(s, false).map(Which::One)
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let target = match &cli.target {
        Some(url) => {
            let http = HttpTarget::connect(url)?;
            if let Some(p) = &cli.profile {
                if p != http.model() {
                    bail!("server at {url} runs {}, not {p}", http.model());
                }
            }
            TargetSpec::Http {
                base_url: url.clone(),
            }
        }
        None => TargetSpec::Embedded(EmbeddedOptions {
            profile: cli
                .profile
                .as_deref()
                .map(ModelProfile::resolve)
                .transpose()
                .context("loading cost profile")?,
            max_batch_size: cli.max_batch_size,
            media_cache_bytes: cli.media_cache_bytes,
            text_cache_bytes: cli.text_cache_bytes,
        }),
    };
    let config = BenchConfig {
        warmup: cli.warmup,
        iterations: cli.iterations,
        seed: cli.seed,
        turns: cli.turns,
        grid: cli.grid.clone(),
    };

    let jobs: Vec<(Scenario, PathBuf)> = match cli.scenario {
        Which::One(s) => {
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from(format!("{s}.csv")));
            vec![(s, out)]
        }
        Which::All => {
            let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("bench-results"));
            std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            Scenario::ALL.iter().map(|&s| (s, dir.join(format!("{s}.csv")))).collect()
        }
    };
    for (scenario, out) in jobs {
        run_one(scenario, &target, &config, &out, cli.plots)?;
    }
    Ok(())
}

fn run_one(
    scenario: Scenario,
    target: &TargetSpec,
    config: &BenchConfig,
    out: &Path,
    plots: bool,
) -> anyhow::Result<()> {
    let rows = run_scenario(scenario, target, config).with_context(|| format!("running {scenario}"))?;
    write_csv(out, &rows).with_context(|| format!("writing {}", out.display()))?;
    print!("{}", summary_table(&rows));
    println!("wrote {}", out.display());
    if plots {
        let svg = out.with_extension("svg");
        write_svg(&svg, &rows).with_context(|| format!("writing {}", svg.display()))?;
        println!("wrote {}", svg.display());
    }
    println!();
    Ok(())
}
