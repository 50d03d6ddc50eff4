use kvserve_bench::report::to_csv;
use kvserve_bench::scenario::ABLATION;
use kvserve_bench::{run_scenario, BenchConfig, BenchError, EmbeddedOptions, Row, Scenario, TargetSpec};
use kvserve_core::backend::ModelProfile;

fn embedded() -> TargetSpec {
    TargetSpec::Embedded(EmbeddedOptions::default())
}

fn quick(grid: Option<Vec<u32>>) -> BenchConfig {
    BenchConfig {
        warmup: 1,
        iterations: 3,
        grid,
        ..BenchConfig::default()
    }
}

fn speedups(rows: &[Row]) -> Vec<f64> {
    rows.iter().map(|r| r.speedup).collect()
}

#[test]
fn concurrency_ratio_tracks_closed_form() {
    let rows = run_scenario(Scenario::Concurrency, &embedded(), &quick(Some(vec![16]))).unwrap();
    assert_eq!(rows[0].params, "concurrency=1");
    assert_eq!(rows[1].params, "concurrency=16");
    let predicted = ModelProfile::preset("qwen3-0.6b-sim").unwrap().cost.predicted_scaling(16);
    assert!((rows[1].speedup / predicted - 1.0).abs() < 0.10, "{} vs {predicted}", rows[1].speedup);
}

#[test]
fn multiturn_speedups_are_ordered() {
    let rows = run_scenario(Scenario::MultiturnImage, &embedded(), &quick(None)).unwrap();
    let s = speedups(&rows);
    assert_eq!(s.len(), 3);
    assert_eq!(s[0], 1.0);
    assert!(s[2] >= s[1] && s[1] > s[0], "{s:?}");
}

#[test]
fn ablation_ordering() {
    let rows = run_scenario(Scenario::CacheAblation, &embedded(), &quick(None)).unwrap();
    let names: Vec<&str> = ABLATION.iter().map(|a| a.0).collect();
    assert_eq!(names, ["none", "kv-only", "embeddings-only", "both"]);
    let s = speedups(&rows);
    assert_eq!(s[0], 1.0);
    assert!(s[3] > s[2] && s[2] > s[1] && s[1] > 1.0, "{s:?}");
}

#[test]
fn same_seed_gives_byte_identical_csv() {
    let config = quick(Some(vec![4, 8]));
    let a = to_csv(&run_scenario(Scenario::VideoFrames, &embedded(), &config).unwrap()).unwrap();
    let b = to_csv(&run_scenario(Scenario::VideoFrames, &embedded(), &config).unwrap()).unwrap();
    assert_eq!(a, b);
    let other = BenchConfig { seed: 5, grid: None, ..config };
    let rows = run_scenario(Scenario::TextPrefix, &embedded(), &other).unwrap();
    assert_eq!(rows.len(), 2);
}

#[test]
fn invalid_parameters_are_rejected() {
    let bad = [
        (Scenario::VideoFrames, quick(Some(vec![0]))),
        (Scenario::ResolutionSweep, quick(Some(vec![4096]))),
        (Scenario::TextPrefix, quick(Some(vec![1]))),
        (Scenario::Concurrency, BenchConfig { iterations: 0, ..quick(None) }),
        (Scenario::MultiturnImage, BenchConfig { turns: 0, ..quick(None) }),
    ];
    for (s, config) in bad {
        assert!(matches!(
            run_scenario(s, &embedded(), &config),
            Err(BenchError::InvalidParameter(_))
        ));
    }
}

#[test]
fn unreachable_target() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    drop(listener);
    let spec = TargetSpec::Http { base_url: url };
    let err = run_scenario(Scenario::Concurrency, &spec, &quick(None)).unwrap_err();
    assert!(matches!(err, BenchError::TargetUnreachable { .. }), "{err}");
}
