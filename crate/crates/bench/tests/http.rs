use clap::Parser;
use kvserve_bench::{run_scenario, BenchConfig, BenchError, Scenario, TargetSpec};
use kvserve_server::{serve_on, AppState, ServerConfig};

/// Runs a sim-clock server on a background runtime; returns its base URL.
fn start_server(args: &[&str]) -> (String, tokio::sync::oneshot::Sender<()>, std::thread::JoinHandle<()>) {
    let config = ServerConfig::parse_from(std::iter::once("kvserve").chain(args.iter().copied()));
    let (url_tx, url_rx) = std::sync::mpsc::channel();
    let (stop_tx, stop_rx) = tokio::sync::oneshot::channel::<()>();
    let thread = std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            url_tx.send(format!("http://{}", listener.local_addr().unwrap())).unwrap();
            let state = AppState::start(&config).unwrap();
            serve_on(listener, state, async {
                let _ = stop_rx.await;
            })
            .await
            .unwrap();
        });
    });
    (url_rx.recv().unwrap(), stop_tx, thread)
}

#[test]
fn scenarios_run_against_a_live_server() {
    let (url, stop, thread) = start_server(&["--cost-profile", "qwen3-vl-8b-sim"]);
    let spec = TargetSpec::Http { base_url: url };
    let config = BenchConfig {
        warmup: 0,
        iterations: 2,
        ..BenchConfig::default()
    };

    let rows = run_scenario(Scenario::MultiturnImage, &spec, &config).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows[2].speedup >= rows[1].speedup && rows[1].speedup > 1.0, "{rows:?}");

    let grid = BenchConfig {
        grid: Some(vec![4]),
        ..config.clone()
    };
    let rows = run_scenario(Scenario::Concurrency, &spec, &grid).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows[1].tokens_per_sec > rows[0].tokens_per_sec);

    assert!(matches!(
        run_scenario(Scenario::CacheAblation, &spec, &config),
        Err(BenchError::ScenarioFailed(_))
    ));
    stop.send(()).unwrap();
    thread.join().unwrap();
}
