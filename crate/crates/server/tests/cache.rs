mod common;

use std::time::Instant;

use common::*;
use reqwest::StatusCode;
use serde_json::{json, Value};

const VL: &str = "qwen3-vl-8b-sim";

fn counters(v: &Value) -> [u64; 4] {
    ["hits", "misses", "evictions", "bytes_resident"].map(|k| v[k].as_u64().unwrap())
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn fresh_server_reports_zeros() {
    let server = TestServer::start(&["--cost-profile", VL]).await;
    let stats = server.get_json("/admin/cache/stats").await;
    assert_eq!(counters(&stats["text_cache"]), [0; 4]);
    assert_eq!(counters(&stats["media_cache"]), [0; 4]);
    server.stop().await;

    let server = TestServer::start(&["--no-text-cache", "--no-media-cache"]).await;
    let stats = server.get_json("/admin/cache/stats").await;
    assert!(stats["text_cache"].is_null() && stats["media_cache"].is_null());
    server.stop().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn repeated_image_counts_one_hit_one_miss() {
    let server = TestServer::start(&["--cost-profile", VL]).await;
    let req = image_request(VL, &data_uri(&noise_png(1, 64, 64)), "What is shown?", 8);
    let first: Value = server.chat(&req).await.json().await.unwrap();
    let second: Value = server.chat(&req).await.json().await.unwrap();
    assert_eq!(first["choices"], second["choices"]);
    let m = &server.get_json("/admin/cache/stats").await["media_cache"];
    assert_eq!(m["hits"], 1);
    assert_eq!(m["misses"], 1);
    assert_eq!(m["evictions"], 0);
    server.stop().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn small_budget_forces_eviction() {
    // One 64x64 image is 16 patches of embeddings plus its prompt KV.
    let budget = 2_000_000u64;
    let server = TestServer::start(&[
        "--cost-profile",
        VL,
        "--media-cache-bytes",
        &budget.to_string(),
    ])
    .await;
    for seed in 0..4 {
        let req = image_request(VL, &data_uri(&noise_png(seed, 64, 64)), "Describe.", 2);
        assert_eq!(server.chat(&req).await.status(), StatusCode::OK);
    }
    let m = &server.get_json("/admin/cache/stats").await["media_cache"];
    assert!(m["evictions"].as_u64().unwrap() >= 1, "{m}");
    assert!(m["bytes_resident"].as_u64().unwrap() <= budget);
    assert_eq!(m["byte_budget"].as_u64().unwrap(), budget);
    server.stop().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn shared_system_prompt_hits_text_cache() {
    let server = TestServer::start(&[]).await;
    let system = "You are a careful assistant. ".repeat(20);
    for user in ["first question", "second question"] {
        let req = text_request("qwen3-0.6b-sim", &system, user, 4);
        assert_eq!(server.chat(&req).await.status(), StatusCode::OK);
    }
    let t = &server.get_json("/admin/cache/stats").await["text_cache"];
    assert_eq!(t["misses"], 1);
    assert_eq!(t["hits"], 1);
    server.stop().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn repeated_conversation_is_ten_times_faster_in_wall_mode() {
    let server = TestServer::start(&["--cost-profile", VL, "--time-mode", "wall", "--time-scale", "0.1"]).await;
    let uri = data_uri(&blocky_png(9, 1024, 1024, 64));
    let req = json!({
        "model": VL,
        "messages": [
            {"role": "user", "content": [
                {"type": "image_url", "image_url": {"url": uri}},
                {"type": "text", "text": "What is in this picture?"},
            ]},
            {"role": "assistant", "content": "A field of coloured noise."},
            {"role": "user", "content": "Which colour dominates?"},
        ],
        "max_tokens": 4,
    });
    let mut elapsed = Vec::new();
    for _ in 0..2 {
        let t = Instant::now();
        let resp = server.chat(&req).await;
        assert_eq!(resp.status(), StatusCode::OK);
        resp.bytes().await.unwrap();
        elapsed.push(t.elapsed().as_secs_f64());
    }
    assert!(elapsed[1] < elapsed[0] / 10.0, "{elapsed:?}");
    server.stop().await;
}
