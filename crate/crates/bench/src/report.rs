//! CSV output, the stdout summary, and optional SVG charts.

use std::fmt::Write as _;
use std::path::Path;

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::BenchError;

/// One CSV record; field order is the column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub scenario: String,
    pub params: String,
    pub latency_ms: f64,
    pub tokens_per_sec: f64,
    pub requests_per_sec: f64,
    pub speedup: f64,
}

impl Row {
    /// Values are rounded to 1e-3 so reports stay readable and stable.
    pub fn new(
        scenario: &str,
        params: String,
        latency_ms: f64,
        tokens_per_sec: f64,
        requests_per_sec: f64,
        speedup: f64,
    ) -> Self {
        let r = |x: f64| (x * 1000.0).round() / 1000.0;
        Self {
            scenario: scenario.to_string(),
            params,
            latency_ms: r(latency_ms),
            tokens_per_sec: r(tokens_per_sec),
            requests_per_sec: r(requests_per_sec),
            speedup: r(speedup),
        }
    }
}

pub fn to_csv(rows: &[Row]) -> Result<Vec<u8>, BenchError> {
    if rows.is_empty() {
        return Err(BenchError::EmptyResults);
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)?;
    }
    w.into_inner().map_err(|e| BenchError::Io(e.into_error()))
}

/// Writes `rows` to `path`; nothing is created for an empty set.
pub fn write_csv(path: &Path, rows: &[Row]) -> Result<(), BenchError> {
    let bytes = to_csv(rows)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<Row>, BenchError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

/// Fixed-width table for the terminal.
pub fn summary_table(rows: &[Row]) -> String {
    let width = rows.iter().map(|r| r.params.len()).max().unwrap_or(0).max(6);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<17} {:<width$} {:>12} {:>12} {:>10} {:>9}",
        "scenario", "params", "latency_ms", "tok/s", "req/s", "speedup"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<17} {:<width$} {:>12.1} {:>12.1} {:>10.3} {:>8.2}x",
            r.scenario, r.params, r.latency_ms, r.tokens_per_sec, r.requests_per_sec, r.speedup
        );
    }
    out
}

/// Line chart of speedup (throughput for `concurrency`) across the rows.
pub fn write_svg(path: &Path, rows: &[Row]) -> Result<(), BenchError> {
    if rows.is_empty() {
        return Err(BenchError::EmptyResults);
    }
    let throughput = rows[0].scenario == "concurrency";
    let (label, ys): (&str, Vec<f64>) = if throughput {
        ("tokens/s", rows.iter().map(|r| r.tokens_per_sec).collect())
    } else {
        ("speedup (x)", rows.iter().map(|r| r.speedup).collect())
    };
    let y_max = ys.iter().copied().filter(|y| y.is_finite()).fold(1.0, f64::max) * 1.1;
    let n = rows.len();
    let plot = |path: &Path| -> Result<(), Box<dyn std::error::Error>> {
        let root = SVGBackend::new(path, (200 + 90 * n as u32, 420)).into_drawing_area();
        root.fill(&WHITE)?;
        let mut chart = ChartBuilder::on(&root)
            .caption(&rows[0].scenario, ("sans-serif", 20))
            .margin(16)
            .x_label_area_size(90)
            .y_label_area_size(70)
            .build_cartesian_2d(-0.5f64..(n as f64 - 0.5), 0.0..y_max)?;
        chart
            .configure_mesh()
            .x_labels(n)
            .x_label_formatter(&|x| {
                let i = x.round();
                if (x - i).abs() < 1e-6 && i >= 0.0 && (i as usize) < n {
                    rows[i as usize].params.clone()
                } else {
                    String::new()
                }
            })
            .y_desc(label)
            .draw()?;
        chart.draw_series(LineSeries::new(
            ys.iter().enumerate().map(|(i, &y)| (i as f64, y)),
            &BLUE,
        ))?;
        chart.draw_series(
            ys.iter()
                .enumerate()
                .map(|(i, &y)| Circle::new((i as f64, y), 4, BLUE.filled())),
        )?;
        root.present()?;
        Ok(())
    };
    plot(path).map_err(|e| BenchError::Plot(e.to_string()))
}
