//! Order statistics used for reporting.

/// Median of `xs`; the mean of the two middle values for even lengths.
pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() || xs.iter().any(|x| x.is_nan()) {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[mid]
    } else {
        (v[mid - 1] + v[mid]) / 2.0
    })
}

/// `median(baseline) / median(sample)` for latencies (higher is better).
pub fn latency_speedup(baseline: &[f64], sample: &[f64]) -> Option<f64> {
    Some(median(baseline)? / median(sample)?)
}

/// `median(sample) / median(baseline)` for rates (higher is better).
pub fn rate_speedup(baseline: &[f64], sample: &[f64]) -> Option<f64> {
    Some(median(sample)? / median(baseline)?)
}
