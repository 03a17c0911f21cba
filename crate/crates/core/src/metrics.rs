//! Per-run latency and throughput metrics.

use serde::{Deserialize, Serialize};

use crate::request::Request;

pub const REPORT_SCHEMA: u32 = 1;

/// Scheduler-side counters accumulated over a run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IterationCounters {
    pub iterations: u64,
    pub mode_switches: u64,
    pub spatial_iterations: u64,
    pub slo_risk_iterations: u64,
    pub wasted_decode_steps: u64,
}

impl IterationCounters {
    pub fn merge(&mut self, other: &IterationCounters) {
        self.iterations += other.iterations;
        self.mode_switches += other.mode_switches;
        self.spatial_iterations += other.spatial_iterations;
        self.slo_risk_iterations += other.slo_risk_iterations;
        self.wasted_decode_steps += other.wasted_decode_steps;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema: u32,
    pub mean_ttft_ms: Option<f64>,
    pub p50_ttft_ms: Option<f64>,
    pub p99_ttft_ms: Option<f64>,
    /// Mean over all pooled token gaps.
    pub mean_tbt_ms: Option<f64>,
    pub p99_tbt_ms: Option<f64>,
    /// Mean of per-request mean gaps.
    pub mean_tbt_per_request_ms: Option<f64>,
    pub request_throughput_rps: f64,
    /// Output tokens per second.
    pub token_throughput_tps: f64,
    pub completed: usize,
    pub duration_ms: f64,
    pub mode_switches: u64,
    pub spatial_iterations: u64,
    pub slo_risk_iterations: u64,
    pub wasted_decode_steps: u64,
}

/// Nearest-rank percentile of sorted samples; `None` when empty.
pub fn nearest_rank(sorted: &[f64], pct: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = ((pct / 100.0) * sorted.len() as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

fn mean(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        None
    } else {
        Some(xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

/// Builds the report from finished request timelines.
///
/// The serving duration runs from the earliest arrival to the last token
/// emitted by any request.
pub fn aggregate(requests: &[Request], counters: &IterationCounters) -> MetricsReport {
    let done: Vec<&Request> = requests.iter().filter(|r| r.is_finished()).collect();

    let mut ttft: Vec<f64> = done.iter().filter_map(|r| r.ttft_ms()).collect();
    ttft.sort_by(f64::total_cmp);
    let mut tbt: Vec<f64> = done.iter().flat_map(|r| r.tbt_samples()).collect();
    let per_request_tbt: Vec<f64> = done
        .iter()
        .filter_map(|r| {
            let gaps: Vec<f64> = r.tbt_samples().collect();
            mean(&gaps)
        })
        .collect();
    let mean_tbt = mean(&tbt);
    tbt.sort_by(f64::total_cmp);

    let start = requests
        .iter()
        .map(|r| r.arrival_ms)
        .fold(f64::INFINITY, f64::min);
    let end = requests
        .iter()
        .filter_map(|r| r.emissions.last().copied())
        .fold(f64::NEG_INFINITY, f64::max);
    let duration_ms = if end.is_finite() && start.is_finite() {
        (end - start).max(0.0)
    } else {
        0.0
    };
    let secs = duration_ms / 1000.0;
    let tokens: u64 = done.iter().map(|r| r.generated).sum();
    let (rps, tps) = if done.is_empty() || secs <= 0.0 {
        (0.0, 0.0)
    } else {
        (done.len() as f64 / secs, tokens as f64 / secs)
    };

    MetricsReport {
        schema: REPORT_SCHEMA,
        mean_ttft_ms: mean(&ttft),
        p50_ttft_ms: nearest_rank(&ttft, 50.0),
        p99_ttft_ms: nearest_rank(&ttft, 99.0),
        mean_tbt_ms: mean_tbt,
        p99_tbt_ms: nearest_rank(&tbt, 99.0),
        mean_tbt_per_request_ms: mean(&per_request_tbt),
        request_throughput_rps: rps,
        token_throughput_tps: tps,
        completed: done.len(),
        duration_ms,
        mode_switches: counters.mode_switches,
        spatial_iterations: counters.spatial_iterations,
        slo_risk_iterations: counters.slo_risk_iterations,
        wasted_decode_steps: counters.wasted_decode_steps,
    }
}
