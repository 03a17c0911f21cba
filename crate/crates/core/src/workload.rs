//! Trace ingestion and synthetic workload generation.
//!
//! Traces are JSONL with one `{"arrival_ms", "input_tokens", "output_tokens"}`
//! object per line. Synthetic workloads draw Poisson arrivals and prompt and
//! output lengths from constant, lognormal or empirical distributions. The
//! trace-like presets are stand-ins matched to published mean lengths of the
//! Azure code, Azure conversation and Mooncake conversation traces; they are
//! not the real traces.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub arrival_ms: f64,
    pub input_tokens: u64,
    pub output_tokens: u64,
}

impl TraceRecord {
    pub fn new(arrival_ms: f64, input_tokens: u64, output_tokens: u64) -> Self {
        TraceRecord {
            arrival_ms,
            input_tokens,
            output_tokens,
        }
    }

    fn check(&self) -> std::result::Result<(), String> {
        if self.input_tokens == 0 {
            return Err("input_tokens must be >= 1".into());
        }
        if self.output_tokens == 0 {
            return Err("output_tokens must be >= 1".into());
        }
        if !(self.arrival_ms >= 0.0 && self.arrival_ms.is_finite()) {
            return Err(format!("arrival_ms must be >= 0, got {}", self.arrival_ms));
        }
        Ok(())
    }
}

fn sort_by_arrival(records: &mut [TraceRecord]) {
    records.sort_by(|a, b| a.arrival_ms.total_cmp(&b.arrival_ms));
}

/// Parses JSONL trace text; `origin` names the source in error messages.
pub fn parse_trace_str(text: &str, origin: &Path) -> Result<Vec<TraceRecord>> {
    let mut records = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: origin.to_path_buf(),
            line: idx + 1,
            msg,
        };
        let rec: TraceRecord = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        rec.check().map_err(parse_err)?;
        records.push(rec);
    }
    if records.is_empty() {
        log::warn!("trace {} contains no records", origin.display());
    }
    sort_by_arrival(&mut records);
    Ok(records)
}

pub fn parse_trace(path: impl AsRef<Path>) -> Result<Vec<TraceRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_trace_str(&text, path)
}

pub fn write_trace(records: &[TraceRecord], mut out: impl Write) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_trace_file(records: &[TraceRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_trace(records, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Length distribution for prompts or outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum LengthDist {
    Constant { value: u64 },
    /// Lognormal with the given mean (in tokens) and log-space sigma,
    /// clamped to `[1, max]`.
    LogNormal { mean: f64, sigma: f64, max: u64 },
    /// Uniform draw from observed lengths.
    Empirical { values: Vec<u64> },
}

impl LengthDist {
    fn sampler(&self) -> Result<LengthSampler<'_>> {
        match self {
            LengthDist::Constant { value } => {
                if *value == 0 {
                    return Err(Error::config("constant length must be >= 1"));
                }
                Ok(LengthSampler::Constant(*value))
            }
            LengthDist::LogNormal { mean, sigma, max } => {
                if !(*mean >= 1.0) || !(*sigma >= 0.0) || *max == 0 {
                    return Err(Error::config(format!(
                        "bad lognormal (mean {mean}, sigma {sigma}, max {max})"
                    )));
                }
                let mu = mean.ln() - sigma * sigma / 2.0;
                let dist = LogNormal::new(mu, *sigma)
                    .map_err(|e| Error::config(format!("lognormal: {e}")))?;
                Ok(LengthSampler::LogNormal(dist, *max))
            }
            LengthDist::Empirical { values } => {
                if values.is_empty() || values.contains(&0) {
                    return Err(Error::config("empirical lengths must be non-empty and >= 1"));
                }
                Ok(LengthSampler::Empirical(values))
            }
        }
    }
}

enum LengthSampler<'a> {
    Constant(u64),
    LogNormal(LogNormal<f64>, u64),
    Empirical(&'a [u64]),
}

impl LengthSampler<'_> {
    fn sample(&self, rng: &mut impl Rng) -> u64 {
        match self {
            LengthSampler::Constant(v) => *v,
            LengthSampler::LogNormal(d, max) => (d.sample(rng).round() as u64).clamp(1, *max),
            LengthSampler::Empirical(values) => values[rng.random_range(0..values.len())],
        }
    }
}

/// Synthetic workload description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub qps: f64,
    pub count: usize,
    pub isl: LengthDist,
    pub osl: LengthDist,
    pub seed: u64,
}

/// Poisson arrivals at `qps` with i.i.d. lengths. Deterministic per seed.
pub fn synth_poisson(spec: &WorkloadSpec) -> Result<Vec<TraceRecord>> {
    if !(spec.qps > 0.0 && spec.qps.is_finite()) {
        return Err(Error::config(format!("qps must be positive, got {}", spec.qps)));
    }
    let isl = spec.isl.sampler()?;
    let osl = spec.osl.sampler()?;
    let gaps = Exp::new(spec.qps / 1000.0).map_err(|e| Error::config(format!("exp: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut t = 0.0;
    let mut out = Vec::with_capacity(spec.count);
    for _ in 0..spec.count {
        t += gaps.sample(&mut rng);
        let input_tokens = isl.sample(&mut rng);
        let output_tokens = osl.sample(&mut rng);
        out.push(TraceRecord::new(t, input_tokens, output_tokens));
    }
    Ok(out)
}

/// Requests per second implied by the records, `n / last_arrival`.
pub fn observed_qps(records: &[TraceRecord]) -> Option<f64> {
    let last = records.iter().map(|r| r.arrival_ms).fold(0.0, f64::max);
    if records.is_empty() || last <= 0.0 {
        None
    } else {
        Some(records.len() as f64 / (last / 1000.0))
    }
}

/// Stretches or compresses arrival offsets so the trace runs at `target_qps`.
pub fn rescale_qps(records: &[TraceRecord], target_qps: f64) -> Result<Vec<TraceRecord>> {
    if !(target_qps > 0.0 && target_qps.is_finite()) {
        return Err(Error::config(format!(
            "target qps must be positive, got {target_qps}"
        )));
    }
    let Some(observed) = observed_qps(records) else {
        return Err(Error::config(
            "cannot rescale a trace whose arrivals span zero time",
        ));
    };
    let factor = observed / target_qps;
    Ok(records
        .iter()
        .map(|r| TraceRecord {
            arrival_ms: r.arrival_ms * factor,
            ..*r
        })
        .collect())
}

/// Replaces arrival times with fresh Poisson arrivals, keeping lengths.
pub fn regen_arrivals(records: &[TraceRecord], qps: f64, seed: u64) -> Result<Vec<TraceRecord>> {
    if !(qps > 0.0 && qps.is_finite()) {
        return Err(Error::config(format!("qps must be positive, got {qps}")));
    }
    let gaps = Exp::new(qps / 1000.0).map_err(|e| Error::config(format!("exp: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = 0.0;
    Ok(records
        .iter()
        .map(|r| {
            t += gaps.sample(&mut rng);
            TraceRecord { arrival_ms: t, ..*r }
        })
        .collect())
}

/// Published mean shapes used for the synthetic stand-ins.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceLike {
    AzureCode,
    AzureConv,
    Mooncake,
    /// Fixed 8000-token prompts with 200 output tokens.
    LongPrefillBench,
}

impl TraceLike {
    pub fn mean_lengths(self) -> (u64, u64) {
        match self {
            TraceLike::AzureCode => (2047, 28),
            TraceLike::AzureConv => (1155, 211),
            TraceLike::Mooncake => (12035, 343),
            TraceLike::LongPrefillBench => (8000, 200),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TraceLike::AzureCode => "azure-code",
            TraceLike::AzureConv => "azure-conv",
            TraceLike::Mooncake => "mooncake",
            TraceLike::LongPrefillBench => "long-prefill",
        }
    }

    /// Constant-at-mean workload.
    pub fn constant(self, qps: f64, count: usize, seed: u64) -> WorkloadSpec {
        let (isl, osl) = self.mean_lengths();
        WorkloadSpec {
            qps,
            count,
            isl: LengthDist::Constant { value: isl },
            osl: LengthDist::Constant { value: osl },
            seed,
        }
    }

    /// Mean-matched lognormal workload, lengths capped at `max_len`.
    pub fn lognormal(self, qps: f64, count: usize, seed: u64, sigma: f64, max_len: u64) -> WorkloadSpec {
        let (isl, osl) = self.mean_lengths();
        WorkloadSpec {
            qps,
            count,
            isl: LengthDist::LogNormal {
                mean: isl as f64,
                sigma,
                max: max_len,
            },
            osl: LengthDist::LogNormal {
                mean: osl as f64,
                sigma,
                max: max_len,
            },
            seed,
        }
    }
}

impl std::str::FromStr for TraceLike {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "azure-code" => Ok(TraceLike::AzureCode),
            "azure-conv" => Ok(TraceLike::AzureConv),
            "mooncake" => Ok(TraceLike::Mooncake),
            "long-prefill" => Ok(TraceLike::LongPrefillBench),
            other => Err(format!(
                "unknown trace shape '{other}' (azure-code, azure-conv, mooncake, long-prefill)"
            )),
        }
    }
}
