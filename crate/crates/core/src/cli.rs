//! Command-line entry points.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::hwmodel::{kv_bytes_per_token, kv_capacity_blocks, kv_capacity_tokens, weight_bytes, HardwareProfile, ModelSpec};
use crate::metrics::{MetricsReport, REPORT_SCHEMA};
use crate::roofline::{BatchEntry, CostModel, FfnStyle, RooflineOptions};
use crate::scheduler::SchedulerConfig;
use crate::simulator::{self, DispatchOverheads, Policy, SimConfig, SimOutcome};
use crate::workload::{self, TraceLike, TraceRecord};

#[derive(Debug, Parser)]
#[command(name = "duetsim", version, about = "LLM serving simulator with adaptive prefill/decode SM partitioning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate one trace under one policy and write a JSON report.
    Run(RunArgs),
    /// Simulate a QPS range for several policies.
    Sweep(SweepArgs),
    /// Generate a synthetic trace.
    Gen(GenArgs),
    /// Print the latency breakdown of a batch read from JSONL.
    ExplainBatch(ExplainArgs),
    /// Check a model/hardware pair and print derived capacities.
    ValidateConfig(DeviceArgs),
}

/// Model, device and parallelism.
#[derive(Debug, Clone, Args)]
pub struct DeviceArgs {
    /// Model spec JSON, or builtin:qwen3-8b / builtin:qwen3-14b.
    #[arg(long, default_value = "builtin:qwen3-8b")]
    pub model: String,
    /// Hardware profile JSON, or builtin:h100.
    #[arg(long, default_value = "builtin:h100")]
    pub hw: String,
    /// Tensor-parallel degree.
    #[arg(long, default_value_t = 1)]
    pub tp: u32,
    /// Overrides the profile's memory utilization ratio.
    #[arg(long)]
    pub mem_util: Option<f64>,
    #[arg(long, default_value_t = 16)]
    pub block_size: u32,
    #[arg(long, default_value = "gated")]
    pub ffn_style: FfnStyle,
}

/// Scheduling knobs shared by `run` and `sweep`.
#[derive(Debug, Clone, Args)]
pub struct SchedArgs {
    #[command(flatten)]
    pub device: DeviceArgs,
    /// Request trace (JSONL).
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long, default_value_t = 8192)]
    pub token_budget: u64,
    #[arg(long, default_value_t = 100.0)]
    pub tbt_slo_ms: f64,
    #[arg(long, default_value_t = 1024)]
    pub max_batch: usize,
    #[arg(long, default_value_t = 32)]
    pub lookahead_cap: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Draw fresh Poisson arrivals instead of rescaling the trace's own.
    #[arg(long)]
    pub regen_arrivals: bool,
    #[arg(long, default_value_t = 0.5)]
    pub decode_launch_ms: f64,
    #[arg(long, default_value_t = 0.0)]
    pub prefill_launch_ms: f64,
    #[arg(long, default_value_t = 1.0)]
    pub scheduler_cpu_ms: f64,
    /// KV transfer bandwidth for disagg, bytes/s (default: NVLink).
    #[arg(long)]
    pub transfer_bw: Option<f64>,
    /// Independent engines fed round-robin.
    #[arg(long, default_value_t = 1)]
    pub replicas: u32,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub sched: SchedArgs,
    /// duet | chunked | static:<Sd> | disagg
    #[arg(long, default_value = "duet")]
    pub policy: Policy,
    /// Target arrival rate; the trace is rescaled (or regenerated) to it.
    #[arg(long)]
    pub qps: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub iter_log: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub sched: SchedArgs,
    /// Inclusive range A..B with optional :step (default 1).
    #[arg(long)]
    pub qps: QpsRange,
    #[arg(long, value_delimiter = ',', default_value = "duet,chunked")]
    pub policies: Vec<Policy>,
    /// Directory for per-point reports and sweep.csv.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub trace_like: TraceLike,
    #[arg(long)]
    pub qps: f64,
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Draw lognormal lengths around the trace means instead of constants.
    #[arg(long)]
    pub lognormal: bool,
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    #[arg(long, default_value_t = 32_768)]
    pub max_len: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ExplainArgs {
    #[command(flatten)]
    pub device: DeviceArgs,
    /// JSONL of {"q":..,"c":..,"phase":..} entries.
    #[arg(long)]
    pub batch: PathBuf,
    /// Active TPCs (default: whole device).
    #[arg(long)]
    pub tpcs: Option<u32>,
}

/// Inclusive arithmetic QPS grid.
#[derive(Debug, Clone, PartialEq)]
pub struct QpsRange {
    pub start: f64,
    pub end: f64,
    pub step: f64,
}

impl QpsRange {
    pub fn points(&self) -> Vec<f64> {
        let n = ((self.end - self.start) / self.step + 1e-9).floor() as usize;
        (0..=n).map(|i| self.start + i as f64 * self.step).collect()
    }
}

impl std::str::FromStr for QpsRange {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (range, step) = match s.split_once(':') {
            Some((r, st)) => (r, st.parse::<f64>().map_err(|e| format!("bad step: {e}"))?),
            None => (s, 1.0),
        };
        let (a, b) = match range.split_once("..") {
            Some((a, b)) => (
                a.parse::<f64>().map_err(|e| format!("bad start: {e}"))?,
                b.parse::<f64>().map_err(|e| format!("bad end: {e}"))?,
            ),
            None => {
                let v = range.parse::<f64>().map_err(|e| format!("bad qps: {e}"))?;
                (v, v)
            }
        };
        if !(a > 0.0 && b >= a && step > 0.0) {
            return Err(format!("need 0 < A <= B and step > 0, got '{s}'"));
        }
        Ok(QpsRange { start: a, end: b, step })
    }
}

pub fn load_model(arg: &str) -> Result<ModelSpec> {
    match arg.strip_prefix("builtin:") {
        Some("qwen3-8b") => Ok(ModelSpec::qwen3_8b_like()),
        Some("qwen3-14b") => Ok(ModelSpec::qwen3_14b_like()),
        Some(other) => Err(Error::config(format!("unknown builtin model '{other}'"))),
        None => ModelSpec::from_json_file(arg),
    }
}

pub fn load_profile(arg: &str) -> Result<HardwareProfile> {
    match arg.strip_prefix("builtin:") {
        Some("h100") => Ok(HardwareProfile::h100_like()),
        Some(other) => Err(Error::config(format!("unknown builtin profile '{other}'"))),
        None => HardwareProfile::from_json_file(arg),
    }
}

fn build_model(d: &DeviceArgs) -> Result<CostModel> {
    let spec = load_model(&d.model)?;
    let mut profile = load_profile(&d.hw)?;
    if let Some(u) = d.mem_util {
        profile.mem_util_ratio = u;
    }
    let opts = RooflineOptions {
        ffn: d.ffn_style,
        ..RooflineOptions::default()
    };
    CostModel::new(spec, profile, d.tp, opts)
}

fn sim_config(a: &SchedArgs) -> SimConfig {
    SimConfig {
        scheduler: SchedulerConfig {
            token_budget: a.token_budget,
            tbt_slo: a.tbt_slo_ms / 1000.0,
            max_batch_size: a.max_batch,
            lookahead_cap: a.lookahead_cap,
        },
        overheads: DispatchOverheads {
            decode_launch: a.decode_launch_ms,
            prefill_launch: a.prefill_launch_ms,
            scheduler_cpu: a.scheduler_cpu_ms,
        },
        block_size: a.device.block_size,
        transfer_bw: a.transfer_bw,
    }
}

fn shape_trace(records: &[TraceRecord], qps: Option<f64>, a: &SchedArgs) -> Result<Vec<TraceRecord>> {
    match qps {
        None if a.regen_arrivals => Err(Error::config("--regen-arrivals needs --qps")),
        None => Ok(records.to_vec()),
        Some(q) if a.regen_arrivals => workload::regen_arrivals(records, q, a.seed),
        Some(q) => workload::rescale_qps(records, q),
    }
}

fn simulate(records: &[TraceRecord], model: &CostModel, cfg: &SimConfig, policy: Policy, replicas: u32) -> Result<SimOutcome> {
    if policy == Policy::Disagg && model.tp != 1 {
        return Err(Error::config("disagg models one GPU per phase; use --tp 1"));
    }
    if replicas == 1 {
        simulator::run(records, model, cfg, policy)
    } else {
        simulator::run_replicated(records, model, cfg, policy, replicas)
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut f = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    serde_json::to_writer_pretty(&mut f, value)?;
    writeln!(f).and_then(|_| f.flush()).map_err(|e| Error::io(path, e))
}

fn write_iter_log(path: &Path, out: &SimOutcome) -> Result<()> {
    let mut f = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    for rec in &out.iterations {
        serde_json::to_writer(&mut f, rec)?;
        writeln!(f).map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

fn cmd_run(a: &RunArgs) -> Result<()> {
    let model = build_model(&a.sched.device)?;
    let cfg = sim_config(&a.sched);
    a.policy.validate(model.total_tpcs())?;
    let records = shape_trace(&workload::parse_trace(&a.sched.trace)?, a.qps, &a.sched)?;
    let out = simulate(&records, &model, &cfg, a.policy, a.sched.replicas)?;
    log::info!(
        "{}: {} requests, {} iterations, {} spatial",
        a.policy,
        out.report.completed,
        out.counters.iterations,
        out.counters.spatial_iterations
    );
    write_json(&a.out, &out.report)?;
    if let Some(p) = &a.iter_log {
        write_iter_log(p, &out)?;
    }
    Ok(())
}

fn report_name(policy: Policy, qps: f64) -> String {
    format!("{}_qps{qps}.json", policy.label().replace(':', "-"))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn cmd_sweep(a: &SweepArgs) -> Result<()> {
    let model = build_model(&a.sched.device)?;
    let cfg = sim_config(&a.sched);
    for p in &a.policies {
        p.validate(model.total_tpcs())?;
    }
    let base = workload::parse_trace(&a.sched.trace)?;
    fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;

    let points: Vec<(f64, Policy)> = a
        .qps
        .points()
        .into_iter()
        .flat_map(|q| a.policies.iter().map(move |&p| (q, p)))
        .collect();
    let reports: Vec<(f64, Policy, MetricsReport)> = points
        .par_iter()
        .map(|&(q, p)| {
            let records = shape_trace(&base, Some(q), &a.sched)?;
            let out = simulate(&records, &model, &cfg, p, a.sched.replicas)?;
            write_json(&a.out_dir.join(report_name(p, q)), &out.report)?;
            Ok((q, p, out.report))
        })
        .collect::<Result<_>>()?;

    let csv_path = a.out_dir.join("sweep.csv");
    let mut f = BufWriter::new(File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?);
    let mut body = String::from("qps,policy,mean_ttft_ms,mean_tbt_ms,request_throughput_rps\n");
    for (q, p, r) in &reports {
        body += &format!(
            "{q},{p},{},{},{}\n",
            fmt_opt(r.mean_ttft_ms),
            fmt_opt(r.mean_tbt_ms),
            r.request_throughput_rps
        );
    }
    f.write_all(body.as_bytes())
        .and_then(|_| f.flush())
        .map_err(|e| Error::io(&csv_path, e))
}

fn cmd_gen(a: &GenArgs) -> Result<()> {
    let spec = if a.lognormal {
        a.trace_like.lognormal(a.qps, a.count, a.seed, a.sigma, a.max_len)
    } else {
        a.trace_like.constant(a.qps, a.count, a.seed)
    };
    let records = workload::synth_poisson(&spec)?;
    workload::write_trace_file(&records, &a.out)
}

fn read_batch(path: &Path) -> Result<Vec<BatchEntry>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: BatchEntry = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        entry.validate().map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        entries.push(entry);
    }
    Ok(entries)
}

fn cmd_explain(a: &ExplainArgs) -> Result<()> {
    let model = build_model(&a.device)?;
    let batch = read_batch(&a.batch)?;
    let tpcs = a.tpcs.unwrap_or(model.total_tpcs());
    let b = model.breakdown(&batch, tpcs)?;
    println!("{}", serde_json::to_string_pretty(&b)?);
    Ok(())
}

#[derive(Serialize)]
struct ConfigSummary {
    schema: u32,
    model: String,
    hardware: String,
    tp: u32,
    weight_bytes: u64,
    kv_bytes_per_token: u64,
    kv_capacity_tokens: u64,
    kv_capacity_blocks: u64,
    block_size: u32,
}

fn cmd_validate(d: &DeviceArgs) -> Result<()> {
    let model = build_model(d)?;
    let summary = ConfigSummary {
        schema: REPORT_SCHEMA,
        model: model.spec.name.clone(),
        hardware: model.profile.name.clone(),
        tp: d.tp,
        weight_bytes: weight_bytes(&model.spec),
        kv_bytes_per_token: kv_bytes_per_token(&model.spec),
        kv_capacity_tokens: kv_capacity_tokens(&model.spec, &model.profile, d.tp)?,
        kv_capacity_blocks: kv_capacity_blocks(&model.spec, &model.profile, d.tp, d.block_size)?,
        block_size: d.block_size,
    };
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Gen(a) => cmd_gen(a),
        Command::ExplainBatch(a) => cmd_explain(a),
        Command::ValidateConfig(d) => cmd_validate(d),
    }
}

/// Parses `std::env::args`, runs, and returns the process exit code.
pub fn main() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::TpcOutOfRange { .. } => 2,
                _ => 1,
            }
        }
    }
}
