//! Iteration-level discrete-event simulation of one serving engine.
//!
//! Virtual time advances one iteration at a time. A temporal iteration runs
//! the whole mixed batch on the full device. A spatial iteration runs `k`
//! back-to-back decode steps on the decode partition while the prefill
//! partition processes the prefill batch once; the window closes when both
//! sides are done. The disaggregated baseline is a separate two-engine loop
//! (one prefill GPU, one decode GPU) in [`run_disagg`].

use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hwmodel::kv_bytes_per_token;
use crate::kv::KvCacheState;
use crate::metrics::{aggregate, IterationCounters, MetricsReport};
use crate::request::{Request, RequestState};
use crate::roofline::{CostModel, RooflineOptions};
use crate::scheduler::{
    decide_mode, fixed_split_decision, form_batch, predict_mixed_latency, BatchPlan, ExecMode,
    ModeDecision, SchedulerConfig, SpatialPlan,
};
use crate::workload::TraceRecord;

/// Fixed CPU-side costs, milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DispatchOverheads {
    /// Graph launch before a run of decode steps.
    pub decode_launch: f64,
    /// Kernel dispatch before a prefill or mixed pass.
    pub prefill_launch: f64,
    /// Scheduling work after every iteration.
    pub scheduler_cpu: f64,
}

impl Default for DispatchOverheads {
    fn default() -> Self {
        DispatchOverheads {
            decode_launch: 0.5,
            prefill_launch: 0.0,
            scheduler_cpu: 1.0,
        }
    }
}

impl DispatchOverheads {
    pub fn zero() -> Self {
        DispatchOverheads {
            decode_launch: 0.0,
            prefill_launch: 0.0,
            scheduler_cpu: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for v in [self.decode_launch, self.prefill_launch, self.scheduler_cpu] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config("dispatch overheads must be >= 0"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    /// Adaptive: temporal when the SLO holds, otherwise optimized spatial split.
    Duet,
    /// Always temporal chunked prefill.
    Chunked,
    /// Always spatial with a fixed decode partition.
    Static { s_d: u32 },
    /// One prefill GPU and one decode GPU with KV transfer in between.
    Disagg,
}

impl Policy {
    pub fn label(&self) -> String {
        match self {
            Policy::Duet => "duet".into(),
            Policy::Chunked => "chunked".into(),
            Policy::Static { s_d } => format!("static:{s_d}"),
            Policy::Disagg => "disagg".into(),
        }
    }

    pub fn validate(&self, total_tpcs: u32) -> Result<()> {
        if let Policy::Static { s_d } = *self {
            if s_d == 0 || s_d >= total_tpcs {
                return Err(Error::config(format!(
                    "static decode partition must be in [1, {}], got {s_d}",
                    total_tpcs.saturating_sub(1)
                )));
            }
        }
        Ok(())
    }
}

impl FromStr for Policy {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "duet" => Ok(Policy::Duet),
            "chunked" => Ok(Policy::Chunked),
            "disagg" => Ok(Policy::Disagg),
            other => match other.strip_prefix("static:") {
                Some(n) => n
                    .parse()
                    .map(|s_d| Policy::Static { s_d })
                    .map_err(|_| format!("bad static partition '{n}'")),
                None => Err(format!(
                    "unknown policy '{other}' (duet, chunked, static:<Sd>, disagg)"
                )),
            },
        }
    }
}

impl std::fmt::Display for Policy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub scheduler: SchedulerConfig,
    pub overheads: DispatchOverheads,
    pub block_size: u32,
    /// KV transfer bandwidth for the disaggregated baseline, bytes/s;
    /// defaults to the profile's NVLink bandwidth.
    pub transfer_bw: Option<f64>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            scheduler: SchedulerConfig::default(),
            overheads: DispatchOverheads::default(),
            block_size: 16,
            transfer_bw: None,
        }
    }
}

/// One line of the iteration log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: u64,
    /// Engine index: replica number, or 0 = prefill / 1 = decode GPU when
    /// disaggregated.
    pub engine: u32,
    pub mode: ExecMode,
    pub t_mixed_ms: f64,
    pub s_p: Option<u32>,
    pub s_d: Option<u32>,
    pub k: Option<u32>,
    /// Predicted tokens/s.
    pub rho: f64,
    pub budget_used: u64,
    pub decode_count: u64,
    /// Iteration start.
    pub clock_ms: f64,
    pub window_ms: f64,
    pub t_d_ms: Option<f64>,
    pub t_p_ms: Option<f64>,
    pub emissions: u64,
    pub kv_free_blocks: u64,
    pub wasted_decode_steps: u64,
    pub slo_risk: bool,
}

/// Work accounting gathered alongside the report.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SimStats {
    /// Prefill tokens processed, including recomputation after preemption.
    pub prefill_tokens: u64,
    /// Tokens recomputed after preemption, prompt and generated alike.
    pub replayed_tokens: u64,
    pub preemptions: u64,
    /// TPC-milliseconds a partition sat idle inside spatial windows.
    pub idle_tpc_ms: f64,
    pub kv_total_blocks: u64,
}

impl SimStats {
    fn merge(&mut self, other: &SimStats) {
        self.prefill_tokens += other.prefill_tokens;
        self.replayed_tokens += other.replayed_tokens;
        self.preemptions += other.preemptions;
        self.idle_tpc_ms += other.idle_tpc_ms;
        self.kv_total_blocks += other.kv_total_blocks;
    }
}

#[derive(Debug, Clone)]
pub struct SimOutcome {
    pub report: MetricsReport,
    pub iterations: Vec<IterationRecord>,
    pub requests: Vec<Request>,
    pub stats: SimStats,
    pub counters: IterationCounters,
}

impl SimOutcome {
    /// Requests that have arrived by `t_ms` but not yet received a token.
    pub fn awaiting_first_token(&self, t_ms: f64) -> usize {
        self.requests
            .iter()
            .filter(|r| r.arrival_ms <= t_ms && r.emissions.first().is_none_or(|&e| e > t_ms))
            .count()
    }
}

/// Mutable state of one engine between iterations.
#[derive(Debug, Clone)]
pub struct EngineState {
    pub requests: Vec<Request>,
    /// Requests needing prefill, FCFS.
    pub waiting: VecDeque<u64>,
    /// Decoding requests, oldest arrival first.
    pub running: Vec<u64>,
    pub kv: KvCacheState,
    pub clock_ms: f64,
}

impl EngineState {
    pub fn new(requests: Vec<Request>, kv: KvCacheState) -> Self {
        EngineState {
            requests,
            waiting: VecDeque::new(),
            running: Vec::new(),
            kv,
            clock_ms: 0.0,
        }
    }

    fn start_decoding(&mut self, id: u64) {
        let reqs = &self.requests;
        let key = |i: u64| (reqs[i as usize].arrival_ms, i);
        let (t, _) = key(id);
        let pos = self.running.partition_point(|&other| {
            let (to, _) = key(other);
            to.total_cmp(&t).then(other.cmp(&id)).is_lt()
        });
        self.running.insert(pos, id);
    }

    fn finish(&mut self, id: u64) -> Result<()> {
        self.kv.release(id)?;
        Ok(())
    }
}

/// What one executed iteration produced.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepEvents {
    pub emissions: u64,
    pub wasted_decode_steps: u64,
    pub window_ms: f64,
    pub finished: Vec<u64>,
    pub prefill_tokens: u64,
    pub replayed_tokens: u64,
    /// Decode steps actually run; below the planned `k` only under KV pressure.
    pub k: u32,
    pub idle_tpc_ms: f64,
}

fn apply_prefill(
    state: &mut EngineState,
    id: u64,
    q: u64,
    emit_at: f64,
    events: &mut StepEvents,
) -> Result<()> {
    let r = &mut state.requests[id as usize];
    let high_water = r.prompt_high_water;
    let completed = r.advance_prefill(q);
    events.prefill_tokens += q;
    events.replayed_tokens += q - (r.prompt_high_water - high_water);
    if !completed {
        return Ok(());
    }
    r.emit(emit_at);
    events.emissions += 1;
    state.waiting.retain(|&w| w != id);
    if state.requests[id as usize].is_finished() {
        state.finish(id)?;
        events.finished.push(id);
    } else {
        state.start_decoding(id);
    }
    Ok(())
}

/// Runs `plan` on the whole device for `t_mixed_ms`. Every scheduled token
/// appears at the end of the pass; the clock then pays scheduling overhead.
pub fn step_temporal(
    state: &mut EngineState,
    plan: &BatchPlan,
    t_mixed_ms: f64,
    overheads: &DispatchOverheads,
) -> Result<StepEvents> {
    let start = state.clock_ms;
    let emit_at = start + overheads.prefill_launch + t_mixed_ms;
    let mut events = StepEvents {
        k: 1,
        ..StepEvents::default()
    };
    for e in &plan.entries {
        let id = e.request_id;
        if e.is_decode() {
            let r = &mut state.requests[id as usize];
            r.emit(emit_at);
            events.emissions += 1;
            if r.is_finished() {
                state.running.retain(|&x| x != id);
                state.finish(id)?;
                events.finished.push(id);
            }
        } else {
            apply_prefill(state, id, e.q, emit_at, &mut events)?;
        }
    }
    state.clock_ms = emit_at + overheads.scheduler_cpu;
    events.window_ms = state.clock_ms - start;
    Ok(events)
}

/// Runs `k` decode steps on the decode partition beside one prefill pass on
/// the prefill partition. Decode step `j` emits at
/// `start + decode_launch + j * t_d`; prefill completions emit at
/// `start + decode_launch + prefill_launch + t_p`. Requests that run out of
/// output mid-window idle for the rest of it. If the KV pool cannot hold `k`
/// look-ahead slots for every decode, `k` shrinks until it can.
pub fn step_spatial(
    state: &mut EngineState,
    plan: &BatchPlan,
    spatial: &SpatialPlan,
    overheads: &DispatchOverheads,
) -> Result<StepEvents> {
    let start = state.clock_ms;
    let t_d = spatial.t_d * 1000.0;
    let t_p = spatial.t_p * 1000.0;
    let decodes: Vec<u64> = plan
        .entries
        .iter()
        .filter(|e| e.is_decode())
        .map(|e| e.request_id)
        .collect();

    // one slot per decode is already held; reserve the rest of the window
    let mut k = spatial.config.k.max(1);
    while k > 1 {
        let needed: u64 = decodes
            .iter()
            .map(|&id| {
                let steps = state.requests[id as usize].remaining_output().min(u64::from(k));
                state.kv.extra_blocks(id, steps - 1)
            })
            .sum();
        if needed <= state.kv.free_blocks() {
            break;
        }
        k -= 1;
    }
    for &id in &decodes {
        let steps = state.requests[id as usize].remaining_output().min(u64::from(k));
        if !state.kv.extend(id, steps - 1)? {
            return Err(Error::Internal(format!(
                "look-ahead reservation for request {id} failed after sizing"
            )));
        }
    }

    let mut events = StepEvents {
        k,
        ..StepEvents::default()
    };
    let decode_start = start + overheads.decode_launch;
    for &id in &decodes {
        let r = &mut state.requests[id as usize];
        let steps = r.remaining_output().min(u64::from(k));
        for j in 1..=steps {
            r.emit(decode_start + j as f64 * t_d);
        }
        events.emissions += steps;
        events.wasted_decode_steps += u64::from(k) - steps;
    }

    let prefill_done = decode_start + overheads.prefill_launch + t_p;
    let mut has_prefill = false;
    for e in plan.entries.iter().filter(|e| !e.is_decode()) {
        has_prefill = true;
        apply_prefill(state, e.request_id, e.q, prefill_done, &mut events)?;
    }

    // finishers keep their slots until the window closes
    for &id in &decodes {
        if state.requests[id as usize].is_finished() {
            state.running.retain(|&x| x != id);
            state.finish(id)?;
            events.finished.push(id);
        }
    }

    let decode_side = if decodes.is_empty() {
        0.0
    } else {
        overheads.decode_launch + f64::from(k) * t_d
    };
    let prefill_side = if has_prefill {
        overheads.decode_launch + overheads.prefill_launch + t_p
    } else {
        0.0
    };
    let busy = decode_side.max(prefill_side);
    let c = spatial.config;
    events.idle_tpc_ms = f64::from(c.s_d) * (busy - decode_side) + f64::from(c.s_p) * (busy - prefill_side);
    state.clock_ms = start + busy + overheads.scheduler_cpu;
    events.window_ms = state.clock_ms - start;
    Ok(events)
}

fn build_requests(records: &[TraceRecord]) -> Vec<Request> {
    let mut sorted = records.to_vec();
    sorted.sort_by(|a, b| a.arrival_ms.total_cmp(&b.arrival_ms));
    sorted
        .iter()
        .enumerate()
        .map(|(i, r)| Request::new(i as u64, r.arrival_ms, r.input_tokens, r.output_tokens))
        .collect()
}

fn kv_pool(model: &CostModel, cfg: &SimConfig) -> Result<KvCacheState> {
    let blocks = crate::hwmodel::kv_capacity_blocks(&model.spec, &model.profile, model.tp, cfg.block_size)?;
    KvCacheState::new(cfg.block_size, blocks)
}

fn check_capacity(requests: &[Request], kv: &KvCacheState) -> Result<()> {
    if let Some(r) = requests
        .iter()
        .max_by_key(|r| r.prompt_len + r.output_len)
    {
        let need = r.prompt_len + r.output_len;
        if need > kv.capacity_tokens() {
            return Err(Error::config(format!(
                "KV capacity of {} tokens cannot hold request {} ({} prompt + {} output tokens)",
                kv.capacity_tokens(),
                r.id,
                r.prompt_len,
                r.output_len
            )));
        }
    }
    Ok(())
}

fn validate_inputs(model: &CostModel, cfg: &SimConfig, policy: Policy) -> Result<()> {
    cfg.scheduler.validate()?;
    cfg.overheads.validate()?;
    policy.validate(model.total_tpcs())?;
    if let Some(bw) = cfg.transfer_bw {
        if !(bw > 0.0) {
            return Err(Error::config("transfer bandwidth must be positive"));
        }
    }
    Ok(())
}

struct Engine<'a> {
    model: &'a CostModel,
    cfg: &'a SimConfig,
    policy: Policy,
    engine_id: u32,
    state: EngineState,
    arrivals: VecDeque<u64>,
    counters: IterationCounters,
    stats: SimStats,
    log: Vec<IterationRecord>,
    last_mode: Option<ExecMode>,
}

impl<'a> Engine<'a> {
    fn new(
        records: &[TraceRecord],
        model: &'a CostModel,
        cfg: &'a SimConfig,
        policy: Policy,
        engine_id: u32,
    ) -> Result<Self> {
        let requests = build_requests(records);
        let kv = kv_pool(model, cfg)?;
        check_capacity(&requests, &kv)?;
        let arrivals = requests.iter().map(|r| r.id).collect();
        let stats = SimStats {
            kv_total_blocks: kv.total_blocks(),
            ..SimStats::default()
        };
        Ok(Engine {
            model,
            cfg,
            policy,
            engine_id,
            state: EngineState::new(requests, kv),
            arrivals,
            counters: IterationCounters::default(),
            stats,
            log: Vec::new(),
            last_mode: None,
        })
    }

    fn admit_arrivals(&mut self) {
        while let Some(&id) = self.arrivals.front() {
            if self.state.requests[id as usize].arrival_ms > self.state.clock_ms {
                break;
            }
            self.arrivals.pop_front();
            self.state.waiting.push_back(id);
        }
    }

    /// Drops KV held by partially prefilled requests so the queue head can
    /// make progress. Returns how many were reset.
    fn reset_partial_prefills(&mut self) -> Result<usize> {
        let holders: Vec<u64> = self
            .state
            .waiting
            .iter()
            .copied()
            .filter(|&id| self.state.kv.holds(id))
            .collect();
        for &id in &holders {
            self.state.kv.release(id)?;
            let r = &mut self.state.requests[id as usize];
            r.progress = 0;
            r.prefilled = 0;
            r.state = RequestState::Waiting;
        }
        Ok(holders.len())
    }

    fn decide(&self, plan: &BatchPlan) -> Result<ModeDecision> {
        let sched = &self.cfg.scheduler;
        match self.policy {
            Policy::Duet => decide_mode(plan, self.model, sched),
            Policy::Chunked => Ok(ModeDecision::temporal(
                predict_mixed_latency(plan, self.model)?,
                plan.budget_used(),
            )),
            Policy::Static { s_d } => fixed_split_decision(plan, self.model, sched, s_d),
            Policy::Disagg => Err(Error::Internal("disagg runs on its own loop".into())),
        }
    }

    fn run(mut self) -> Result<SimOutcome> {
        loop {
            self.admit_arrivals();
            if self.state.waiting.is_empty() && self.state.running.is_empty() {
                match self.arrivals.front() {
                    Some(&id) => {
                        let t = self.state.requests[id as usize].arrival_ms;
                        self.state.clock_ms = self.state.clock_ms.max(t);
                        continue;
                    }
                    None => break,
                }
            }
            let formed = form_batch(
                &mut self.state.requests,
                &mut self.state.waiting,
                &mut self.state.running,
                &self.cfg.scheduler,
                &mut self.state.kv,
            )?;
            self.stats.preemptions += formed.preempted.len() as u64;
            let plan = formed.plan;
            if plan.is_empty() {
                if self.state.running.is_empty() && self.reset_partial_prefills()? > 0 {
                    continue;
                }
                return Err(Error::Internal(format!(
                    "no schedulable work at {} ms with {} waiting",
                    self.state.clock_ms,
                    self.state.waiting.len()
                )));
            }
            self.iterate(&plan)?;
            self.state.kv.check_conservation()?;
        }
        if self.state.kv.resident_count() != 0 {
            return Err(Error::Internal("KV blocks still held after all requests finished".into()));
        }
        self.state.kv.check_conservation()?;
        let report = aggregate(&self.state.requests, &self.counters);
        Ok(SimOutcome {
            report,
            iterations: self.log,
            requests: self.state.requests,
            stats: self.stats,
            counters: self.counters,
        })
    }

    fn iterate(&mut self, plan: &BatchPlan) -> Result<()> {
        let decision = self.decide(plan)?;
        let start = self.state.clock_ms;
        let overheads = self.cfg.overheads;
        let events = match (decision.mode, decision.partition) {
            (ExecMode::SpatialPartitioned, Some(sp)) => {
                step_spatial(&mut self.state, plan, &sp, &overheads)?
            }
            _ => step_temporal(&mut self.state, plan, decision.t_mixed * 1000.0, &overheads)?,
        };
        let slo_risk = decision.slo_risk(plan);

        self.counters.iterations += 1;
        if decision.mode == ExecMode::SpatialPartitioned {
            self.counters.spatial_iterations += 1;
        }
        if self.last_mode.is_some_and(|m| m != decision.mode) {
            self.counters.mode_switches += 1;
        }
        self.last_mode = Some(decision.mode);
        if slo_risk {
            self.counters.slo_risk_iterations += 1;
        }
        self.counters.wasted_decode_steps += events.wasted_decode_steps;
        self.stats.prefill_tokens += events.prefill_tokens;
        self.stats.replayed_tokens += events.replayed_tokens;
        self.stats.idle_tpc_ms += events.idle_tpc_ms;

        let part = decision.partition;
        self.log.push(IterationRecord {
            iter: self.counters.iterations - 1,
            engine: self.engine_id,
            mode: decision.mode,
            t_mixed_ms: decision.t_mixed * 1000.0,
            s_p: part.map(|p| p.config.s_p),
            s_d: part.map(|p| p.config.s_d),
            k: part.map(|_| events.k),
            rho: decision.rho,
            budget_used: plan.budget_used(),
            decode_count: plan.decode_tokens,
            clock_ms: start,
            window_ms: events.window_ms,
            t_d_ms: part.map(|p| p.t_d * 1000.0),
            t_p_ms: part.map(|p| p.t_p * 1000.0),
            emissions: events.emissions,
            kv_free_blocks: self.state.kv.free_blocks(),
            wasted_decode_steps: events.wasted_decode_steps,
            slo_risk,
        });
        Ok(())
    }
}

/// Simulates `records` on one engine (a tensor-parallel group) under `policy`.
/// The disaggregated policy is forwarded to [`run_disagg`] with two copies of
/// the model's device.
pub fn run(records: &[TraceRecord], model: &CostModel, cfg: &SimConfig, policy: Policy) -> Result<SimOutcome> {
    validate_inputs(model, cfg, policy)?;
    if policy == Policy::Disagg {
        let bw = cfg.transfer_bw.unwrap_or(model.profile.nvlink_bw);
        return run_disagg(records, model, model, cfg, bw);
    }
    Engine::new(records, model, cfg, policy, 0)?.run()
}

/// Fixed-split baseline: every iteration is spatial with `s_d` decode TPCs.
pub fn run_static(records: &[TraceRecord], model: &CostModel, cfg: &SimConfig, s_d: u32) -> Result<SimOutcome> {
    run(records, model, cfg, Policy::Static { s_d })
}

/// Splits the workload round-robin over `replicas` independent engines and
/// merges their timelines into one report.
pub fn run_replicated(
    records: &[TraceRecord],
    model: &CostModel,
    cfg: &SimConfig,
    policy: Policy,
    replicas: u32,
) -> Result<SimOutcome> {
    if replicas == 0 {
        return Err(Error::config("need at least one replica"));
    }
    validate_inputs(model, cfg, policy)?;
    let mut sorted = records.to_vec();
    sorted.sort_by(|a, b| a.arrival_ms.total_cmp(&b.arrival_ms));
    let mut requests = Vec::new();
    let mut iterations = Vec::new();
    let mut stats = SimStats::default();
    let mut counters = IterationCounters::default();
    for rep in 0..replicas {
        let share: Vec<TraceRecord> = sorted
            .iter()
            .enumerate()
            .filter(|(i, _)| *i as u32 % replicas == rep)
            .map(|(_, r)| *r)
            .collect();
        let out = if policy == Policy::Disagg {
            run(&share, model, cfg, policy)?
        } else {
            Engine::new(&share, model, cfg, policy, rep)?.run()?
        };
        let offset = requests.len() as u64;
        requests.extend(out.requests.into_iter().map(|mut r| {
            r.id += offset;
            r
        }));
        iterations.extend(out.iterations.into_iter().map(|mut it| {
            it.engine = rep;
            it
        }));
        stats.merge(&out.stats);
        counters.merge(&out.counters);
    }
    let report = aggregate(&requests, &counters);
    Ok(SimOutcome {
        report,
        iterations,
        requests,
        stats,
        counters,
    })
}

/// 1P+1D disaggregation. The prefill GPU runs budget-capped prefill-only
/// batches FCFS on its whole device. A finished prompt's KV cache is shipped
/// at `transfer_bw` bytes/s; the request then waits for the decode GPU,
/// whose next iteration admits it (emitting the first token) and decodes it
/// with plain continuous batching bounded by the batch-size limit.
pub fn run_disagg(
    records: &[TraceRecord],
    prefill_model: &CostModel,
    decode_model: &CostModel,
    cfg: &SimConfig,
    transfer_bw: f64,
) -> Result<SimOutcome> {
    validate_inputs(prefill_model, cfg, Policy::Chunked)?;
    validate_inputs(decode_model, cfg, Policy::Chunked)?;
    if !(transfer_bw > 0.0) {
        return Err(Error::config("transfer bandwidth must be positive"));
    }
    let sched = &cfg.scheduler;
    let ov = cfg.overheads;
    let mut p = EngineState::new(build_requests(records), kv_pool(prefill_model, cfg)?);
    let mut d_kv = kv_pool(decode_model, cfg)?;
    check_capacity(&p.requests, &p.kv)?;
    check_capacity(&p.requests, &d_kv)?;
    let kv_bytes = kv_bytes_per_token(&prefill_model.spec) as f64;

    let mut arrivals: VecDeque<u64> = p.requests.iter().map(|r| r.id).collect();
    // (ready time, id) of transfers heading to the decode GPU
    let mut handoffs: BinaryHeap<Reverse<(OrderedMs, u64)>> = BinaryHeap::new();
    let mut d_running: Vec<u64> = Vec::new();
    let mut d_clock = 0.0f64;
    let mut counters = IterationCounters::default();
    let mut stats = SimStats {
        kv_total_blocks: p.kv.total_blocks() + d_kv.total_blocks(),
        ..SimStats::default()
    };
    let mut log = Vec::new();

    loop {
        let p_next = if !p.waiting.is_empty() {
            p.clock_ms
        } else if let Some(&id) = arrivals.front() {
            p.clock_ms.max(p.requests[id as usize].arrival_ms)
        } else {
            f64::INFINITY
        };
        let d_next = if !d_running.is_empty() {
            d_clock
        } else if let Some(Reverse((ready, _))) = handoffs.peek() {
            d_clock.max(ready.0)
        } else {
            f64::INFINITY
        };
        if p_next.is_infinite() && d_next.is_infinite() {
            break;
        }

        if p_next <= d_next {
            p.clock_ms = p_next;
            while let Some(&id) = arrivals.front() {
                if p.requests[id as usize].arrival_ms > p.clock_ms {
                    break;
                }
                arrivals.pop_front();
                p.waiting.push_back(id);
            }
            let mut no_running = Vec::new();
            let formed = form_batch(&mut p.requests, &mut p.waiting, &mut no_running, sched, &mut p.kv)?;
            let plan = formed.plan;
            if plan.is_empty() {
                return Err(Error::Internal("prefill GPU cannot schedule its queue head".into()));
            }
            let t = predict_mixed_latency(&plan, prefill_model)? * 1000.0;
            let start = p.clock_ms;
            let done = start + ov.prefill_launch + t;
            for e in &plan.entries {
                stats.prefill_tokens += e.q;
                let r = &mut p.requests[e.request_id as usize];
                if r.advance_prefill(e.q) {
                    let id = r.id;
                    let ready = done + r.prompt_len as f64 * kv_bytes / transfer_bw * 1000.0;
                    p.waiting.retain(|&w| w != id);
                    p.kv.release(id)?;
                    handoffs.push(Reverse((OrderedMs(ready), id)));
                }
            }
            p.clock_ms = done + ov.scheduler_cpu;
            p.kv.check_conservation()?;
            counters.iterations += 1;
            log.push(IterationRecord {
                iter: counters.iterations - 1,
                engine: 0,
                mode: ExecMode::TemporalMixed,
                t_mixed_ms: t,
                s_p: None,
                s_d: None,
                k: None,
                rho: plan.budget_used() as f64 / (t / 1000.0),
                budget_used: plan.budget_used(),
                decode_count: 0,
                clock_ms: start,
                window_ms: p.clock_ms - start,
                t_d_ms: None,
                t_p_ms: None,
                emissions: 0,
                kv_free_blocks: p.kv.free_blocks(),
                wasted_decode_steps: 0,
                slo_risk: false,
            });
        } else {
            d_clock = d_next;
            let start = d_clock;
            let mut emissions = 0;
            while let Some(&Reverse((ready, id))) = handoffs.peek() {
                if ready.0 > d_clock || d_running.len() >= sched.max_batch_size {
                    break;
                }
                let r = &p.requests[id as usize];
                // reserve the whole lifetime so the decode GPU never preempts
                if !d_kv.admit(id, r.prompt_len + r.output_len)? {
                    break;
                }
                handoffs.pop();
                let r = &mut p.requests[id as usize];
                r.emit(d_clock);
                emissions += 1;
                if r.is_finished() {
                    d_kv.release(id)?;
                } else {
                    d_running.push(id);
                }
            }
            if d_running.is_empty() {
                continue;
            }
            let entries: Vec<_> = d_running.iter().map(|&id| p.requests[id as usize].decode_entry()).collect();
            let plan = BatchPlan::from_entries(entries);
            let t = predict_mixed_latency(&plan, decode_model)? * 1000.0;
            let emit_at = d_clock + ov.decode_launch + t;
            for &id in &d_running {
                p.requests[id as usize].emit(emit_at);
                emissions += 1;
            }
            let mut finished = Vec::new();
            d_running.retain(|&id| {
                let done = p.requests[id as usize].is_finished();
                if done {
                    finished.push(id);
                }
                !done
            });
            for id in finished {
                d_kv.release(id)?;
            }
            d_clock = emit_at + ov.scheduler_cpu;
            d_kv.check_conservation()?;
            counters.iterations += 1;
            log.push(IterationRecord {
                iter: counters.iterations - 1,
                engine: 1,
                mode: ExecMode::TemporalMixed,
                t_mixed_ms: t,
                s_p: None,
                s_d: None,
                k: None,
                rho: plan.budget_used() as f64 / (t / 1000.0),
                budget_used: plan.budget_used(),
                decode_count: plan.decode_tokens,
                clock_ms: start,
                window_ms: d_clock - start,
                t_d_ms: None,
                t_p_ms: None,
                emissions,
                kv_free_blocks: d_kv.free_blocks(),
                wasted_decode_steps: 0,
                slo_risk: t > sched.tbt_slo * 1000.0,
            });
            if t > sched.tbt_slo * 1000.0 {
                counters.slo_risk_iterations += 1;
            }
        }
    }
    if p.kv.resident_count() != 0 || d_kv.resident_count() != 0 {
        return Err(Error::Internal("KV blocks still held after all requests finished".into()));
    }
    let report = aggregate(&p.requests, &counters);
    Ok(SimOutcome {
        report,
        iterations: log,
        requests: p.requests,
        stats,
        counters,
    })
}

/// Totally ordered milliseconds for the transfer heap.
#[derive(Debug, Clone, Copy, PartialEq)]
struct OrderedMs(f64);

impl Eq for OrderedMs {}

impl PartialOrd for OrderedMs {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for OrderedMs {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Builds a cost model with default roofline options; convenience for callers
/// that only vary the device and model.
pub fn default_cost_model(
    spec: crate::hwmodel::ModelSpec,
    profile: crate::hwmodel::HardwareProfile,
    tp: u32,
) -> Result<CostModel> {
    CostModel::new(spec, profile, tp, RooflineOptions::default())
}
