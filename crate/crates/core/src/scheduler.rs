//! Iteration-level batch formation and prefill/decode mode selection.
//!
//! Every iteration starts from ordinary chunked-prefill scheduling: running
//! decodes first, then FCFS prefill admission up to the token budget. If the
//! roofline model predicts that the mixed batch would exceed the TBT SLO,
//! the batch is split into a decode-only part and a prefill-only part that
//! run concurrently on disjoint TPC partitions. The decode partition runs
//! `k` steps while the prefill partition runs once; the split and `k` are
//! chosen to maximize token throughput subject to the per-step decode
//! latency staying within the SLO.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hwmodel::PartitionConfig;
use crate::kv::KvCacheState;
use crate::request::Request;
use crate::roofline::{BatchEntry, CostModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    pub token_budget: u64,
    /// TBT SLO in seconds.
    pub tbt_slo: f64,
    pub max_batch_size: usize,
    /// Upper bound on decode steps per spatial window.
    pub lookahead_cap: u32,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            token_budget: 8192,
            tbt_slo: 0.1,
            max_batch_size: 1024,
            lookahead_cap: 32,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.token_budget == 0 {
            return Err(Error::config("token budget must be >= 1"));
        }
        if !(self.tbt_slo > 0.0 && self.tbt_slo.is_finite()) {
            return Err(Error::config("TBT SLO must be positive"));
        }
        if self.max_batch_size == 0 {
            return Err(Error::config("max batch size must be >= 1"));
        }
        if self.lookahead_cap == 0 {
            return Err(Error::config("look-ahead cap must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExecMode {
    TemporalMixed,
    SpatialPartitioned,
}

/// A partition with the latencies predicted for each side, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatialPlan {
    pub config: PartitionConfig,
    pub t_p: f64,
    pub t_d: f64,
}

/// One iteration's scheduled work.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BatchPlan {
    pub entries: Vec<BatchEntry>,
    pub prefill_tokens: u64,
    /// Tokens produced per decode step, i.e. the number of decode entries.
    pub decode_tokens: u64,
}

impl BatchPlan {
    pub fn from_entries(entries: Vec<BatchEntry>) -> Self {
        let decode_tokens = entries.iter().filter(|e| e.is_decode()).count() as u64;
        let prefill_tokens = entries
            .iter()
            .filter(|e| !e.is_decode())
            .map(|e| e.q)
            .sum();
        BatchPlan {
            entries,
            prefill_tokens,
            decode_tokens,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn budget_used(&self) -> u64 {
        self.prefill_tokens + self.decode_tokens
    }

    pub fn decode_entries(&self) -> Vec<BatchEntry> {
        self.entries.iter().filter(|e| e.is_decode()).copied().collect()
    }

    pub fn prefill_entries(&self) -> Vec<BatchEntry> {
        self.entries.iter().filter(|e| !e.is_decode()).copied().collect()
    }

    pub fn has_decode(&self) -> bool {
        self.decode_tokens > 0
    }

    pub fn has_prefill(&self) -> bool {
        self.prefill_tokens > 0
    }
}

/// Outcome of the per-iteration mode check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeDecision {
    /// Predicted latency of the mixed batch on the whole device, seconds.
    pub t_mixed: f64,
    pub mode: ExecMode,
    /// Tokens/s of the chosen execution.
    pub rho: f64,
    pub partition: Option<SpatialPlan>,
    /// No split met the SLO; the split minimizing decode latency was used.
    pub infeasible: bool,
    /// Only one phase was present, so it ran alone on the whole device.
    pub degenerate: bool,
}

impl ModeDecision {
    /// Whole-device execution of the mixed batch.
    pub fn temporal(t_mixed: f64, tokens: u64) -> Self {
        ModeDecision {
            t_mixed,
            mode: ExecMode::TemporalMixed,
            rho: if t_mixed > 0.0 {
                tokens as f64 / t_mixed
            } else {
                0.0
            },
            partition: None,
            infeasible: false,
            degenerate: false,
        }
    }

    /// Whether decode tokens of this iteration are predicted to miss the SLO.
    pub fn slo_risk(&self, plan: &BatchPlan) -> bool {
        self.infeasible || (self.degenerate && plan.has_decode())
    }
}

/// Result of batch formation: the plan plus requests preempted to make
/// room for running decodes.
#[derive(Debug, Clone, Default)]
pub struct FormedBatch {
    pub plan: BatchPlan,
    pub preempted: Vec<u64>,
}

/// Builds the next iteration's batch.
///
/// `running` holds decoding requests ordered oldest first, and `waiting`
/// holds requests that still need prefill (partially prefilled ones first).
/// Every running request gets one decode token and one KV slot; if the pool
/// runs dry the youngest running requests are preempted back to the head of
/// `waiting`. Prefill is admitted FCFS while the token budget, batch size
/// and KV pool allow, and a prompt that does not fit the remaining budget is
/// chunked to use it exactly.
pub fn form_batch(
    requests: &mut [Request],
    waiting: &mut VecDeque<u64>,
    running: &mut Vec<u64>,
    cfg: &SchedulerConfig,
    kv: &mut KvCacheState,
) -> Result<FormedBatch> {
    let mut entries = Vec::new();
    let mut preempted = Vec::new();

    let mut i = 0;
    while i < running.len() {
        let id = running[i];
        if kv.extend(id, 1)? {
            entries.push(requests[id as usize].decode_entry());
            i += 1;
            continue;
        }
        let victim = running.pop().expect("non-empty");
        kv.release(victim)?;
        requests[victim as usize].preempt();
        waiting.push_front(victim);
        preempted.push(victim);
    }
    debug_assert!(entries.len() <= cfg.max_batch_size);

    let mut budget = cfg.token_budget.saturating_sub(entries.len() as u64);
    for &id in waiting.iter() {
        if budget == 0 || entries.len() >= cfg.max_batch_size {
            break;
        }
        let req = &requests[id as usize];
        let remaining = req.prefill_remaining();
        let q = remaining.min(budget);
        if !kv.reserve(id, q)? {
            break;
        }
        entries.push(req.prefill_entry(q));
        budget -= q;
        if q < remaining {
            break;
        }
    }

    Ok(FormedBatch {
        plan: BatchPlan::from_entries(entries),
        preempted,
    })
}

/// Predicted whole-device latency of the mixed batch, seconds.
pub fn predict_mixed_latency(plan: &BatchPlan, model: &CostModel) -> Result<f64> {
    model.latency(&plan.entries, model.total_tpcs())
}

/// Inputs to the split search that do not depend on the latency model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitProblem {
    pub total_tpcs: u32,
    pub tbt_slo: f64,
    pub lookahead_cap: u32,
    pub decode_tokens: u64,
    pub prefill_tokens: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitChoice {
    pub plan: SpatialPlan,
    pub rho: f64,
    pub infeasible: bool,
}

/// Token throughput of running `k` decode steps beside one prefill pass.
pub fn window_throughput(k: u32, t_d: f64, t_p: f64, decode_tokens: u64, prefill_tokens: u64) -> f64 {
    let k = f64::from(k);
    (k * decode_tokens as f64 + prefill_tokens as f64) / (k * t_d).max(t_p)
}

/// The two window lengths bracketing `t_p / t_d`, clamped to `[1, cap]`.
/// Throughput rises with `k` until the decode side outlasts the prefill
/// side and falls afterwards, so one of these two is optimal.
pub fn candidate_steps(t_p: f64, t_d: f64, cap: u32) -> [u32; 2] {
    let ratio = if t_d > 0.0 { t_p / t_d } else { f64::from(cap) };
    let lo = ratio.floor().min(f64::from(cap)) as u32;
    [lo.clamp(1, cap), (lo.saturating_add(1)).clamp(1, cap)]
}

/// Enumerates decode partitions of 1..S-1 TPCs, skipping those whose decode
/// step exceeds the SLO, and returns the throughput-maximizing split. Ties
/// go to the smaller decode partition, then the smaller `k`. When no split
/// meets the SLO the one with the fastest decode step is returned and
/// flagged infeasible.
pub fn search_partition(
    problem: &SplitProblem,
    mut t_decode: impl FnMut(u32) -> Result<f64>,
    mut t_prefill: impl FnMut(u32) -> Result<f64>,
) -> Result<SplitChoice> {
    let total = problem.total_tpcs;
    if total < 2 {
        return Err(Error::config(format!(
            "cannot split a device of {total} TPC(s) between prefill and decode"
        )));
    }
    let mut best: Option<SplitChoice> = None;
    let mut fastest: Option<(u32, f64)> = None;
    for s_d in 1..total {
        let t_d = t_decode(s_d)?;
        if fastest.is_none_or(|(_, t)| t_d < t) {
            fastest = Some((s_d, t_d));
        }
        if t_d > problem.tbt_slo {
            continue;
        }
        let s_p = total - s_d;
        let t_p = t_prefill(s_p)?;
        for k in candidate_steps(t_p, t_d, problem.lookahead_cap) {
            let rho = window_throughput(k, t_d, t_p, problem.decode_tokens, problem.prefill_tokens);
            if best.is_none_or(|b| rho > b.rho) {
                best = Some(SplitChoice {
                    plan: SpatialPlan {
                        config: PartitionConfig { s_p, s_d, k },
                        t_p,
                        t_d,
                    },
                    rho,
                    infeasible: false,
                });
            }
        }
    }
    if let Some(best) = best {
        return Ok(best);
    }
    let (s_d, t_d) = fastest.expect("total >= 2");
    Ok(evaluate_split(problem, s_d, t_d, t_prefill(total - s_d)?, true))
}

/// Best `k` for a fixed split.
pub fn evaluate_split(
    problem: &SplitProblem,
    s_d: u32,
    t_d: f64,
    t_p: f64,
    infeasible: bool,
) -> SplitChoice {
    let mut best: Option<SplitChoice> = None;
    for k in candidate_steps(t_p, t_d, problem.lookahead_cap) {
        let rho = window_throughput(k, t_d, t_p, problem.decode_tokens, problem.prefill_tokens);
        if best.is_none_or(|b| rho > b.rho) {
            best = Some(SplitChoice {
                plan: SpatialPlan {
                    config: PartitionConfig {
                        s_p: problem.total_tpcs - s_d,
                        s_d,
                        k,
                    },
                    t_p,
                    t_d,
                },
                rho,
                infeasible,
            });
        }
    }
    best.expect("two candidates")
}

fn split_problem(plan: &BatchPlan, model: &CostModel, cfg: &SchedulerConfig) -> SplitProblem {
    SplitProblem {
        total_tpcs: model.total_tpcs(),
        tbt_slo: cfg.tbt_slo,
        lookahead_cap: cfg.lookahead_cap,
        decode_tokens: plan.decode_tokens,
        prefill_tokens: plan.prefill_tokens,
    }
}

/// Runs the split search for a plan whose mixed latency breaks the SLO.
/// A plan with only one phase runs that phase alone on the whole device.
pub fn optimize_partition(
    plan: &BatchPlan,
    model: &CostModel,
    cfg: &SchedulerConfig,
) -> Result<ModeDecision> {
    let t_mixed = predict_mixed_latency(plan, model)?;
    if !(plan.has_decode() && plan.has_prefill()) {
        let mut d = ModeDecision::temporal(t_mixed, plan.budget_used());
        d.degenerate = true;
        return Ok(d);
    }
    let decode = plan.decode_entries();
    let prefill = plan.prefill_entries();
    let choice = search_partition(
        &split_problem(plan, model, cfg),
        |s| model.latency(&decode, s),
        |s| model.latency(&prefill, s),
    )?;
    Ok(ModeDecision {
        t_mixed,
        mode: ExecMode::SpatialPartitioned,
        rho: choice.rho,
        partition: Some(choice.plan),
        infeasible: choice.infeasible,
        degenerate: false,
    })
}

/// Temporal mixed execution if the whole-device prediction meets the SLO
/// (inclusive), spatial multiplexing otherwise.
pub fn decide_mode(plan: &BatchPlan, model: &CostModel, cfg: &SchedulerConfig) -> Result<ModeDecision> {
    let t_mixed = predict_mixed_latency(plan, model)?;
    if t_mixed <= cfg.tbt_slo {
        return Ok(ModeDecision::temporal(t_mixed, plan.budget_used()));
    }
    optimize_partition(plan, model, cfg)
}

/// Spatial execution on a fixed decode partition of `s_d` TPCs, with `k`
/// from the same two-candidate rule. Used by the static-split baseline.
pub fn fixed_split_decision(
    plan: &BatchPlan,
    model: &CostModel,
    cfg: &SchedulerConfig,
    s_d: u32,
) -> Result<ModeDecision> {
    let total = model.total_tpcs();
    if s_d == 0 || s_d >= total {
        return Err(Error::config(format!(
            "static decode partition {s_d} outside [1, {}]",
            total.saturating_sub(1)
        )));
    }
    let t_mixed = predict_mixed_latency(plan, model)?;
    let t_d = model.latency(&plan.decode_entries(), s_d)?;
    let t_p = model.latency(&plan.prefill_entries(), total - s_d)?;
    let choice = if plan.has_prefill() {
        evaluate_split(&split_problem(plan, model, cfg), s_d, t_d, t_p, t_d > cfg.tbt_slo)
    } else {
        SplitChoice {
            plan: SpatialPlan {
                config: PartitionConfig {
                    s_p: total - s_d,
                    s_d,
                    k: 1,
                },
                t_p,
                t_d,
            },
            rho: if t_d > 0.0 { plan.decode_tokens as f64 / t_d } else { 0.0 },
            infeasible: t_d > cfg.tbt_slo,
        }
    };
    Ok(ModeDecision {
        t_mixed,
        mode: ExecMode::SpatialPartitioned,
        rho: choice.rho,
        partition: Some(choice.plan),
        infeasible: choice.infeasible,
        degenerate: false,
    })
}
