//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero if any fails.

use std::panic::{self, AssertUnwindSafe};
use std::time::Instant;

use duetsim::hwmodel::{power_law_bw_curve, weight_bytes, HardwareProfile, ModelSpec};
use duetsim::roofline::{
    allreduce_latency, attention_cost_per_req, linear_cost, roofline_time, BatchEntry, CostModel, OpCost,
    RooflineOptions,
};
use duetsim::scheduler::{
    decide_mode, optimize_partition, predict_mixed_latency, search_partition, BatchPlan, ExecMode,
    SchedulerConfig, SplitProblem,
};
use duetsim::simulator::{run, run_replicated, DispatchOverheads, Policy, SimConfig, SimOutcome};
use duetsim::workload::{synth_poisson, TraceLike, TraceRecord};
use duetsim::PartitionConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn rel_eq(a: f64, b: f64, tol: f64) -> bool {
    a == b || (a - b).abs() <= tol * a.abs().max(b.abs())
}

fn h100_8b() -> CostModel {
    CostModel::new(
        ModelSpec::qwen3_8b_like(),
        HardwareProfile::h100_like(),
        1,
        RooflineOptions::default(),
    )
    .unwrap()
}

fn criterion_1() -> Check {
    let start = Instant::now();
    let c = linear_cost(2, 4, 8, 2);
    ensure(c == OpCost::new(128.0, 112.0), format!("linear n=2: {c:?}"))?;
    let c = linear_cost(0, 4096, 4096, 2);
    ensure(c == OpCost::new(0.0, (4096 * 4096 * 2) as f64), format!("linear n=0: {c:?}"))?;
    let c = linear_cost(8192, 4096, 4096, 2);
    ensure(c.flops == 274_877_906_944.0, format!("linear n=8192: {}", c.flops))?;

    let t = roofline_time(OpCost::new(1000.0, 100.0), 1e12, 1e12).unwrap();
    ensure(rel_eq(t, 1e-9, 1e-12), format!("roofline: {t}"))?;
    ensure(roofline_time(OpCost::default(), 1e12, 1e12).unwrap() == 0.0, "roofline of nothing")?;
    let t = roofline_time(OpCost::new(2e12, 3e12), 2e12, 3e12).unwrap();
    ensure(t == 1.0, format!("balanced point: {t}"))?;
    ensure(roofline_time(OpCost::default(), 0.0, 1.0).is_err(), "zero pi accepted")?;

    let toy = ModelSpec {
        name: "toy".into(),
        num_layers: 1,
        embed_dim: 8,
        ffn_dim: 8,
        num_q_heads: 2,
        num_kv_heads: 1,
        head_dim: 4,
        vocab_size: 8,
        elem_size: 2,
    };
    let a = attention_cost_per_req(&BatchEntry::decode(0, 3), &toy);
    ensure(a == OpCost::new(144.0, 96.0), format!("attention toy: {a:?}"))?;
    let a = attention_cost_per_req(&BatchEntry::decode(0, 1023), &ModelSpec::qwen3_8b_like());
    ensure(a.flops == 16_842_752.0, format!("attention c=1023: {}", a.flops))?;

    let mut hw = HardwareProfile::h100_like();
    hw.allreduce_alpha = 3e-6;
    hw.nvlink_bw = 4.5e11;
    let t = allreduce_latency(2, 1e6, &hw, 1e12).unwrap();
    let expect = 6e-6 + 2e6 / 9e11 + 2e-6;
    ensure(rel_eq(t, expect, 1e-12), format!("allreduce N=2: {t} vs {expect}"))?;
    ensure(rel_eq(t, 1.0222222222222222e-5, 1e-12), format!("allreduce N=2: {t}"))?;
    ensure(allreduce_latency(1, 1e9, &hw, 1e12).unwrap() == 0.0, "allreduce N=1")?;
    ensure(allreduce_latency(0, 1e9, &hw, 1e12).is_err(), "allreduce N=0 accepted")?;

    let elapsed = start.elapsed().as_secs_f64();
    ensure(elapsed < 1.0, format!("took {elapsed:.3} s"))?;
    Ok(format!("all hand-arithmetic values reproduced in {:.1} ms", elapsed * 1e3))
}

fn random_batch(rng: &mut ChaCha8Rng, max_decodes: usize, max_ctx: u64) -> (Vec<BatchEntry>, Vec<BatchEntry>) {
    let nd = rng.random_range(1..=max_decodes);
    let decode = (0..nd)
        .map(|i| BatchEntry::decode(i as u64, rng.random_range(1..=max_ctx)))
        .collect();
    let np = rng.random_range(1..=3);
    let prefill = (0..np)
        .map(|i| {
            let q = rng.random_range(1..=8192u64);
            let c = if rng.random_bool(0.5) { 0 } else { rng.random_range(1..=max_ctx) };
            BatchEntry::prefill(1000 + i, q, c, true)
        })
        .collect();
    (decode, prefill)
}

fn random_model(rng: &mut ChaCha8Rng) -> CostModel {
    let mut hw = HardwareProfile::h100_like();
    let total = rng.random_range(2..=80u32);
    hw.total_tpcs = total;
    hw.flops_curve = duetsim::hwmodel::default_flops_curve(total);
    hw.bw_curve = power_law_bw_curve(total, rng.random_range(0.1..0.9));
    let spec = if rng.random_bool(0.5) {
        ModelSpec::qwen3_8b_like()
    } else {
        ModelSpec::qwen3_14b_like()
    };
    CostModel::new(spec, hw, 1, RooflineOptions::default()).unwrap()
}

/// Best throughput over every split and every `k` up to the cap, or `None`
/// if no split meets the SLO.
fn exhaustive_best(d: &[BatchEntry], p: &[BatchEntry], model: &CostModel, tau: f64, k_max: u32) -> Option<f64> {
    let total = model.total_tpcs();
    let (nd, np) = (d.len() as f64, p.iter().map(|e| e.q).sum::<u64>() as f64);
    let mut best: Option<f64> = None;
    for s_d in 1..total {
        let t_d = model.latency(d, s_d).unwrap();
        if t_d > tau {
            continue;
        }
        let t_p = model.latency(p, total - s_d).unwrap();
        for k in 1..=k_max {
            let kf = f64::from(k);
            let rho = (kf * nd + np) / (kf * t_d).max(t_p);
            if best.is_none_or(|b| rho > b) {
                best = Some(rho);
            }
        }
    }
    best
}

fn criterion_2() -> Check {
    let start = Instant::now();
    let toy = SplitProblem {
        total_tpcs: 8,
        tbt_slo: 10.0,
        lookahead_cap: 32,
        decode_tokens: 16,
        prefill_tokens: 512,
    };
    let choice = search_partition(&toy, |s| Ok(24.0 / f64::from(s)), |s| Ok(96.0 / f64::from(s))).unwrap();
    ensure(
        choice.plan.config == PartitionConfig { s_p: 5, s_d: 3, k: 2 },
        format!("toy winner {:?}", choice.plan.config),
    )?;
    ensure(rel_eq(choice.rho, 28.333333333333332, 1e-12), format!("toy rho {}", choice.rho))?;

    let mut rng = ChaCha8Rng::seed_from_u64(0xD0E7);
    let (mut feasible, mut infeasible, mut mismatches) = (0, 0, Vec::new());
    let instances = 1200;
    for i in 0..instances {
        let model = random_model(&mut rng);
        let (d, p) = random_batch(&mut rng, 64, 40_000);
        let t_fast = (1..model.total_tpcs())
            .map(|s| model.latency(&d, s).unwrap())
            .fold(f64::INFINITY, f64::min);
        // SLO anywhere from slightly infeasible to loose
        let tau = t_fast * rng.random_range(0.9..4.0);
        let cfg = SchedulerConfig {
            tbt_slo: tau,
            ..SchedulerConfig::default()
        };
        let mut entries = d.clone();
        entries.extend(p.iter().copied());
        let plan = BatchPlan::from_entries(entries);
        let dec = optimize_partition(&plan, &model, &cfg).unwrap();
        let part = dec.partition.expect("mixed plan gets a partition");
        match exhaustive_best(&d, &p, &model, tau, cfg.lookahead_cap) {
            Some(best) => {
                feasible += 1;
                if dec.infeasible || dec.rho != best || part.t_d > tau {
                    mismatches.push(format!("#{i}: got {} (infeasible {}), oracle {best}", dec.rho, dec.infeasible));
                }
            }
            None => {
                infeasible += 1;
                let t_d = model.latency(&d, part.config.s_d).unwrap();
                if !dec.infeasible || t_d != t_fast {
                    mismatches.push(format!("#{i}: unflagged or non-minimal fallback"));
                }
            }
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    if let Some(first) = mismatches.first() {
        return Err(format!("{} mismatches, first: {first}", mismatches.len()));
    }
    ensure(elapsed < 30.0, format!("took {elapsed:.1} s"))?;
    Ok(format!(
        "{instances} instances ({feasible} feasible, {infeasible} infeasible), 0 mismatches, toy (5,3,2) rho=28.33/ms, {elapsed:.1} s"
    ))
}

fn criterion_3() -> Check {
    let model = h100_8b();
    let cfg = SchedulerConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut entries: Vec<BatchEntry> = (0..63)
        .map(|i| BatchEntry::decode(i, rng.random_range(1024..32_768)))
        .collect();
    entries.push(BatchEntry::prefill(63, 8192 - 63, 0, false));
    let plan = BatchPlan::from_entries(entries);
    let _ = optimize_partition(&plan, &model, &cfg).unwrap();
    let mut samples: Vec<f64> = (0..100)
        .map(|_| {
            let t = Instant::now();
            let d = optimize_partition(&plan, &model, &cfg).unwrap();
            let dt = t.elapsed().as_secs_f64();
            assert!(d.partition.is_some());
            dt
        })
        .collect();
    samples.sort_by(f64::total_cmp);
    let median = (samples[49] + samples[50]) / 2.0;
    ensure(median < 1e-3, format!("median {:.3} ms", median * 1e3))?;
    Ok(format!("median {:.1} us over 100 calls (S=66, 64 requests)", median * 1e6))
}

fn criterion_4() -> Check {
    let model = h100_8b();
    let cfg = SchedulerConfig::default();
    let plan = BatchPlan::from_entries(vec![
        BatchEntry::decode(0, 2048),
        BatchEntry::prefill(1, 8192, 0, true),
    ]);
    let t_mixed = predict_mixed_latency(&plan, &model).unwrap();
    ensure(t_mixed > 0.1, format!("t_mixed {t_mixed}"))?;
    let d = decide_mode(&plan, &model, &cfg).unwrap();
    ensure(d.mode == ExecMode::SpatialPartitioned, "8192-token prefill stayed temporal")?;

    let batch = |c| -> Vec<BatchEntry> { (0..8).map(|i| BatchEntry::decode(i, c)).collect() };
    let short = model.latency(&batch(2048), 66).unwrap();
    let long = model.latency(&batch(65_536), 66).unwrap();
    let ratio = long / short;
    ensure((4.0..=7.0).contains(&ratio), format!("decode ratio {ratio:.3}"))?;
    Ok(format!(
        "t_mixed(8192 prefill) = {:.1} ms -> spatial; decode x8 latency ratio c=65536/c=2048 = {ratio:.2}",
        t_mixed * 1e3
    ))
}

fn criterion_5() -> Check {
    let model = h100_8b();
    let cfg = SimConfig::default();
    let tau_ms = cfg.scheduler.tbt_slo * 1e3;
    let total = model.total_tpcs();
    let statics = [total / 3, total / 2, 2 * total / 3];
    let mut lines = Vec::new();
    let mut failures = Vec::new();
    for (trace, qps) in [
        (TraceLike::AzureCode, 20.0),
        (TraceLike::AzureConv, 40.0),
        (TraceLike::Mooncake, 4.0),
    ] {
        let start = Instant::now();
        let records = synth_poisson(&trace.constant(qps, 600, 17)).unwrap();
        let duet = run(&records, &model, &cfg, Policy::Duet).unwrap().report;
        let chunked = run(&records, &model, &cfg, Policy::Chunked).unwrap().report;
        let best_static = statics
            .iter()
            .map(|&s_d| {
                run(&records, &model, &cfg, Policy::Static { s_d })
                    .unwrap()
                    .report
                    .request_throughput_rps
            })
            .fold(0.0, f64::max);
        let elapsed = start.elapsed().as_secs_f64();
        let duet_tbt = duet.mean_tbt_ms.unwrap_or(f64::INFINITY);
        let chunked_tbt = chunked.mean_tbt_ms.unwrap_or(0.0);
        let name = trace.name();
        lines.push(format!(
            "{name}@{qps}: duet tbt {duet_tbt:.1} ms / {:.2} rps, chunked tbt {chunked_tbt:.1} ms, best static {best_static:.2} rps",
            duet.request_throughput_rps
        ));
        if duet.request_throughput_rps >= qps {
            failures.push(format!("{name}: qps {qps} is not saturating"));
        }
        if duet_tbt > tau_ms * 1.1 {
            failures.push(format!("{name}: duet mean TBT {duet_tbt:.1} > {:.0}", tau_ms * 1.1));
        }
        if chunked_tbt <= tau_ms {
            failures.push(format!("{name}: chunked mean TBT {chunked_tbt:.1} <= {tau_ms:.0}"));
        }
        if duet.request_throughput_rps < 0.98 * best_static {
            failures.push(format!(
                "{name}: duet {:.3} rps < 0.98 x static {best_static:.3}",
                duet.request_throughput_rps
            ));
        }
        if elapsed >= 60.0 {
            failures.push(format!("{name}: took {elapsed:.1} s"));
        }
    }
    if failures.is_empty() {
        Ok(lines.join("; "))
    } else {
        Err(format!("{} | {}", failures.join("; "), lines.join("; ")))
    }
}

/// Requests still waiting for their first token at evenly spaced points of
/// the last quarter of the arrival window.
fn final_quartile_queue(out: &SimOutcome, records: &[TraceRecord]) -> Vec<usize> {
    let t_end = records.last().unwrap().arrival_ms;
    (0..5)
        .map(|i| out.awaiting_first_token(t_end * (0.75 + 0.0625 * f64::from(i))))
        .collect()
}

fn strictly_increasing(xs: &[usize]) -> bool {
    xs.windows(2).all(|w| w[1] > w[0])
}

fn criterion_6() -> Check {
    let model = h100_8b();
    let cfg = SimConfig::default();
    for qps in [2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0] {
        let records = synth_poisson(&TraceLike::LongPrefillBench.constant(qps, 400, 3)).unwrap();
        let disagg = run(&records, &model, &cfg, Policy::Disagg).unwrap();
        let dq = final_quartile_queue(&disagg, &records);
        if !strictly_increasing(&dq) {
            continue;
        }
        let duet = run_replicated(&records, &model, &cfg, Policy::Duet, 2).unwrap();
        let uq = final_quartile_queue(&duet, &records);
        let (dt, ut) = (disagg.report.token_throughput_tps, duet.report.token_throughput_tps);
        ensure(
            !strictly_increasing(&uq),
            format!("qps {qps}: duet x2 queue also grows {uq:?} (disagg {dq:?})"),
        )?;
        ensure(dt < ut, format!("qps {qps}: disagg {dt:.1} tok/s >= duet x2 {ut:.1}"))?;
        return Ok(format!(
            "disagg diverges first at qps {qps}: queue {dq:?} vs duet x2 {uq:?}; {dt:.0} vs {ut:.0} output tok/s"
        ));
    }
    Err("disagg never diverged up to qps 8".into())
}

fn check_run(out: &SimOutcome, records: &[TraceRecord], violations: &mut Vec<String>, tag: &str) {
    let isl: u64 = records.iter().map(|r| r.input_tokens).sum();
    if out.report.completed != records.len() {
        violations.push(format!("{tag}: {} of {} completed", out.report.completed, records.len()));
    }
    if out.stats.prefill_tokens - out.stats.replayed_tokens != isl {
        violations.push(format!("{tag}: prefill work {} != ISL {isl}", out.stats.prefill_tokens - out.stats.replayed_tokens));
    }
    for r in &out.requests {
        if r.emissions.len() as u64 != r.output_len || r.prefilled != r.prompt_len {
            violations.push(format!("{tag}: request {} token count", r.id));
        }
        if r.emissions.first().is_some_and(|&e| e < r.arrival_ms) {
            violations.push(format!("{tag}: request {} emits before arrival", r.id));
        }
        if r.tbt_samples().any(|g| !(g > 0.0)) {
            violations.push(format!("{tag}: request {} has a non-positive gap", r.id));
        }
    }
    let mut last_end = std::collections::HashMap::new();
    for it in &out.iterations {
        let prev = last_end.insert(it.engine, it.clock_ms + it.window_ms);
        if prev.is_some_and(|p| it.clock_ms < p) || it.window_ms < 0.0 {
            violations.push(format!("{tag}: clock went back at iteration {}", it.iter));
        }
        if it.kv_free_blocks > out.stats.kv_total_blocks {
            violations.push(format!("{tag}: free blocks exceed pool"));
        }
    }
}

fn fingerprint(out: &SimOutcome) -> (String, String) {
    (
        serde_json::to_string(&out.report).unwrap(),
        serde_json::to_string(&out.iterations).unwrap(),
    )
}

fn criterion_7() -> Check {
    let start = Instant::now();
    let base = h100_8b();
    let mut tight = HardwareProfile::h100_like();
    tight.mem_capacity = (weight_bytes(&base.spec) as f64 + 40_000.0 * 147_456.0) / tight.mem_util_ratio;
    let small_kv = CostModel::new(base.spec.clone(), tight, 1, RooflineOptions::default()).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let traces = [TraceLike::AzureCode, TraceLike::AzureConv, TraceLike::Mooncake];
    let policies = [Policy::Duet, Policy::Chunked, Policy::Static { s_d: 22 }, Policy::Disagg];
    let (mut requests, mut runs, mut preemptions) = (0usize, 0usize, 0u64);
    let mut violations = Vec::new();
    while requests < 10_000 {
        let trace = traces[runs % 3];
        let policy = policies[(runs / 3) % 4];
        let qps = rng.random_range(1.0..25.0) / if trace == TraceLike::Mooncake { 6.0 } else { 1.0 };
        let spec = trace.lognormal(qps, rng.random_range(150..350), rng.random(), 1.0, 30_000);
        let records = synth_poisson(&spec).unwrap();
        let model = if runs % 2 == 0 { &base } else { &small_kv };
        let cfg = SimConfig {
            overheads: if runs % 4 < 2 {
                DispatchOverheads::default()
            } else {
                DispatchOverheads::zero()
            },
            ..SimConfig::default()
        };
        let tag = format!("run {runs} ({}, {policy})", trace.name());
        match (run(&records, model, &cfg, policy), run(&records, model, &cfg, policy)) {
            (Ok(a), Ok(b)) => {
                check_run(&a, &records, &mut violations, &tag);
                if fingerprint(&a) != fingerprint(&b) {
                    violations.push(format!("{tag}: repeated run differs"));
                }
                preemptions += a.stats.preemptions;
            }
            (Err(e), _) | (_, Err(e)) => violations.push(format!("{tag}: {e}")),
        }
        requests += records.len();
        runs += 1;
    }
    let elapsed = start.elapsed().as_secs_f64();
    ensure(
        violations.is_empty(),
        format!("{} violations, first: {}", violations.len(), violations.first().cloned().unwrap_or_default()),
    )?;
    ensure(elapsed < 60.0, format!("took {elapsed:.1} s"))?;
    Ok(format!(
        "{requests} requests over {runs} runs ({preemptions} preemptions), 0 violations, {elapsed:.1} s"
    ))
}

fn criterion_8() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut temporal, mut spatial, mut flagged, mut degenerate) = (0, 0, 0, 0);
    for i in 0..3000 {
        let model = if i % 3 == 0 { random_model(&mut rng) } else { h100_8b() };
        let (d, p) = random_batch(&mut rng, 64, 60_000);
        let entries: Vec<BatchEntry> = match i % 10 {
            0 => d.clone(),
            1 => p.clone(),
            _ => d.iter().chain(p.iter()).copied().collect(),
        };
        let plan = BatchPlan::from_entries(entries);
        let t_mixed = predict_mixed_latency(&plan, &model).unwrap();
        let tau = match i % 7 {
            0 => t_mixed,
            _ => t_mixed * rng.random_range(0.05..1.5),
        };
        let cfg = SchedulerConfig {
            tbt_slo: tau,
            ..SchedulerConfig::default()
        };
        let dec = decide_mode(&plan, &model, &cfg).unwrap();
        let mixed = plan.has_decode() && plan.has_prefill();
        if t_mixed <= tau {
            ensure(dec.mode == ExecMode::TemporalMixed && !dec.degenerate, format!("#{i}: under SLO but {:?}", dec.mode))?;
            temporal += 1;
            continue;
        }
        if !mixed {
            ensure(dec.degenerate, format!("#{i}: single-phase plan over SLO not flagged"))?;
            degenerate += 1;
            continue;
        }
        ensure(dec.mode == ExecMode::SpatialPartitioned, format!("#{i}: over SLO but temporal"))?;
        let part = dec.partition.ok_or(format!("#{i}: spatial without partition"))?;
        let total = model.total_tpcs();
        let any_feasible = (1..total).any(|s| model.latency(&plan.decode_entries(), s).unwrap() <= tau);
        let t_d = model.latency(&plan.decode_entries(), part.config.s_d).unwrap();
        ensure(t_d == part.t_d, format!("#{i}: reported t_d differs from model"))?;
        ensure(part.config.s_p + part.config.s_d == total, format!("#{i}: split does not cover device"))?;
        if dec.infeasible {
            ensure(!any_feasible, format!("#{i}: flagged infeasible but a split meets the SLO"))?;
            ensure(dec.slo_risk(&plan), format!("#{i}: infeasible without SLO risk"))?;
            flagged += 1;
        } else {
            ensure(t_d <= tau, format!("#{i}: feasible config has t_d {t_d} > {tau}"))?;
            spatial += 1;
        }
    }
    Ok(format!(
        "3000 batches: {temporal} temporal, {spatial} feasible spatial, {flagged} flagged infeasible, {degenerate} single-phase flagged degenerate"
    ))
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("formula exactness", criterion_1),
        ("optimizer matches exhaustive search", criterion_2),
        ("optimizer under 1 ms", criterion_3),
        ("prefill interference and context-driven decode cost", criterion_4),
        ("policy ordering on trace-shaped workloads", criterion_5),
        ("disaggregation imbalance", criterion_6),
        ("conservation and determinism", criterion_7),
        ("mode-decision soundness", criterion_8),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (n, (name, f)) in criteria.iter().enumerate() {
        let result = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match result {
            Ok(detail) => println!("criterion {} PASS [{name}]: {detail}", n + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} FAIL [{name}]: {detail}", n + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
