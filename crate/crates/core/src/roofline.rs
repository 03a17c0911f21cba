//! Attention-aware roofline latency model.
//!
//! Operators fall into three groups. Token-level operators (linear
//! projections, norms, activations) depend only on the total number of
//! scheduled tokens. Attention depends on each request's query and cached
//! lengths, so its roofline bound is taken per request before summing.
//! Tensor-parallel communication uses a ring allreduce cost.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hwmodel::{compute_throughput, mem_bandwidth, HardwareProfile, ModelSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    PrefillFull,
    PrefillChunk,
    Decode,
}

/// One request's slice of an iteration: `q` new query tokens over `c`
/// cached tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchEntry {
    #[serde(default)]
    pub request_id: u64,
    pub q: u64,
    pub c: u64,
    pub phase: Phase,
    /// Whether a prefill entry finishes its prompt this iteration and thus
    /// needs logits. Ignored for decode entries, which always do.
    #[serde(default = "yes")]
    pub emits_token: bool,
}

fn yes() -> bool {
    true
}

impl BatchEntry {
    pub fn decode(request_id: u64, c: u64) -> Self {
        BatchEntry {
            request_id,
            q: 1,
            c,
            phase: Phase::Decode,
            emits_token: true,
        }
    }

    /// A prefill slice of `q` tokens after `c` already-cached ones.
    pub fn prefill(request_id: u64, q: u64, c: u64, emits_token: bool) -> Self {
        let phase = if c == 0 {
            Phase::PrefillFull
        } else {
            Phase::PrefillChunk
        };
        BatchEntry {
            request_id,
            q,
            c,
            phase,
            emits_token,
        }
    }

    pub fn is_decode(&self) -> bool {
        self.phase == Phase::Decode
    }

    pub fn needs_logits(&self) -> bool {
        self.is_decode() || self.emits_token
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.phase {
            Phase::Decode => self.q == 1 && self.c > 0,
            // Single-token prompts are legal, so a fresh prefill only needs q >= 1.
            Phase::PrefillFull => self.q >= 1 && self.c == 0,
            Phase::PrefillChunk => self.q >= 1 && self.c > 0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!(
                "batch entry {} has q={} c={} inconsistent with phase {:?}",
                self.request_id, self.q, self.c, self.phase
            )))
        }
    }
}

/// FLOPs and bytes moved by one operator invocation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct OpCost {
    pub flops: f64,
    pub bytes: f64,
}

impl OpCost {
    pub fn new(flops: f64, bytes: f64) -> Self {
        OpCost { flops, bytes }
    }

    fn shard(self, n: f64) -> Self {
        OpCost {
            flops: self.flops / n,
            bytes: self.bytes / n,
        }
    }
}

impl std::ops::Add for OpCost {
    type Output = OpCost;
    fn add(self, rhs: OpCost) -> OpCost {
        OpCost {
            flops: self.flops + rhs.flops,
            bytes: self.bytes + rhs.bytes,
        }
    }
}

impl std::iter::Sum for OpCost {
    fn sum<I: Iterator<Item = OpCost>>(iter: I) -> OpCost {
        iter.fold(OpCost::default(), |a, b| a + b)
    }
}

/// Per-block components (seconds) and the whole-model total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyBreakdown {
    pub t_linear: f64,
    pub t_norm_act: f64,
    pub t_attn: f64,
    pub t_allreduce: f64,
    pub t_block: f64,
    pub t_cls: f64,
    pub t_total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FfnStyle {
    /// Gate and up projections fused into one `d -> 2m` matmul.
    #[default]
    Gated,
    Plain,
}

impl std::str::FromStr for FfnStyle {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "gated" => Ok(FfnStyle::Gated),
            "plain" => Ok(FfnStyle::Plain),
            other => Err(format!("unknown ffn style '{other}' (expected gated or plain)")),
        }
    }
}

/// Knobs for the token-level operators that are not plain matmuls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RooflineOptions {
    pub ffn: FfnStyle,
    pub norm_flops_per_elem: f64,
    pub act_flops_per_elem: f64,
}

impl Default for RooflineOptions {
    fn default() -> Self {
        RooflineOptions {
            ffn: FfnStyle::Gated,
            norm_flops_per_elem: 5.0,
            act_flops_per_elem: 2.0,
        }
    }
}

/// `F = 2 n d_i d_o`, `B = (n d_i + d_i d_o + n d_o) s`.
pub fn linear_cost(n: u64, d_i: u64, d_o: u64, s: u64) -> OpCost {
    let flops = 2 * n * d_i * d_o;
    let bytes = n * d_i * s + d_i * d_o * s + n * d_o * s;
    OpCost::new(flops as f64, bytes as f64)
}

/// `max(F / pi, B / bw)`.
pub fn roofline_time(cost: OpCost, pi: f64, bw: f64) -> Result<f64> {
    if !(pi > 0.0) || !(bw > 0.0) {
        return Err(Error::config(format!(
            "compute throughput ({pi}) and bandwidth ({bw}) must be positive"
        )));
    }
    Ok((cost.flops / pi).max(cost.bytes / bw))
}

pub fn attention_cost_per_req(entry: &BatchEntry, spec: &ModelSpec) -> OpCost {
    let (q, c) = (entry.q, entry.c);
    let kv_len = q + c;
    let (hq, hkv, dh, s) = (
        spec.num_q_heads,
        spec.num_kv_heads,
        spec.head_dim,
        spec.elem_size,
    );
    let flops = 4 * hq * q * kv_len * dh + 2 * hq * q * kv_len;
    let bytes = 2 * hq * q * dh * s + 2 * hkv * kv_len * dh * s;
    OpCost::new(flops as f64, bytes as f64)
}

/// Sum over requests of each request's own roofline bound. Empty batch → 0.
pub fn attention_latency(
    batch: &[BatchEntry],
    spec: &ModelSpec,
    pi: f64,
    bw: f64,
) -> Result<f64> {
    attention_latency_sharded(batch, spec, pi, bw, 1.0)
}

fn attention_latency_sharded(
    batch: &[BatchEntry],
    spec: &ModelSpec,
    pi: f64,
    bw: f64,
    shards: f64,
) -> Result<f64> {
    // validate once so the loop stays a plain sum
    roofline_time(OpCost::default(), pi, bw)?;
    Ok(batch
        .iter()
        .map(|e| {
            let cost = attention_cost_per_req(e, spec).shard(shards);
            (cost.flops / pi).max(cost.bytes / bw)
        })
        .sum())
}

/// Ring allreduce over `n_gpus` of a `bytes_out`-byte tensor.
pub fn allreduce_latency(
    n_gpus: u32,
    bytes_out: f64,
    profile: &HardwareProfile,
    pi: f64,
) -> Result<f64> {
    if n_gpus == 0 {
        return Err(Error::config("allreduce needs at least one GPU"));
    }
    if n_gpus == 1 {
        return Ok(0.0);
    }
    let n = f64::from(n_gpus);
    let rounds = 2.0 * (n - 1.0);
    Ok(rounds * profile.allreduce_alpha
        + rounds * bytes_out / (n * profile.nvlink_bw)
        + n * (n - 1.0) * bytes_out / pi)
}

/// Whole-model iteration latency for `batch` on a partition delivering
/// `pi` FLOP/s and `bw` bytes/s per GPU, sharded over `tp` GPUs.
pub fn model_latency(
    batch: &[BatchEntry],
    spec: &ModelSpec,
    profile: &HardwareProfile,
    pi: f64,
    bw: f64,
    tp: u32,
    opts: &RooflineOptions,
) -> Result<LatencyBreakdown> {
    if tp == 0 {
        return Err(Error::config("tensor-parallel degree must be >= 1"));
    }
    roofline_time(OpCost::default(), pi, bw)?;
    if batch.is_empty() {
        return Ok(LatencyBreakdown::default());
    }
    let shards = f64::from(tp);
    let n: u64 = batch.iter().map(|e| e.q).sum();
    let d = spec.embed_dim;
    let m = spec.ffn_dim;
    let s = spec.elem_size;
    let t = |cost: OpCost| (cost.flops / pi).max(cost.bytes / bw);

    let up_width = match opts.ffn {
        FfnStyle::Gated => 2 * m,
        FfnStyle::Plain => m,
    };
    let linears = [
        linear_cost(n, d, d + 2 * spec.kv_dim(), s),
        linear_cost(n, d, d, s),
        linear_cost(n, d, up_width, s),
        linear_cost(n, m, d, s),
    ];
    let t_linear: f64 = linears.iter().map(|&c| t(c.shard(shards))).sum();

    let nd = (n * d) as f64;
    let norm = OpCost::new(opts.norm_flops_per_elem * nd, 2.0 * nd * s as f64);
    let act_elems = (n * m) as f64;
    let act = OpCost::new(
        opts.act_flops_per_elem * act_elems,
        2.0 * act_elems * s as f64,
    )
    .shard(shards);
    let t_norm_act = 2.0 * t(norm) + t(act);

    let t_attn = attention_latency_sharded(batch, spec, pi, bw, shards)?;

    let out_bytes = nd * s as f64;
    let t_allreduce = 2.0 * allreduce_latency(tp, out_bytes, profile, pi)?;

    let t_block = t_linear + t_norm_act + t_attn + t_allreduce;

    let logit_tokens = batch.iter().filter(|e| e.needs_logits()).count() as u64;
    let t_cls = if logit_tokens == 0 {
        0.0
    } else {
        t(linear_cost(logit_tokens, d, spec.vocab_size, s).shard(shards))
    };
    let t_total = spec.num_layers as f64 * t_block + t_cls;
    Ok(LatencyBreakdown {
        t_linear,
        t_norm_act,
        t_attn,
        t_allreduce,
        t_block,
        t_cls,
        t_total,
    })
}

/// Roofline model bound to one model, device and tensor-parallel degree.
#[derive(Debug, Clone)]
pub struct CostModel {
    pub spec: ModelSpec,
    pub profile: HardwareProfile,
    pub tp: u32,
    pub opts: RooflineOptions,
    // per-TPC (pi, bw), index = tpcs - 1
    rates: Vec<(f64, f64)>,
}

impl CostModel {
    pub fn new(
        spec: ModelSpec,
        profile: HardwareProfile,
        tp: u32,
        opts: RooflineOptions,
    ) -> Result<Self> {
        spec.validate()?;
        profile.validate()?;
        spec.validate_tensor_parallel(tp)?;
        let rates = (1..=profile.total_tpcs)
            .map(|s| Ok((compute_throughput(&profile, s)?, mem_bandwidth(&profile, s)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(CostModel {
            spec,
            profile,
            tp,
            opts,
            rates,
        })
    }

    pub fn total_tpcs(&self) -> u32 {
        self.profile.total_tpcs
    }

    /// `(pi, bw)` of a partition of `tpcs` TPCs.
    pub fn rates(&self, tpcs: u32) -> Result<(f64, f64)> {
        self.profile.check_tpcs(tpcs)?;
        Ok(self.rates[tpcs as usize - 1])
    }

    pub fn breakdown(&self, batch: &[BatchEntry], tpcs: u32) -> Result<LatencyBreakdown> {
        let (pi, bw) = self.rates(tpcs)?;
        model_latency(
            batch,
            &self.spec,
            &self.profile,
            pi,
            bw,
            self.tp,
            &self.opts,
        )
    }

    /// Predicted forward latency in seconds of `batch` on `tpcs` TPCs.
    pub fn latency(&self, batch: &[BatchEntry], tpcs: u32) -> Result<f64> {
        Ok(self.breakdown(batch, tpcs)?.t_total)
    }
}
