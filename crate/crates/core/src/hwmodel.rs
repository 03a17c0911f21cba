//! Model-architecture and GPU-hardware descriptions.
//!
//! A [`HardwareProfile`] describes one GPU whose compute units can be split
//! into disjoint partitions of whole TPCs (two SMs each). The achievable
//! compute throughput and HBM bandwidth of a partition are given by
//! piecewise-linear curves over the active TPC count. Compute scales roughly
//! linearly while bandwidth saturates early, so the default bandwidth curve is
//! a power law calibrated so that 20% of the TPCs reach about 60% of peak.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Exponent of the default bandwidth curve `min(1, (S/total)^x)`.
pub const DEFAULT_BW_EXPONENT: f64 = 0.32;

/// Transformer architecture dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub num_layers: u64,
    pub embed_dim: u64,
    pub ffn_dim: u64,
    pub num_q_heads: u64,
    pub num_kv_heads: u64,
    pub head_dim: u64,
    pub vocab_size: u64,
    /// Bytes per element.
    pub elem_size: u64,
}

impl ModelSpec {
    pub fn qwen3_8b_like() -> Self {
        ModelSpec {
            name: "qwen3-8b-like".into(),
            num_layers: 36,
            embed_dim: 4096,
            ffn_dim: 12288,
            num_q_heads: 32,
            num_kv_heads: 8,
            head_dim: 128,
            vocab_size: 151_936,
            elem_size: 2,
        }
    }

    pub fn qwen3_14b_like() -> Self {
        ModelSpec {
            name: "qwen3-14b-like".into(),
            num_layers: 40,
            embed_dim: 5120,
            ffn_dim: 17408,
            num_q_heads: 40,
            num_kv_heads: 8,
            head_dim: 128,
            vocab_size: 151_936,
            elem_size: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_layers", self.num_layers),
            ("embed_dim", self.embed_dim),
            ("ffn_dim", self.ffn_dim),
            ("num_q_heads", self.num_q_heads),
            ("num_kv_heads", self.num_kv_heads),
            ("head_dim", self.head_dim),
            ("vocab_size", self.vocab_size),
        ];
        for (field, v) in counts {
            if v == 0 {
                return Err(Error::config(format!("model {field} must be positive")));
            }
        }
        if !matches!(self.elem_size, 1 | 2 | 4) {
            return Err(Error::config(format!(
                "model elem_size must be 1, 2 or 4 bytes, got {}",
                self.elem_size
            )));
        }
        if self.embed_dim != self.num_q_heads * self.head_dim {
            return Err(Error::config(format!(
                "embed_dim {} != num_q_heads {} * head_dim {}",
                self.embed_dim, self.num_q_heads, self.head_dim
            )));
        }
        if !self.num_q_heads.is_multiple_of(self.num_kv_heads) {
            return Err(Error::config(format!(
                "num_q_heads {} is not a multiple of num_kv_heads {}",
                self.num_q_heads, self.num_kv_heads
            )));
        }
        Ok(())
    }

    /// Checks that attention heads and the FFN width shard evenly over `tp` GPUs.
    pub fn validate_tensor_parallel(&self, tp: u32) -> Result<()> {
        if tp == 0 {
            return Err(Error::config("tensor-parallel degree must be >= 1"));
        }
        let n = u64::from(tp);
        for (field, v) in [
            ("num_q_heads", self.num_q_heads),
            ("num_kv_heads", self.num_kv_heads),
            ("ffn_dim", self.ffn_dim),
        ] {
            if v % n != 0 {
                return Err(Error::config(format!(
                    "{field} = {v} is not divisible by tensor-parallel degree {tp}"
                )));
            }
        }
        Ok(())
    }

    /// Width of the fused K and V projections under grouped-query attention.
    pub fn kv_dim(&self) -> u64 {
        self.num_kv_heads * self.head_dim
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let spec: ModelSpec = read_json(path.as_ref())?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Total weight bytes: attention projections (GQA-sized K/V), a two-matrix
/// FFN, two norms with scale and shift per layer, and the vocabulary
/// embedding.
pub fn weight_bytes(spec: &ModelSpec) -> u64 {
    let d = spec.embed_dim;
    let qkv = d * d + 2 * d * spec.kv_dim();
    let out = d * d;
    let ffn = 2 * d * spec.ffn_dim;
    let norms = 2 * 2 * d;
    let per_layer = qkv + out + ffn + norms;
    spec.elem_size * (spec.num_layers * per_layer + spec.vocab_size * d)
}

/// K and V bytes stored per token over all layers.
pub fn kv_bytes_per_token(spec: &ModelSpec) -> u64 {
    2 * spec.num_kv_heads * spec.head_dim * spec.elem_size * spec.num_layers
}

/// One GPU's compute and memory characteristics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardwareProfile {
    pub name: String,
    pub total_tpcs: u32,
    pub sms_per_tpc: u32,
    /// FLOP/s at full device.
    pub peak_flops: f64,
    /// Bytes/s at full device.
    pub peak_hbm_bw: f64,
    /// `[tpcs, fraction of peak_flops]` knots.
    pub flops_curve: Vec<(u32, f64)>,
    /// `[tpcs, fraction of peak_hbm_bw]` knots.
    pub bw_curve: Vec<(u32, f64)>,
    /// Aggregate unidirectional NVLink bandwidth, bytes/s.
    pub nvlink_bw: f64,
    /// Allreduce startup latency, seconds.
    pub allreduce_alpha: f64,
    /// Device memory, bytes.
    pub mem_capacity: f64,
    pub mem_util_ratio: f64,
}

/// Linear compute scaling, one knot per TPC so that every knot is exact.
pub fn default_flops_curve(total_tpcs: u32) -> Vec<(u32, f64)> {
    (1..=total_tpcs)
        .map(|s| (s, f64::from(s) / f64::from(total_tpcs)))
        .collect()
}

/// Power-law bandwidth scaling `min(1, (S/total)^exponent)`, one knot per TPC.
pub fn power_law_bw_curve(total_tpcs: u32, exponent: f64) -> Vec<(u32, f64)> {
    (1..=total_tpcs)
        .map(|s| {
            let frac = (f64::from(s) / f64::from(total_tpcs)).powf(exponent);
            (s, frac.min(1.0))
        })
        .collect()
}

impl HardwareProfile {
    /// H100-SXM-like device: 66 TPCs, dense BF16 peak, 80 GiB HBM3.
    pub fn h100_like() -> Self {
        let total = 66;
        HardwareProfile {
            name: "h100-like".into(),
            total_tpcs: total,
            sms_per_tpc: 2,
            peak_flops: 4.947e14,
            peak_hbm_bw: 3.35e12,
            flops_curve: default_flops_curve(total),
            bw_curve: power_law_bw_curve(total, DEFAULT_BW_EXPONENT),
            nvlink_bw: 4.5e11,
            allreduce_alpha: 3e-6,
            mem_capacity: 80.0 * 1024.0 * 1024.0 * 1024.0,
            mem_util_ratio: 0.9,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_tpcs == 0 || self.sms_per_tpc == 0 {
            return Err(Error::config("total_tpcs and sms_per_tpc must be positive"));
        }
        for (field, v) in [
            ("peak_flops", self.peak_flops),
            ("peak_hbm_bw", self.peak_hbm_bw),
            ("nvlink_bw", self.nvlink_bw),
            ("mem_capacity", self.mem_capacity),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(format!("{field} must be positive and finite")));
            }
        }
        if !(self.allreduce_alpha.is_finite() && self.allreduce_alpha >= 0.0) {
            return Err(Error::config("allreduce_alpha must be >= 0"));
        }
        if !(self.mem_util_ratio > 0.0 && self.mem_util_ratio <= 1.0) {
            return Err(Error::config(format!(
                "mem_util_ratio must be in (0, 1], got {}",
                self.mem_util_ratio
            )));
        }
        validate_curve("flops_curve", &self.flops_curve, self.total_tpcs)?;
        validate_curve("bw_curve", &self.bw_curve, self.total_tpcs)?;
        Ok(())
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let profile: HardwareProfile = read_json(path.as_ref())?;
        profile.validate()?;
        Ok(profile)
    }

    pub fn total_sms(&self) -> u32 {
        self.total_tpcs * self.sms_per_tpc
    }

    pub fn check_tpcs(&self, active_tpcs: u32) -> Result<()> {
        if active_tpcs == 0 || active_tpcs > self.total_tpcs {
            return Err(Error::TpcOutOfRange {
                active: active_tpcs,
                total: self.total_tpcs,
            });
        }
        Ok(())
    }
}

fn validate_curve(field: &str, curve: &[(u32, f64)], total: u32) -> Result<()> {
    let Some(&(last_x, last_f)) = curve.last() else {
        return Err(Error::config(format!("{field} is empty")));
    };
    if last_x != total || last_f != 1.0 {
        return Err(Error::config(format!(
            "{field} must end at ({total}, 1.0), ends at ({last_x}, {last_f})"
        )));
    }
    let mut prev: Option<(u32, f64)> = None;
    for &(x, f) in curve {
        if x == 0 || x > total {
            return Err(Error::config(format!(
                "{field} abscissa {x} outside [1, {total}]"
            )));
        }
        // A zero fraction would make every operator on that partition take forever.
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::config(format!(
                "{field} fraction {f} at {x} TPCs outside (0, 1]"
            )));
        }
        if let Some((px, pf)) = prev {
            if x <= px {
                return Err(Error::config(format!(
                    "{field} abscissae must be strictly increasing ({px} then {x})"
                )));
            }
            if f < pf {
                return Err(Error::config(format!(
                    "{field} must be non-decreasing ({pf} at {px}, {f} at {x})"
                )));
            }
        }
        prev = Some((x, f));
    }
    Ok(())
}

/// Piecewise-linear lookup. Knots return their stored fraction exactly;
/// below the first knot the curve runs linearly from the origin.
fn curve_fraction(curve: &[(u32, f64)], active: u32) -> f64 {
    let idx = curve.partition_point(|&(x, _)| x < active);
    match curve.get(idx) {
        Some(&(x, f)) if x == active => f,
        Some(&(x1, f1)) => {
            let (x0, f0) = if idx == 0 { (0, 0.0) } else { curve[idx - 1] };
            let t = f64::from(active - x0) / f64::from(x1 - x0);
            f0 + (f1 - f0) * t
        }
        None => curve.last().map_or(1.0, |&(_, f)| f),
    }
}

/// Achievable FLOP/s of a partition of `active_tpcs` TPCs.
pub fn compute_throughput(profile: &HardwareProfile, active_tpcs: u32) -> Result<f64> {
    profile.check_tpcs(active_tpcs)?;
    Ok(profile.peak_flops * curve_fraction(&profile.flops_curve, active_tpcs))
}

/// Achievable HBM bytes/s of a partition of `active_tpcs` TPCs.
pub fn mem_bandwidth(profile: &HardwareProfile, active_tpcs: u32) -> Result<f64> {
    profile.check_tpcs(active_tpcs)?;
    Ok(profile.peak_hbm_bw * curve_fraction(&profile.bw_curve, active_tpcs))
}

/// Tokens of KV cache that fit across a tensor-parallel group of `tp` GPUs
/// after weights are resident.
pub fn kv_capacity_tokens(spec: &ModelSpec, profile: &HardwareProfile, tp: u32) -> Result<u64> {
    spec.validate_tensor_parallel(tp)?;
    let n = f64::from(tp);
    let usable = profile.mem_capacity * profile.mem_util_ratio - weight_bytes(spec) as f64 / n;
    if usable <= 0.0 {
        return Err(Error::config(format!(
            "model weights ({} bytes over {tp} GPU(s)) exceed usable memory",
            weight_bytes(spec)
        )));
    }
    let per_gpu_kv_per_token = kv_bytes_per_token(spec) as f64 / n;
    Ok((usable / per_gpu_kv_per_token).floor() as u64)
}

/// Whole KV blocks of `block_size` tokens available to the KV cache.
pub fn kv_capacity_blocks(
    spec: &ModelSpec,
    profile: &HardwareProfile,
    tp: u32,
    block_size: u32,
) -> Result<u64> {
    if block_size == 0 {
        return Err(Error::config("block_size must be positive"));
    }
    Ok(kv_capacity_tokens(spec, profile, tp)? / u64::from(block_size))
}

/// An `(S_p, S_d, k)` spatial-multiplexing configuration, in TPCs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PartitionConfig {
    pub s_p: u32,
    pub s_d: u32,
    pub k: u32,
}

impl PartitionConfig {
    pub fn new(s_p: u32, s_d: u32, k: u32, total_tpcs: u32) -> Result<Self> {
        if s_p + s_d != total_tpcs || s_d == 0 || k == 0 {
            return Err(Error::config(format!(
                "invalid partition (s_p={s_p}, s_d={s_d}, k={k}) for {total_tpcs} TPCs"
            )));
        }
        Ok(PartitionConfig { s_p, s_d, k })
    }
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
