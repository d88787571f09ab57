//! Analytical compute/memory cost model for a single transformer request.
//!
//! A request with input length `p` and output length `d` on a model with
//! `P` parameters, hidden dim `H`, per-layer KV feature dim `H_kv` and `L`
//! layers costs, against peak FP16 compute and HBM bandwidth:
//!
//! ```text
//! comp = ((p + d) * P * 2 + p^2 * H * L * 4) / peak_compute
//! mem  = sum_{i=1..d} (p + i) * H_kv * L * 4 / peak_bandwidth
//!      ~ (p*d + d^2/2) * H_kv * L * 4 / peak_bandwidth
//! ```
//!
//! FLOP and byte counts are kept as exact integers (`u128`) wherever the
//! rest of the crate needs order-independent, bit-reproducible accounting
//! (prefix-sharing ratios in particular); conversion to seconds happens at
//! the boundary with a single division by the peak rate.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Decimal giga. Config files carry GFLOP/s, GB/s and GB; internal
/// accounting is FLOPs, bytes and seconds.
pub const GIGA: f64 = 1e9;

#[derive(Debug, Error, PartialEq)]
pub enum CostModelError {
    #[error("model config field `{0}` must be strictly positive")]
    NonPositiveModelField(&'static str),
    #[error("kv_dim_per_layer ({kv}) exceeds hidden_dim ({hidden})")]
    KvDimTooLarge { kv: u64, hidden: u64 },
    #[error("hardware config field `{0}` must be strictly positive")]
    NonPositiveHardwareField(&'static str),
}

/// Transformer architecture constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Total parameter count (GEMM weights dominate; embeddings included).
    pub param_count: u64,
    /// Hidden dimension H.
    pub hidden_dim: u64,
    /// Total KV feature dimension per layer per token (all KV heads).
    pub kv_dim_per_layer: u64,
    /// Decoder layer count L.
    pub num_layers: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), CostModelError> {
        if self.param_count == 0 {
            return Err(CostModelError::NonPositiveModelField("param_count"));
        }
        if self.hidden_dim == 0 {
            return Err(CostModelError::NonPositiveModelField("hidden_dim"));
        }
        if self.kv_dim_per_layer == 0 {
            return Err(CostModelError::NonPositiveModelField("kv_dim_per_layer"));
        }
        if self.num_layers == 0 {
            return Err(CostModelError::NonPositiveModelField("num_layers"));
        }
        if self.kv_dim_per_layer > self.hidden_dim {
            return Err(CostModelError::KvDimTooLarge {
                kv: self.kv_dim_per_layer,
                hidden: self.hidden_dim,
            });
        }
        Ok(())
    }

    /// KV-cache bytes per token: K and V vectors in FP16 across all layers.
    pub fn kv_bytes_per_token(&self) -> u64 {
        self.kv_dim_per_layer * self.num_layers * 4
    }
}

/// GPU peak rates and the KV memory budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardwareConfig {
    /// Peak FP16 compute, GFLOP/s.
    pub peak_compute: f64,
    /// Peak memory bandwidth, GB/s.
    pub peak_bandwidth: f64,
    /// Memory available for KV cache, decimal GB.
    pub kv_memory_capacity: f64,
}

impl HardwareConfig {
    pub fn validate(&self) -> Result<(), CostModelError> {
        if !(self.peak_compute > 0.0) {
            return Err(CostModelError::NonPositiveHardwareField("peak_compute"));
        }
        if !(self.peak_bandwidth > 0.0) {
            return Err(CostModelError::NonPositiveHardwareField("peak_bandwidth"));
        }
        if !(self.kv_memory_capacity > 0.0) {
            return Err(CostModelError::NonPositiveHardwareField("kv_memory_capacity"));
        }
        Ok(())
    }

    pub fn peak_compute_flops(&self) -> f64 {
        self.peak_compute * GIGA
    }

    pub fn peak_bandwidth_bytes(&self) -> f64 {
        self.peak_bandwidth * GIGA
    }

    pub fn kv_capacity_bytes(&self) -> u64 {
        (self.kv_memory_capacity * GIGA).round() as u64
    }
}

/// Compute- and memory-bound operator time for one request, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RequestCost {
    pub comp_time: f64,
    pub mem_time: f64,
}

/// Totals for a request set plus the fraction of compute saved by prefix
/// sharing within the set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateCost {
    pub t_comp: f64,
    pub t_mem: f64,
    pub sharing_ratio: f64,
}

/// FLOPs for prefilling prompt positions `[start, end)`.
///
/// Per-token accounting: position `i` costs `2P` of GEMM plus `(2i+1)*4HL`
/// of self-attention, which telescopes to `(end-start)*2P +
/// (end^2-start^2)*4HL` so that summing disjoint ranges reproduces the
/// closed-form `p*2P + p^2*4HL` exactly.
pub fn prefill_flops(mc: &ModelConfig, start: u64, end: u64) -> u128 {
    debug_assert!(start <= end);
    let n = (end - start) as u128;
    let gemm = n * 2 * mc.param_count as u128;
    let attn_units = (end as u128) * (end as u128) - (start as u128) * (start as u128);
    let attn = attn_units * 4 * mc.hidden_dim as u128 * mc.num_layers as u128;
    gemm + attn
}

/// Self-attention FLOPs alone for prefilling positions `[start, end)`.
pub fn attn_flops(mc: &ModelConfig, start: u64, end: u64) -> u128 {
    let units = (end as u128) * (end as u128) - (start as u128) * (start as u128);
    units * 4 * mc.hidden_dim as u128 * mc.num_layers as u128
}

/// GEMM FLOPs for `d` decode tokens.
pub fn decode_flops(mc: &ModelConfig, d: u64) -> u128 {
    d as u128 * 2 * mc.param_count as u128
}

/// Total compute FLOPs of one request: `(p + d) * 2P + p^2 * 4HL`.
pub fn comp_flops(mc: &ModelConfig, p: u64, d: u64) -> u128 {
    prefill_flops(mc, 0, p) + decode_flops(mc, d)
}

/// Exact KV bytes loaded by decode self-attention: `sum_{i=1..d} (p + i)`
/// tokens, each `H_kv * L * 4` bytes.
pub fn decode_load_bytes(mc: &ModelConfig, p: u64, d: u64) -> u128 {
    let loaded_tokens = p as u128 * d as u128 + (d as u128 * (d as u128 + 1)) / 2;
    loaded_tokens * mc.kv_bytes_per_token() as u128
}

/// Compute-bound operator time of a single request, seconds.
pub fn comp_time(p: u64, d: u64, mc: &ModelConfig, hc: &HardwareConfig) -> f64 {
    comp_flops(mc, p, d) as f64 / hc.peak_compute_flops()
}

/// Memory-bound operator time, closed-form approximation
/// `(p*d + d^2/2) * H_kv * L * 4 / bandwidth`.
pub fn mem_time(p: u64, d: u64, mc: &ModelConfig, hc: &HardwareConfig) -> f64 {
    let loaded_tokens = p as f64 * d as f64 + 0.5 * d as f64 * d as f64;
    loaded_tokens * mc.kv_bytes_per_token() as f64 / hc.peak_bandwidth_bytes()
}

/// Memory-bound operator time from the exact summation; the oracle the
/// closed form approximates. Relative error of the closed form is
/// `(d/2) / (p*d + d(d+1)/2) <= 1/(d+1)`.
pub fn mem_time_exact(p: u64, d: u64, mc: &ModelConfig, hc: &HardwareConfig) -> f64 {
    decode_load_bytes(mc, p, d) as f64 / hc.peak_bandwidth_bytes()
}

/// Closed-form memory time for a fractional (estimated) output length.
pub fn mem_time_est(p: u64, d_est: f64, mc: &ModelConfig, hc: &HardwareConfig) -> f64 {
    let loaded_tokens = p as f64 * d_est + 0.5 * d_est * d_est;
    loaded_tokens * mc.kv_bytes_per_token() as f64 / hc.peak_bandwidth_bytes()
}

/// KV-cache resident bytes for one request that has prefilled `p` prompt
/// tokens and generated `t` output tokens.
pub fn kv_bytes(p: u64, t: u64, mc: &ModelConfig) -> u64 {
    (p + t) * mc.kv_bytes_per_token()
}

/// Compute density of a single request. `mem_time == 0` (pure-prefill
/// requests) reads as infinitely compute-dense; callers sort these leftmost.
pub fn density(cost: &RequestCost) -> f64 {
    if cost.mem_time == 0.0 {
        f64::INFINITY
    } else {
        cost.comp_time / cost.mem_time
    }
}

/// Compute density of a request set with intra-set sharing ratio `s`:
/// `(1 - s) * t_comp / t_mem`.
pub fn aggregate_density(agg: &AggregateCost) -> f64 {
    if agg.t_mem == 0.0 {
        f64::INFINITY
    } else {
        (1.0 - agg.sharing_ratio) * agg.t_comp / agg.t_mem
    }
}

/// Lower-bound processing time under perfect overlap and sharing ratio `s`:
/// `max((1 - s) * t_comp, t_mem)`.
pub fn optimal_time(agg: &AggregateCost) -> f64 {
    ((1.0 - agg.sharing_ratio) * agg.t_comp).max(agg.t_mem)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{default_hardware_config, default_model_config};

    fn unit_model() -> ModelConfig {
        ModelConfig {
            param_count: 1,
            hidden_dim: 1,
            kv_dim_per_layer: 1,
            num_layers: 1,
        }
    }

    /// Hardware with peak rates of 1 FLOP/s and 1 B/s so times read as raw
    /// FLOP/byte counts.
    fn unit_hardware() -> HardwareConfig {
        HardwareConfig {
            peak_compute: 1.0 / GIGA,
            peak_bandwidth: 1.0 / GIGA,
            kv_memory_capacity: 1.0,
        }
    }

    #[test]
    fn comp_time_zero_tokens() {
        assert_eq!(comp_time(0, 0, &unit_model(), &unit_hardware()), 0.0);
    }

    #[test]
    fn comp_time_hand_evaluated() {
        // p=1, d=0, P=1, H=1, L=1, peak 1 FLOP/s: (1*1*2 + 1*1*1*4) / 1 = 6.
        let t = comp_time(1, 0, &unit_model(), &unit_hardware());
        assert_eq!(t, 6.0);
    }

    #[test]
    fn mem_time_zero_decode() {
        let mc = default_model_config();
        let hc = default_hardware_config();
        for p in [0, 1, 100, 4096] {
            assert_eq!(mem_time(p, 0, &mc, &hc), 0.0);
            assert_eq!(mem_time_exact(p, 0, &mc, &hc), 0.0);
        }
    }

    #[test]
    fn mem_time_exact_sum_oracle() {
        // p=100, d=10, H_kv=1, L=1, bandwidth 1 B/s:
        // exact = sum_{i=1..10} (100+i) * 4 = 4220, approx = (1000+50)*4 = 4200.
        let mc = unit_model();
        let hc = unit_hardware();
        assert_eq!(mem_time_exact(100, 10, &mc, &hc), 4220.0);
        assert_eq!(mem_time(100, 10, &mc, &hc), 4200.0);
    }

    #[test]
    fn mem_time_relative_error_bound() {
        let mc = default_model_config();
        let hc = default_hardware_config();
        for &(p, d) in &[(0u64, 1u64), (0, 100), (17, 3), (1000, 100), (50, 100_000)] {
            let exact = mem_time_exact(p, d, &mc, &hc);
            let approx = mem_time(p, d, &mc, &hc);
            let rel = (approx - exact).abs() / exact;
            assert!(rel <= 1.0 / (d as f64 + 1.0) + 1e-12, "p={p} d={d} rel={rel}");
            if d >= 100 {
                assert!(rel < 0.01);
            }
        }
    }

    #[test]
    fn memory_intensive_beyond_4k_output() {
        // Under the bundled defaults, any request with p <= 1024 and output
        // longer than 4K tokens is memory-intensive (mem > comp).
        let mc = default_model_config();
        let hc = default_hardware_config();
        for p in [0u64, 64, 512, 1024] {
            for d in [4097u64, 8192, 16384] {
                let c = comp_time(p, d, &mc, &hc);
                let m = mem_time(p, d, &mc, &hc);
                assert!(m > c, "p={p} d={d}: mem {m} !> comp {c}");
            }
            // The comp/mem crossover itself sits below 4K output tokens.
            let mut lo = 1u64;
            let mut hi = 4096u64;
            assert!(mem_time(p, hi, &mc, &hc) > comp_time(p, hi, &mc, &hc));
            while lo + 1 < hi {
                let mid = (lo + hi) / 2;
                if mem_time(p, mid, &mc, &hc) > comp_time(p, mid, &mc, &hc) {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            assert!(hi < 4096, "crossover for p={p} at d={hi}");
        }
    }

    #[test]
    fn kv_bytes_examples() {
        let mc = ModelConfig {
            param_count: 1,
            hidden_dim: 2048,
            kv_dim_per_layer: 1024,
            num_layers: 32,
        };
        assert_eq!(kv_bytes(0, 0, &mc), 0);
        assert_eq!(kv_bytes(1, 0, &mc), 131_072);
        let mut prev = 0;
        for t in 0..64 {
            let b = kv_bytes(7, t, &mc);
            assert!(b >= prev);
            prev = b;
        }
    }

    #[test]
    fn density_basics() {
        let equal = RequestCost {
            comp_time: 0.25,
            mem_time: 0.25,
        };
        assert_eq!(density(&equal), 1.0);
        let no_mem = RequestCost {
            comp_time: 1.0,
            mem_time: 0.0,
        };
        assert!(density(&no_mem).is_infinite());
    }

    #[test]
    fn density_signs_for_benchmark_and_video_requests() {
        let mc = default_model_config();
        let hc = default_hardware_config();
        // Long prompt, two output tokens: strongly compute-intensive.
        let mmlu = RequestCost {
            comp_time: comp_time(800, 2, &mc, &hc),
            mem_time: mem_time(800, 2, &mc, &hc),
        };
        assert!(density(&mmlu).ln() > 0.0);
        // 16K output tokens: strongly memory-intensive.
        let video = RequestCost {
            comp_time: comp_time(60, 16384, &mc, &hc),
            mem_time: mem_time(60, 16384, &mc, &hc),
        };
        assert!(density(&video).ln() < 0.0);
    }

    #[test]
    fn density_decreasing_in_output_len() {
        let mc = default_model_config();
        let hc = default_hardware_config();
        let mut prev = f64::INFINITY;
        for d in [1u64, 2, 10, 100, 1000, 10000] {
            let rho = density(&RequestCost {
                comp_time: comp_time(512, d, &mc, &hc),
                mem_time: mem_time(512, d, &mc, &hc),
            });
            assert!(rho < prev, "d={d}");
            prev = rho;
        }
    }

    #[test]
    fn aggregate_density_degenerate_cases() {
        let single = AggregateCost {
            t_comp: 3.0,
            t_mem: 2.0,
            sharing_ratio: 0.0,
        };
        assert_eq!(
            aggregate_density(&single),
            density(&RequestCost {
                comp_time: 3.0,
                mem_time: 2.0
            })
        );
        let fully_shared = AggregateCost {
            t_comp: 3.0,
            t_mem: 2.0,
            sharing_ratio: 1.0,
        };
        assert_eq!(aggregate_density(&fully_shared), 0.0);
    }

    #[test]
    fn aggregate_density_matches_brute_force_for_shared_pair() {
        // Two identical requests with a fully shared prompt: computing the
        // prefix once must equal the (1-s)*T_comp form.
        let mc = default_model_config();
        let hc = default_hardware_config();
        let (p, d) = (500u64, 40u64);
        let t_comp = 2.0 * comp_time(p, d, &mc, &hc);
        let t_mem = 2.0 * mem_time_exact(p, d, &mc, &hc);
        let shared = prefill_flops(&mc, 0, p) as f64 / hc.peak_compute_flops();
        let s = shared / t_comp;
        let brute = (t_comp - shared) / t_mem;
        let agg = AggregateCost {
            t_comp,
            t_mem,
            sharing_ratio: s,
        };
        assert!((aggregate_density(&agg) - brute).abs() < 1e-12);
    }

    #[test]
    fn optimal_time_examples() {
        let agg = AggregateCost {
            t_comp: 10.0,
            t_mem: 4.0,
            sharing_ratio: 0.5,
        };
        assert_eq!(optimal_time(&agg), 5.0);
        let mem_floor = AggregateCost {
            t_comp: 3.0,
            t_mem: 4.0,
            sharing_ratio: 0.0,
        };
        assert_eq!(optimal_time(&mem_floor), 4.0);
    }

    #[test]
    fn optimal_time_monotone_and_bounded() {
        let mut prev = f64::INFINITY;
        for i in 0..=10 {
            let s = i as f64 / 10.0;
            let agg = AggregateCost {
                t_comp: 7.0,
                t_mem: 2.5,
                sharing_ratio: s,
            };
            let t = optimal_time(&agg);
            assert!(t <= prev);
            assert!(t <= (1.0 - s) * 7.0 + 2.5);
            if (1.0 - s) * 7.0 <= 2.5 {
                assert_eq!(t, 2.5);
            }
            prev = t;
        }
    }

    #[test]
    fn doubling_compute_halves_comp_time_exactly() {
        let mc = default_model_config();
        let hc = default_hardware_config();
        let fast = HardwareConfig {
            peak_compute: hc.peak_compute * 2.0,
            ..hc.clone()
        };
        for &(p, d) in &[(1u64, 0u64), (123, 456), (4096, 16384)] {
            assert_eq!(comp_time(p, d, &mc, &fast), comp_time(p, d, &mc, &hc) / 2.0);
        }
    }

    #[test]
    fn config_validation() {
        let mut mc = default_model_config();
        assert!(mc.validate().is_ok());
        mc.kv_dim_per_layer = mc.hidden_dim + 1;
        assert!(matches!(
            mc.validate(),
            Err(CostModelError::KvDimTooLarge { .. })
        ));
        let mut hc = default_hardware_config();
        assert!(hc.validate().is_ok());
        hc.peak_bandwidth = 0.0;
        assert!(hc.validate().is_err());
    }
}
