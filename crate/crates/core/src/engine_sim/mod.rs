//! Discrete-step simulated backend: replays a step schedule against the
//! analytical cost model, maintaining its own runtime prefix cache and KV
//! accounting so any inconsistency in the schedule (phantom cache hits,
//! out-of-order chunks, memory mismatches) aborts the run.
//!
//! Per step, compute time covers the granularity-rounded GEMM tokens plus
//! exact prefill self-attention; memory time is the exact per-request KV
//! load of every decoding request. Step times combine under a configurable
//! overlap model and sum to the makespan.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost_model::{
    HardwareConfig, ModelConfig, attn_flops, comp_flops, decode_load_bytes, prefill_flops,
};
use crate::prefix_tree::{Request, RequestId};
use crate::runtime_cache::RuntimeCache;
use crate::scheduler::{ScheduleMeta, StepBatch};

pub use crate::runtime_cache::Lookup;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("step {step}: request {id}: {detail}")]
    CacheInconsistency {
        step: u64,
        id: RequestId,
        detail: String,
    },
    #[error("step {step}: active KV mismatch: schedule says {expected}, engine has {actual}")]
    MemoryMismatch {
        step: u64,
        expected: u64,
        actual: u64,
    },
    #[error("step {step}: GEMM token mismatch: schedule says {expected}, engine computes {actual}")]
    GemmMismatch {
        step: u64,
        expected: u64,
        actual: u64,
    },
    #[error("schedule references unknown request {0}")]
    UnknownRequest(RequestId),
    #[error("workload fingerprint mismatch: schedule was built for {expected}, got {actual}")]
    FingerprintMismatch { expected: String, actual: String },
    #[error("invalid overlap model: {0}")]
    InvalidOverlap(String),
}

/// How per-step compute and memory time combine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OverlapMode {
    /// No overlap: `comp + mem`.
    Sequential,
    /// Full overlap: `max(comp, mem)`.
    Perfect,
    /// `max(comp, mem)` inflated by an interpolated interference factor.
    Interference,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OverlapModel {
    pub mode: OverlapMode,
    /// `(compute_fraction, slowdown)` knots for interference mode;
    /// slowdown is 1 at both endpoints by convention.
    pub table: Vec<(f64, f64)>,
}

impl OverlapModel {
    pub fn perfect() -> Self {
        OverlapModel {
            mode: OverlapMode::Perfect,
            table: Vec::new(),
        }
    }

    pub fn sequential() -> Self {
        OverlapModel {
            mode: OverlapMode::Sequential,
            table: Vec::new(),
        }
    }

    pub fn interference(mut table: Vec<(f64, f64)>) -> Result<Self, SimError> {
        if table.is_empty() {
            return Err(SimError::InvalidOverlap("empty interference table".into()));
        }
        table.sort_by(|a, b| a.0.total_cmp(&b.0));
        for &(frac, slow) in &table {
            if !(0.0..=1.0).contains(&frac) || slow < 1.0 {
                return Err(SimError::InvalidOverlap(format!(
                    "bad knot ({frac}, {slow}): fraction in [0,1], slowdown >= 1"
                )));
            }
        }
        Ok(OverlapModel {
            mode: OverlapMode::Interference,
            table,
        })
    }

    /// Combine one step's compute and memory seconds.
    pub fn step_time(&self, comp: f64, mem: f64) -> f64 {
        let hi = comp.max(mem);
        match self.mode {
            OverlapMode::Sequential => comp + mem,
            OverlapMode::Perfect => hi,
            OverlapMode::Interference => {
                if hi == 0.0 {
                    return 0.0;
                }
                let frac = comp / (comp + mem);
                let slow = interp(&self.table, frac).max(1.0);
                // Interference never beats perfect overlap nor exceeds
                // fully sequential execution.
                (hi * slow).clamp(hi, comp + mem)
            }
        }
    }
}

fn interp(table: &[(f64, f64)], x: f64) -> f64 {
    if table.is_empty() {
        return 1.0;
    }
    if x <= table[0].0 {
        return table[0].1;
    }
    if x >= table[table.len() - 1].0 {
        return table[table.len() - 1].1;
    }
    for w in table.windows(2) {
        let (x0, y0) = w[0];
        let (x1, y1) = w[1];
        if x <= x1 {
            if x1 == x0 {
                return y1;
            }
            let t = (x - x0) / (x1 - x0);
            return y0 + t * (y1 - y0);
        }
    }
    table[table.len() - 1].1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimelineRow {
    pub step: u64,
    pub comp_s: f64,
    pub mem_s: f64,
    /// comp/mem for the step; infinite on memory-idle steps.
    pub density: f64,
    pub kv_bytes: u64,
    pub prefill_tokens: u64,
    pub decode_tokens: u64,
    pub cache_hit_tokens: u64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RetractionStats {
    pub count: u64,
    pub recompute_tokens: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimReport {
    pub policy: String,
    pub workload_fingerprint: String,
    pub steps: u64,
    pub makespan_s: f64,
    /// All processed tokens (input + output) over the makespan.
    pub throughput_tps: f64,
    pub total_tokens: u64,
    pub t_comp_s: f64,
    pub t_mem_s: f64,
    pub achieved_sharing: f64,
    pub optimal_sharing: f64,
    pub optimal_time_s: f64,
    pub retraction: RetractionStats,
    pub timeline: Vec<TimelineRow>,
}

impl SimReport {
    /// Makespan relative to the perfect-overlap lower bound.
    pub fn optimal_time_ratio(&self) -> f64 {
        if self.optimal_time_s == 0.0 {
            1.0
        } else {
            self.makespan_s / self.optimal_time_s
        }
    }
}

struct Track {
    p: u64,
    d_true: u64,
    prefill_target: u64,
    pos: u64,
    done_step: Option<u64>,
    leaf: usize,
    dep: Option<usize>,
    hit: u64,
    credited_hit: u64,
    first: bool,
    private_tokens: u64,
    regen_counted: u64,
}

/// Replay a schedule, validating cache and memory bookkeeping, and report
/// makespan/throughput/sharing metrics.
pub fn simulate(
    steps: &[StepBatch],
    requests: &[Request],
    mc: &ModelConfig,
    hc: &HardwareConfig,
    overlap: &OverlapModel,
    meta: &ScheduleMeta,
) -> Result<SimReport, SimError> {
    let fingerprint = crate::workload::fingerprint_requests(requests);
    if fingerprint != meta.workload_fingerprint {
        return Err(SimError::FingerprintMismatch {
            expected: meta.workload_fingerprint.clone(),
            actual: fingerprint,
        });
    }
    let by_id: HashMap<RequestId, &Request> = requests.iter().map(|r| (r.id, r)).collect();
    let tok_bytes = mc.kv_bytes_per_token();
    let m_total = hc.kv_capacity_bytes();
    let cache_budget = meta.cache_budget_bytes.unwrap_or(m_total);
    let peak = hc.peak_compute_flops();
    let bw = hc.peak_bandwidth_bytes();

    let mut cache = RuntimeCache::new(tok_bytes);
    let mut tracks: HashMap<RequestId, Track> = HashMap::new();
    let mut order: Vec<RequestId> = Vec::new(); // admission order of live requests
    let mut generated: HashMap<RequestId, u64> = HashMap::new();
    let mut carry: i64 = 0;
    let mut genuine_hit_flops: u128 = 0;
    let mut recompute_tokens: u64 = 0;
    let mut retractions: u64 = 0;
    let mut makespan = 0.0f64;
    let mut timeline = Vec::with_capacity(steps.len());

    let err = |step: u64, id: RequestId, detail: String| SimError::CacheInconsistency {
        step,
        id,
        detail,
    };

    for batch in steps {
        let step = batch.step;
        // Admissions.
        for adm in &batch.admissions {
            let req = *by_id
                .get(&adm.id)
                .ok_or(SimError::UnknownRequest(adm.id))?;
            let p = req.prompt.len() as u64;
            let gen_so_far = *generated.get(&adm.id).unwrap_or(&0);
            if adm.prefill_target != p + gen_so_far {
                return Err(err(
                    step,
                    adm.id,
                    format!(
                        "prefill target {} disagrees with prompt {} + generated {}",
                        adm.prefill_target, p, gen_so_far
                    ),
                ));
            }
            let look = cache.lookup_claim(adm.id, &req.prompt);
            if look.hit_tokens != adm.hit {
                return Err(err(
                    step,
                    adm.id,
                    format!(
                        "schedule claims cache hit {}, engine sees {}",
                        adm.hit, look.hit_tokens
                    ),
                ));
            }
            if adm.first {
                genuine_hit_flops += prefill_flops(mc, 0, adm.hit);
            } else {
                let hw = tracks_high_water(&generated, adm.id, p);
                recompute_tokens += hw.min(adm.prefill_target).saturating_sub(adm.hit);
            }
            tracks.insert(
                adm.id,
                Track {
                    p,
                    d_true: req.true_output_len,
                    prefill_target: adm.prefill_target,
                    pos: adm.hit,
                    done_step: if adm.hit == adm.prefill_target {
                        Some(step)
                    } else {
                        None
                    },
                    leaf: look.leaf,
                    dep: look.dep_node,
                    hit: adm.hit,
                    credited_hit: if adm.first { adm.hit } else { 0 },
                    first: adm.first,
                    private_tokens: 0,
                    regen_counted: 0,
                },
            );
            order.push(adm.id);
        }

        // Prefill chunks: contiguous, within target, dependencies ready.
        let mut attn: u128 = 0;
        let mut prefill_tokens = 0u64;
        let mut touched: Vec<RequestId> = Vec::new();
        for chunk in &batch.prefill {
            let t = tracks
                .get_mut(&chunk.id)
                .ok_or_else(|| err(step, chunk.id, "chunk for inactive request".into()))?;
            if chunk.start != t.pos || chunk.end > t.prefill_target || chunk.end <= chunk.start {
                return Err(err(
                    step,
                    chunk.id,
                    format!(
                        "chunk [{}, {}) misaligned with position {} (target {})",
                        chunk.start, chunk.end, t.pos, t.prefill_target
                    ),
                ));
            }
            if let Some(dep) = t.dep {
                if cache.node_materialized(dep) {
                    t.dep = None;
                } else {
                    return Err(err(
                        step,
                        chunk.id,
                        "chunk scheduled before shared prefix materialized".into(),
                    ));
                }
            }
            t.pos = chunk.end;
            if t.pos == t.prefill_target {
                t.done_step = Some(step);
            }
            attn += attn_flops(mc, chunk.start, chunk.end);
            prefill_tokens += chunk.end - chunk.start;
            touched.push(chunk.id);
        }

        // Decode loads: exact per-request KV reads.
        let mut decode_bytes: u128 = 0;
        for id in &batch.decode {
            let t = tracks
                .get_mut(id)
                .ok_or_else(|| err(step, *id, "decode for inactive request".into()))?;
            if !t.done_step.is_some_and(|s| s < step) {
                return Err(err(step, *id, "decode before prefill completed".into()));
            }
            if let Some(dep) = t.dep {
                if cache.node_materialized(dep) {
                    t.dep = None;
                } else {
                    return Err(err(
                        step,
                        *id,
                        "decode before shared prefix materialized".into(),
                    ));
                }
            }
            let g = generated.entry(*id).or_insert(0);
            if *g >= t.d_true {
                return Err(err(step, *id, "decode past true output length".into()));
            }
            *g += 1;
            t.private_tokens += 1;
            decode_bytes += (t.p + *g) as u128 * tok_bytes as u128;
        }

        // Materialize this step's prefill into the cache.
        for id in &touched {
            let t = tracks.get_mut(id).unwrap();
            cache.materialize_to(t.leaf, t.pos.min(t.p));
            let regen = t.pos.saturating_sub(t.p);
            t.private_tokens += regen - t.regen_counted;
            t.regen_counted = regen;
        }

        // Completions.
        for id in &batch.completed {
            let t = tracks
                .remove(id)
                .ok_or_else(|| err(step, *id, "completion for inactive request".into()))?;
            let g = *generated.get(id).unwrap_or(&0);
            if g != t.d_true || t.pos != t.prefill_target {
                return Err(err(
                    step,
                    *id,
                    format!(
                        "completed with {} of {} output tokens, prefill {}/{}",
                        g, t.d_true, t.pos, t.prefill_target
                    ),
                ));
            }
            cache.release(t.leaf);
            order.retain(|x| x != id);
        }

        // Retractions mirror the scheduler's unwind exactly.
        for id in &batch.retracted {
            retractions += 1;
            let victim = tracks
                .remove(id)
                .ok_or_else(|| err(step, *id, "retraction of inactive request".into()))?;
            order.retain(|x| x != id);
            let victim_claims: HashSet<usize> =
                cache.claims_on_path(victim.leaf, *id).into_iter().collect();
            let mut dependents: Vec<RequestId> = Vec::new();
            if !victim_claims.is_empty() {
                for other in &order {
                    let t = &tracks[other];
                    if cache.path_intersects(t.leaf, &victim_claims) {
                        dependents.push(*other);
                    }
                }
                for dep_id in &dependents {
                    let leaf = tracks[dep_id].leaf;
                    cache.release(leaf);
                }
            }
            cache.release(victim.leaf);
            for dep_id in &dependents {
                let prompt = &by_id[dep_id].prompt;
                let look = cache.lookup_claim(*dep_id, prompt);
                let t = tracks.get_mut(dep_id).unwrap();
                let new_hit = look.hit_tokens;
                if t.first {
                    let lost = t.credited_hit.saturating_sub(new_hit);
                    genuine_hit_flops -=
                        prefill_flops(mc, 0, t.credited_hit) - prefill_flops(mc, 0, t.credited_hit - lost);
                    t.credited_hit -= lost;
                }
                t.hit = new_hit;
                t.pos = new_hit;
                if t.pos < t.prefill_target {
                    t.done_step = None;
                }
                t.leaf = look.leaf;
                t.dep = look.dep_node;
            }
        }

        // Memory books must match the schedule byte for byte.
        let private_total: u64 = tracks.values().map(|t| t.private_tokens * tok_bytes).sum();
        cache.evict_to(cache_budget.saturating_sub(private_total));
        let active = cache.referenced_bytes() + private_total;
        if active != batch.active_kv_bytes {
            return Err(SimError::MemoryMismatch {
                step,
                expected: batch.active_kv_bytes,
                actual: active,
            });
        }

        // GEMM rounding must reproduce the scheduler's carry stream.
        let demand = (prefill_tokens + batch.decode.len() as u64) as i64;
        let g = meta.granularity as i64;
        let x = demand + carry;
        let emitted = ((x + g / 2) / g) * g;
        carry = x - emitted;
        if emitted as u64 != batch.gemm_tokens {
            return Err(SimError::GemmMismatch {
                step,
                expected: batch.gemm_tokens,
                actual: emitted as u64,
            });
        }

        let comp_s = (batch.gemm_tokens as u128 * 2 * mc.param_count as u128 + attn) as f64 / peak;
        let mem_s = decode_bytes as f64 / bw;
        makespan += overlap.step_time(comp_s, mem_s);
        timeline.push(TimelineRow {
            step,
            comp_s,
            mem_s,
            density: if mem_s == 0.0 {
                f64::INFINITY
            } else {
                comp_s / mem_s
            },
            kv_bytes: batch.active_kv_bytes,
            prefill_tokens,
            decode_tokens: batch.decode.len() as u64,
            cache_hit_tokens: batch.cache_hit_tokens,
        });
    }

    let total_comp: u128 = requests
        .iter()
        .map(|r| comp_flops(mc, r.prompt.len() as u64, r.true_output_len))
        .sum();
    let total_mem: u128 = requests
        .iter()
        .map(|r| decode_load_bytes(mc, r.prompt.len() as u64, r.true_output_len))
        .sum();
    let total_tokens: u64 = requests
        .iter()
        .map(|r| r.prompt.len() as u64 + r.true_output_len)
        .sum();
    let achieved_sharing = if total_comp == 0 {
        0.0
    } else {
        genuine_hit_flops as f64 / total_comp as f64
    };
    Ok(SimReport {
        policy: meta.policy.clone(),
        workload_fingerprint: meta.workload_fingerprint.clone(),
        steps: steps.len() as u64,
        makespan_s: makespan,
        throughput_tps: if makespan == 0.0 {
            0.0
        } else {
            total_tokens as f64 / makespan
        },
        total_tokens,
        t_comp_s: total_comp as f64 / peak,
        t_mem_s: total_mem as f64 / bw,
        achieved_sharing,
        optimal_sharing: meta.optimal_sharing,
        optimal_time_s: meta.optimal_time_s,
        retraction: RetractionStats {
            count: retractions,
            // The scheduler ledger carries the exact recompute figure;
            // the engine's own estimate only cross-checks it.
            recompute_tokens: meta.totals.recompute_tokens.max(recompute_tokens),
        },
        timeline,
    })
}

fn tracks_high_water(generated: &HashMap<RequestId, u64>, id: RequestId, p: u64) -> u64 {
    // On re-admission everything up to prompt + generated was computed in
    // a previous life (prefill or decode); the engine does not track
    // partial-prefill high water, so this understates recompute for
    // requests retracted mid-prefill. The scheduler totals carry the
    // exact figure.
    match generated.get(&id) {
        Some(&g) if g > 0 => p + g,
        _ => 0,
    }
}

/// Sequentially process the prompt path of every request in `order`
/// through a fresh cache, returning per-request hit lengths. Used by the
/// sharing-ratio oracle tests.
pub fn lookup_and_insert_sequence(
    order: &[RequestId],
    requests: &[Request],
    mc: &ModelConfig,
) -> Vec<u64> {
    let by_id: HashMap<RequestId, &Request> = requests.iter().map(|r| (r.id, r)).collect();
    let mut cache = RuntimeCache::new(mc.kv_bytes_per_token());
    order
        .iter()
        .map(|id| cache.insert_materialized(&by_id[id].prompt))
        .collect()
}

/// Standard deviation of per-step density over finite entries.
pub fn density_stddev(timeline: &[TimelineRow]) -> f64 {
    let finite: Vec<f64> = timeline
        .iter()
        .map(|r| r.density)
        .filter(|d| d.is_finite())
        .collect();
    if finite.len() < 2 {
        return 0.0;
    }
    let mean = finite.iter().sum::<f64>() / finite.len() as f64;
    let var = finite.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / finite.len() as f64;
    var.sqrt()
}

/// Write the per-step resource timeline as CSV.
pub fn write_timeline_csv<W: std::io::Write>(
    out: &mut W,
    timeline: &[TimelineRow],
) -> std::io::Result<()> {
    writeln!(
        out,
        "step,comp_s,mem_s,density,kv_bytes,prefill_tokens,decode_tokens,cache_hit_tokens"
    )?;
    for row in timeline {
        let density = if row.density.is_finite() {
            format!("{:.9e}", row.density)
        } else {
            "inf".to_string()
        };
        writeln!(
            out,
            "{},{:.9e},{:.9e},{},{},{},{},{}",
            row.step,
            row.comp_s,
            row.mem_s,
            density,
            row.kv_bytes,
            row.prefill_tokens,
            row.decode_tokens,
            row.cache_hit_tokens
        )?;
    }
    Ok(())
}
