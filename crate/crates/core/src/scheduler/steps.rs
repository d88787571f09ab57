//! Step formation: replay a scheduled order through continuous batching
//! with chunked prefill, per-partition admission control, a runtime prefix
//! cache, retraction on memory overflow, and granularity-rounded GEMM
//! token accounting. The result is an executable step stream the engine
//! simulator replays and validates.

use std::collections::{HashMap, HashSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ScheduledOrder, Side};
use crate::cost_model::{HardwareConfig, ModelConfig};
use crate::prefix_tree::{Request, RequestId};
use crate::runtime_cache::RuntimeCache;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SchedulerConfig {
    /// GEMM batch-size granularity in tokens.
    pub granularity: u64,
    /// Prefill tokens scheduled per step.
    pub chunk_budget: u64,
    /// Prefix-cache byte budget; `None` shares the KV capacity.
    pub cache_budget_bytes: Option<u64>,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            granularity: 128,
            chunk_budget: 2048,
            cache_budget_bytes: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum ScheduleError {
    #[error("request {id} needs {bytes} KV bytes, exceeding capacity {capacity}")]
    RequestExceedsMemory {
        id: RequestId,
        bytes: u64,
        capacity: u64,
    },
    #[error("request {id} retracted too many times; projection cannot stabilize")]
    RetractionLivelock { id: RequestId },
    #[error("scheduler stalled at step {step} with work remaining")]
    Stalled { step: u64 },
    #[error("invalid scheduler config: {0}")]
    InvalidConfig(String),
    #[error("order references unknown request {0}")]
    UnknownRequest(RequestId),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Admission {
    pub id: RequestId,
    pub side: Side,
    /// Cached tokens at admission (materialized or in flight).
    pub hit: u64,
    /// Prompt tokens plus any generated tokens to re-prefill.
    pub prefill_target: u64,
    /// False for re-admissions after retraction.
    pub first: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefillChunk {
    pub id: RequestId,
    pub start: u64,
    pub end: u64,
}

/// One simulated engine iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepBatch {
    pub step: u64,
    /// Current (left, right) partition in bytes.
    pub partition: [u64; 2],
    pub admissions: Vec<Admission>,
    pub prefill: Vec<PrefillChunk>,
    pub decode: Vec<RequestId>,
    pub completed: Vec<RequestId>,
    pub retracted: Vec<RequestId>,
    /// Prefill + decode tokens, rounded to the granularity with carry.
    pub gemm_tokens: u64,
    /// Referenced cache bytes plus private decode KV at end of step.
    pub active_kv_bytes: u64,
    pub cache_hit_tokens: u64,
}

/// Token bookkeeping over a whole schedule. Conservation:
/// `scheduled_prefill = prompt_tokens - genuine_hit - readmission_hit + recompute`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ScheduleTotals {
    pub steps: u64,
    pub prompt_tokens: u64,
    pub genuine_hit_tokens: u64,
    pub readmission_hit_tokens: u64,
    pub recompute_tokens: u64,
    pub scheduled_prefill_tokens: u64,
    pub decode_tokens: u64,
    pub retractions: u64,
}

/// Sidecar metadata written next to a schedule; carries everything the
/// simulator needs beyond the step stream itself.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduleMeta {
    pub policy: String,
    pub seed: u64,
    pub sample_prob: f64,
    pub waste_threshold: u64,
    pub granularity: u64,
    pub chunk_budget: u64,
    pub cache_budget_bytes: Option<u64>,
    pub workload_fingerprint: String,
    pub total_requests: u64,
    pub rho_root_estimate: f64,
    /// Unlimited-cache sharing bound of the tree before outlier splitting.
    pub optimal_sharing: f64,
    /// Sharing bound of the final (split) tree.
    pub tree_sharing: f64,
    pub split_waste_tokens: u64,
    pub t_comp_s: f64,
    pub t_mem_s: f64,
    pub optimal_time_s: f64,
    /// Token ledger of the formed schedule.
    pub totals: ScheduleTotals,
}

#[derive(Debug, Clone, Default)]
struct ReqState {
    admitted_before: bool,
    generated: u64,
    retractions: u32,
    high_water: u64,
    d_proj: u64,
}

#[derive(Debug, Clone)]
struct Active {
    id: RequestId,
    side: usize,
    p: u64,
    d_true: u64,
    prefill_target: u64,
    prefill_pos: u64,
    prefill_done_step: Option<u64>,
    hit: u64,
    credited_hit: u64,
    first: bool,
    leaf: usize,
    dep: Option<usize>,
    projected_bytes: u64,
    private_tokens: u64,
    regen_counted: u64,
    admit_index: u64,
}

#[derive(Debug, Clone)]
struct QItem {
    id: RequestId,
    regime: usize,
}

/// Deterministic step-stream generator.
pub struct StepStream<'a> {
    requests: HashMap<RequestId, &'a Request>,
    estimates: HashMap<RequestId, f64>,
    tok_bytes: u64,
    m_total: u64,
    cache_budget: u64,
    granularity: u64,
    chunk_budget: u64,
    queues: [VecDeque<QItem>; 2],
    partitions: Vec<[u64; 2]>,
    regime_applied: usize,
    cache: RuntimeCache,
    actives: Vec<Active>,
    req_state: HashMap<RequestId, ReqState>,
    side_projected: [u64; 2],
    carry: i64,
    step: u64,
    admit_counter: u64,
    totals: ScheduleTotals,
    failed: bool,
}

/// Build the step stream for an order. `estimates` maps every request to
/// its (estimated) output length; admission projects KV peaks from it
/// while true lengths drive decode completion.
pub fn form_steps<'a>(
    order: &ScheduledOrder,
    requests: &'a [Request],
    estimates: HashMap<RequestId, f64>,
    mc: &ModelConfig,
    hc: &HardwareConfig,
    cfg: &SchedulerConfig,
) -> Result<StepStream<'a>, ScheduleError> {
    if cfg.granularity == 0 || cfg.chunk_budget == 0 {
        return Err(ScheduleError::InvalidConfig(
            "granularity and chunk_budget must be positive".into(),
        ));
    }
    let by_id: HashMap<RequestId, &Request> = requests.iter().map(|r| (r.id, r)).collect();
    for e in &order.entries {
        if !by_id.contains_key(&e.id) {
            return Err(ScheduleError::UnknownRequest(e.id));
        }
        if !estimates.contains_key(&e.id) {
            return Err(ScheduleError::InvalidConfig(format!(
                "no output-length estimate for request {}",
                e.id
            )));
        }
    }
    let mut queues = [VecDeque::new(), VecDeque::new()];
    for e in &order.entries {
        let side = match e.side {
            Side::Left => 0,
            Side::Right => 1,
        };
        queues[side].push_back(QItem {
            id: e.id,
            regime: e.regime as usize,
        });
    }
    let partitions: Vec<[u64; 2]> = order
        .partitions
        .iter()
        .map(|p| [p.left_bytes(), p.right_bytes()])
        .collect();
    let m_total = hc.kv_capacity_bytes();
    Ok(StepStream {
        requests: by_id,
        estimates,
        tok_bytes: mc.kv_bytes_per_token(),
        m_total,
        cache_budget: cfg.cache_budget_bytes.unwrap_or(m_total),
        granularity: cfg.granularity,
        chunk_budget: cfg.chunk_budget,
        queues,
        partitions: if partitions.is_empty() {
            vec![[m_total, 0]]
        } else {
            partitions
        },
        regime_applied: 0,
        cache: RuntimeCache::new(mc.kv_bytes_per_token()),
        actives: Vec::new(),
        req_state: HashMap::new(),
        side_projected: [0, 0],
        carry: 0,
        step: 0,
        admit_counter: 0,
        totals: ScheduleTotals::default(),
        failed: false,
    })
}

impl<'a> StepStream<'a> {
    pub fn totals(&self) -> &ScheduleTotals {
        &self.totals
    }

    fn part_bytes(&self) -> [u64; 2] {
        self.partitions[self.regime_applied]
    }

    fn private_total(&self) -> u64 {
        self.actives
            .iter()
            .map(|a| a.private_tokens * self.tok_bytes)
            .sum()
    }

    fn projection(&self, id: RequestId, prefill_target: u64, hit: u64, generated: u64) -> u64 {
        let st = &self.req_state[&id];
        let d_rem = st.d_proj.saturating_sub(generated).max(1);
        (prefill_target - hit + d_rem) * self.tok_bytes
    }

    /// Produce the next step, or `None` when the workload is drained.
    pub fn next_step(&mut self) -> Result<Option<StepBatch>, ScheduleError> {
        if self.failed {
            return Ok(None);
        }
        if self.queues[0].is_empty() && self.queues[1].is_empty() && self.actives.is_empty() {
            return Ok(None);
        }
        let step = self.step;
        let mut batch = StepBatch {
            step,
            partition: self.part_bytes(),
            admissions: Vec::new(),
            prefill: Vec::new(),
            decode: Vec::new(),
            completed: Vec::new(),
            retracted: Vec::new(),
            gemm_tokens: 0,
            active_kv_bytes: 0,
            cache_hit_tokens: 0,
        };
        match self.run_step(&mut batch) {
            Ok(()) => {
                self.step += 1;
                self.totals.steps = self.step;
                Ok(Some(batch))
            }
            Err(e) => {
                self.failed = true;
                Err(e)
            }
        }
    }

    fn run_step(&mut self, batch: &mut StepBatch) -> Result<(), ScheduleError> {
        let step = self.step;

        // 1. Admission, left side first.
        for side in 0..2 {
            loop {
                let Some(front) = self.queues[side].front() else {
                    break;
                };
                let id = front.id;
                let regime = front.regime;
                if regime > self.regime_applied {
                    // The cursor advanced into a new scanner node.
                    self.regime_applied = regime;
                    batch.partition = self.part_bytes();
                }
                let req = self.requests[&id];
                let p = req.prompt.len() as u64;
                let st = self.req_state.entry(id).or_insert_with(|| ReqState {
                    d_proj: 0,
                    ..Default::default()
                });
                if st.d_proj == 0 {
                    let est = self.estimates[&id].ceil().max(1.0) as u64;
                    st.d_proj = est;
                }
                let generated = st.generated;
                let d_proj = st.d_proj;
                let prefill_target = p + generated;
                // A request that cannot fit on an empty device is an error.
                if (p + d_proj) * self.tok_bytes > self.m_total {
                    return Err(ScheduleError::RequestExceedsMemory {
                        id,
                        bytes: (p + d_proj) * self.tok_bytes,
                        capacity: self.m_total,
                    });
                }
                let look = self.cache.lookup_claim(id, &req.prompt);
                let hit = look.hit_tokens;
                let marginal = self.projection(id, prefill_target, hit, generated);
                let parts = self.part_bytes();
                let side_has_actives = self.actives.iter().any(|a| a.side == side);
                let fits = self.side_projected[side] + marginal <= parts[side]
                    || (!side_has_actives
                        && self.side_projected[0] + self.side_projected[1] + marginal
                            <= self.m_total);
                if !fits {
                    self.cache.release(look.leaf);
                    break;
                }
                self.queues[side].pop_front();
                let st = self.req_state.get_mut(&id).unwrap();
                let first = !st.admitted_before;
                st.admitted_before = true;
                let credited = if first {
                    self.totals.prompt_tokens += p;
                    self.totals.genuine_hit_tokens += hit;
                    hit
                } else {
                    let hw = st.high_water;
                    self.totals.recompute_tokens +=
                        hw.min(prefill_target).saturating_sub(hit);
                    self.totals.readmission_hit_tokens += hit.saturating_sub(hw.min(hit));
                    0
                };
                let done = hit == prefill_target;
                self.actives.push(Active {
                    id,
                    side,
                    p,
                    d_true: req.true_output_len,
                    prefill_target,
                    prefill_pos: hit,
                    prefill_done_step: if done { Some(step) } else { None },
                    hit,
                    credited_hit: credited,
                    first,
                    leaf: look.leaf,
                    dep: look.dep_node,
                    projected_bytes: marginal,
                    private_tokens: 0,
                    regen_counted: 0,
                    admit_index: self.admit_counter,
                });
                self.admit_counter += 1;
                self.side_projected[side] += marginal;
                batch.cache_hit_tokens += hit;
                batch.admissions.push(Admission {
                    id,
                    side: if side == 0 { Side::Left } else { Side::Right },
                    hit,
                    prefill_target,
                    first,
                });
            }
        }

        // 2. Chunked prefill in admission order under the token budget;
        //    requests whose hit prefix is still being computed by another
        //    request wait for it to materialize.
        let mut budget = self.chunk_budget;
        let mut touched: Vec<usize> = Vec::new();
        for i in 0..self.actives.len() {
            if budget == 0 {
                break;
            }
            let a = &self.actives[i];
            if a.prefill_pos >= a.prefill_target {
                continue;
            }
            if let Some(dep) = a.dep {
                if self.cache.node_materialized(dep) {
                    self.actives[i].dep = None;
                } else {
                    continue;
                }
            }
            let a = &mut self.actives[i];
            let take = (a.prefill_target - a.prefill_pos).min(budget);
            batch.prefill.push(PrefillChunk {
                id: a.id,
                start: a.prefill_pos,
                end: a.prefill_pos + take,
            });
            a.prefill_pos += take;
            budget -= take;
            if a.prefill_pos == a.prefill_target {
                a.prefill_done_step = Some(step);
            }
            touched.push(i);
        }
        let prefill_tokens: u64 = batch.prefill.iter().map(|c| c.end - c.start).sum();
        self.totals.scheduled_prefill_tokens += prefill_tokens;

        // 3. Decode: one token per active request with completed prefill
        //    (and a materialized prefix where it was shared in flight).
        for a in self.actives.iter_mut() {
            if !a.prefill_done_step.is_some_and(|s| s < step) {
                continue;
            }
            if let Some(dep) = a.dep {
                if self.cache.node_materialized(dep) {
                    a.dep = None;
                } else {
                    continue;
                }
            }
            let st = self.req_state.get_mut(&a.id).unwrap();
            if st.generated < a.d_true {
                st.generated += 1;
                a.private_tokens += 1;
                batch.decode.push(a.id);
            }
        }
        self.totals.decode_tokens += batch.decode.len() as u64;

        // 4. Chunks computed this step materialize at its end; positions
        //    beyond the original prompt are regenerated private KV.
        for &i in &touched {
            let a = &mut self.actives[i];
            self.cache.materialize_to(a.leaf, a.prefill_pos.min(a.p));
            let regen = a.prefill_pos.saturating_sub(a.p);
            let delta = regen - a.regen_counted;
            a.private_tokens += delta;
            a.regen_counted = regen;
        }

        // 5. Completions release private KV; the prompt path stays cached.
        let mut idx = 0;
        while idx < self.actives.len() {
            let a = &self.actives[idx];
            let done = a.prefill_done_step.is_some_and(|s| s <= step)
                && a.dep.is_none()
                && self.req_state[&a.id].generated >= a.d_true
                && a.prefill_pos == a.prefill_target;
            if done {
                let a = self.actives.remove(idx);
                self.cache.release(a.leaf);
                self.side_projected[a.side] -= a.projected_bytes;
                batch.completed.push(a.id);
            } else {
                idx += 1;
            }
        }

        // 6. Memory control: retract the most recently admitted request on
        //    the most oversubscribed side while the active working set
        //    exceeds capacity, then drop idle cache to its budget. The
        //    single end-of-step eviction keeps the cache state replayable.
        loop {
            let private = self.private_total();
            let active_bytes = self.cache.referenced_bytes() + private;
            if active_bytes <= self.m_total {
                self.cache
                    .evict_to(self.cache_budget.saturating_sub(private));
                batch.active_kv_bytes = active_bytes;
                break;
            }
            if self.actives.len() <= 1 {
                let id = self.actives.first().map(|a| a.id).unwrap_or(0);
                return Err(ScheduleError::RequestExceedsMemory {
                    id,
                    bytes: active_bytes,
                    capacity: self.m_total,
                });
            }
            let parts = self.part_bytes();
            let r0 = ratio(self.side_projected[0], parts[0]);
            let r1 = ratio(self.side_projected[1], parts[1]);
            let side = if self.actives.iter().all(|a| a.side == 1) {
                1
            } else if self.actives.iter().all(|a| a.side == 0) {
                0
            } else if r1 > r0 {
                1
            } else {
                0
            };
            let victim_idx = self
                .actives
                .iter()
                .enumerate()
                .filter(|(_, a)| a.side == side)
                .max_by_key(|(_, a)| a.admit_index)
                .map(|(i, _)| i)
                .expect("side has actives");
            let vid = self.actives[victim_idx].id;
            self.retract(victim_idx)?;
            batch.retracted.push(vid);
            self.totals.retractions += 1;
        }

        // 7. GEMM tokens: prefill + decode, rounded to the granularity
        //    with a carry so the long-run average matches demand.
        let demand = (prefill_tokens + batch.decode.len() as u64) as i64;
        let g = self.granularity as i64;
        let x = demand + self.carry;
        let emitted = ((x + g / 2) / g) * g;
        self.carry = x - emitted;
        batch.gemm_tokens = emitted as u64;

        if batch.admissions.is_empty()
            && batch.prefill.is_empty()
            && batch.decode.is_empty()
            && batch.completed.is_empty()
            && batch.retracted.is_empty()
        {
            return Err(ScheduleError::Stalled { step });
        }
        Ok(())
    }

    /// Retract the active at `victim_idx`: unwind any other requests that
    /// were waiting on KV this victim had claimed but not yet computed,
    /// release the victim, and requeue it with a doubled projection.
    fn retract(&mut self, victim_idx: usize) -> Result<(), ScheduleError> {
        let victim = self.actives.remove(victim_idx);
        let vid = victim.id;
        let victim_claims: HashSet<usize> =
            self.cache.claims_on_path(victim.leaf, vid).into_iter().collect();
        // Dependents hold references into the victim's claims; release
        // them first so the claims die with the victim, then rebuild their
        // lookups from what actually survives in the cache.
        let mut dependents: Vec<usize> = Vec::new();
        if !victim_claims.is_empty() {
            for (i, a) in self.actives.iter().enumerate() {
                if self.cache.path_intersects(a.leaf, &victim_claims) {
                    dependents.push(i);
                }
            }
            for &i in &dependents {
                let leaf = self.actives[i].leaf;
                self.cache.release(leaf);
            }
        }
        self.cache.release(victim.leaf);
        for &i in &dependents {
            let id = self.actives[i].id;
            let look = self
                .cache
                .lookup_claim(id, &self.requests[&id].prompt);
            let new_hit = look.hit_tokens;
            let (target, old_proj, side) = {
                let a = &mut self.actives[i];
                debug_assert_eq!(a.prefill_pos, a.hit, "dependent had not computed yet");
                if a.first {
                    let lost = a.credited_hit.saturating_sub(new_hit);
                    self.totals.genuine_hit_tokens -= lost;
                    a.credited_hit = a.credited_hit.min(new_hit);
                }
                a.hit = new_hit;
                a.prefill_pos = new_hit;
                if a.prefill_pos < a.prefill_target {
                    a.prefill_done_step = None;
                }
                a.leaf = look.leaf;
                a.dep = look.dep_node;
                (a.prefill_target, a.projected_bytes, a.side)
            };
            let generated = self.req_state[&id].generated;
            let new_proj = self.projection(id, target, new_hit, generated);
            self.side_projected[side] = self.side_projected[side] - old_proj + new_proj;
            self.actives[i].projected_bytes = new_proj;
        }
        self.side_projected[victim.side] -= victim.projected_bytes;
        let st = self.req_state.get_mut(&vid).unwrap();
        st.retractions += 1;
        if st.retractions > 64 {
            return Err(ScheduleError::RetractionLivelock { id: vid });
        }
        let covered = if st.generated > 0 {
            victim.p + st.generated
        } else {
            victim.prefill_pos
        };
        st.high_water = st.high_water.max(covered);
        st.d_proj = (st.d_proj * 2).max(st.generated + 1);
        self.queues[victim.side].push_front(QItem {
            id: vid,
            regime: self.regime_applied,
        });
        Ok(())
    }

    /// Drain the stream, collecting all steps.
    pub fn collect_steps(mut self) -> Result<(Vec<StepBatch>, ScheduleTotals), ScheduleError> {
        let mut steps = Vec::new();
        while let Some(batch) = self.next_step()? {
            steps.push(batch);
        }
        Ok((steps, self.totals.clone()))
    }
}

fn ratio(used: u64, capacity: u64) -> f64 {
    if capacity == 0 {
        if used == 0 { 0.0 } else { f64::INFINITY }
    } else {
        used as f64 / capacity as f64
    }
}

/// Write a step stream as JSONL, one batch per line.
pub fn write_schedule_jsonl<W: std::io::Write>(
    out: &mut W,
    steps: &[StepBatch],
) -> std::io::Result<()> {
    for s in steps {
        serde_json::to_writer(&mut *out, s)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Read a schedule written by [`write_schedule_jsonl`].
pub fn read_schedule_jsonl(path: &std::path::Path) -> std::io::Result<Vec<StepBatch>> {
    use std::io::BufRead;
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut steps = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let batch: StepBatch = serde_json::from_str(&line)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        steps.push(batch);
    }
    Ok(steps)
}
