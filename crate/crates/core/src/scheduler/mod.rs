//! Batch scheduling: dual-scanner request ordering with dynamic memory
//! partitioning, FCFS/DFS/random baseline orderings, and step formation
//! (continuous batching with chunked prefill and batch-size granularity).

pub mod steps;

pub use steps::{
    Admission, PrefillChunk, ScheduleError, ScheduleMeta, ScheduleTotals, SchedulerConfig,
    StepBatch, StepStream, form_steps,
};

use std::collections::VecDeque;

use rand::SeedableRng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost_model::{GIGA, HardwareConfig};
use crate::prefix_tree::{Request, RequestId, SortedTree};

/// Logical split of KV memory between the compute-heavy (left) and
/// memory-heavy (right) scanner sides, in decimal GB.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryPartition {
    pub m_left: f64,
    pub m_right: f64,
}

impl MemoryPartition {
    pub fn total(&self) -> f64 {
        self.m_left + self.m_right
    }

    pub fn left_bytes(&self) -> u64 {
        (self.m_left * GIGA).round() as u64
    }

    pub fn right_bytes(&self) -> u64 {
        (self.m_right * GIGA).round() as u64
    }
}

/// Solve `M_L + M_R = M` and `M_L*rho_L + M_R*rho_R = M*rho_root` for the
/// partition sizes, clamped to [0, M]. Equal densities split evenly.
pub fn partition_memory(rho_l: f64, rho_r: f64, rho_root: f64, total_gb: f64) -> MemoryPartition {
    let fraction = if rho_l == rho_r {
        0.5
    } else if rho_l.is_infinite() && rho_r.is_infinite() {
        0.5
    } else if rho_l.is_infinite() {
        // Limit of (rho_root - rho_r) / (rho_l - rho_r).
        0.0
    } else if rho_r.is_infinite() {
        1.0
    } else {
        ((rho_root - rho_r) / (rho_l - rho_r)).clamp(0.0, 1.0)
    };
    let m_left = total_gb * fraction;
    MemoryPartition {
        m_left,
        m_right: total_gb - m_left,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    #[serde(rename = "L")]
    Left,
    #[serde(rename = "R")]
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    Blend,
    Dfs,
    Fcfs,
    Random,
}

impl std::str::FromStr for Policy {
    type Err = OrderError;
    fn from_str(s: &str) -> Result<Self, OrderError> {
        match s {
            "blend" => Ok(Policy::Blend),
            "dfs" => Ok(Policy::Dfs),
            "fcfs" => Ok(Policy::Fcfs),
            "random" => Ok(Policy::Random),
            other => Err(OrderError::UnknownPolicy(other.to_string())),
        }
    }
}

impl std::fmt::Display for Policy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Policy::Blend => "blend",
            Policy::Dfs => "dfs",
            Policy::Fcfs => "fcfs",
            Policy::Random => "random",
        };
        write!(f, "{s}")
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum OrderError {
    #[error("unknown policy `{0}` (expected blend|dfs|fcfs|random)")]
    UnknownPolicy(String),
    #[error("cannot order an empty request set")]
    Empty,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OrderEntry {
    pub id: RequestId,
    pub side: Side,
    /// Index into [`ScheduledOrder::partitions`]; applied at admission.
    pub regime: u32,
}

/// A request order with per-regime partition annotations, ready for step
/// formation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduledOrder {
    pub policy: Policy,
    pub rho_root: f64,
    pub partitions: Vec<MemoryPartition>,
    pub entries: Vec<OrderEntry>,
}

impl ScheduledOrder {
    pub fn ids(&self) -> Vec<RequestId> {
        self.entries.iter().map(|e| e.id).collect()
    }
}

/// Dual-scanner cursor state over the scanner-visible node sequence.
#[derive(Debug, Clone)]
pub struct ScanState {
    pub left_cursor: usize,
    pub right_cursor: usize,
    pub rho_left: f64,
    pub rho_right: f64,
    pub rho_root: f64,
}

/// Walk the sorted tree's visible nodes from both ends, drawing requests
/// into the left (compute) and right (memory) partitions. The partition is
/// recomputed whenever either cursor advances; interleaving keeps each
/// side's virtual fill proportional to its partition. When one side runs
/// out of nodes the other continues as a plain DFS over the full memory.
pub fn order_dual_scanner(
    tree: &SortedTree,
    requests: &[Request],
    hc: &HardwareConfig,
) -> ScheduledOrder {
    let visible = tree.visible_nodes();
    let rho_root = tree.rho_root();
    let total_gb = hc.kv_memory_capacity;
    let mut order = ScheduledOrder {
        policy: Policy::Blend,
        rho_root,
        partitions: Vec::new(),
        entries: Vec::new(),
    };
    if visible.is_empty() {
        return order;
    }
    let estimates = tree.tree.estimates();
    let by_id: std::collections::HashMap<RequestId, &Request> =
        requests.iter().map(|r| (r.id, r)).collect();
    let tok_bytes = tree
        .tree
        .configs
        .as_ref()
        .map(|(mc, _)| mc.kv_bytes_per_token())
        .unwrap_or(1);
    let projected = |id: RequestId| -> u64 {
        let p = by_id.get(&id).map(|r| r.prompt.len() as u64).unwrap_or(0);
        let d = estimates.get(&id).copied().unwrap_or(0.0).ceil() as u64;
        (p + d.max(1)) * tok_bytes
    };

    if visible.len() == 1 {
        order.partitions.push(MemoryPartition {
            m_left: total_gb,
            m_right: 0.0,
        });
        for id in tree.node_requests_dfs(visible[0], false) {
            order.entries.push(OrderEntry {
                id,
                side: Side::Left,
                regime: 0,
            });
        }
        return order;
    }

    let mut state = ScanState {
        left_cursor: 0,
        right_cursor: visible.len() - 1,
        rho_left: tree.node_rho(visible[0]),
        rho_right: tree.node_rho(visible[visible.len() - 1]),
        rho_root,
    };
    let mut next_left = 1usize;
    let mut next_right = visible.len() - 2;
    let mut left_open = true;
    let mut right_open = true;
    let mut lq: VecDeque<RequestId> = tree.node_requests_dfs(visible[0], false).into();
    let mut rq: VecDeque<RequestId> =
        tree.node_requests_dfs(visible[visible.len() - 1], true).into();
    order.partitions.push(partition_memory(
        state.rho_left,
        state.rho_right,
        rho_root,
        total_gb,
    ));
    let mut regime = 0u32;
    let (mut fill_left, mut fill_right) = (0u64, 0u64);

    loop {
        // Advance cursors over drained nodes. `next_left > next_right`
        // means no unclaimed nodes remain between the cursors.
        if lq.is_empty() && left_open {
            if next_left <= next_right && next_left < visible.len() {
                state.left_cursor = next_left;
                state.rho_left = tree.node_rho(visible[next_left]);
                lq = tree.node_requests_dfs(visible[next_left], false).into();
                next_left += 1;
                order.partitions.push(partition_memory(
                    state.rho_left,
                    state.rho_right,
                    rho_root,
                    total_gb,
                ));
                regime += 1;
                fill_left = 0;
                fill_right = 0;
            } else {
                left_open = false;
                if !rq.is_empty() {
                    order.partitions.push(MemoryPartition {
                        m_left: 0.0,
                        m_right: total_gb,
                    });
                    regime += 1;
                }
            }
            continue;
        }
        if rq.is_empty() && right_open {
            if next_left <= next_right {
                state.right_cursor = next_right;
                state.rho_right = tree.node_rho(visible[next_right]);
                rq = tree.node_requests_dfs(visible[next_right], true).into();
                next_right = next_right.wrapping_sub(1);
                order.partitions.push(partition_memory(
                    state.rho_left,
                    state.rho_right,
                    rho_root,
                    total_gb,
                ));
                regime += 1;
                fill_left = 0;
                fill_right = 0;
            } else {
                right_open = false;
                if !lq.is_empty() {
                    order.partitions.push(MemoryPartition {
                        m_left: total_gb,
                        m_right: 0.0,
                    });
                    regime += 1;
                }
            }
            continue;
        }
        if lq.is_empty() && rq.is_empty() {
            break;
        }
        let part = order.partitions[regime as usize];
        let side = if lq.is_empty() {
            Side::Right
        } else if rq.is_empty() {
            Side::Left
        } else {
            let cost_l = projected(*lq.front().unwrap());
            let cost_r = projected(*rq.front().unwrap());
            let ratio_l = fill_ratio(fill_left + cost_l, part.left_bytes());
            let ratio_r = fill_ratio(fill_right + cost_r, part.right_bytes());
            if ratio_l <= ratio_r {
                Side::Left
            } else {
                Side::Right
            }
        };
        let id = match side {
            Side::Left => lq.pop_front().unwrap(),
            Side::Right => rq.pop_front().unwrap(),
        };
        match side {
            Side::Left => fill_left += projected(id),
            Side::Right => fill_right += projected(id),
        }
        order.entries.push(OrderEntry { id, side, regime });
    }
    order
}

fn fill_ratio(fill: u64, capacity: u64) -> f64 {
    if capacity == 0 {
        f64::INFINITY
    } else {
        fill as f64 / capacity as f64
    }
}

/// FCFS (input order), DFS (tree order) or seeded random shuffle, all on a
/// single partition spanning the full memory.
pub fn order_baseline(
    requests: &[Request],
    policy: Policy,
    seed: u64,
    tree: &SortedTree,
    hc: &HardwareConfig,
) -> Result<ScheduledOrder, OrderError> {
    if requests.is_empty() {
        return Err(OrderError::Empty);
    }
    let ids: Vec<RequestId> = match policy {
        Policy::Fcfs => requests.iter().map(|r| r.id).collect(),
        Policy::Dfs => tree.dfs_order(),
        Policy::Random => {
            let mut ids: Vec<RequestId> = requests.iter().map(|r| r.id).collect();
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            ids.shuffle(&mut rng);
            ids
        }
        Policy::Blend => {
            return Ok(order_dual_scanner(tree, requests, hc));
        }
    };
    Ok(ScheduledOrder {
        policy,
        rho_root: tree.rho_root(),
        partitions: vec![MemoryPartition {
            m_left: hc.kv_memory_capacity,
            m_right: 0.0,
        }],
        entries: ids
            .into_iter()
            .map(|id| OrderEntry {
                id,
                side: Side::Left,
                regime: 0,
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests;
