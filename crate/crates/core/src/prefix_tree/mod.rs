//! Resource-aware compressed prefix trie over prompt token sequences.
//!
//! Leaves hold requests; internal nodes hold prompt segments shared by all
//! descendants. On top of the plain radix structure this module layers:
//! output-length sampling, per-node compute/memory aggregates and compute
//! density, layer-wise density sorting, conditional outlier splitting,
//! subtree merging, and DFS/sharing accounting.
//!
//! Prefill FLOPs are tracked as exact integers so sharing ratios are
//! bit-reproducible regardless of traversal order.

mod dump;
mod transform;

pub use dump::{DumpNode, TreeDump};
pub use transform::SortedTree;

use std::collections::{HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost_model::{
    self, AggregateCost, HardwareConfig, ModelConfig, comp_flops, decode_load_bytes,
    prefill_flops,
};
use crate::runtime_cache::RuntimeCache;

pub type TokenId = u32;
pub type RequestId = u64;

pub(crate) const NO_NODE: usize = usize::MAX;

/// One inference job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: RequestId,
    pub prompt: Vec<TokenId>,
    /// True output length; hidden from the scheduler unless `known_output`.
    pub true_output_len: u64,
    /// Generation modalities carry a preset output length.
    pub known_output: bool,
    pub modality: String,
}

#[derive(Debug, Error, PartialEq)]
pub enum TreeError {
    #[error("duplicate request id {0}")]
    DuplicateRequestId(RequestId),
    #[error("request {0} has an empty prompt")]
    EmptyPrompt(RequestId),
    #[error("sample_prob must lie in (0, 1], got {0}")]
    InvalidSampleProb(f64),
    #[error("operation requires output lengths to be sampled first")]
    NotSampled,
    #[error("operation requires density annotation first")]
    NotAnnotated,
    #[error("order is not a permutation of the request set: {0}")]
    NotAPermutation(String),
    #[error("unknown request id {0}")]
    UnknownRequest(RequestId),
}

/// Per-request facts the tree needs after build time.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ReqInfo {
    pub prompt_len: u64,
    pub true_output_len: u64,
    pub known_output: bool,
}

#[derive(Debug, Clone)]
pub(crate) struct Node {
    pub segment: Vec<TokenId>,
    pub children: Vec<usize>,
    /// Request ids terminating here; non-empty only at childless nodes.
    pub requests: Vec<RequestId>,
    pub parent: usize,
    /// Prompt tokens on the path above this node.
    pub prefix_len: u64,
    pub depth: u32,
    /// Set when a zero-extra-sharing subtree was collapsed into this node.
    pub merged: bool,

    // Aggregates over the subtree rooted here.
    pub req_count: u64,
    pub min_req: RequestId,
    pub revealed_count: u64,
    pub revealed_sum: u128,
    /// Mean output length estimate for the subtree.
    pub est_output: f64,
    /// Sum of full prefill FLOPs over subtree requests.
    pub prompt_flops: u128,
    /// Prefill FLOPs saved by sharing within the subtree.
    pub saved_flops: u128,
    /// Exact compute FLOPs with true output lengths.
    pub true_comp_flops: u128,
    /// Exact decode KV load bytes with true output lengths.
    pub true_mem_bytes: u128,
    /// Estimate-based compute seconds (sum of Comp over subtree).
    pub comp_s: f64,
    /// Estimate-based memory seconds.
    pub mem_s: f64,
    /// Aggregate compute density of the subtree.
    pub rho: f64,
}

impl Node {
    fn new(segment: Vec<TokenId>, parent: usize) -> Self {
        Node {
            segment,
            children: Vec::new(),
            requests: Vec::new(),
            parent,
            prefix_len: 0,
            depth: 0,
            merged: false,
            req_count: 0,
            min_req: RequestId::MAX,
            revealed_count: 0,
            revealed_sum: 0,
            est_output: 0.0,
            prompt_flops: 0,
            saved_flops: 0,
            true_comp_flops: 0,
            true_mem_bytes: 0,
            comp_s: 0.0,
            mem_s: 0.0,
            rho: 0.0,
        }
    }
}

/// Compressed prefix trie with cost annotations.
#[derive(Debug, Clone)]
pub struct PrefixTree {
    pub(crate) nodes: Vec<Node>,
    pub(crate) req_info: HashMap<RequestId, ReqInfo>,
    pub(crate) leaf_of: HashMap<RequestId, usize>,
    pub(crate) revealed: HashSet<RequestId>,
    pub(crate) default_output_len: f64,
    pub(crate) sampled: bool,
    pub(crate) annotated: bool,
    pub(crate) configs: Option<(ModelConfig, HardwareConfig)>,
}

pub(crate) const ROOT: usize = 0;

impl PrefixTree {
    /// Build the radix trie. The resulting tree is canonical: insertion
    /// order does not affect its shape (children ordered by first token,
    /// empty-segment terminal leaves first).
    pub fn build(requests: &[Request]) -> Result<PrefixTree, TreeError> {
        let mut tree = PrefixTree {
            nodes: vec![Node::new(Vec::new(), NO_NODE)],
            req_info: HashMap::with_capacity(requests.len()),
            leaf_of: HashMap::with_capacity(requests.len()),
            revealed: HashSet::new(),
            default_output_len: 256.0,
            sampled: false,
            annotated: false,
            configs: None,
        };
        for r in requests {
            if r.prompt.is_empty() {
                return Err(TreeError::EmptyPrompt(r.id));
            }
            if tree
                .req_info
                .insert(
                    r.id,
                    ReqInfo {
                        prompt_len: r.prompt.len() as u64,
                        true_output_len: r.true_output_len,
                        known_output: r.known_output,
                    },
                )
                .is_some()
            {
                return Err(TreeError::DuplicateRequestId(r.id));
            }
            tree.insert(r);
        }
        tree.canonicalize();
        tree.recompute_structure();
        tree.rebuild_leaf_map();
        Ok(tree)
    }

    fn insert(&mut self, r: &Request) {
        let mut cur = ROOT;
        let mut pos = 0usize;
        loop {
            if pos == r.prompt.len() {
                // Request terminates here.
                if self.nodes[cur].children.is_empty() && cur != ROOT {
                    self.nodes[cur].requests.push(r.id);
                } else {
                    let eps = self.nodes[cur]
                        .children
                        .iter()
                        .copied()
                        .find(|&c| self.nodes[c].segment.is_empty());
                    match eps {
                        Some(leaf) => self.nodes[leaf].requests.push(r.id),
                        None => {
                            let leaf = self.push_node(Node::new(Vec::new(), cur));
                            self.nodes[leaf].requests.push(r.id);
                            self.nodes[cur].children.push(leaf);
                        }
                    }
                }
                return;
            }
            let tok = r.prompt[pos];
            let next = self.nodes[cur]
                .children
                .iter()
                .copied()
                .find(|&c| self.nodes[c].segment.first() == Some(&tok));
            match next {
                None => {
                    // A leaf gaining a child hands its requests to an
                    // empty-segment terminal leaf first.
                    if self.nodes[cur].children.is_empty() && !self.nodes[cur].requests.is_empty()
                    {
                        let moved = std::mem::take(&mut self.nodes[cur].requests);
                        let eps = self.push_node(Node::new(Vec::new(), cur));
                        self.nodes[eps].requests = moved;
                        self.nodes[cur].children.push(eps);
                    }
                    let leaf = self.push_node(Node::new(r.prompt[pos..].to_vec(), cur));
                    self.nodes[leaf].requests.push(r.id);
                    self.nodes[cur].children.push(leaf);
                    return;
                }
                Some(child) => {
                    let m = lcp(&self.nodes[child].segment, &r.prompt[pos..]);
                    if m == self.nodes[child].segment.len() {
                        cur = child;
                        pos += m;
                        continue;
                    }
                    // Split `child` at m.
                    let head: Vec<TokenId> = self.nodes[child].segment[..m].to_vec();
                    let tail: Vec<TokenId> = self.nodes[child].segment[m..].to_vec();
                    let mid = self.push_node(Node::new(head, cur));
                    self.nodes[child].segment = tail;
                    self.nodes[child].parent = mid;
                    self.nodes[mid].children.push(child);
                    let slot = self.nodes[cur]
                        .children
                        .iter()
                        .position(|&c| c == child)
                        .expect("child listed in parent");
                    self.nodes[cur].children[slot] = mid;
                    cur = mid;
                    pos += m;
                    continue;
                }
            }
        }
    }

    fn push_node(&mut self, node: Node) -> usize {
        self.nodes.push(node);
        self.nodes.len() - 1
    }

    /// Sort every child list by first segment token (terminal leaves first)
    /// and every request list by id, making the tree shape canonical.
    fn canonicalize(&mut self) {
        for i in 0..self.nodes.len() {
            let mut children = std::mem::take(&mut self.nodes[i].children);
            children.sort_by_key(|&c| {
                self.nodes[c]
                    .segment
                    .first()
                    .map(|&t| t as u64 + 1)
                    .unwrap_or(0)
            });
            self.nodes[i].children = children;
            self.nodes[i].requests.sort_unstable();
        }
    }

    /// Refresh prefix_len/depth along root-reachable nodes.
    pub(crate) fn recompute_structure(&mut self) {
        let mut stack = vec![(ROOT, 0u64, 0u32)];
        while let Some((n, above, depth)) = stack.pop() {
            self.nodes[n].prefix_len = above;
            self.nodes[n].depth = depth;
            let below = above + self.nodes[n].segment.len() as u64;
            for &c in &self.nodes[n].children {
                stack.push((c, below, depth + 1));
            }
        }
    }

    pub(crate) fn rebuild_leaf_map(&mut self) {
        self.leaf_of.clear();
        for n in self.walk_preorder() {
            for &r in &self.nodes[n].requests {
                self.leaf_of.insert(r, n);
            }
        }
    }

    /// Root-reachable nodes in deterministic pre-order.
    pub(crate) fn walk_preorder(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.nodes.len());
        let mut stack = vec![ROOT];
        while let Some(n) = stack.pop() {
            out.push(n);
            for &c in self.nodes[n].children.iter().rev() {
                stack.push(c);
            }
        }
        out
    }

    /// Post-order (children before parents).
    pub(crate) fn walk_postorder(&self) -> Vec<usize> {
        let mut pre = self.walk_preorder();
        pre.reverse();
        pre
    }

    pub fn request_count(&self) -> usize {
        self.req_info.len()
    }

    pub fn request_ids_sorted(&self) -> Vec<RequestId> {
        let mut ids: Vec<RequestId> = self.req_info.keys().copied().collect();
        ids.sort_unstable();
        ids
    }

    /// Reveal true output lengths for generation modalities plus a
    /// Bernoulli(sample_prob) subset of the rest, then let every subtree
    /// estimate from the revealed lengths (falling back to the nearest
    /// sampled ancestor, then to `default_output_len`).
    pub fn sample_output_lengths(
        &mut self,
        sample_prob: f64,
        seed: u64,
        default_output_len: f64,
    ) -> Result<(), TreeError> {
        if !(sample_prob > 0.0 && sample_prob <= 1.0) {
            return Err(TreeError::InvalidSampleProb(sample_prob));
        }
        self.revealed.clear();
        self.default_output_len = default_output_len;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        for id in self.request_ids_sorted() {
            let draw: f64 = rng.random();
            let info = self.req_info[&id];
            if info.known_output || draw < sample_prob {
                self.revealed.insert(id);
            }
        }
        self.sampled = true;
        self.annotated = false;
        Ok(())
    }

    pub(crate) fn estimate_for(&self, id: RequestId) -> f64 {
        let info = &self.req_info[&id];
        if self.revealed.contains(&id) {
            info.true_output_len as f64
        } else {
            self.nodes[self.leaf_of[&id]].est_output
        }
    }

    /// Estimated output length per request (true value where revealed).
    pub fn estimates(&self) -> HashMap<RequestId, f64> {
        self.req_info
            .keys()
            .map(|&id| (id, self.estimate_for(id)))
            .collect()
    }

    pub fn is_revealed(&self, id: RequestId) -> bool {
        self.revealed.contains(&id)
    }

    /// Annotate every node with sharing-aware aggregate cost and compute
    /// density, using estimated output lengths. Requires sampling first.
    pub fn annotate_density(
        &mut self,
        mc: &ModelConfig,
        hc: &HardwareConfig,
    ) -> Result<(), TreeError> {
        if !self.sampled {
            return Err(TreeError::NotSampled);
        }
        let post = self.walk_postorder();
        // Pass 1: structural and revealed aggregates, bottom-up.
        for &n in &post {
            let mut req_count = 0u64;
            let mut min_req = RequestId::MAX;
            let mut revealed_count = 0u64;
            let mut revealed_sum = 0u128;
            let mut prompt_flops_sum = 0u128;
            let mut saved = 0u128;
            let mut true_comp = 0u128;
            let mut true_mem = 0u128;
            for ci in 0..self.nodes[n].children.len() {
                let c = self.nodes[n].children[ci];
                let child = &self.nodes[c];
                req_count += child.req_count;
                min_req = min_req.min(child.min_req);
                revealed_count += child.revealed_count;
                revealed_sum += child.revealed_sum;
                prompt_flops_sum += child.prompt_flops;
                saved += child.saved_flops;
                true_comp += child.true_comp_flops;
                true_mem += child.true_mem_bytes;
            }
            for ri in 0..self.nodes[n].requests.len() {
                let id = self.nodes[n].requests[ri];
                let info = self.req_info[&id];
                req_count += 1;
                min_req = min_req.min(id);
                if self.revealed.contains(&id) {
                    revealed_count += 1;
                    revealed_sum += info.true_output_len as u128;
                }
                prompt_flops_sum += prefill_flops(mc, 0, info.prompt_len);
                true_comp += comp_flops(mc, info.prompt_len, info.true_output_len);
                true_mem += decode_load_bytes(mc, info.prompt_len, info.true_output_len);
            }
            // This node's segment is computed once for the whole subtree.
            if req_count > 0 {
                let seg_end = self.nodes[n].prefix_len + self.nodes[n].segment.len() as u64;
                saved += (req_count - 1) as u128
                    * prefill_flops(mc, self.nodes[n].prefix_len, seg_end);
            }
            let node = &mut self.nodes[n];
            node.req_count = req_count;
            node.min_req = min_req;
            node.revealed_count = revealed_count;
            node.revealed_sum = revealed_sum;
            node.prompt_flops = prompt_flops_sum;
            node.saved_flops = saved;
            node.true_comp_flops = true_comp;
            node.true_mem_bytes = true_mem;
        }
        // Pass 2: output-length estimates, top-down.
        for n in self.walk_preorder() {
            let est = if self.nodes[n].revealed_count > 0 {
                self.nodes[n].revealed_sum as f64 / self.nodes[n].revealed_count as f64
            } else if n == ROOT {
                self.default_output_len
            } else {
                self.nodes[self.nodes[n].parent].est_output
            };
            self.nodes[n].est_output = est;
        }
        // Pass 3: estimate-based costs and density, bottom-up.
        let peak = hc.peak_compute_flops();
        for &n in &post {
            let mut comp_s = 0.0f64;
            let mut mem_s = 0.0f64;
            for ci in 0..self.nodes[n].children.len() {
                let c = self.nodes[n].children[ci];
                comp_s += self.nodes[c].comp_s;
                mem_s += self.nodes[c].mem_s;
            }
            for ri in 0..self.nodes[n].requests.len() {
                let id = self.nodes[n].requests[ri];
                let info = self.req_info[&id];
                let d_eff = if self.revealed.contains(&id) {
                    info.true_output_len as f64
                } else {
                    self.nodes[n].est_output
                };
                comp_s += (prefill_flops(mc, 0, info.prompt_len) as f64
                    + d_eff * 2.0 * mc.param_count as f64)
                    / peak;
                mem_s += cost_model::mem_time_est(info.prompt_len, d_eff, mc, hc);
            }
            let saved_s = self.nodes[n].saved_flops as f64 / peak;
            let node = &mut self.nodes[n];
            node.comp_s = comp_s;
            node.mem_s = mem_s;
            node.rho = if mem_s == 0.0 {
                f64::INFINITY
            } else {
                (comp_s - saved_s) / mem_s
            };
        }
        self.configs = Some((mc.clone(), hc.clone()));
        self.annotated = true;
        Ok(())
    }

    pub fn is_annotated(&self) -> bool {
        self.annotated
    }

    /// Estimate-based aggregate density of the whole tree.
    pub fn root_density(&self) -> f64 {
        self.nodes[ROOT].rho
    }

    pub fn node_rho(&self, id: RequestId) -> Option<f64> {
        self.leaf_of.get(&id).map(|&n| self.nodes[n].rho)
    }

    /// Exact aggregate over true output lengths: total comp seconds, total
    /// mem seconds (exact summation), and the unlimited-cache sharing ratio
    /// of this tree.
    pub fn true_aggregate(&self, hc: &HardwareConfig) -> AggregateCost {
        let root = &self.nodes[ROOT];
        let t_comp = root.true_comp_flops as f64 / hc.peak_compute_flops();
        let t_mem = root.true_mem_bytes as f64 / hc.peak_bandwidth_bytes();
        let sharing = if root.true_comp_flops == 0 {
            0.0
        } else {
            root.saved_flops as f64 / root.true_comp_flops as f64
        };
        AggregateCost {
            t_comp,
            t_mem,
            sharing_ratio: sharing,
        }
    }

    /// Integer FLOPs saved by unlimited-cache sharing over the whole tree.
    pub fn saved_flops(&self) -> u128 {
        self.nodes[ROOT].saved_flops
    }

    /// Integer compute FLOPs of the workload with true output lengths.
    pub fn total_comp_flops(&self) -> u128 {
        self.nodes[ROOT].true_comp_flops
    }

    /// Prompt tokens deduplicated away by the trie, in tokens.
    pub fn shared_token_count(&self) -> u64 {
        let mut counts: HashMap<usize, u64> = HashMap::new();
        for n in self.walk_postorder() {
            let mut c = self.nodes[n].requests.len() as u64;
            for &ch in &self.nodes[n].children {
                c += counts[&ch];
            }
            counts.insert(n, c);
        }
        let mut shared = 0u64;
        for n in self.walk_preorder() {
            let c = counts[&n];
            if c > 1 {
                shared += (c - 1) * self.nodes[n].segment.len() as u64;
            }
        }
        shared
    }

    /// Left-to-right DFS request sequence.
    pub fn dfs_leaf_requests(&self) -> Vec<RequestId> {
        let mut out = Vec::with_capacity(self.req_info.len());
        let mut stack = vec![ROOT];
        while let Some(n) = stack.pop() {
            out.extend_from_slice(&self.nodes[n].requests);
            for &c in self.nodes[n].children.iter().rev() {
                stack.push(c);
            }
        }
        out
    }

    /// Reconstruct a request's full prompt from the tree path (pre-merge
    /// trees only; merged group nodes drop per-request suffixes).
    pub fn path_prompt(&self, id: RequestId) -> Option<Vec<TokenId>> {
        let mut n = *self.leaf_of.get(&id)?;
        let mut segs = Vec::new();
        loop {
            segs.push(n);
            if n == ROOT {
                break;
            }
            n = self.nodes[n].parent;
        }
        let mut prompt = Vec::new();
        for &s in segs.iter().rev() {
            prompt.extend_from_slice(&self.nodes[s].segment);
        }
        Some(prompt)
    }
}

pub(crate) fn lcp(a: &[TokenId], b: &[TokenId]) -> usize {
    a.iter().zip(b.iter()).take_while(|(x, y)| x == y).count()
}

/// How the runtime prefix cache behaves when replaying an order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CacheModel {
    /// Every computed prefix stays cached.
    Unlimited,
    /// Only the immediately preceding request's path is cached.
    SinglePath,
    /// LRU cache with a byte budget.
    Budget(u64),
}

/// Fraction of total compute saved by prefix-cache hits when requests run
/// one at a time in `order` under the given cache model.
pub fn sharing_ratio(
    order: &[RequestId],
    requests: &[Request],
    mc: &ModelConfig,
    cache: CacheModel,
) -> Result<f64, TreeError> {
    let by_id: HashMap<RequestId, &Request> = requests.iter().map(|r| (r.id, r)).collect();
    if by_id.len() != requests.len() {
        return Err(TreeError::NotAPermutation("duplicate ids in store".into()));
    }
    if order.len() != requests.len() {
        return Err(TreeError::NotAPermutation(format!(
            "order has {} entries, store has {}",
            order.len(),
            requests.len()
        )));
    }
    let mut seen = HashSet::with_capacity(order.len());
    for id in order {
        if !by_id.contains_key(id) || !seen.insert(*id) {
            return Err(TreeError::NotAPermutation(format!(
                "id {id} missing from store or repeated"
            )));
        }
    }

    let mut saved_flops_total: u128 = 0;
    let mut total: u128 = 0;
    match cache {
        CacheModel::SinglePath => {
            let mut prev: Option<&Request> = None;
            for id in order {
                let r = by_id[id];
                let hit = prev.map(|p| lcp(&p.prompt, &r.prompt)).unwrap_or(0);
                saved_flops_total += prefill_flops(mc, 0, hit as u64);
                total += comp_flops(mc, r.prompt.len() as u64, r.true_output_len);
                prev = Some(r);
            }
        }
        CacheModel::Unlimited | CacheModel::Budget(_) => {
            let mut cache_state = RuntimeCache::new(mc.kv_bytes_per_token());
            for id in order {
                let r = by_id[id];
                let hit = cache_state.insert_materialized(&r.prompt);
                saved_flops_total += prefill_flops(mc, 0, hit);
                total += comp_flops(mc, r.prompt.len() as u64, r.true_output_len);
                if let CacheModel::Budget(budget) = cache {
                    cache_state.evict_to(budget);
                }
            }
        }
    }
    if total == 0 {
        return Ok(0.0);
    }
    Ok(saved_flops_total as f64 / total as f64)
}
