//! Tree transformations: layer-wise density sorting, conditional outlier
//! splitting, and zero-cost subtree merging.

use super::{Node, NO_NODE, PrefixTree, RequestId, ROOT, TreeError};
use crate::cost_model::prefill_flops;

/// A density-sorted (and optionally split/merged) tree ready for the dual
/// scanner, together with its sharing accounting.
#[derive(Debug, Clone)]
pub struct SortedTree {
    pub tree: PrefixTree,
    /// DFS request sequence of the current tree.
    pub leaf_order: Vec<RequestId>,
    /// Unlimited-cache sharing ratio of the current tree (compute saved
    /// over total compute, true output lengths).
    pub s_o: f64,
    /// Sharing bound of the tree before any outlier splitting.
    pub base_s_o: f64,
    pub base_saved_flops: u128,
    /// Prefix FLOPs sacrificed by relocations so far.
    pub split_waste_flops: u128,
    pub split_waste_tokens: u64,
    pub relocations: u64,
}

impl PrefixTree {
    /// Sort every child list by compute density, descending, ties broken by
    /// the smallest request id in the subtree. Parent-child relations and
    /// the sharing ratio are unchanged.
    pub fn sort_layerwise(mut self) -> Result<SortedTree, TreeError> {
        if !self.annotated {
            return Err(TreeError::NotAnnotated);
        }
        self.sort_children();
        let leaf_order = self.dfs_leaf_requests();
        let s_o = tree_sharing(&self);
        let saved = self.saved_flops();
        Ok(SortedTree {
            tree: self,
            leaf_order,
            s_o,
            base_s_o: s_o,
            base_saved_flops: saved,
            split_waste_flops: 0,
            split_waste_tokens: 0,
            relocations: 0,
        })
    }

    fn sort_children(&mut self) {
        for i in self.walk_preorder() {
            let mut children = std::mem::take(&mut self.nodes[i].children);
            children.sort_by(|&a, &b| {
                self.nodes[b]
                    .rho
                    .total_cmp(&self.nodes[a].rho)
                    .then(self.nodes[a].min_req.cmp(&self.nodes[b].min_req))
            });
            self.nodes[i].children = children;
        }
    }
}

fn tree_sharing(tree: &PrefixTree) -> f64 {
    let total = tree.total_comp_flops();
    if total == 0 {
        0.0
    } else {
        tree.saved_flops() as f64 / total as f64
    }
}

impl SortedTree {
    pub fn rho_root(&self) -> f64 {
        self.tree.root_density()
    }

    /// Current DFS request order; defines the tree's sharing bound.
    pub fn dfs_order(&self) -> Vec<RequestId> {
        self.leaf_order.clone()
    }

    /// Scanner-visible units: the root's children, left to right.
    pub fn visible_nodes(&self) -> Vec<usize> {
        self.tree.nodes[ROOT].children.clone()
    }

    pub fn node_rho(&self, n: usize) -> f64 {
        self.tree.nodes[n].rho
    }

    #[cfg_attr(not(test), allow(dead_code))]
    pub(crate) fn node(&self, n: usize) -> &Node {
        &self.tree.nodes[n]
    }

    /// Requests of the subtree at `n` in local DFS order; `mirror` walks
    /// children right to left (the right scanner's direction).
    pub fn node_requests_dfs(&self, n: usize, mirror: bool) -> Vec<RequestId> {
        let mut out = Vec::new();
        let mut stack = vec![n];
        while let Some(x) = stack.pop() {
            let node = &self.tree.nodes[x];
            if mirror {
                out.extend(node.requests.iter().rev().copied());
                for &c in node.children.iter() {
                    stack.push(c);
                }
            } else {
                out.extend(node.requests.iter().copied());
                for &c in node.children.iter().rev() {
                    stack.push(c);
                }
            }
        }
        out
    }

    /// Relocate subtrees whose density sits on the wrong side of the root
    /// density relative to their siblings, provided the recomputation waste
    /// (the shared prefix above them) is at most `waste_threshold` tokens.
    /// Relocated subtrees become root children with the detached prefix
    /// duplicated into their segment; sharing drops by exactly that prefix.
    pub fn split_outliers(mut self, waste_threshold: u64) -> Result<SortedTree, TreeError> {
        let (mc, hc) = self
            .tree
            .configs
            .clone()
            .ok_or(TreeError::NotAnnotated)?;
        let rho_root = self.tree.root_density();
        // Relocations change ancestor aggregates, so detect and apply in
        // rounds until stable.
        for _round in 0..8 {
            let candidates = self.detect_outliers(rho_root, waste_threshold);
            if candidates.is_empty() {
                break;
            }
            for c in candidates {
                let prefix_len = self.relocate_to_root(c);
                self.split_waste_tokens += prefix_len;
                self.split_waste_flops += prefill_flops(&mc, 0, prefix_len);
                self.relocations += 1;
            }
            self.tree.recompute_structure();
            self.tree.annotate_density(&mc, &hc)?;
            self.tree.sort_children();
        }
        self.tree.rebuild_leaf_map();
        self.leaf_order = self.tree.dfs_leaf_requests();
        self.s_o = tree_sharing(&self.tree);
        Ok(self)
    }

    /// Outliers: child `c` of a non-root parent whose density falls on the
    /// opposite side of the root density from both its sibling aggregate
    /// and its parent's subtree, with a duplicable prefix within budget.
    fn detect_outliers(&self, rho_root: f64, waste_threshold: u64) -> Vec<usize> {
        let tree = &self.tree;
        let side = |rho: f64| rho >= rho_root;
        let mut out = Vec::new();
        for p in tree.walk_preorder() {
            if p == ROOT || tree.nodes[p].children.len() < 2 {
                continue;
            }
            let peak = tree
                .configs
                .as_ref()
                .map(|(_, hc)| hc.peak_compute_flops())
                .unwrap_or(1.0);
            for &c in &tree.nodes[p].children {
                if tree.nodes[c].prefix_len > waste_threshold {
                    continue;
                }
                let mut sib_eff = 0.0f64;
                let mut sib_mem = 0.0f64;
                for &s in &tree.nodes[p].children {
                    if s == c {
                        continue;
                    }
                    sib_eff += tree.nodes[s].comp_s - tree.nodes[s].saved_flops as f64 / peak;
                    sib_mem += tree.nodes[s].mem_s;
                }
                let rho_sib = if sib_mem == 0.0 {
                    f64::INFINITY
                } else {
                    sib_eff / sib_mem
                };
                let c_side = side(tree.nodes[c].rho);
                if c_side != side(rho_sib) && c_side != side(tree.nodes[p].rho) {
                    out.push(c);
                }
            }
        }
        // Nested candidates travel with their relocated ancestor; keep the
        // shallowest of any ancestor chain this round.
        let chosen: Vec<usize> = out
            .iter()
            .copied()
            .filter(|&c| {
                let mut a = self.tree.nodes[c].parent;
                while a != NO_NODE {
                    if out.contains(&a) {
                        return false;
                    }
                    a = self.tree.nodes[a].parent;
                }
                true
            })
            .collect();
        chosen
    }

    /// Detach `c`, duplicate its live prefix into its segment, and re-attach
    /// it as a root child. Returns the duplicated prefix length in tokens.
    fn relocate_to_root(&mut self, c: usize) -> u64 {
        let parent = self.tree.nodes[c].parent;
        let mut chain = Vec::new();
        let mut a = parent;
        while a != NO_NODE {
            chain.push(a);
            a = self.tree.nodes[a].parent;
        }
        let mut prefix: Vec<u32> = Vec::new();
        for &n in chain.iter().rev() {
            prefix.extend_from_slice(&self.tree.nodes[n].segment);
        }
        let duplicated = prefix.len() as u64;
        prefix.extend_from_slice(&self.tree.nodes[c].segment);
        self.tree.nodes[c].segment = prefix;
        self.tree.nodes[c].parent = ROOT;
        self.tree.nodes[parent].children.retain(|&x| x != c);
        self.tree.nodes[ROOT].children.push(c);
        // Radix hygiene: a parent left with one child and no requests is
        // absorbed into that child.
        if parent != ROOT
            && self.tree.nodes[parent].children.len() == 1
            && self.tree.nodes[parent].requests.is_empty()
        {
            let only = self.tree.nodes[parent].children[0];
            let mut seg = self.tree.nodes[parent].segment.clone();
            seg.extend_from_slice(&self.tree.nodes[only].segment);
            self.tree.nodes[only].segment = seg;
            let gp = self.tree.nodes[parent].parent;
            self.tree.nodes[only].parent = gp;
            let slot = self.tree.nodes[gp]
                .children
                .iter()
                .position(|&x| x == parent)
                .expect("parent listed in grandparent");
            self.tree.nodes[gp].children[slot] = only;
            self.tree.nodes[parent].children.clear();
        }
        duplicated
    }

    /// Collapse subtrees whose internal structure adds no sharing beyond
    /// their root segment (all children are leaves with unique suffixes)
    /// into single group nodes holding their requests in former-DFS order.
    pub fn merge_subtrees(mut self) -> SortedTree {
        let order = self.tree.walk_postorder();
        for n in order {
            if n == ROOT || self.tree.nodes[n].children.is_empty() {
                continue;
            }
            let mergeable = self.tree.nodes[n].children.iter().all(|&c| {
                let child = &self.tree.nodes[c];
                child.children.is_empty()
                    && (child.requests.len() == 1 || child.segment.is_empty())
            });
            if !mergeable {
                continue;
            }
            let children = std::mem::take(&mut self.tree.nodes[n].children);
            let mut grouped = Vec::new();
            for c in children {
                grouped.extend(std::mem::take(&mut self.tree.nodes[c].requests));
            }
            self.tree.nodes[n].requests = grouped;
            self.tree.nodes[n].merged = true;
        }
        self.tree.rebuild_leaf_map();
        self.leaf_order = self.tree.dfs_leaf_requests();
        debug_assert_eq!(self.s_o, tree_sharing(&self.tree));
        self
    }
}
