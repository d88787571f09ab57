//! Runtime prefix cache: a dynamic radix tree mapping cached prompt
//! prefixes to resident KV bytes.
//!
//! Nodes move through two states. A *claimed* node is scheduled but not
//! yet computed: it occupies no memory and belongs to the request that
//! will prefill it; other requests matching it record a dependency
//! instead of recomputing. A *materialized* node holds real KV bytes and
//! can be hit freely. Refcount-zero materialized leaves are evictable in
//! LRU order.
//!
//! Callers hold onto the *leaf* node of their prompt path; parent chains
//! stay valid across node splits, so the path is always recovered by
//! walking upward.

use std::collections::BTreeSet;

use crate::prefix_tree::{RequestId, TokenId, lcp};

const ROOT: usize = 0;

#[derive(Debug, Clone)]
struct CNode {
    seg: Vec<TokenId>,
    children: Vec<usize>,
    parent: usize,
    /// Prompt tokens on the path above this node.
    prefix_start: u64,
    materialized: bool,
    owner: RequestId,
    refcount: u32,
    stamp: u64,
    alive: bool,
}

/// Result of matching a prompt against the cache.
#[derive(Debug, Clone, Copy)]
pub struct Lookup {
    /// Prompt tokens covered by materialized or claimed nodes.
    pub hit_tokens: u64,
    /// Deepest hit node not yet materialized; the request may not compute
    /// its own suffix (nor decode) until this node is computed.
    pub dep_node: Option<usize>,
    /// Deepest node of the request's prompt path. The full path is the
    /// parent chain from here to the root.
    pub leaf: usize,
}

#[derive(Debug, Clone)]
pub struct RuntimeCache {
    nodes: Vec<CNode>,
    tok_bytes: u64,
    materialized_bytes: u64,
    /// Materialized bytes on paths referenced by at least one active user.
    referenced_bytes: u64,
    clock: u64,
    evictable: BTreeSet<(u64, usize)>,
}

impl RuntimeCache {
    pub fn new(tok_bytes: u64) -> Self {
        RuntimeCache {
            nodes: vec![CNode {
                seg: Vec::new(),
                children: Vec::new(),
                parent: usize::MAX,
                prefix_start: 0,
                materialized: true,
                owner: RequestId::MAX,
                refcount: 0,
                stamp: 0,
                alive: true,
            }],
            tok_bytes,
            materialized_bytes: 0,
            referenced_bytes: 0,
            clock: 0,
            evictable: BTreeSet::new(),
        }
    }

    pub fn materialized_bytes(&self) -> u64 {
        self.materialized_bytes
    }

    pub fn referenced_bytes(&self) -> u64 {
        self.referenced_bytes
    }

    pub fn node_materialized(&self, n: usize) -> bool {
        self.nodes[n].alive && self.nodes[n].materialized
    }

    pub fn claim_owner(&self, n: usize) -> Option<RequestId> {
        if self.nodes[n].alive && !self.nodes[n].materialized {
            Some(self.nodes[n].owner)
        } else {
            None
        }
    }

    /// Unmaterialized nodes owned by `owner` on the path ending at `leaf`.
    pub fn claims_on_path(&self, leaf: usize, owner: RequestId) -> Vec<usize> {
        let mut out = Vec::new();
        let mut n = leaf;
        while n != usize::MAX {
            if self.nodes[n].alive && !self.nodes[n].materialized && self.nodes[n].owner == owner
            {
                out.push(n);
            }
            n = self.nodes[n].parent;
        }
        out
    }

    /// Does the path ending at `leaf` pass through any node in `set`?
    pub fn path_intersects(&self, leaf: usize, set: &std::collections::HashSet<usize>) -> bool {
        let mut n = leaf;
        while n != usize::MAX {
            if set.contains(&n) {
                return true;
            }
            n = self.nodes[n].parent;
        }
        false
    }

    fn node_bytes(&self, n: usize) -> u64 {
        self.nodes[n].seg.len() as u64 * self.tok_bytes
    }

    fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    fn ref_inc(&mut self, n: usize) {
        if self.nodes[n].refcount == 0 {
            self.evictable.remove(&(self.nodes[n].stamp, n));
            if self.nodes[n].materialized {
                self.referenced_bytes += self.node_bytes(n);
            }
        }
        self.nodes[n].refcount += 1;
    }

    fn maybe_evictable(&mut self, n: usize) {
        if n == ROOT || !self.nodes[n].alive {
            return;
        }
        if self.nodes[n].refcount == 0 && self.nodes[n].children.is_empty() {
            if self.nodes[n].materialized {
                self.evictable.insert((self.nodes[n].stamp, n));
            } else {
                // Unmaterialized claims nobody references hold no bytes and
                // can never be computed; drop them outright.
                self.delete(n);
            }
        }
    }

    fn delete(&mut self, n: usize) {
        debug_assert!(n != ROOT);
        debug_assert!(self.nodes[n].children.is_empty());
        debug_assert_eq!(self.nodes[n].refcount, 0);
        self.evictable.remove(&(self.nodes[n].stamp, n));
        if self.nodes[n].materialized {
            self.materialized_bytes -= self.node_bytes(n);
        }
        let parent = self.nodes[n].parent;
        self.nodes[n].alive = false;
        self.nodes[n].seg = Vec::new();
        if self.nodes[parent].alive {
            self.nodes[parent].children.retain(|&c| c != n);
            self.maybe_evictable(parent);
        }
    }

    /// Match `prompt`, claim the unmatched suffix for `owner`, and take a
    /// reference on every path node.
    pub fn lookup_claim(&mut self, owner: RequestId, prompt: &[TokenId]) -> Lookup {
        let stamp = self.tick();
        self.ref_inc(ROOT);
        self.nodes[ROOT].stamp = stamp;
        let mut cur = ROOT;
        let mut pos = 0usize;
        let mut dep_node = None;
        loop {
            if pos == prompt.len() {
                break;
            }
            let tok = prompt[pos];
            let next = self.nodes[cur]
                .children
                .iter()
                .copied()
                .find(|&c| self.nodes[c].seg.first() == Some(&tok));
            let Some(child) = next else { break };
            let m = lcp(&self.nodes[child].seg, &prompt[pos..]);
            if m < self.nodes[child].seg.len() {
                // Split: the head keeps the child's state and becomes the
                // deepest fully-matched node; the tail keeps the children.
                let head_seg = self.nodes[child].seg[..m].to_vec();
                let tail_seg = self.nodes[child].seg[m..].to_vec();
                let mid = CNode {
                    seg: head_seg,
                    children: vec![child],
                    parent: cur,
                    prefix_start: self.nodes[child].prefix_start,
                    materialized: self.nodes[child].materialized,
                    owner: self.nodes[child].owner,
                    refcount: self.nodes[child].refcount,
                    stamp: self.nodes[child].stamp,
                    alive: true,
                };
                self.nodes.push(mid);
                let mid_idx = self.nodes.len() - 1;
                self.nodes[child].seg = tail_seg;
                self.nodes[child].parent = mid_idx;
                self.nodes[child].prefix_start += m as u64;
                let slot = self.nodes[cur]
                    .children
                    .iter()
                    .position(|&c| c == child)
                    .expect("child listed in parent");
                self.nodes[cur].children[slot] = mid_idx;
                self.ref_inc(mid_idx);
                self.nodes[mid_idx].stamp = stamp;
                if !self.nodes[mid_idx].materialized {
                    dep_node = Some(mid_idx);
                }
                cur = mid_idx;
                pos += m;
                break;
            }
            self.ref_inc(child);
            self.nodes[child].stamp = stamp;
            if !self.nodes[child].materialized {
                dep_node = Some(child);
            }
            cur = child;
            pos += m;
        }
        let hit_tokens = pos as u64;
        let leaf = if pos < prompt.len() {
            // Claim the remainder for the owner.
            let tail = CNode {
                seg: prompt[pos..].to_vec(),
                children: Vec::new(),
                parent: cur,
                prefix_start: pos as u64,
                materialized: false,
                owner,
                refcount: 1,
                stamp,
                alive: true,
            };
            self.nodes.push(tail);
            let idx = self.nodes.len() - 1;
            self.nodes[cur].children.push(idx);
            idx
        } else {
            cur
        };
        Lookup {
            hit_tokens,
            dep_node,
            leaf,
        }
    }

    /// Materialize path nodes fully covered by prompt positions `[0, upto)`.
    pub fn materialize_to(&mut self, leaf: usize, upto: u64) {
        let mut n = leaf;
        while n != usize::MAX {
            let node = &self.nodes[n];
            if node.prefix_start + node.seg.len() as u64 <= upto && !node.materialized {
                debug_assert!(node.refcount > 0, "materializing an unreferenced node");
                self.nodes[n].materialized = true;
                let bytes = self.node_bytes(n);
                self.materialized_bytes += bytes;
                if self.nodes[n].refcount > 0 {
                    self.referenced_bytes += bytes;
                }
            }
            n = self.nodes[n].parent;
        }
    }

    /// Drop one reference along the path (completion or retraction).
    pub fn release(&mut self, leaf: usize) {
        let stamp = self.tick();
        let mut n = leaf;
        while n != usize::MAX {
            let parent = self.nodes[n].parent;
            if self.nodes[n].alive {
                debug_assert!(self.nodes[n].refcount > 0);
                self.nodes[n].refcount -= 1;
                self.nodes[n].stamp = stamp;
                if self.nodes[n].refcount == 0 && self.nodes[n].materialized {
                    self.referenced_bytes -= self.node_bytes(n);
                }
                if n != ROOT {
                    self.maybe_evictable(n);
                }
            }
            n = parent;
        }
    }

    /// Evict refcount-zero materialized leaves, least recently used first,
    /// until resident bytes fit the budget. Returns evicted bytes.
    pub fn evict_to(&mut self, budget: u64) -> u64 {
        let mut evicted = 0u64;
        while self.materialized_bytes > budget {
            let Some(&(stamp, n)) = self.evictable.iter().next() else {
                break;
            };
            self.evictable.remove(&(stamp, n));
            evicted += self.node_bytes(n);
            self.delete(n);
        }
        evicted
    }

    /// Sequential-replay helper: hit length against cached content, then
    /// cache the whole prompt (immediately computed, unreferenced).
    pub fn insert_materialized(&mut self, prompt: &[TokenId]) -> u64 {
        let res = self.lookup_claim(RequestId::MAX, prompt);
        self.materialize_to(res.leaf, prompt.len() as u64);
        self.release(res.leaf);
        res.hit_tokens
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_cache_misses() {
        let mut c = RuntimeCache::new(4);
        assert_eq!(c.insert_materialized(&[1, 2, 3]), 0);
        assert_eq!(c.materialized_bytes(), 12);
        assert_eq!(c.referenced_bytes(), 0);
    }

    #[test]
    fn identical_prompt_full_hit() {
        let mut c = RuntimeCache::new(4);
        c.insert_materialized(&[5, 6, 7, 8]);
        assert_eq!(c.insert_materialized(&[5, 6, 7, 8]), 4);
        assert_eq!(c.materialized_bytes(), 16);
    }

    #[test]
    fn partial_hit_splits() {
        let mut c = RuntimeCache::new(1);
        c.insert_materialized(&[1, 2, 3, 4]);
        assert_eq!(c.insert_materialized(&[1, 2, 9]), 2);
        // 4 original + 1 new suffix token resident.
        assert_eq!(c.materialized_bytes(), 5);
        assert_eq!(c.insert_materialized(&[1, 2, 3, 4]), 4);
    }

    #[test]
    fn claims_count_as_hits_with_dependency() {
        let mut c = RuntimeCache::new(1);
        let a = c.lookup_claim(1, &[1, 2, 3, 4]);
        assert_eq!(a.hit_tokens, 0);
        assert!(a.dep_node.is_none());
        let b = c.lookup_claim(2, &[1, 2, 3, 4, 5]);
        assert_eq!(b.hit_tokens, 4);
        let dep = b.dep_node.expect("depends on request 1's claim");
        assert!(!c.node_materialized(dep));
        c.materialize_to(a.leaf, 4);
        assert!(c.node_materialized(dep));
        assert_eq!(c.materialized_bytes(), 4);
        // Both requests reference the shared 4 tokens.
        assert_eq!(c.referenced_bytes(), 4);
    }

    #[test]
    fn paths_survive_splits_by_later_lookups() {
        let mut c = RuntimeCache::new(1);
        let a = c.lookup_claim(1, &[1, 2, 3, 4]);
        c.materialize_to(a.leaf, 4);
        // A second request splits request 1's node in the middle.
        let b = c.lookup_claim(2, &[1, 2, 9]);
        assert_eq!(b.hit_tokens, 2);
        // Releasing request 1 still walks the full (split) chain.
        c.release(a.leaf);
        c.release(b.leaf);
        assert_eq!(c.referenced_bytes(), 0);
        c.evict_to(0);
        assert_eq!(c.materialized_bytes(), 0);
    }

    #[test]
    fn lru_eviction_order() {
        let mut c = RuntimeCache::new(1);
        c.insert_materialized(&[1, 1, 1]);
        c.insert_materialized(&[2, 2, 2]);
        c.insert_materialized(&[3, 3, 3]);
        assert_eq!(c.materialized_bytes(), 9);
        c.evict_to(6);
        assert_eq!(c.materialized_bytes(), 6);
        // Oldest path (1,1,1) went first.
        assert_eq!(c.insert_materialized(&[2, 2, 2]), 3);
        assert_eq!(c.insert_materialized(&[1, 1, 1]), 0);
    }

    #[test]
    fn referenced_paths_are_not_evicted() {
        let mut c = RuntimeCache::new(1);
        let l = c.lookup_claim(7, &[4, 4, 4, 4]);
        c.materialize_to(l.leaf, 4);
        assert_eq!(c.referenced_bytes(), 4);
        c.evict_to(0);
        assert_eq!(c.materialized_bytes(), 4);
        c.release(l.leaf);
        assert_eq!(c.referenced_bytes(), 0);
        c.evict_to(0);
        assert_eq!(c.materialized_bytes(), 0);
    }

    #[test]
    fn orphaned_claims_vanish_on_release() {
        let mut c = RuntimeCache::new(1);
        let l = c.lookup_claim(9, &[8, 8]);
        assert_eq!(c.claims_on_path(l.leaf, 9).len(), 1);
        c.release(l.leaf);
        // Nothing was computed, so nothing is cached or claimable.
        let l2 = c.lookup_claim(10, &[8, 8]);
        assert_eq!(l2.hit_tokens, 0);
    }
}
