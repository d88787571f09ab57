//! Indented text dump of an annotated tree, for golden-file tests and
//! eyeballing schedules. One line per node: depth, segment length, the
//! first 8 segment tokens, density, estimated output length and request
//! ids, nested by two-space indentation.

use std::fmt;

use super::{PrefixTree, RequestId, ROOT};

#[derive(Debug, Clone, PartialEq)]
pub struct DumpNode {
    pub depth: u32,
    pub seg_len: u64,
    pub head_tokens: Vec<u32>,
    pub rho: String,
    pub est_out: String,
    pub requests: Vec<RequestId>,
    pub merged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeDump {
    pub nodes: Vec<DumpNode>,
}

fn fmt_rho(rho: f64) -> String {
    if rho.is_infinite() {
        "inf".to_string()
    } else {
        format!("{rho:.6}")
    }
}

impl PrefixTree {
    pub fn dump(&self) -> TreeDump {
        let mut nodes = Vec::new();
        let mut stack = vec![ROOT];
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n];
            nodes.push(DumpNode {
                depth: node.depth,
                seg_len: node.segment.len() as u64,
                head_tokens: node.segment.iter().take(8).copied().collect(),
                rho: fmt_rho(node.rho),
                est_out: format!("{:.3}", node.est_output),
                requests: node.requests.clone(),
                merged: node.merged,
            });
            for &c in node.children.iter().rev() {
                stack.push(c);
            }
        }
        TreeDump { nodes }
    }
}

impl fmt::Display for TreeDump {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for n in &self.nodes {
            let indent = "  ".repeat(n.depth as usize);
            let tokens = n
                .head_tokens
                .iter()
                .map(|t| t.to_string())
                .collect::<Vec<_>>()
                .join(",");
            let reqs = n
                .requests
                .iter()
                .map(|r| r.to_string())
                .collect::<Vec<_>>()
                .join(",");
            let merged = if n.merged { " merged" } else { "" };
            writeln!(
                f,
                "{indent}node depth={} seg_len={} tokens=[{}] rho={} est_out={} reqs=[{}]{}",
                n.depth, n.seg_len, tokens, n.rho, n.est_out, reqs, merged
            )?;
        }
        Ok(())
    }
}

impl TreeDump {
    /// Parse a rendered dump back into structured rows, validating the
    /// indentation nesting.
    pub fn parse(text: &str) -> Result<TreeDump, String> {
        let mut nodes = Vec::new();
        let mut prev_depth: i64 = -1;
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let indent = line.len() - line.trim_start().len();
            if indent % 2 != 0 {
                return Err(format!("line {}: odd indentation", lineno + 1));
            }
            let body = line.trim_start();
            let mut depth = None;
            let mut seg_len = None;
            let mut head_tokens = Vec::new();
            let mut rho = String::new();
            let mut est_out = String::new();
            let mut requests = Vec::new();
            let mut merged = false;
            for part in body.split_whitespace() {
                if part == "node" {
                    continue;
                }
                if part == "merged" {
                    merged = true;
                    continue;
                }
                let (key, value) = part
                    .split_once('=')
                    .ok_or_else(|| format!("line {}: bad field `{part}`", lineno + 1))?;
                match key {
                    "depth" => {
                        depth = Some(value.parse::<u32>().map_err(|e| e.to_string())?);
                    }
                    "seg_len" => {
                        seg_len = Some(value.parse::<u64>().map_err(|e| e.to_string())?);
                    }
                    "tokens" => {
                        let inner = value.trim_start_matches('[').trim_end_matches(']');
                        if !inner.is_empty() {
                            for t in inner.split(',') {
                                head_tokens.push(t.parse::<u32>().map_err(|e| e.to_string())?);
                            }
                        }
                    }
                    "rho" => rho = value.to_string(),
                    "est_out" => est_out = value.to_string(),
                    "reqs" => {
                        let inner = value.trim_start_matches('[').trim_end_matches(']');
                        if !inner.is_empty() {
                            for r in inner.split(',') {
                                requests.push(r.parse::<RequestId>().map_err(|e| e.to_string())?);
                            }
                        }
                    }
                    other => return Err(format!("line {}: unknown field `{other}`", lineno + 1)),
                }
            }
            let depth = depth.ok_or_else(|| format!("line {}: missing depth", lineno + 1))?;
            if indent as u32 != depth * 2 {
                return Err(format!(
                    "line {}: indentation {} disagrees with depth {}",
                    lineno + 1,
                    indent,
                    depth
                ));
            }
            if depth as i64 > prev_depth + 1 {
                return Err(format!("line {}: depth jumps over a level", lineno + 1));
            }
            prev_depth = depth as i64;
            nodes.push(DumpNode {
                depth,
                seg_len: seg_len.ok_or_else(|| format!("line {}: missing seg_len", lineno + 1))?,
                head_tokens,
                rho,
                est_out,
                requests,
                merged,
            });
        }
        Ok(TreeDump { nodes })
    }
}
