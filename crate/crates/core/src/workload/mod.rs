//! Trace ingestion and synthetic multi-modal workload generation.
//!
//! Traces arrive as JSONL, one record per line:
//! `{"id": int, "prompt_tokens": [int...] | "prompt_len": int,
//!   "output_len": int?, "frames": int?, "modality": str?}`.
//! Length-only records get seeded random token ids behind a per-trace
//! synthetic system prompt; video records derive output length from frame
//! counts (256 tokens per frame). Workload files use the same layout with
//! prompt tokens materialized plus a JSON metadata sidecar.

mod analog;
mod synth;

pub use analog::{AnalogConfig, AnalogTraces, write_analog_traces};
pub use synth::{SynthMetadata, SynthOutput, TraceCounts, synthesize};

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost_model::{
    HardwareConfig, ModelConfig, aggregate_density, comp_flops, decode_load_bytes,
};
use crate::prefix_tree::{PrefixTree, Request, RequestId, TokenId};

/// Random token ids for length-only prompts stay in this range to avoid
/// accidental cross-trace sharing with crafted prompts.
pub const RANDOM_TOKEN_LO: u32 = 1_000;
pub const RANDOM_TOKEN_HI: u32 = 32_000;

/// Tokens per generated video frame.
pub const TOKENS_PER_FRAME: u64 = 256;

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed record: {message}")]
    MalformedRecord {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: negative length field {field}")]
    NegativeLength {
        path: String,
        line: usize,
        field: &'static str,
    },
    #[error("trace `{trace}` has {have} records, {need} needed")]
    PoolTooSmall {
        trace: String,
        have: usize,
        need: usize,
    },
    #[error(
        "target density {target} infeasible: {binding} trace bounds achievable density to [{min:.4}, {max:.4}]"
    )]
    DensityInfeasible {
        target: f64,
        binding: &'static str,
        min: f64,
        max: f64,
    },
    #[error(
        "target sharing {target} exceeds what the sharing trace can provide (max achievable {max:.4})"
    )]
    SharingInfeasible { target: f64, max: f64 },
    #[error("synthesis converged outside tolerance: achieved density {density:.4}, sharing {sharing:.4} (targets {target_density:.4}/{target_sharing:.4}, tolerance {tol})")]
    OutsideTolerance {
        density: f64,
        sharing: f64,
        target_density: f64,
        target_sharing: f64,
        tol: f64,
    },
    #[error(transparent)]
    Tree(#[from] crate::prefix_tree::TreeError),
    #[error("invalid mix spec: {0}")]
    InvalidMix(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptSource {
    /// Records carry explicit `prompt_tokens`.
    TokenIds,
    /// Records carry `prompt_len`; token ids are randomized at load.
    LengthOnly,
}

/// Where output lengths come from when loading a trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputLenSpec {
    /// Use each record's `output_len` (or `frames` for video traces).
    Records,
    Fixed(u64),
    LogNormal { mean: f64, sigma: f64 },
    Empirical(Vec<u64>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceSpec {
    pub name: String,
    pub modality: String,
    pub prompt_source: PromptSource,
    /// Unique synthetic system prompt prepended to every request.
    pub system_prompt_len: u64,
    pub output_lens: OutputLenSpec,
    pub known_output: bool,
    /// Scale output lengths to this mean, preserving relative variance.
    pub normalization: Option<f64>,
    pub seed: u64,
}

/// A trace spec plus the JSONL file it loads from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRef {
    pub path: String,
    #[serde(flatten)]
    pub spec: TraceSpec,
}

/// Targets for synthesizing one workload out of three traces.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixSpec {
    pub target_density: f64,
    pub target_sharing: f64,
    pub total_requests: u64,
    pub seed: u64,
    pub compute_trace: TraceRef,
    pub memory_trace: TraceRef,
    pub sharing_trace: TraceRef,
}

impl MixSpec {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        if self.total_requests < 1 {
            return Err(WorkloadError::InvalidMix("total_requests < 1".into()));
        }
        if !(self.target_sharing >= 0.0 && self.target_sharing < 1.0) {
            return Err(WorkloadError::InvalidMix(format!(
                "target_sharing {} outside [0, 1)",
                self.target_sharing
            )));
        }
        if !(self.target_density > 0.0) {
            return Err(WorkloadError::InvalidMix(format!(
                "target_density {} must be positive",
                self.target_density
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Deserialize)]
struct RawRecord {
    id: u64,
    #[serde(default)]
    prompt_tokens: Option<Vec<TokenId>>,
    #[serde(default)]
    prompt_len: Option<i64>,
    #[serde(default)]
    output_len: Option<i64>,
    #[serde(default)]
    frames: Option<i64>,
    #[serde(default)]
    modality: Option<String>,
    #[serde(default)]
    known_output: Option<bool>,
}

fn fnv1a(text: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in text.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn random_token(rng: &mut ChaCha12Rng) -> TokenId {
    rng.random_range(RANDOM_TOKEN_LO..RANDOM_TOKEN_HI)
}

/// Load a trace file into requests per the spec: random token ids behind a
/// unique system prompt for length-only records, frame counts converted to
/// tokens, then optional mean normalization.
pub fn load_trace(path: &Path, spec: &TraceSpec) -> Result<Vec<Request>, WorkloadError> {
    let file = std::fs::File::open(path).map_err(|e| WorkloadError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let reader = std::io::BufReader::new(file);
    let path_str = path.display().to_string();

    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed ^ fnv1a(&spec.name));
    let system_prompt: Vec<TokenId> = (0..spec.system_prompt_len)
        .map(|_| random_token(&mut rng))
        .collect();

    struct Parsed {
        id: u64,
        prompt: Vec<TokenId>,
        d_raw: u64,
        modality: Option<String>,
    }

    let mut parsed = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| WorkloadError::Io {
            path: path_str.clone(),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RawRecord =
            serde_json::from_str(&line).map_err(|e| WorkloadError::MalformedRecord {
                path: path_str.clone(),
                line: lineno,
                message: e.to_string(),
            })?;
        let prompt = match (&rec.prompt_tokens, rec.prompt_len, spec.prompt_source) {
            (Some(tokens), None, PromptSource::TokenIds) => {
                let mut p = system_prompt.clone();
                p.extend_from_slice(tokens);
                p
            }
            (None, Some(len), PromptSource::LengthOnly) => {
                if len < 0 {
                    return Err(WorkloadError::NegativeLength {
                        path: path_str,
                        line: lineno,
                        field: "prompt_len",
                    });
                }
                let mut p = system_prompt.clone();
                p.extend((0..len as u64).map(|_| random_token(&mut rng)));
                p
            }
            _ => {
                return Err(WorkloadError::MalformedRecord {
                    path: path_str,
                    line: lineno,
                    message: format!(
                        "expected exactly `{}` for this trace",
                        match spec.prompt_source {
                            PromptSource::TokenIds => "prompt_tokens",
                            PromptSource::LengthOnly => "prompt_len",
                        }
                    ),
                });
            }
        };
        let d_raw = if let Some(frames) = rec.frames {
            if frames < 0 {
                return Err(WorkloadError::NegativeLength {
                    path: path_str,
                    line: lineno,
                    field: "frames",
                });
            }
            frames as u64 * TOKENS_PER_FRAME
        } else if let Some(out) = rec.output_len {
            if out < 0 {
                return Err(WorkloadError::NegativeLength {
                    path: path_str,
                    line: lineno,
                    field: "output_len",
                });
            }
            out as u64
        } else {
            match &spec.output_lens {
                OutputLenSpec::Records => {
                    return Err(WorkloadError::MalformedRecord {
                        path: path_str,
                        line: lineno,
                        message: "record lacks output_len/frames".into(),
                    });
                }
                OutputLenSpec::Fixed(v) => *v,
                OutputLenSpec::LogNormal { mean, sigma } => {
                    let mu = mean.ln() - sigma * sigma / 2.0;
                    let dist = rand_distr::LogNormal::new(mu, *sigma)
                        .expect("valid lognormal parameters");
                    (rng.sample(dist) as u64).max(1)
                }
                OutputLenSpec::Empirical(values) => {
                    let i = rng.random_range(0..values.len());
                    values[i]
                }
            }
        };
        parsed.push(Parsed {
            id: rec.id,
            prompt,
            d_raw,
            modality: rec.modality,
        });
    }

    let scale = match spec.normalization {
        Some(target_mean) if !parsed.is_empty() => {
            let sum: u128 = parsed.iter().map(|p| p.d_raw as u128).sum();
            let mean = sum as f64 / parsed.len() as f64;
            if mean > 0.0 { target_mean / mean } else { 1.0 }
        }
        _ => 1.0,
    };

    Ok(parsed
        .into_iter()
        .map(|p| Request {
            id: p.id,
            prompt: p.prompt,
            true_output_len: ((p.d_raw as f64 * scale).round() as u64).max(1),
            known_output: spec.known_output,
            modality: p.modality.unwrap_or_else(|| spec.modality.clone()),
        })
        .collect())
}

/// Load a materialized workload file (prompt tokens present).
pub fn load_workload(path: &Path) -> Result<Vec<Request>, WorkloadError> {
    let file = std::fs::File::open(path).map_err(|e| WorkloadError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let reader = std::io::BufReader::new(file);
    let path_str = path.display().to_string();
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| WorkloadError::Io {
            path: path_str.clone(),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RawRecord =
            serde_json::from_str(&line).map_err(|e| WorkloadError::MalformedRecord {
                path: path_str.clone(),
                line: lineno,
                message: e.to_string(),
            })?;
        let tokens = rec
            .prompt_tokens
            .ok_or_else(|| WorkloadError::MalformedRecord {
                path: path_str.clone(),
                line: lineno,
                message: "workload records require prompt_tokens".into(),
            })?;
        let out_len = rec
            .output_len
            .ok_or_else(|| WorkloadError::MalformedRecord {
                path: path_str.clone(),
                line: lineno,
                message: "workload records require output_len".into(),
            })?;
        if out_len < 0 {
            return Err(WorkloadError::NegativeLength {
                path: path_str,
                line: lineno,
                field: "output_len",
            });
        }
        out.push(Request {
            id: rec.id,
            prompt: tokens,
            true_output_len: out_len as u64,
            known_output: rec.known_output.unwrap_or(false),
            modality: rec.modality.unwrap_or_else(|| "unknown".into()),
        });
    }
    Ok(out)
}

/// Write a workload as JSONL with prompt tokens materialized.
pub fn write_workload(path: &Path, requests: &[Request]) -> Result<(), WorkloadError> {
    let file = std::fs::File::create(path).map_err(|e| WorkloadError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut w = BufWriter::new(file);
    for r in requests {
        let rec = serde_json::json!({
            "id": r.id,
            "prompt_tokens": r.prompt,
            "output_len": r.true_output_len,
            "known_output": r.known_output,
            "modality": r.modality,
        });
        writeln!(w, "{rec}").map_err(|e| WorkloadError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct ModalitySummary {
    pub modality: String,
    pub count: u64,
    pub mean_prompt_len: f64,
    pub mean_output_len: f64,
    /// Raw per-modality density (no sharing adjustment).
    pub density: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Histogram {
    /// `(bucket_lo, count)` with power-of-two bucket edges.
    pub buckets: Vec<(u64, u64)>,
}

fn log2_histogram(values: impl Iterator<Item = u64>) -> Histogram {
    let mut map = std::collections::BTreeMap::new();
    for v in values {
        let lo = if v == 0 { 0 } else { 1u64 << v.ilog2() };
        *map.entry(lo).or_insert(0u64) += 1;
    }
    Histogram {
        buckets: map.into_iter().collect(),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct WorkloadSummary {
    pub total_requests: u64,
    pub total_prompt_tokens: u64,
    pub total_output_tokens: u64,
    pub per_modality: Vec<ModalitySummary>,
    pub prompt_len_histogram: Histogram,
    pub output_len_histogram: Histogram,
    pub aggregate_density: f64,
    pub optimal_sharing: f64,
    pub t_comp_s: f64,
    pub t_mem_s: f64,
}

/// Summarize counts, length histograms, per-modality and aggregate
/// (sharing-aware) density, and the optimal sharing ratio.
pub fn describe(
    requests: &[Request],
    mc: &ModelConfig,
    hc: &HardwareConfig,
) -> Result<WorkloadSummary, WorkloadError> {
    let mut tree = PrefixTree::build(requests)?;
    tree.sample_output_lengths(1.0, 0, 256.0)?;
    tree.annotate_density(mc, hc)?;
    let agg = tree.true_aggregate(hc);

    let mut modalities: Vec<String> = requests.iter().map(|r| r.modality.clone()).collect();
    modalities.sort();
    modalities.dedup();
    let per_modality = modalities
        .into_iter()
        .map(|m| {
            let subset: Vec<&Request> = requests.iter().filter(|r| r.modality == m).collect();
            let count = subset.len() as u64;
            let p_sum: u64 = subset.iter().map(|r| r.prompt.len() as u64).sum();
            let d_sum: u64 = subset.iter().map(|r| r.true_output_len).sum();
            let comp: u128 = subset
                .iter()
                .map(|r| comp_flops(mc, r.prompt.len() as u64, r.true_output_len))
                .sum();
            let mem: u128 = subset
                .iter()
                .map(|r| decode_load_bytes(mc, r.prompt.len() as u64, r.true_output_len))
                .sum();
            let comp_s = comp as f64 / hc.peak_compute_flops();
            let mem_s = mem as f64 / hc.peak_bandwidth_bytes();
            ModalitySummary {
                modality: m,
                count,
                mean_prompt_len: p_sum as f64 / count as f64,
                mean_output_len: d_sum as f64 / count as f64,
                density: if mem_s == 0.0 {
                    f64::INFINITY
                } else {
                    comp_s / mem_s
                },
            }
        })
        .collect();

    Ok(WorkloadSummary {
        total_requests: requests.len() as u64,
        total_prompt_tokens: requests.iter().map(|r| r.prompt.len() as u64).sum(),
        total_output_tokens: requests.iter().map(|r| r.true_output_len).sum(),
        per_modality,
        prompt_len_histogram: log2_histogram(requests.iter().map(|r| r.prompt.len() as u64)),
        output_len_histogram: log2_histogram(requests.iter().map(|r| r.true_output_len)),
        aggregate_density: aggregate_density(&agg),
        optimal_sharing: agg.sharing_ratio,
        t_comp_s: agg.t_comp,
        t_mem_s: agg.t_mem,
    })
}

/// Content hash of a request set (order-independent), used to pair
/// schedules and reports with the workload they were built from.
pub fn fingerprint_requests(requests: &[Request]) -> String {
    use sha2::{Digest, Sha256};
    let mut sorted: Vec<&Request> = requests.iter().collect();
    sorted.sort_by_key(|r| r.id);
    let mut hasher = Sha256::new();
    for r in sorted {
        hasher.update(r.id.to_le_bytes());
        hasher.update((r.prompt.len() as u64).to_le_bytes());
        for t in &r.prompt {
            hasher.update(t.to_le_bytes());
        }
        hasher.update(r.true_output_len.to_le_bytes());
        hasher.update([r.known_output as u8]);
        hasher.update(r.modality.as_bytes());
        hasher.update([0u8]);
    }
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Uniformly subsample a workload, preserving per-modality proportions.
/// Ids are reassigned densely in the retained order.
pub fn scale_workload(requests: &[Request], scale: f64, seed: u64) -> Vec<Request> {
    assert!(scale > 0.0 && scale <= 1.0, "scale must lie in (0, 1]");
    if scale >= 1.0 {
        return requests.to_vec();
    }
    let mut modalities: Vec<String> = requests.iter().map(|r| r.modality.clone()).collect();
    modalities.sort();
    modalities.dedup();
    let mut keep: Vec<RequestId> = Vec::new();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    for m in modalities {
        let mut ids: Vec<RequestId> = requests
            .iter()
            .filter(|r| r.modality == m)
            .map(|r| r.id)
            .collect();
        let target = ((ids.len() as f64 * scale).round() as usize).max(1);
        use rand::seq::SliceRandom;
        ids.shuffle(&mut rng);
        ids.truncate(target);
        keep.extend(ids);
    }
    let keep: std::collections::HashSet<RequestId> = keep.into_iter().collect();
    let mut out: Vec<Request> = requests
        .iter()
        .filter(|r| keep.contains(&r.id))
        .cloned()
        .collect();
    for (i, r) in out.iter_mut().enumerate() {
        r.id = i as RequestId;
    }
    out
}

#[cfg(test)]
mod tests;
