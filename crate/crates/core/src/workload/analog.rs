//! Generators for desk-scale analogs of public inference traces: a
//! compute-intensive chat trace, a memory-intensive video-generation trace
//! and a high-duplication benchmark trace. The synthesizer mixes these
//! three to hit density/sharing targets.

use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use super::{
    MixSpec, OutputLenSpec, PromptSource, RANDOM_TOKEN_HI, RANDOM_TOKEN_LO, TraceRef, TraceSpec,
    WorkloadError,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalogConfig {
    /// Records generated per trace; each pool must cover the mix total.
    pub requests_per_trace: u64,
    pub seed: u64,
    /// Benchmark-trace group count (subjects) and shapes.
    pub groups: u64,
    pub group_prompt_len: u64,
    pub tail_len: u64,
    /// Mean output length the video trace is normalized to. Desk-scale
    /// default keeps generation depth well under the run length.
    pub video_output_mean: f64,
    /// Mean output length the chat trace is normalized to.
    pub chat_output_mean: f64,
}

impl Default for AnalogConfig {
    fn default() -> Self {
        AnalogConfig {
            requests_per_trace: 10_000,
            seed: 7,
            groups: 50,
            group_prompt_len: 720,
            tail_len: 60,
            video_output_mean: 4096.0,
            chat_output_mean: 256.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalogTraces {
    pub compute: TraceRef,
    pub memory: TraceRef,
    pub sharing: TraceRef,
}

fn sample_clamped(rng: &mut ChaCha12Rng, dist: &LogNormal<f64>, lo: u64, hi: u64) -> u64 {
    (dist.sample(rng) as u64).clamp(lo, hi)
}

fn open(path: &Path) -> Result<BufWriter<std::fs::File>, WorkloadError> {
    let file = std::fs::File::create(path).map_err(|e| WorkloadError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(BufWriter::new(file))
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> WorkloadError + '_ {
    move |e| WorkloadError::Io {
        path: path.display().to_string(),
        source: e,
    }
}

/// Write the three analog trace files into `dir` and return trace refs
/// ready for a [`MixSpec`].
pub fn write_analog_traces(dir: &Path, cfg: &AnalogConfig) -> Result<AnalogTraces, WorkloadError> {
    std::fs::create_dir_all(dir).map_err(|e| WorkloadError::Io {
        path: dir.display().to_string(),
        source: e,
    })?;
    let n = cfg.requests_per_trace;

    // Chat-style compute trace: medium prompts, short outputs.
    let chat_path: PathBuf = dir.join("chat_analog.jsonl");
    {
        let mut w = open(&chat_path)?;
        let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed.wrapping_add(0x11));
        let prompt_dist = LogNormal::new(520f64.ln(), 0.55).unwrap();
        let out_dist = LogNormal::new(cfg.chat_output_mean.ln() - 0.18, 0.6).unwrap();
        for id in 0..n {
            let p = sample_clamped(&mut rng, &prompt_dist, 16, 3000);
            let d = sample_clamped(&mut rng, &out_dist, 1, 2000);
            writeln!(w, r#"{{"id":{id},"prompt_len":{p},"output_len":{d}}}"#)
                .map_err(io_err(&chat_path))?;
        }
    }

    // Video-generation memory trace: short prompts, frame counts.
    let video_path = dir.join("video_analog.jsonl");
    {
        let mut w = open(&video_path)?;
        let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed.wrapping_add(0x22));
        let prompt_dist = LogNormal::new(55f64.ln(), 0.4).unwrap();
        let mean_frames = cfg.video_output_mean / super::TOKENS_PER_FRAME as f64;
        let frames_dist = LogNormal::new(mean_frames.ln(), 0.25).unwrap();
        for id in 0..n {
            let p = sample_clamped(&mut rng, &prompt_dist, 8, 200);
            let frames = sample_clamped(&mut rng, &frames_dist, 4, (mean_frames * 2.5) as u64);
            writeln!(w, r#"{{"id":{id},"prompt_len":{p},"frames":{frames}}}"#)
                .map_err(io_err(&video_path))?;
        }
    }

    // Benchmark sharing trace: per-group shared prompts, unique question
    // tails, two output tokens.
    let bench_path = dir.join("bench_analog.jsonl");
    {
        let mut w = open(&bench_path)?;
        let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed.wrapping_add(0x33));
        let group_prompts: Vec<Vec<u32>> = (0..cfg.groups)
            .map(|_| {
                (0..cfg.group_prompt_len)
                    .map(|_| rng.random_range(RANDOM_TOKEN_LO..RANDOM_TOKEN_HI))
                    .collect()
            })
            .collect();
        let per_group = n.div_ceil(cfg.groups);
        let mut id = 0u64;
        'outer: for g in 0..cfg.groups {
            for _ in 0..per_group {
                if id >= n {
                    break 'outer;
                }
                let mut tokens = group_prompts[g as usize].clone();
                tokens
                    .extend((0..cfg.tail_len).map(|_| rng.random_range(RANDOM_TOKEN_LO..RANDOM_TOKEN_HI)));
                let tokens_json = serde_json::to_string(&tokens).expect("token array");
                writeln!(
                    w,
                    r#"{{"id":{id},"prompt_tokens":{tokens_json},"output_len":2}}"#
                )
                .map_err(io_err(&bench_path))?;
                id += 1;
            }
        }
    }

    Ok(AnalogTraces {
        compute: TraceRef {
            path: chat_path.display().to_string(),
            spec: TraceSpec {
                name: "chat-analog".into(),
                modality: "chat".into(),
                prompt_source: PromptSource::LengthOnly,
                system_prompt_len: 32,
                output_lens: OutputLenSpec::Records,
                known_output: false,
                normalization: Some(cfg.chat_output_mean),
                seed: cfg.seed.wrapping_add(0x44),
            },
        },
        memory: TraceRef {
            path: video_path.display().to_string(),
            spec: TraceSpec {
                name: "video-analog".into(),
                modality: "video".into(),
                prompt_source: PromptSource::LengthOnly,
                system_prompt_len: 24,
                output_lens: OutputLenSpec::Records,
                known_output: true,
                normalization: Some(cfg.video_output_mean),
                seed: cfg.seed.wrapping_add(0x55),
            },
        },
        sharing: TraceRef {
            path: bench_path.display().to_string(),
            spec: TraceSpec {
                name: "bench-analog".into(),
                modality: "benchmark".into(),
                prompt_source: PromptSource::TokenIds,
                system_prompt_len: 64,
                output_lens: OutputLenSpec::Records,
                known_output: false,
                normalization: None,
                seed: cfg.seed.wrapping_add(0x66),
            },
        },
    })
}

impl AnalogTraces {
    /// A full mix spec over these traces.
    pub fn mix(&self, density: f64, sharing: f64, total_requests: u64, seed: u64) -> MixSpec {
        MixSpec {
            target_density: density,
            target_sharing: sharing,
            total_requests,
            seed,
            compute_trace: self.compute.clone(),
            memory_trace: self.memory.clone(),
            sharing_trace: self.sharing.clone(),
        }
    }
}
