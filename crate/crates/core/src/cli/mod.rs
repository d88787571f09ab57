//! Command-line pipeline: synthesize workloads, build schedules, simulate
//! them, and compare policies. Stages communicate through JSONL/JSON/CSV
//! files; every run writes its fully-resolved configuration next to its
//! outputs.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{self, load_configs};
use crate::cost_model::{AggregateCost, HardwareConfig, ModelConfig, optimal_time};
use crate::engine_sim::{self, OverlapModel, SimError, SimReport};
use crate::prefix_tree::PrefixTree;
use crate::scheduler::{
    self, Policy, ScheduleMeta, SchedulerConfig, order_baseline, order_dual_scanner,
};
use crate::workload::{
    AnalogConfig, MixSpec, fingerprint_requests, load_workload, scale_workload, synthesize,
    write_analog_traces, write_workload,
};

/// Scheduling engine and throughput simulator for offline batch inference.
#[derive(Debug, Parser)]
#[command(name = "blendsched", version, about)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    model_hw: ModelHwArgs,
}

/// Model/hardware parameters; flags mirror config-file keys exactly.
#[derive(Debug, Args)]
struct ModelHwArgs {
    /// Flat key-value config file with model/hardware parameters.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long = "param_count", global = true)]
    param_count: Option<f64>,
    #[arg(long = "hidden_dim", global = true)]
    hidden_dim: Option<f64>,
    #[arg(long = "kv_dim_per_layer", global = true)]
    kv_dim_per_layer: Option<f64>,
    #[arg(long = "num_layers", global = true)]
    num_layers: Option<f64>,
    #[arg(long = "peak_compute", global = true)]
    peak_compute: Option<f64>,
    #[arg(long = "peak_bandwidth", global = true)]
    peak_bandwidth: Option<f64>,
    #[arg(long = "kv_memory_capacity", global = true)]
    kv_memory_capacity: Option<f64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate desk-scale analog trace files plus a traces.toml index.
    GenTraces {
        /// Output directory for the trace files.
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        requests: u64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Mean output length the video trace is normalized to.
        #[arg(long = "video_output_mean", default_value_t = 4096.0)]
        video_output_mean: f64,
        #[arg(long, default_value_t = 50)]
        groups: u64,
        #[arg(long = "group_prompt_len", default_value_t = 720)]
        group_prompt_len: u64,
        #[arg(long = "tail_len", default_value_t = 60)]
        tail_len: u64,
    },
    /// Synthesize a workload hitting density/sharing targets.
    Synth {
        /// Full mix spec (TOML). Alternatively give --traces plus targets.
        #[arg(long)]
        mix: Option<PathBuf>,
        /// traces.toml from gen-traces.
        #[arg(long)]
        traces: Option<PathBuf>,
        #[arg(long = "target_density")]
        target_density: Option<f64>,
        #[arg(long = "target_sharing")]
        target_sharing: Option<f64>,
        #[arg(long = "total_requests")]
        total_requests: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output workload JSONL; metadata lands next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a tree, order requests under a policy, and form the step
    /// schedule.
    Schedule {
        #[arg(long)]
        workload: PathBuf,
        #[arg(long = "out_dir")]
        out_dir: PathBuf,
        #[arg(long, default_value = "blend")]
        policy: String,
        #[arg(long = "sample_prob", default_value_t = 0.01)]
        sample_prob: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Outlier-relocation budget in shared prefix tokens.
        #[arg(long = "waste_threshold", default_value_t = 256)]
        waste_threshold: i64,
        #[arg(long, default_value_t = 128)]
        granularity: u64,
        #[arg(long = "chunk_budget", default_value_t = 2048)]
        chunk_budget: u64,
        /// Prefix-cache budget in GB (defaults to the KV capacity).
        #[arg(long = "cache_budget")]
        cache_budget: Option<f64>,
        /// Fallback output length when nothing is sampled.
        #[arg(long = "default_output_len", default_value_t = 256.0)]
        default_output_len: f64,
        /// Uniformly subsample the workload, preserving modality mix.
        #[arg(long)]
        scale: Option<f64>,
    },
    /// Replay a schedule through the simulated backend.
    Simulate {
        #[arg(long)]
        schedule: PathBuf,
        #[arg(long)]
        workload: PathBuf,
        #[arg(long = "out_dir")]
        out_dir: PathBuf,
        /// Overlap model: sequential | perfect | interference.
        #[arg(long, default_value = "perfect")]
        overlap: String,
        /// Interference knots as `frac:slowdown,...`.
        #[arg(long)]
        interference: Option<String>,
    },
    /// Align simulate reports from the same workload into a table.
    Compare {
        #[arg(long, num_args = 2..)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Grid sweep: synthesize, schedule and simulate every
    /// (density, sharing) point under each policy.
    Sweep {
        /// traces.toml from gen-traces.
        #[arg(long)]
        traces: PathBuf,
        #[arg(long, default_value = "0.8,1.1,1.4")]
        densities: String,
        #[arg(long, default_value = "0.05,0.25,0.45")]
        sharings: String,
        #[arg(long = "total_requests", default_value_t = 2_000)]
        total_requests: u64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value = "blend,dfs")]
        policies: String,
        #[arg(long)]
        out: PathBuf,
        /// Scratch directory for per-point artifacts.
        #[arg(long = "work_dir")]
        work_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long = "sample_prob", default_value_t = 0.01)]
        sample_prob: f64,
    },
}

#[derive(Debug)]
pub enum CliError {
    /// Bad input or flags: exit code 2.
    User(String),
    /// Internal invariant violation: exit code 1.
    Internal(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::User(m) => write!(f, "{m}"),
            CliError::Internal(m) => write!(f, "internal error: {m}"),
        }
    }
}

fn user<E: std::fmt::Display>(e: E) -> CliError {
    CliError::User(e.to_string())
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::FingerprintMismatch { .. }
            | SimError::UnknownRequest(_)
            | SimError::InvalidOverlap(_) => CliError::User(e.to_string()),
            other => CliError::Internal(other.to_string()),
        }
    }
}

/// Parse argv, run, and map errors onto exit codes (0 ok, 1 internal
/// invariant violation, 2 user/input error).
pub fn main_entry() -> i32 {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => 0,
        Err(CliError::Internal(m)) => {
            eprintln!("internal error: {m}");
            1
        }
        Err(CliError::User(m)) => {
            eprintln!("error: {m}");
            2
        }
    }
}

fn resolve_configs(args: &ModelHwArgs) -> Result<(ModelConfig, HardwareConfig), CliError> {
    let (mut mc, mut hc) = match &args.config {
        Some(path) => load_configs(path).map_err(user)?,
        None => (
            config::default_model_config(),
            config::default_hardware_config(),
        ),
    };
    let overrides: [(&str, Option<f64>); 7] = [
        ("param_count", args.param_count),
        ("hidden_dim", args.hidden_dim),
        ("kv_dim_per_layer", args.kv_dim_per_layer),
        ("num_layers", args.num_layers),
        ("peak_compute", args.peak_compute),
        ("peak_bandwidth", args.peak_bandwidth),
        ("kv_memory_capacity", args.kv_memory_capacity),
    ];
    for (key, value) in overrides {
        if let Some(v) = value {
            config::apply_key(key, v, &mut mc, &mut hc).map_err(user)?;
        }
    }
    mc.validate().map_err(user)?;
    hc.validate().map_err(user)?;
    Ok((mc, hc))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text)
        .map_err(|e| user(format!("failed to write {}: {e}", path.display())))
}

fn write_resolved_config(
    dir: &Path,
    mc: &ModelConfig,
    hc: &HardwareConfig,
    extra: &BTreeMap<String, String>,
) -> Result<(), CliError> {
    let mut text = config::render_configs(mc, hc);
    for (k, v) in extra {
        text.push_str(&format!("{k} = {v}\n"));
    }
    write_text(&dir.join("resolved.toml"), &text)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (mc, hc) = resolve_configs(&cli.model_hw)?;
    match cli.command {
        Command::GenTraces {
            dir,
            requests,
            seed,
            video_output_mean,
            groups,
            group_prompt_len,
            tail_len,
        } => {
            let cfg = AnalogConfig {
                requests_per_trace: requests,
                seed,
                groups,
                group_prompt_len,
                tail_len,
                video_output_mean,
                ..AnalogConfig::default()
            };
            let traces = write_analog_traces(&dir, &cfg).map_err(user)?;
            let text = toml::to_string(&traces)
                .map_err(|e| CliError::Internal(format!("serialize traces.toml: {e}")))?;
            write_text(&dir.join("traces.toml"), &text)?;
            println!("wrote analog traces under {}", dir.display());
            Ok(())
        }
        Command::Synth {
            mix,
            traces,
            target_density,
            target_sharing,
            total_requests,
            seed,
            out,
        } => {
            let mut spec = load_mix_spec(mix.as_deref(), traces.as_deref())?;
            if let Some(d) = target_density {
                spec.target_density = d;
            }
            if let Some(s) = target_sharing {
                spec.target_sharing = s;
            }
            if let Some(n) = total_requests {
                spec.total_requests = n;
            }
            if let Some(s) = seed {
                spec.seed = s;
            }
            let result = synthesize(&spec, &mc, &hc).map_err(user)?;
            write_workload(&out, &result.requests).map_err(user)?;
            let meta_path = sibling(&out, "meta.json");
            write_text(
                &meta_path,
                &serde_json::to_string_pretty(&result.metadata)
                    .map_err(|e| CliError::Internal(e.to_string()))?,
            )?;
            if let Some(dir) = out.parent() {
                let mut extra = BTreeMap::new();
                extra.insert("target_density".into(), spec.target_density.to_string());
                extra.insert("target_sharing".into(), spec.target_sharing.to_string());
                extra.insert("total_requests".into(), spec.total_requests.to_string());
                extra.insert("seed".into(), spec.seed.to_string());
                write_resolved_config(dir, &mc, &hc, &extra)?;
            }
            println!(
                "achieved density={:.4} sharing={:.4} (targets {:.4}/{:.4}, {} requests)",
                result.metadata.achieved_density,
                result.metadata.achieved_sharing,
                spec.target_density,
                spec.target_sharing,
                result.metadata.total_requests
            );
            Ok(())
        }
        Command::Schedule {
            workload,
            out_dir,
            policy,
            sample_prob,
            seed,
            waste_threshold,
            granularity,
            chunk_budget,
            cache_budget,
            default_output_len,
            scale,
        } => {
            if waste_threshold < 0 {
                return Err(CliError::User(format!(
                    "waste_threshold must be non-negative, got {waste_threshold}"
                )));
            }
            std::fs::create_dir_all(&out_dir).map_err(user)?;
            let policy: Policy = policy.parse().map_err(user)?;
            let mut requests = load_workload(&workload).map_err(user)?;
            if let Some(scale) = scale {
                if !(scale > 0.0 && scale <= 1.0) {
                    return Err(CliError::User(format!("scale {scale} outside (0, 1]")));
                }
                requests = scale_workload(&requests, scale, seed);
                write_workload(&out_dir.join("workload_scaled.jsonl"), &requests)
                    .map_err(user)?;
            }
            let artifacts = build_schedule(
                &requests,
                &mc,
                &hc,
                policy,
                sample_prob,
                seed,
                waste_threshold as u64,
                default_output_len,
                &SchedulerConfig {
                    granularity,
                    chunk_budget,
                    cache_budget_bytes: cache_budget
                        .map(|gb| (gb * crate::cost_model::GIGA).round() as u64),
                },
            )?;
            let mut file = std::fs::File::create(out_dir.join("schedule.jsonl"))
                .map_err(user)?;
            scheduler::steps::write_schedule_jsonl(&mut file, &artifacts.steps)
                .map_err(user)?;
            write_text(
                &out_dir.join("schedule.meta.json"),
                &serde_json::to_string_pretty(&artifacts.meta)
                    .map_err(|e| CliError::Internal(e.to_string()))?,
            )?;
            write_text(&out_dir.join("tree.txt"), &artifacts.tree_dump)?;
            let mut extra = BTreeMap::new();
            extra.insert("policy".into(), format!("\"{policy}\""));
            extra.insert("sample_prob".into(), sample_prob.to_string());
            extra.insert("seed".into(), seed.to_string());
            extra.insert("waste_threshold".into(), waste_threshold.to_string());
            extra.insert("granularity".into(), granularity.to_string());
            extra.insert("chunk_budget".into(), chunk_budget.to_string());
            write_resolved_config(&out_dir, &mc, &hc, &extra)?;
            println!(
                "policy={} steps={} retractions={} optimal_sharing={:.4} split_waste_tokens={}",
                policy,
                artifacts.steps.len(),
                artifacts.meta.totals.retractions,
                artifacts.meta.optimal_sharing,
                artifacts.meta.split_waste_tokens
            );
            Ok(())
        }
        Command::Simulate {
            schedule,
            workload,
            out_dir,
            overlap,
            interference,
        } => {
            std::fs::create_dir_all(&out_dir).map_err(user)?;
            let overlap = parse_overlap(&overlap, interference.as_deref())?;
            let report = run_simulate(&schedule, &workload, &mc, &hc, &overlap)?;
            write_text(
                &out_dir.join("report.json"),
                &serde_json::to_string_pretty(&report)
                    .map_err(|e| CliError::Internal(e.to_string()))?,
            )?;
            let mut csv = Vec::new();
            engine_sim::write_timeline_csv(&mut csv, &report.timeline)
                .map_err(|e| CliError::Internal(e.to_string()))?;
            std::fs::write(out_dir.join("timeline.csv"), csv).map_err(user)?;
            write_resolved_config(&out_dir, &mc, &hc, &BTreeMap::new())?;
            println!(
                "policy={} makespan_s={:.4} throughput_tps={:.1} sharing={:.4}/{:.4} T_o={:.4} ratio={:.4}",
                report.policy,
                report.makespan_s,
                report.throughput_tps,
                report.achieved_sharing,
                report.optimal_sharing,
                report.optimal_time_s,
                report.optimal_time_ratio()
            );
            Ok(())
        }
        Command::Compare { reports, out } => {
            if reports.len() < 2 {
                return Err(CliError::User(
                    "compare needs at least two report files".into(),
                ));
            }
            let mut loaded = Vec::new();
            for path in &reports {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| user(format!("failed to read {}: {e}", path.display())))?;
                let report: SimReport = serde_json::from_str(&text)
                    .map_err(|e| user(format!("{}: {e}", path.display())))?;
                loaded.push(report);
            }
            let fp = &loaded[0].workload_fingerprint;
            if let Some(bad) = loaded.iter().find(|r| &r.workload_fingerprint != fp) {
                return Err(CliError::User(format!(
                    "reports come from different workloads ({} vs {})",
                    fp, bad.workload_fingerprint
                )));
            }
            let base_tput = loaded[0].throughput_tps;
            let mut csv = String::from(
                "policy,makespan_s,throughput_tps,achieved_sharing,optimal_sharing,to_ratio,speedup_vs_first\n",
            );
            println!(
                "{:<8} {:>12} {:>14} {:>9} {:>9} {:>9} {:>9}",
                "policy", "makespan_s", "throughput_tps", "sharing", "s_o", "to_ratio", "speedup"
            );
            for r in &loaded {
                let speedup = if base_tput == 0.0 {
                    1.0
                } else {
                    r.throughput_tps / base_tput
                };
                csv.push_str(&format!(
                    "{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}\n",
                    r.policy,
                    r.makespan_s,
                    r.throughput_tps,
                    r.achieved_sharing,
                    r.optimal_sharing,
                    r.optimal_time_ratio(),
                    speedup
                ));
                println!(
                    "{:<8} {:>12.4} {:>14.1} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
                    r.policy,
                    r.makespan_s,
                    r.throughput_tps,
                    r.achieved_sharing,
                    r.optimal_sharing,
                    r.optimal_time_ratio(),
                    speedup
                );
            }
            write_text(&out, &csv)?;
            Ok(())
        }
        Command::Sweep {
            traces,
            densities,
            sharings,
            total_requests,
            seed,
            policies,
            out,
            work_dir,
            jobs,
            sample_prob,
        } => run_sweep(
            &mc,
            &hc,
            &traces,
            &densities,
            &sharings,
            total_requests,
            seed,
            &policies,
            &out,
            work_dir.as_deref(),
            jobs,
            sample_prob,
        ),
    }
}

fn sibling(path: &Path, ext: &str) -> PathBuf {
    let mut name = path.file_stem().unwrap_or_default().to_os_string();
    name.push(".");
    name.push(ext);
    path.with_file_name(name)
}

fn load_mix_spec(mix: Option<&Path>, traces: Option<&Path>) -> Result<MixSpec, CliError> {
    match (mix, traces) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| user(format!("failed to read {}: {e}", path.display())))?;
            toml::from_str(&text).map_err(|e| user(format!("{}: {e}", path.display())))
        }
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| user(format!("failed to read {}: {e}", path.display())))?;
            let traces: crate::workload::AnalogTraces =
                toml::from_str(&text).map_err(|e| user(format!("{}: {e}", path.display())))?;
            Ok(traces.mix(1.0, 0.25, 10_000, 7))
        }
        (None, None) => Err(CliError::User(
            "synth needs either --mix or --traces".into(),
        )),
    }
}

pub(crate) struct ScheduleArtifacts {
    pub steps: Vec<scheduler::StepBatch>,
    pub meta: ScheduleMeta,
    pub tree_dump: String,
}

/// The full scheduling pipeline: build, sample, annotate, sort, split,
/// merge, order, form steps.
#[allow(clippy::too_many_arguments)]
pub(crate) fn build_schedule(
    requests: &[crate::prefix_tree::Request],
    mc: &ModelConfig,
    hc: &HardwareConfig,
    policy: Policy,
    sample_prob: f64,
    seed: u64,
    waste_threshold: u64,
    default_output_len: f64,
    sched_cfg: &SchedulerConfig,
) -> Result<ScheduleArtifacts, CliError> {
    let mut tree = PrefixTree::build(requests).map_err(user)?;
    tree.sample_output_lengths(sample_prob, seed, default_output_len)
        .map_err(user)?;
    tree.annotate_density(mc, hc).map_err(user)?;
    let sorted = tree
        .sort_layerwise()
        .map_err(|e| CliError::Internal(e.to_string()))?
        .split_outliers(waste_threshold)
        .map_err(|e| CliError::Internal(e.to_string()))?
        .merge_subtrees();
    let order = match policy {
        Policy::Blend => order_dual_scanner(&sorted, requests, hc),
        p => order_baseline(requests, p, seed, &sorted, hc).map_err(user)?,
    };
    let estimates = sorted.tree.estimates();
    let stream = scheduler::form_steps(&order, requests, estimates, mc, hc, sched_cfg)
        .map_err(|e| CliError::Internal(e.to_string()))?;
    let (steps, totals) = stream
        .collect_steps()
        .map_err(|e| CliError::Internal(e.to_string()))?;
    let agg = sorted.tree.true_aggregate(hc);
    let meta = ScheduleMeta {
        policy: policy.to_string(),
        seed,
        sample_prob,
        waste_threshold,
        granularity: sched_cfg.granularity,
        chunk_budget: sched_cfg.chunk_budget,
        cache_budget_bytes: sched_cfg.cache_budget_bytes,
        workload_fingerprint: fingerprint_requests(requests),
        total_requests: requests.len() as u64,
        rho_root_estimate: sorted.rho_root(),
        optimal_sharing: sorted.base_s_o,
        tree_sharing: sorted.s_o,
        split_waste_tokens: sorted.split_waste_tokens,
        t_comp_s: agg.t_comp,
        t_mem_s: agg.t_mem,
        optimal_time_s: optimal_time(&AggregateCost {
            sharing_ratio: sorted.base_s_o,
            ..agg
        }),
        totals,
    };
    Ok(ScheduleArtifacts {
        steps,
        meta,
        tree_dump: sorted.tree.dump().to_string(),
    })
}

fn parse_overlap(mode: &str, interference: Option<&str>) -> Result<OverlapModel, CliError> {
    match mode {
        "perfect" => Ok(OverlapModel::perfect()),
        "sequential" => Ok(OverlapModel::sequential()),
        "interference" => {
            let spec = interference.ok_or_else(|| {
                CliError::User("interference mode needs --interference knots".into())
            })?;
            let mut table = Vec::new();
            for knot in spec.split(',') {
                let (x, y) = knot
                    .split_once(':')
                    .ok_or_else(|| user(format!("bad interference knot `{knot}`")))?;
                table.push((
                    x.trim().parse::<f64>().map_err(user)?,
                    y.trim().parse::<f64>().map_err(user)?,
                ));
            }
            OverlapModel::interference(table).map_err(CliError::from)
        }
        other => Err(CliError::User(format!(
            "unknown overlap mode `{other}` (sequential|perfect|interference)"
        ))),
    }
}

fn run_simulate(
    schedule: &Path,
    workload: &Path,
    mc: &ModelConfig,
    hc: &HardwareConfig,
    overlap: &OverlapModel,
) -> Result<SimReport, CliError> {
    let steps = scheduler::steps::read_schedule_jsonl(schedule)
        .map_err(|e| user(format!("failed to read {}: {e}", schedule.display())))?;
    let meta_path = sibling(schedule, "meta.json");
    let meta_text = std::fs::read_to_string(&meta_path)
        .map_err(|e| user(format!("failed to read {}: {e}", meta_path.display())))?;
    let meta: ScheduleMeta =
        serde_json::from_str(&meta_text).map_err(|e| user(format!("{}: {e}", meta_path.display())))?;
    let requests = load_workload(workload).map_err(user)?;
    Ok(engine_sim::simulate(
        &steps, &requests, mc, hc, overlap, &meta,
    )?)
}

#[allow(clippy::too_many_arguments)]
fn run_sweep(
    mc: &ModelConfig,
    hc: &HardwareConfig,
    traces: &Path,
    densities: &str,
    sharings: &str,
    total_requests: u64,
    seed: u64,
    policies: &str,
    out: &Path,
    work_dir: Option<&Path>,
    jobs: usize,
    sample_prob: f64,
) -> Result<(), CliError> {
    let text = std::fs::read_to_string(traces)
        .map_err(|e| user(format!("failed to read {}: {e}", traces.display())))?;
    let traces: crate::workload::AnalogTraces =
        toml::from_str(&text).map_err(|e| user(format!("{}: {e}", traces.display())))?;
    let densities: Vec<f64> = parse_list(densities)?;
    let sharings: Vec<f64> = parse_list(sharings)?;
    let policies: Vec<Policy> = policies
        .split(',')
        .map(|p| p.trim().parse::<Policy>().map_err(user))
        .collect::<Result<_, _>>()?;
    if policies.is_empty() {
        return Err(CliError::User("no policies given".into()));
    }
    let _keep_tmp;
    let work: PathBuf = match work_dir {
        Some(d) => {
            std::fs::create_dir_all(d).map_err(user)?;
            d.to_path_buf()
        }
        None => {
            let tmp = tempfile::tempdir().map_err(user)?;
            let path = tmp.path().to_path_buf();
            _keep_tmp = tmp;
            path
        }
    };
    let mut points = Vec::new();
    for &d in &densities {
        for &s in &sharings {
            points.push((d, s));
        }
    }

    let run_point = |(density, sharing): (f64, f64)| -> Result<String, CliError> {
        let mix = traces.mix(density, sharing, total_requests, seed);
        let synth = synthesize(&mix, mc, hc).map_err(user)?;
        let point_dir = work.join(format!("d{density:.2}_s{sharing:.2}"));
        std::fs::create_dir_all(&point_dir).map_err(user)?;
        write_workload(&point_dir.join("workload.jsonl"), &synth.requests).map_err(user)?;
        let mut row = format!(
            "{density:.2},{sharing:.2},{:.6},{:.6}",
            synth.metadata.achieved_density, synth.metadata.achieved_sharing
        );
        let mut tputs = Vec::new();
        for &policy in &policies {
            let artifacts = build_schedule(
                &synth.requests,
                mc,
                hc,
                policy,
                sample_prob,
                seed,
                256,
                256.0,
                &SchedulerConfig::default(),
            )?;
            let report = engine_sim::simulate(
                &artifacts.steps,
                &synth.requests,
                mc,
                hc,
                &OverlapModel::perfect(),
                &artifacts.meta,
            )?;
            row.push_str(&format!(
                ",{:.9e},{:.9e},{:.6}",
                report.throughput_tps,
                report.makespan_s,
                report.optimal_time_ratio()
            ));
            tputs.push(report.throughput_tps);
        }
        for other in tputs.iter().skip(1) {
            row.push_str(&format!(",{:.6}", tputs[0] / other));
        }
        Ok(row)
    };

    let rows: Vec<Result<String, CliError>> = if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| CliError::Internal(e.to_string()))?;
        pool.install(|| {
            use rayon::prelude::*;
            points.par_iter().map(|&pt| run_point(pt)).collect()
        })
    } else {
        points.iter().map(|&pt| run_point(pt)).collect()
    };

    let mut header = String::from("target_density,target_sharing,achieved_density,achieved_sharing");
    for p in &policies {
        header.push_str(&format!(",{p}_tput,{p}_makespan_s,{p}_to_ratio"));
    }
    for p in policies.iter().skip(1) {
        header.push_str(&format!(",speedup_{}_vs_{}", policies[0], p));
    }
    header.push('\n');
    let mut csv = header;
    for row in rows {
        csv.push_str(&row?);
        csv.push('\n');
    }
    write_text(out, &csv)?;
    let mut stdout = std::io::stdout();
    let _ = writeln!(stdout, "wrote {} ({} points)", out.display(), points.len());
    Ok(())
}

fn parse_list(text: &str) -> Result<Vec<f64>, CliError> {
    text.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|e| user(format!("bad list entry `{t}`: {e}")))
        })
        .collect()
}
