use super::*;
use crate::config::{default_hardware_config, default_model_config};
use crate::cost_model::density as req_density;
use crate::cost_model::{RequestCost, comp_time, mem_time_exact};

use std::io::Write as _;

fn tmp() -> tempfile::TempDir {
    tempfile::tempdir().unwrap()
}

fn spec_length_only(name: &str, sys: u64) -> TraceSpec {
    TraceSpec {
        name: name.into(),
        modality: "chat".into(),
        prompt_source: PromptSource::LengthOnly,
        system_prompt_len: sys,
        output_lens: OutputLenSpec::Records,
        known_output: false,
        normalization: None,
        seed: 5,
    }
}

#[test]
fn length_only_records_get_system_prompt() {
    let dir = tmp();
    let path = dir.path().join("t.jsonl");
    std::fs::write(&path, "{\"id\":0,\"prompt_len\":10,\"output_len\":2}\n").unwrap();
    let rs = load_trace(&path, &spec_length_only("t", 4)).unwrap();
    assert_eq!(rs.len(), 1);
    assert_eq!(rs[0].prompt.len(), 14);
    assert_eq!(rs[0].true_output_len, 2);
    // All tokens in the randomization range.
    assert!(
        rs[0]
            .prompt
            .iter()
            .all(|&t| (RANDOM_TOKEN_LO..RANDOM_TOKEN_HI).contains(&t))
    );

    // System prompt shared across the trace.
    let mut f = std::fs::OpenOptions::new().append(true).open(&path).unwrap();
    writeln!(f, "{{\"id\":1,\"prompt_len\":7,\"output_len\":3}}").unwrap();
    let rs = load_trace(&path, &spec_length_only("t", 4)).unwrap();
    assert_eq!(rs[0].prompt[..4], rs[1].prompt[..4]);
}

#[test]
fn video_frames_normalized_to_target_mean() {
    let dir = tmp();
    let path = dir.path().join("v.jsonl");
    let mut text = String::new();
    // Mean of raw lengths: (180 + 60) / 2 frames * 256 = 30720 tokens.
    text.push_str("{\"id\":0,\"prompt_len\":5,\"frames\":180}\n");
    text.push_str("{\"id\":1,\"prompt_len\":5,\"frames\":60}\n");
    std::fs::write(&path, text).unwrap();
    let mut spec = spec_length_only("v", 0);
    spec.known_output = true;
    spec.normalization = Some(16_384.0);
    let rs = load_trace(&path, &spec).unwrap();
    // 180 frames -> 46080 raw, scaled by 16384/30720.
    assert_eq!(rs[0].true_output_len, (46_080.0f64 * 16_384.0 / 30_720.0).round() as u64);
    let mean = (rs[0].true_output_len + rs[1].true_output_len) as f64 / 2.0;
    assert!((mean - 16_384.0).abs() / 16_384.0 < 1e-3);
    // Relative variance (CV) preserved up to rounding.
    let raw = [46_080.0f64, 15_360.0];
    let raw_mean = 30_720.0;
    let cv_raw = ((raw[0] - raw_mean).powi(2) + (raw[1] - raw_mean).powi(2)).sqrt() / raw_mean;
    let got = [rs[0].true_output_len as f64, rs[1].true_output_len as f64];
    let cv_got = ((got[0] - mean).powi(2) + (got[1] - mean).powi(2)).sqrt() / mean;
    assert!((cv_raw - cv_got).abs() < 1e-3);
}

#[test]
fn load_is_deterministic() {
    let dir = tmp();
    let path = dir.path().join("t.jsonl");
    let mut text = String::new();
    for i in 0..50 {
        text.push_str(&format!("{{\"id\":{i},\"prompt_len\":20,\"output_len\":4}}\n"));
    }
    std::fs::write(&path, text).unwrap();
    let a = load_trace(&path, &spec_length_only("t", 8)).unwrap();
    let b = load_trace(&path, &spec_length_only("t", 8)).unwrap();
    assert_eq!(a, b);
    let mut other = spec_length_only("t", 8);
    other.seed = 6;
    let c = load_trace(&path, &other).unwrap();
    assert_ne!(a, c);
}

#[test]
fn malformed_lines_carry_line_numbers() {
    let dir = tmp();
    let path = dir.path().join("bad.jsonl");
    std::fs::write(
        &path,
        "{\"id\":0,\"prompt_len\":4,\"output_len\":1}\nnot json\n",
    )
    .unwrap();
    match load_trace(&path, &spec_length_only("bad", 0)) {
        Err(WorkloadError::MalformedRecord { line, .. }) => assert_eq!(line, 2),
        other => panic!("expected malformed-record error, got {other:?}"),
    }
    std::fs::write(&path, "{\"id\":0,\"prompt_len\":4,\"output_len\":-3}\n").unwrap();
    match load_trace(&path, &spec_length_only("bad", 0)) {
        Err(WorkloadError::NegativeLength { line, field, .. }) => {
            assert_eq!((line, field), (1, "output_len"));
        }
        other => panic!("expected negative-length error, got {other:?}"),
    }
}

#[test]
fn workload_round_trip() {
    let dir = tmp();
    let path = dir.path().join("w.jsonl");
    let rs = vec![
        Request {
            id: 0,
            prompt: vec![1, 2, 3],
            true_output_len: 9,
            known_output: true,
            modality: "video".into(),
        },
        Request {
            id: 1,
            prompt: vec![4],
            true_output_len: 1,
            known_output: false,
            modality: "chat".into(),
        },
    ];
    write_workload(&path, &rs).unwrap();
    assert_eq!(load_workload(&path).unwrap(), rs);
}

#[test]
fn describe_reports_consistent_totals() {
    let mc = default_model_config();
    let hc = default_hardware_config();
    let rs = vec![
        Request {
            id: 0,
            prompt: vec![1, 2, 3, 4],
            true_output_len: 8,
            known_output: false,
            modality: "chat".into(),
        },
        Request {
            id: 1,
            prompt: vec![1, 2, 9, 9],
            true_output_len: 700,
            known_output: true,
            modality: "video".into(),
        },
    ];
    let summary = describe(&rs, &mc, &hc).unwrap();
    assert_eq!(summary.total_requests, 2);
    let modality_total: u64 = summary.per_modality.iter().map(|m| m.count).sum();
    assert_eq!(modality_total, summary.total_requests);
    let bucket_total: u64 = summary.prompt_len_histogram.buckets.iter().map(|b| b.1).sum();
    assert_eq!(bucket_total, 2);
    // Expected totals from the cost model oracle.
    let t_comp = comp_time(4, 8, &mc, &hc) + comp_time(4, 700, &mc, &hc);
    assert!((summary.t_comp_s - t_comp).abs() / t_comp < 1e-12);
    let t_mem = mem_time_exact(4, 8, &mc, &hc) + mem_time_exact(4, 700, &mc, &hc);
    assert!((summary.t_mem_s - t_mem).abs() / t_mem < 1e-12);
    // Single request per modality: per-modality density equals the
    // request density.
    let expect = req_density(&RequestCost {
        comp_time: comp_time(4, 8, &mc, &hc),
        mem_time: mem_time_exact(4, 8, &mc, &hc),
    });
    let chat = summary
        .per_modality
        .iter()
        .find(|m| m.modality == "chat")
        .unwrap();
    assert!((chat.density - expect).abs() / expect < 1e-12);
}

#[test]
fn single_request_histogram() {
    let mc = default_model_config();
    let hc = default_hardware_config();
    let rs = vec![Request {
        id: 0,
        prompt: vec![5; 33],
        true_output_len: 100,
        known_output: false,
        modality: "chat".into(),
    }];
    let summary = describe(&rs, &mc, &hc).unwrap();
    assert_eq!(summary.prompt_len_histogram.buckets, vec![(32, 1)]);
    assert_eq!(summary.output_len_histogram.buckets, vec![(64, 1)]);
}

#[test]
fn scale_preserves_modality_proportions() {
    let mut rs = Vec::new();
    for i in 0..400u64 {
        rs.push(Request {
            id: i,
            prompt: vec![i as u32 + 1, 2, 3],
            true_output_len: 5,
            known_output: false,
            modality: if i % 4 == 0 { "video".into() } else { "chat".into() },
        });
    }
    let scaled = scale_workload(&rs, 0.25, 3);
    assert_eq!(scaled.len(), 100);
    let videos = scaled.iter().filter(|r| r.modality == "video").count();
    assert_eq!(videos, 25);
    // Dense re-identification.
    let mut ids: Vec<u64> = scaled.iter().map(|r| r.id).collect();
    ids.sort_unstable();
    assert_eq!(ids, (0..100).collect::<Vec<u64>>());
}

mod synthesis {
    use super::*;
    use crate::workload::analog::write_analog_traces;
    use crate::workload::synth::MIX_TOLERANCE;

    fn analogs(n: u64) -> (tempfile::TempDir, crate::workload::analog::AnalogTraces) {
        let dir = tmp();
        let cfg = AnalogConfig {
            requests_per_trace: n,
            ..AnalogConfig::default()
        };
        let traces = write_analog_traces(dir.path(), &cfg).unwrap();
        (dir, traces)
    }

    #[test]
    fn degenerate_mix_is_all_compute_trace() {
        let mc = default_model_config();
        let hc = default_hardware_config();
        let (_dir, traces) = analogs(600);
        // Measure the compute trace's own density, then target it.
        let pool = load_trace(std::path::Path::new(&traces.compute.path), &traces.compute.spec)
            .unwrap();
        let own = describe(&pool[..600], &mc, &hc).unwrap();
        let mix = traces.mix(own.aggregate_density, 0.0, 600, 9);
        let out = synthesize(&mix, &mc, &hc).unwrap();
        assert_eq!(out.metadata.counts.compute, 600);
        assert_eq!(out.metadata.counts.memory, 0);
        assert_eq!(out.metadata.counts.sharing, 0);
        assert!((out.metadata.achieved_density - own.aggregate_density).abs() <= MIX_TOLERANCE);
    }

    #[test]
    fn grid_point_hits_targets_and_metadata_is_self_consistent() {
        let mc = default_model_config();
        let hc = default_hardware_config();
        let (_dir, traces) = analogs(2_000);
        let mix = traces.mix(1.0, 0.25, 2_000, 11);
        let out = synthesize(&mix, &mc, &hc).unwrap();
        assert!((out.metadata.achieved_density - 1.0).abs() <= MIX_TOLERANCE);
        assert!((out.metadata.achieved_sharing - 0.25).abs() <= MIX_TOLERANCE);
        // Independent recomputation matches emitted metadata.
        let summary = describe(&out.requests, &mc, &hc).unwrap();
        assert!((summary.aggregate_density - out.metadata.achieved_density).abs() < 1e-9);
        assert!((summary.optimal_sharing - out.metadata.achieved_sharing).abs() < 1e-9);
    }

    #[test]
    fn synthesis_is_deterministic() {
        let mc = default_model_config();
        let hc = default_hardware_config();
        let (_dir, traces) = analogs(800);
        let mix = traces.mix(1.1, 0.15, 800, 21);
        let a = synthesize(&mix, &mc, &hc).unwrap();
        let b = synthesize(&mix, &mc, &hc).unwrap();
        assert_eq!(a.requests, b.requests);
        assert_eq!(
            serde_json::to_string(&a.metadata).unwrap(),
            serde_json::to_string(&b.metadata).unwrap()
        );
    }

    #[test]
    fn infeasible_targets_name_the_binding_constraint() {
        let mc = default_model_config();
        let hc = default_hardware_config();
        let (_dir, traces) = analogs(400);
        match synthesize(&traces.mix(50.0, 0.1, 400, 1), &mc, &hc) {
            Err(WorkloadError::DensityInfeasible { binding, .. }) => {
                assert_eq!(binding, "compute");
            }
            other => panic!("expected density infeasibility, got {other:?}"),
        }
        match synthesize(&traces.mix(1.0, 0.95, 400, 1), &mc, &hc) {
            Err(WorkloadError::SharingInfeasible { max, .. }) => assert!(max < 0.95),
            other => panic!("expected sharing infeasibility, got {other:?}"),
        }
    }
}
