use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use flowmark_cli::dataset::{generate_flow, DatasetConfig};
use flowmark_core::channel::{self, ChannelModel};
use flowmark_core::shaper::{self, BurstParams, SourceKind, SourceModel};
use flowmark_core::trace::{synthesize_headers, FlowTrace, PacketRecord};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

fn flowmark(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowmark")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = flowmark(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn error_json(out: &Output) -> Value {
    serde_json::from_slice(out.stderr.trim_ascii()).expect("stderr is one JSON object")
}

fn write_config(dir: &Path, v: Value) -> String {
    let p = dir.join("cfg.json");
    fs::write(&p, v.to_string()).unwrap();
    p.display().to_string()
}

fn small() -> Value {
    json!({
        "dataset": {"flows_per_class": 4, "capture_s": 40.0},
        "pretrain": {"steps": 4, "batch_size": 4},
        "finetune": {"epochs": 1, "batch_size": 4},
        "split": {"train_frac": 0.5}
    })
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_dataset_is_balanced_and_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), small());
    let a = tmp.path().join("a");
    ok(&["gen-dataset", "--config", &cfg, "--seed", "5", "--out", s(&a)]);
    let first = files(&a);
    fs::remove_dir_all(&a).unwrap();
    ok(&["gen-dataset", "--config", &cfg, "--seed", "5", "--out", s(&a)]);
    assert_eq!(files(&a), first);

    let manifest: Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    let flows = manifest["flows"].as_array().unwrap();
    assert_eq!(flows.len(), 16);
    for label in 0..4 {
        assert_eq!(flows.iter().filter(|f| f["label"] == label).count(), 4);
    }
    let prov: Value = serde_json::from_slice(&fs::read(a.join("gen-dataset.provenance.json")).unwrap()).unwrap();
    assert_eq!(prov["seed"], 5);
    assert_eq!(prov["config_sha256"].as_str().unwrap().len(), 64);

    let c = tmp.path().join("c");
    ok(&["gen-dataset", "--config", &cfg, "--seed", "6", "--out", s(&c)]);
    let traces = |d: &Path| fs::read(d.join(flows[0]["trace"].as_str().unwrap())).unwrap();
    assert_ne!(traces(&a), traces(&c));
}

/// Rebuilds a natural flow from the same draws without the shaper.
#[test]
fn natural_flows_skip_the_shaper() {
    let cfg = DatasetConfig {
        capture_s: 40.0,
        ..DatasetConfig::default()
    };
    for index in 0..6 {
        let got = generate_flow(&cfg, 9, 0, index).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        rng.set_stream(index as u64);
        let [lo, hi] = cfg.r_base_range;
        let r_base = lo * (hi / lo).powf(rng.random::<f64>());
        let offset_us = (rng.random::<f64>() * cfg.period_s * 1e6) as u64;
        let src_seed: u64 = rng.random();
        let path_seed: u64 = rng.random();
        let hdr_seed: u64 = rng.random();
        let kind = cfg.natural_sources[rng.random_range(0..cfg.natural_sources.len())];
        let cycle = cfg.burst_on_ms + cfg.burst_off_ms;
        let model = SourceModel {
            kind,
            max_packet_size: cfg.max_packet_size,
            burst_params: (kind == SourceKind::BurstyWeb).then(|| BurstParams {
                on_ms: cfg.burst_on_ms,
                off_ms: cfg.burst_off_ms,
                on_rate: r_base * cycle / cfg.burst_on_ms,
            }),
            ..SourceModel::constant(r_base, cfg.packet_size, src_seed)
        };
        let packets: Vec<PacketRecord> = shaper::generate_source(&model, cfg.capture_s)
            .unwrap()
            .into_iter()
            .map(|mut p| {
                p.ts_us += offset_us;
                p
            })
            .collect();
        let flow = FlowTrace::new(got.flow_id.clone(), 0).with_packets(packets);
        let path = ChannelModel {
            seed: path_seed,
            ..cfg.channel.clone()
        };
        let mut want = channel::transmit(&flow, &path).unwrap();
        want.packets.retain(|p| p.ts_us < offset_us + (cfg.capture_s * 1e6) as u64);
        synthesize_headers(&mut want, hdr_seed);
        assert_eq!(got, want);
    }
}

#[test]
fn two_stage_pipeline_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), small());
    let data = tmp.path().join("data");
    let pre = tmp.path().join("pre");
    let ft = tmp.path().join("ft");
    let ev = tmp.path().join("ev");
    ok(&["gen-dataset", "--config", &cfg, "--seed", "1", "--out", s(&data)]);
    ok(&["pretrain", "--config", &cfg, "--seed", "1", "--data", s(&data), "--out", s(&pre)]);
    let ckpt = pre.join("encoder.json");
    assert!(pre.join("encoder.bin").exists());
    ok(&[
        "finetune", "--config", &cfg, "--seed", "1", "--data", s(&data), "--classes", "2",
        "--checkpoint", s(&ckpt), "--out", s(&ft),
    ]);
    let clf = ft.join("classifier.json");
    ok(&["eval", "--config", &cfg, "--data", s(&data), "--classes", "2", "--checkpoint", s(&clf), "--out", s(&ev)]);
    let metrics: Value = serde_json::from_slice(&fs::read(ev.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["confusion"].as_array().unwrap().len(), 2);
    assert_eq!(metrics["total"], 8);
    let csv = fs::read_to_string(ev.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("class,precision,recall,f1,support\n"));
    assert!(ev.join("confusion.csv").exists() && ev.join("eval.provenance.json").exists());

    // a 2-way classifier cannot be scored as a 4-way one
    let out = flowmark(&["eval", "--config", &cfg, "--data", s(&data), "--classes", "4", "--checkpoint", s(&clf), "--out", s(&ev)]);
    assert_eq!(out.status.code(), Some(2));

    let scratch = tmp.path().join("scratch");
    ok(&["finetune", "--config", &cfg, "--seed", "1", "--data", s(&data), "--from-scratch", "--out", s(&scratch)]);
    let summary: Value = serde_json::from_slice(&fs::read(scratch.join("finetune.json")).unwrap()).unwrap();
    assert_eq!(summary["from_scratch"], true);
    assert_eq!(summary["classes"], 4);

    let out = flowmark(&["finetune", "--config", &cfg, "--data", s(&data), "--out", s(&scratch)]);
    assert_eq!(out.status.code(), Some(2));

    // checkpoint whose shape disagrees with the configured encoder
    let wide = write_config(tmp.path(), json!({"encoder": {"d_model": 8}}));
    let out = flowmark(&["finetune", "--config", &wide, "--data", s(&data), "--checkpoint", s(&ckpt), "--out", s(&scratch)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_json(&out)["error"]["message"].as_str().unwrap().contains("checkpoint"));
}

#[test]
fn validation_and_runtime_errors_are_reported_as_json() {
    let tmp = tempfile::tempdir().unwrap();
    let out = flowmark(&["gen-dataset", "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    let e = error_json(&out);
    assert_eq!(e["error"]["kind"], "validation");
    assert!(e["error"]["message"].as_str().unwrap().contains("seed"));

    let bad = write_config(tmp.path(), json!({"dataset": {"flows_per_klass": 3}}));
    let out = flowmark(&["gen-dataset", "--config", &bad, "--seed", "1", "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));

    let out = flowmark(&["sim-exit", "--preset", "nope", "--seed", "1", "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));

    let blocker = tmp.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let out = flowmark(&["prob-table", "--out", s(&blocker.join("sub"))]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_json(&out)["error"]["kind"], "runtime");
}

#[test]
fn sim_exit_sweep_is_sorted_and_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let args = ["sim-exit", "--preset", "paper-vi-a", "--seed", "0", "--trials", "20000", "--out", s(&a)];
    ok(&args);
    let first = files(&a);
    ok(&args);
    assert_eq!(files(&a), first);

    let csv = fs::read_to_string(a.join("sim_exit.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("n,adv_bw_mbps,p_hat,stderr,p_analytic,trials"));
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').map(|c| c.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 10);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r[0], i as f64);
        assert!((r[2] - r[4]).abs() <= 3.0 * r[3].max(1e-3));
    }
    assert_eq!(rows[0][2], 0.0);
    assert!((rows[1][4] - 0.0213).abs() < 5e-4);
}

#[test]
fn prob_table_single_cell() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        json!({"prob": {
            "params": {"p_exit": 1.0, "p1": 1.0, "p2": [0.5], "pi": [1.0]},
            "p_exit": [1.0], "r": [2.0], "windows": [1.0]
        }}),
    );
    let out = tmp.path().join("o");
    ok(&["prob-table", "--config", &cfg, "--out", s(&out)]);
    let csv = fs::read_to_string(out.join("prob_table.csv")).unwrap();
    assert_eq!(csv, "p_exit,r,T,q_1,q_mix,p_corr_window,p_corr_total\n1,2,1,0.5,0.5,0.75,0.75\n");
}

#[test]
fn prob_table_default_grid_is_monotone_in_r() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["prob-table", "--out", s(tmp.path())]);
    let csv = fs::read_to_string(tmp.path().join("prob_table.csv")).unwrap();
    let rows: Vec<Vec<f64>> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|c| c.parse().unwrap()).collect())
        .collect();
    for a in &rows {
        for b in &rows {
            if a[0] == b[0] && a[2] == b[2] && a[1] < b[1] {
                assert!(a[a.len() - 1] <= b[b.len() - 1]);
            }
        }
    }
    let note: Value = serde_json::from_slice(&fs::read(tmp.path().join("prob_table.json")).unwrap()).unwrap();
    assert!(note["assumptions"].as_str().unwrap().contains("independent"));
}

#[test]
fn featurize_and_shape_trace() {
    let tmp = tempfile::tempdir().unwrap();
    let traces = tmp.path().join("traces");
    fs::create_dir(&traces).unwrap();
    let constant = FlowTrace::new("steady", 0)
        .with_packets((0..100).map(|i| PacketRecord::new(i * 100_000, 1000)).collect());
    fs::write(traces.join("steady.jsonl"), constant.to_jsonl()).unwrap();
    fs::write(traces.join("empty.jsonl"), FlowTrace::new("empty", 0).to_jsonl()).unwrap();

    let feat = tmp.path().join("feat");
    ok(&["featurize", "--out", s(&feat), s(&traces)]);
    let tp = fs::read_to_string(feat.join("steady.throughput.csv")).unwrap();
    let rates: Vec<f64> = tp.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(rates.len(), 10);
    assert!(rates.iter().all(|&r| r == 10_000.0));
    assert_eq!(rates.iter().sum::<f64>(), constant.total_bytes() as f64);
    let iat = fs::read_to_string(feat.join("steady.iat.csv")).unwrap();
    for line in iat.lines().skip(1) {
        let v: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert!((v - 0.1).abs() < 1e-12);
    }
    assert_eq!(fs::read_to_string(feat.join("empty.throughput.csv")).unwrap(), "t_s,bytes_per_s\n");
    assert_eq!(fs::read_to_string(feat.join("empty.iat.csv")).unwrap(), "packet,mean_iat_s\n");

    let shaped = tmp.path().join("shaped");
    ok(&["shape-trace", "--out", s(&shaped), s(&traces.join("steady.jsonl"))]);
    let text = fs::read(shaped.join("steady.jsonl")).unwrap();
    let flow = FlowTrace::read_jsonl(&text[..]).unwrap();
    assert_eq!(flow.packets.len(), 100);
    assert!(flow.packets.iter().zip(&constant.packets).all(|(a, b)| a.ts_us >= b.ts_us));
}
