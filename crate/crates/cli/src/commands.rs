//! One function per subcommand. Each reads only its configuration and
//! inputs and writes its artifacts plus a provenance record under `out`.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use flowmark_core::corrmodel::{self, CorrelationParams, INDEPENDENCE_NOTE};
use flowmark_core::exitsim::{self, ScaledNetwork};
use flowmark_core::shaper;
use flowmark_core::trace::{rolling_iat, throughput_bins, FlowTrace, SerializeParams, SerializedFlow};
use flowmark_model::checkpoint;
use flowmark_model::encoder::{EncoderParams, Tokens};
use flowmark_model::metrics::MetricsReport;
use flowmark_model::train::{
    evaluate, loss_csv, run_finetune, run_pretrain, split_flows, EvalHook, Example, FinetuneResult,
    PretrainResult, Split,
};

use crate::config::ExperimentConfig;
use crate::dataset::{self, Manifest};
use crate::error::{CliError, CliResult};
use crate::write_json;

pub const TOOL: &str = "flowmark";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: Option<u64>,
    pub config_sha256: String,
    pub artifacts: Vec<Artifact>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the canonical (key-sorted, compact) JSON form.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let v = serde_json::to_value(cfg).expect("config serializes");
    sha256_hex(v.to_string().as_bytes())
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::runtime(format!("{}: {e}", path.display()))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(io_err(path))
}

fn create_out(out: &Path) -> CliResult<()> {
    fs::create_dir_all(out).map_err(io_err(out))
}

/// Writes `config.json` and `<command>.provenance.json` listing `files`
/// (relative to `out`) with their digests.
fn finish(cfg: &ExperimentConfig, command: &str, out: &Path, files: &[String]) -> CliResult<Provenance> {
    write_json(&out.join(format!("{command}.config.json")), cfg)?;
    let mut artifacts = Vec::with_capacity(files.len());
    for f in files {
        let p = out.join(f);
        let bytes = fs::read(&p).map_err(io_err(&p))?;
        artifacts.push(Artifact {
            path: f.clone(),
            sha256: sha256_hex(&bytes),
        });
    }
    let prov = Provenance {
        tool: TOOL.into(),
        version: VERSION.into(),
        command: command.into(),
        seed: cfg.seed,
        config_sha256: config_hash(cfg),
        artifacts,
    };
    write_json(&out.join(format!("{command}.provenance.json")), &prov)?;
    Ok(prov)
}

pub fn gen_dataset(cfg: &ExperimentConfig, out: &Path) -> CliResult<Manifest> {
    cfg.validate()?;
    let seed = cfg.require_seed()?;
    create_out(out)?;
    let flows = dataset::generate_all(&cfg.dataset, seed)?;
    let manifest = dataset::write_dataset(&flows, &cfg.serialize, out)?;
    let mut files = vec!["manifest.json".to_string()];
    for e in &manifest.flows {
        files.push(e.trace.clone());
        files.push(e.bits.clone());
    }
    finish(cfg, "gen-dataset", out, &files)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> CliResult<Manifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))
}

/// Every flow of a generated dataset as encoder input, in manifest order.
pub fn load_examples(dir: &Path, l_s: usize) -> CliResult<(SerializeParams, Vec<Example>)> {
    let manifest = read_manifest(dir)?;
    let sp = manifest.serialize;
    if sp.l_s != l_s {
        return Err(CliError::validation(format!(
            "dataset strides are {} bits, encoder expects {l_s}",
            sp.l_s
        )));
    }
    let mut out = Vec::with_capacity(manifest.flows.len());
    for e in &manifest.flows {
        let path = dir.join(&e.bits);
        let bytes = fs::read(&path).map_err(|err| CliError::validation(format!("{}: {err}", path.display())))?;
        let mut bits = SerializedFlow::unpack(&bytes, sp.m, sp.h, sp.p)?.bits;
        bits.resize(sp.n_tokens() * l_s, 0);
        out.push(Example {
            flow_id: e.flow_id.clone(),
            label: e.label,
            tokens: Tokens::new(bits, l_s)?,
        });
    }
    Ok((sp, out))
}

/// Loaded examples with the configured train/test split.
pub struct SplitData {
    pub examples: Vec<Example>,
    pub split: Split,
}

impl SplitData {
    pub fn load(cfg: &ExperimentConfig, dir: &Path) -> CliResult<Self> {
        let (_, examples) = load_examples(dir, cfg.encoder.l_s)?;
        Self::new(cfg, examples)
    }

    pub fn new(cfg: &ExperimentConfig, examples: Vec<Example>) -> CliResult<Self> {
        let labels: Vec<u8> = examples.iter().map(|e| e.label).collect();
        let split = split_flows(&labels, cfg.split.train_frac, cfg.split.seed)?;
        Ok(SplitData { examples, split })
    }

    pub fn train(&self) -> Vec<&Example> {
        self.split.train.iter().map(|&i| &self.examples[i]).collect()
    }

    pub fn test(&self) -> Vec<&Example> {
        self.split.test.iter().map(|&i| &self.examples[i]).collect()
    }
}

/// Stage I on the training flows; the held-out flows only score the
/// reconstruction loss.
pub fn pretrain_on(cfg: &ExperimentConfig, data: &SplitData) -> CliResult<PretrainResult> {
    let train: Vec<&Tokens> = data.train().into_iter().map(|e| &e.tokens).collect();
    let test: Vec<&Tokens> = data.test().into_iter().map(|e| &e.tokens).collect();
    let mut params = EncoderParams::init(&cfg.encoder)?;
    params.fit_bit_mean(train.iter().copied());
    Ok(run_pretrain(&cfg.pretrain, params, &train, &test)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub steps: usize,
    pub final_loss: Option<f64>,
    pub holdout_initial: Option<f64>,
    pub holdout_final: Option<f64>,
}

pub fn pretrain(cfg: &ExperimentConfig, data_dir: &Path, out: &Path) -> CliResult<PretrainSummary> {
    cfg.validate()?;
    let data = SplitData::load(cfg, data_dir)?;
    create_out(out)?;
    let r = pretrain_on(cfg, &data)?;
    checkpoint::save(&r.params, &out.join("encoder.json"))?;
    write_text(&out.join("pretrain_loss.csv"), &loss_csv(&r.losses))?;
    let summary = PretrainSummary {
        steps: r.losses.len(),
        final_loss: r.losses.last().map(|l| l.1),
        holdout_initial: r.holdout_initial,
        holdout_final: r.holdout_final,
    };
    write_json(&out.join("pretrain.json"), &summary)?;
    let files = ["encoder.json", "encoder.bin", "pretrain_loss.csv", "pretrain.json"].map(String::from);
    finish(cfg, "pretrain", out, &files)?;
    Ok(summary)
}

/// Starting point for fine-tuning: the checkpoint with a fresh
/// `cfg.classes`-way head, or a new model whose bit means are fitted to the
/// training flows.
pub fn finetune_init(
    cfg: &ExperimentConfig,
    data: &SplitData,
    pretrained: Option<&EncoderParams>,
) -> CliResult<EncoderParams> {
    match pretrained {
        Some(p) => Ok(p.with_new_head(cfg.classes, cfg.finetune.seed)?),
        None => {
            let enc = flowmark_model::encoder::EncoderConfig {
                n_classes: cfg.classes,
                ..cfg.encoder.clone()
            };
            let mut p = EncoderParams::init(&enc)?;
            p.fit_bit_mean(data.train().into_iter().map(|e| &e.tokens));
            Ok(p)
        }
    }
}

pub fn finetune_on(
    cfg: &ExperimentConfig,
    data: &SplitData,
    pretrained: Option<&EncoderParams>,
) -> CliResult<FinetuneResult> {
    let params = finetune_init(cfg, data, pretrained)?;
    let train = data.train();
    let test = data.test();
    let hook = EvalHook {
        flows: &test,
        every: cfg.curve.every,
        stop_at: cfg.curve.stop_at,
    };
    let hook = (cfg.curve.every > 0).then_some(&hook);
    Ok(run_finetune(&cfg.finetune, params, &train, hook)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneSummary {
    pub classes: usize,
    pub from_scratch: bool,
    pub steps: usize,
    pub final_loss: Option<f64>,
    pub reached_at: Option<usize>,
}

/// Stage II. `checkpoint` of `None` trains from scratch.
pub fn finetune(
    cfg: &ExperimentConfig,
    data_dir: &Path,
    checkpoint_path: Option<&Path>,
    out: &Path,
) -> CliResult<FinetuneSummary> {
    cfg.validate()?;
    let pretrained = checkpoint_path
        .map(|p| checkpoint::load(p, Some(&cfg.encoder)))
        .transpose()?;
    let data = SplitData::load(cfg, data_dir)?;
    create_out(out)?;
    let r = finetune_on(cfg, &data, pretrained.as_ref())?;
    checkpoint::save(&r.params, &out.join("classifier.json"))?;
    write_text(&out.join("finetune_loss.csv"), &loss_csv(&r.losses))?;
    let mut files: Vec<String> = ["classifier.json", "classifier.bin", "finetune_loss.csv"]
        .map(String::from)
        .into();
    if !r.curve.is_empty() {
        let mut s = String::from("step,accuracy\n");
        for (step, acc) in &r.curve {
            s += &format!("{step},{acc}\n");
        }
        write_text(&out.join("curve.csv"), &s)?;
        files.push("curve.csv".into());
    }
    let summary = FinetuneSummary {
        classes: cfg.classes,
        from_scratch: pretrained.is_none(),
        steps: r.losses.len(),
        final_loss: r.losses.last().map(|l| l.1),
        reached_at: r.reached_at,
    };
    write_json(&out.join("finetune.json"), &summary)?;
    files.push("finetune.json".into());
    finish(cfg, "finetune", out, &files)?;
    Ok(summary)
}

/// Scores a classifier checkpoint on the held-out flows.
pub fn eval(cfg: &ExperimentConfig, data_dir: &Path, checkpoint_path: &Path, out: &Path) -> CliResult<MetricsReport> {
    cfg.validate()?;
    let params = checkpoint::load(checkpoint_path, None)?;
    if params.cfg.n_classes != cfg.classes {
        return Err(CliError::validation(format!(
            "checkpoint has {} classes, --classes is {}",
            params.cfg.n_classes, cfg.classes
        )));
    }
    let data = SplitData::load(cfg, data_dir)?;
    let report = evaluate(&params, &data.test())?;
    create_out(out)?;
    write_json(&out.join("metrics.json"), &report)?;
    write_text(&out.join("metrics.csv"), &report.to_csv())?;
    write_text(&out.join("confusion.csv"), &report.confusion_csv())?;
    let files = ["metrics.json", "metrics.csv", "confusion.csv"].map(String::from);
    finish(cfg, "eval", out, &files)?;
    Ok(report)
}

/// Header of the probability sweep.
pub fn prob_header(k: usize) -> String {
    let mut h = String::from("p_exit,r,T");
    for i in 1..=k {
        h += &format!(",q_{i}");
    }
    h += ",q_mix,p_corr_window,p_corr_total";
    h
}

/// Rows over the `p_exit x r x T` grid, `p_exit` slowest.
pub fn prob_rows(cfg: &ExperimentConfig) -> CliResult<Vec<Vec<f64>>> {
    let grid = &cfg.prob;
    let mut rows = Vec::new();
    for &pe in &grid.p_exit {
        let cp = CorrelationParams {
            p_exit: pe,
            ..grid.params.clone()
        };
        cp.validate()?;
        let qs = (0..cp.k())
            .map(|i| corrmodel::per_flow_success(&cp, i + 1))
            .collect::<flowmark_core::Result<Vec<_>>>()?;
        let q_mix = corrmodel::q_mixture(&cp)?;
        for &r in &grid.r {
            let p = corrmodel::corr_mixed(&cp, r)?;
            for &t in &grid.windows {
                let mut row = vec![pe, r, t];
                row.extend_from_slice(&qs);
                row.extend([q_mix, p, corrmodel::corr_temporal_equal(p, t)?]);
                rows.push(row);
            }
        }
    }
    Ok(rows)
}

fn csv_rows(header: &str, rows: &[Vec<f64>]) -> String {
    let mut s = format!("{header}\n");
    for row in rows {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        s += &cells.join(",");
        s.push('\n');
    }
    s
}

pub fn prob_table(cfg: &ExperimentConfig, out: &Path) -> CliResult<String> {
    cfg.validate()?;
    let csv = csv_rows(&prob_header(cfg.prob.params.k()), &prob_rows(cfg)?);
    create_out(out)?;
    write_text(&out.join("prob_table.csv"), &csv)?;
    write_json(
        &out.join("prob_table.json"),
        &serde_json::json!({"params": cfg.prob, "assumptions": INDEPENDENCE_NOTE}),
    )?;
    finish(cfg, "prob-table", out, &["prob_table.csv".into(), "prob_table.json".into()])?;
    Ok(csv)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitRow {
    pub n: usize,
    /// Summed adversarial exit bandwidth, Mbps.
    pub adv_bw: f64,
    pub p_hat: f64,
    pub stderr: f64,
    pub p_analytic: f64,
    pub trials: u64,
}

/// Injects `n = 0..=max_n` adversarial exits into one seeded network and
/// estimates the exit-observation probability for each.
pub fn exit_sweep(cfg: &ExperimentConfig, seed: u64) -> CliResult<(ScaledNetwork, Vec<ExitRow>)> {
    let ec = &cfg.exit;
    let spec = exitsim::NetworkSpec {
        seed,
        ..ec.network.clone()
    };
    let net = exitsim::build_scaled_network(&spec)?;
    let mut rows = Vec::with_capacity(ec.max_n + 1);
    for n in 0..=ec.max_n {
        let bws = &ec.bandwidths[..n];
        let injected = exitsim::inject_adversary(&net, bws, ec.enforce_range)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(n as u64 + 1);
        let est = exitsim::estimate_p_exit(&injected, ec.trials, &mut rng)?;
        rows.push(ExitRow {
            n,
            adv_bw: bws.iter().sum(),
            p_hat: est.p_hat,
            stderr: est.stderr,
            p_analytic: injected.exit_probability()?,
            trials: est.trials,
        });
    }
    Ok((net, rows))
}

pub fn sim_exit(cfg: &ExperimentConfig, out: &Path) -> CliResult<Vec<ExitRow>> {
    cfg.validate()?;
    let seed = cfg.require_seed()?;
    let (net, rows) = exit_sweep(cfg, seed)?;
    create_out(out)?;
    let mut csv = String::from("n,adv_bw_mbps,p_hat,stderr,p_analytic,trials\n");
    for r in &rows {
        csv += &format!(
            "{},{},{},{},{},{}\n",
            r.n, r.adv_bw, r.p_hat, r.stderr, r.p_analytic, r.trials
        );
    }
    write_text(&out.join("sim_exit.csv"), &csv)?;
    write_json(
        &out.join("sim_exit.json"),
        &serde_json::json!({"spec": cfg.exit, "network": net, "rows": rows}),
    )?;
    finish(cfg, "sim-exit", out, &["sim_exit.csv".into(), "sim_exit.json".into()])?;
    Ok(rows)
}

/// Trace files named by `inputs`; directories contribute their `.jsonl`
/// files in name order.
pub fn trace_files(inputs: &[PathBuf]) -> CliResult<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| CliError::validation(format!("{}: {e}", p.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "jsonl"))
                .collect();
            found.sort();
            files.extend(found);
        } else if p.is_file() {
            files.push(p.clone());
        } else {
            return Err(CliError::validation(format!("{}: no such file or directory", p.display())));
        }
    }
    if files.is_empty() {
        return Err(CliError::validation("no trace files given"));
    }
    Ok(files)
}

pub fn read_trace(path: &Path) -> CliResult<FlowTrace> {
    let f = fs::File::open(path).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
    let flow = FlowTrace::read_jsonl(BufReader::new(f))?;
    flow.validate()?;
    Ok(flow)
}

/// Throughput series `(bin start in s, bytes/s)` and rolling IAT series
/// `(index of the window's last packet, mean gap in s)` as CSV.
pub fn featurize_flow(flow: &FlowTrace, bin_s: f64, window: usize) -> CliResult<(String, String)> {
    let mut tp = String::from("t_s,bytes_per_s\n");
    for (i, v) in throughput_bins(flow, bin_s)?.iter().enumerate() {
        tp += &format!("{},{v}\n", i as f64 * bin_s);
    }
    let mut iat = String::from("packet,mean_iat_s\n");
    for (i, v) in rolling_iat(flow, window)?.iter().enumerate() {
        iat += &format!("{},{v}\n", i + window);
    }
    Ok((tp, iat))
}

pub fn featurize(cfg: &ExperimentConfig, inputs: &[PathBuf], out: &Path) -> CliResult<Vec<String>> {
    cfg.validate()?;
    let files = trace_files(inputs)?;
    create_out(out)?;
    let mut written = Vec::new();
    for f in files {
        let flow = read_trace(&f)?;
        let (tp, iat) = featurize_flow(&flow, cfg.featurize.bin_s, cfg.featurize.iat_window)?;
        for (suffix, text) in [("throughput", tp), ("iat", iat)] {
            let name = format!("{}.{suffix}.csv", flow.flow_id);
            write_text(&out.join(&name), &text)?;
            written.push(name);
        }
    }
    finish(cfg, "featurize", out, &written)?;
    Ok(written)
}

/// Re-times each input trace under the configured modulation.
pub fn shape_trace(cfg: &ExperimentConfig, inputs: &[PathBuf], out: &Path) -> CliResult<Vec<String>> {
    cfg.validate()?;
    let files = trace_files(inputs)?;
    create_out(out)?;
    let mut written = Vec::new();
    for f in files {
        let flow = read_trace(&f)?;
        let shaped = shaper::shape(&flow, &cfg.shape.modulation, &cfg.shape.bucket)?;
        let name = format!("{}.jsonl", shaped.flow_id);
        let path = out.join(&name);
        fs::write(&path, shaped.to_jsonl()).map_err(io_err(&path))?;
        written.push(name);
    }
    finish(cfg, "shape-trace", out, &written)?;
    Ok(written)
}
