//! Synthetic labeled corpus: source, shaper, channel, capture.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use flowmark_core::channel::{self, ChannelModel};
use flowmark_core::shaper::{self, BurstParams, SourceKind, SourceModel, TokenBucketConfig};
use flowmark_core::trace::{serialize_flow, synthesize_headers, FlowTrace, SerializeParams};
use flowmark_core::waveform::{ModulationSpec, WaveKind};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub flows_per_class: usize,
    pub packet_size: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_packet_size: Option<u32>,
    /// Per-flow base rate is log-uniform on this range, bytes/s.
    pub r_base_range: [f64; 2],
    pub period_s: f64,
    pub amplitude_fraction: f64,
    pub floor_fraction: f64,
    /// Offered load of watermarked flows as a multiple of `r_base`.
    pub load_factor: f64,
    pub shaped_source: SourceKind,
    /// Unshaped flows cycle through these sources.
    pub natural_sources: Vec<SourceKind>,
    pub burst_on_ms: f64,
    pub burst_off_ms: f64,
    /// Observation window per flow, seconds.
    pub capture_s: f64,
    pub bucket: TokenBucketConfig,
    /// Path model; its seed is replaced per flow.
    pub channel: ChannelModel,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            flows_per_class: 500,
            packet_size: 1500,
            max_packet_size: None,
            r_base_range: [1200.0, 2400.0],
            period_s: 30.0,
            amplitude_fraction: 0.4,
            floor_fraction: 0.5,
            load_factor: 10.0,
            shaped_source: SourceKind::PoissonArrivals,
            natural_sources: vec![SourceKind::PoissonArrivals, SourceKind::BurstyWeb],
            burst_on_ms: 3000.0,
            burst_off_ms: 12000.0,
            capture_s: 90.0,
            bucket: TokenBucketConfig::default(),
            channel: ChannelModel::new(0.05, 0.3, 0.01, 0),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> CliResult<()> {
        let bad = |field: &str, why: &str| Err(CliError::validation(format!("dataset.{field}: {why}")));
        if self.flows_per_class == 0 {
            return bad("flows_per_class", "must be > 0");
        }
        let [lo, hi] = self.r_base_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return bad("r_base_range", "need 0 < lo <= hi");
        }
        if !(self.period_s > 0.0 && self.capture_s > 0.0 && self.load_factor >= 1.0) {
            return bad("period_s", "period, capture window and load factor must be positive");
        }
        if !(0.0..1.0).contains(&self.amplitude_fraction) || !(0.0..1.0).contains(&self.floor_fraction)
        {
            return bad("amplitude_fraction", "fractions must lie in [0, 1)");
        }
        if self.natural_sources.is_empty() {
            return bad("natural_sources", "need at least one source kind");
        }
        if !(self.burst_on_ms > 0.0 && self.burst_off_ms > 0.0) {
            return bad("burst_on_ms", "burst periods must be > 0");
        }
        self.bucket.validate()?;
        self.channel.validate()?;
        let mut probe = self.source(SourceKind::ConstantRate, lo, 0);
        probe.validate()?;
        probe.kind = self.shaped_source;
        probe.validate()?;
        Ok(())
    }

    pub fn modulation(&self, kind: WaveKind, r_base: f64) -> ModulationSpec {
        let a = self.amplitude_fraction * r_base;
        let mut m = ModulationSpec::with_defaults(kind, r_base);
        m.amplitude_a = a;
        m.r_high = r_base + a;
        m.r_low = r_base - a;
        m.f_mod = 1.0 / self.period_s;
        m.r_min = self.floor_fraction * r_base;
        if kind != WaveKind::Natural {
            m.r_max = r_base + a;
        }
        m
    }

    fn source(&self, kind: SourceKind, mean_rate: f64, seed: u64) -> SourceModel {
        let cycle = self.burst_on_ms + self.burst_off_ms;
        SourceModel {
            kind,
            mean_rate,
            packet_size: self.packet_size,
            max_packet_size: self.max_packet_size,
            burst_params: (kind == SourceKind::BurstyWeb).then(|| BurstParams {
                on_ms: self.burst_on_ms,
                off_ms: self.burst_off_ms,
                on_rate: mean_rate * cycle / self.burst_on_ms,
            }),
            seed,
        }
    }
}

pub fn flow_id(label: u8, index: usize) -> String {
    format!("c{label}-{index:05}")
}

/// Independent generator for flow `index` of class `label`.
fn flow_rng(seed: u64, label: u8, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((label as u64) << 40) | index as u64);
    rng
}

/// One flow as captured after the path. Watermarked flows start at a
/// random point of the modulation cycle; class 0 is never shaped.
pub fn generate_flow(cfg: &DatasetConfig, seed: u64, label: u8, index: usize) -> CliResult<FlowTrace> {
    let kind = WaveKind::from_label(label)
        .ok_or_else(|| CliError::validation(format!("label {label} is not a modulation class")))?;
    let mut rng = flow_rng(seed, label, index);
    let [lo, hi] = cfg.r_base_range;
    let r_base = lo * (hi / lo).powf(rng.random::<f64>());
    let offset_us = (rng.random::<f64>() * cfg.period_s * 1e6) as u64;
    let src_seed: u64 = rng.random();
    let path_seed: u64 = rng.random();
    let hdr_seed: u64 = rng.random();
    let nat_pick = rng.random_range(0..cfg.natural_sources.len());

    let source = if kind == WaveKind::Natural {
        cfg.source(cfg.natural_sources[nat_pick], r_base, src_seed)
    } else {
        cfg.source(cfg.shaped_source, cfg.load_factor * r_base, src_seed)
    };
    let mut packets = shaper::generate_source(&source, cfg.capture_s)?;
    for p in &mut packets {
        p.ts_us += offset_us;
    }
    let mut flow = FlowTrace::new(flow_id(label, index), label).with_packets(packets);
    if kind != WaveKind::Natural {
        flow = shaper::shape(&flow, &cfg.modulation(kind, r_base), &cfg.bucket)?;
    }
    let path = ChannelModel {
        seed: path_seed,
        ..cfg.channel.clone()
    };
    let mut flow = channel::transmit(&flow, &path)?;
    let end = offset_us + (cfg.capture_s * 1e6) as u64;
    flow.packets.retain(|p| p.ts_us < end);
    synthesize_headers(&mut flow, hdr_seed);
    Ok(flow)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub flow_id: String,
    pub label: u8,
    pub trace: String,
    pub bits: String,
    pub byte_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub serialize: SerializeParams,
    pub flows: Vec<ManifestEntry>,
}

/// Flows of every class in flow-id order.
pub fn generate_all(cfg: &DatasetConfig, seed: u64) -> CliResult<Vec<FlowTrace>> {
    cfg.validate()?;
    let jobs: Vec<(u8, usize)> = WaveKind::ALL
        .iter()
        .flat_map(|k| (0..cfg.flows_per_class).map(move |i| (k.label(), i)))
        .collect();
    // each flow owns its generator, so the result is independent of scheduling
    jobs.into_par_iter()
        .map(|(label, i)| generate_flow(cfg, seed, label, i))
        .collect()
}

/// Writes traces, packed bit files and the manifest under `out`.
pub fn write_dataset(
    flows: &[FlowTrace],
    params: &SerializeParams,
    out: &Path,
) -> CliResult<Manifest> {
    params.validate()?;
    let io = |e: std::io::Error| CliError::runtime(format!("{}: {e}", out.display()));
    fs::create_dir_all(out.join("traces")).map_err(io)?;
    fs::create_dir_all(out.join("bits")).map_err(io)?;
    let mut entries = Vec::with_capacity(flows.len());
    for f in flows {
        let trace = format!("traces/{}.jsonl", f.flow_id);
        let bits = format!("bits/{}.bin", f.flow_id);
        let file = fs::File::create(out.join(&trace)).map_err(io)?;
        f.write_jsonl(BufWriter::new(file))?;
        let packed = serialize_flow(f, params)?.pack();
        fs::write(out.join(&bits), &packed).map_err(io)?;
        entries.push(ManifestEntry {
            flow_id: f.flow_id.clone(),
            label: f.label,
            trace,
            bits,
            byte_len: packed.len(),
        });
    }
    let manifest = Manifest {
        serialize: *params,
        flows: entries,
    };
    crate::write_json(&out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}
