//! Multi-hop path distortion: per-packet delay and jitter, relay smoothing,
//! independent loss and optional padding-style defenses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::shaper::{self, TokenBucketConfig, PAYLOAD_PREFIX};
use crate::trace::{FlowTrace, PacketRecord};
use crate::waveform::ModulationSpec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Smoothing {
    pub bucket: TokenBucketConfig,
    /// Constant relay forwarding rate, bytes/s.
    pub rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Defense {
    None,
    /// Dummy packets every `pad_interval` seconds inside any gap longer
    /// than `threshold` seconds.
    PadIdleGaps {
        threshold: f64,
        pad_interval: f64,
        pad_size: u32,
    },
    /// Packets are held and released together on a fixed cadence.
    BurstReshape { burst_interval: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelModel {
    /// Median one-way delay in seconds.
    pub base_delay: f64,
    /// Log-scale standard deviation of the lognormal per-packet delay.
    pub jitter_sigma: f64,
    pub loss_prob: f64,
    #[serde(default)]
    pub smoothing: Option<Smoothing>,
    pub defense: Defense,
    pub seed: u64,
}

impl ChannelModel {
    pub fn new(base_delay: f64, jitter_sigma: f64, loss_prob: f64, seed: u64) -> Self {
        ChannelModel {
            base_delay,
            jitter_sigma,
            loss_prob,
            smoothing: None,
            defense: Defense::None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_delay >= 0.0 && self.base_delay.is_finite()) {
            return Err(Error::invalid("base_delay", "must be >= 0"));
        }
        if !(self.jitter_sigma >= 0.0 && self.jitter_sigma.is_finite()) {
            return Err(Error::invalid("jitter_sigma", "must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.loss_prob) {
            return Err(Error::invalid("loss_prob", "must lie in [0, 1)"));
        }
        if let Some(s) = &self.smoothing {
            s.bucket.validate()?;
            if !(s.rate > 0.0) {
                return Err(Error::invalid("smoothing.rate", "must be > 0"));
            }
        }
        match self.defense {
            Defense::None => {}
            Defense::PadIdleGaps {
                threshold,
                pad_interval,
                pad_size,
            } => {
                if !(threshold >= 0.0 && pad_interval > 0.0) {
                    return Err(Error::invalid(
                        "defense",
                        "PadIdleGaps needs threshold >= 0 and pad_interval > 0",
                    ));
                }
                if !(shaper::MIN_PACKET..=shaper::MAX_PACKET).contains(&pad_size) {
                    return Err(Error::invalid("defense", "pad_size out of range"));
                }
            }
            Defense::BurstReshape { burst_interval } => {
                if !(burst_interval > 0.0) {
                    return Err(Error::invalid("defense", "burst_interval must be > 0"));
                }
            }
        }
        Ok(())
    }
}

/// Carries `input` across the modeled path. Surviving packets keep their
/// order: each departs at `max(previous departure, arrival + delay)` where
/// the delay is lognormal with median `base_delay`.
pub fn transmit(input: &FlowTrace, ch: &ChannelModel) -> Result<FlowTrace> {
    ch.validate()?;
    if !input.is_sorted() {
        return Err(Error::invalid("input", "timestamps must be nondecreasing"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(ch.seed);
    let base_us = ch.base_delay * 1e6;
    let mut out: Vec<PacketRecord> = Vec::with_capacity(input.packets.len());
    let mut last = 0u64;
    for p in &input.packets {
        // draw both variates for every packet so the stream is stable
        let u: f64 = rng.random();
        let z: f64 = StandardNormal.sample(&mut rng);
        if u < ch.loss_prob {
            continue;
        }
        let delay = if ch.jitter_sigma == 0.0 {
            base_us
        } else {
            base_us * (ch.jitter_sigma * z).exp()
        };
        let ts = (p.ts_us + delay.round() as u64).max(last);
        last = ts;
        out.push(PacketRecord { ts_us: ts, ..p.clone() });
    }
    let mut flow = FlowTrace {
        flow_id: input.flow_id.clone(),
        label: input.label,
        packets: out,
    };

    if let Some(s) = &ch.smoothing {
        flow = shaper::shape(&flow, &ModulationSpec::constant(s.rate), &s.bucket)?;
    }

    match ch.defense {
        Defense::None => {}
        Defense::PadIdleGaps {
            threshold,
            pad_interval,
            pad_size,
        } => {
            flow.packets = pad_idle_gaps(
                &flow.packets,
                (threshold * 1e6).round() as u64,
                (pad_interval * 1e6).round() as u64,
                pad_size,
                &mut rng,
            );
        }
        Defense::BurstReshape { burst_interval } => {
            let q = ((burst_interval * 1e6).round() as u64).max(1);
            for p in &mut flow.packets {
                p.ts_us = p.ts_us.div_ceil(q) * q;
            }
        }
    }
    Ok(flow)
}

fn pad_idle_gaps(
    packets: &[PacketRecord],
    threshold_us: u64,
    interval_us: u64,
    pad_size: u32,
    rng: &mut ChaCha8Rng,
) -> Vec<PacketRecord> {
    let mut out = Vec::with_capacity(packets.len());
    for (i, p) in packets.iter().enumerate() {
        if i > 0 {
            let prev = packets[i - 1].ts_us;
            let gap = p.ts_us - prev;
            if gap > threshold_us {
                for k in 1..=gap / interval_us {
                    let mut d = PacketRecord::new(prev + k * interval_us, pad_size);
                    d.is_dummy = true;
                    d.payload = (0..PAYLOAD_PREFIX).map(|_| rng.random()).collect();
                    out.push(d);
                }
            }
        }
        out.push(p.clone());
    }
    out
}
