//! Synthetic offered traffic and the time-varying token-bucket shaper.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{FlowTrace, PacketRecord};
use crate::waveform::ModulationSpec;

pub const MIN_PACKET: u32 = 64;
pub const MAX_PACKET: u32 = 1500;

/// Encrypted payload bytes kept per generated packet.
pub const PAYLOAD_PREFIX: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SourceKind {
    ConstantRate,
    PoissonArrivals,
    BurstyWeb,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BurstParams {
    pub on_ms: f64,
    pub off_ms: f64,
    /// Offered rate during an on period, bytes/s.
    pub on_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceModel {
    pub kind: SourceKind,
    /// Offered rate in bytes/s. For `BurstyWeb` the on-period rate governs.
    pub mean_rate: f64,
    pub packet_size: u32,
    /// When set, sizes are uniform on `[packet_size, max_packet_size]`.
    #[serde(default)]
    pub max_packet_size: Option<u32>,
    #[serde(default)]
    pub burst_params: Option<BurstParams>,
    pub seed: u64,
}

impl SourceModel {
    pub fn constant(mean_rate: f64, packet_size: u32, seed: u64) -> Self {
        SourceModel {
            kind: SourceKind::ConstantRate,
            mean_rate,
            packet_size,
            max_packet_size: None,
            burst_params: None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mean_rate > 0.0 && self.mean_rate.is_finite()) {
            return Err(Error::invalid("mean_rate", "must be > 0"));
        }
        let hi = self.max_packet_size.unwrap_or(self.packet_size);
        if self.packet_size < MIN_PACKET || hi > MAX_PACKET || hi < self.packet_size {
            return Err(Error::invalid(
                "packet_size",
                format!("sizes must lie in [{MIN_PACKET}, {MAX_PACKET}]"),
            ));
        }
        if self.kind == SourceKind::BurstyWeb {
            let b = self
                .burst_params
                .ok_or_else(|| Error::invalid("burst_params", "required for BurstyWeb"))?;
            if !(b.on_ms > 0.0 && b.off_ms > 0.0 && b.on_rate > 0.0) {
                return Err(Error::invalid("burst_params", "all fields must be > 0"));
            }
        }
        Ok(())
    }

    fn mean_size(&self) -> f64 {
        let hi = self.max_packet_size.unwrap_or(self.packet_size);
        0.5 * (self.packet_size as f64 + hi as f64)
    }
}

fn draw_packet(model: &SourceModel, rng: &mut ChaCha8Rng, t_s: f64) -> PacketRecord {
    let size = match model.max_packet_size {
        Some(hi) if hi > model.packet_size => rng.random_range(model.packet_size..=hi),
        _ => model.packet_size,
    };
    let mut p = PacketRecord::new((t_s * 1e6).round() as u64, size);
    p.payload = (0..PAYLOAD_PREFIX).map(|_| rng.random()).collect();
    p
}

/// Offered client-to-exit traffic over `[0, duration)` seconds.
pub fn generate_source(model: &SourceModel, duration: f64) -> Result<Vec<PacketRecord>> {
    model.validate()?;
    if !(duration > 0.0 && duration.is_finite()) {
        return Err(Error::invalid("duration", "must be > 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(model.seed);
    let mut out = Vec::new();
    match model.kind {
        SourceKind::ConstantRate => {
            let mut sent = 0.0;
            loop {
                let t = sent / model.mean_rate;
                if t >= duration {
                    break;
                }
                let p = draw_packet(model, &mut rng, t);
                sent += p.size as f64;
                out.push(p);
            }
        }
        SourceKind::PoissonArrivals => {
            let gap = Exp::new(model.mean_rate / model.mean_size()).expect("positive rate");
            let mut t = 0.0;
            while t < duration {
                out.push(draw_packet(model, &mut rng, t));
                t += gap.sample(&mut rng);
            }
        }
        SourceKind::BurstyWeb => {
            let b = model.burst_params.expect("validated");
            let on = Exp::new(1e3 / b.on_ms).expect("positive");
            let off = Exp::new(1e3 / b.off_ms).expect("positive");
            let gap = Exp::new(b.on_rate / model.mean_size()).expect("positive");
            let mut t = 0.0;
            while t < duration {
                let end = (t + on.sample(&mut rng)).min(duration);
                while t < end {
                    out.push(draw_packet(model, &mut rng, t));
                    t += gap.sample(&mut rng);
                }
                t = t.max(end) + off.sample(&mut rng);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenBucketConfig {
    /// Bucket depth in bytes.
    pub capacity: f64,
    /// Refill step in seconds.
    pub update_interval: f64,
    pub initial_tokens: f64,
}

impl Default for TokenBucketConfig {
    fn default() -> Self {
        TokenBucketConfig {
            capacity: 3000.0,
            update_interval: 0.1,
            initial_tokens: 3000.0,
        }
    }
}

impl TokenBucketConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.capacity >= MAX_PACKET as f64 && self.capacity.is_finite()) {
            return Err(Error::invalid("capacity", "must be >= the maximum packet size"));
        }
        if !(self.update_interval > 0.0 && self.update_interval.is_finite()) {
            return Err(Error::invalid("update_interval", "must be > 0"));
        }
        if !(0.0..=self.capacity).contains(&self.initial_tokens) {
            return Err(Error::invalid("initial_tokens", "must lie in [0, capacity]"));
        }
        Ok(())
    }
}

/// Token bucket whose refill rate follows the bounded rate law.
///
/// Time is kept in microseconds. Within refill step `k` tokens accrue at
/// the mean of the bounded rate over that step, so the tokens granted over
/// any step-aligned window equal the exact integral of the rate law.
struct Bucket<'a> {
    spec: &'a ModulationSpec,
    capacity: f64,
    step_us: f64,
    tokens: f64,
    now_us: f64,
    step: u64,
    // bytes per microsecond in the current step
    rate: f64,
}

impl<'a> Bucket<'a> {
    fn new(spec: &'a ModulationSpec, cfg: &TokenBucketConfig) -> Self {
        let mut b = Bucket {
            spec,
            capacity: cfg.capacity,
            step_us: cfg.update_interval * 1e6,
            tokens: cfg.initial_tokens,
            now_us: 0.0,
            step: 0,
            rate: 0.0,
        };
        b.rate = b.step_rate(0);
        b
    }

    fn step_rate(&self, k: u64) -> f64 {
        let dt = self.step_us * 1e-6;
        let a = k as f64 * dt;
        self.spec.integral_bounded(a, a + dt) / dt * 1e-6
    }

    fn step_end(&self) -> f64 {
        (self.step + 1) as f64 * self.step_us
    }

    fn next_step(&mut self) {
        self.now_us = self.step_end();
        self.step += 1;
        self.rate = self.step_rate(self.step);
    }

    fn advance_to(&mut self, t_us: f64) {
        while t_us >= self.step_end() {
            let end = self.step_end();
            self.tokens = (self.tokens + self.rate * (end - self.now_us)).min(self.capacity);
            self.next_step();
        }
        if t_us > self.now_us {
            self.tokens = (self.tokens + self.rate * (t_us - self.now_us)).min(self.capacity);
            self.now_us = t_us;
        }
    }

    /// Departure time of a packet of `size` bytes ready at `ready_us`.
    fn release(&mut self, ready_us: f64, size: f64) -> f64 {
        self.advance_to(ready_us);
        let departure = loop {
            let need = size - self.tokens;
            if need <= 1e-9 {
                break self.now_us;
            }
            let room = self.step_end() - self.now_us;
            if self.rate * room >= need {
                self.now_us += need / self.rate;
                self.tokens = size;
                break self.now_us;
            }
            self.tokens += self.rate * room;
            self.next_step();
        };
        self.tokens -= size;
        departure
    }
}

/// Releases `input` through the rate-law token bucket. Packets leave in
/// FIFO order, unchanged, never before they arrive; the queue is unbounded.
pub fn shape(
    input: &FlowTrace,
    spec: &ModulationSpec,
    bucket: &TokenBucketConfig,
) -> Result<FlowTrace> {
    spec.validate()?;
    bucket.validate()?;
    if !input.is_sorted() {
        return Err(Error::invalid("input", "timestamps must be nondecreasing"));
    }
    if let Some(p) = input.packets.iter().find(|p| p.size as f64 > bucket.capacity) {
        return Err(Error::PacketExceedsCapacity {
            size: p.size,
            capacity: bucket.capacity,
        });
    }
    let mut tb = Bucket::new(spec, bucket);
    let mut last = 0.0f64;
    let mut out = Vec::with_capacity(input.packets.len());
    for p in &input.packets {
        let ready = (p.ts_us as f64).max(last);
        last = tb.release(ready, p.size as f64);
        let ts_us = ((last - 1e-6).ceil().max(0.0) as u64).max(p.ts_us);
        out.push(PacketRecord { ts_us, ..p.clone() });
    }
    // rounding up to whole microseconds cannot reorder, but keep it explicit
    for i in 1..out.len() {
        if out[i].ts_us < out[i - 1].ts_us {
            out[i].ts_us = out[i - 1].ts_us;
        }
    }
    Ok(FlowTrace {
        flow_id: input.flow_id.clone(),
        label: input.label,
        packets: out,
    })
}
