use super::FlowTrace;
use crate::error::{Error, Result};

/// Bytes per second in consecutive bins `[i*bin, (i+1)*bin)`, up to the bin
/// holding the last packet.
pub fn throughput_bins(flow: &FlowTrace, bin_s: f64) -> Result<Vec<f64>> {
    if !(bin_s > 0.0 && bin_s.is_finite()) {
        return Err(Error::invalid("bin", "must be > 0"));
    }
    let Some(last) = flow.packets.last() else {
        return Ok(Vec::new());
    };
    let bin_us = bin_s * 1e6;
    let index = |ts_us: u64| (ts_us as f64 / bin_us).floor() as usize;
    let mut bytes = vec![0u64; index(last.ts_us) + 1];
    for p in &flow.packets {
        bytes[index(p.ts_us)] += p.size as u64;
    }
    Ok(bytes.into_iter().map(|b| b as f64 / bin_s).collect())
}

/// Moving mean, in seconds, over `window` consecutive inter-arrival gaps.
/// Only full windows are reported, so fewer than `window` gaps yields an
/// empty series.
pub fn rolling_iat(flow: &FlowTrace, window: usize) -> Result<Vec<f64>> {
    if window == 0 {
        return Err(Error::invalid("window", "must be >= 1"));
    }
    let gaps: Vec<f64> = flow
        .packets
        .windows(2)
        .map(|w| (w[1].ts_us - w[0].ts_us) as f64 * 1e-6)
        .collect();
    if gaps.len() < window {
        return Ok(Vec::new());
    }
    let mut out = Vec::with_capacity(gaps.len() - window + 1);
    let mut sum: f64 = gaps[..window].iter().sum();
    out.push(sum / window as f64);
    for i in window..gaps.len() {
        sum += gaps[i] - gaps[i - window];
        out.push(sum / window as f64);
    }
    Ok(out)
}
