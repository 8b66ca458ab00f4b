//! Closed-form traffic-correlation success probabilities.
//!
//! A flow with modulation class `i` is correlated when it exits through an
//! adversarial relay, the perturbation is detected and the class is
//! identified. All three events, all flows and all observation windows are
//! treated as independent.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Assumption note carried alongside every table this module produces.
pub const INDEPENDENCE_NOTE: &str =
    "exit observation, detection, classification, flows and windows assumed independent";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrelationParams {
    pub p_exit: f64,
    /// Detection probability.
    pub p1: f64,
    /// Per-class identification probability, classes `1..=K`.
    pub p2: Vec<f64>,
    /// Class mixture, a probability vector of length `K`.
    pub pi: Vec<f64>,
}

fn check_prob(field: &'static str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::invalid(field, format!("{v} is not in [0, 1]")));
    }
    Ok(())
}

/// `(1 - q)^r` as `exp(r * ln(1 - q))`, exact at the endpoints.
fn survive(q: f64, r: f64) -> f64 {
    if r == 0.0 {
        1.0
    } else if q >= 1.0 {
        0.0
    } else {
        (r * (-q).ln_1p()).exp()
    }
}

impl CorrelationParams {
    pub fn k(&self) -> usize {
        self.p2.len()
    }

    pub fn validate(&self) -> Result<()> {
        check_prob("p_exit", self.p_exit)?;
        check_prob("p1", self.p1)?;
        if self.p2.is_empty() {
            return Err(Error::invalid("p2", "need at least one class"));
        }
        if self.pi.len() != self.p2.len() {
            return Err(Error::invalid("pi", "length must match p2"));
        }
        for &v in &self.p2 {
            check_prob("p2", v)?;
        }
        for &v in &self.pi {
            check_prob("pi", v)?;
        }
        let total: f64 = self.pi.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid("pi", format!("sums to {total}, not 1")));
        }
        Ok(())
    }
}

/// Fraction of exit bandwidth held by the relays in `bad`.
pub fn exit_probability(weights: &[f64], bad: &[usize]) -> Result<f64> {
    if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
        return Err(Error::invalid("weights", "must be finite and >= 0"));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::ZeroWeight);
    }
    let mut seen = vec![false; weights.len()];
    let mut held = 0.0;
    for &j in bad {
        if j >= weights.len() {
            return Err(Error::invalid("bad_indices", format!("{j} out of range")));
        }
        if !std::mem::replace(&mut seen[j], true) {
            held += weights[j];
        }
    }
    Ok(held / total)
}

/// Per-flow success probability for class `i` (1-based).
pub fn per_flow_success(cp: &CorrelationParams, i: usize) -> Result<f64> {
    cp.validate()?;
    if i == 0 || i > cp.k() {
        return Err(Error::invalid("class", format!("{i} not in 1..={}", cp.k())));
    }
    Ok(cp.p_exit * cp.p1 * cp.p2[i - 1])
}

/// Probability that at least one of `r` flows with success `q` correlates.
pub fn corr_single(q: f64, r: f64) -> Result<f64> {
    check_prob("q", q)?;
    if !(r >= 0.0) {
        return Err(Error::invalid("r", "must be >= 0"));
    }
    Ok(1.0 - survive(q, r))
}

/// Mixed strategy with `r_counts[i-1]` flows of class `i`.
pub fn corr_mixed_counts(cp: &CorrelationParams, r_counts: &[f64]) -> Result<f64> {
    cp.validate()?;
    if r_counts.len() != cp.k() {
        return Err(Error::invalid(
            "r_vec",
            format!("length {} does not match K = {}", r_counts.len(), cp.k()),
        ));
    }
    if r_counts.iter().any(|r| !(*r >= 0.0)) {
        return Err(Error::invalid("r_vec", "counts must be >= 0"));
    }
    let miss: f64 = r_counts
        .iter()
        .zip(&cp.p2)
        .map(|(&r, &p2)| survive(cp.p_exit * cp.p1 * p2, r))
        .product();
    Ok(1.0 - miss)
}

/// Expected per-flow success when classes are drawn from `pi`.
pub fn q_mixture(cp: &CorrelationParams) -> Result<f64> {
    cp.validate()?;
    let avg: f64 = cp.pi.iter().zip(&cp.p2).map(|(a, b)| a * b).sum();
    Ok(cp.p_exit * cp.p1 * avg)
}

pub fn corr_mixed(cp: &CorrelationParams, r: f64) -> Result<f64> {
    corr_single(q_mixture(cp)?, r)
}

/// Cumulative success over windows with per-window probabilities `p_list`.
pub fn corr_temporal(p_list: &[f64]) -> Result<f64> {
    let mut miss = 1.0;
    for &p in p_list {
        check_prob("P_t", p)?;
        miss *= 1.0 - p;
    }
    Ok(1.0 - miss)
}

pub fn corr_temporal_equal(p: f64, windows: f64) -> Result<f64> {
    check_prob("P", p)?;
    if !(windows >= 0.0) {
        return Err(Error::invalid("T", "must be >= 0"));
    }
    Ok(1.0 - survive(p, windows))
}
