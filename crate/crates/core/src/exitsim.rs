//! Scaled-network exit-selection simulator.
//!
//! Only the exit hop is sampled: a circuit picks exit-capable relay `j`
//! with probability proportional to its bandwidth weight. Exit-Guard relays
//! count as exits with their full weight.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corrmodel;
use crate::error::{Error, Result};

/// Adversarial exit bandwidth range used by the scaled experiment, Mbps.
pub const ADVERSARY_BW_RANGE: (f64, f64) = (27.0, 148.0);

/// Bandwidth of the first injected adversarial exit, Mbps.
pub const ANCHOR_ADVERSARY_BW: f64 = 148.0;

/// Observed exit probability for one 148 Mbps adversarial exit.
pub const ANCHOR_P_EXIT: f64 = 0.0213;

/// Circuits built per ten-minute window in the scaled network.
pub const CIRCUITS_PER_WINDOW: u64 = 14_900;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RelayFlag {
    Guard,
    Exit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Relay {
    pub id: String,
    /// Consensus weight, Mbps.
    pub bandwidth: f64,
    pub flags: Vec<RelayFlag>,
    pub adversarial: bool,
}

impl Relay {
    pub fn is_exit(&self) -> bool {
        self.flags.contains(&RelayFlag::Exit)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaledNetwork {
    pub relays: Vec<Relay>,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub n_exit_guard: usize,
    pub n_exit: usize,
    pub n_other: usize,
    /// Log-uniform bandwidth range for benign relays, Mbps.
    pub bw_min: f64,
    pub bw_max: f64,
    /// When set, benign exit bandwidths are rescaled to sum to this total.
    #[serde(default)]
    pub benign_exit_total: Option<f64>,
    pub scale: f64,
    pub seed: u64,
}

impl NetworkSpec {
    /// 1% scaled network: 80 relays, 14 Exit-Guard and 9 Exit, with the
    /// benign exit total back-solved from the single-exit anchor
    /// `148 / (148 + total) = 0.0213`.
    pub fn paper_vi_a(seed: u64) -> Self {
        NetworkSpec {
            n_exit_guard: 14,
            n_exit: 9,
            n_other: 57,
            bw_min: 20.0,
            bw_max: 900.0,
            benign_exit_total: Some(calibrated_benign_total()),
            scale: 0.01,
            seed,
        }
    }
}

/// Benign exit bandwidth implied by the single-exit anchor.
pub fn calibrated_benign_total() -> f64 {
    ANCHOR_ADVERSARY_BW / ANCHOR_P_EXIT - ANCHOR_ADVERSARY_BW
}

pub fn build_scaled_network(spec: &NetworkSpec) -> Result<ScaledNetwork> {
    if spec.n_exit_guard + spec.n_exit == 0 {
        return Err(Error::invalid("n_exit", "network needs at least one exit"));
    }
    if !(spec.bw_min > 0.0 && spec.bw_max >= spec.bw_min) {
        return Err(Error::invalid("bw_min", "need 0 < bw_min <= bw_max"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (lo, hi) = (spec.bw_min.ln(), spec.bw_max.ln());
    let draw = |rng: &mut ChaCha8Rng| {
        if hi > lo {
            rng.random_range(lo..hi).exp()
        } else {
            spec.bw_min
        }
    };
    let mut relays = Vec::new();
    let groups = [
        ("exitguard", spec.n_exit_guard, vec![RelayFlag::Guard, RelayFlag::Exit]),
        ("exit", spec.n_exit, vec![RelayFlag::Exit]),
        ("relay", spec.n_other, vec![RelayFlag::Guard]),
    ];
    for (prefix, count, flags) in groups {
        for i in 0..count {
            relays.push(Relay {
                id: format!("{prefix}{i:02}"),
                bandwidth: draw(&mut rng),
                flags: flags.clone(),
                adversarial: false,
            });
        }
    }
    if let Some(total) = spec.benign_exit_total {
        if !(total > 0.0) {
            return Err(Error::invalid("benign_exit_total", "must be > 0"));
        }
        let sum: f64 = relays.iter().filter(|r| r.is_exit()).map(|r| r.bandwidth).sum();
        for r in relays.iter_mut().filter(|r| r.is_exit()) {
            r.bandwidth *= total / sum;
        }
    }
    Ok(ScaledNetwork {
        relays,
        scale: spec.scale,
    })
}

/// Replaces the `bandwidths.len()` lowest-bandwidth benign exits (ties
/// broken by position) with adversarial relays of the given bandwidths.
/// With `enforce_range` each bandwidth must lie in [`ADVERSARY_BW_RANGE`].
pub fn inject_adversary(
    net: &ScaledNetwork,
    bandwidths: &[f64],
    enforce_range: bool,
) -> Result<ScaledNetwork> {
    for &bw in bandwidths {
        if !(bw >= 0.0 && bw.is_finite()) {
            return Err(Error::invalid("bandwidths", "must be finite and >= 0"));
        }
        if enforce_range && !(ADVERSARY_BW_RANGE.0..=ADVERSARY_BW_RANGE.1).contains(&bw) {
            return Err(Error::invalid(
                "bandwidths",
                format!("{bw} Mbps outside {ADVERSARY_BW_RANGE:?}"),
            ));
        }
    }
    let mut benign: Vec<usize> = (0..net.relays.len())
        .filter(|&i| net.relays[i].is_exit() && !net.relays[i].adversarial)
        .collect();
    if bandwidths.len() > benign.len() {
        return Err(Error::invalid(
            "n",
            format!("{} exceeds {} benign exits", bandwidths.len(), benign.len()),
        ));
    }
    benign.sort_by(|&a, &b| {
        net.relays[a]
            .bandwidth
            .total_cmp(&net.relays[b].bandwidth)
            .then(a.cmp(&b))
    });
    let mut out = net.clone();
    for (k, (&idx, &bw)) in benign.iter().zip(bandwidths).enumerate() {
        let r = &mut out.relays[idx];
        r.id = format!("adv{k:02}");
        r.bandwidth = bw;
        r.adversarial = true;
    }
    Ok(out)
}

impl ScaledNetwork {
    pub fn exits(&self) -> impl Iterator<Item = &Relay> {
        self.relays.iter().filter(|r| r.is_exit())
    }

    /// Adversarial share of exit bandwidth.
    pub fn exit_probability(&self) -> Result<f64> {
        let exits: Vec<&Relay> = self.exits().collect();
        if exits.is_empty() {
            return Err(Error::invalid("relays", "no exit-capable relay"));
        }
        let weights: Vec<f64> = exits.iter().map(|r| r.bandwidth).collect();
        let bad: Vec<usize> = (0..exits.len()).filter(|&i| exits[i].adversarial).collect();
        corrmodel::exit_probability(&weights, &bad)
    }
}

/// Bandwidth-weighted sampler over exit-capable relays.
#[derive(Debug, Clone)]
pub struct ExitSampler {
    index: Vec<usize>,
    cumulative: Vec<f64>,
}

impl ExitSampler {
    pub fn new(net: &ScaledNetwork) -> Result<Self> {
        let mut index = Vec::new();
        let mut cumulative = Vec::new();
        let mut acc = 0.0;
        for (i, r) in net.relays.iter().enumerate() {
            if r.is_exit() && r.bandwidth > 0.0 {
                acc += r.bandwidth;
                index.push(i);
                cumulative.push(acc);
            }
        }
        if index.is_empty() {
            return Err(Error::ZeroWeight);
        }
        Ok(ExitSampler { index, cumulative })
    }

    /// Index into `net.relays` of the chosen exit.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let total = *self.cumulative.last().expect("nonempty");
        let u = rng.random::<f64>() * total;
        let k = self.cumulative.partition_point(|&c| c <= u);
        self.index[k.min(self.index.len() - 1)]
    }
}

pub fn sample_exit<'a, R: Rng + ?Sized>(net: &'a ScaledNetwork, rng: &mut R) -> Result<&'a str> {
    let s = ExitSampler::new(net)?;
    Ok(&net.relays[s.sample(rng)].id)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExitEstimate {
    pub p_hat: f64,
    pub stderr: f64,
    pub trials: u64,
}

/// Fraction of `trials` sampled circuits whose exit is adversarial.
pub fn estimate_p_exit<R: Rng + ?Sized>(
    net: &ScaledNetwork,
    trials: u64,
    rng: &mut R,
) -> Result<ExitEstimate> {
    if trials == 0 {
        return Err(Error::invalid("trials", "must be >= 1"));
    }
    let s = ExitSampler::new(net)?;
    let hits = (0..trials)
        .filter(|_| net.relays[s.sample(rng)].adversarial)
        .count() as f64;
    let p_hat = hits / trials as f64;
    Ok(ExitEstimate {
        p_hat,
        stderr: (p_hat * (1.0 - p_hat) / trials as f64).sqrt(),
        trials,
    })
}
