//! Modulation dictionary and the bounded shaping-rate law.
//!
//! Rates are in bytes per second and times in seconds. A [`ModulationSpec`]
//! selects one of the four dictionary entries and carries every parameter
//! the rate law needs. The target rate of an active entry is clipped into
//! `[r_min, r_max]` before it drives the token bucket.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default modulation period in seconds.
pub const DEFAULT_PERIOD_S: f64 = 30.0;

/// Default amplitude as a fraction of the base rate.
pub const DEFAULT_AMPLITUDE_FRACTION: f64 = 0.4;

/// Default floor as a fraction of the base rate.
pub const DEFAULT_FLOOR_FRACTION: f64 = 0.5;

/// Rate used for the unshaped baseline, effectively unlimited.
pub const UNLIMITED_RATE: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WaveKind {
    Natural,
    Sine,
    Square,
    Triangle,
}

impl WaveKind {
    pub const ALL: [WaveKind; 4] = [
        WaveKind::Natural,
        WaveKind::Sine,
        WaveKind::Square,
        WaveKind::Triangle,
    ];

    /// Class id of this dictionary entry (0 is natural traffic).
    pub fn label(self) -> u8 {
        match self {
            WaveKind::Natural => 0,
            WaveKind::Sine => 1,
            WaveKind::Square => 2,
            WaveKind::Triangle => 3,
        }
    }

    pub fn from_label(label: u8) -> Option<Self> {
        Self::ALL.get(label as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            WaveKind::Natural => "natural",
            WaveKind::Sine => "sine",
            WaveKind::Square => "square",
            WaveKind::Triangle => "triangle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModulationSpec {
    pub kind: WaveKind,
    pub r_base: f64,
    #[serde(rename = "amplitude_A")]
    pub amplitude_a: f64,
    pub f_mod: f64,
    pub phase_phi: f64,
    pub r_high: f64,
    pub r_low: f64,
    pub r_min: f64,
    pub r_max: f64,
}

impl ModulationSpec {
    /// Dictionary entry `kind` around `r_base` with the default period,
    /// amplitude, phase and bounds.
    pub fn with_defaults(kind: WaveKind, r_base: f64) -> Self {
        let amplitude_a = DEFAULT_AMPLITUDE_FRACTION * r_base;
        let r_high = r_base + amplitude_a;
        let r_low = r_base - amplitude_a;
        let r_max = match kind {
            WaveKind::Natural => UNLIMITED_RATE,
            WaveKind::Square => r_high,
            WaveKind::Sine | WaveKind::Triangle => r_base + amplitude_a,
        };
        ModulationSpec {
            kind,
            r_base,
            amplitude_a,
            f_mod: 1.0 / DEFAULT_PERIOD_S,
            phase_phi: 0.0,
            r_high,
            r_low,
            r_min: DEFAULT_FLOOR_FRACTION * r_base,
            r_max,
        }
    }

    /// Unshaped baseline capped at `r_max`.
    pub fn natural(r_max: f64) -> Self {
        ModulationSpec {
            r_max,
            r_min: r_max.min(1.0),
            ..Self::with_defaults(WaveKind::Natural, r_max)
        }
    }

    /// A flat rate `rate`; used for relay smoothing.
    pub fn constant(rate: f64) -> Self {
        Self::natural(rate)
    }

    pub fn period(&self) -> f64 {
        1.0 / self.f_mod
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            ("r_base", self.r_base),
            ("amplitude_A", self.amplitude_a),
            ("f_mod", self.f_mod),
            ("phase_phi", self.phase_phi),
            ("r_high", self.r_high),
            ("r_low", self.r_low),
            ("r_min", self.r_min),
            ("r_max", self.r_max),
        ];
        for (field, v) in finite {
            if !v.is_finite() {
                return Err(Error::invalid(field, format!("must be finite, got {v}")));
            }
        }
        if self.kind == WaveKind::Natural {
            if self.r_max <= 0.0 {
                return Err(Error::invalid("r_max", "must be positive"));
            }
            return Ok(());
        }
        if self.amplitude_a < 0.0 {
            return Err(Error::invalid("amplitude_A", "must be >= 0"));
        }
        if self.f_mod <= 0.0 {
            return Err(Error::invalid("f_mod", "must be > 0"));
        }
        if self.r_low > self.r_high {
            return Err(Error::invalid("r_low", "must be <= r_high"));
        }
        if self.r_min <= 0.0 {
            return Err(Error::invalid("r_min", "must be > 0"));
        }
        if self.r_min > self.r_max {
            return Err(Error::invalid("r_min", "must be <= r_max"));
        }
        Ok(())
    }

    fn angle(&self, t: f64) -> f64 {
        2.0 * PI * self.f_mod * t + self.phase_phi
    }

    /// Unclipped target rate. Assumes a validated spec.
    pub fn target(&self, t: f64) -> f64 {
        match self.kind {
            WaveKind::Natural => self.r_max,
            WaveKind::Sine => self.r_base + self.amplitude_a * self.angle(t).sin(),
            WaveKind::Square => {
                if (2.0 * PI * self.f_mod * t).sin() >= 0.0 {
                    self.r_high
                } else {
                    self.r_low
                }
            }
            WaveKind::Triangle => {
                self.r_base + 2.0 * self.amplitude_a / PI * self.angle(t).sin().asin()
            }
        }
    }

    /// Target rate clipped into `[r_min, r_max]`. Assumes a validated spec.
    pub fn bounded(&self, t: f64) -> f64 {
        if self.kind == WaveKind::Natural {
            return self.r_max;
        }
        self.target(t).max(self.r_min).min(self.r_max)
    }

    /// Exact integral of [`bounded`](Self::bounded) over `[a, b]`.
    ///
    /// The interval is cut at every clip crossing, triangle corner and
    /// square transition; each piece is then either a clipped constant or an
    /// analytically integrable segment of the raw waveform.
    pub fn integral_bounded(&self, a: f64, b: f64) -> f64 {
        if b <= a {
            return 0.0;
        }
        if self.kind == WaveKind::Natural {
            return self.r_max * (b - a);
        }
        let mut cuts = vec![a, b];
        self.push_breakpoints(a, b, &mut cuts);
        cuts.sort_by(|x, y| x.total_cmp(y));
        cuts.dedup();

        cuts.windows(2)
            .map(|w| self.piece_integral(w[0], w[1]))
            .sum()
    }

    fn piece_integral(&self, u: f64, v: f64) -> f64 {
        let len = v - u;
        if len <= 0.0 {
            return 0.0;
        }
        let mid = self.target(0.5 * (u + v));
        if mid < self.r_min {
            return self.r_min * len;
        }
        if mid > self.r_max {
            return self.r_max * len;
        }
        match self.kind {
            WaveKind::Sine => {
                let omega = 2.0 * PI * self.f_mod;
                self.r_base * len
                    - self.amplitude_a / omega * (self.angle(v).cos() - self.angle(u).cos())
            }
            // linear between corners
            WaveKind::Triangle => 0.5 * (self.target(u) + self.target(v)) * len,
            WaveKind::Square => mid * len,
            WaveKind::Natural => self.r_max * len,
        }
    }

    fn push_breakpoints(&self, a: f64, b: f64, out: &mut Vec<f64>) {
        let omega = 2.0 * PI * self.f_mod;
        let mut push_family = |theta0: f64, step: f64, offset: f64| {
            // times t with omega*t + offset = theta0 + k*step
            let k_lo = ((omega * a + offset - theta0) / step).floor() as i64 - 1;
            let k_hi = ((omega * b + offset - theta0) / step).ceil() as i64 + 1;
            for k in k_lo..=k_hi {
                let t = (theta0 + k as f64 * step - offset) / omega;
                if t > a && t < b {
                    out.push(t);
                }
            }
        };
        match self.kind {
            WaveKind::Natural => {}
            WaveKind::Square => push_family(0.0, PI, 0.0),
            WaveKind::Sine | WaveKind::Triangle => {
                if self.kind == WaveKind::Triangle {
                    push_family(PI / 2.0, PI, self.phase_phi);
                }
                if self.amplitude_a > 0.0 {
                    for level in [self.r_min, self.r_max] {
                        let s = (level - self.r_base) / self.amplitude_a;
                        if s.abs() > 1.0 {
                            continue;
                        }
                        let alpha = match self.kind {
                            WaveKind::Sine => s.asin(),
                            _ => s * PI / 2.0,
                        };
                        push_family(alpha, 2.0 * PI, self.phase_phi);
                        push_family(PI - alpha, 2.0 * PI, self.phase_phi);
                    }
                }
            }
        }
    }
}

fn check_time(t: f64) -> Result<()> {
    if !(t >= 0.0 && t.is_finite()) {
        return Err(Error::invalid("t", format!("must be finite and >= 0, got {t}")));
    }
    Ok(())
}

/// Target rate of `spec` at time `t`, before clipping.
pub fn eval_target(spec: &ModulationSpec, t: f64) -> Result<f64> {
    spec.validate()?;
    check_time(t)?;
    Ok(spec.target(t))
}

/// Shaping rate actually enforced at time `t`: the target clipped into
/// `[r_min, r_max]`.
pub fn eval_bounded(spec: &ModulationSpec, t: f64) -> Result<f64> {
    spec.validate()?;
    check_time(t)?;
    Ok(spec.bounded(t))
}
