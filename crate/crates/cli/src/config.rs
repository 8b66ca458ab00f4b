//! Experiment configuration: a preset, deep-merged with an optional JSON
//! file, then overridden by command-line flags.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use flowmark_core::corrmodel::CorrelationParams;
use flowmark_core::exitsim::{NetworkSpec, ANCHOR_ADVERSARY_BW, CIRCUITS_PER_WINDOW};
use flowmark_core::shaper::TokenBucketConfig;
use flowmark_core::trace::SerializeParams;
use flowmark_core::waveform::{ModulationSpec, WaveKind};
use flowmark_model::encoder::EncoderConfig;
use flowmark_model::train::TrainConfig;

use crate::dataset::DatasetConfig;
use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "desk")]
    Desk,
    #[serde(rename = "paper-vi-a")]
    PaperViA,
    #[serde(rename = "paper-vi-c")]
    PaperViC,
}

impl Preset {
    pub fn parse(s: &str) -> CliResult<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper-vi-a" => Ok(Preset::PaperViA),
            "paper-vi-c" => Ok(Preset::PaperViC),
            _ => Err(CliError::validation(format!(
                "unknown preset {s:?} (expected desk, paper-vi-a or paper-vi-c)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train_frac: f64,
    /// Kept apart from the global seed so every stage sees the same split.
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train_frac: 0.8,
            seed: 0,
        }
    }
}

/// Held-out accuracy tracking during fine-tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurveConfig {
    /// Evaluate every this many steps; 0 disables the curve.
    pub every: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stop_at: Option<f64>,
}

impl Default for CurveConfig {
    fn default() -> Self {
        CurveConfig {
            every: 0,
            stop_at: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExitConfig {
    pub network: NetworkSpec,
    /// Adversarial bandwidth of the k-th injected exit, Mbps.
    pub bandwidths: Vec<f64>,
    pub max_n: usize,
    pub trials: u64,
    pub enforce_range: bool,
}

impl Default for ExitConfig {
    fn default() -> Self {
        ExitConfig {
            network: NetworkSpec::paper_vi_a(0),
            bandwidths: vec![ANCHOR_ADVERSARY_BW; 9],
            max_n: 9,
            trials: CIRCUITS_PER_WINDOW,
            enforce_range: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbConfig {
    pub params: CorrelationParams,
    /// Exit-observation probabilities swept in place of `params.p_exit`.
    pub p_exit: Vec<f64>,
    /// Flows per window.
    pub r: Vec<f64>,
    /// Observation windows.
    pub windows: Vec<f64>,
}

impl Default for ProbConfig {
    fn default() -> Self {
        ProbConfig {
            params: CorrelationParams {
                p_exit: 0.10,
                p1: 0.9965,
                p2: vec![0.975; 3],
                pi: vec![1.0 / 3.0; 3],
            },
            p_exit: vec![0.0213, 0.05, 0.10],
            r: vec![1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0],
            windows: vec![1.0, 6.0, 144.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeaturizeConfig {
    pub bin_s: f64,
    pub iat_window: usize,
}

impl Default for FeaturizeConfig {
    fn default() -> Self {
        FeaturizeConfig {
            bin_s: 1.0,
            iat_window: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShapeConfig {
    pub modulation: ModulationSpec,
    pub bucket: TokenBucketConfig,
}

impl Default for ShapeConfig {
    fn default() -> Self {
        ShapeConfig {
            modulation: DatasetConfig::default().modulation(WaveKind::Square, 1800.0),
            bucket: TokenBucketConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<String>,
    /// 2 for watermark detection, 4 for modulation identification.
    pub classes: usize,
    pub dataset: DatasetConfig,
    pub serialize: SerializeParams,
    pub encoder: EncoderConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub split: SplitConfig,
    pub curve: CurveConfig,
    pub exit: ExitConfig,
    pub prob: ProbConfig,
    pub featurize: FeaturizeConfig,
    pub shape: ShapeConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: None,
            out: None,
            classes: 4,
            dataset: DatasetConfig::default(),
            serialize: SerializeParams::default(),
            encoder: EncoderConfig::desk(),
            pretrain: TrainConfig::desk_pretrain(),
            finetune: TrainConfig::desk_finetune(),
            split: SplitConfig::default(),
            curve: CurveConfig::default(),
            exit: ExitConfig::default(),
            prob: ProbConfig::default(),
            featurize: FeaturizeConfig::default(),
            shape: ShapeConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn preset(p: Preset) -> Self {
        let base = Self::default();
        match p {
            Preset::Desk | Preset::PaperViA => base,
            Preset::PaperViC => ExperimentConfig {
                encoder: EncoderConfig::default(),
                pretrain: TrainConfig::paper_pretrain(),
                finetune: TrainConfig::paper_finetune(),
                ..base
            },
        }
    }

    /// `preset`, overlaid with the JSON document at `path`.
    pub fn resolve(preset: Preset, path: Option<&Path>) -> CliResult<Self> {
        let base = Self::preset(preset);
        let Some(path) = path else {
            return Ok(base);
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::validation(format!("config {}: {e}", path.display())))?;
        let overlay: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::validation(format!("config {}: {e}", path.display())))?;
        Self::merged(&base, overlay)
    }

    pub fn merged(base: &Self, overlay: Value) -> CliResult<Self> {
        if !overlay.is_object() {
            return Err(CliError::validation("config must be a JSON object"));
        }
        let mut v = serde_json::to_value(base).expect("config serializes");
        merge(&mut v, overlay);
        serde_json::from_value(v).map_err(|e| CliError::validation(format!("config: {e}")))
    }

    /// Cross-section consistency.
    pub fn validate(&self) -> CliResult<()> {
        if self.classes != 2 && self.classes != 4 {
            return Err(CliError::validation("classes must be 2 or 4"));
        }
        self.dataset.validate()?;
        self.serialize.validate()?;
        self.encoder.validate()?;
        if self.encoder.l_s != self.serialize.l_s {
            return Err(CliError::validation(format!(
                "encoder.l_s = {} but serialize.l_s = {}",
                self.encoder.l_s, self.serialize.l_s
            )));
        }
        if self.serialize.n_tokens() > self.encoder.n_tokens_max {
            return Err(CliError::validation(format!(
                "{} tokens per flow exceed encoder.n_tokens_max = {}",
                self.serialize.n_tokens(),
                self.encoder.n_tokens_max
            )));
        }
        self.pretrain.validate()?;
        self.finetune.validate()?;
        if !(self.split.train_frac > 0.0 && self.split.train_frac < 1.0) {
            return Err(CliError::validation("split.train_frac must lie in (0, 1)"));
        }
        if self.exit.trials == 0 {
            return Err(CliError::validation("exit.trials must be >= 1"));
        }
        if self.exit.bandwidths.len() < self.exit.max_n {
            return Err(CliError::validation(format!(
                "exit.bandwidths lists {} values, max_n is {}",
                self.exit.bandwidths.len(),
                self.exit.max_n
            )));
        }
        self.prob.params.validate()?;
        if !(self.featurize.bin_s > 0.0) || self.featurize.iat_window == 0 {
            return Err(CliError::validation("featurize.bin_s and iat_window must be > 0"));
        }
        self.shape.modulation.validate()?;
        self.shape.bucket.validate()?;
        Ok(())
    }

    /// Sets the global seed and propagates it to every seeded section.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.encoder.seed = seed;
        self.pretrain.seed = seed;
        self.finetune.seed = seed;
        self.exit.network.seed = seed;
    }

    pub fn require_seed(&self) -> CliResult<u64> {
        self.seed
            .ok_or_else(|| CliError::validation("a seed is required (--seed or \"seed\" in the config)"))
    }
}

/// Objects merge key by key; anything else in `overlay` replaces `base`.
pub fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}
