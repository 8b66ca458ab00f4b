//! Flow-level splitting, masked pre-training, fine-tuning and evaluation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{
    gradients, logits, objective_value, sample_mask, EncoderParams, Objective, Tokens,
};
use crate::error::{ModelError, Result};
use crate::metrics::MetricsReport;

/// One labeled flow.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub flow_id: String,
    /// Modulation class, 0 = natural.
    pub label: u8,
    pub tokens: Tokens,
}

/// Target class of `label` for a task with `n_classes` outputs. The binary
/// task merges every watermark class into class 1.
pub fn task_label(label: u8, n_classes: usize) -> usize {
    if n_classes == 2 {
        (label > 0) as usize
    } else {
        label as usize
    }
}

/// Indices into the input, each list ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Label-stratified flow-level split. Each class keeps at least one flow on
/// both sides and contributes `round((1 - train_frac) * n_c)` test flows.
pub fn split_flows(labels: &[u8], train_frac: f64, seed: u64) -> Result<Split> {
    if labels.len() < 2 {
        return Err(ModelError::invalid("dataset", "need at least 2 flows"));
    }
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(ModelError::invalid("train_frac", "must lie in (0, 1)"));
    }
    let mut by_class: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = Split {
        train: Vec::new(),
        test: Vec::new(),
    };
    for (class, mut idx) in by_class {
        if idx.len() < 2 {
            return Err(flowmark_core::Error::Stratification(format!(
                "class {class} has {} flow(s), need 2",
                idx.len()
            ))
            .into());
        }
        idx.shuffle(&mut rng);
        let n_test = (((1.0 - train_frac) * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1);
        split.test.extend_from_slice(&idx[..n_test]);
        split.train.extend_from_slice(&idx[n_test..]);
    }
    split.train.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    /// Optimizer steps; used when `epochs` is 0.
    pub steps: usize,
    /// Full passes over the training flows (fine-tuning).
    #[serde(default)]
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    /// SGD momentum, or Adam's first-moment decay.
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_mask_ratio")]
    pub mask_ratio: f64,
    /// Train the classification head only.
    #[serde(default)]
    pub freeze_backbone: bool,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_in: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_out: Option<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_mask_ratio() -> f64 {
    0.9
}

impl TrainConfig {
    pub fn desk_pretrain() -> Self {
        TrainConfig {
            stage: Stage::Pretrain,
            steps: 5000,
            epochs: 0,
            batch_size: 32,
            base_lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            momentum: 0.9,
            mask_ratio: 0.9,
            freeze_backbone: false,
            seed: 0,
            checkpoint_in: None,
            checkpoint_out: None,
        }
    }

    pub fn desk_finetune() -> Self {
        TrainConfig {
            stage: Stage::Finetune,
            steps: 0,
            epochs: 30,
            base_lr: 2e-3,
            ..Self::desk_pretrain()
        }
    }

    /// Full-scale pre-training schedule.
    pub fn paper_pretrain() -> Self {
        TrainConfig {
            steps: 150_000,
            batch_size: 128,
            ..Self::desk_pretrain()
        }
    }

    /// Full-scale fine-tuning schedule.
    pub fn paper_finetune() -> Self {
        TrainConfig {
            epochs: 120,
            batch_size: 128,
            ..Self::desk_finetune()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(ModelError::invalid("batch_size", "must be >= 1"));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(ModelError::invalid("base_lr", "must be > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(ModelError::invalid("momentum", "must lie in [0, 1)"));
        }
        if self.stage == Stage::Pretrain && !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(ModelError::invalid("mask_ratio", "must lie in (0, 1)"));
        }
        Ok(())
    }

    /// Total optimizer steps for `n_train` flows.
    pub fn total_steps(&self, n_train: usize) -> usize {
        if self.epochs > 0 {
            self.epochs * n_train.div_ceil(self.batch_size)
        } else {
            self.steps
        }
    }
}

/// Cosine-decayed learning rate at `step` of `total`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    0.5 * base * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Heavy-ball SGD or Adam over the trainable tensors.
pub struct Optimizer {
    kind: OptimizerKind,
    momentum: f64,
    first: EncoderParams,
    second: EncoderParams,
    t: i32,
}

impl Optimizer {
    pub fn new(params: &EncoderParams, kind: OptimizerKind, momentum: f64) -> Self {
        Optimizer {
            kind,
            momentum,
            first: EncoderParams::zeros(&params.cfg),
            second: EncoderParams::zeros(&params.cfg),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut EncoderParams, grads: &EncoderParams, lr: f64, head_only: bool) {
        self.t += 1;
        let (b1, b2) = (self.momentum, ADAM_BETA2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let info = params.tensor_info();
        let grads = grads.tensors();
        let moments = self.first.tensors_mut().into_iter().zip(self.second.tensors_mut());
        for (((name, _, trainable), p), (g, (m, v))) in info.iter().zip(params.tensors_mut()).zip(grads.into_iter().zip(moments)) {
            if !trainable || (head_only && !name.starts_with("cls_")) {
                continue;
            }
            match self.kind {
                OptimizerKind::Sgd => {
                    for ((pi, &gi), mi) in p.iter_mut().zip(g).zip(m.iter_mut()) {
                        *mi = b1 * *mi + gi;
                        *pi -= lr * *mi;
                    }
                }
                OptimizerKind::Adam => {
                    for (((pi, &gi), mi), vi) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mi = b1 * *mi + (1.0 - b1) * gi;
                        *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                        *pi -= lr * (*mi / c1) / ((*vi / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}

/// Loss at each optimizer step.
pub type LossLog = Vec<(usize, f64)>;

pub fn loss_csv(log: &[(usize, f64)]) -> String {
    let mut s = String::from("step,loss\n");
    for (step, loss) in log {
        s += &format!("{step},{loss:.8}\n");
    }
    s
}

#[derive(Debug, Clone)]
pub struct PretrainResult {
    pub params: EncoderParams,
    pub losses: LossLog,
    /// Masked MSE on the held-out flows before and after training.
    pub holdout_initial: Option<f64>,
    pub holdout_final: Option<f64>,
}

/// Mean masked MSE over `flows` with masks drawn from `seed`.
pub fn masked_mse(params: &EncoderParams, flows: &[&Tokens], ratio: f64, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch: Vec<Tokens> = flows.iter().map(|t| (*t).clone()).collect();
    let masks = batch
        .iter()
        .map(|t| sample_mask(t.n, ratio, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    objective_value(&batch, params, &Objective::Reconstruct { masks })
}

/// Stage I: self-supervised masked reconstruction over `corpus`.
pub fn run_pretrain(
    cfg: &TrainConfig,
    mut params: EncoderParams,
    corpus: &[&Tokens],
    holdout: &[&Tokens],
) -> Result<PretrainResult> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(ModelError::invalid("dataset", "pre-training corpus is empty"));
    }
    let eval_seed = cfg.seed ^ 0x5eed_0f_e7a1;
    let holdout_initial = if holdout.is_empty() {
        None
    } else {
        Some(masked_mse(&params, holdout, cfg.mask_ratio, eval_seed)?)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(&params, cfg.optimizer, cfg.momentum);
    let total = cfg.steps;
    let mut losses = Vec::with_capacity(total);
    for step in 0..total {
        let batch: Vec<Tokens> = (0..cfg.batch_size)
            .map(|_| corpus[rng.random_range(0..corpus.len())].clone())
            .collect();
        let masks = batch
            .iter()
            .map(|t| sample_mask(t.n, cfg.mask_ratio, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let (loss, g) = gradients(&batch, &params, &Objective::Reconstruct { masks })
            .map_err(|_| ModelError::Diverged { step })?;
        opt.step(&mut params, &g, cosine_lr(cfg.base_lr, step, total), false);
        if !params.is_finite() {
            return Err(ModelError::Diverged { step });
        }
        losses.push((step, loss));
    }
    let holdout_final = if holdout.is_empty() {
        None
    } else {
        Some(masked_mse(&params, holdout, cfg.mask_ratio, eval_seed)?)
    };
    Ok(PretrainResult {
        params,
        losses,
        holdout_initial,
        holdout_final,
    })
}

/// Periodic held-out accuracy during fine-tuning.
pub struct EvalHook<'a> {
    pub flows: &'a [&'a Example],
    pub every: usize,
    /// Stop as soon as accuracy reaches this value.
    pub stop_at: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FinetuneResult {
    pub params: EncoderParams,
    pub losses: LossLog,
    /// (step, held-out accuracy) at every hook evaluation.
    pub curve: Vec<(usize, f64)>,
    /// First evaluated step whose accuracy met `stop_at`.
    pub reached_at: Option<usize>,
}

/// Stage II: supervised training of `params` (whose head already has
/// `params.cfg.n_classes` outputs) on `train`.
pub fn run_finetune(
    cfg: &TrainConfig,
    mut params: EncoderParams,
    train: &[&Example],
    hook: Option<&EvalHook>,
) -> Result<FinetuneResult> {
    cfg.validate()?;
    let k = params.cfg.n_classes;
    let targets: Vec<usize> = train.iter().map(|e| task_label(e.label, k)).collect();
    for c in 0..k {
        if !targets.contains(&c) {
            return Err(ModelError::invalid("dataset", format!("class {c} absent from training set")));
        }
    }
    if targets.iter().any(|&t| t >= k) {
        return Err(ModelError::invalid("dataset", "label exceeds n_classes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(&params, cfg.optimizer, cfg.momentum);
    let total = cfg.total_steps(train.len());
    let mut losses = Vec::with_capacity(total);
    let mut curve = Vec::new();
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    for step in 0..total {
        if cursor >= order.len() {
            order = (0..train.len()).collect();
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + cfg.batch_size).min(order.len());
        let idx = &order[cursor..end];
        cursor = end;
        let batch: Vec<Tokens> = idx.iter().map(|&i| train[i].tokens.clone()).collect();
        let labels = idx.iter().map(|&i| targets[i]).collect();
        let (loss, g) = gradients(&batch, &params, &Objective::Classify { labels })
            .map_err(|_| ModelError::Diverged { step })?;
        opt.step(&mut params, &g, cosine_lr(cfg.base_lr, step, total), cfg.freeze_backbone);
        if !params.is_finite() {
            return Err(ModelError::Diverged { step });
        }
        losses.push((step, loss));
        if let Some(h) = hook {
            let done = step + 1;
            if h.every > 0 && done % h.every == 0 {
                let acc = evaluate(&params, h.flows)?.accuracy;
                curve.push((done, acc));
                if h.stop_at.is_some_and(|t| acc >= t) {
                    return Ok(FinetuneResult {
                        params,
                        losses,
                        curve,
                        reached_at: Some(done),
                    });
                }
            }
        }
    }
    Ok(FinetuneResult {
        params,
        losses,
        curve,
        reached_at: None,
    })
}

pub fn predict(params: &EncoderParams, tokens: &Tokens) -> Result<usize> {
    let z = logits(tokens, params)?;
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Metrics of `params` on `flows`, labels mapped to the model's task.
pub fn evaluate(params: &EncoderParams, flows: &[&Example]) -> Result<MetricsReport> {
    let k = params.cfg.n_classes;
    let mut truth = Vec::with_capacity(flows.len());
    let mut pred = Vec::with_capacity(flows.len());
    for e in flows {
        truth.push(task_label(e.label, k));
        pred.push(predict(params, &e.tokens)?);
    }
    MetricsReport::from_predictions(&truth, &pred, k)
}
