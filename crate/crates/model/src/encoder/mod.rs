//! Flow encoder: sparse bit embedding, stacked selective state-space scans,
//! mean-pooled classification head and a per-token reconstruction head.

mod backward;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use flowmark_core::trace::StrideSequence;

use crate::error::{ModelError, Result};

pub use backward::{gradients, Objective};

/// Below this magnitude the diagonal state coefficient is treated as zero.
pub const A_EPS: f64 = 1e-12;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_state: usize,
    pub n_layers: usize,
    pub n_tokens_max: usize,
    pub n_classes: usize,
    /// Stride length in bits.
    pub l_s: usize,
    /// Add each scan's output to its input.
    pub residual: bool,
    /// Layer-normalize the input of each scan.
    pub prenorm: bool,
    /// Subtract the corpus mean of every bit position before projecting.
    pub center_bits: bool,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_model: 64,
            n_state: 16,
            n_layers: 2,
            n_tokens_max: 64,
            n_classes: 4,
            l_s: 416,
            residual: true,
            prenorm: true,
            center_bits: true,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    /// The small model used for single-core experiments.
    pub fn desk() -> Self {
        EncoderConfig {
            d_model: 16,
            n_state: 4,
            n_layers: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("d_model", self.d_model),
            ("n_state", self.n_state),
            ("n_layers", self.n_layers),
            ("n_tokens_max", self.n_tokens_max),
            ("l_s", self.l_s),
        ] {
            if v == 0 {
                return Err(ModelError::invalid(field, "must be > 0"));
            }
        }
        if self.n_classes < 2 {
            return Err(ModelError::invalid("n_classes", "must be >= 2"));
        }
        Ok(())
    }
}

/// Strided bits of one flow, with the set positions of every token cached
/// for the sparse projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Tokens {
    pub n: usize,
    pub l_s: usize,
    pub bits: Vec<u8>,
    ones: Vec<Vec<u32>>,
}

impl Tokens {
    pub fn new(bits: Vec<u8>, l_s: usize) -> Result<Self> {
        if l_s == 0 || bits.len() % l_s != 0 {
            return Err(ModelError::invalid("strides", "length must be a multiple of L_s"));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(ModelError::invalid("strides", "entries must be 0 or 1"));
        }
        let ones = bits
            .chunks(l_s)
            .map(|s| (0..l_s as u32).filter(|&j| s[j as usize] == 1).collect())
            .collect();
        Ok(Tokens {
            n: bits.len() / l_s,
            l_s,
            bits,
            ones,
        })
    }

    pub fn from_strides(seq: &StrideSequence) -> Result<Self> {
        Self::new(seq.data.clone(), seq.l_s)
    }

    pub fn stride(&self, t: usize) -> &[u8] {
        &self.bits[t * self.l_s..(t + 1) * self.l_s]
    }

    pub(crate) fn ones(&self, t: usize) -> &[u32] {
        &self.ones[t]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// `log(-A)`, d_model x n_state.
    pub a_log: Vec<f64>,
    /// d_model x n_state.
    pub w_b: Vec<f64>,
    pub w_c: Vec<f64>,
    pub w_delta: Vec<f64>,
    pub b_delta: f64,
}

impl LayerParams {
    fn zeros(d: usize, n: usize) -> Self {
        LayerParams {
            a_log: vec![0.0; d * n],
            w_b: vec![0.0; d * n],
            w_c: vec![0.0; d * n],
            w_delta: vec![0.0; d],
            b_delta: 0.0,
        }
    }

    /// The diagonal state matrix, `-exp(a_log)`.
    pub fn a(&self) -> Vec<f64> {
        self.a_log.iter().map(|v| -v.exp()).collect()
    }
}

/// All tensors are row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub cfg: EncoderConfig,
    /// L_s x d_model.
    pub w_proj: Vec<f64>,
    /// n_tokens_max x d_model.
    pub pos: Vec<f64>,
    pub layers: Vec<LayerParams>,
    /// d_model x n_classes.
    pub cls_head: Vec<f64>,
    pub cls_bias: Vec<f64>,
    /// d_model x L_s.
    pub recon_head: Vec<f64>,
    pub recon_bias: Vec<f64>,
    pub mask_token: Vec<f64>,
    /// Per-position bit mean subtracted before projection. Not trained.
    pub bit_mean: Vec<f64>,
}

/// One named tensor: name, shape, whether the optimizer updates it.
pub type TensorInfo = (String, Vec<usize>, bool);

impl EncoderParams {
    pub fn zeros(cfg: &EncoderConfig) -> Self {
        let (d, n, k, l) = (cfg.d_model, cfg.n_state, cfg.n_classes, cfg.l_s);
        EncoderParams {
            cfg: cfg.clone(),
            w_proj: vec![0.0; l * d],
            pos: vec![0.0; cfg.n_tokens_max * d],
            layers: (0..cfg.n_layers).map(|_| LayerParams::zeros(d, n)).collect(),
            cls_head: vec![0.0; d * k],
            cls_bias: vec![0.0; k],
            recon_head: vec![0.0; d * l],
            recon_bias: vec![0.0; l],
            mask_token: vec![0.0; d],
            bit_mean: vec![0.0; l],
        }
    }

    /// Random initialization from `cfg.seed`.
    pub fn init(cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut p = Self::zeros(cfg);
        let d = cfg.d_model as f64;
        let fill = |v: &mut [f64], sd: f64, rng: &mut ChaCha8Rng| {
            let dist = Normal::new(0.0, sd).expect("positive sd");
            v.iter_mut().for_each(|x| *x = dist.sample(rng));
        };
        fill(&mut p.w_proj, 0.02, &mut rng);
        fill(&mut p.pos, 0.02, &mut rng);
        for layer in &mut p.layers {
            for (i, a) in layer.a_log.iter_mut().enumerate() {
                *a = ((i % cfg.n_state) as f64 + 1.0).ln();
            }
            fill(&mut layer.w_b, 1.0 / d.sqrt(), &mut rng);
            fill(&mut layer.w_c, 1.0 / d.sqrt(), &mut rng);
            fill(&mut layer.w_delta, 0.1 / d.sqrt(), &mut rng);
            layer.b_delta = -2.0;
        }
        let bound = 1.0 / d.sqrt();
        for v in p.cls_head.iter_mut().chain(&mut p.recon_head) {
            *v = rng.random_range(-bound..bound);
        }
        Ok(p)
    }

    /// Fresh classification head for `n_classes`, keeping the backbone.
    pub fn with_new_head(&self, n_classes: usize, seed: u64) -> Result<Self> {
        let mut cfg = self.cfg.clone();
        cfg.n_classes = n_classes;
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (cfg.d_model as f64).sqrt();
        let mut p = self.clone();
        p.cls_head = (0..cfg.d_model * n_classes)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        p.cls_bias = vec![0.0; n_classes];
        p.cfg = cfg;
        Ok(p)
    }

    /// Sets the centering vector to the mean of every bit position over
    /// all tokens of `corpus`.
    pub fn fit_bit_mean<'a>(&mut self, corpus: impl IntoIterator<Item = &'a Tokens>) {
        let l = self.cfg.l_s;
        let mut sum = vec![0.0; l];
        let mut count = 0usize;
        for tok in corpus {
            for t in 0..tok.n {
                for &j in tok.ones(t) {
                    sum[j as usize] += 1.0;
                }
            }
            count += tok.n;
        }
        if count > 0 {
            self.bit_mean = sum.iter().map(|s| s / count as f64).collect();
        }
    }

    pub fn tensor_info(&self) -> Vec<TensorInfo> {
        let c = &self.cfg;
        let (d, n, l) = (c.d_model, c.n_state, c.l_s);
        let mut out = vec![
            ("W_proj".into(), vec![l, d], true),
            ("pos".into(), vec![c.n_tokens_max, d], true),
        ];
        for i in 0..self.layers.len() {
            out.push((format!("layers.{i}.A_log"), vec![d, n], true));
            out.push((format!("layers.{i}.W_B"), vec![d, n], true));
            out.push((format!("layers.{i}.W_C"), vec![d, n], true));
            out.push((format!("layers.{i}.W_delta"), vec![d], true));
            out.push((format!("layers.{i}.b_delta"), vec![1], true));
        }
        out.extend([
            ("cls_head".into(), vec![d, c.n_classes], true),
            ("cls_bias".into(), vec![c.n_classes], true),
            ("recon_head".into(), vec![d, l], true),
            ("recon_bias".into(), vec![l], true),
            ("mask_token".into(), vec![d], true),
            ("bit_mean".into(), vec![l], false),
        ]);
        out
    }

    /// Every tensor in [`Self::tensor_info`] order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![&self.w_proj, &self.pos];
        for layer in &self.layers {
            out.extend([
                &layer.a_log[..],
                &layer.w_b,
                &layer.w_c,
                &layer.w_delta,
                std::slice::from_ref(&layer.b_delta),
            ]);
        }
        out.extend([
            &self.cls_head[..],
            &self.cls_bias,
            &self.recon_head,
            &self.recon_bias,
            &self.mask_token,
            &self.bit_mean,
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![&mut self.w_proj, &mut self.pos];
        for layer in &mut self.layers {
            out.push(&mut layer.a_log);
            out.push(&mut layer.w_b);
            out.push(&mut layer.w_c);
            out.push(&mut layer.w_delta);
            out.push(std::slice::from_mut(&mut layer.b_delta));
        }
        out.push(&mut self.cls_head);
        out.push(&mut self.cls_bias);
        out.push(&mut self.recon_head);
        out.push(&mut self.recon_bias);
        out.push(&mut self.mask_token);
        out.push(&mut self.bit_mean);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// `bit_mean · W_proj`, the constant removed from every token.
    fn mean_projection(&self) -> Vec<f64> {
        let d = self.cfg.d_model;
        let mut out = vec![0.0; d];
        if self.cfg.center_bits {
            for (j, &m) in self.bit_mean.iter().enumerate() {
                if m != 0.0 {
                    axpy(m, &self.w_proj[j * d..(j + 1) * d], &mut out);
                }
            }
        }
        out
    }
}

pub(crate) fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Token embeddings `x_i = s_i W_proj + pos_i`, N x d_model row-major.
/// Tokens flagged in `mask` take `mask_token + pos_i` instead.
pub(crate) fn embed_masked(
    tokens: &Tokens,
    params: &EncoderParams,
    mask: Option<&[bool]>,
) -> Result<Vec<f64>> {
    let cfg = &params.cfg;
    if tokens.l_s != cfg.l_s {
        return Err(ModelError::invalid(
            "strides",
            format!("stride length {} does not match L_s = {}", tokens.l_s, cfg.l_s),
        ));
    }
    if tokens.n > cfg.n_tokens_max {
        return Err(ModelError::SequenceTooLong {
            n: tokens.n,
            max: cfg.n_tokens_max,
        });
    }
    let d = cfg.d_model;
    let shift = params.mean_projection();
    let mut x = vec![0.0; tokens.n * d];
    for (t, row) in x.chunks_mut(d).enumerate() {
        row.copy_from_slice(&params.pos[t * d..(t + 1) * d]);
        if mask.is_some_and(|m| m[t]) {
            axpy(1.0, &params.mask_token, row);
            continue;
        }
        for &j in tokens.ones(t) {
            let j = j as usize;
            axpy(1.0, &params.w_proj[j * d..(j + 1) * d], row);
        }
        axpy(-1.0, &shift, row);
    }
    Ok(x)
}

pub fn embed(tokens: &Tokens, params: &EncoderParams) -> Result<Vec<f64>> {
    embed_masked(tokens, params, None)
}

/// Zero-order-hold discretization of one diagonal entry.
pub fn discretize(a: f64, b: f64, delta: f64) -> Result<(f64, f64)> {
    if !(delta >= 0.0) {
        return Err(ModelError::invalid("delta", "must be >= 0"));
    }
    let a_bar = (delta * a).exp();
    let b_bar = if a.abs() > A_EPS {
        (a_bar - 1.0) / a * b
    } else {
        delta * b
    };
    Ok((a_bar, b_bar))
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Intermediate values of one scan, kept for the backward pass.
#[derive(Debug, Clone, Default)]
pub(crate) struct ScanCache {
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub pre_delta: Vec<f64>,
    pub delta: Vec<f64>,
    pub a_bar: Vec<f64>,
    pub phi: Vec<f64>,
    pub h: Vec<f64>,
}

/// Runs the input-dependent recurrence over `x` (N x d_model).
pub(crate) fn scan_cached(
    x: &[f64],
    layer: &LayerParams,
    d: usize,
    ns: usize,
    mut cache: Option<&mut ScanCache>,
) -> Result<Vec<f64>> {
    let n_tok = x.len() / d;
    let a = layer.a();
    let mut y = vec![0.0; n_tok * d];
    let mut h = vec![0.0; d * ns];
    let mut bt = vec![0.0; ns];
    let mut ct = vec![0.0; ns];
    if let Some(c) = cache.as_deref_mut() {
        c.b = Vec::with_capacity(n_tok * ns);
        c.c = Vec::with_capacity(n_tok * ns);
        c.pre_delta = Vec::with_capacity(n_tok);
        c.delta = Vec::with_capacity(n_tok);
        c.a_bar = Vec::with_capacity(n_tok * d * ns);
        c.phi = Vec::with_capacity(n_tok * d * ns);
        c.h = Vec::with_capacity(n_tok * d * ns);
    }
    for t in 0..n_tok {
        let xt = &x[t * d..(t + 1) * d];
        bt.iter_mut().for_each(|v| *v = 0.0);
        ct.iter_mut().for_each(|v| *v = 0.0);
        for (k, &xk) in xt.iter().enumerate() {
            axpy(xk, &layer.w_b[k * ns..(k + 1) * ns], &mut bt);
            axpy(xk, &layer.w_c[k * ns..(k + 1) * ns], &mut ct);
        }
        let pre = dot(xt, &layer.w_delta) + layer.b_delta;
        let delta = softplus(pre);
        let yt = &mut y[t * d..(t + 1) * d];
        for ch in 0..d {
            let mut acc = 0.0;
            for s in 0..ns {
                let i = ch * ns + s;
                let a_bar = (delta * a[i]).exp();
                let phi = if a[i].abs() > A_EPS {
                    (a_bar - 1.0) / a[i]
                } else {
                    delta
                };
                h[i] = a_bar * h[i] + phi * bt[s] * xt[ch];
                acc += ct[s] * h[i];
                if let Some(c) = cache.as_deref_mut() {
                    c.a_bar.push(a_bar);
                    c.phi.push(phi);
                }
            }
            yt[ch] = acc;
        }
        if let Some(c) = cache.as_deref_mut() {
            c.b.extend_from_slice(&bt);
            c.c.extend_from_slice(&ct);
            c.pre_delta.push(pre);
            c.delta.push(delta);
            c.h.extend_from_slice(&h);
        }
        if !yt.iter().all(|v| v.is_finite()) {
            return Err(ModelError::NumericOverflow);
        }
    }
    Ok(y)
}

/// Selective scan of one layer over `x` (N x d_model row-major): per token
/// `B_t = x_t W_B`, `C_t = x_t W_C`, `delta_t = softplus(x_t W_delta + b)`,
/// then `h_t = A_bar h_{t-1} + B_bar x_t[d]` and `y_t[d] = C_t . h_t[d]`.
pub fn selective_scan(x: &[f64], layer: &LayerParams, d_model: usize) -> Result<Vec<f64>> {
    if d_model == 0 || x.len() % d_model != 0 {
        return Err(ModelError::invalid("x", "length must be a multiple of d_model"));
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(ModelError::invalid("x", "inputs must be finite"));
    }
    let ns = layer.w_b.len() / d_model;
    scan_cached(x, layer, d_model, ns, None)
}

/// Row-wise layer normalization without affine parameters. Returns the
/// normalized rows and each row's inverse standard deviation.
pub(crate) fn layer_norm(x: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; x.len()];
    let mut inv = Vec::with_capacity(x.len() / d);
    for (row, o) in x.chunks(d).zip(out.chunks_mut(d)) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        for (oi, &v) in o.iter_mut().zip(row) {
            *oi = (v - mean) * r;
        }
        inv.push(r);
    }
    (out, inv)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Classify,
    Reconstruct,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Output {
    /// `n_classes` logits.
    Logits(Vec<f64>),
    /// N x L_s reconstructed bits.
    Recon(Vec<f64>),
}

/// Final-layer token states for `tokens`, N x d_model.
pub fn encode(tokens: &Tokens, params: &EncoderParams) -> Result<Vec<f64>> {
    Ok(backward::forward_cached(tokens, params, None, false)?.x_out)
}

pub fn forward(tokens: &Tokens, params: &EncoderParams, mode: Mode) -> Result<Output> {
    let x = encode(tokens, params)?;
    let d = params.cfg.d_model;
    Ok(match mode {
        Mode::Classify => Output::Logits(classify_head(&x, params)),
        Mode::Reconstruct => {
            let rows: Vec<usize> = (0..tokens.n).collect();
            Output::Recon(recon_rows(&x, &rows, params, d))
        }
    })
}

/// Class logits for one flow.
pub fn logits(tokens: &Tokens, params: &EncoderParams) -> Result<Vec<f64>> {
    Ok(classify_head(&encode(tokens, params)?, params))
}

pub(crate) fn mean_pool(x: &[f64], d: usize) -> Vec<f64> {
    let n = x.len() / d;
    let mut z = vec![0.0; d];
    for row in x.chunks(d) {
        axpy(1.0, row, &mut z);
    }
    if n > 0 {
        z.iter_mut().for_each(|v| *v /= n as f64);
    }
    z
}

pub(crate) fn classify_head(x: &[f64], params: &EncoderParams) -> Vec<f64> {
    let d = params.cfg.d_model;
    let k = params.cfg.n_classes;
    let z = mean_pool(x, d);
    let mut out = params.cls_bias.clone();
    for (i, &zi) in z.iter().enumerate() {
        axpy(zi, &params.cls_head[i * k..(i + 1) * k], &mut out);
    }
    out
}

/// Reconstruction head applied to the listed token rows.
pub(crate) fn recon_rows(x: &[f64], rows: &[usize], params: &EncoderParams, d: usize) -> Vec<f64> {
    let l = params.cfg.l_s;
    let mut out = Vec::with_capacity(rows.len() * l);
    for &t in rows {
        let mut r = params.recon_bias.clone();
        for (i, &xi) in x[t * d..(t + 1) * d].iter().enumerate() {
            axpy(xi, &params.recon_head[i * l..(i + 1) * l], &mut r);
        }
        out.extend(r);
    }
    out
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `-log softmax(z)[y]` in log-sum-exp form.
pub fn cross_entropy(z: &[f64], y: usize) -> Result<f64> {
    if y >= z.len() {
        return Err(ModelError::invalid("y", format!("class {y} not in 0..{}", z.len())));
    }
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    Ok((lse - z[y]).max(0.0))
}

/// Number of tokens hidden at `ratio`.
pub fn masked_count(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64).ceil() as usize).min(n)
}

/// Uniformly sampled token indices to hide, sorted.
pub fn sample_mask<R: Rng>(n: usize, ratio: f64, rng: &mut R) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(ModelError::invalid("strides", "empty sequence"));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(ModelError::invalid("mask_ratio", "must lie in (0, 1)"));
    }
    let mut idx = index::sample(rng, n, masked_count(n, ratio)).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Mean objective over `batch` without gradients.
pub fn objective_value(batch: &[Tokens], params: &EncoderParams, objective: &Objective) -> Result<f64> {
    Ok(backward::loss_and_grads(batch, params, objective, false)?.0)
}

/// Mean squared reconstruction error over the bits of the masked tokens.
pub fn masked_loss_with(tokens: &Tokens, mask: &[usize], params: &EncoderParams) -> Result<f64> {
    objective_value(
        std::slice::from_ref(tokens),
        params,
        &Objective::Reconstruct {
            masks: vec![mask.to_vec()],
        },
    )
}

pub fn masked_pretrain_loss<R: Rng>(
    tokens: &Tokens,
    mask_ratio: f64,
    params: &EncoderParams,
    rng: &mut R,
) -> Result<f64> {
    let mask = sample_mask(tokens.n, mask_ratio, rng)?;
    masked_loss_with(tokens, &mask, params)
}
