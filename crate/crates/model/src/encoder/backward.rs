//! Reverse-mode derivatives of both training objectives.

use super::{
    axpy, classify_head, cross_entropy, embed_masked, layer_norm, mean_pool, recon_rows,
    scan_cached, sigmoid, softmax, EncoderParams, LayerParams, ScanCache, Tokens, A_EPS,
};
use crate::error::{ModelError, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Objective {
    /// Mean cross-entropy against one class id per flow.
    Classify { labels: Vec<usize> },
    /// Mean masked-token bit MSE with one sorted mask per flow.
    Reconstruct { masks: Vec<Vec<usize>> },
}

struct LayerTrace {
    /// Scan input (the normalized layer input under pre-normalization).
    u: Vec<f64>,
    inv_std: Vec<f64>,
    scan: ScanCache,
}

pub(crate) struct Trace {
    pub x_out: Vec<f64>,
    layers: Vec<LayerTrace>,
}

pub(crate) fn forward_cached(
    tokens: &Tokens,
    params: &EncoderParams,
    mask: Option<&[bool]>,
    keep: bool,
) -> Result<Trace> {
    let cfg = &params.cfg;
    let d = cfg.d_model;
    let mut x = embed_masked(tokens, params, mask)?;
    let mut layers = Vec::new();
    for layer in &params.layers {
        let (u, inv_std) = if cfg.prenorm {
            layer_norm(&x, d)
        } else {
            (x.clone(), Vec::new())
        };
        let mut cache = keep.then(ScanCache::default);
        let y = scan_cached(&u, layer, d, cfg.n_state, cache.as_mut())?;
        if cfg.residual {
            axpy(1.0, &y, &mut x);
        } else {
            x = y;
        }
        if let Some(scan) = cache {
            layers.push(LayerTrace { u, inv_std, scan });
        }
    }
    Ok(Trace { x_out: x, layers })
}

fn ln_backward(xhat: &[f64], inv_std: &[f64], du: &[f64], d: usize) -> Vec<f64> {
    let mut dx = vec![0.0; du.len()];
    for (t, &r) in inv_std.iter().enumerate() {
        let rows = t * d..(t + 1) * d;
        let g = &du[rows.clone()];
        let xh = &xhat[rows.clone()];
        let mean_g = g.iter().sum::<f64>() / d as f64;
        let mean_gx = g.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        for ((o, &gi), &xi) in dx[rows].iter_mut().zip(g).zip(xh) {
            *o = r * (gi - mean_g - xi * mean_gx);
        }
    }
    dx
}

/// Pulls `dy` back through one scan. Accumulates parameter gradients into
/// `g` and returns the gradient with respect to the scan input.
fn scan_backward(
    tr: &LayerTrace,
    layer: &LayerParams,
    dy: &[f64],
    d: usize,
    ns: usize,
    g: &mut LayerParams,
) -> Vec<f64> {
    let c = &tr.scan;
    let u = &tr.u;
    let n_tok = u.len() / d;
    let a = layer.a();
    let mut du = vec![0.0; u.len()];
    let mut carry = vec![0.0; d * ns];
    let mut db = vec![0.0; ns];
    let mut dc = vec![0.0; ns];
    for t in (0..n_tok).rev() {
        db.iter_mut().for_each(|v| *v = 0.0);
        dc.iter_mut().for_each(|v| *v = 0.0);
        let delta = c.delta[t];
        let bt = &c.b[t * ns..(t + 1) * ns];
        let ct = &c.c[t * ns..(t + 1) * ns];
        let off = t * d * ns;
        let mut ddelta = 0.0;
        for ch in 0..d {
            let dyv = dy[t * d + ch];
            let uv = u[t * d + ch];
            let mut du_ch = 0.0;
            for s in 0..ns {
                let i = ch * ns + s;
                let h = c.h[off + i];
                let h_prev = if t > 0 { c.h[off - d * ns + i] } else { 0.0 };
                let a_bar = c.a_bar[off + i];
                let phi = c.phi[off + i];
                dc[s] += dyv * h;
                let gh = carry[i] + dyv * ct[s];
                let d_abar = gh * h_prev;
                let d_bbar = gh * uv;
                du_ch += gh * phi * bt[s];
                db[s] += d_bbar * phi;
                let dphi = d_bbar * bt[s];
                let ai = a[i];
                let da = if ai.abs() > A_EPS {
                    ddelta += d_abar * a_bar * ai + dphi * a_bar;
                    d_abar * a_bar * delta + dphi * (delta * a_bar * ai - (a_bar - 1.0)) / (ai * ai)
                } else {
                    ddelta += d_abar * a_bar * ai + dphi;
                    d_abar * a_bar * delta + dphi * 0.5 * delta * delta
                };
                g.a_log[i] += da * ai;
                carry[i] = gh * a_bar;
            }
            du[t * d + ch] += du_ch;
        }
        let dpre = ddelta * sigmoid(c.pre_delta[t]);
        g.b_delta += dpre;
        let ut = &u[t * d..(t + 1) * d];
        let dut = &mut du[t * d..(t + 1) * d];
        for k in 0..d {
            g.w_delta[k] += dpre * ut[k];
            let mut acc = dpre * layer.w_delta[k];
            for s in 0..ns {
                g.w_b[k * ns + s] += ut[k] * db[s];
                g.w_c[k * ns + s] += ut[k] * dc[s];
                acc += layer.w_b[k * ns + s] * db[s] + layer.w_c[k * ns + s] * dc[s];
            }
            dut[k] += acc;
        }
    }
    du
}

/// Backpropagates `dx` (gradient at the final token states) to every
/// backbone tensor.
fn backbone_backward(
    tokens: &Tokens,
    params: &EncoderParams,
    trace: &Trace,
    mask: Option<&[bool]>,
    mut dx: Vec<f64>,
    g: &mut EncoderParams,
) {
    let cfg = &params.cfg;
    let d = cfg.d_model;
    for (li, layer) in params.layers.iter().enumerate().rev() {
        let tr = &trace.layers[li];
        let du = scan_backward(tr, layer, &dx, d, cfg.n_state, &mut g.layers[li]);
        let dxn = if cfg.prenorm {
            ln_backward(&tr.u, &tr.inv_std, &du, d)
        } else {
            du
        };
        if cfg.residual {
            axpy(1.0, &dxn, &mut dx);
        } else {
            dx = dxn;
        }
    }
    let mut visible = vec![0.0; d];
    for t in 0..tokens.n {
        let row = &dx[t * d..(t + 1) * d];
        axpy(1.0, row, &mut g.pos[t * d..(t + 1) * d]);
        if mask.is_some_and(|m| m[t]) {
            axpy(1.0, row, &mut g.mask_token);
            continue;
        }
        axpy(1.0, row, &mut visible);
        for &j in tokens.ones(t) {
            let j = j as usize;
            axpy(1.0, row, &mut g.w_proj[j * d..(j + 1) * d]);
        }
    }
    if cfg.center_bits {
        for (j, &m) in params.bit_mean.iter().enumerate() {
            if m != 0.0 {
                axpy(-m, &visible, &mut g.w_proj[j * d..(j + 1) * d]);
            }
        }
    }
}

/// Mean objective over `batch` and, when `want` is set, its exact gradient
/// with respect to every tensor of `params` (zero for `bit_mean`).
pub(crate) fn loss_and_grads(
    batch: &[Tokens],
    params: &EncoderParams,
    objective: &Objective,
    want: bool,
) -> Result<(f64, Option<EncoderParams>)> {
    let cfg = &params.cfg;
    let (d, k, l) = (cfg.d_model, cfg.n_classes, cfg.l_s);
    let expected = match objective {
        Objective::Classify { labels } => labels.len(),
        Objective::Reconstruct { masks } => masks.len(),
    };
    if batch.is_empty() || expected != batch.len() {
        return Err(ModelError::invalid("batch", "need one target per flow"));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut g = want.then(|| EncoderParams::zeros(cfg));
    let mut total = 0.0;
    for (b, tok) in batch.iter().enumerate() {
        if tok.n == 0 {
            return Err(ModelError::invalid("strides", "empty sequence"));
        }
        match objective {
            Objective::Classify { labels } => {
                let trace = forward_cached(tok, params, None, want)?;
                let z = classify_head(&trace.x_out, params);
                let y = labels[b];
                total += cross_entropy(&z, y)?;
                let Some(g) = g.as_mut() else { continue };
                let mut dz = softmax(&z);
                dz[y] -= 1.0;
                dz.iter_mut().for_each(|v| *v *= scale);
                axpy(1.0, &dz, &mut g.cls_bias);
                let pooled = mean_pool(&trace.x_out, d);
                let mut dpool = vec![0.0; d];
                for i in 0..d {
                    let row = &params.cls_head[i * k..(i + 1) * k];
                    axpy(pooled[i], &dz, &mut g.cls_head[i * k..(i + 1) * k]);
                    dpool[i] = row.iter().zip(&dz).map(|(a, b)| a * b).sum();
                }
                let inv_n = 1.0 / tok.n as f64;
                let mut dx = Vec::with_capacity(tok.n * d);
                for _ in 0..tok.n {
                    dx.extend(dpool.iter().map(|v| v * inv_n));
                }
                backbone_backward(tok, params, &trace, None, dx, g);
            }
            Objective::Reconstruct { masks } => {
                let rows = &masks[b];
                if rows.is_empty() || rows.iter().any(|&t| t >= tok.n) {
                    return Err(ModelError::invalid("mask", "indices must be in range and non-empty"));
                }
                let mut flags = vec![false; tok.n];
                rows.iter().for_each(|&t| flags[t] = true);
                let trace = forward_cached(tok, params, Some(&flags), want)?;
                let recon = recon_rows(&trace.x_out, rows, params, d);
                let denom = (rows.len() * l) as f64;
                let mut dr = Vec::with_capacity(recon.len());
                let mut sq = 0.0;
                for (ri, &t) in rows.iter().enumerate() {
                    for (j, &bit) in tok.stride(t).iter().enumerate() {
                        let e = recon[ri * l + j] - bit as f64;
                        sq += e * e;
                        dr.push(2.0 * e / denom * scale);
                    }
                }
                total += sq / denom;
                let Some(g) = g.as_mut() else { continue };
                let mut dx = vec![0.0; tok.n * d];
                for (ri, &t) in rows.iter().enumerate() {
                    let drt = &dr[ri * l..(ri + 1) * l];
                    axpy(1.0, drt, &mut g.recon_bias);
                    for i in 0..d {
                        let xi = trace.x_out[t * d + i];
                        let head = &params.recon_head[i * l..(i + 1) * l];
                        axpy(xi, drt, &mut g.recon_head[i * l..(i + 1) * l]);
                        dx[t * d + i] = head.iter().zip(drt).map(|(a, b)| a * b).sum();
                    }
                }
                backbone_backward(tok, params, &trace, Some(&flags), dx, g);
            }
        }
    }
    let loss = total * scale;
    if !loss.is_finite() {
        return Err(ModelError::invalid("loss", "objective is not finite"));
    }
    Ok((loss, g))
}

/// Mean objective over `batch` and its gradient for every tensor.
pub fn gradients(
    batch: &[Tokens],
    params: &EncoderParams,
    objective: &Objective,
) -> Result<(f64, EncoderParams)> {
    let (loss, g) = loss_and_grads(batch, params, objective, true)?;
    Ok((loss, g.expect("requested")))
}
