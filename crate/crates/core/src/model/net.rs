//! Batched forward pass and backpropagation through time.
//!
//! Inputs are time-major: example `b`, step `t`, row `r` lives at
//! `(b·steps + t)·rows + r`.

use super::gemm::{gemm, View};
use super::{bce, ModelError, ModelParams, Weights, BN_EPS, P_CLAMP};
use crate::label::{GestureLabel, NUM_DOF};

#[derive(Debug, Clone, Copy)]
pub enum Mode<'a> {
    Eval,
    /// Batch statistics for batch-norm. `dropout` holds per-unit scale
    /// factors (`0` or `1/(1−rate)`) for the last hidden state, `batch × hidden`;
    /// `None` disables dropout.
    Train { dropout: Option<&'a [f64]> },
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
struct Cache {
    xcol: Vec<f64>,
    xhat: Vec<f64>,
    pre_relu: Vec<f64>,
    act: Vec<f64>,
    inv_std: Vec<f64>,
    gates_r: Vec<f64>,
    gates_z: Vec<f64>,
    gates_n: Vec<f64>,
    reset_h: Vec<f64>,
    hidden: Vec<f64>,
    dropout: Option<Vec<f64>>,
    dropped: Vec<f64>,
    fc1_pre: Vec<f64>,
    fc1_act: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BatchOutput {
    pub batch: usize,
    /// `batch × 6` sigmoid outputs.
    pub probs: Vec<f64>,
    /// Per-channel batch mean and unbiased variance of the convolution output
    /// (train mode only), for the running-statistics update.
    pub bn_batch_mean: Vec<f64>,
    pub bn_batch_var: Vec<f64>,
    cache: Option<Cache>,
}

impl BatchOutput {
    pub fn example(&self, b: usize) -> [f64; NUM_DOF] {
        std::array::from_fn(|d| self.probs[b * NUM_DOF + d])
    }

    /// Mean per-DOF binary cross-entropy over the batch.
    pub fn loss(&self, targets: &[GestureLabel]) -> f64 {
        let mut total = 0.0;
        for (b, y) in targets.iter().enumerate().take(self.batch) {
            for d in 0..NUM_DOF {
                total += bce(self.probs[b * NUM_DOF + d], y.is_flexed(d));
            }
        }
        total / (self.batch * NUM_DOF) as f64
    }
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub weights: Weights,
    pub loss: f64,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn check_finite(v: &[f64], layer: &'static str) -> Result<(), ModelError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(ModelError::Numeric { layer })
    }
}

pub(crate) fn forward(
    params: &ModelParams,
    input: &[f64],
    batch: usize,
    mode: Mode<'_>,
) -> Result<BatchOutput, ModelError> {
    let cfg = &params.config;
    let w = &params.weights;
    let (rows, steps) = (cfg.input_rows, cfg.steps);
    let (oc, k, h, f) = (cfg.conv_out, cfg.conv_kernel, cfg.gru_hidden, cfg.fc_hidden);
    if batch == 0 || input.len() != batch * steps * rows {
        return Err(ModelError::Config(format!(
            "input of {} values does not match batch {batch} x {steps} x {rows}",
            input.len()
        )));
    }
    let bt = batch * steps;
    let kr = k * rows;
    let pad = (k - 1) / 2;
    let train = matches!(mode, Mode::Train { .. });

    // im2col: row (b, t) holds steps t−pad .. t−pad+k−1, zero outside.
    let mut xcol = vec![0.0; bt * kr];
    for b in 0..batch {
        for t in 0..steps {
            let dst = &mut xcol[(b * steps + t) * kr..][..kr];
            for j in 0..k {
                let src = t as isize + j as isize - pad as isize;
                if (0..steps as isize).contains(&src) {
                    let s = (b * steps + src as usize) * rows;
                    dst[j * rows..(j + 1) * rows].copy_from_slice(&input[s..s + rows]);
                }
            }
        }
    }
    let mut conv = vec![0.0; bt * oc];
    gemm(
        1.0,
        View::new(&xcol, bt, kr),
        View::new(&w.conv_w, oc, kr).t(),
        0.0,
        &mut conv,
        oc,
    );
    check_finite(&conv, "convolution")?;

    // Batch-norm over (batch, time) per channel.
    let (mean, var_biased) = if train {
        let n = bt as f64;
        let mut mean = vec![0.0; oc];
        for row in conv.chunks_exact(oc) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; oc];
        for row in conv.chunks_exact(oc) {
            for c in 0..oc {
                let d = row[c] - mean[c];
                var[c] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= n);
        (mean, var)
    } else {
        (params.bn.mean.clone(), params.bn.var.clone())
    };
    let inv_std: Vec<f64> = var_biased.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = conv;
    let mut pre_relu = vec![0.0; bt * oc];
    let mut act = vec![0.0; bt * oc];
    for i in 0..bt {
        for c in 0..oc {
            let j = i * oc + c;
            xhat[j] = (xhat[j] - mean[c]) * inv_std[c];
            let y = w.bn_gamma[c] * xhat[j] + w.bn_beta[c];
            pre_relu[j] = y;
            act[j] = y.max(0.0);
        }
    }

    // GRU input projections for every (b, t), bias included.
    let h3 = 3 * h;
    let mut gi = vec![0.0; bt * h3];
    for row in gi.chunks_exact_mut(h3) {
        row.copy_from_slice(&w.gru_b);
    }
    gemm(
        1.0,
        View::new(&act, bt, oc),
        View::new(&w.gru_wi, h3, oc).t(),
        1.0,
        &mut gi,
        h3,
    );

    let bh = batch * h;
    let mut hidden = vec![0.0; (steps + 1) * bh];
    let (mut gates_r, mut gates_z, mut gates_n, mut reset_h) = if train {
        (
            vec![0.0; steps * bh],
            vec![0.0; steps * bh],
            vec![0.0; steps * bh],
            vec![0.0; steps * bh],
        )
    } else {
        (vec![0.0; bh], vec![0.0; bh], vec![0.0; bh], vec![0.0; bh])
    };
    let wh_rz = &w.gru_wh[..2 * h * h];
    let wh_n = &w.gru_wh[2 * h * h..];
    let mut gh_rz = vec![0.0; batch * 2 * h];
    let mut gh_n = vec![0.0; bh];
    for t in 0..steps {
        let (prev_all, next_all) = hidden.split_at_mut((t + 1) * bh);
        let prev = &prev_all[t * bh..];
        let next = &mut next_all[..bh];
        let off = if train { t * bh } else { 0 };
        gemm(
            1.0,
            View::new(prev, batch, h),
            View::new(wh_rz, 2 * h, h).t(),
            0.0,
            &mut gh_rz,
            2 * h,
        );
        let r = &mut gates_r[off..off + bh];
        let z = &mut gates_z[off..off + bh];
        let rh = &mut reset_h[off..off + bh];
        for b in 0..batch {
            let g = &gi[(b * steps + t) * h3..][..h3];
            let ghr = &gh_rz[b * 2 * h..][..2 * h];
            for u in 0..h {
                let i = b * h + u;
                r[i] = sigmoid(g[u] + ghr[u]);
                z[i] = sigmoid(g[h + u] + ghr[h + u]);
                rh[i] = r[i] * prev[i];
            }
        }
        gemm(
            1.0,
            View::new(rh, batch, h),
            View::new(wh_n, h, h).t(),
            0.0,
            &mut gh_n,
            h,
        );
        let n = &mut gates_n[off..off + bh];
        for b in 0..batch {
            let g = &gi[(b * steps + t) * h3..][..h3];
            for u in 0..h {
                let i = b * h + u;
                n[i] = (g[2 * h + u] + gh_n[i]).tanh();
                next[i] = (1.0 - z[i]) * n[i] + z[i] * prev[i];
            }
        }
    }
    let last = &hidden[steps * bh..];
    check_finite(last, "gru")?;

    let dropout = match mode {
        Mode::Train { dropout: Some(m) } => {
            if m.len() != bh {
                return Err(ModelError::Config("dropout mask has wrong size".into()));
            }
            Some(m.to_vec())
        }
        _ => None,
    };
    let dropped: Vec<f64> = match &dropout {
        Some(m) => last.iter().zip(m).map(|(a, s)| a * s).collect(),
        None => last.to_vec(),
    };

    let mut fc1_pre = vec![0.0; batch * f];
    for row in fc1_pre.chunks_exact_mut(f) {
        row.copy_from_slice(&w.fc1_b);
    }
    gemm(
        1.0,
        View::new(&dropped, batch, h),
        View::new(&w.fc1_w, f, h).t(),
        1.0,
        &mut fc1_pre,
        f,
    );
    let fc1_act: Vec<f64> = fc1_pre.iter().map(|v| v.max(0.0)).collect();
    let mut logits = vec![0.0; batch * NUM_DOF];
    for row in logits.chunks_exact_mut(NUM_DOF) {
        row.copy_from_slice(&w.fc2_b);
    }
    gemm(
        1.0,
        View::new(&fc1_act, batch, f),
        View::new(&w.fc2_w, NUM_DOF, f).t(),
        1.0,
        &mut logits,
        NUM_DOF,
    );
    check_finite(&logits, "output")?;
    let probs: Vec<f64> = logits.iter().map(|&x| sigmoid(x)).collect();

    let (bn_batch_mean, bn_batch_var) = if train {
        let n = bt as f64;
        let unbiased = if bt > 1 { n / (n - 1.0) } else { 1.0 };
        let v = var_biased.iter().map(|v| v * unbiased).collect();
        (mean, v)
    } else {
        (Vec::new(), Vec::new())
    };

    Ok(BatchOutput {
        batch,
        probs,
        bn_batch_mean,
        bn_batch_var,
        cache: train.then_some(Cache {
            xcol,
            xhat,
            pre_relu,
            act,
            inv_std,
            gates_r,
            gates_z,
            gates_n,
            reset_h,
            hidden,
            dropout,
            dropped,
            fc1_pre,
            fc1_act,
        }),
    })
}

/// Gradients of the mean batch loss with respect to every weight.
pub(crate) fn backward(
    params: &ModelParams,
    out: &BatchOutput,
    targets: &[GestureLabel],
) -> Result<Gradients, ModelError> {
    let cache = out
        .cache
        .as_ref()
        .ok_or_else(|| ModelError::Config("backward needs a train-mode forward pass".into()))?;
    let cfg = &params.config;
    let w = &params.weights;
    let batch = out.batch;
    if targets.len() != batch {
        return Err(ModelError::Config("target count differs from batch size".into()));
    }
    let (rows, steps) = (cfg.input_rows, cfg.steps);
    let (oc, k, h, f) = (cfg.conv_out, cfg.conv_kernel, cfg.gru_hidden, cfg.fc_hidden);
    let (bt, kr, bh, h3) = (batch * steps, k * rows, batch * h, 3 * h);
    let mut g = Weights::zeros(cfg);

    // d loss / d logit for sigmoid + clamped BCE.
    let scale = 1.0 / (batch * NUM_DOF) as f64;
    let mut dlogits = vec![0.0; batch * NUM_DOF];
    for b in 0..batch {
        for d in 0..NUM_DOF {
            let p = out.probs[b * NUM_DOF + d];
            if (P_CLAMP..=1.0 - P_CLAMP).contains(&p) {
                let y = if targets[b].is_flexed(d) { 1.0 } else { 0.0 };
                dlogits[b * NUM_DOF + d] = (p - y) * scale;
            }
        }
    }

    gemm(
        1.0,
        View::new(&dlogits, batch, NUM_DOF).t(),
        View::new(&cache.fc1_act, batch, f),
        0.0,
        &mut g.fc2_w,
        f,
    );
    for row in dlogits.chunks_exact(NUM_DOF) {
        g.fc2_b.iter_mut().zip(row).for_each(|(a, v)| *a += v);
    }
    let mut dfc1 = vec![0.0; batch * f];
    gemm(
        1.0,
        View::new(&dlogits, batch, NUM_DOF),
        View::new(&w.fc2_w, NUM_DOF, f),
        0.0,
        &mut dfc1,
        f,
    );
    for (d, &pre) in dfc1.iter_mut().zip(&cache.fc1_pre) {
        if pre <= 0.0 {
            *d = 0.0;
        }
    }
    gemm(
        1.0,
        View::new(&dfc1, batch, f).t(),
        View::new(&cache.dropped, batch, h),
        0.0,
        &mut g.fc1_w,
        h,
    );
    for row in dfc1.chunks_exact(f) {
        g.fc1_b.iter_mut().zip(row).for_each(|(a, v)| *a += v);
    }
    let mut dh = vec![0.0; bh];
    gemm(
        1.0,
        View::new(&dfc1, batch, f),
        View::new(&w.fc1_w, f, h),
        0.0,
        &mut dh,
        h,
    );
    if let Some(m) = &cache.dropout {
        dh.iter_mut().zip(m).for_each(|(d, s)| *d *= s);
    }

    // Backpropagation through time.
    let wh_rz = &w.gru_wh[..2 * h * h];
    let wh_n = &w.gru_wh[2 * h * h..];
    let (gwh_rz, gwh_n) = g.gru_wh.split_at_mut(2 * h * h);
    let mut dgi = vec![0.0; bt * h3];
    let mut dn_pre = vec![0.0; bh];
    let mut drz_pre = vec![0.0; batch * 2 * h];
    let mut d_rh = vec![0.0; bh];
    let mut dh_prev = vec![0.0; bh];
    for t in (0..steps).rev() {
        let prev = &cache.hidden[t * bh..(t + 1) * bh];
        let off = t * bh;
        let r = &cache.gates_r[off..off + bh];
        let z = &cache.gates_z[off..off + bh];
        let n = &cache.gates_n[off..off + bh];
        let rh = &cache.reset_h[off..off + bh];
        for i in 0..bh {
            dn_pre[i] = dh[i] * (1.0 - z[i]) * (1.0 - n[i] * n[i]);
            dh_prev[i] = dh[i] * z[i];
        }
        // candidate: pre = Wi_n x + b_n + Wh_n (r ⊙ h)
        gemm(
            1.0,
            View::new(&dn_pre, batch, h).t(),
            View::new(rh, batch, h),
            1.0,
            gwh_n,
            h,
        );
        gemm(
            1.0,
            View::new(&dn_pre, batch, h),
            View::new(wh_n, h, h),
            0.0,
            &mut d_rh,
            h,
        );
        for b in 0..batch {
            let dg = &mut dgi[(b * steps + t) * h3..][..h3];
            for u in 0..h {
                let i = b * h + u;
                let dz = dh[i] * (prev[i] - n[i]);
                let dr = d_rh[i] * prev[i];
                dh_prev[i] += d_rh[i] * r[i];
                let dr_pre = dr * r[i] * (1.0 - r[i]);
                let dz_pre = dz * z[i] * (1.0 - z[i]);
                drz_pre[b * 2 * h + u] = dr_pre;
                drz_pre[b * 2 * h + h + u] = dz_pre;
                dg[u] = dr_pre;
                dg[h + u] = dz_pre;
                dg[2 * h + u] = dn_pre[i];
            }
        }
        gemm(
            1.0,
            View::new(&drz_pre, batch, 2 * h).t(),
            View::new(prev, batch, h),
            1.0,
            gwh_rz,
            h,
        );
        gemm(
            1.0,
            View::new(&drz_pre, batch, 2 * h),
            View::new(wh_rz, 2 * h, h),
            1.0,
            &mut dh_prev,
            h,
        );
        std::mem::swap(&mut dh, &mut dh_prev);
    }

    gemm(
        1.0,
        View::new(&dgi, bt, h3).t(),
        View::new(&cache.act, bt, oc),
        0.0,
        &mut g.gru_wi,
        oc,
    );
    for row in dgi.chunks_exact(h3) {
        g.gru_b.iter_mut().zip(row).for_each(|(a, v)| *a += v);
    }
    let mut dact = vec![0.0; bt * oc];
    gemm(
        1.0,
        View::new(&dgi, bt, h3),
        View::new(&w.gru_wi, h3, oc),
        0.0,
        &mut dact,
        oc,
    );

    // ReLU then batch-norm (batch statistics).
    let nf = bt as f64;
    let mut sum_dxhat = vec![0.0; oc];
    let mut sum_dxhat_xhat = vec![0.0; oc];
    for i in 0..bt {
        for c in 0..oc {
            let j = i * oc + c;
            if cache.pre_relu[j] <= 0.0 {
                dact[j] = 0.0;
            }
            let dy = dact[j];
            g.bn_gamma[c] += dy * cache.xhat[j];
            g.bn_beta[c] += dy;
            let dxh = dy * w.bn_gamma[c];
            sum_dxhat[c] += dxh;
            sum_dxhat_xhat[c] += dxh * cache.xhat[j];
        }
    }
    let mut dconv = dact;
    for i in 0..bt {
        for c in 0..oc {
            let j = i * oc + c;
            let dxh = dconv[j] * w.bn_gamma[c];
            dconv[j] = cache.inv_std[c] / nf
                * (nf * dxh - sum_dxhat[c] - cache.xhat[j] * sum_dxhat_xhat[c]);
        }
    }
    gemm(
        1.0,
        View::new(&dconv, bt, oc).t(),
        View::new(&cache.xcol, bt, kr),
        0.0,
        &mut g.conv_w,
        kr,
    );

    if !g.is_finite() {
        return Err(ModelError::Numeric { layer: "gradient" });
    }
    Ok(Gradients {
        weights: g,
        loss: out.loss(targets),
    })
}

/// Forward and backward in one call.
pub fn loss_and_gradients(
    params: &ModelParams,
    input: &[f64],
    targets: &[GestureLabel],
    dropout: Option<&[f64]>,
) -> Result<(Gradients, BatchOutput), ModelError> {
    let out = forward(params, input, targets.len(), Mode::Train { dropout })?;
    let g = backward(params, &out, targets)?;
    Ok((g, out))
}
