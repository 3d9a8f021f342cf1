//! Straight-line reference implementations shared by the integration tests.
//! They follow the written definitions directly and share no code with the
//! library beyond its data types.

#![allow(dead_code)]

use neurodecode::features::FeatureThresholds;
use neurodecode::model::{Examples, ModelConfig, ModelParams};
use neurodecode::{GestureLabel, NUM_DOF};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn uniform(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

pub fn mean_abs(x: &[f64]) -> f64 {
    x.iter().map(|v| v.abs()).sum::<f64>() / x.len() as f64
}

/// The 14 features, one loop per definition.
pub fn brute_features(x: &[f64], th: &FeatureThresholds) -> [f64; 14] {
    let n = x.len();
    let nf = n as f64;
    let mut zc = 0.0;
    for i in 0..n - 1 {
        if x[i] * x[i + 1] < 0.0 && (x[i] - x[i + 1]).abs() >= th.zc {
            zc += 1.0;
        }
    }
    let mut ssc = 0.0;
    for i in 1..n - 1 {
        if (x[i] - x[i - 1]) * (x[i] - x[i + 1]) >= th.ssc {
            ssc += 1.0;
        }
    }
    let mut wl = 0.0;
    for i in 0..n - 1 {
        wl += (x[i + 1] - x[i]).abs();
    }
    let mut wa = 0.0;
    for i in 0..n - 1 {
        if (x[i + 1] - x[i]).abs() > th.wamp {
            wa += 1.0;
        }
    }
    let mab = mean_abs(x);
    let msq = x.iter().map(|v| v * v).sum::<f64>() / nf;
    let rms = msq.sqrt();
    let v3 = (x.iter().map(|v| v.abs().powi(3)).sum::<f64>() / nf).cbrt();
    let ld = (x.iter().map(|v| (v.abs() + th.log_eps).ln()).sum::<f64>() / nf).exp();
    let mut d2 = 0.0;
    for i in 0..n - 1 {
        d2 += (x[i + 1] - x[i]).powi(2);
    }
    let dabs = (d2 / (nf - 1.0)).sqrt();
    let mfl = (d2.sqrt() + th.log_eps).log10();
    let mpr = x.iter().filter(|v| v.abs() >= th.mpr).count() as f64 / nf;
    let mavs = mean_abs(&x[n / 2..]) - mean_abs(&x[..n / 2]);
    let mut wma = 0.0;
    for (i, v) in x.iter().enumerate() {
        let fi = i as f64;
        let w = if fi >= 0.25 * nf && fi < 0.75 * nf { 1.0 } else { 0.5 };
        wma += w * v.abs();
    }
    [zc, ssc, wl, wa, mab, msq, rms, v3, ld, dabs, mfl, mpr, mavs, wma / nf]
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Eval-mode forward for a single time-major `[steps × rows]` input.
pub fn naive_forward(p: &ModelParams, input: &[f64]) -> [f64; NUM_DOF] {
    let c = &p.config;
    let w = &p.weights;
    let (rows, steps, oc, k, h, f) = (c.input_rows, c.steps, c.conv_out, c.conv_kernel, c.gru_hidden, c.fc_hidden);
    let pad = (k - 1) as isize / 2;
    let x = |t: isize, r: usize| -> f64 {
        if t < 0 || t >= steps as isize {
            0.0
        } else {
            input[t as usize * rows + r]
        }
    };
    let mut act = vec![vec![0.0; oc]; steps];
    for t in 0..steps {
        for o in 0..oc {
            let mut s = 0.0;
            for j in 0..k {
                for r in 0..rows {
                    s += w.conv_w[(o * k + j) * rows + r] * x(t as isize + j as isize - pad, r);
                }
            }
            let bn = (s - p.bn.mean[o]) / (p.bn.var[o] + 1e-5).sqrt() * w.bn_gamma[o] + w.bn_beta[o];
            act[t][o] = bn.max(0.0);
        }
    }
    let mut hs = vec![0.0; h];
    for a in act.iter() {
        let row = |m: &[f64], g: usize, u: usize, v: &[f64]| -> f64 {
            let cols = v.len();
            (0..cols).map(|i| m[(g * h + u) * cols + i] * v[i]).sum()
        };
        let mut next = vec![0.0; h];
        let mut r = vec![0.0; h];
        for u in 0..h {
            r[u] = sigmoid(row(&w.gru_wi, 0, u, a) + row(&w.gru_wh, 0, u, &hs) + w.gru_b[u]);
        }
        let rh: Vec<f64> = (0..h).map(|u| r[u] * hs[u]).collect();
        for u in 0..h {
            let z = sigmoid(row(&w.gru_wi, 1, u, a) + row(&w.gru_wh, 1, u, &hs) + w.gru_b[h + u]);
            let n = (row(&w.gru_wi, 2, u, a) + row(&w.gru_wh, 2, u, &rh) + w.gru_b[2 * h + u]).tanh();
            next[u] = (1.0 - z) * n + z * hs[u];
        }
        hs = next;
    }
    let mut fc1 = vec![0.0; f];
    for (i, v) in fc1.iter_mut().enumerate() {
        let s: f64 = (0..h).map(|u| w.fc1_w[i * h + u] * hs[u]).sum::<f64>() + w.fc1_b[i];
        *v = s.max(0.0);
    }
    std::array::from_fn(|d| sigmoid((0..f).map(|i| w.fc2_w[d * f + i] * fc1[i]).sum::<f64>() + w.fc2_b[d]))
}

pub fn naive_loss(p: &[f64; NUM_DOF], y: GestureLabel) -> f64 {
    let mut s = 0.0;
    for d in 0..NUM_DOF {
        let q = p[d].clamp(1e-7, 1.0 - 1e-7);
        s -= if y.is_flexed(d) { q.ln() } else { (1.0 - q).ln() };
    }
    s / NUM_DOF as f64
}

pub fn tiny_config(channels: usize, steps: usize) -> ModelConfig {
    ModelConfig {
        input_rows: channels * 14,
        steps,
        conv_out: 6,
        conv_kernel: 3,
        gru_hidden: 8,
        fc_hidden: 5,
        outputs: NUM_DOF,
        dropout_rate: 0.5,
    }
}

/// Random model with perturbed batch-norm statistics and nonzero biases.
pub fn random_params(cfg: ModelConfig, channels: usize, seed: u64) -> ModelParams {
    let mut p = ModelParams::new(cfg, channels, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    for t in p.weights.tensors_mut() {
        for v in t.iter_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
    for (m, v) in p.bn.mean.iter_mut().zip(p.bn.var.iter_mut()) {
        *m = rng.gen_range(-0.5..0.5);
        *v = rng.gen_range(0.5..2.0);
    }
    p
}

/// In-memory examples for model tests.
pub struct Toy {
    pub rows: usize,
    pub steps: usize,
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<GestureLabel>,
}

impl Examples for Toy {
    fn len(&self) -> usize {
        self.inputs.len()
    }
    fn rows(&self) -> usize {
        self.rows
    }
    fn steps(&self) -> usize {
        self.steps
    }
    fn fill_input(&self, i: usize, out: &mut [f64]) {
        out.copy_from_slice(&self.inputs[i]);
    }
    fn target(&self, i: usize) -> GestureLabel {
        self.targets[i]
    }
}

/// Two gestures told apart by the sign of the first row's mean, plus noise.
pub fn separable(seed: u64, n: usize, rows: usize, steps: usize) -> Toy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a: GestureLabel = "100000".parse().unwrap();
    let b: GestureLabel = "010001".parse().unwrap();
    let mut inputs = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for i in 0..n {
        let pos = i % 2 == 0;
        let shift = if pos { 1.0 } else { -1.0 };
        let x: Vec<f64> = (0..rows * steps)
            .map(|j| rng.gen_range(-1.0..1.0) + if j % rows < rows / 2 { shift } else { 0.0 })
            .collect();
        inputs.push(x);
        targets.push(if pos { a } else { b });
    }
    Toy { rows, steps, inputs, targets }
}
