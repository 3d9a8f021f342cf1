//! Adam training with a plateau schedule, and multi-seed restarts.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::net::{backward, forward, Mode};
use super::{threshold, BnStats, ModelError, ModelParams, Weights};
use crate::label::{GestureLabel, NUM_DOF};
use crate::metrics::{self, ConfusionCounts};
use crate::par::Exec;

const STREAM_INIT: u64 = 0;
const STREAM_SHUFFLE: u64 = 1;
const STREAM_DROPOUT: u64 = 2;

/// Examples used for training and evaluation. Inputs are written time-major,
/// `[steps × rows]`, already normalized.
pub trait Examples: Sync {
    fn len(&self) -> usize;
    fn rows(&self) -> usize;
    fn steps(&self) -> usize;
    fn fill_input(&self, i: usize, out: &mut [f64]);
    fn target(&self, i: usize) -> GestureLabel;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub lr0: f64,
    pub max_epochs: usize,
    pub plateau_epochs: usize,
    pub lr_drop_factor: f64,
    /// Relative improvement needed for an epoch to count as progress.
    pub plateau_threshold: f64,
    pub seeds: Vec<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            beta1: 0.99,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
            batch_size: 64,
            lr0: 1e-4,
            max_epochs: 5,
            plateau_epochs: 2,
            lr_drop_factor: 10.0,
            plateau_threshold: 1e-4,
            seeds: vec![1],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let open_unit = |v: f64| v > 0.0 && v < 1.0;
        if !open_unit(self.beta1) || !open_unit(self.beta2) {
            return Err(ModelError::Config("beta1 and beta2 must lie in (0, 1)".into()));
        }
        if !(self.lr0 >= 0.0) || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(ModelError::Config(
                "need lr0 ≥ 0, batch size > 0 and at least one epoch".into(),
            ));
        }
        if !(self.lr_drop_factor > 0.0) || self.plateau_epochs == 0 {
            return Err(ModelError::Config("invalid plateau schedule".into()));
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    m: Weights,
    v: Weights,
    t: u64,
}

impl Adam {
    pub fn new(template: &Weights, cfg: &TrainConfig) -> Self {
        let mut m = template.clone();
        for t in m.tensors_mut() {
            t.iter_mut().for_each(|v| *v = 0.0);
        }
        Adam {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            v: m.clone(),
            m,
            t: 0,
        }
    }

    pub fn step(&mut self, w: &mut Weights, g: &Weights, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (self.beta1, self.beta2);
        for (((w, g), m), v) in w
            .tensors_mut()
            .into_iter()
            .zip(g.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
        {
            for i in 0..w.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                w[i] *= 1.0 - lr * self.weight_decay;
                w[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: Vec<EpochRecord>,
    /// Epochs (1-based) after which the learning rate was divided.
    pub lr_drops: Vec<usize>,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> f64 {
        self.history.last().map_or(f64::NAN, |e| e.loss)
    }
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn check_data(template: &ModelParams, data: &dyn Examples) -> Result<(), ModelError> {
    if data.is_empty() {
        return Err(ModelError::Config("empty training set".into()));
    }
    if data.rows() != template.config.input_rows || data.steps() != template.config.steps {
        return Err(ModelError::Config(format!(
            "examples are {}x{}, model expects {}x{}",
            data.rows(),
            data.steps(),
            template.config.input_rows,
            template.config.steps
        )));
    }
    Ok(())
}

/// Trains from a fresh initialization drawn from `seed`. Initialization,
/// shuffling and dropout each use their own stream of that seed.
pub fn train(
    template: &ModelParams,
    data: &dyn Examples,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome, ModelError> {
    let mut start = template.clone();
    start.weights = Weights::init(&start.config, &mut rng(seed, STREAM_INIT));
    start.bn = BnStats::new(start.config.conv_out);
    fit(start, data, cfg, seed)
}

/// Continues training from the current weights of `model`.
pub fn fine_tune(
    model: &ModelParams,
    data: &dyn Examples,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome, ModelError> {
    fit(model.clone(), data, cfg, seed)
}

fn fit(
    start: ModelParams,
    data: &dyn Examples,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome, ModelError> {
    cfg.validate()?;
    check_data(&start, data)?;
    let mut shuffle = rng(seed, STREAM_SHUFFLE);
    let orders: Vec<Vec<usize>> = (0..cfg.max_epochs)
        .map(|_| {
            let mut idx: Vec<usize> = (0..data.len()).collect();
            idx.shuffle(&mut shuffle);
            idx
        })
        .collect();
    train_with_schedule(start, data, cfg, seed, &orders)
}

/// Runs `orders.len()` epochs, consuming examples in the given order.
pub fn train_with_schedule(
    start: ModelParams,
    data: &dyn Examples,
    cfg: &TrainConfig,
    seed: u64,
    orders: &[Vec<usize>],
) -> Result<TrainOutcome, ModelError> {
    cfg.validate()?;
    check_data(&start, data)?;
    let mut params = start;
    let mcfg = params.config;
    let per_example = mcfg.steps * mcfg.input_rows;
    let mut dropout_rng = rng(seed, STREAM_DROPOUT);
    let mut adam = Adam::new(&params.weights, cfg);
    let mut lr = cfg.lr0;
    let mut best = f64::INFINITY;
    let mut stale = 0usize;
    let mut history = Vec::with_capacity(orders.len());
    let mut lr_drops = Vec::new();
    let mut input = Vec::new();
    let mut mask = Vec::new();

    for (e, order) in orders.iter().enumerate() {
        let epoch_lr = lr;
        let mut total = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let b = chunk.len();
            input.resize(b * per_example, 0.0);
            for (j, &i) in chunk.iter().enumerate() {
                data.fill_input(i, &mut input[j * per_example..(j + 1) * per_example]);
            }
            let targets: Vec<GestureLabel> = chunk.iter().map(|&i| data.target(i)).collect();
            let drop = if mcfg.dropout_rate > 0.0 {
                let keep = 1.0 - mcfg.dropout_rate;
                mask.clear();
                mask.extend((0..b * mcfg.gru_hidden).map(|_| {
                    if dropout_rng.gen::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                }));
                Some(mask.as_slice())
            } else {
                None
            };
            let out = forward(&params, &input, b, Mode::Train { dropout: drop })?;
            let grads = backward(&params, &out, &targets)?;
            params.bn.update(&out.bn_batch_mean, &out.bn_batch_var);
            adam.step(&mut params.weights, &grads.weights, lr);
            if !params.weights.is_finite() {
                return Err(ModelError::Numeric { layer: "optimizer step" });
            }
            total += grads.loss * b as f64;
            seen += b;
        }
        let loss = total / seen as f64;
        history.push(EpochRecord {
            epoch: e + 1,
            loss,
            lr: epoch_lr,
        });
        if loss < best * (1.0 - cfg.plateau_threshold) {
            best = loss;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.plateau_epochs {
                lr /= cfg.lr_drop_factor;
                lr_drops.push(e + 1);
                stale = 0;
            }
        }
    }
    params.meta.seed = seed;
    params.meta.epochs = orders.len() as u32;
    params.meta.final_loss = history.last().map_or(f64::NAN, |h| h.loss);
    Ok(TrainOutcome {
        params,
        history,
        lr_drops,
    })
}

const EVAL_CHUNK: usize = 64;

/// Eval-mode probabilities for every example, in order.
pub fn predict_probabilities(
    params: &ModelParams,
    data: &dyn Examples,
    exec: Exec,
) -> Result<Vec<[f64; NUM_DOF]>, ModelError> {
    if data.rows() != params.config.input_rows || data.steps() != params.config.steps {
        return Err(ModelError::Config("examples do not match the model input".into()));
    }
    let per_example = data.rows() * data.steps();
    let chunks = data.len().div_ceil(EVAL_CHUNK);
    let parts = exec.map_range(chunks, |c| {
        let lo = c * EVAL_CHUNK;
        let hi = (lo + EVAL_CHUNK).min(data.len());
        let mut input = vec![0.0; (hi - lo) * per_example];
        for (j, i) in (lo..hi).enumerate() {
            data.fill_input(i, &mut input[j * per_example..(j + 1) * per_example]);
        }
        let out = forward(params, &input, hi - lo, Mode::Eval)?;
        Ok::<_, ModelError>((0..hi - lo).map(|b| out.example(b)).collect::<Vec<_>>())
    });
    let mut all = Vec::with_capacity(data.len());
    for p in parts {
        all.extend(p?);
    }
    Ok(all)
}

/// Thresholded predictions scored against the example targets.
pub fn evaluate(
    params: &ModelParams,
    data: &dyn Examples,
    exec: Exec,
) -> Result<ConfusionCounts, ModelError> {
    let probs = predict_probabilities(params, data, exec)?;
    let mut c = ConfusionCounts::default();
    for (i, p) in probs.iter().enumerate() {
        c.add(threshold(p), data.target(i));
    }
    Ok(c)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub final_loss: f64,
    pub mean_balanced_accuracy: f64,
}

/// Trains one model per seed and keeps the one with the best mean balanced
/// accuracy on `validation`; ties go to the lowest seed.
pub fn multi_seed_train(
    template: &ModelParams,
    train_set: &dyn Examples,
    validation: &dyn Examples,
    cfg: &TrainConfig,
    exec: Exec,
) -> Result<(ModelParams, Vec<SeedReport>), ModelError> {
    if cfg.seeds.is_empty() {
        return Err(ModelError::Config("no seeds given".into()));
    }
    let runs = exec.map(&cfg.seeds, |&seed| {
        let mut out = train(template, train_set, cfg, seed)?;
        out.params.snap_to_f32();
        let counts = evaluate(&out.params, validation, Exec::Sequential)?;
        let acc = metrics::mean_balanced_accuracy(&metrics::balanced_accuracy(&counts))
            .unwrap_or(f64::NAN);
        out.params.meta.validation_accuracy = acc;
        Ok::<_, ModelError>((out, acc))
    });
    let mut best: Option<(ModelParams, f64)> = None;
    let mut reports = Vec::with_capacity(runs.len());
    for run in runs {
        let (out, acc) = run?;
        reports.push(SeedReport {
            seed: out.params.meta.seed,
            final_loss: out.final_loss(),
            mean_balanced_accuracy: acc,
        });
        let better = match &best {
            None => true,
            Some((b, b_acc)) => {
                let a = if acc.is_nan() { f64::NEG_INFINITY } else { acc };
                let ba = if b_acc.is_nan() { f64::NEG_INFINITY } else { *b_acc };
                a > ba || (a == ba && out.params.meta.seed < b.meta.seed)
            }
        };
        if better {
            best = Some((out.params, acc));
        }
    }
    Ok((best.expect("at least one seed").0, reports))
}
