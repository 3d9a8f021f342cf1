//! Convolution + GRU multi-label classifier.
//!
//! Input is a feature tensor scanned over time: a same-padded temporal
//! convolution, batch-norm, ReLU, a single GRU layer whose last hidden state
//! goes through dropout, a ReLU hidden layer, and a sigmoid output per DOF.

mod checkpoint;
mod gemm;
mod net;
mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::features::{FeatureThresholds, FeatureWindowSpec, NormStats};
use crate::label::{GestureLabel, NUM_DOF};
use crate::sigproc::BandSpec;

pub use checkpoint::{CheckpointError, Fingerprint, CHECKPOINT_VERSION};
pub use net::{loss_and_gradients, BatchOutput, Gradients, Mode};
pub use train::{
    evaluate, fine_tune, multi_seed_train, predict_probabilities, train, train_with_schedule,
    Adam, EpochRecord, Examples, SeedReport, TrainConfig, TrainOutcome,
};

/// Probabilities are clamped to `[P_CLAMP, 1 − P_CLAMP]` before taking logs.
pub const P_CLAMP: f64 = 1e-7;
pub const DECISION_THRESHOLD: f64 = 0.5;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("non-finite value in {layer}")]
    Numeric { layer: &'static str },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub input_rows: usize,
    pub steps: usize,
    pub conv_out: usize,
    pub conv_kernel: usize,
    pub gru_hidden: usize,
    pub fc_hidden: usize,
    pub outputs: usize,
    pub dropout_rate: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_rows: 224,
            steps: 50,
            conv_out: 256,
            conv_kernel: 3,
            gru_hidden: 256,
            fc_hidden: 64,
            outputs: NUM_DOF,
            dropout_rate: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            self.input_rows,
            self.steps,
            self.conv_out,
            self.conv_kernel,
            self.gru_hidden,
            self.fc_hidden,
            self.outputs,
        ];
        if dims.contains(&0) {
            return Err(ModelError::Config("all layer sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ModelError::Config(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if self.outputs != NUM_DOF {
            return Err(ModelError::Config(format!(
                "{} outputs, the decoder has {NUM_DOF} DOF",
                self.outputs
            )));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        Weights::shapes(self)
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// Trainable tensors, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    /// `[conv_out, conv_kernel, input_rows]`
    pub conv_w: Vec<f64>,
    pub bn_gamma: Vec<f64>,
    pub bn_beta: Vec<f64>,
    /// `[3·hidden, conv_out]`, gate blocks ordered reset, update, candidate.
    pub gru_wi: Vec<f64>,
    /// `[3·hidden, hidden]`
    pub gru_wh: Vec<f64>,
    pub gru_b: Vec<f64>,
    pub fc1_w: Vec<f64>,
    pub fc1_b: Vec<f64>,
    pub fc2_w: Vec<f64>,
    pub fc2_b: Vec<f64>,
}

pub const WEIGHT_NAMES: [&str; 10] = [
    "conv_w", "bn_gamma", "bn_beta", "gru_wi", "gru_wh", "gru_b", "fc1_w", "fc1_b", "fc2_w",
    "fc2_b",
];

impl Weights {
    pub fn shapes(cfg: &ModelConfig) -> [(&'static str, Vec<usize>); 10] {
        let h3 = 3 * cfg.gru_hidden;
        [
            ("conv_w", vec![cfg.conv_out, cfg.conv_kernel, cfg.input_rows]),
            ("bn_gamma", vec![cfg.conv_out]),
            ("bn_beta", vec![cfg.conv_out]),
            ("gru_wi", vec![h3, cfg.conv_out]),
            ("gru_wh", vec![h3, cfg.gru_hidden]),
            ("gru_b", vec![h3]),
            ("fc1_w", vec![cfg.fc_hidden, cfg.gru_hidden]),
            ("fc1_b", vec![cfg.fc_hidden]),
            ("fc2_w", vec![cfg.outputs, cfg.fc_hidden]),
            ("fc2_b", vec![cfg.outputs]),
        ]
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        let [a, b, c, d, e, f, g, h, i, j] =
            Self::shapes(cfg).map(|(_, s)| vec![0.0; s.iter().product()]);
        Weights {
            conv_w: a,
            bn_gamma: b,
            bn_beta: c,
            gru_wi: d,
            gru_wh: e,
            gru_b: f,
            fc1_w: g,
            fc1_b: h,
            fc2_w: i,
            fc2_b: j,
        }
    }

    /// Uniform fan-in initialization: weights in `±1/√fan_in`, zero biases,
    /// batch-norm scale 1 and shift 0.
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let mut w = Self::zeros(cfg);
        let mut fill = |v: &mut [f64], fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            v.iter_mut().for_each(|x| *x = rng.gen_range(-bound..bound));
        };
        fill(&mut w.conv_w, cfg.input_rows * cfg.conv_kernel);
        fill(&mut w.gru_wi, cfg.conv_out);
        fill(&mut w.gru_wh, cfg.gru_hidden);
        fill(&mut w.fc1_w, cfg.gru_hidden);
        fill(&mut w.fc2_w, cfg.fc_hidden);
        w.bn_gamma.iter_mut().for_each(|g| *g = 1.0);
        w
    }

    pub fn tensors(&self) -> [&Vec<f64>; 10] {
        [
            &self.conv_w,
            &self.bn_gamma,
            &self.bn_beta,
            &self.gru_wi,
            &self.gru_wh,
            &self.gru_b,
            &self.fc1_w,
            &self.fc1_b,
            &self.fc2_w,
            &self.fc2_b,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 10] {
        [
            &mut self.conv_w,
            &mut self.bn_gamma,
            &mut self.bn_beta,
            &mut self.gru_wi,
            &mut self.gru_wh,
            &mut self.gru_b,
            &mut self.fc1_w,
            &mut self.fc1_b,
            &mut self.fc2_w,
            &mut self.fc2_b,
        ]
    }

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn scale_add(&mut self, alpha: f64, other: &Weights) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += alpha * y);
        }
    }

    pub fn snap_to_f32(&mut self) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v = f64::from(*v as f32));
        }
    }
}

/// Batch-norm running statistics, used in eval mode.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnStats {
    pub fn new(channels: usize) -> Self {
        BnStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    /// Exponential update from one training batch's statistics.
    pub fn update(&mut self, batch_mean: &[f64], batch_var_unbiased: &[f64]) {
        for (r, &m) in self.mean.iter_mut().zip(batch_mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        for (r, &v) in self.var.iter_mut().zip(batch_var_unbiased) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
        }
    }
}

/// Metadata recorded when a model is trained.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainMeta {
    pub seed: u64,
    pub epochs: u32,
    pub final_loss: f64,
    pub validation_accuracy: f64,
}

/// Everything needed to decode: network weights plus the frontend settings
/// and normalization captured at training time.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub weights: Weights,
    pub bn: BnStats,
    pub norm: NormStats,
    pub thresholds: FeatureThresholds,
    pub window: FeatureWindowSpec,
    pub band: BandSpec,
    pub channels: usize,
    pub meta: TrainMeta,
    pub fingerprint: Option<Fingerprint>,
}

impl ModelParams {
    pub fn new(config: ModelConfig, channels: usize, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        if channels * crate::features::NUM_FEATURES != config.input_rows {
            return Err(ModelError::Config(format!(
                "{channels} channels give {} rows, model expects {}",
                channels * crate::features::NUM_FEATURES,
                config.input_rows
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(ModelParams {
            weights: Weights::init(&config, &mut rng),
            bn: BnStats::new(config.conv_out),
            norm: NormStats::identity(config.input_rows),
            thresholds: FeatureThresholds::default(),
            window: FeatureWindowSpec::default(),
            band: BandSpec::default(),
            channels,
            meta: TrainMeta {
                seed,
                ..Default::default()
            },
            fingerprint: None,
            config,
        })
    }

    pub fn param_count(&self) -> usize {
        self.weights.len()
    }

    /// Batched forward pass over `batch` time-major `[steps × rows]` inputs.
    pub fn forward(
        &self,
        input: &[f64],
        batch: usize,
        mode: Mode<'_>,
    ) -> Result<BatchOutput, ModelError> {
        net::forward(self, input, batch, mode)
    }

    /// Gradients of the mean loss of a train-mode forward pass.
    pub fn backward(
        &self,
        out: &BatchOutput,
        targets: &[GestureLabel],
    ) -> Result<Gradients, ModelError> {
        net::backward(self, out, targets)
    }

    /// Eval-mode probabilities for one time-major `[steps × rows]` input.
    pub fn forward_eval(&self, input: &[f64]) -> Result<[f64; NUM_DOF], ModelError> {
        let out = net::forward(self, input, 1, Mode::Eval)?;
        Ok(std::array::from_fn(|d| out.probs[d]))
    }

    /// Rounds weights, running statistics and normalization to f32 so the
    /// in-memory model equals what a checkpoint stores.
    pub fn snap_to_f32(&mut self) {
        self.weights.snap_to_f32();
        for v in self.bn.mean.iter_mut().chain(self.bn.var.iter_mut()) {
            *v = f64::from(*v as f32);
        }
        self.norm.snap_to_f32();
    }

    pub fn save_checkpoint(&self) -> Vec<u8> {
        checkpoint::encode(self)
    }

    pub fn load_checkpoint(bytes: &[u8]) -> Result<Self, ModelError> {
        Ok(checkpoint::decode(bytes)?)
    }
}

/// Per-DOF binary cross-entropy, averaged over the DOF.
pub fn loss(probabilities: &[f64; NUM_DOF], target: GestureLabel) -> f64 {
    probabilities
        .iter()
        .enumerate()
        .map(|(d, &p)| bce(p, target.is_flexed(d)))
        .sum::<f64>()
        / NUM_DOF as f64
}

#[inline]
pub(crate) fn bce(p: f64, y: bool) -> f64 {
    let p = p.clamp(P_CLAMP, 1.0 - P_CLAMP);
    if y {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Bit `d` is set iff `p[d] ≥ 0.5`.
pub fn threshold(probabilities: &[f64; NUM_DOF]) -> GestureLabel {
    GestureLabel::from_bits(std::array::from_fn(|d| {
        probabilities[d] >= DECISION_THRESHOLD
    }))
}

/// One decoded frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub probabilities: [f64; NUM_DOF],
    pub label: GestureLabel,
    pub timestamp_us: u64,
    pub feature_us: u32,
    pub decode_us: u32,
}

impl Prediction {
    pub fn new(probabilities: [f64; NUM_DOF], timestamp_us: u64) -> Self {
        Prediction {
            label: threshold(&probabilities),
            probabilities,
            timestamp_us,
            feature_us: 0,
            decode_us: 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_parameter_count_is_in_range() {
        let n = ModelConfig::default().param_count();
        assert_eq!(n, 583_366);
        assert!((0.5e6..1.7e6).contains(&(n as f64)));
        let p = ModelParams::new(ModelConfig::default(), 16, 1).unwrap();
        assert_eq!(p.param_count(), n);
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig { dropout_rate: 1.0, ..Default::default() }.validate().is_err());
        assert!(ModelConfig { gru_hidden: 0, ..Default::default() }.validate().is_err());
        assert!(ModelParams::new(ModelConfig::default(), 8, 0).is_err());
    }

    #[test]
    fn threshold_examples() {
        assert_eq!(threshold(&[0.5; 6]).to_string(), "111111");
        assert_eq!(threshold(&[0.9, 0.1, 0.1, 0.1, 0.1, 0.1]).to_string(), "100000");
        assert_eq!(
            threshold(&[0.49, 0.51, 0.49, 0.51, 0.0, 1.0]).bits(),
            [false, true, false, true, false, true]
        );
    }

    #[test]
    fn loss_examples() {
        let l = loss(&[0.5; 6], "101010".parse().unwrap());
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);

        let y: GestureLabel = "100000".parse().unwrap();
        let exact = loss(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0], y);
        assert!(exact > 0.0 && exact < 2e-7, "{exact}");

        let p = [0.9, 0.1, 0.2, 0.3, 0.4, 0.6];
        let want = (-(0.9f64).ln() - (0.9f64).ln() - (0.8f64).ln() - (0.7f64).ln()
            - (0.6f64).ln()
            - (0.4f64).ln())
            / 6.0;
        assert!((loss(&p, y) - want).abs() < 1e-15);
    }
}
