//! Sliding-window time-domain features and decoder input tensors.

use serde::{Deserialize, Serialize};

pub const NUM_FEATURES: usize = 14;

pub const FEATURE_NAMES: [&str; NUM_FEATURES] = [
    "ZC", "SSC", "WL", "WA", "MAB", "MSQ", "RMS", "V3", "LD", "DABS", "MFL", "MPR", "MAVS", "WMA",
];

/// Windows shorter than this cannot define every feature.
pub const MIN_WINDOW: usize = 4;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FeatureError {
    #[error("window of {0} samples is too short (need at least {MIN_WINDOW})")]
    WindowTooShort(usize),
    #[error("non-finite sample at index {0}")]
    NonFinite(usize),
    #[error("history not ready: have {have} samples, need {need}")]
    NotReady { have: usize, need: usize },
    #[error("configuration error: {0}")]
    Config(String),
}

/// Detection thresholds, in input units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureThresholds {
    pub zc: f64,
    pub ssc: f64,
    pub wamp: f64,
    pub mpr: f64,
    pub log_eps: f64,
}

impl Default for FeatureThresholds {
    fn default() -> Self {
        FeatureThresholds {
            zc: 0.0,
            ssc: 0.0,
            wamp: 0.05,
            mpr: 0.05,
            log_eps: 1e-12,
        }
    }
}

impl FeatureThresholds {
    /// Thresholds for a signal scaled by `a`; `log_eps` is left alone.
    pub fn scaled(&self, a: f64) -> Self {
        FeatureThresholds {
            zc: self.zc * a,
            ssc: self.ssc * a * a,
            wamp: self.wamp * a,
            mpr: self.mpr * a,
            log_eps: self.log_eps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureWindowSpec {
    pub window_ms: f64,
    pub step_ms: f64,
    pub history_s: f64,
}

impl Default for FeatureWindowSpec {
    fn default() -> Self {
        FeatureWindowSpec {
            window_ms: 100.0,
            step_ms: 20.0,
            history_s: 1.0,
        }
    }
}

impl FeatureWindowSpec {
    /// Spec covering `history_s` with a fixed number of steps; the step shrinks
    /// or grows with the history so the tensor keeps its width.
    pub fn with_history(history_s: f64, steps: usize) -> Self {
        FeatureWindowSpec {
            history_s,
            step_ms: history_s * 1000.0 / steps as f64,
            ..Default::default()
        }
    }

    pub fn validate(&self, sample_rate_hz: u32) -> Result<(), FeatureError> {
        if !(self.window_ms > 0.0 && self.step_ms > 0.0 && self.history_s > 0.0) {
            return Err(FeatureError::Config("window, step and history must be positive".into()));
        }
        let steps = self.history_s * 1000.0 / self.step_ms;
        if (steps - steps.round()).abs() > 1e-9 || steps.round() < 1.0 {
            return Err(FeatureError::Config(format!(
                "history {} s is not a whole number of {} ms steps",
                self.history_s, self.step_ms
            )));
        }
        let fs = f64::from(sample_rate_hz);
        for (name, ms) in [("window", self.window_ms), ("step", self.step_ms)] {
            let n = ms * fs / 1000.0;
            if (n - n.round()).abs() > 1e-9 {
                return Err(FeatureError::Config(format!(
                    "{name} of {ms} ms is not a whole number of samples at {sample_rate_hz} Hz"
                )));
            }
        }
        if self.window_samples(sample_rate_hz) < MIN_WINDOW {
            return Err(FeatureError::WindowTooShort(self.window_samples(sample_rate_hz)));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.history_s * 1000.0 / self.step_ms).round() as usize
    }

    pub fn window_samples(&self, sample_rate_hz: u32) -> usize {
        (self.window_ms * f64::from(sample_rate_hz) / 1000.0).round() as usize
    }

    pub fn step_samples(&self, sample_rate_hz: u32) -> usize {
        (self.step_ms * f64::from(sample_rate_hz) / 1000.0).round() as usize
    }

    /// Samples the ring buffer must hold before a tensor can be built:
    /// the full history plus one window.
    pub fn required_samples(&self, sample_rate_hz: u32) -> usize {
        ((self.history_s + self.window_ms / 1000.0) * f64::from(sample_rate_hz)).round() as usize
    }

    pub fn required_s(&self) -> f64 {
        self.history_s + self.window_ms / 1000.0
    }
}

/// The 14 features of one channel window, in [`FEATURE_NAMES`] order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(pub [f64; NUM_FEATURES]);

impl FeatureVector {
    pub fn get(&self, name: &str) -> Option<f64> {
        FEATURE_NAMES
            .iter()
            .position(|n| *n == name)
            .map(|i| self.0[i])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Computes all 14 features of one window in a single pass.
///
/// `MFL` adds `log_eps` inside the logarithm so a flat window stays finite.
pub fn extract_features(
    x: &[f64],
    th: &FeatureThresholds,
) -> Result<FeatureVector, FeatureError> {
    let n = x.len();
    if n < MIN_WINDOW {
        return Err(FeatureError::WindowTooShort(n));
    }
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(FeatureError::NonFinite(i));
    }
    let nf = n as f64;
    let half = n / 2;
    let (w_lo, w_hi) = (0.25 * nf, 0.75 * nf);

    let (mut zc, mut ssc, mut wa, mut mpr) = (0u32, 0u32, 0u32, 0u32);
    let (mut wl, mut d2) = (0.0, 0.0);
    let (mut abs_first, mut abs_second) = (0.0, 0.0);
    let (mut sq, mut cube, mut wma_mid) = (0.0, 0.0, 0.0);
    // Sum of logs kept as a running product, folded into `logs` before it
    // can leave the normal range.
    let mut logs = 0.0;
    let mut prod = 1.0f64;
    let mid_lo = w_lo.ceil() as usize;
    let mid_hi = (w_hi.ceil() as usize).min(n);

    for (i, &xi) in x.iter().enumerate() {
        let a = xi.abs();
        if i < half {
            abs_first += a;
        } else {
            abs_second += a;
        }
        sq += xi * xi;
        cube += a * a * a;
        prod *= a + th.log_eps;
        if !(1e-150..=1e150).contains(&prod) {
            logs += prod.ln();
            prod = 1.0;
        }
        mpr += u32::from(a >= th.mpr);
    }
    for &xi in &x[mid_lo..mid_hi] {
        wma_mid += xi.abs();
    }
    for w in x.windows(2) {
        let d = w[1] - w[0];
        let ad = d.abs();
        wl += ad;
        d2 += d * d;
        wa += u32::from(ad > th.wamp);
        zc += u32::from(w[0] * w[1] < 0.0 && ad >= th.zc);
    }
    for w in x.windows(3) {
        ssc += u32::from((w[1] - w[0]) * (w[1] - w[2]) >= th.ssc);
    }
    let abs_total = abs_first + abs_second;
    let wma = 0.5 * abs_total + 0.5 * wma_mid;

    let mab = abs_total / nf;
    let msq = sq / nf;
    let second_len = (n - half) as f64;
    let mavs = abs_second / second_len - abs_first / half as f64;
    Ok(FeatureVector([
        f64::from(zc),
        f64::from(ssc),
        wl,
        f64::from(wa),
        mab,
        msq,
        msq.sqrt(),
        (cube / nf).cbrt(),
        ((logs + prod.ln()) / nf).exp(),
        (d2 / (nf - 1.0)).sqrt(),
        (d2.sqrt() + th.log_eps).log10(),
        f64::from(mpr) / nf,
        mavs,
        wma / nf,
    ]))
}

/// Features of every channel for one window ending (exclusive) at `end`;
/// rows are channel-major then feature index.
pub fn feature_column(
    channels: &[&[f64]],
    end: usize,
    window: usize,
    th: &FeatureThresholds,
) -> Result<Vec<f64>, FeatureError> {
    let mut col = Vec::with_capacity(channels.len() * NUM_FEATURES);
    for ch in channels {
        if end > ch.len() || end < window {
            return Err(FeatureError::NotReady {
                have: ch.len(),
                need: end.max(window),
            });
        }
        col.extend_from_slice(&extract_features(&ch[end - window..end], th)?.0);
    }
    Ok(col)
}

/// Decoder input: `channels·14` rows by `steps` columns, row-major.
/// Column `t` is the window ending at `end_sample − (steps−1−t)·step`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    channels: usize,
    steps: usize,
    values: Vec<f64>,
    end_sample: u64,
    sample_rate_hz: u32,
}

impl FeatureTensor {
    pub fn from_values(
        channels: usize,
        steps: usize,
        values: Vec<f64>,
        end_sample: u64,
        sample_rate_hz: u32,
    ) -> Result<Self, FeatureError> {
        if values.len() != channels * NUM_FEATURES * steps {
            return Err(FeatureError::Config(format!(
                "{} values for a {}x{} tensor",
                values.len(),
                channels * NUM_FEATURES,
                steps
            )));
        }
        Ok(FeatureTensor {
            channels,
            steps,
            values,
            end_sample,
            sample_rate_hz,
        })
    }

    /// Assembles a tensor from `steps` feature columns, oldest first.
    pub fn from_columns<C: AsRef<[f64]>>(
        columns: &[C],
        channels: usize,
        end_sample: u64,
        sample_rate_hz: u32,
    ) -> Result<Self, FeatureError> {
        let rows = channels * NUM_FEATURES;
        let steps = columns.len();
        let mut values = vec![0.0; rows * steps];
        for (t, col) in columns.iter().enumerate() {
            let col = col.as_ref();
            if col.len() != rows {
                return Err(FeatureError::Config(format!(
                    "column of {} rows, expected {rows}",
                    col.len()
                )));
            }
            for (r, &v) in col.iter().enumerate() {
                values[r * steps + t] = v;
            }
        }
        Self::from_values(channels, steps, values, end_sample, sample_rate_hz)
    }

    pub fn rows(&self) -> usize {
        self.channels * NUM_FEATURES
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows(), self.steps)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, step: usize) -> f64 {
        self.values[row * self.steps + step]
    }

    pub fn column(&self, step: usize) -> Vec<f64> {
        (0..self.rows()).map(|r| self.get(r, step)).collect()
    }

    pub fn end_sample(&self) -> u64 {
        self.end_sample
    }

    pub fn end_time_s(&self) -> f64 {
        self.end_sample as f64 / f64::from(self.sample_rate_hz)
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }
}

/// Builds the tensor for a history buffer whose last sample is "now".
/// `end_sample` is the absolute index one past that last sample.
pub fn build_feature_tensor(
    history: &[&[f64]],
    spec: &FeatureWindowSpec,
    th: &FeatureThresholds,
    sample_rate_hz: u32,
    end_sample: u64,
) -> Result<FeatureTensor, FeatureError> {
    spec.validate(sample_rate_hz)?;
    let need = spec.required_samples(sample_rate_hz);
    let have = history.iter().map(|h| h.len()).min().unwrap_or(0);
    if have < need {
        return Err(FeatureError::NotReady { have, need });
    }
    let steps = spec.steps();
    let step = spec.step_samples(sample_rate_hz);
    let window = spec.window_samples(sample_rate_hz);
    // Align every channel so index `len` is "now".
    let aligned: Vec<&[f64]> = history.iter().map(|h| &h[h.len() - have..]).collect();
    let columns = (0..steps)
        .map(|t| feature_column(&aligned, have - (steps - 1 - t) * step, window, th))
        .collect::<Result<Vec<_>, _>>()?;
    FeatureTensor::from_columns(&columns, history.len(), end_sample, sample_rate_hz)
}

/// Per-row z-score statistics fitted on training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Rows whose standard deviation falls below this are treated as constant.
pub const MIN_STD: f64 = 1e-12;

impl NormStats {
    pub fn identity(rows: usize) -> Self {
        NormStats {
            mean: vec![0.0; rows],
            std: vec![1.0; rows],
        }
    }

    pub fn rows(&self) -> usize {
        self.mean.len()
    }

    /// Normalizes a single feature column in place.
    #[inline]
    pub fn apply_column(&self, col: &mut [f64]) {
        for ((v, m), s) in col.iter_mut().zip(&self.mean).zip(&self.std) {
            *v = (*v - m) / s;
        }
    }

    /// Rounds every statistic to the nearest f32, the precision used on disk.
    pub fn snap_to_f32(&mut self) {
        for v in self.mean.iter_mut().chain(self.std.iter_mut()) {
            *v = f64::from(*v as f32);
        }
    }
}

/// Streaming per-row mean/variance (Welford).
#[derive(Debug, Clone)]
pub struct NormAccumulator {
    count: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl NormAccumulator {
    pub fn new(rows: usize) -> Self {
        NormAccumulator {
            count: 0,
            mean: vec![0.0; rows],
            m2: vec![0.0; rows],
        }
    }

    pub fn push_column(&mut self, col: &[f64]) {
        self.count += 1;
        let n = self.count as f64;
        for ((m, m2), &x) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(col) {
            let delta = x - *m;
            *m += delta / n;
            *m2 += delta * (x - *m);
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn finish(self) -> Result<NormStats, FeatureError> {
        if self.count == 0 {
            return Err(FeatureError::Config("no training data for normalization".into()));
        }
        let n = self.count as f64;
        let std = self
            .m2
            .iter()
            .map(|&m2| {
                let s = (m2 / n).max(0.0).sqrt();
                if s.is_finite() && s >= MIN_STD {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Ok(NormStats {
            mean: self.mean,
            std,
        })
    }
}

/// Per-row mean and population standard deviation over every tensor and step.
pub fn fit_norm_stats(tensors: &[FeatureTensor]) -> Result<NormStats, FeatureError> {
    let first = tensors
        .first()
        .ok_or_else(|| FeatureError::Config("no training tensors".into()))?;
    let mut acc = NormAccumulator::new(first.rows());
    for t in tensors {
        if t.rows() != first.rows() {
            return Err(FeatureError::Config("tensors differ in row count".into()));
        }
        for s in 0..t.steps() {
            acc.push_column(&t.column(s));
        }
    }
    acc.finish()
}

pub fn normalize(tensor: &FeatureTensor, stats: &NormStats) -> Result<FeatureTensor, FeatureError> {
    if stats.rows() != tensor.rows() {
        return Err(FeatureError::Config(format!(
            "normalization has {} rows, tensor has {}",
            stats.rows(),
            tensor.rows()
        )));
    }
    let steps = tensor.steps;
    let mut out = tensor.clone();
    for (r, row) in out.values.chunks_mut(steps).enumerate() {
        let (m, s) = (stats.mean[r], stats.std[r]);
        for v in row {
            *v = (*v - m) / s;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alternating_signs_cross_three_times() {
        let f = extract_features(&[1.0, -1.0, 1.0, -1.0], &FeatureThresholds::default()).unwrap();
        assert_eq!(f.get("ZC"), Some(3.0));
        assert_eq!(f.get("SSC"), Some(2.0));
        assert_eq!(f.get("WL"), Some(6.0));
    }

    #[test]
    fn constant_window() {
        let c = -0.7;
        let f = extract_features(&[c; 500], &FeatureThresholds::default()).unwrap();
        assert_eq!(f.get("WL"), Some(0.0));
        assert!((f.get("MAB").unwrap() - c.abs()).abs() < 1e-12);
        assert!((f.get("RMS").unwrap() - c.abs()).abs() < 1e-12);
        assert_eq!(f.get("DABS"), Some(0.0));
        assert!(f.get("MAVS").unwrap().abs() < 1e-12);
        assert!(f.0.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn errors() {
        let th = FeatureThresholds::default();
        assert_eq!(
            extract_features(&[1.0, 2.0, 3.0], &th),
            Err(FeatureError::WindowTooShort(3))
        );
        assert_eq!(
            extract_features(&[1.0, f64::NAN, 3.0, 4.0], &th),
            Err(FeatureError::NonFinite(1))
        );
    }

    #[test]
    fn default_spec_geometry() {
        let s = FeatureWindowSpec::default();
        s.validate(5000).unwrap();
        assert_eq!(s.steps(), 50);
        assert_eq!(s.window_samples(5000), 500);
        assert_eq!(s.step_samples(5000), 100);
        assert_eq!(s.required_samples(5000), 5500);
        let short = FeatureWindowSpec::with_history(0.2, 50);
        short.validate(5000).unwrap();
        assert_eq!(short.step_samples(5000), 20);
        assert!(FeatureWindowSpec { step_ms: 30.0, ..s }.validate(5000).is_err());
    }

    #[test]
    fn tensor_shapes_and_readiness() {
        let spec = FeatureWindowSpec::default();
        let th = FeatureThresholds::default();
        for (channels, rows) in [(16, 224), (8, 112)] {
            let data: Vec<Vec<f64>> = (0..channels)
                .map(|c| (0..5500).map(|i| ((i * (c + 3)) as f64 * 0.37).sin()).collect())
                .collect();
            let refs: Vec<&[f64]> = data.iter().map(|v| v.as_slice()).collect();
            let t = build_feature_tensor(&refs, &spec, &th, 5000, 5500).unwrap();
            assert_eq!(t.shape(), (rows, 50));
        }
        let data = vec![vec![0.1; 5499]; 2];
        let refs: Vec<&[f64]> = data.iter().map(|v| v.as_slice()).collect();
        assert!(matches!(
            build_feature_tensor(&refs, &spec, &th, 5000, 5499),
            Err(FeatureError::NotReady { have: 5499, need: 5500 })
        ));
    }

    #[test]
    fn norm_examples() {
        let t = FeatureTensor::from_values(1, 2, (0..28).map(f64::from).collect(), 0, 5000).unwrap();
        assert_eq!(normalize(&t, &NormStats::identity(14)).unwrap(), t);
        assert!(normalize(&t, &NormStats::identity(13)).is_err());

        let c = FeatureTensor::from_values(1, 3, vec![2.5; 42], 0, 5000).unwrap();
        let s = fit_norm_stats(std::slice::from_ref(&c)).unwrap();
        assert!(s.mean.iter().all(|&m| m == 2.5));
        assert!(s.std.iter().all(|&v| v == 1.0));
        assert!(normalize(&c, &s).unwrap().values().iter().all(|&v| v == 0.0));

        let z = FeatureTensor::from_values(1, 3, vec![0.0; 42], 0, 5000).unwrap();
        let two = FeatureTensor::from_values(1, 3, vec![2.0; 42], 0, 5000).unwrap();
        let s = fit_norm_stats(&[z, two]).unwrap();
        assert!(s.mean.iter().all(|&m| m == 1.0));
        assert!(s.std.iter().all(|&v| (v - 1.0).abs() < 1e-15));
        assert!(fit_norm_stats(&[]).is_err());
    }
}
