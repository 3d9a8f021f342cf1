//! Streaming decoder: samples in, thresholded predictions out at a fixed
//! rate, with per-stage latency accounting.
//!
//! Ticks are numbered from zero; tick `k` belongs to time `k / rate` and is
//! evaluated once the decode-rate clock has passed that instant, using the
//! history that ends exactly there. Because ticks are derived from sample
//! counts, file replay gives the same predictions however fast it runs.

mod queue;
mod server;
pub mod wire;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::mpsc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::features::{feature_column, FeatureError, FeatureThresholds, FeatureWindowSpec, NUM_FEATURES};
use crate::model::{threshold, ModelError, ModelParams, Prediction};
use crate::sigproc::{BandpassFilter, FilterState, Recording, SigprocError, DECODE_RATE_HZ, RAW_RATE_HZ};

pub use queue::DropOldestQueue;
pub use server::{stream_recording, ClientOutput, Server, SessionSummary};

pub const MIN_RATE_HZ: f64 = 5.0;
pub const MAX_RATE_HZ: f64 = 50.0;
/// Allowed excess of the summed stage medians over the end-to-end median.
pub const SCHEDULING_SLACK_US: u32 = 500;

const DECIMATION: u64 = (RAW_RATE_HZ / DECODE_RATE_HZ) as u64;

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Signal(#[from] SigprocError),
    #[error(transparent)]
    Frame(#[from] wire::FrameError),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("cannot bind {endpoint}: {source}")]
    Bind {
        endpoint: String,
        source: std::io::Error,
    },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LatencyBudget {
    pub feature_us: u32,
    pub decode_us: u32,
}

impl Default for LatencyBudget {
    fn default() -> Self {
        LatencyBudget {
            feature_us: 1000,
            decode_us: 20_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub prediction_rate_hz: f64,
    /// When set, must match the model.
    pub channels: Option<usize>,
    pub window: Option<FeatureWindowSpec>,
    pub thresholds: Option<FeatureThresholds>,
    pub model: Option<PathBuf>,
    pub endpoint: String,
    pub latency_budget: LatencyBudget,
    /// Capacity of the outgoing prediction queue and of the sample queue.
    pub queue_capacity: usize,
    /// Raw samples per channel in each ingested block.
    pub block_samples: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            prediction_rate_hz: 10.0,
            channels: None,
            window: None,
            thresholds: None,
            model: None,
            endpoint: "127.0.0.1:7878".into(),
            latency_budget: LatencyBudget::default(),
            queue_capacity: 256,
            block_samples: 100,
        }
    }
}

impl EngineConfig {
    pub fn from_toml(text: &str) -> Result<Self, EngineError> {
        let cfg: EngineConfig = toml::from_str(text).map_err(|e| EngineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plain data")
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        if !(MIN_RATE_HZ..=MAX_RATE_HZ).contains(&self.prediction_rate_hz) {
            return Err(EngineError::Config(format!(
                "prediction rate {} Hz outside [{MIN_RATE_HZ}, {MAX_RATE_HZ}]",
                self.prediction_rate_hz
            )));
        }
        if self.queue_capacity == 0 || self.block_samples == 0 {
            return Err(EngineError::Config("queue capacity and block size must be positive".into()));
        }
        if self.block_samples > usize::from(u16::MAX) {
            return Err(EngineError::Config("block size exceeds the wire limit".into()));
        }
        Ok(())
    }

    /// Startup check that the model agrees with every setting given here.
    pub fn check_model(&self, model: &ModelParams) -> Result<(), EngineError> {
        self.validate()?;
        if self.channels.is_some_and(|c| c != model.channels) {
            return Err(EngineError::Config(format!(
                "config has {} channels, model was trained on {}",
                self.channels.unwrap_or_default(),
                model.channels
            )));
        }
        if self.window.is_some_and(|w| w != model.window) {
            return Err(EngineError::Config("window settings differ from the model's".into()));
        }
        if self.thresholds.is_some_and(|t| t != model.thresholds) {
            return Err(EngineError::Config("feature thresholds differ from the model's".into()));
        }
        Ok(())
    }
}

/// Stage timings of one emitted prediction, in microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameLatency {
    pub feature_us: u32,
    pub decode_us: u32,
    pub end_to_end_us: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Percentiles {
    pub p50: u32,
    pub p95: u32,
    pub max: u32,
}

impl Percentiles {
    /// Nearest-rank percentiles; zeros for an empty input.
    pub fn of(values: &[u32]) -> Self {
        if values.is_empty() {
            return Percentiles::default();
        }
        let mut v = values.to_vec();
        v.sort_unstable();
        let rank = |p: f64| v[((p * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1];
        Percentiles {
            p50: rank(0.5),
            p95: rank(0.95),
            max: v[v.len() - 1],
        }
    }

    fn triple(&self) -> [u32; 3] {
        [self.p50, self.p95, self.max]
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LatencyReport {
    pub frames: Vec<FrameLatency>,
    pub feature: Percentiles,
    pub decode: Percentiles,
    pub end_to_end: Percentiles,
}

impl LatencyReport {
    pub fn new(frames: Vec<FrameLatency>) -> Self {
        let col = |f: fn(&FrameLatency) -> u32| Percentiles::of(&frames.iter().map(f).collect::<Vec<_>>());
        LatencyReport {
            feature: col(|f| f.feature_us),
            decode: col(|f| f.decode_us),
            end_to_end: col(|f| f.end_to_end_us),
            frames,
        }
    }

    pub fn within_budget(&self, budget: &LatencyBudget) -> bool {
        self.feature.p95 < budget.feature_us && self.decode.p95 < budget.decode_us
    }

    pub fn summary(&self, skipped: u64, dropped: u64) -> wire::LatencySummary {
        wire::LatencySummary {
            frames: self.frames.len() as u32,
            feature_us: self.feature.triple(),
            decode_us: self.decode.triple(),
            end_to_end_us: self.end_to_end.triple(),
            skipped: skipped as u32,
            dropped: dropped as u32,
        }
    }
}

fn micros(d: Duration) -> u32 {
    d.as_micros().min(u128::from(u32::MAX)) as u32
}

/// Decode-rate history per channel, kept contiguous so every snapshot is a
/// gap-free slice.
struct Ring {
    chans: Vec<Vec<f64>>,
    keep: usize,
}

impl Ring {
    fn push(&mut self, c: usize, xs: &[f64]) {
        let v = &mut self.chans[c];
        v.extend_from_slice(xs);
        if v.len() > 2 * self.keep {
            let cut = v.len() - self.keep;
            v.drain(..cut);
        }
    }
}

/// One prediction with its stage timings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Emitted {
    pub prediction: Prediction,
    pub latency: FrameLatency,
}

/// Single-threaded streaming core shared by every run mode.
pub struct Pipeline<'m> {
    model: &'m ModelParams,
    filter: BandpassFilter,
    states: Vec<FilterState>,
    rate_hz: f64,
    raw_seen: u64,
    decoded: u64,
    ring: Ring,
    cache: BTreeMap<u64, Vec<f64>>,
    next_tick: u64,
    skipped: u64,
    window: usize,
    step: usize,
    steps: usize,
    need: usize,
    input: Vec<f64>,
    scratch: Vec<Vec<f64>>,
}

impl<'m> Pipeline<'m> {
    pub fn new(model: &'m ModelParams, rate_hz: f64) -> Result<Self, EngineError> {
        if !(MIN_RATE_HZ..=MAX_RATE_HZ).contains(&rate_hz) {
            return Err(EngineError::Config(format!("prediction rate {rate_hz} Hz outside [5, 50]")));
        }
        let spec = model.window;
        spec.validate(DECODE_RATE_HZ)?;
        if spec.steps() != model.config.steps || model.channels * NUM_FEATURES != model.config.input_rows {
            return Err(EngineError::Config("model input shape disagrees with its window settings".into()));
        }
        let filter = BandpassFilter::design(f64::from(RAW_RATE_HZ), &model.band)?;
        let need = spec.required_samples(DECODE_RATE_HZ);
        Ok(Pipeline {
            states: (0..model.channels).map(|_| filter.new_state()).collect(),
            filter,
            model,
            rate_hz,
            raw_seen: 0,
            decoded: 0,
            ring: Ring {
                chans: vec![Vec::new(); model.channels],
                keep: need + 1,
            },
            cache: BTreeMap::new(),
            next_tick: 0,
            skipped: 0,
            window: spec.window_samples(DECODE_RATE_HZ),
            step: spec.step_samples(DECODE_RATE_HZ),
            steps: spec.steps(),
            need,
            input: vec![0.0; model.config.input_rows * model.config.steps],
            scratch: vec![Vec::new(); model.channels],
        })
    }

    pub fn channels(&self) -> usize {
        self.model.channels
    }

    /// Ticks skipped so far for lack of history.
    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    pub fn raw_samples_seen(&self) -> u64 {
        self.raw_seen
    }

    fn tick_end(&self, k: u64) -> u64 {
        (k as f64 * f64::from(DECODE_RATE_HZ) / self.rate_hz).round() as u64
    }

    /// Ingests one block of raw 10 kHz samples (one slice per channel) and
    /// returns the predictions that became due. `arrived` is when the block
    /// reached the engine; end-to-end latency is measured from it.
    pub fn push_block<S: AsRef<[f64]>>(
        &mut self,
        block: &[S],
        arrived: Instant,
    ) -> Result<Vec<Emitted>, EngineError> {
        if block.len() != self.model.channels {
            return Err(EngineError::Config(format!(
                "block has {} channels, model expects {}",
                block.len(),
                self.model.channels
            )));
        }
        let n = block[0].as_ref().len();
        if block.iter().any(|c| c.as_ref().len() != n) {
            return Err(EngineError::Protocol("channels of unequal length in block".into()));
        }
        for (c, raw) in block.iter().enumerate() {
            let out = &mut self.scratch[c];
            out.clear();
            let st = &mut self.states[c];
            for (j, &x) in raw.as_ref().iter().enumerate() {
                if !x.is_finite() {
                    return Err(EngineError::Features(FeatureError::NonFinite(j)));
                }
                let y = self.filter.process(st, x);
                if (self.raw_seen + j as u64) % DECIMATION == 0 {
                    out.push(y);
                }
            }
        }
        self.raw_seen += n as u64;

        let mut emitted = Vec::new();
        let len = self.scratch[0].len();
        let mut off = 0;
        while off < len {
            let e = self.tick_end(self.next_tick);
            let want = (e + 1).saturating_sub(self.decoded) as usize;
            let take = want.min(len - off);
            for c in 0..self.scratch.len() {
                let (ring, scratch) = (&mut self.ring, &self.scratch);
                ring.push(c, &scratch[c][off..off + take]);
            }
            self.decoded += take as u64;
            off += take;
            if self.decoded > e {
                if let Some(p) = self.tick(e, arrived)? {
                    emitted.push(p);
                }
                self.next_tick += 1;
            }
        }
        Ok(emitted)
    }

    fn tick(&mut self, end: u64, arrived: Instant) -> Result<Option<Emitted>, EngineError> {
        if end < self.need as u64 {
            self.skipped += 1;
            return Ok(None);
        }
        let t0 = Instant::now();
        // History ends at `end`; the ring's newest sample is index `end`.
        let hist: Vec<&[f64]> = self.ring.chans.iter().map(|v| &v[..v.len() - 1]).collect();
        let have = hist[0].len() as u64;
        let rows = self.model.config.input_rows;
        let oldest = end - ((self.steps - 1) * self.step) as u64;
        for t in 0..self.steps {
            let e_t = oldest + (t * self.step) as u64;
            if !self.cache.contains_key(&e_t) {
                let rel = (have - (end - e_t)) as usize;
                let col = feature_column(&hist, rel, self.window, &self.model.thresholds)?;
                self.cache.insert(e_t, col);
            }
            let dst = &mut self.input[t * rows..(t + 1) * rows];
            dst.copy_from_slice(&self.cache[&e_t]);
            self.model.norm.apply_column(dst);
        }
        self.cache = self.cache.split_off(&oldest);
        let t1 = Instant::now();
        let probs = self.model.forward_eval(&self.input)?;
        let label = threshold(&probs);
        let t2 = Instant::now();
        let mut prediction = Prediction::new(probs, end * 1_000_000 / u64::from(DECODE_RATE_HZ));
        debug_assert_eq!(prediction.label, label);
        prediction.feature_us = micros(t1 - t0);
        prediction.decode_us = micros(t2 - t1);
        let latency = FrameLatency {
            feature_us: prediction.feature_us,
            decode_us: prediction.decode_us,
            end_to_end_us: micros(Instant::now() - arrived.min(t0)),
        };
        Ok(Some(Emitted { prediction, latency }))
    }
}

/// What a run produced.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub predictions: Vec<Prediction>,
    pub latency: LatencyReport,
    pub skipped: u64,
    /// Real-time mode: waits on the source that overran the expected cadence.
    pub gaps: u64,
    pub dropped: u64,
}

fn check_recording(rec: &Recording, model: &ModelParams) -> Result<(), EngineError> {
    if rec.sample_rate_hz() != RAW_RATE_HZ {
        return Err(EngineError::Config(format!(
            "recording is at {} Hz, the engine ingests {RAW_RATE_HZ} Hz",
            rec.sample_rate_hz()
        )));
    }
    if rec.channel_count() != model.channels {
        return Err(EngineError::Config(format!(
            "recording has {} channels, model expects {}",
            rec.channel_count(),
            model.channels
        )));
    }
    Ok(())
}

fn blocks(rec: &Recording, size: usize) -> impl Iterator<Item = Vec<&[f64]>> + '_ {
    (0..rec.len()).step_by(size).map(move |lo| {
        let hi = (lo + size).min(rec.len());
        rec.channels().iter().map(|c| &c[lo..hi]).collect()
    })
}

/// Batch replay on the calling thread, as fast as possible.
pub fn run_offline(rec: &Recording, model: &ModelParams, cfg: &EngineConfig) -> Result<RunOutput, EngineError> {
    cfg.check_model(model)?;
    check_recording(rec, model)?;
    let mut p = Pipeline::new(model, cfg.prediction_rate_hz)?;
    let mut out = Vec::new();
    for b in blocks(rec, cfg.block_samples) {
        out.extend(p.push_block(&b, Instant::now())?);
    }
    Ok(finish(out, p.skipped(), 0, 0))
}

fn finish(out: Vec<Emitted>, skipped: u64, gaps: u64, dropped: u64) -> RunOutput {
    let latency = LatencyReport::new(out.iter().map(|e| e.latency).collect());
    RunOutput {
        predictions: out.into_iter().map(|e| e.prediction).collect(),
        latency,
        skipped,
        gaps,
        dropped,
    }
}

/// How the ingest stage releases samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Pace {
    /// Each block is released when its last sample would have been recorded.
    RealTime { speed: f64 },
    Unpaced,
}

/// Three-stage run: an ingest thread feeds blocks through a bounded queue
/// (blocking, never dropping samples), the decode stage runs the pipeline,
/// and an emit thread drains a drop-oldest prediction queue.
pub fn run_realtime(
    rec: &Recording,
    model: &ModelParams,
    cfg: &EngineConfig,
    pace: Pace,
) -> Result<RunOutput, EngineError> {
    cfg.check_model(model)?;
    check_recording(rec, model)?;
    if let Pace::RealTime { speed } = pace {
        if !(speed > 0.0) {
            return Err(EngineError::Config("speed must be positive".into()));
        }
    }
    let mut pipeline = Pipeline::new(model, cfg.prediction_rate_hz)?;
    let period = Duration::from_secs_f64(cfg.block_samples as f64 / f64::from(RAW_RATE_HZ));
    let (tx, rx) = mpsc::sync_channel::<(Vec<Vec<f64>>, Instant)>(cfg.queue_capacity);
    let outq = DropOldestQueue::<Emitted>::new(cfg.queue_capacity);

    std::thread::scope(|s| {
        s.spawn(move || {
            let start = Instant::now();
            let mut released = 0usize;
            for b in blocks(rec, cfg.block_samples) {
                released += b[0].len();
                if let Pace::RealTime { speed } = pace {
                    let due = start + Duration::from_secs_f64(released as f64 / f64::from(RAW_RATE_HZ) / speed);
                    if let Some(wait) = due.checked_duration_since(Instant::now()) {
                        std::thread::sleep(wait);
                    }
                }
                let owned = b.iter().map(|c| c.to_vec()).collect();
                if tx.send((owned, Instant::now())).is_err() {
                    break;
                }
            }
        });
        let emitter = s.spawn(|| {
            let mut got = Vec::new();
            while let Some(e) = outq.pop() {
                got.push(e);
            }
            got
        });

        let patience = match pace {
            Pace::RealTime { speed } => period.mul_f64(2.0 / speed) + Duration::from_millis(5),
            Pace::Unpaced => Duration::MAX,
        };
        let mut gaps = 0u64;
        let result = loop {
            let msg = match rx.recv_timeout(patience) {
                Ok(m) => m,
                Err(mpsc::RecvTimeoutError::Timeout) => {
                    gaps += 1;
                    continue;
                }
                Err(mpsc::RecvTimeoutError::Disconnected) => break Ok(()),
            };
            match pipeline.push_block(&msg.0, msg.1) {
                Ok(out) => out.into_iter().for_each(|e| outq.push(e)),
                Err(e) => break Err(e),
            }
        };
        drop(rx);
        outq.close();
        let got = emitter.join().expect("emit stage");
        result.map(|()| finish(got, pipeline.skipped(), gaps, outq.dropped()))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny_model(channels: usize) -> ModelParams {
        let cfg = ModelConfig {
            input_rows: channels * NUM_FEATURES,
            conv_out: 8,
            gru_hidden: 8,
            fc_hidden: 4,
            ..Default::default()
        };
        ModelParams::new(cfg, channels, 3).unwrap()
    }

    fn noise(channels: usize, seconds: f64) -> Recording {
        use rand::{Rng, SeedableRng};
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let n = (seconds * f64::from(RAW_RATE_HZ)) as usize;
        Recording::new(
            RAW_RATE_HZ,
            (0..channels).map(|_| (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn warmup_skips_follow_buffer_rule() {
        let m = tiny_model(2);
        let rec = noise(2, 10.0);
        for rate in [5.0, 10.0, 50.0] {
            let cfg = EngineConfig {
                prediction_rate_hz: rate,
                ..Default::default()
            };
            let out = run_offline(&rec, &m, &cfg).unwrap();
            let skips = (1.1f64 * rate - 1e-9).ceil() as usize;
            assert_eq!(out.skipped as usize, skips, "rate {rate}");
            assert_eq!(out.predictions.len(), (10.0 * rate) as usize - skips);
            assert_eq!(out.predictions[0].timestamp_us, (skips as f64 / rate * 1e6).round() as u64);
        }
    }

    #[test]
    fn block_size_does_not_matter() {
        let m = tiny_model(2);
        let rec = noise(2, 3.0);
        let a = run_offline(&rec, &m, &EngineConfig::default()).unwrap();
        let b = run_offline(
            &rec,
            &m,
            &EngineConfig {
                block_samples: 7919,
                ..Default::default()
            },
        )
        .unwrap();
        let probs = |o: &RunOutput| o.predictions.iter().map(|p| p.probabilities).collect::<Vec<_>>();
        assert_eq!(probs(&a), probs(&b));
    }

    #[test]
    fn threaded_matches_offline() {
        let m = tiny_model(3);
        let rec = noise(3, 2.5);
        let cfg = EngineConfig::default();
        let a = run_offline(&rec, &m, &cfg).unwrap();
        let b = run_realtime(&rec, &m, &cfg, Pace::Unpaced).unwrap();
        let c = run_realtime(&rec, &m, &cfg, Pace::RealTime { speed: 20.0 }).unwrap();
        let probs = |o: &RunOutput| o.predictions.iter().map(|p| (p.timestamp_us, p.probabilities)).collect::<Vec<_>>();
        assert_eq!(probs(&a), probs(&b));
        assert_eq!(probs(&a), probs(&c));
        for f in &c.latency.frames {
            assert!(f.end_to_end_us >= f.feature_us + f.decode_us);
        }
    }

    #[test]
    fn config_rules() {
        assert!(EngineConfig {
            prediction_rate_hz: 4.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        let text = EngineConfig::default().to_toml();
        assert_eq!(EngineConfig::from_toml(&text).unwrap(), EngineConfig::default());
        let m = tiny_model(2);
        let cfg = EngineConfig {
            channels: Some(3),
            ..Default::default()
        };
        assert!(matches!(cfg.check_model(&m), Err(EngineError::Config(_))));
        assert!(run_offline(&noise(3, 1.0), &m, &EngineConfig::default()).is_err());
    }

    #[test]
    fn percentiles_nearest_rank() {
        let v: Vec<u32> = (1..=100).collect();
        let p = Percentiles::of(&v);
        assert_eq!((p.p50, p.p95, p.max), (50, 95, 100));
        assert_eq!(Percentiles::of(&[]), Percentiles::default());
    }
}
