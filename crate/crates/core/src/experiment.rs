//! Glue between sessions, frame sets and training, shared by the command
//! line, the matching task and the benchmarks.

use serde::{Deserialize, Serialize};

use crate::dataset::{fit_frame_norm, Concat, DatasetError, FrameSet, FrameSpec};
use crate::engine::{run_offline, EngineConfig, EngineError, FrameLatency, LatencyReport, Percentiles};
use crate::features::{FeatureWindowSpec, NUM_FEATURES};
use crate::label::NUM_DOF;
use crate::metrics::{self, ConfusionCounts, DofScore, MetricReport};
use crate::model::{evaluate, fine_tune, multi_seed_train, train, Examples, ModelConfig, ModelError, ModelParams, SeedReport, TrainConfig};
use crate::par::Exec;
use crate::sigproc::{DECODE_RATE_HZ, RAW_RATE_HZ};
use crate::synthgen::{Session, SynthError};

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("configuration error: {0}")]
    Config(String),
}

/// Reduced layer widths used by the desk-scale benchmarks.
pub fn compact_model_config(channels: usize) -> ModelConfig {
    ModelConfig {
        input_rows: channels * NUM_FEATURES,
        conv_out: 32,
        gru_hidden: 32,
        fc_hidden: 16,
        ..Default::default()
    }
}

/// Training settings for the benchmarks: the default schedule with a larger
/// initial step so five epochs suffice.
pub fn benchmark_train_config(seeds: Vec<u64>) -> TrainConfig {
    TrainConfig {
        lr0: 1e-3,
        seeds,
        ..Default::default()
    }
}

/// A fresh model whose frontend settings come from `window`.
pub fn template(config: ModelConfig, channels: usize, window: FeatureWindowSpec) -> Result<ModelParams, ExperimentError> {
    let config = ModelConfig {
        steps: window.steps(),
        ..config
    };
    let mut p = ModelParams::new(config, channels, 0)?;
    p.window = window;
    Ok(p)
}

pub fn frame_spec(model: &ModelParams, stride: usize) -> FrameSpec {
    FrameSpec {
        band: model.band,
        window: model.window,
        thresholds: model.thresholds,
        stride,
    }
}

fn check_schema(model: &ModelParams, s: &Session) -> Result<(), ExperimentError> {
    if s.profile.channels != model.channels {
        return Err(ExperimentError::Config(format!(
            "session '{}' has {} channels, model uses {}",
            s.spec.session_id, s.profile.channels, model.channels
        )));
    }
    Ok(())
}

/// Frames of a session normalized with the model's statistics.
pub fn session_frames(model: &ModelParams, s: &Session, stride: usize, exec: Exec) -> Result<FrameSet, ExperimentError> {
    check_schema(model, s)?;
    let mut f = FrameSet::from_session(s, &frame_spec(model, stride), exec)?;
    f.set_norm(model.norm.clone())?;
    Ok(f)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionScore {
    pub counts: ConfusionCounts,
    pub scores: [DofScore; NUM_DOF],
    pub pred_error: [f64; NUM_DOF],
    pub mean_balanced_accuracy: f64,
    pub mean_error: f64,
}

impl SessionScore {
    pub fn new(counts: ConfusionCounts) -> Self {
        let scores = metrics::balanced_accuracy(&counts);
        let pred_error = scores.map(|s| s.prediction_error.unwrap_or(f64::NAN));
        let mean = metrics::mean_balanced_accuracy(&scores).unwrap_or(f64::NAN);
        SessionScore {
            counts,
            scores,
            pred_error,
            mean_balanced_accuracy: mean,
            mean_error: 1.0 - mean,
        }
    }

    pub fn report(&self) -> MetricReport {
        MetricReport::new(&self.counts)
    }
}

pub fn score_frames(model: &ModelParams, frames: &dyn Examples, exec: Exec) -> Result<SessionScore, ExperimentError> {
    Ok(SessionScore::new(evaluate(model, frames, exec)?))
}

pub fn evaluate_session(model: &ModelParams, s: &Session, exec: Exec) -> Result<SessionScore, ExperimentError> {
    score_frames(model, &session_frames(model, s, 1, exec)?, exec)
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub model: ModelParams,
    pub seeds: Vec<SeedReport>,
    pub validation: SessionScore,
}

/// Fits normalization on the training sessions, trains one model per seed
/// and keeps the best on `validation`. Training frames are taken every
/// `stride` steps; validation uses every step.
pub fn train_on_sessions(
    template: &ModelParams,
    train_sessions: &[&Session],
    validation: &Session,
    tc: &TrainConfig,
    stride: usize,
    exec: Exec,
) -> Result<Trained, ExperimentError> {
    if train_sessions.is_empty() {
        return Err(ExperimentError::Config("no training sessions".into()));
    }
    for s in train_sessions.iter().copied().chain(std::iter::once(validation)) {
        check_schema(template, s)?;
    }
    let spec = frame_spec(template, stride);
    let mut sets = train_sessions
        .iter()
        .map(|s| FrameSet::from_session(s, &spec, exec))
        .collect::<Result<Vec<_>, _>>()?;
    let mut norm = fit_frame_norm(&sets.iter().collect::<Vec<_>>())?;
    norm.snap_to_f32();
    for s in &mut sets {
        s.set_norm(norm.clone())?;
    }
    let mut tpl = template.clone();
    tpl.norm = norm;
    let mut val = FrameSet::from_session(validation, &frame_spec(&tpl, 1), exec)?;
    val.set_norm(tpl.norm.clone())?;
    let train_set = Concat::new(sets.iter().map(|s| s as &dyn Examples).collect())?;
    let (model, seeds) = multi_seed_train(&tpl, &train_set, &val, tc, exec)?;
    let validation = score_frames(&model, &val, exec)?;
    Ok(Trained {
        model,
        seeds,
        validation,
    })
}

/// How a model is brought up to date on a new session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Retrain {
    /// Fresh weights; normalization refitted on the new session.
    Fresh,
    /// Continue from the current weights and normalization.
    FineTune,
}

/// Retrains on `train_session` with the first seed of `tc`.
pub fn retrain(
    model: &ModelParams,
    train_session: &Session,
    tc: &TrainConfig,
    mode: Retrain,
    stride: usize,
    exec: Exec,
) -> Result<ModelParams, ExperimentError> {
    check_schema(model, train_session)?;
    let seed = *tc.seeds.first().ok_or_else(|| ExperimentError::Config("no seeds given".into()))?;
    let mut set = FrameSet::from_session(train_session, &frame_spec(model, stride), exec)?;
    let mut start = model.clone();
    if mode == Retrain::Fresh {
        let mut norm = fit_frame_norm(&[&set])?;
        norm.snap_to_f32();
        start.norm = norm;
    }
    set.set_norm(start.norm.clone())?;
    let mut out = match mode {
        Retrain::Fresh => train(&start, &set, tc, seed)?,
        Retrain::FineTune => fine_tune(&start, &set, tc, seed)?,
    };
    out.params.snap_to_f32();
    Ok(out.params)
}

/// Training frames are spaced this far apart when the step allows it.
pub const TRAIN_SPACING_MS: f64 = 20.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub history_s: f64,
    pub step_ms: f64,
    pub frames: usize,
    pub score: SessionScore,
    pub feature_us: Percentiles,
    pub decode_us: Percentiles,
}

/// Trains one model per history length and scores each on the same
/// validation instants. The tensor keeps `steps` columns at every length,
/// so the step grows with the history and the decoder cost stays fixed.
/// Latency comes from streaming `latency_s` seconds of the validation
/// session through the engine at `rate_hz`, pooled over interleaved
/// rounds once every model is trained.
const LATENCY_ROUNDS: usize = 3;

#[allow(clippy::too_many_arguments)]
pub fn input_length_sweep(
    lengths_s: &[f64],
    steps: usize,
    config: ModelConfig,
    train_sessions: &[&Session],
    validation: &Session,
    tc: &TrainConfig,
    rate_hz: f64,
    latency_s: f64,
    exec: Exec,
) -> Result<Vec<SweepRow>, ExperimentError> {
    if lengths_s.is_empty() {
        return Err(ExperimentError::Config("no lengths given".into()));
    }
    let channels = validation.profile.channels;
    let windows: Vec<FeatureWindowSpec> = lengths_s.iter().map(|&h| FeatureWindowSpec::with_history(h, steps)).collect();
    for w in &windows {
        w.validate(DECODE_RATE_HZ)
            .map_err(|e| ExperimentError::Config(format!("history {} s: {e}", w.history_s)))?;
    }
    let step_samples: Vec<usize> = windows.iter().map(|w| w.step_samples(DECODE_RATE_HZ)).collect();
    let spacing = *step_samples.iter().max().expect("non-empty");
    if step_samples.iter().any(|s| spacing % s != 0) {
        return Err(ExperimentError::Config(
            "every step must divide the longest one so all lengths share evaluation instants".into(),
        ));
    }
    let min_end = windows.iter().map(|w| w.required_samples(DECODE_RATE_HZ)).max().expect("non-empty") as u64;
    let raw = validation.recording()?;
    let latency_len = ((latency_s * f64::from(RAW_RATE_HZ)) as usize).min(raw.len());
    let latency_rec = raw.slice(0, latency_len).map_err(DatasetError::from)?;

    let cfg = EngineConfig {
        prediction_rate_hz: rate_hz,
        ..Default::default()
    };
    let mut trained_rows = Vec::with_capacity(lengths_s.len());
    for (w, &step) in windows.iter().zip(&step_samples) {
        let tpl = template(config, channels, *w)?;
        let step_ms = w.step_ms;
        let stride = ((TRAIN_SPACING_MS / step_ms).round() as usize).max(1);
        // Coarse grids yield fewer frames; more epochs keep the number of
        // updates level across lengths.
        let sparse = ((step_ms * stride as f64 / TRAIN_SPACING_MS).round() as usize).max(1);
        let tc = TrainConfig {
            max_epochs: tc.max_epochs * sparse,
            ..tc.clone()
        };
        let trained = train_on_sessions(&tpl, train_sessions, validation, &tc, stride, exec)?;
        let mut val = session_frames(&trained.model, validation, spacing / step, exec)?;
        val.retain_from(min_end);
        let score = score_frames(&trained.model, &val, exec)?;
        // The first pass warms caches and is discarded.
        run_offline(&latency_rec, &trained.model, &cfg)?;
        trained_rows.push((w, val.len(), score, trained.model));
    }
    // Lengths take turns over several rounds so load changes hit all alike.
    let mut pooled: Vec<Vec<FrameLatency>> = vec![Vec::new(); trained_rows.len()];
    for _ in 0..LATENCY_ROUNDS {
        for (frames, (_, _, _, model)) in pooled.iter_mut().zip(&trained_rows) {
            frames.extend(run_offline(&latency_rec, model, &cfg)?.latency.frames);
        }
    }
    let rows = trained_rows
        .into_iter()
        .zip(pooled)
        .map(|((w, frames, score, _), lat)| {
            let report = LatencyReport::new(lat);
            SweepRow {
                history_s: w.history_s,
                step_ms: w.step_ms,
                frames,
                score,
                feature_us: report.feature,
                decode_us: report.decode,
            }
        })
        .collect();
    Ok(rows)
}
