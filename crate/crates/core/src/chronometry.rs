//! Gesture matching task with a simulated subject, reaction-time statistics,
//! kernel density curves and cross-session persistence checks.
//!
//! Each trial starts from rest. The target is shown `pre_roll_s` into the
//! stream (time zero for reaction times); the subject reacts after a
//! lognormal delay and holds the gesture. The trial succeeds at the first
//! decoder tick after the cue whose thresholded output equals the target on
//! all six DOF, and fails if none does within the cutoff.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::engine::{EngineError, Pipeline};
use crate::experiment::{evaluate_session, retrain, ExperimentError, Retrain, SessionScore};
use crate::label::{gestures, GestureLabel, NUM_DOF};
use crate::metrics::{self, GestureDistribution, MetricsError, Throughput};
use crate::model::{ModelParams, TrainConfig};
use crate::par::Exec;
use crate::sigproc::RAW_RATE_HZ;
use crate::synthgen::{
    apply_drift, derive_seed, generate_script, generate_session, DriftSpec, ScriptStep, Session, SessionSpec,
    SubjectProfile, SynthError,
};

#[derive(Debug, thiserror::Error)]
pub enum ChronoError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchingTaskConfig {
    pub targets: Vec<GestureLabel>,
    pub cutoff_s: f64,
    pub prediction_rate_hz: f64,
    pub trials: usize,
    /// Rest before the cue; must cover the decoder's history.
    pub pre_roll_s: f64,
}

impl Default for MatchingTaskConfig {
    fn default() -> Self {
        let mut targets = vec![GestureLabel::REST];
        targets.extend(gestures::MATCHING_TARGETS);
        MatchingTaskConfig {
            targets,
            cutoff_s: 3.0,
            prediction_rate_hz: 10.0,
            trials: 200,
            pre_roll_s: 1.5,
        }
    }
}

impl MatchingTaskConfig {
    pub fn validate(&self) -> Result<(), ChronoError> {
        if !(self.cutoff_s > 0.0) {
            return Err(ChronoError::Config("cutoff must be positive".into()));
        }
        if !self.targets.contains(&GestureLabel::REST) {
            return Err(ChronoError::Config("targets must include rest".into()));
        }
        if self.shown_targets().is_empty() {
            return Err(ChronoError::Config("targets need at least one non-rest gesture".into()));
        }
        if self.trials == 0 {
            return Err(ChronoError::Config("at least one trial".into()));
        }
        if !(self.pre_roll_s > 0.0) {
            return Err(ChronoError::Config("pre-roll must be positive".into()));
        }
        Ok(())
    }

    /// Gestures that can be cued; rest only enters through the entropy count.
    pub fn shown_targets(&self) -> Vec<GestureLabel> {
        let mut t: Vec<GestureLabel> = self.targets.iter().copied().filter(|g| !g.is_rest()).collect();
        t.dedup();
        t
    }

    /// Bits per trial: rest then one of the cued gestures, half the mass on rest.
    pub fn bits_per_trial(&self) -> Result<f64, ChronoError> {
        let dist = GestureDistribution::rest_and_uniform(0.5, &self.shown_targets())?;
        Ok(metrics::info_per_trial(&dist, 2)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulatedSubject {
    pub profile: SubjectProfile,
    pub onset_median_s: f64,
    pub onset_sigma_log: f64,
    /// Probability that the first attempt is a wrong gesture.
    pub error_rate: f64,
    /// An attempt not matched this long after it started is abandoned.
    pub retry_after_s: f64,
    /// Rest between an abandoned attempt and the next one.
    pub relax_s: f64,
}

impl Default for SimulatedSubject {
    fn default() -> Self {
        SimulatedSubject {
            profile: SubjectProfile::benchmark16(),
            onset_median_s: 0.55,
            onset_sigma_log: 0.25,
            error_rate: 0.05,
            retry_after_s: 0.6,
            relax_s: 0.2,
        }
    }
}

impl SimulatedSubject {
    pub fn validate(&self) -> Result<(), ChronoError> {
        self.profile.validate()?;
        if !(self.onset_median_s > 0.0 && self.onset_sigma_log >= 0.0) {
            return Err(ChronoError::Config("onset delay must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.error_rate) {
            return Err(ChronoError::Config("error rate outside [0, 1]".into()));
        }
        if !(self.retry_after_s > 0.0 && self.relax_s >= 0.0) {
            return Err(ChronoError::Config("retry timing must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MachineLatency {
    pub feature_us: u32,
    pub decode_us: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceFrame {
    /// Seconds since the cue.
    pub t_s: f64,
    pub probabilities: [f64; NUM_DOF],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial_id: usize,
    pub target: GestureLabel,
    pub success: bool,
    /// Seconds from cue to the first all-DOF match; `None` on failure.
    pub reaction_time_s: Option<f64>,
    /// Per DOF, when its final run of matching ticks began (seconds since
    /// the cue, zero if it matched from the cue on). `None` on failure.
    pub per_dof_match_time_s: Option<[f64; NUM_DOF]>,
    pub onset_s: f64,
    pub attempts: u32,
    /// Stage timings of the deciding tick (the last tick for failures).
    pub latency: MachineLatency,
    pub trace: Vec<TraceFrame>,
}

impl TrialResult {
    /// One line of the trial log.
    pub fn log_line(&self) -> String {
        let rec = serde_json::json!({
            "trial_id": self.trial_id,
            "target": self.target,
            "success": self.success,
            "rt_s": self.reaction_time_s,
            "per_dof_ms": self.per_dof_match_time_s.map(|v| v.map(|t| (t * 1000.0).round())),
            "latencies": self.latency,
            "attempts": self.attempts,
            "onset_s": self.onset_s,
        });
        rec.to_string()
    }
}

struct TickOut {
    t_s: f64,
    probabilities: [f64; NUM_DOF],
    label: GestureLabel,
    latency: MachineLatency,
}

fn decode_stream(
    model: &ModelParams,
    rate_hz: f64,
    profile: &SubjectProfile,
    script: &[ScriptStep],
    samples: usize,
    seed: u64,
) -> Result<Vec<TickOut>, ChronoError> {
    let rec = generate_script(profile, script, samples, seed)?;
    let mut p = Pipeline::new(model, rate_hz)?;
    let mut out = Vec::new();
    let block = 1000;
    for lo in (0..rec.len()).step_by(block) {
        let hi = (lo + block).min(rec.len());
        let b: Vec<&[f64]> = rec.channels().iter().map(|c| &c[lo..hi]).collect();
        for e in p.push_block(&b, Instant::now())? {
            out.push(TickOut {
                t_s: e.prediction.timestamp_us as f64 / 1e6,
                probabilities: e.prediction.probabilities,
                label: e.prediction.label,
                latency: MachineLatency {
                    feature_us: e.prediction.feature_us,
                    decode_us: e.prediction.decode_us,
                },
            });
        }
    }
    Ok(out)
}

const EPS_T: f64 = 1e-9;

fn run_trial(
    model: &ModelParams,
    subject: &SimulatedSubject,
    cfg: &MatchingTaskConfig,
    targets: &[GestureLabel],
    trial_id: usize,
    seed: u64,
) -> Result<TrialResult, ChronoError> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, trial_id as u64));
    let target = targets[rng.gen_range(0..targets.len())];
    let onset = LogNormal::new(subject.onset_median_s.ln(), subject.onset_sigma_log)
        .map_err(|e| ChronoError::Config(e.to_string()))?
        .sample(&mut rng);
    let wrong_first = rng.gen::<f64>() < subject.error_rate;
    let wrong = {
        let others: Vec<GestureLabel> = targets.iter().copied().filter(|&g| g != target).collect();
        if others.is_empty() {
            target
        } else {
            others[rng.gen_range(0..others.len())]
        }
    };
    let signal_seed = rng.gen::<u64>();

    let fs = f64::from(RAW_RATE_HZ);
    let t0 = cfg.pre_roll_s;
    let end = t0 + cfg.cutoff_s;
    // Two extra raw samples let a tick falling exactly on the cutoff fire.
    let samples = (end * fs).ceil() as usize + 2;
    let at = |t: f64| (t * fs).round() as usize;

    let mut script = vec![ScriptStep {
        start_sample: 0,
        gesture: GestureLabel::REST,
    }];
    let mut attempt_t = t0 + onset;
    let mut gesture = if wrong_first { wrong } else { target };
    let mut attempts = 0;
    loop {
        if attempt_t < end {
            script.push(ScriptStep {
                start_sample: at(attempt_t),
                gesture,
            });
            attempts += 1;
        }
        let ticks = decode_stream(model, cfg.prediction_rate_hz, &subject.profile, &script, samples, signal_seed)?;
        let window: Vec<&TickOut> = ticks
            .iter()
            .filter(|t| t.t_s > t0 + EPS_T && t.t_s <= end + EPS_T)
            .collect();
        let hit = window.iter().position(|t| t.label == target);
        let deadline = attempt_t + subject.retry_after_s;
        let accept = match hit {
            Some(i) => window[i].t_s <= deadline + EPS_T || deadline >= end,
            None => false,
        };
        if accept || deadline >= end || attempt_t >= end {
            let trace = window
                .iter()
                .map(|t| TraceFrame {
                    t_s: t.t_s - t0,
                    probabilities: t.probabilities,
                })
                .collect();
            let latency = |i: usize| window.get(i).map_or(MachineLatency { feature_us: 0, decode_us: 0 }, |t| t.latency);
            return Ok(match hit.filter(|_| accept) {
                Some(i) => {
                    let first = ticks.iter().position(|t| std::ptr::eq(t, window[i])).expect("tick in window");
                    let per_dof = std::array::from_fn(|d| {
                        let want = target.is_flexed(d);
                        let mut j = first;
                        while j > 0 && ticks[j - 1].label.is_flexed(d) == want {
                            j -= 1;
                        }
                        (ticks[j].t_s - t0).max(0.0)
                    });
                    TrialResult {
                        trial_id,
                        target,
                        success: true,
                        reaction_time_s: Some(window[i].t_s - t0),
                        per_dof_match_time_s: Some(per_dof),
                        onset_s: onset,
                        attempts,
                        latency: latency(i),
                        trace,
                    }
                }
                None => TrialResult {
                    trial_id,
                    target,
                    success: false,
                    reaction_time_s: None,
                    per_dof_match_time_s: None,
                    onset_s: onset,
                    attempts,
                    latency: latency(window.len().saturating_sub(1)),
                    trace,
                },
            });
        }
        // Unmatched at the deadline: relax, then try the target again.
        script.push(ScriptStep {
            start_sample: at(deadline),
            gesture: GestureLabel::REST,
        });
        attempt_t = deadline + subject.relax_s;
        gesture = target;
    }
}

/// Runs `cfg.trials` independent trials; trial `i` draws everything from
/// `derive_seed(seed, i)`, so results do not depend on `exec`.
pub fn run_matching_session(
    model: &ModelParams,
    subject: &SimulatedSubject,
    cfg: &MatchingTaskConfig,
    seed: u64,
    exec: Exec,
) -> Result<Vec<TrialResult>, ChronoError> {
    cfg.validate()?;
    subject.validate()?;
    if subject.profile.channels != model.channels {
        return Err(ChronoError::Config(format!(
            "subject has {} channels, model expects {}",
            subject.profile.channels, model.channels
        )));
    }
    if cfg.pre_roll_s < model.window.required_s() {
        return Err(ChronoError::Config(format!(
            "pre-roll {} s is shorter than the decoder history {} s",
            cfg.pre_roll_s,
            model.window.required_s()
        )));
    }
    Pipeline::new(model, cfg.prediction_rate_hz)?;
    let targets = cfg.shown_targets();
    exec.map_range(cfg.trials, |i| run_trial(model, subject, cfg, &targets, i, seed))
        .into_iter()
        .collect()
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GestureStats {
    pub target: GestureLabel,
    pub trials: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub median_rt_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReactionStats {
    pub trials: usize,
    pub successes: usize,
    pub success_rate: f64,
    /// Over successful trials only; `None` when there were none.
    pub median_rt_s: Option<f64>,
    /// Median with failures counted at the cutoff.
    pub median_rt_with_failures_s: Option<f64>,
    pub per_gesture: Vec<GestureStats>,
}

fn stats_of(results: &[&TrialResult]) -> (usize, f64, Option<f64>) {
    let rts: Vec<f64> = results.iter().filter_map(|r| r.reaction_time_s).collect();
    let n = results.len();
    (rts.len(), rts.len() as f64 / n as f64, median(&rts))
}

pub fn reaction_stats(results: &[TrialResult], cutoff_s: f64) -> Result<ReactionStats, ChronoError> {
    if results.is_empty() {
        return Err(ChronoError::Config("no trials".into()));
    }
    let all: Vec<&TrialResult> = results.iter().collect();
    let (successes, success_rate, median_rt_s) = stats_of(&all);
    let with_fail: Vec<f64> = results.iter().map(|r| r.reaction_time_s.unwrap_or(cutoff_s)).collect();
    let mut targets: Vec<GestureLabel> = results.iter().map(|r| r.target).collect();
    targets.sort_by_key(|g| g.mask());
    targets.dedup();
    let per_gesture = targets
        .into_iter()
        .map(|g| {
            let sub: Vec<&TrialResult> = results.iter().filter(|r| r.target == g).collect();
            let (s, rate, med) = stats_of(&sub);
            GestureStats {
                target: g,
                trials: sub.len(),
                successes: s,
                success_rate: rate,
                median_rt_s: med,
            }
        })
        .collect();
    Ok(ReactionStats {
        trials: results.len(),
        successes,
        success_rate,
        median_rt_s,
        median_rt_with_failures_s: median(&with_fail),
        per_gesture,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchingReport {
    pub stats: ReactionStats,
    pub bits_per_trial: f64,
    /// From the session's success rate and median reaction time.
    pub pooled: Option<Throughput>,
    /// Mean over gestures of each gesture's own throughput.
    pub per_gesture_mean_bps: Option<f64>,
}

pub fn matching_report(results: &[TrialResult], cfg: &MatchingTaskConfig) -> Result<MatchingReport, ChronoError> {
    let stats = reaction_stats(results, cfg.cutoff_s)?;
    let bits = cfg.bits_per_trial()?;
    let pooled = stats
        .median_rt_s
        .map(|rt| metrics::information_throughput(stats.success_rate, bits, rt))
        .transpose()?;
    let per: Vec<f64> = stats
        .per_gesture
        .iter()
        .filter_map(|g| g.median_rt_s.map(|rt| metrics::information_throughput(g.success_rate, bits, rt)))
        .map(|t| t.map(|t| t.bps))
        .collect::<Result<_, _>>()?;
    let per_gesture_mean_bps = (!per.is_empty()).then(|| per.iter().sum::<f64>() / per.len() as f64);
    Ok(MatchingReport {
        stats,
        bits_per_trial: bits,
        pooled,
        per_gesture_mean_bps,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Bandwidth {
    Silverman,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdeCurve {
    pub bandwidth: f64,
    pub x: Vec<f64>,
    pub density: Vec<f64>,
}

impl KdeCurve {
    /// Trapezoid integral over the grid.
    pub fn integral(&self) -> f64 {
        self.x
            .windows(2)
            .zip(self.density.windows(2))
            .map(|(x, d)| 0.5 * (x[1] - x[0]) * (d[0] + d[1]))
            .sum()
    }

    /// Grid points that are strict local maxima (plateaus count once).
    pub fn peaks(&self) -> Vec<f64> {
        let d = &self.density;
        let n = d.len();
        let mut out = Vec::new();
        let mut i = 0;
        while i < n {
            let mut j = i;
            while j + 1 < n && d[j + 1] == d[i] {
                j += 1;
            }
            let left = i == 0 || d[i - 1] < d[i];
            let right = j == n - 1 || d[j + 1] < d[i];
            if left && right && d[i] > 0.0 {
                out.push(self.x[(i + j) / 2]);
            }
            i = j + 1;
        }
        out
    }

    /// Two whitespace-separated columns, one grid point per line.
    pub fn to_columns(&self) -> String {
        self.x
            .iter()
            .zip(&self.density)
            .map(|(x, d)| format!("{x:.6} {d:.9}\n"))
            .collect()
    }
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Silverman's rule: `0.9 · min(σ, IQR/1.34) · n^(-1/5)`, falling back to σ
/// when the IQR is zero.
pub fn silverman_bandwidth(samples: &[f64]) -> Result<f64, ChronoError> {
    if samples.len() < 2 {
        return Err(ChronoError::Config("bandwidth needs at least two samples".into()));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let sd = (samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let iqr = quantile(&s, 0.75) - quantile(&s, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    if !(spread > 0.0) || !spread.is_finite() {
        return Err(ChronoError::Config("samples have no spread".into()));
    }
    Ok(0.9 * spread * n.powf(-0.2))
}

/// Gaussian kernel density on `points` evenly spaced values over `[lo, hi]`.
pub fn kde_density(samples: &[f64], bandwidth: Bandwidth, lo: f64, hi: f64, points: usize) -> Result<KdeCurve, ChronoError> {
    if samples.len() < 2 {
        return Err(ChronoError::Config("density needs at least two samples".into()));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(ChronoError::Config("non-finite sample".into()));
    }
    if !(hi > lo) || points < 2 {
        return Err(ChronoError::Config("grid needs hi > lo and two points".into()));
    }
    let h = match bandwidth {
        Bandwidth::Silverman => silverman_bandwidth(samples)?,
        Bandwidth::Fixed(h) if h > 0.0 => h,
        Bandwidth::Fixed(h) => return Err(ChronoError::Config(format!("bandwidth {h} must be positive"))),
    };
    let norm = 1.0 / (samples.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    let x: Vec<f64> = (0..points).map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64).collect();
    let density = x
        .iter()
        .map(|&g| norm * samples.iter().map(|&s| (-0.5 * ((g - s) / h).powi(2)).exp()).sum::<f64>())
        .collect();
    Ok(KdeCurve { bandwidth: h, x, density })
}

pub const KDE_POINTS: usize = 512;

/// Reaction-time density on the task grid: 512 points over `[0, cutoff]`.
pub fn rt_density(samples: &[f64], cutoff_s: f64) -> Result<KdeCurve, ChronoError> {
    kde_density(samples, Bandwidth::Silverman, 0.0, cutoff_s, KDE_POINTS)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossSessionReport {
    pub baseline: SessionScore,
    pub retrained: Option<SessionScore>,
}

/// Scores `model` on `eval_session`; with `retrain_on`, also scores a model
/// retrained on that session.
pub fn cross_session_eval(
    model: &ModelParams,
    eval_session: &Session,
    retrain_on: Option<(&Session, &TrainConfig, Retrain)>,
    stride: usize,
    exec: Exec,
) -> Result<CrossSessionReport, ChronoError> {
    let baseline = evaluate_session(model, eval_session, exec)?;
    let retrained = match retrain_on {
        Some((train_session, tc, mode)) => {
            let m = retrain(model, train_session, tc, mode, stride, exec)?;
            Some(evaluate_session(&m, eval_session, exec)?)
        }
        None => None,
    };
    Ok(CrossSessionReport { baseline, retrained })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftPoint {
    pub days: u32,
    pub score: SessionScore,
}

/// Scores `model` on sessions generated from the drifted profile at each
/// entry of `days`. All sessions share `seed`, so only the drift differs.
pub fn drift_sweep(
    model: &ModelParams,
    profile: &SubjectProfile,
    drift: &DriftSpec,
    days: &[u32],
    spec: &SessionSpec,
    seed: u64,
    exec: Exec,
) -> Result<Vec<DriftPoint>, ChronoError> {
    days.iter()
        .map(|&d| {
            let p = apply_drift(profile, drift, d);
            let s = generate_session(&p, &SessionSpec { day_index: d, ..spec.clone() }, seed)?;
            Ok(DriftPoint {
                days: d,
                score: evaluate_session(model, &s, exec)?,
            })
        })
        .collect()
}
