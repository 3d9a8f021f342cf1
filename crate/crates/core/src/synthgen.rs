//! Synthetic nerve recordings with aligned gesture labels.
//!
//! Each flexed DOF fires Poisson-timed biphasic bursts (one sine period of
//! `width_ms`) on the channels it projects to, on top of independent Gaussian
//! background noise. Burst amplitude is calibrated so that a gain-1 channel
//! reaches the profile's SNR target after the band-pass frontend.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::label::{gestures, GestureLabel, GestureParseError, NUM_DOF};
use crate::sigproc::{self, BandSpec, BandpassFilter, Recording, SigprocError, RAW_RATE_HZ};

/// Labels are sampled every 20 ms.
pub const LABEL_PERIOD_MS: u64 = 20;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error(transparent)]
    Gesture(#[from] GestureParseError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Signal(#[from] SigprocError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BurstSpec {
    pub rate_hz: f64,
    pub amplitude: f64,
    pub width_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectProfile {
    pub channels: usize,
    /// `gains[d][c]`: how strongly DOF `d` appears on channel `c`.
    pub gains: Vec<Vec<f64>>,
    pub burst: BurstSpec,
    /// Standard deviation of the raw background noise.
    pub noise_floor: f64,
    /// Target flex/rest ratio of dB strengths on a gain-1 channel.
    pub snr_db_target: f64,
    pub wrist_distinct: bool,
}

impl SubjectProfile {
    /// Sixteen channels, two primary channels per DOF with cross-talk onto
    /// the neighbours; wrist energy sits on its own pair.
    pub fn benchmark16() -> Self {
        let channels = 16;
        let mut gains = vec![vec![0.0; channels]; NUM_DOF];
        for (d, g) in gains.iter_mut().enumerate().take(5) {
            g[2 * d] = 1.0;
            g[2 * d + 1] = 1.0;
            if d > 0 {
                g[2 * d - 1] = 0.3;
            }
            if d < 4 {
                g[2 * d + 2] = 0.3;
            }
        }
        gains[5][10] = 1.0;
        gains[5][11] = 1.0;
        for (c, pair) in [(12, [0, 1]), (13, [2, 3]), (14, [3, 4]), (15, [1, 2])] {
            for d in pair {
                gains[d][c] = 0.5;
            }
        }
        SubjectProfile {
            channels,
            gains,
            burst: BurstSpec {
                rate_hz: 80.0,
                amplitude: 0.0,
                width_ms: 3.0,
            },
            noise_floor: 5.0,
            snr_db_target: 2.0,
            wrist_distinct: true,
        }
        .calibrated()
        .expect("built-in profile is valid")
    }

    /// Eight channels over the ulnar side: ring and little are strong,
    /// thumb, index and middle only reach the array weakly.
    pub fn ulnar8() -> Self {
        let channels = 8;
        let mut gains = vec![vec![0.0; channels]; NUM_DOF];
        gains[0][0] = 0.25;
        gains[1][1] = 0.25;
        gains[2][2] = 0.25;
        gains[0][1] = 0.1;
        gains[1][2] = 0.1;
        gains[5][3] = 0.6;
        gains[3][4] = 1.0;
        gains[3][5] = 1.0;
        gains[4][6] = 1.0;
        gains[4][7] = 1.0;
        gains[3][6] = 0.2;
        SubjectProfile {
            channels,
            gains,
            burst: BurstSpec {
                rate_hz: 80.0,
                amplitude: 0.0,
                width_ms: 3.0,
            },
            noise_floor: 5.0,
            snr_db_target: 2.0,
            wrist_distinct: false,
        }
        .calibrated()
        .expect("built-in profile is valid")
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.channels == 0 || self.channels > sigproc::MAX_CHANNELS {
            return Err(SynthError::Config(format!("{} channels", self.channels)));
        }
        if self.gains.len() != NUM_DOF || self.gains.iter().any(|g| g.len() != self.channels) {
            return Err(SynthError::Config("gain matrix must be 6 x channels".into()));
        }
        if self.gains.iter().flatten().any(|g| !g.is_finite()) {
            return Err(SynthError::Config("non-finite gain".into()));
        }
        if self.gains.iter().any(|g| g.iter().all(|&v| v == 0.0)) {
            return Err(SynthError::Config("every DOF needs at least one channel".into()));
        }
        if !(self.noise_floor > 0.0 && self.burst.rate_hz >= 0.0 && self.burst.width_ms > 0.0) {
            return Err(SynthError::Config("noise, rate and width must be positive".into()));
        }
        Ok(())
    }

    fn pulse(&self) -> Vec<f64> {
        let w = ((self.burst.width_ms * f64::from(RAW_RATE_HZ) / 1000.0).round() as usize).max(2);
        (0..w)
            .map(|j| (2.0 * std::f64::consts::PI * j as f64 / w as f64).sin())
            .collect()
    }

    /// Expected band-passed noise power (linear) at the raw rate.
    pub fn filtered_noise_power(&self) -> f64 {
        let filt = frontend_filter();
        let h = filt.impulse_response(20_000);
        self.noise_floor * self.noise_floor * h.iter().map(|v| v * v).sum::<f64>()
    }

    /// Expected band-passed rest strength in dB.
    pub fn rest_power_db(&self) -> f64 {
        10.0 * self.filtered_noise_power().log10()
    }

    /// Sets the burst amplitude so a gain-1 channel reaches the SNR target.
    /// The filtered burst train's power follows Campbell's theorem:
    /// `rate · Σ(h * pulse)² / fs` per unit amplitude squared.
    pub fn calibrated(mut self) -> Result<Self, SynthError> {
        self.validate()?;
        let filt = frontend_filter();
        let pulse = self.pulse();
        let mut st = filt.new_state();
        let padded = pulse.iter().copied().chain(std::iter::repeat(0.0).take(20_000));
        let energy: f64 = padded.map(|x| filt.process(&mut st, x).powi(2)).sum();
        let noise = self.filtered_noise_power();
        let rest_db = 10.0 * noise.log10();
        let flex = 10f64.powf(self.snr_db_target * rest_db / 10.0);
        if !(flex > noise) || self.burst.rate_hz <= 0.0 {
            return Err(SynthError::Config(format!(
                "SNR target {} unreachable with rest strength {rest_db:.2} dB",
                self.snr_db_target
            )));
        }
        self.burst.amplitude =
            ((flex - noise) * f64::from(RAW_RATE_HZ) / (self.burst.rate_hz * energy)).sqrt();
        Ok(self)
    }

    /// Hex SHA-256 of the profile's JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("plain data");
        Sha256::digest(json)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

fn frontend_filter() -> BandpassFilter {
    BandpassFilter::design(f64::from(RAW_RATE_HZ), &BandSpec::default()).expect("default band")
}

/// Per-day parameter drift between sessions.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DriftSpec {
    /// Fraction of each channel's gain that migrates to the next channel per day.
    pub gain_drift_per_day: f64,
    /// Change of the background noise level per day.
    pub baseline_shift_per_day: f64,
    pub burst_rate_drift_per_day: f64,
}

/// Shifts the profile linearly in `days`; zero days is the identity.
pub fn apply_drift(profile: &SubjectProfile, drift: &DriftSpec, days: u32) -> SubjectProfile {
    let k = f64::from(days);
    let c = profile.channels;
    let mut out = profile.clone();
    for (d, row) in out.gains.iter_mut().enumerate() {
        let base = &profile.gains[d];
        for ch in 0..c {
            let delta = base[(ch + c - 1) % c] - base[ch];
            row[ch] = base[ch] + k * drift.gain_drift_per_day * delta;
        }
    }
    out.noise_floor = profile.noise_floor + k * drift.baseline_shift_per_day;
    out.burst.rate_hz = profile.burst.rate_hz + k * drift.burst_rate_drift_per_day;
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSpec {
    pub gestures: Vec<GestureLabel>,
    pub repetitions: usize,
    pub hold_s: f64,
    pub rest_s: f64,
    pub session_id: String,
    pub day_index: u32,
}

impl Default for SessionSpec {
    fn default() -> Self {
        SessionSpec {
            gestures: gestures::SESSION_GESTURES.to_vec(),
            repetitions: 10,
            hold_s: 1.5,
            rest_s: 1.5,
            session_id: "session".into(),
            day_index: 0,
        }
    }
}

impl SessionSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.repetitions == 0 || self.gestures.is_empty() {
            return Err(SynthError::Config("need at least one gesture and repetition".into()));
        }
        for d in [self.hold_s, self.rest_s] {
            let ms = d * 1000.0;
            if !(d > 0.0) || (ms / LABEL_PERIOD_MS as f64).fract().abs() > 1e-9 {
                return Err(SynthError::Config(format!(
                    "duration {d} s must be a positive multiple of {LABEL_PERIOD_MS} ms"
                )));
            }
        }
        Ok(())
    }
}

/// Gesture label valid from `timestamp_ms` for one label period.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRow {
    pub timestamp_ms: u64,
    pub gesture: GestureLabel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub gesture: GestureLabel,
    pub seed: u64,
    pub start_ms: u64,
    pub recording: Recording,
    pub labels: Vec<LabelRow>,
}

/// A gesture that starts at a raw sample index and lasts until the next one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScriptStep {
    pub start_sample: usize,
    pub gesture: GestureLabel,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

const BURST_STREAM: u64 = 1 << 32;

/// Raw 10 kHz signal for a gesture script. Noise on channel `c` and burst
/// times of DOF `d` come from separate streams of `seed`, so changing the
/// gesture leaves every other source's realization unchanged. Samples are
/// rounded to f32 so recordings survive the on-disk format unchanged.
pub fn generate_script(
    profile: &SubjectProfile,
    script: &[ScriptStep],
    total_samples: usize,
    seed: u64,
) -> Result<Recording, SynthError> {
    profile.validate()?;
    if total_samples == 0 {
        return Err(SynthError::Config("empty script".into()));
    }
    if script.windows(2).any(|w| w[0].start_sample > w[1].start_sample) {
        return Err(SynthError::Config("script steps must be ordered".into()));
    }
    let flexed_at = |dof: usize, i: usize| -> bool {
        script
            .iter()
            .rev()
            .find(|s| s.start_sample <= i)
            .is_some_and(|s| s.gesture.is_flexed(dof))
    };
    let noise = Normal::new(0.0, profile.noise_floor)
        .map_err(|e| SynthError::Config(e.to_string()))?;
    let mut samples: Vec<Vec<f64>> = (0..profile.channels)
        .map(|c| {
            let mut r = rng_for(seed, c as u64);
            (0..total_samples).map(|_| noise.sample(&mut r)).collect()
        })
        .collect();

    let pulse = profile.pulse();
    let fs = f64::from(RAW_RATE_HZ);
    let amp = profile.burst.amplitude;
    if profile.burst.rate_hz > 0.0 {
        let gap = Exp::new(profile.burst.rate_hz).map_err(|e| SynthError::Config(e.to_string()))?;
        for dof in 0..NUM_DOF {
            let mut r = rng_for(seed, BURST_STREAM + dof as u64);
            let mut t = gap.sample(&mut r);
            loop {
                let start = (t * fs) as usize;
                if start >= total_samples {
                    break;
                }
                if flexed_at(dof, start) {
                    for (c, ch) in samples.iter_mut().enumerate() {
                        let g = profile.gains[dof][c];
                        if g == 0.0 {
                            continue;
                        }
                        for (j, p) in pulse.iter().enumerate() {
                            if let Some(v) = ch.get_mut(start + j) {
                                *v += amp * g * p;
                            }
                        }
                    }
                }
                t += gap.sample(&mut r);
            }
        }
    }
    for v in samples.iter_mut().flatten() {
        *v = f64::from(*v as f32);
    }
    Ok(Recording::new(RAW_RATE_HZ, samples)?)
}

fn label_rows(gesture: GestureLabel, start_ms: u64, duration_ms: u64) -> Vec<LabelRow> {
    (0..duration_ms / LABEL_PERIOD_MS)
        .map(|k| LabelRow {
            timestamp_ms: start_ms + k * LABEL_PERIOD_MS,
            gesture,
        })
        .collect()
}

/// One held gesture of `duration_s`, labels starting at `start_ms`.
pub fn generate_segment(
    gesture: GestureLabel,
    profile: &SubjectProfile,
    duration_s: f64,
    start_ms: u64,
    seed: u64,
) -> Result<Segment, SynthError> {
    let n = (duration_s * f64::from(RAW_RATE_HZ)).round() as usize;
    let recording = generate_script(
        profile,
        &[ScriptStep {
            start_sample: 0,
            gesture,
        }],
        n,
        seed,
    )?;
    let duration_ms = (duration_s * 1000.0).round() as u64;
    Ok(Segment {
        gesture,
        seed,
        start_ms,
        recording,
        labels: label_rows(gesture, start_ms, duration_ms),
    })
}

/// Parses a gesture string and generates its segment.
pub fn generate_segment_str(
    gesture: &str,
    profile: &SubjectProfile,
    duration_s: f64,
    seed: u64,
) -> Result<Segment, SynthError> {
    generate_segment(gesture.parse()?, profile, duration_s, 0, seed)
}

/// SplitMix64 step, used to derive per-segment seeds.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(index.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentInfo {
    pub index: usize,
    pub gesture: GestureLabel,
    pub seed: u64,
    pub start_ms: u64,
    pub duration_ms: u64,
}

/// A generated session: segments in recording order plus what produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub profile: SubjectProfile,
    pub spec: SessionSpec,
    pub seed: u64,
    pub segments: Vec<Segment>,
}

impl Session {
    pub fn manifest(&self) -> Vec<SegmentInfo> {
        self.segments
            .iter()
            .enumerate()
            .map(|(index, s)| SegmentInfo {
                index,
                gesture: s.gesture,
                seed: s.seed,
                start_ms: s.start_ms,
                duration_ms: (s.recording.duration_s() * 1000.0).round() as u64,
            })
            .collect()
    }

    pub fn active_segments(&self) -> usize {
        self.segments.iter().filter(|s| !s.gesture.is_rest()).count()
    }

    /// The whole session as one continuous recording.
    pub fn recording(&self) -> Result<Recording, SynthError> {
        let parts: Vec<Recording> = self.segments.iter().map(|s| s.recording.clone()).collect();
        Ok(Recording::concat(&parts)?)
    }

    pub fn labels(&self) -> Vec<LabelRow> {
        self.segments.iter().flat_map(|s| s.labels.iter().copied()).collect()
    }

    /// Splits before segment `at`; the second part's times restart at zero.
    pub fn split_at(&self, at: usize) -> Result<(Session, Session), SynthError> {
        if at == 0 || at >= self.segments.len() {
            return Err(SynthError::Config(format!(
                "split point {at} must leave segments on both sides of {}",
                self.segments.len()
            )));
        }
        let first = Session {
            segments: self.segments[..at].to_vec(),
            ..self.clone()
        };
        let base = self.segments[at].start_ms;
        let rest = self.segments[at..]
            .iter()
            .map(|s| Segment {
                start_ms: s.start_ms - base,
                labels: s
                    .labels
                    .iter()
                    .map(|r| LabelRow {
                        timestamp_ms: r.timestamp_ms - base,
                        gesture: r.gesture,
                    })
                    .collect(),
                ..s.clone()
            })
            .collect();
        let mut second = self.clone();
        second.segments = rest;
        second.spec.session_id = format!("{}-split", self.spec.session_id);
        Ok((first, second))
    }
}

/// Rest, gesture, rest, gesture, … cycling through the gesture list once per
/// repetition, closed by a final rest.
pub fn generate_session(
    profile: &SubjectProfile,
    spec: &SessionSpec,
    seed: u64,
) -> Result<Session, SynthError> {
    spec.validate()?;
    profile.validate()?;
    let mut order = Vec::new();
    for _ in 0..spec.repetitions {
        for &g in &spec.gestures {
            order.push((GestureLabel::REST, spec.rest_s));
            order.push((g, spec.hold_s));
        }
    }
    order.push((GestureLabel::REST, spec.rest_s));

    let mut start_ms = 0u64;
    let mut segments = Vec::with_capacity(order.len());
    for (i, (g, dur)) in order.into_iter().enumerate() {
        let seg = generate_segment(g, profile, dur, start_ms, derive_seed(seed, i as u64))?;
        start_ms += (dur * 1000.0).round() as u64;
        segments.push(seg);
    }
    Ok(Session {
        profile: profile.clone(),
        spec: spec.clone(),
        seed,
        segments,
    })
}

/// Draws a gesture uniformly from `targets`.
pub fn pick<R: Rng>(rng: &mut R, targets: &[GestureLabel]) -> GestureLabel {
    targets[rng.gen_range(0..targets.len())]
}
