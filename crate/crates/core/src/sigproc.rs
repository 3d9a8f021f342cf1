//! Signal frontend: Butterworth band-pass, decimation, and signal strength.

use std::io::{self, Read, Write};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

pub const RAW_RATE_HZ: u32 = 10_000;
pub const DECODE_RATE_HZ: u32 = 5_000;
pub const MAX_CHANNELS: usize = 16;
/// Filter transient discarded before any power or SNR measurement.
pub const WARMUP_S: f64 = 0.2;

const NRD_MAGIC: &[u8; 4] = b"NRD1";

#[derive(Debug, thiserror::Error)]
pub enum SigprocError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("SNR undefined: rest power is 0 dB")]
    UndefinedSnr,
    #[error("SNR undefined: non-finite power ({flex_db} dB flex, {rest_db} dB rest)")]
    NonFinitePower { flex_db: f64, rest_db: f64 },
    #[error("malformed recording file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// A block of multichannel samples at a fixed rate. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    sample_rate_hz: u32,
    channel_ids: Vec<u16>,
    samples: Vec<Vec<f64>>,
}

impl Recording {
    pub fn new(sample_rate_hz: u32, samples: Vec<Vec<f64>>) -> Result<Self, SigprocError> {
        let ids = (0..samples.len() as u16).collect();
        Self::with_ids(sample_rate_hz, ids, samples)
    }

    pub fn with_ids(
        sample_rate_hz: u32,
        channel_ids: Vec<u16>,
        samples: Vec<Vec<f64>>,
    ) -> Result<Self, SigprocError> {
        if samples.is_empty() || samples.len() > MAX_CHANNELS {
            return Err(SigprocError::Data(format!(
                "channel count {} outside 1..={MAX_CHANNELS}",
                samples.len()
            )));
        }
        if channel_ids.len() != samples.len() {
            return Err(SigprocError::Data("channel id count mismatch".into()));
        }
        let n = samples[0].len();
        if n == 0 {
            return Err(SigprocError::Data("empty recording".into()));
        }
        if samples.iter().any(|c| c.len() != n) {
            return Err(SigprocError::Data("channels have unequal length".into()));
        }
        if f64::from(sample_rate_hz) <= 2.0 * BandSpec::default().high_hz {
            return Err(SigprocError::Config(format!(
                "sample rate {sample_rate_hz} Hz too low for the 600 Hz band edge"
            )));
        }
        Ok(Recording {
            sample_rate_hz,
            channel_ids,
            samples,
        })
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn channel_count(&self) -> usize {
        self.samples.len()
    }

    pub fn len(&self) -> usize {
        self.samples[0].len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn duration_s(&self) -> f64 {
        self.len() as f64 / f64::from(self.sample_rate_hz)
    }

    pub fn channel_ids(&self) -> &[u16] {
        &self.channel_ids
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.samples[c]
    }

    pub fn channels(&self) -> &[Vec<f64>] {
        &self.samples
    }

    pub fn into_channels(self) -> Vec<Vec<f64>> {
        self.samples
    }

    /// Samples `[start, end)` of every channel.
    pub fn slice(&self, start: usize, end: usize) -> Result<Recording, SigprocError> {
        if start >= end || end > self.len() {
            return Err(SigprocError::Data(format!(
                "slice {start}..{end} outside recording of {} samples",
                self.len()
            )));
        }
        Ok(Recording {
            sample_rate_hz: self.sample_rate_hz,
            channel_ids: self.channel_ids.clone(),
            samples: self.samples.iter().map(|c| c[start..end].to_vec()).collect(),
        })
    }

    /// Joins recordings end to end. All parts must share rate and channel layout.
    pub fn concat(parts: &[Recording]) -> Result<Recording, SigprocError> {
        let first = parts
            .first()
            .ok_or_else(|| SigprocError::Data("nothing to concatenate".into()))?;
        let mut samples = vec![Vec::new(); first.channel_count()];
        for p in parts {
            if p.sample_rate_hz != first.sample_rate_hz || p.channel_ids != first.channel_ids {
                return Err(SigprocError::Data("recordings differ in rate or layout".into()));
            }
            for (dst, src) in samples.iter_mut().zip(&p.samples) {
                dst.extend_from_slice(src);
            }
        }
        Ok(Recording {
            sample_rate_hz: first.sample_rate_hz,
            channel_ids: first.channel_ids.clone(),
            samples,
        })
    }

    /// Writes the little-endian "NRD1" layout: magic, u32 rate, u16 channels,
    /// u64 samples per channel, then channel-major f32 samples.
    pub fn write_nrd1<W: Write>(&self, mut w: W) -> Result<(), SigprocError> {
        let mut buf = Vec::with_capacity(18 + 4 * self.len() * self.channel_count());
        buf.extend_from_slice(NRD_MAGIC);
        buf.extend_from_slice(&self.sample_rate_hz.to_le_bytes());
        buf.extend_from_slice(&(self.channel_count() as u16).to_le_bytes());
        buf.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for ch in &self.samples {
            for &v in ch {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_nrd1<R: Read>(mut r: R) -> Result<Recording, SigprocError> {
        let mut header = [0u8; 18];
        r.read_exact(&mut header)
            .map_err(|_| SigprocError::Format("truncated header".into()))?;
        if &header[0..4] != NRD_MAGIC {
            return Err(SigprocError::Format("bad magic".into()));
        }
        let rate = u32::from_le_bytes(header[4..8].try_into().unwrap());
        let channels = u16::from_le_bytes(header[8..10].try_into().unwrap()) as usize;
        let n = u64::from_le_bytes(header[10..18].try_into().unwrap()) as usize;
        if channels == 0 || channels > MAX_CHANNELS {
            return Err(SigprocError::Format(format!("channel count {channels}")));
        }
        let mut body = Vec::new();
        r.read_to_end(&mut body)?;
        if body.len() != channels * n * 4 {
            return Err(SigprocError::Format(format!(
                "expected {} payload bytes, found {}",
                channels * n * 4,
                body.len()
            )));
        }
        let samples = body
            .chunks_exact(n * 4)
            .map(|ch| {
                ch.chunks_exact(4)
                    .map(|b| f64::from(f32::from_le_bytes(b.try_into().unwrap())))
                    .collect()
            })
            .collect();
        Recording::new(rate, samples)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandSpec {
    pub low_hz: f64,
    pub high_hz: f64,
    /// Order of the low-pass prototype; the band-pass has twice as many poles.
    pub order: usize,
}

impl Default for BandSpec {
    fn default() -> Self {
        BandSpec {
            low_hz: 25.0,
            high_hz: 600.0,
            order: 4,
        }
    }
}

impl BandSpec {
    pub fn validate(&self, sample_rate_hz: f64) -> Result<(), SigprocError> {
        if !(self.low_hz > 0.0 && self.low_hz < self.high_hz) {
            return Err(SigprocError::Config(format!(
                "band edges {}..{} Hz out of order",
                self.low_hz, self.high_hz
            )));
        }
        if self.high_hz >= sample_rate_hz / 2.0 {
            return Err(SigprocError::Config(format!(
                "upper edge {} Hz at or above Nyquist for {} Hz",
                self.high_hz, sample_rate_hz
            )));
        }
        if self.order == 0 || self.order % 2 != 0 {
            return Err(SigprocError::Config(format!(
                "filter order {} must be even and positive",
                self.order
            )));
        }
        Ok(())
    }
}

/// Normalized second-order section, `a0 = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub a1: f64,
    pub a2: f64,
}

impl Biquad {
    #[inline]
    fn step(&self, state: &mut [f64; 2], x: f64) -> f64 {
        let y = self.b0 * x + state[0];
        state[0] = self.b1 * x - self.a1 * y + state[1];
        state[1] = self.b2 * x - self.a2 * y;
        y
    }

    fn response(&self, omega: f64) -> Complex64 {
        let z1 = Complex64::from_polar(1.0, -omega);
        let z2 = z1 * z1;
        (self.b0 + self.b1 * z1 + self.b2 * z2) / (1.0 + self.a1 * z1 + self.a2 * z2)
    }
}

/// Digital Butterworth band-pass as a cascade of second-order sections.
#[derive(Debug, Clone, PartialEq)]
pub struct BandpassFilter {
    sections: Vec<Biquad>,
    sample_rate_hz: f64,
}

/// Per-channel delay-line state for a [`BandpassFilter`].
#[derive(Debug, Clone, PartialEq)]
pub struct FilterState(Vec<[f64; 2]>);

impl BandpassFilter {
    /// Bilinear-transform design with pre-warped edges. Each prototype pole
    /// pair maps to two sections with zeros at DC and Nyquist; every section
    /// is scaled to unit gain at the band centre.
    pub fn design(sample_rate_hz: f64, band: &BandSpec) -> Result<Self, SigprocError> {
        band.validate(sample_rate_hz)?;
        let fs2 = 2.0 * sample_rate_hz;
        let warp = |f: f64| fs2 * (std::f64::consts::PI * f / sample_rate_hz).tan();
        let wl = warp(band.low_hz);
        let wh = warp(band.high_hz);
        let bw = wh - wl;
        let w0sq = wl * wh;
        let centre = 2.0 * (w0sq.sqrt() / fs2).atan();

        let n = band.order;
        let mut sections = Vec::with_capacity(n);
        for k in 0..n / 2 {
            let theta = std::f64::consts::FRAC_PI_2
                + std::f64::consts::PI * (2 * k + 1) as f64 / (2 * n) as f64;
            let p = Complex64::from_polar(1.0, theta);
            let disc = (p * p * bw * bw - 4.0 * w0sq).sqrt();
            for s in [(p * bw + disc) / 2.0, (p * bw - disc) / 2.0] {
                let z = (fs2 + s) / (fs2 - s);
                let mut sec = Biquad {
                    b0: 1.0,
                    b1: 0.0,
                    b2: -1.0,
                    a1: -2.0 * z.re,
                    a2: z.norm_sqr(),
                };
                let g = 1.0 / sec.response(centre).norm();
                sec.b0 *= g;
                sec.b2 *= g;
                sections.push(sec);
            }
        }
        Ok(BandpassFilter {
            sections,
            sample_rate_hz,
        })
    }

    pub fn sections(&self) -> &[Biquad] {
        &self.sections
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.sample_rate_hz
    }

    pub fn new_state(&self) -> FilterState {
        FilterState(vec![[0.0; 2]; self.sections.len()])
    }

    #[inline]
    pub fn process(&self, state: &mut FilterState, x: f64) -> f64 {
        self.sections
            .iter()
            .zip(state.0.iter_mut())
            .fold(x, |acc, (s, st)| s.step(st, acc))
    }

    pub fn filter_slice(&self, state: &mut FilterState, xs: &[f64]) -> Vec<f64> {
        xs.iter().map(|&x| self.process(state, x)).collect()
    }

    /// Complex frequency response at `freq_hz`.
    pub fn response(&self, freq_hz: f64) -> Complex64 {
        let omega = 2.0 * std::f64::consts::PI * freq_hz / self.sample_rate_hz;
        self.sections
            .iter()
            .map(|s| s.response(omega))
            .product()
    }

    /// First `n` samples of the impulse response.
    pub fn impulse_response(&self, n: usize) -> Vec<f64> {
        let mut st = self.new_state();
        (0..n)
            .map(|i| self.process(&mut st, if i == 0 { 1.0 } else { 0.0 }))
            .collect()
    }
}

/// Causal band-pass applied independently per channel from zero initial state.
pub fn bandpass_filter(rec: &Recording, band: &BandSpec) -> Result<Recording, SigprocError> {
    let filt = BandpassFilter::design(f64::from(rec.sample_rate_hz), band)?;
    let samples = rec
        .samples
        .iter()
        .map(|ch| filt.filter_slice(&mut filt.new_state(), ch))
        .collect();
    Ok(Recording {
        sample_rate_hz: rec.sample_rate_hz,
        channel_ids: rec.channel_ids.clone(),
        samples,
    })
}

/// Keeps every `factor`-th sample starting at index 0.
pub fn decimate(rec: &Recording, factor: usize) -> Result<Recording, SigprocError> {
    if factor == 0 {
        return Err(SigprocError::Config("decimation factor must be positive".into()));
    }
    if rec.sample_rate_hz as usize % factor != 0 {
        return Err(SigprocError::Config(format!(
            "factor {factor} does not divide {} Hz",
            rec.sample_rate_hz
        )));
    }
    let samples = rec
        .samples
        .iter()
        .map(|ch| ch.iter().step_by(factor).copied().collect())
        .collect();
    Ok(Recording {
        sample_rate_hz: rec.sample_rate_hz / factor as u32,
        channel_ids: rec.channel_ids.clone(),
        samples,
    })
}

/// Band-pass at the raw rate followed by decimation to the decoding rate.
pub fn frontend(rec: &Recording, band: &BandSpec) -> Result<Recording, SigprocError> {
    let factor = (rec.sample_rate_hz / DECODE_RATE_HZ).max(1) as usize;
    decimate(&bandpass_filter(rec, band)?, factor)
}

/// Signal strength in dB: `10·log10(mean(v²))`. An all-zero window gives
/// negative infinity, which [`snr`] rejects.
pub fn signal_power_db(window: &[f64]) -> f64 {
    if window.is_empty() {
        return f64::NAN;
    }
    let ms = window.iter().map(|v| v * v).sum::<f64>() / window.len() as f64;
    10.0 * ms.log10()
}

/// Ratio of the flex and rest strengths, both in dB.
pub fn snr(power_flex_db: f64, power_rest_db: f64) -> Result<f64, SigprocError> {
    if !power_flex_db.is_finite() || !power_rest_db.is_finite() {
        return Err(SigprocError::NonFinitePower {
            flex_db: power_flex_db,
            rest_db: power_rest_db,
        });
    }
    if power_rest_db == 0.0 {
        return Err(SigprocError::UndefinedSnr);
    }
    Ok(power_flex_db / power_rest_db)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnrReport {
    pub power_flex_db: f64,
    pub power_rest_db: f64,
    pub snr: f64,
}

impl SnrReport {
    pub fn measure(flex: &[f64], rest: &[f64]) -> Result<Self, SigprocError> {
        let power_flex_db = signal_power_db(flex);
        let power_rest_db = signal_power_db(rest);
        Ok(SnrReport {
            power_flex_db,
            power_rest_db,
            snr: snr(power_flex_db, power_rest_db)?,
        })
    }
}

pub fn warmup_samples(sample_rate_hz: u32) -> usize {
    (WARMUP_S * f64::from(sample_rate_hz)).round() as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, fs: f64, n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / fs).sin())
            .collect()
    }

    fn steady_peak(xs: &[f64]) -> f64 {
        xs[xs.len() / 2..].iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    #[test]
    fn in_band_tone_passes_within_1db() {
        let filt = BandpassFilter::design(5000.0, &BandSpec::default()).unwrap();
        let y = filt.filter_slice(&mut filt.new_state(), &sine(100.0, 5000.0, 20_000));
        let db = 20.0 * steady_peak(&y).log10();
        assert!(db.abs() < 1.0, "gain {db} dB");
    }

    #[test]
    fn attenuation_at_half_low_and_double_high() {
        for fs in [5000.0, 10_000.0] {
            let band = BandSpec::default();
            let filt = BandpassFilter::design(fs, &band).unwrap();
            for f in [0.5 * band.low_hz, 2.0 * band.high_hz] {
                let y = filt.filter_slice(&mut filt.new_state(), &sine(f, fs, 40_000));
                let db = 20.0 * steady_peak(&y).log10();
                assert!(db <= -20.0, "fs {fs} f {f}: {db} dB");
                assert!((db - 20.0 * filt.response(f).norm().log10()).abs() < 0.2);
            }
        }
    }

    #[test]
    fn zero_in_zero_out() {
        let rec = Recording::new(5000, vec![vec![0.0; 1000]; 3]).unwrap();
        let out = bandpass_filter(&rec, &BandSpec::default()).unwrap();
        assert!(out.channels().iter().flatten().all(|&v| v == 0.0));
        assert_eq!(out.len(), 1000);
    }

    #[test]
    fn invalid_bands_rejected() {
        let rec = Recording::new(5000, vec![vec![0.0; 10]]).unwrap();
        for band in [
            BandSpec { low_hz: 600.0, high_hz: 25.0, order: 4 },
            BandSpec { low_hz: 25.0, high_hz: 2500.0, order: 4 },
            BandSpec { low_hz: 0.0, high_hz: 600.0, order: 4 },
            BandSpec { low_hz: 25.0, high_hz: 600.0, order: 3 },
        ] {
            assert!(matches!(
                bandpass_filter(&rec, &band),
                Err(SigprocError::Config(_))
            ));
        }
    }

    #[test]
    fn decimate_examples() {
        let rec = Recording::new(10_000, vec![(0..6).map(f64::from).collect()]).unwrap();
        let d = decimate(&rec, 2).unwrap();
        assert_eq!(d.channel(0), &[0.0, 2.0, 4.0]);
        assert_eq!(d.sample_rate_hz(), 5000);
        assert_eq!(decimate(&rec, 1).unwrap(), rec);
        assert!(matches!(decimate(&rec, 0), Err(SigprocError::Config(_))));

        let sec = Recording::new(10_000, vec![vec![0.5; 10_000]]).unwrap();
        assert_eq!(decimate(&sec, 2).unwrap().len(), 5000);
    }

    #[test]
    fn power_db_examples() {
        assert_eq!(signal_power_db(&[1.0; 17]), 0.0);
        assert!((signal_power_db(&[10.0; 5]) - 20.0).abs() < 1e-12);
        assert!((signal_power_db(&[3.0, 4.0]) - 10.969_100_130_080_564).abs() < 1e-12);
        assert_eq!(signal_power_db(&[0.0; 4]), f64::NEG_INFINITY);
    }

    #[test]
    fn snr_examples() {
        assert_eq!(snr(20.0, 10.0).unwrap(), 2.0);
        assert_eq!(snr(10.0, 10.0).unwrap(), 1.0);
        let r = snr(10.969_100_130_080_564, 3.010_299_956_639_812).unwrap();
        assert!((r - 3.643_8).abs() < 1e-3, "{r}");
        assert!(matches!(snr(3.0, 0.0), Err(SigprocError::UndefinedSnr)));
        let silent = signal_power_db(&[0.0; 8]);
        assert!(matches!(
            snr(silent, 3.0),
            Err(SigprocError::NonFinitePower { .. })
        ));
    }

    #[test]
    fn nrd1_rejects_garbage() {
        assert!(Recording::read_nrd1(&b"NRD0\0\0"[..]).is_err());
        let rec = Recording::new(10_000, vec![vec![1.5, -2.25]; 2]).unwrap();
        let mut bytes = Vec::new();
        rec.write_nrd1(&mut bytes).unwrap();
        assert_eq!(bytes.len(), 18 + 16);
        assert!(Recording::read_nrd1(&bytes[..bytes.len() - 1]).is_err());
        assert_eq!(Recording::read_nrd1(&bytes[..]).unwrap(), rec);
    }

    #[test]
    fn recording_invariants() {
        assert!(Recording::new(5000, vec![]).is_err());
        assert!(Recording::new(5000, vec![vec![1.0], vec![1.0, 2.0]]).is_err());
        assert!(Recording::new(5000, vec![vec![]]).is_err());
        assert!(Recording::new(1000, vec![vec![1.0]]).is_err());
        assert!(Recording::new(5000, vec![vec![0.0]; 17]).is_err());
    }
}
