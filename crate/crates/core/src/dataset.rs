//! Session directories on disk and the labelled frame sets built from them.
//!
//! A session directory holds `manifest.toml`, one NRD1 raw file per segment
//! and one label file per segment (`timestamp_ms,gesture` per line).

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::features::{
    extract_features, FeatureError, FeatureThresholds, FeatureWindowSpec, NormAccumulator,
    NormStats, NUM_FEATURES,
};
use crate::label::GestureLabel;
use crate::model::Examples;
use crate::par::Exec;
use crate::sigproc::{self, BandSpec, Recording, SigprocError};
use crate::synthgen::{LabelRow, Segment, Session, SessionSpec, SubjectProfile, SynthError};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error(transparent)]
    Signal(#[from] SigprocError),
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("{0}")]
    Data(String),
}

/// TOML integers are signed 64-bit, so seeds are stored as decimal strings.
mod seed_str {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        String::deserialize(d)?.parse().map_err(D::Error::custom)
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn fmt_err(path: &Path, msg: impl ToString) -> DatasetError {
    DatasetError::Format {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentEntry {
    pub index: usize,
    pub gesture: GestureLabel,
    #[serde(with = "seed_str")]
    pub seed: u64,
    pub start_ms: u64,
    pub duration_ms: u64,
    pub raw: String,
    pub labels: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub session_id: String,
    pub day_index: u32,
    #[serde(with = "seed_str")]
    pub seed: u64,
    pub sample_rate_hz: u32,
    pub channels: usize,
    pub profile_hash: String,
    pub spec: SessionSpec,
    pub profile: SubjectProfile,
    pub segments: Vec<SegmentEntry>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self, DatasetError> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let m: Manifest = toml::from_str(&text).map_err(|e| fmt_err(&path, e))?;
        if m.schema_version != SCHEMA_VERSION {
            return Err(fmt_err(&path, format!("schema version {}", m.schema_version)));
        }
        if m.profile.hash() != m.profile_hash {
            return Err(fmt_err(&path, "profile hash does not match the embedded profile"));
        }
        Ok(m)
    }
}

pub fn write_labels(path: &Path, rows: &[LabelRow]) -> Result<(), DatasetError> {
    let mut text = String::with_capacity(rows.len() * 16);
    for r in rows {
        text.push_str(&format!("{},{}\n", r.timestamp_ms, r.gesture));
    }
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_labels(path: &Path) -> Result<Vec<LabelRow>, DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = |m: &str| fmt_err(path, format!("line {}: {m}", n + 1));
        let (ts, g) = line.split_once(',').ok_or_else(|| bad("expected timestamp_ms,gesture"))?;
        rows.push(LabelRow {
            timestamp_ms: ts.trim().parse().map_err(|_| bad("bad timestamp"))?,
            gesture: g.trim().parse().map_err(|_| bad("bad gesture"))?,
        });
    }
    if rows.windows(2).any(|w| w[1].timestamp_ms <= w[0].timestamp_ms) {
        return Err(fmt_err(path, "timestamps must increase"));
    }
    Ok(rows)
}

/// Writes a session directory, creating it if needed.
pub fn save_session(session: &Session, dir: &Path) -> Result<Manifest, DatasetError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut entries = Vec::with_capacity(session.segments.len());
    for (info, seg) in session.manifest().into_iter().zip(&session.segments) {
        let raw = format!("seg{:04}.nrd", info.index);
        let labels = format!("seg{:04}.labels", info.index);
        let raw_path = dir.join(&raw);
        let f = fs::File::create(&raw_path).map_err(io_err(&raw_path))?;
        seg.recording.write_nrd1(BufWriter::new(f))?;
        write_labels(&dir.join(&labels), &seg.labels)?;
        entries.push(SegmentEntry {
            index: info.index,
            gesture: info.gesture,
            seed: info.seed,
            start_ms: info.start_ms,
            duration_ms: info.duration_ms,
            raw,
            labels,
        });
    }
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        session_id: session.spec.session_id.clone(),
        day_index: session.spec.day_index,
        seed: session.seed,
        sample_rate_hz: sigproc::RAW_RATE_HZ,
        channels: session.profile.channels,
        profile_hash: session.profile.hash(),
        spec: session.spec.clone(),
        profile: session.profile.clone(),
        segments: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = toml::to_string(&manifest).map_err(|e| fmt_err(&path, e))?;
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(manifest)
}

pub fn load_session(dir: &Path) -> Result<Session, DatasetError> {
    let m = Manifest::read(dir)?;
    let mut segments = Vec::with_capacity(m.segments.len());
    for e in &m.segments {
        let raw_path = dir.join(&e.raw);
        let f = fs::File::open(&raw_path).map_err(io_err(&raw_path))?;
        let recording = Recording::read_nrd1(BufReader::new(f))
            .map_err(|err| fmt_err(&raw_path, err))?;
        if recording.channel_count() != m.channels || recording.sample_rate_hz() != m.sample_rate_hz {
            return Err(fmt_err(&raw_path, "channel count or rate disagrees with the manifest"));
        }
        let labels = read_labels(&dir.join(&e.labels))?;
        segments.push(Segment {
            gesture: e.gesture,
            seed: e.seed,
            start_ms: e.start_ms,
            recording,
            labels,
        });
    }
    Ok(Session {
        profile: m.profile,
        spec: m.spec,
        seed: m.seed,
        segments,
    })
}

/// Label in force at `t_ms`: the last row whose timestamp is not after it.
pub fn label_at(labels: &[LabelRow], t_ms: f64) -> Option<GestureLabel> {
    let i = labels.partition_point(|r| r.timestamp_ms as f64 <= t_ms);
    (i > 0).then(|| labels[i - 1].gesture)
}

/// How frames are cut from a continuous recording.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameSpec {
    pub band: BandSpec,
    pub window: FeatureWindowSpec,
    pub thresholds: FeatureThresholds,
    /// Keep every `stride`-th decoding step as a frame.
    pub stride: usize,
}

impl Default for FrameSpec {
    fn default() -> Self {
        FrameSpec {
            band: BandSpec::default(),
            window: FeatureWindowSpec::default(),
            thresholds: FeatureThresholds::default(),
            stride: 1,
        }
    }
}

/// One decoding instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame {
    /// One past the last decode-rate sample in the frame.
    pub end_sample: u64,
    pub label: GestureLabel,
    last_column: usize,
}

impl Frame {
    pub fn timestamp_us(&self) -> u64 {
        self.end_sample * 1_000_000 / u64::from(sigproc::DECODE_RATE_HZ)
    }

    pub fn end_ms(&self) -> f64 {
        self.end_sample as f64 * 1000.0 / f64::from(sigproc::DECODE_RATE_HZ)
    }
}

/// Labelled frames of one recording. Feature columns are computed once on the
/// step grid and shared between overlapping frames.
#[derive(Debug, Clone)]
pub struct FrameSet {
    channels: usize,
    steps: usize,
    columns: Vec<f64>,
    frames: Vec<Frame>,
    norm: NormStats,
}

impl FrameSet {
    /// Frames from a raw recording and its session-absolute labels. Frame
    /// ends lie on multiples of the step, so they coincide with the instants
    /// a streaming decoder ticks at.
    pub fn build(
        raw: &Recording,
        labels: &[LabelRow],
        spec: &FrameSpec,
        exec: Exec,
    ) -> Result<Self, DatasetError> {
        let rec = sigproc::frontend(raw, &spec.band)?;
        let fs = rec.sample_rate_hz();
        spec.window.validate(fs)?;
        if spec.stride == 0 {
            return Err(DatasetError::Data("stride must be positive".into()));
        }
        let step = spec.window.step_samples(fs);
        let window = spec.window.window_samples(fs);
        let steps = spec.window.steps();
        let need = spec.window.required_samples(fs);
        let channels = rec.channel_count();
        let rows = channels * NUM_FEATURES;
        let first = window.div_ceil(step);
        let last = rec.len() / step;
        if last < first {
            return Err(DatasetError::Data("recording shorter than one window".into()));
        }
        let n_cols = last - first + 1;
        let mut columns = vec![0.0; n_cols * rows];
        let chans = rec.channels();
        let failed = std::sync::Mutex::new(None);
        exec.for_each_chunk_mut(&mut columns, rows, |k, col| {
            let end = (first + k) * step;
            for (c, ch) in chans.iter().enumerate() {
                match extract_features(&ch[end - window..end], &spec.thresholds) {
                    Ok(f) => col[c * NUM_FEATURES..(c + 1) * NUM_FEATURES].copy_from_slice(&f.0),
                    Err(e) => *failed.lock().expect("unpoisoned") = Some(e),
                }
            }
        });
        if let Some(e) = failed.into_inner().expect("unpoisoned") {
            return Err(e.into());
        }
        let mut frames = Vec::new();
        for m in (first..=last).filter(|m| m % spec.stride == 0) {
            let end = m * step;
            if end < need {
                continue;
            }
            let t_ms = (end - 1) as f64 * 1000.0 / f64::from(fs);
            let Some(label) = label_at(labels, t_ms) else {
                continue;
            };
            frames.push(Frame {
                end_sample: end as u64,
                label,
                last_column: m - first,
            });
        }
        Ok(FrameSet {
            channels,
            steps,
            columns,
            frames,
            norm: NormStats::identity(rows),
        })
    }

    pub fn from_session(session: &Session, spec: &FrameSpec, exec: Exec) -> Result<Self, DatasetError> {
        Self::build(&session.recording()?, &session.labels(), spec, exec)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn norm(&self) -> &NormStats {
        &self.norm
    }

    pub fn set_norm(&mut self, norm: NormStats) -> Result<(), DatasetError> {
        if norm.rows() != self.channels * NUM_FEATURES {
            return Err(DatasetError::Data("normalization rows do not match".into()));
        }
        self.norm = norm;
        Ok(())
    }

    /// Drops frames ending before `min_end_sample`.
    pub fn retain_from(&mut self, min_end_sample: u64) {
        self.frames.retain(|f| f.end_sample >= min_end_sample);
    }

    fn column(&self, k: usize) -> &[f64] {
        let rows = self.channels * NUM_FEATURES;
        &self.columns[k * rows..(k + 1) * rows]
    }

    /// Un-normalized column `t` of frame `i`.
    pub fn raw_column(&self, i: usize, t: usize) -> &[f64] {
        self.column(self.frames[i].last_column + 1 + t - self.steps)
    }

    /// Pushes every column of every frame, so overlapping columns count once
    /// per frame that uses them.
    pub fn accumulate(&self, acc: &mut NormAccumulator) {
        for i in 0..self.frames.len() {
            for t in 0..self.steps {
                acc.push_column(self.raw_column(i, t));
            }
        }
    }

    /// Raw (un-normalized) tensor of frame `i`.
    pub fn tensor(&self, i: usize) -> crate::features::FeatureTensor {
        let cols: Vec<&[f64]> = (0..self.steps).map(|t| self.raw_column(i, t)).collect();
        crate::features::FeatureTensor::from_columns(
            &cols,
            self.channels,
            self.frames[i].end_sample,
            sigproc::DECODE_RATE_HZ,
        )
        .expect("columns have matching rows")
    }
}

/// Normalization fitted on the frames of every training set.
pub fn fit_frame_norm(sets: &[&FrameSet]) -> Result<NormStats, DatasetError> {
    let rows = sets
        .first()
        .ok_or_else(|| DatasetError::Data("no frame sets".into()))?
        .channels
        * NUM_FEATURES;
    let mut acc = NormAccumulator::new(rows);
    for s in sets {
        if s.channels * NUM_FEATURES != rows {
            return Err(DatasetError::Data("frame sets disagree on channels".into()));
        }
        s.accumulate(&mut acc);
    }
    Ok(acc.finish()?)
}

impl Examples for FrameSet {
    fn len(&self) -> usize {
        self.frames.len()
    }

    fn rows(&self) -> usize {
        self.channels * NUM_FEATURES
    }

    fn steps(&self) -> usize {
        self.steps
    }

    fn fill_input(&self, i: usize, out: &mut [f64]) {
        let rows = self.rows();
        for t in 0..self.steps {
            let dst = &mut out[t * rows..(t + 1) * rows];
            dst.copy_from_slice(self.raw_column(i, t));
            self.norm.apply_column(dst);
        }
    }

    fn target(&self, i: usize) -> GestureLabel {
        self.frames[i].label
    }
}

/// Several example sets viewed as one.
pub struct Concat<'a> {
    parts: Vec<&'a dyn Examples>,
    offsets: Vec<usize>,
}

impl<'a> Concat<'a> {
    pub fn new(parts: Vec<&'a dyn Examples>) -> Result<Self, DatasetError> {
        let first = parts.first().ok_or_else(|| DatasetError::Data("nothing to concatenate".into()))?;
        if parts.iter().any(|p| p.rows() != first.rows() || p.steps() != first.steps()) {
            return Err(DatasetError::Data("example shapes differ".into()));
        }
        let mut offsets = Vec::with_capacity(parts.len() + 1);
        let mut total = 0;
        offsets.push(0);
        for p in &parts {
            total += p.len();
            offsets.push(total);
        }
        Ok(Concat { parts, offsets })
    }

    fn locate(&self, i: usize) -> (usize, usize) {
        let p = self.offsets.partition_point(|&o| o <= i) - 1;
        (p, i - self.offsets[p])
    }
}

impl Examples for Concat<'_> {
    fn len(&self) -> usize {
        *self.offsets.last().expect("non-empty")
    }

    fn rows(&self) -> usize {
        self.parts[0].rows()
    }

    fn steps(&self) -> usize {
        self.parts[0].steps()
    }

    fn fill_input(&self, i: usize, out: &mut [f64]) {
        let (p, j) = self.locate(i);
        self.parts[p].fill_input(j, out)
    }

    fn target(&self, i: usize) -> GestureLabel {
        let (p, j) = self.locate(i);
        self.parts[p].target(j)
    }
}
