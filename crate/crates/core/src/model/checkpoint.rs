//! "NDM1" checkpoint encoding.
//!
//! Layout (little-endian): magic, u16 version, u16 channels, model config,
//! feature window, thresholds, band, training metadata, a list of named
//! tensors (`u16` name length, name, `u8` rank, `u32` dims, f32 data), an
//! optional fingerprint summary, and a CRC32 of everything before it.

use super::net::{forward, Mode};
use super::{threshold, BnStats, ModelConfig, ModelParams, TrainMeta, Weights, WEIGHT_NAMES};
use crate::features::{FeatureThresholds, FeatureWindowSpec, NormStats};
use crate::label::{GestureLabel, NUM_DOF};
use crate::sigproc::BandSpec;

const MAGIC: &[u8; 4] = b"NDM1";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u16),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

/// A small batch stored with the model, with the loss and bit accuracy the
/// model produced on it when saved.
#[derive(Debug, Clone, PartialEq)]
pub struct Fingerprint {
    /// Time-major inputs, `count × steps × rows`, f32-representable.
    pub inputs: Vec<f64>,
    pub targets: Vec<GestureLabel>,
    pub loss: f64,
    pub accuracy: f64,
}

impl Fingerprint {
    /// Evaluates `params` on the batch and records the result.
    pub fn capture(
        params: &ModelParams,
        inputs: &[f64],
        targets: &[GestureLabel],
    ) -> Result<Self, super::ModelError> {
        let inputs: Vec<f64> = inputs.iter().map(|&v| f64::from(v as f32)).collect();
        let (loss, accuracy) = Self::score(params, &inputs, targets)?;
        Ok(Fingerprint {
            inputs,
            targets: targets.to_vec(),
            loss,
            accuracy,
        })
    }

    /// Eval-mode mean loss and fraction of correct DOF bits.
    pub fn score(
        params: &ModelParams,
        inputs: &[f64],
        targets: &[GestureLabel],
    ) -> Result<(f64, f64), super::ModelError> {
        let out = forward(params, inputs, targets.len(), Mode::Eval)?;
        let mut correct = 0usize;
        for (b, t) in targets.iter().enumerate() {
            let l = threshold(&out.example(b));
            correct += (0..NUM_DOF)
                .filter(|&d| l.is_flexed(d) == t.is_flexed(d))
                .count();
        }
        Ok((
            out.loss(targets),
            correct as f64 / (targets.len() * NUM_DOF) as f64,
        ))
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn tensor(&mut self, name: &str, dims: &[usize], data: &[f64]) {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        self.u16(name.len() as u16);
        self.0.extend_from_slice(name.as_bytes());
        self.u8(dims.len() as u8);
        for &d in dims {
            self.u32(d as u32);
        }
        for &v in data {
            self.0.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn tensor(&mut self) -> Result<(String, Vec<usize>, Vec<f64>), CheckpointError> {
        let len = self.u16()? as usize;
        let name = std::str::from_utf8(self.take(len)?)
            .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = self.u8()? as usize;
        let dims = (0..rank)
            .map(|_| self.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n: usize = dims.iter().product();
        let data = self
            .take(n.checked_mul(4).ok_or(CheckpointError::Truncated)?)?
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes(b.try_into().unwrap())))
            .collect();
        Ok((name, dims, data))
    }
}

pub(crate) fn encode(p: &ModelParams) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u16(CHECKPOINT_VERSION);
    w.u16(p.channels as u16);
    let c = &p.config;
    for v in [
        c.input_rows,
        c.steps,
        c.conv_out,
        c.conv_kernel,
        c.gru_hidden,
        c.fc_hidden,
        c.outputs,
    ] {
        w.u32(v as u32);
    }
    w.f64(c.dropout_rate);
    w.f64(p.window.window_ms);
    w.f64(p.window.step_ms);
    w.f64(p.window.history_s);
    let t = &p.thresholds;
    for v in [t.zc, t.ssc, t.wamp, t.mpr, t.log_eps] {
        w.f64(v);
    }
    w.f64(p.band.low_hz);
    w.f64(p.band.high_hz);
    w.u32(p.band.order as u32);
    w.u64(p.meta.seed);
    w.u32(p.meta.epochs);
    w.f64(p.meta.final_loss);
    w.f64(p.meta.validation_accuracy);

    let shapes = Weights::shapes(c);
    let tensor_count = 10 + 4 + if p.fingerprint.is_some() { 2 } else { 0 };
    w.u32(tensor_count);
    for ((name, dims), data) in shapes.iter().zip(p.weights.tensors()) {
        w.tensor(name, dims, data);
    }
    w.tensor("bn_running_mean", &[c.conv_out], &p.bn.mean);
    w.tensor("bn_running_var", &[c.conv_out], &p.bn.var);
    w.tensor("norm_mean", &[c.input_rows], &p.norm.mean);
    w.tensor("norm_std", &[c.input_rows], &p.norm.std);
    match &p.fingerprint {
        Some(fp) => {
            let n = fp.targets.len();
            w.tensor("fingerprint_inputs", &[n, c.steps, c.input_rows], &fp.inputs);
            let masks: Vec<f64> = fp.targets.iter().map(|t| f64::from(t.mask())).collect();
            w.tensor("fingerprint_targets", &[n], &masks);
            w.u8(1);
            w.f64(fp.loss);
            w.f64(fp.accuracy);
        }
        None => w.u8(0),
    }
    let crc = crc32fast::hash(&w.0);
    w.u32(crc);
    w.0
}

pub(crate) fn decode(bytes: &[u8]) -> Result<ModelParams, CheckpointError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < 10 {
        return Err(CheckpointError::Truncated);
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(CheckpointError::Checksum { stored, computed });
    }
    let channels = r.u16()? as usize;
    let mut dims = [0usize; 7];
    for d in dims.iter_mut() {
        *d = r.u32()? as usize;
    }
    let config = ModelConfig {
        input_rows: dims[0],
        steps: dims[1],
        conv_out: dims[2],
        conv_kernel: dims[3],
        gru_hidden: dims[4],
        fc_hidden: dims[5],
        outputs: dims[6],
        dropout_rate: r.f64()?,
    };
    config
        .validate()
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    let window = FeatureWindowSpec {
        window_ms: r.f64()?,
        step_ms: r.f64()?,
        history_s: r.f64()?,
    };
    let thresholds = FeatureThresholds {
        zc: r.f64()?,
        ssc: r.f64()?,
        wamp: r.f64()?,
        mpr: r.f64()?,
        log_eps: r.f64()?,
    };
    let band = BandSpec {
        low_hz: r.f64()?,
        high_hz: r.f64()?,
        order: r.u32()? as usize,
    };
    let meta = TrainMeta {
        seed: r.u64()?,
        epochs: r.u32()?,
        final_loss: r.f64()?,
        validation_accuracy: r.f64()?,
    };

    let count = r.u32()? as usize;
    if count != 14 && count != 16 {
        return Err(CheckpointError::Malformed(format!("{count} tensors")));
    }
    let mut weights = Weights::zeros(&config);
    let shapes = Weights::shapes(&config);
    for (i, slot) in weights.tensors_mut().into_iter().enumerate() {
        let (name, dims, data) = r.tensor()?;
        if name != WEIGHT_NAMES[i] || dims != shapes[i].1 {
            return Err(CheckpointError::Malformed(format!(
                "tensor {name} {dims:?}, expected {} {:?}",
                WEIGHT_NAMES[i], shapes[i].1
            )));
        }
        *slot = data;
    }
    let mut expect = |want: &str, len: usize| -> Result<Vec<f64>, CheckpointError> {
        let (name, dims, data) = r.tensor()?;
        if name != want || dims != [len] {
            return Err(CheckpointError::Malformed(format!("unexpected tensor {name}")));
        }
        Ok(data)
    };
    let bn = BnStats {
        mean: expect("bn_running_mean", config.conv_out)?,
        var: expect("bn_running_var", config.conv_out)?,
    };
    let norm = NormStats {
        mean: expect("norm_mean", config.input_rows)?,
        std: expect("norm_std", config.input_rows)?,
    };
    let fingerprint = if count == 16 {
        let (name, dims, inputs) = r.tensor()?;
        if name != "fingerprint_inputs"
            || dims.len() != 3
            || dims[1..] != [config.steps, config.input_rows]
        {
            return Err(CheckpointError::Malformed("bad fingerprint inputs".into()));
        }
        let (name, tdims, masks) = r.tensor()?;
        if name != "fingerprint_targets" || tdims != [dims[0]] {
            return Err(CheckpointError::Malformed("bad fingerprint targets".into()));
        }
        let targets = masks
            .iter()
            .map(|&m| {
                GestureLabel::from_mask(m as u8)
                    .filter(|_| m >= 0.0 && m.fract() == 0.0)
                    .ok_or_else(|| CheckpointError::Malformed(format!("gesture mask {m}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if r.u8()? != 1 {
            return Err(CheckpointError::Malformed("fingerprint summary missing".into()));
        }
        Some(Fingerprint {
            inputs,
            targets,
            loss: r.f64()?,
            accuracy: r.f64()?,
        })
    } else {
        if r.u8()? != 0 {
            return Err(CheckpointError::Malformed("unexpected fingerprint flag".into()));
        }
        None
    };
    if r.pos != body.len() {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes",
            body.len() - r.pos
        )));
    }
    Ok(ModelParams {
        config,
        weights,
        bn,
        norm,
        thresholds,
        window,
        band,
        channels,
        meta,
        fingerprint,
    })
}
