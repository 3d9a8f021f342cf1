//! Length-prefixed binary frames, all little-endian:
//!
//! ```text
//! u16 magic 0x4E44 | u8 version | u8 type | u32 payload length | payload | u32 CRC32
//! ```
//!
//! The CRC covers header and payload.

use std::io::{self, Read};

use crate::label::NUM_DOF;
use crate::model::Prediction;

pub const MAGIC: u16 = 0x4E44;
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 8;
pub const CRC_LEN: usize = 4;
/// Frames larger than this are rejected before allocation.
pub const MAX_PAYLOAD: usize = 64 << 20;

pub const TYPE_SAMPLE_BLOCK: u8 = 0x01;
pub const TYPE_PREDICTION: u8 = 0x02;
pub const TYPE_CONFIG: u8 = 0x03;
pub const TYPE_LATENCY: u8 = 0x04;
pub const TYPE_ERROR: u8 = 0x05;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FrameErrorKind {
    #[error("bad magic {0:#06x}")]
    BadMagic(u16),
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("unknown message type {0:#04x}")]
    UnknownType(u8),
    #[error("checksum mismatch: frame says {expected:#010x}, computed {found:#010x}")]
    Checksum { expected: u32, found: u32 },
    #[error("bad length: {0}")]
    Length(String),
    #[error("truncated frame")]
    Truncated,
    #[error("i/o: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("frame error at byte {offset}: {kind}")]
pub struct FrameError {
    pub offset: u64,
    pub kind: FrameErrorKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleBlock {
    pub first_sample_index: u64,
    /// Channel-major samples; every channel has the same length.
    pub channels: Vec<Vec<f32>>,
}

impl SampleBlock {
    pub fn samples_per_channel(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictionFrame {
    pub timestamp_us: u64,
    pub probabilities: [f32; NUM_DOF],
    pub mask: u8,
    pub feature_us: u32,
    pub decode_us: u32,
}

impl From<&Prediction> for PredictionFrame {
    fn from(p: &Prediction) -> Self {
        PredictionFrame {
            timestamp_us: p.timestamp_us,
            probabilities: p.probabilities.map(|v| v as f32),
            mask: p.label.mask(),
            feature_us: p.feature_us,
            decode_us: p.decode_us,
        }
    }
}

/// Latency aggregates as `[p50, p95, max]` in microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LatencySummary {
    pub frames: u32,
    pub feature_us: [u32; 3],
    pub decode_us: [u32; 3],
    pub end_to_end_us: [u32; 3],
    pub skipped: u32,
    pub dropped: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorFrame {
    /// Byte offset in the peer's stream where the problem was found.
    pub offset: u64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    SampleBlock(SampleBlock),
    Prediction(PredictionFrame),
    /// Engine configuration as TOML text.
    Config(String),
    Latency(LatencySummary),
    Error(ErrorFrame),
}

impl Message {
    pub fn type_code(&self) -> u8 {
        match self {
            Message::SampleBlock(_) => TYPE_SAMPLE_BLOCK,
            Message::Prediction(_) => TYPE_PREDICTION,
            Message::Config(_) => TYPE_CONFIG,
            Message::Latency(_) => TYPE_LATENCY,
            Message::Error(_) => TYPE_ERROR,
        }
    }
}

fn payload(msg: &Message) -> Vec<u8> {
    let mut p = Vec::new();
    match msg {
        Message::SampleBlock(b) => {
            p.extend_from_slice(&b.first_sample_index.to_le_bytes());
            p.extend_from_slice(&(b.channels.len() as u16).to_le_bytes());
            p.extend_from_slice(&(b.samples_per_channel() as u16).to_le_bytes());
            for ch in &b.channels {
                for v in ch {
                    p.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Message::Prediction(f) => {
            p.extend_from_slice(&f.timestamp_us.to_le_bytes());
            for v in f.probabilities {
                p.extend_from_slice(&v.to_le_bytes());
            }
            p.push(f.mask);
            p.extend_from_slice(&f.feature_us.to_le_bytes());
            p.extend_from_slice(&f.decode_us.to_le_bytes());
        }
        Message::Config(text) => p.extend_from_slice(text.as_bytes()),
        Message::Latency(l) => {
            p.extend_from_slice(&l.frames.to_le_bytes());
            for v in l.feature_us.iter().chain(&l.decode_us).chain(&l.end_to_end_us) {
                p.extend_from_slice(&v.to_le_bytes());
            }
            p.extend_from_slice(&l.skipped.to_le_bytes());
            p.extend_from_slice(&l.dropped.to_le_bytes());
        }
        Message::Error(e) => {
            p.extend_from_slice(&e.offset.to_le_bytes());
            p.extend_from_slice(e.message.as_bytes());
        }
    }
    p
}

/// Encodes one message. Sample blocks must have equal-length channels and
/// fit the u16 count fields.
pub fn encode_frame(msg: &Message) -> Vec<u8> {
    if let Message::SampleBlock(b) = msg {
        assert!(b.channels.len() <= usize::from(u16::MAX));
        assert!(b.samples_per_channel() <= usize::from(u16::MAX));
        assert!(b.channels.iter().all(|c| c.len() == b.samples_per_channel()));
    }
    let body = payload(msg);
    let mut out = Vec::with_capacity(HEADER_LEN + body.len() + CRC_LEN);
    out.extend_from_slice(&MAGIC.to_le_bytes());
    out.push(VERSION);
    out.push(msg.type_code());
    out.extend_from_slice(&(body.len() as u32).to_le_bytes());
    out.extend_from_slice(&body);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.buf.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }
    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }
    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }
    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
    fn f32(&mut self) -> Option<f32> {
        self.u32().map(f32::from_bits)
    }
}

fn parse_payload(kind: u8, body: &[u8]) -> Result<Message, FrameErrorKind> {
    let short = || FrameErrorKind::Length(format!("payload of {} bytes too short for type {kind:#04x}", body.len()));
    let mut c = Cursor { buf: body, pos: 0 };
    let msg = match kind {
        TYPE_SAMPLE_BLOCK => {
            let first = c.u64().ok_or_else(short)?;
            let nc = usize::from(c.u16().ok_or_else(short)?);
            let ns = usize::from(c.u16().ok_or_else(short)?);
            if body.len() != 12 + 4 * nc * ns {
                return Err(FrameErrorKind::Length(format!(
                    "{nc} channels of {ns} samples need {} payload bytes, got {}",
                    12 + 4 * nc * ns,
                    body.len()
                )));
            }
            let channels = (0..nc)
                .map(|_| (0..ns).map(|_| c.f32().expect("length checked")).collect())
                .collect();
            Message::SampleBlock(SampleBlock {
                first_sample_index: first,
                channels,
            })
        }
        TYPE_PREDICTION => {
            if body.len() != 41 {
                return Err(FrameErrorKind::Length(format!("prediction payload of {} bytes", body.len())));
            }
            let timestamp_us = c.u64().ok_or_else(short)?;
            let mut probabilities = [0f32; NUM_DOF];
            for p in &mut probabilities {
                *p = c.f32().ok_or_else(short)?;
            }
            Message::Prediction(PredictionFrame {
                timestamp_us,
                probabilities,
                mask: c.u8().ok_or_else(short)?,
                feature_us: c.u32().ok_or_else(short)?,
                decode_us: c.u32().ok_or_else(short)?,
            })
        }
        TYPE_CONFIG => Message::Config(
            String::from_utf8(body.to_vec()).map_err(|_| FrameErrorKind::Length("config is not UTF-8".into()))?,
        ),
        TYPE_LATENCY => {
            if body.len() != 48 {
                return Err(FrameErrorKind::Length(format!("latency payload of {} bytes", body.len())));
            }
            let frames = c.u32().ok_or_else(short)?;
            let mut triple = || -> Result<[u32; 3], FrameErrorKind> {
                Ok([c.u32().ok_or_else(short)?, c.u32().ok_or_else(short)?, c.u32().ok_or_else(short)?])
            };
            let feature_us = triple()?;
            let decode_us = triple()?;
            let end_to_end_us = triple()?;
            Message::Latency(LatencySummary {
                frames,
                feature_us,
                decode_us,
                end_to_end_us,
                skipped: c.u32().ok_or_else(short)?,
                dropped: c.u32().ok_or_else(short)?,
            })
        }
        TYPE_ERROR => {
            let offset = c.u64().ok_or_else(short)?;
            Message::Error(ErrorFrame {
                offset,
                message: String::from_utf8_lossy(&body[8..]).into_owned(),
            })
        }
        other => return Err(FrameErrorKind::UnknownType(other)),
    };
    Ok(msg)
}

fn check_header(h: &[u8]) -> Result<(u8, usize), FrameErrorKind> {
    let magic = u16::from_le_bytes([h[0], h[1]]);
    if magic != MAGIC {
        return Err(FrameErrorKind::BadMagic(magic));
    }
    if h[2] != VERSION {
        return Err(FrameErrorKind::BadVersion(h[2]));
    }
    if !(TYPE_SAMPLE_BLOCK..=TYPE_ERROR).contains(&h[3]) {
        return Err(FrameErrorKind::UnknownType(h[3]));
    }
    let len = u32::from_le_bytes([h[4], h[5], h[6], h[7]]) as usize;
    if len > MAX_PAYLOAD {
        return Err(FrameErrorKind::Length(format!("payload of {len} bytes exceeds {MAX_PAYLOAD}")));
    }
    Ok((h[3], len))
}

fn check_crc(frame: &[u8]) -> Result<(), FrameErrorKind> {
    let n = frame.len() - CRC_LEN;
    let expected = u32::from_le_bytes(frame[n..].try_into().expect("4 bytes"));
    let found = crc32fast::hash(&frame[..n]);
    if expected != found {
        return Err(FrameErrorKind::Checksum { expected, found });
    }
    Ok(())
}

/// Decodes the frame at the start of `bytes`, returning it with the number
/// of bytes consumed. Error offsets are relative to `bytes`.
pub fn decode_frame(bytes: &[u8]) -> Result<(Message, usize), FrameError> {
    let at = |offset: usize, kind| FrameError {
        offset: offset as u64,
        kind,
    };
    if bytes.len() < HEADER_LEN {
        return Err(at(0, FrameErrorKind::Truncated));
    }
    let (kind, len) = check_header(&bytes[..HEADER_LEN]).map_err(|k| at(0, k))?;
    let total = HEADER_LEN + len + CRC_LEN;
    if bytes.len() < total {
        return Err(at(0, FrameErrorKind::Truncated));
    }
    check_crc(&bytes[..total]).map_err(|k| at(HEADER_LEN + len, k))?;
    let msg = parse_payload(kind, &bytes[HEADER_LEN..HEADER_LEN + len]).map_err(|k| at(HEADER_LEN, k))?;
    Ok((msg, total))
}

/// Reads consecutive frames from a byte stream, tracking the stream offset
/// so errors can say where they happened.
pub struct FrameReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> FrameReader<R> {
    pub fn new(inner: R) -> Self {
        FrameReader { inner, offset: 0 }
    }

    pub fn offset(&self) -> u64 {
        self.offset
    }

    /// Next frame, or `None` on a clean end of stream between frames.
    pub fn read_frame(&mut self) -> Result<Option<Message>, FrameError> {
        let start = self.offset;
        let err = |offset: u64, kind| FrameError { offset, kind };
        let mut header = [0u8; HEADER_LEN];
        let got = read_full(&mut self.inner, &mut header).map_err(|e| err(start, FrameErrorKind::Io(e.to_string())))?;
        if got == 0 {
            return Ok(None);
        }
        if got < HEADER_LEN {
            return Err(err(start, FrameErrorKind::Truncated));
        }
        let (kind, len) = check_header(&header).map_err(|k| err(start, k))?;
        let mut frame = Vec::with_capacity(HEADER_LEN + len + CRC_LEN);
        frame.extend_from_slice(&header);
        frame.resize(HEADER_LEN + len + CRC_LEN, 0);
        let got = read_full(&mut self.inner, &mut frame[HEADER_LEN..])
            .map_err(|e| err(start, FrameErrorKind::Io(e.to_string())))?;
        if got < len + CRC_LEN {
            return Err(err(start, FrameErrorKind::Truncated));
        }
        check_crc(&frame).map_err(|k| err(start + (HEADER_LEN + len) as u64, k))?;
        let msg = parse_payload(kind, &frame[HEADER_LEN..HEADER_LEN + len])
            .map_err(|k| err(start + HEADER_LEN as u64, k))?;
        self.offset += frame.len() as u64;
        Ok(Some(msg))
    }
}

fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut n = 0;
    while n < buf.len() {
        match r.read(&mut buf[n..]) {
            Ok(0) => break,
            Ok(k) => n += k,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn golden_prediction() -> Message {
        Message::Prediction(PredictionFrame {
            timestamp_us: 1_000_000,
            probabilities: [1.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            mask: 0x01,
            feature_us: 250,
            decode_us: 5000,
        })
    }

    // Layout checked by hand; CRC from an independent zlib implementation.
    const GOLDEN: &str = "444e01022900000040420f00000000000000803f0000000000000000000000000000000000000000\
01fa00000088130000df7efab6";

    fn hex(b: &[u8]) -> String {
        b.iter().map(|x| format!("{x:02x}")).collect()
    }

    #[test]
    fn prediction_golden_bytes() {
        let bytes = encode_frame(&golden_prediction());
        assert_eq!(hex(&bytes), GOLDEN);
        assert_eq!(decode_frame(&bytes).unwrap(), (golden_prediction(), bytes.len()));
    }

    fn samples() -> Vec<Message> {
        vec![
            Message::SampleBlock(SampleBlock {
                first_sample_index: 42,
                channels: vec![vec![1.5, -2.0, 3.25], vec![0.0, 7.0, -1e-3]],
            }),
            golden_prediction(),
            Message::Config("prediction_rate_hz = 10.0\n".into()),
            Message::Latency(LatencySummary {
                frames: 9,
                feature_us: [1, 2, 3],
                decode_us: [4, 5, 6],
                end_to_end_us: [7, 8, 9],
                skipped: 11,
                dropped: 0,
            }),
            Message::Error(ErrorFrame {
                offset: 17,
                message: "bad magic".into(),
            }),
        ]
    }

    #[test]
    fn every_type_round_trips() {
        for m in samples() {
            let b = encode_frame(&m);
            assert_eq!(decode_frame(&b).unwrap().0, m);
        }
    }

    #[test]
    fn reader_walks_a_stream() {
        let mut stream = Vec::new();
        for m in samples() {
            stream.extend(encode_frame(&m));
        }
        let mut r = FrameReader::new(stream.as_slice());
        let mut got = Vec::new();
        while let Some(m) = r.read_frame().unwrap() {
            got.push(m);
        }
        assert_eq!(got, samples());
        assert_eq!(r.offset(), stream.len() as u64);
    }

    #[test]
    fn corruption_is_located() {
        let first = encode_frame(&samples()[2]);
        let mut b = encode_frame(&golden_prediction());
        let n = b.len();
        b[n - 1] ^= 0xff;
        let mut stream = first.clone();
        stream.extend(&b);
        let mut r = FrameReader::new(stream.as_slice());
        r.read_frame().unwrap();
        let e = r.read_frame().unwrap_err();
        assert!(matches!(e.kind, FrameErrorKind::Checksum { .. }));
        assert_eq!(e.offset, (first.len() + HEADER_LEN + 41) as u64);

        let mut bad = encode_frame(&golden_prediction());
        bad[0] = 0;
        assert!(matches!(decode_frame(&bad).unwrap_err().kind, FrameErrorKind::BadMagic(_)));
        bad = encode_frame(&golden_prediction());
        bad[2] = 2;
        assert!(matches!(decode_frame(&bad).unwrap_err().kind, FrameErrorKind::BadVersion(2)));
        bad = encode_frame(&golden_prediction());
        assert!(matches!(decode_frame(&bad[..20]).unwrap_err().kind, FrameErrorKind::Truncated));
        let mut r = FrameReader::new(&bad[..20]);
        assert_eq!(r.read_frame().unwrap_err().kind, FrameErrorKind::Truncated);
    }

    #[test]
    fn inconsistent_lengths_rejected() {
        let mut b = encode_frame(&samples()[0]);
        // Claim three channels while carrying two.
        b[HEADER_LEN + 8] = 3;
        let n = b.len() - CRC_LEN;
        let crc = crc32fast::hash(&b[..n]);
        b[n..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(decode_frame(&b).unwrap_err().kind, FrameErrorKind::Length(_)));
    }
}
