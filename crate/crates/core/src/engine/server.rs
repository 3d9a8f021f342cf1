//! Single-connection TCP service speaking the frame protocol.
//!
//! A session: the server sends its configuration, the client streams
//! contiguous sample blocks, the server answers with prediction frames as
//! ticks fall due. When the client half-closes, the server finishes the
//! stream, sends a latency summary and closes. A malformed frame gets an
//! error frame and the connection is closed; the server keeps listening.

use std::io::{BufReader, BufWriter, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::time::{Duration, Instant};

use super::wire::{
    encode_frame, ErrorFrame, FrameReader, LatencySummary, Message, PredictionFrame, SampleBlock,
};
use super::{DropOldestQueue, EngineConfig, EngineError, LatencyReport, Pipeline};
use crate::model::ModelParams;
use crate::sigproc::Recording;

const ACCEPT_POLL: Duration = Duration::from_millis(20);

/// Outcome of one served connection.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionSummary {
    pub peer: Option<SocketAddr>,
    pub predictions: u64,
    pub latency: LatencySummary,
    /// Set when the session ended with an error frame.
    pub error: Option<String>,
}

pub struct Server {
    listener: TcpListener,
    model: ModelParams,
    cfg: EngineConfig,
}

impl Server {
    pub fn bind(model: ModelParams, cfg: EngineConfig) -> Result<Self, EngineError> {
        cfg.check_model(&model)?;
        Pipeline::new(&model, cfg.prediction_rate_hz)?;
        let listener = TcpListener::bind(&cfg.endpoint).map_err(|source| EngineError::Bind {
            endpoint: cfg.endpoint.clone(),
            source,
        })?;
        listener.set_nonblocking(true)?;
        Ok(Server { listener, model, cfg })
    }

    pub fn local_addr(&self) -> Result<SocketAddr, EngineError> {
        Ok(self.listener.local_addr()?)
    }

    /// Serves connections one at a time until `shutdown` is raised, calling
    /// `on_session` after each.
    pub fn run(
        &self,
        shutdown: &AtomicBool,
        mut on_session: impl FnMut(&SessionSummary),
    ) -> Result<u64, EngineError> {
        let mut served = 0;
        while !shutdown.load(Ordering::SeqCst) {
            match self.listener.accept() {
                Ok((stream, _)) => {
                    stream.set_nonblocking(false)?;
                    let summary = self.serve_connection(stream)?;
                    served += 1;
                    on_session(&summary);
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => std::thread::sleep(ACCEPT_POLL),
                Err(e) => return Err(e.into()),
            }
        }
        Ok(served)
    }

    /// Runs one session on an accepted stream. Client misbehaviour ends the
    /// session with an error frame, never with an `Err`.
    pub fn serve_connection(&self, stream: TcpStream) -> Result<SessionSummary, EngineError> {
        let peer = stream.peer_addr().ok();
        stream.set_nodelay(true)?;
        let mut out = BufWriter::new(stream.try_clone()?);
        out.write_all(&encode_frame(&Message::Config(self.cfg.to_toml())))?;
        out.flush()?;

        let mut pipeline = Pipeline::new(&self.model, self.cfg.prediction_rate_hz)?;
        let channels = self.model.channels;
        let (tx, rx) = mpsc::sync_channel::<Result<(SampleBlock, Instant), ErrorFrame>>(self.cfg.queue_capacity);
        let outq = DropOldestQueue::<PredictionFrame>::new(self.cfg.queue_capacity);
        let reader_stream = stream.try_clone()?;

        let (emitted, error) = std::thread::scope(|s| {
            s.spawn(move || ingest(reader_stream, channels, tx));
            let writer = s.spawn(|| -> std::io::Result<BufWriter<TcpStream>> {
                let mut out = out;
                while let Some(p) = outq.pop() {
                    out.write_all(&encode_frame(&Message::Prediction(p)))?;
                    out.flush()?;
                }
                Ok(out)
            });

            let mut emitted = Vec::new();
            let mut error = None;
            for item in rx.iter() {
                let (block, arrived) = match item {
                    Ok(b) => b,
                    Err(e) => {
                        error = Some(e);
                        break;
                    }
                };
                let data: Vec<Vec<f64>> = block
                    .channels
                    .iter()
                    .map(|c| c.iter().map(|&v| f64::from(v)).collect())
                    .collect();
                match pipeline.push_block(&data, arrived) {
                    Ok(out) => {
                        for e in out {
                            outq.push(PredictionFrame::from(&e.prediction));
                            emitted.push(e.latency);
                        }
                    }
                    Err(e) => {
                        error = Some(ErrorFrame {
                            offset: 0,
                            message: e.to_string(),
                        });
                        break;
                    }
                }
            }
            outq.close();
            // Unblock the reader if we stopped early.
            if error.is_some() {
                let _ = stream.shutdown(Shutdown::Read);
            }
            (writer.join().expect("writer thread").map(|w| (w, emitted)), error)
        });

        let (mut out, frames) = match emitted {
            Ok(v) => v,
            // The client went away; nothing more to send.
            Err(_) => {
                return Ok(SessionSummary {
                    peer,
                    predictions: 0,
                    latency: LatencySummary::default(),
                    error: error.map(|e| e.message),
                })
            }
        };
        let report = LatencyReport::new(frames);
        let latency = report.summary(pipeline.skipped(), outq.dropped());
        let _ = match &error {
            Some(e) => out.write_all(&encode_frame(&Message::Error(e.clone()))),
            None => out.write_all(&encode_frame(&Message::Latency(latency))),
        };
        let _ = out.flush();
        let _ = stream.shutdown(Shutdown::Both);
        Ok(SessionSummary {
            peer,
            predictions: u64::from(latency.frames),
            latency,
            error: error.map(|e| e.message),
        })
    }
}

fn ingest(
    stream: TcpStream,
    channels: usize,
    tx: mpsc::SyncSender<Result<(SampleBlock, Instant), ErrorFrame>>,
) {
    let mut reader = FrameReader::new(BufReader::new(stream));
    let mut expected = 0u64;
    loop {
        let at = reader.offset();
        let item = match reader.read_frame() {
            Ok(None) => return,
            Ok(Some(Message::SampleBlock(b))) => {
                if b.channels.len() != channels {
                    Err(ErrorFrame {
                        offset: at,
                        message: format!("block has {} channels, model expects {channels}", b.channels.len()),
                    })
                } else if b.first_sample_index != expected {
                    Err(ErrorFrame {
                        offset: at,
                        message: format!("gap: block starts at sample {}, expected {expected}", b.first_sample_index),
                    })
                } else {
                    expected += b.samples_per_channel() as u64;
                    Ok((b, Instant::now()))
                }
            }
            Ok(Some(Message::Config(_))) => continue,
            Ok(Some(other)) => Err(ErrorFrame {
                offset: at,
                message: format!("unexpected message type {:#04x} from client", other.type_code()),
            }),
            Err(e) => Err(ErrorFrame {
                offset: e.offset,
                message: e.kind.to_string(),
            }),
        };
        let stop = item.is_err();
        if tx.send(item).is_err() || stop {
            return;
        }
    }
}

/// What a client saw during one session.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClientOutput {
    pub config: Option<String>,
    pub predictions: Vec<PredictionFrame>,
    pub latency: Option<LatencySummary>,
    pub error: Option<ErrorFrame>,
}

/// Streams a recording to a server in blocks of `block_samples` and collects
/// everything the server sends back.
pub fn stream_recording(
    addr: impl ToSocketAddrs,
    rec: &Recording,
    block_samples: usize,
) -> Result<ClientOutput, EngineError> {
    let stream = TcpStream::connect(addr)?;
    stream.set_nodelay(true)?;
    let read_half = stream.try_clone()?;
    let collector = std::thread::spawn(move || -> Result<ClientOutput, EngineError> {
        let mut reader = FrameReader::new(BufReader::new(read_half));
        let mut out = ClientOutput::default();
        while let Some(m) = reader.read_frame()? {
            match m {
                Message::Config(t) => out.config = Some(t),
                Message::Prediction(p) => out.predictions.push(p),
                Message::Latency(l) => out.latency = Some(l),
                Message::Error(e) => out.error = Some(e),
                Message::SampleBlock(_) => {
                    return Err(EngineError::Protocol("server sent a sample block".into()))
                }
            }
        }
        Ok(out)
    });
    let mut w = BufWriter::new(&stream);
    let size = block_samples.clamp(1, usize::from(u16::MAX));
    let mut send = || -> std::io::Result<()> {
        for lo in (0..rec.len()).step_by(size) {
            let hi = (lo + size).min(rec.len());
            let block = SampleBlock {
                first_sample_index: lo as u64,
                channels: rec.channels().iter().map(|c| c[lo..hi].iter().map(|&v| v as f32).collect()).collect(),
            };
            w.write_all(&encode_frame(&Message::SampleBlock(block)))?;
        }
        w.flush()
    };
    // A server that rejects the stream may close early; its error frame is
    // still collected below.
    let sent = send();
    drop(w);
    let _ = stream.shutdown(Shutdown::Write);
    let out = collector.join().expect("collector thread")?;
    if out.error.is_none() {
        sent?;
    }
    Ok(out)
}
