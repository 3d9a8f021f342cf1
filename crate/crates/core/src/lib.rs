//! Real-time multichannel nerve-signal decoding.
//!
//! The signal path runs band-pass filtering and decimation ([`sigproc`]),
//! sliding-window time-domain features ([`features`]), and a conv+GRU
//! multi-label classifier over six degrees of freedom ([`model`]). Around it
//! sit the evaluation pieces: classification and throughput metrics
//! ([`metrics`]), a synthetic nerve-signal generator ([`synthgen`]), the
//! gesture matching task ([`chronometry`]), and a streaming engine with a
//! framed wire protocol ([`engine`]).

pub mod chronometry;
pub mod dataset;
pub mod engine;
pub mod experiment;
pub mod features;
pub mod label;
pub mod metrics;
pub mod model;
pub mod par;
pub mod sigproc;
pub mod synthgen;

pub use label::{GestureLabel, NUM_DOF};
pub use par::Exec;
