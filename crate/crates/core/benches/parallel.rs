//! Sequential against rayon-parallel execution of the data-parallel stages.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use neurodecode::dataset::{FrameSet, FrameSpec};
use neurodecode::experiment::compact_model_config;
use neurodecode::model::{predict_probabilities, ModelParams};
use neurodecode::synthgen::{generate_session, SessionSpec, SubjectProfile};
use neurodecode::Exec;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn session() -> neurodecode::synthgen::Session {
    let spec = SessionSpec { repetitions: 1, ..SessionSpec::default() };
    generate_session(&SubjectProfile::benchmark16(), &spec, 1).unwrap()
}

fn frames(c: &mut Criterion) {
    let s = session();
    let spec = FrameSpec { stride: 5, ..FrameSpec::default() };
    let mut g = c.benchmark_group("frame_set_build");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| FrameSet::from_session(&s, &spec, exec).unwrap())
        });
    }
    g.finish();
}

fn predict(c: &mut Criterion) {
    let s = session();
    let set = FrameSet::from_session(&s, &FrameSpec { stride: 10, ..FrameSpec::default() }, Exec::Parallel).unwrap();
    let model = ModelParams::new(compact_model_config(16), 16, 1).unwrap();
    let mut g = c.benchmark_group("predict_probabilities");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| predict_probabilities(&model, &set, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, frames, predict);
criterion_main!(benches);
