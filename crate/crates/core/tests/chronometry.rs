use std::sync::OnceLock;

use neurodecode::chronometry::{
    matching_report, reaction_stats, run_matching_session, rt_density, MatchingTaskConfig, SimulatedSubject,
    TrialResult,
};
use neurodecode::experiment::{benchmark_train_config, compact_model_config, template, train_on_sessions};
use neurodecode::features::FeatureWindowSpec;
use neurodecode::label::gestures::{FIST, THUMB, WRIST};
use neurodecode::model::ModelParams;
use neurodecode::synthgen::{generate_session, SessionSpec, SubjectProfile};
use neurodecode::{Exec, GestureLabel};

const TARGETS: [GestureLabel; 3] = [THUMB, WRIST, FIST];

/// A compact model trained on a short three-gesture session.
fn model() -> &'static ModelParams {
    static M: OnceLock<ModelParams> = OnceLock::new();
    M.get_or_init(|| {
        let p = SubjectProfile::benchmark16();
        let spec = SessionSpec { gestures: TARGETS.to_vec(), repetitions: 4, ..SessionSpec::default() };
        let a = generate_session(&p, &spec, 1).unwrap();
        let b = generate_session(&p, &SessionSpec { repetitions: 1, ..spec }, 2).unwrap();
        let tpl = template(compact_model_config(16), 16, FeatureWindowSpec::default()).unwrap();
        let mut tc = benchmark_train_config(vec![1]);
        tc.max_epochs = 8;
        train_on_sessions(&tpl, &[&a], &b, &tc, 1, Exec::Parallel).unwrap().model
    })
}

fn task(trials: usize, cutoff_s: f64) -> MatchingTaskConfig {
    let mut targets = vec![GestureLabel::REST];
    targets.extend(TARGETS);
    MatchingTaskConfig { targets, trials, cutoff_s, ..MatchingTaskConfig::default() }
}

fn run(cfg: &MatchingTaskConfig, seed: u64, exec: Exec) -> Vec<TrialResult> {
    run_matching_session(model(), &SimulatedSubject::default(), cfg, seed, exec).unwrap()
}

fn strip_timing(mut r: Vec<TrialResult>) -> Vec<TrialResult> {
    for t in &mut r {
        t.latency.feature_us = 0;
        t.latency.decode_us = 0;
    }
    r
}

#[test]
fn reaction_times_respect_the_task() {
    let cfg = task(40, 3.0);
    let results = run(&cfg, 7, Exec::Parallel);
    let tick = 1.0 / cfg.prediction_rate_hz;
    let mut ok = 0;
    for r in &results {
        assert!(TARGETS.contains(&r.target));
        assert!(r.attempts >= 1);
        assert_eq!(r.success, r.reaction_time_s.is_some());
        for w in r.trace.windows(2) {
            assert!((w[1].t_s - w[0].t_s - tick).abs() < 1e-9);
        }
        if let Some(rt) = r.reaction_time_s {
            ok += 1;
            assert!(rt > 0.0 && rt <= cfg.cutoff_s + 1e-9, "rt {rt}");
            // Ticks land on the prediction grid.
            assert!(((rt / tick).round() * tick - rt).abs() < 1e-6);
            for (d, m) in r.per_dof_match_time_s.unwrap().iter().enumerate() {
                assert!(*m <= rt + 1e-9, "dof {d}: {m} after {rt}");
            }
        }
    }
    assert!(ok >= 20, "{ok}/40 matched");
    let report = matching_report(&results, &cfg).unwrap();
    assert!((report.bits_per_trial - 2.0 * (1.0 + 0.5 * 3f64.log2())).abs() < 1e-12);
    let stats = report.stats;
    let pooled = report.pooled.unwrap();
    assert!((pooled.bps - stats.success_rate * report.bits_per_trial / stats.median_rt_s.unwrap()).abs() < 1e-12);
    assert!(stats.median_rt_with_failures_s.unwrap() >= stats.median_rt_s.unwrap() - 1e-12);
    let rts: Vec<f64> = results.iter().filter_map(|r| r.reaction_time_s).collect();
    let kde = rt_density(&rts, cfg.cutoff_s).unwrap();
    assert!((kde.integral() - 1.0).abs() < 0.05);
}

#[test]
fn trials_are_deterministic_and_exec_independent() {
    let cfg = task(12, 3.0);
    let a = strip_timing(run(&cfg, 3, Exec::Parallel));
    let b = strip_timing(run(&cfg, 3, Exec::Sequential));
    assert_eq!(a, b);
    let c = strip_timing(run(&cfg, 4, Exec::Parallel));
    assert_ne!(a, c);
}

#[test]
fn cutoff_bounds_the_decision() {
    let long = run(&task(20, 3.0), 11, Exec::Parallel);
    let short = run(&task(20, 0.3), 11, Exec::Parallel);
    for (l, s) in long.iter().zip(&short) {
        assert_eq!(l.target, s.target);
        assert_eq!(l.onset_s, s.onset_s);
        if let Some(rt) = s.reaction_time_s {
            assert!(rt <= 0.3 + 1e-9);
        }
        assert!(s.trace.last().map_or(true, |t| t.t_s <= 0.3 + 1e-9));
    }
    // Below the first tick nothing can match.
    let none = run(&task(20, 0.01), 11, Exec::Parallel);
    assert!(none.iter().all(|r| !r.success));
    let s = reaction_stats(&none, 0.01).unwrap();
    assert_eq!((s.success_rate, s.median_rt_s), (0.0, None));
    assert_eq!(s.median_rt_with_failures_s, Some(0.01));
}

#[test]
fn invalid_tasks_are_rejected() {
    let m = model();
    let subject = SimulatedSubject::default();
    let mut cfg = task(5, 3.0);
    cfg.targets.retain(|g| !g.is_rest());
    assert!(run_matching_session(m, &subject, &cfg, 1, Exec::Sequential).is_err());
    let short_pre = MatchingTaskConfig { pre_roll_s: 0.5, ..task(5, 3.0) };
    assert!(run_matching_session(m, &subject, &short_pre, 1, Exec::Sequential).is_err());
    let ulnar = SimulatedSubject { profile: SubjectProfile::ulnar8(), ..SimulatedSubject::default() };
    assert!(run_matching_session(m, &ulnar, &task(5, 3.0), 1, Exec::Sequential).is_err());
}
