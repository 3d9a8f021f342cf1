use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use neurodecode::chronometry::{self, MatchingTaskConfig, SimulatedSubject, TrialResult};
use neurodecode::dataset::{self, MANIFEST_FILE};
use neurodecode::engine::{EngineConfig, Server};
use neurodecode::experiment::{self, SweepRow};
use neurodecode::features::{FeatureWindowSpec, NUM_FEATURES};
use neurodecode::label::gestures;
use neurodecode::metrics;
use neurodecode::model::{Examples, Fingerprint, ModelConfig, ModelParams, TrainConfig};
use neurodecode::synthgen::{self, DriftSpec, Session, SessionSpec, SubjectProfile};
use neurodecode::{Exec, GestureLabel};
use serde::{Deserialize, Serialize};

use crate::record::RunRecord;
use crate::{
    parse_gesture, write_file, write_json, CliError, EvalArgs, MatchArgs, ModelChoice, ServeArgs, SweepArgs,
    SynthArgs, TrainArgs,
};

/// Validation frames stored in a checkpoint's fingerprint.
const FINGERPRINT_FRAMES: usize = 8;

pub struct Context {
    pub exec: Exec,
    pub manifest: Option<PathBuf>,
}

impl Context {
    fn record(&self, command: &str, config: &impl Serialize) -> RunRecord {
        RunRecord::new(command, config, self.exec.is_parallel())
    }

    fn finish(&self, rec: RunRecord, default: PathBuf) -> Result<(), CliError> {
        let path = self.manifest.clone().unwrap_or(default);
        rec.finish(&path)?;
        Ok(())
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn read_input(path: &Path, what: &str) -> Result<String, CliError> {
    if !path.is_file() {
        return Err(usage(format!("{what} {} not found", path.display())));
    }
    std::fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn load_profile(name: &str) -> Result<SubjectProfile, CliError> {
    let p = match name {
        "benchmark16" => SubjectProfile::benchmark16(),
        "ulnar8" => SubjectProfile::ulnar8(),
        path => {
            let text = read_input(Path::new(path), "profile")?;
            serde_json::from_str(&text).map_err(|e| usage(format!("profile {path}: {e}")))?
        }
    };
    p.validate()?;
    Ok(p)
}

fn load_model(path: &Path) -> Result<ModelParams, CliError> {
    if !path.is_file() {
        return Err(usage(format!("checkpoint {} not found", path.display())));
    }
    let bytes = std::fs::read(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    ModelParams::load_checkpoint(&bytes).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn load_sessions(dirs: &[PathBuf]) -> Result<Vec<Session>, CliError> {
    let mut out: Vec<Session> = Vec::with_capacity(dirs.len());
    for d in dirs {
        if !d.join(MANIFEST_FILE).is_file() {
            return Err(usage(format!("{} is not a dataset directory", d.display())));
        }
        let s = dataset::load_session(d)?;
        if let Some(first) = out.first() {
            if first.profile.channels != s.profile.channels {
                return Err(usage(format!(
                    "schema mismatch: {} has {} channels, {} has {}",
                    dirs[0].display(),
                    first.profile.channels,
                    d.display(),
                    s.profile.channels
                )));
            }
        }
        out.push(s);
    }
    Ok(out)
}

/// Splits a generated session at the rest segment closest to `fraction` of
/// its repetitions.
fn split_session(s: &Session, fraction: f64) -> Result<(Session, Session), CliError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(usage(format!("split fraction {fraction} outside (0, 1)")));
    }
    let pairs = s.segments.len().saturating_sub(1) / 2;
    if pairs < 2 {
        return Err(usage("session too short to split"));
    }
    let keep = ((fraction * pairs as f64).round() as usize).clamp(1, pairs - 1);
    Ok(s.split_at(2 * keep)?)
}

/// Training sessions and the validation session: the last one given, or
/// the held-out tail of a single session.
fn train_and_validation(sessions: Vec<Session>, split: Option<f64>) -> Result<(Vec<Session>, Session), CliError> {
    match (sessions.len(), split) {
        (1, Some(f)) => {
            let (a, b) = split_session(&sessions[0], f)?;
            Ok((vec![a], b))
        }
        (1, None) => Err(usage("training needs a second session for validation, or --split")),
        (_, Some(_)) => Err(usage("--split applies to a single session")),
        _ => {
            let mut v = sessions;
            let val = v.pop().expect("at least two");
            Ok((v, val))
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Layered {
    model: ModelConfig,
    train: TrainConfig,
    window: FeatureWindowSpec,
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Preset settings with the config file and flags layered on top.
fn resolve_model(choice: &ModelChoice, channels: usize) -> Result<Layered, CliError> {
    let (model, train) = match choice.preset.as_str() {
        "benchmark" => (
            experiment::compact_model_config(channels),
            experiment::benchmark_train_config(vec![1]),
        ),
        "full" => (
            ModelConfig {
                input_rows: channels * NUM_FEATURES,
                ..Default::default()
            },
            TrainConfig::default(),
        ),
        other => return Err(usage(format!("unknown preset '{other}' (benchmark or full)"))),
    };
    let mut l = Layered {
        model,
        train,
        window: FeatureWindowSpec::default(),
    };
    if let Some(path) = &choice.config {
        let text = read_input(path, "config")?;
        let over: toml::Value = toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        if let Some(t) = over.as_table() {
            if let Some(k) = t.keys().find(|k| !["model", "train", "window"].contains(&k.as_str())) {
                return Err(usage(format!("{}: unknown table '{k}'", path.display())));
            }
        }
        let mut base = toml::Value::try_from(&l).expect("plain config");
        merge(&mut base, over);
        l = base.try_into().map_err(|e| usage(format!("{}: {e}", path.display())))?;
        l.model.input_rows = channels * NUM_FEATURES;
    }
    if let Some(s) = &choice.seeds {
        l.train.seeds = s.clone();
    }
    if let Some(e) = choice.epochs {
        l.train.max_epochs = e;
    }
    l.model.validate()?;
    l.train.validate()?;
    Ok(l)
}

pub fn synth(ctx: &Context, a: SynthArgs) -> Result<(), CliError> {
    let mut spec = match &a.spec {
        Some(p) => {
            let text = read_input(p, "session spec")?;
            toml::from_str::<SessionSpec>(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
        None => SessionSpec::default(),
    };
    if let Some(g) = &a.gestures {
        spec.gestures = g.iter().map(|s| parse_gesture(s)).collect::<Result<_, _>>()?;
    }
    spec.repetitions = a.reps.unwrap_or(spec.repetitions);
    spec.hold_s = a.hold_s.unwrap_or(spec.hold_s);
    spec.rest_s = a.rest_s.unwrap_or(spec.rest_s);
    spec.session_id = a.session_id.clone();
    spec.day_index = a.day;
    spec.validate()?;
    let drift = DriftSpec {
        gain_drift_per_day: a.drift.gain_drift,
        baseline_shift_per_day: a.drift.baseline_shift,
        burst_rate_drift_per_day: a.drift.rate_drift,
    };
    let profile = synthgen::apply_drift(&load_profile(&a.profile)?, &drift, a.day);
    profile.validate()?;

    let run_json = a.out.join("run.json");
    prepare_out_dir(&a.out, a.force)?;
    let mut rec = ctx.record(
        "synth",
        &serde_json::json!({ "args": &a, "spec": &spec, "profile_hash": profile.hash() }),
    );
    rec.seeds.push(a.seed);
    let session = synthgen::generate_session(&profile, &spec, a.seed)?;
    dataset::save_session(&session, &a.out)?;
    rec.outputs.push(a.out.clone());
    let secs: f64 = session.segments.iter().map(|s| s.recording.duration_s()).sum();
    println!(
        "wrote {} segments ({:.1} s, {} channels) to {}",
        session.segments.len(),
        secs,
        profile.channels,
        a.out.display()
    );
    ctx.finish(rec, run_json)
}

fn is_dataset_file(name: &str) -> bool {
    name == MANIFEST_FILE
        || name == "run.json"
        || (name.starts_with("seg") && (name.ends_with(".nrd") || name.ends_with(".labels")))
}

/// Refuses a non-empty directory unless `force`; with `force`, removes the
/// dataset files a previous run left there.
fn prepare_out_dir(dir: &Path, force: bool) -> Result<(), CliError> {
    let io = |e: std::io::Error| CliError::Runtime(format!("{}: {e}", dir.display()));
    if dir.exists() && !dir.is_dir() {
        return Err(usage(format!("{} exists and is not a directory", dir.display())));
    }
    if !dir.exists() {
        return Ok(());
    }
    let entries: Vec<_> = std::fs::read_dir(dir).map_err(io)?.collect::<Result<_, _>>().map_err(io)?;
    if entries.is_empty() {
        return Ok(());
    }
    if !force {
        return Err(usage(format!("{} is not empty (use --force to replace)", dir.display())));
    }
    for e in entries {
        let name = e.file_name().to_string_lossy().into_owned();
        if is_dataset_file(&name) {
            std::fs::remove_file(e.path()).map_err(io)?;
        }
    }
    Ok(())
}

fn capture_fingerprint(model: &ModelParams, val: &Session, exec: Exec) -> Result<Fingerprint, CliError> {
    let frames = experiment::session_frames(model, val, 1, exec)?;
    let n = FINGERPRINT_FRAMES.min(frames.len());
    let per = model.config.input_rows * model.config.steps;
    let mut inputs = vec![0.0; n * per];
    let mut targets = Vec::with_capacity(n);
    for k in 0..n {
        let i = k * frames.len() / n;
        frames.fill_input(i, &mut inputs[k * per..(k + 1) * per]);
        targets.push(frames.target(i));
    }
    Ok(Fingerprint::capture(model, &inputs, &targets)?)
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned());
    path.with_file_name(format!("{stem}.{suffix}"))
}

pub fn train(ctx: &Context, a: TrainArgs) -> Result<(), CliError> {
    if a.stride == 0 {
        return Err(usage("stride must be at least 1"));
    }
    let sessions = load_sessions(&a.data)?;
    let channels = sessions[0].profile.channels;
    let layered = resolve_model(&a.model, channels)?;
    let mut rec = ctx.record("train", &serde_json::json!({ "args": &a, "resolved": &layered }));
    rec.seeds = layered.train.seeds.clone();
    rec.inputs = a.data.clone();
    let (train_sessions, val) = train_and_validation(sessions, a.split)?;

    let tpl = experiment::template(layered.model, channels, layered.window)?;
    let refs: Vec<&Session> = train_sessions.iter().collect();
    let trained = experiment::train_on_sessions(&tpl, &refs, &val, &layered.train, a.stride, ctx.exec)?;
    let mut model = trained.model;
    model.fingerprint = Some(capture_fingerprint(&model, &val, ctx.exec)?);
    write_file(&a.out, model.save_checkpoint())?;

    let report_path = sibling(&a.out, "report.json");
    let table = trained.validation.report();
    write_json(
        &report_path,
        &serde_json::json!({
            "validation_session": val.spec.session_id,
            "seeds": trained.seeds,
            "chosen_seed": model.meta.seed,
            "parameters": model.param_count(),
            "score": trained.validation,
            "per_dof": table,
        }),
    )?;
    rec.outputs = vec![a.out.clone(), report_path];
    for s in &trained.seeds {
        println!(
            "seed {:>6}: loss {:.4}, mean balanced accuracy {:.2}%",
            s.seed,
            s.final_loss,
            100.0 * s.mean_balanced_accuracy
        );
    }
    println!("validation on '{}' (seed {}):", val.spec.session_id, model.meta.seed);
    print!("{}", table.to_table());
    println!("wrote {}", a.out.display());
    ctx.finish(rec, sibling(&a.out, "run.json"))
}

pub fn eval(ctx: &Context, a: EvalArgs) -> Result<(), CliError> {
    if a.stride == 0 {
        return Err(usage("stride must be at least 1"));
    }
    let model = load_model(&a.model)?;
    let session = load_sessions(std::slice::from_ref(&a.data))?.remove(0);
    let mut rec = ctx.record("eval", &a);
    rec.inputs = vec![a.model.clone(), a.data.clone()];
    let frames = experiment::session_frames(&model, &session, a.stride, ctx.exec)?;
    let score = experiment::score_frames(&model, &frames, ctx.exec)?;
    let report = score.report();
    let out = [a.out.join("report.json"), a.out.join("metrics.jsonl")];
    write_json(&out[0], &serde_json::json!({ "session": session.spec.session_id, "frames": frames.len(), "score": score }))?;
    write_file(&out[1], report.to_json_lines())?;
    rec.outputs = out.to_vec();
    println!("'{}', {} frames:", session.spec.session_id, frames.len());
    print!("{}", report.to_table());
    ctx.finish(rec, a.out.join("run.json"))
}

fn density_name(g: GestureLabel) -> String {
    match gestures::name(g) {
        "combo" => format!("density_{g}.txt"),
        n => format!("density_{n}.txt"),
    }
}

fn matching_table(results: &[TrialResult], cfg: &MatchingTaskConfig) -> Result<String, CliError> {
    let rep = chronometry::matching_report(results, cfg)?;
    let itr = |rate: f64, rt: Option<f64>| -> String {
        rt.and_then(|rt| metrics::information_throughput(rate, rep.bits_per_trial, rt).ok())
            .map_or_else(|| "-".into(), |t| format!("{:.2}", t.bps))
    };
    let rt = |v: Option<f64>| v.map_or_else(|| "-".into(), |v| format!("{v:.3}"));
    let mut s = String::new();
    writeln!(s, "{:<8} {:>6} {:>9} {:>10} {:>9}", "gesture", "trials", "success", "median RT", "ITR bps").ok();
    for g in &rep.stats.per_gesture {
        writeln!(
            s,
            "{:<8} {:>6} {:>8.1}% {:>10} {:>9}",
            gestures::name(g.target),
            g.trials,
            100.0 * g.success_rate,
            rt(g.median_rt_s),
            itr(g.success_rate, g.median_rt_s)
        )
        .ok();
    }
    let st = &rep.stats;
    writeln!(
        s,
        "{:<8} {:>6} {:>8.1}% {:>10} {:>9}",
        "all",
        st.trials,
        100.0 * st.success_rate,
        rt(st.median_rt_s),
        itr(st.success_rate, st.median_rt_s)
    )
    .ok();
    writeln!(
        s,
        "{:.2} bits per trial; median RT counting failures at the cutoff {}",
        rep.bits_per_trial,
        rt(st.median_rt_with_failures_s)
    )
    .ok();
    Ok(s)
}

pub fn matching(ctx: &Context, a: MatchArgs) -> Result<(), CliError> {
    let model = load_model(&a.model)?;
    let mut cfg = match &a.task {
        Some(p) => {
            let text = read_input(p, "task config")?;
            toml::from_str::<MatchingTaskConfig>(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
        None => MatchingTaskConfig::default(),
    };
    cfg.trials = a.trials.unwrap_or(cfg.trials);
    cfg.cutoff_s = a.cutoff_s.unwrap_or(cfg.cutoff_s);
    cfg.prediction_rate_hz = a.rate_hz.unwrap_or(cfg.prediction_rate_hz);
    let mut subject = SimulatedSubject {
        profile: load_profile(&a.profile)?,
        ..Default::default()
    };
    subject.error_rate = a.error_rate.unwrap_or(subject.error_rate);

    let mut rec = ctx.record(
        "match",
        &serde_json::json!({ "args": &a, "task": &cfg, "subject": &subject }),
    );
    rec.seeds.push(a.seed);
    rec.inputs.push(a.model.clone());
    let results = chronometry::run_matching_session(&model, &subject, &cfg, a.seed, ctx.exec)?;
    let report = chronometry::matching_report(&results, &cfg)?;

    let mut log = String::new();
    for r in &results {
        log.push_str(&r.log_line());
        log.push('\n');
    }
    let mut outputs = vec![a.out.join("trials.jsonl"), a.out.join("report.json")];
    write_file(&outputs[0], log)?;
    write_json(&outputs[1], &report)?;

    let rts: Vec<f64> = results.iter().filter_map(|r| r.reaction_time_s).collect();
    if let Ok(curve) = chronometry::rt_density(&rts, cfg.cutoff_s) {
        let p = a.out.join("density.txt");
        write_file(&p, curve.to_columns())?;
        outputs.push(p);
    }
    for g in &report.stats.per_gesture {
        let rts: Vec<f64> = results
            .iter()
            .filter(|r| r.target == g.target)
            .filter_map(|r| r.reaction_time_s)
            .collect();
        // Fewer than two samples (or identical ones) have no bandwidth.
        if let Ok(curve) = chronometry::rt_density(&rts, cfg.cutoff_s) {
            let p = a.out.join(density_name(g.target));
            write_file(&p, curve.to_columns())?;
            outputs.push(p);
        }
    }
    rec.outputs = outputs;
    print!("{}", matching_table(&results, &cfg)?);
    ctx.finish(rec, a.out.join("run.json"))
}

fn sweep_table(rows: &[SweepRow]) -> String {
    let mut s = String::new();
    writeln!(
        s,
        "{:>9} {:>8} {:>7} {:>9} {:>12} {:>12} {:>12}",
        "history s", "step ms", "frames", "error %", "feature p50", "decode p50", "decode p95"
    )
    .ok();
    for r in rows {
        writeln!(
            s,
            "{:>9.2} {:>8.1} {:>7} {:>9.2} {:>12} {:>12} {:>12}",
            r.history_s,
            r.step_ms,
            r.frames,
            100.0 * r.score.mean_error,
            r.feature_us.p50,
            r.decode_us.p50,
            r.decode_us.p95
        )
        .ok();
    }
    s
}

pub fn sweep(ctx: &Context, a: SweepArgs) -> Result<(), CliError> {
    if a.lengths.is_empty() {
        return Err(usage("no lengths given"));
    }
    let sessions = load_sessions(&a.data)?;
    let channels = sessions[0].profile.channels;
    let layered = resolve_model(&a.model, channels)?;
    let mut rec = ctx.record("sweep-input-length", &serde_json::json!({ "args": &a, "resolved": &layered }));
    rec.seeds = layered.train.seeds.clone();
    rec.inputs = a.data.clone();
    let (train_sessions, val) = train_and_validation(sessions, a.split)?;
    let refs: Vec<&Session> = train_sessions.iter().collect();
    let rows = experiment::input_length_sweep(
        &a.lengths,
        a.steps,
        layered.model,
        &refs,
        &val,
        &layered.train,
        a.rate_hz,
        a.latency_s,
        ctx.exec,
    )?;
    let p = a.out.join("sweep.json");
    write_json(&p, &rows)?;
    rec.outputs.push(p);
    print!("{}", sweep_table(&rows));
    ctx.finish(rec, a.out.join("run.json"))
}

pub fn serve(ctx: &Context, a: ServeArgs) -> Result<(), CliError> {
    let mut cfg = match &a.config {
        Some(p) => EngineConfig::from_toml(&read_input(p, "engine config")?)?,
        None => EngineConfig::default(),
    };
    if let Some(e) = &a.endpoint {
        cfg.endpoint = e.clone();
    }
    if let Some(r) = a.rate_hz {
        cfg.prediction_rate_hz = r;
    }
    let model_path = a
        .model
        .clone()
        .or_else(|| cfg.model.clone())
        .ok_or_else(|| usage("no checkpoint: pass --model or set `model` in the engine config"))?;
    cfg.model = Some(model_path.clone());
    let model = load_model(&model_path)?;
    let mut rec = ctx.record("serve", &serde_json::json!({ "args": &a, "engine": &cfg }));
    rec.inputs.push(model_path);

    let server = Server::bind(model, cfg)?;
    let addr = server.local_addr()?;
    let shutdown = Arc::new(AtomicBool::new(false));
    let flag = shutdown.clone();
    ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst))
        .map_err(|e| CliError::Runtime(format!("signal handler: {e}")))?;
    println!("listening on {addr}");
    let _ = std::io::stdout().flush();

    let mut log = String::new();
    let mut count = 0u64;
    server.run(&shutdown, |s| {
        count += 1;
        let peer = s.peer.map_or_else(|| "?".into(), |p| p.to_string());
        match &s.error {
            Some(e) => println!("session {count} from {peer}: error: {e}"),
            None => println!(
                "session {count} from {peer}: {} predictions, feature p95 {} us, decode p95 {} us",
                s.predictions, s.latency.feature_us[1], s.latency.decode_us[1]
            ),
        }
        let _ = std::io::stdout().flush();
        let line = serde_json::json!({
            "peer": peer,
            "predictions": s.predictions,
            "feature_us": s.latency.feature_us,
            "decode_us": s.latency.decode_us,
            "end_to_end_us": s.latency.end_to_end_us,
            "skipped": s.latency.skipped,
            "dropped": s.latency.dropped,
            "error": s.error,
        });
        log.push_str(&line.to_string());
        log.push('\n');
        if a.max_sessions.is_some_and(|m| count >= m) {
            shutdown.store(true, Ordering::SeqCst);
        }
    })?;
    let p = a.out.join("sessions.jsonl");
    write_file(&p, log)?;
    rec.outputs.push(p);
    println!("served {count} sessions");
    ctx.finish(rec, a.out.join("run.json"))
}
