mod common;

use common::{naive_forward, naive_loss, random_params, separable, tiny_config, uniform, Toy};
use neurodecode::model::{
    evaluate, multi_seed_train, predict_probabilities, train, CheckpointError, Examples, Fingerprint, ModelError,
    ModelParams, Mode, TrainConfig,
};
use neurodecode::{Exec, GestureLabel};

fn quick(seeds: Vec<u64>, epochs: usize) -> TrainConfig {
    TrainConfig {
        lr0: 1e-2,
        batch_size: 16,
        max_epochs: epochs,
        seeds,
        ..TrainConfig::default()
    }
}

#[test]
fn batched_forward_matches_naive_loops() {
    let cfg = tiny_config(3, 7);
    let p = random_params(cfg, 3, 21);
    let per = cfg.steps * cfg.input_rows;
    let batch = 5;
    let input = uniform(8, batch * per);
    let out = p.forward(&input, batch, Mode::Eval).unwrap();
    let targets: Vec<GestureLabel> = (0..batch).map(|i| GestureLabel::from_mask((i as u8 * 9) & 0x3f).unwrap()).collect();
    let mut want_loss = 0.0;
    for b in 0..batch {
        let want = naive_forward(&p, &input[b * per..(b + 1) * per]);
        let got = out.example(b);
        for d in 0..6 {
            assert!((got[d] - want[d]).abs() < 1e-10, "example {b} dof {d}");
        }
        let single = p.forward_eval(&input[b * per..(b + 1) * per]).unwrap();
        for d in 0..6 {
            assert!((single[d] - got[d]).abs() < 1e-14);
        }
        want_loss += naive_loss(&want, targets[b]);
    }
    assert!((out.loss(&targets) - want_loss / batch as f64).abs() < 1e-10);
}

#[test]
fn zero_weights_give_one_half() {
    let cfg = tiny_config(2, 4);
    let mut p = ModelParams::new(cfg, 2, 1).unwrap();
    for t in p.weights.tensors_mut() {
        t.iter_mut().for_each(|v| *v = 0.0);
    }
    let out = p.forward_eval(&uniform(3, cfg.steps * cfg.input_rows)).unwrap();
    assert!(out.iter().all(|&v| v == 0.5));
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let cfg = tiny_config(2, 5);
    let mut p = random_params(cfg, 2, 4);
    p.snap_to_f32();
    let input = uniform(5, 3 * cfg.steps * cfg.input_rows);
    let targets: Vec<GestureLabel> = ["100000", "000011", "111111"].iter().map(|s| s.parse().unwrap()).collect();
    p.fingerprint = Some(Fingerprint::capture(&p, &input, &targets).unwrap());
    let a = p.save_checkpoint();
    let q = ModelParams::load_checkpoint(&a).unwrap();
    assert_eq!(q, p);
    assert_eq!(q.save_checkpoint(), a);

    let fp = q.fingerprint.as_ref().unwrap();
    let (loss, acc) = Fingerprint::score(&q, &fp.inputs, &fp.targets).unwrap();
    assert!((loss - fp.loss).abs() < 1e-10);
    assert_eq!(acc, fp.accuracy);
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let p = random_params(tiny_config(2, 5), 2, 4);
    let bytes = p.save_checkpoint();
    for pos in [bytes.len() / 3, bytes.len() / 2, bytes.len() - 9] {
        let mut bad = bytes.clone();
        bad[pos] ^= 0x10;
        assert!(ModelParams::load_checkpoint(&bad).is_err(), "flip at {pos}");
    }
    for len in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
        assert!(ModelParams::load_checkpoint(&bytes[..len]).is_err(), "truncated to {len}");
    }
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(
        ModelParams::load_checkpoint(&magic),
        Err(ModelError::Checkpoint(CheckpointError::BadMagic))
    ));
}

#[test]
fn training_is_deterministic_per_seed() {
    let cfg = tiny_config(1, 4);
    let data = separable(1, 64, cfg.input_rows, cfg.steps);
    let template = ModelParams::new(cfg, 1, 0).unwrap();
    let tc = quick(vec![7], 3);
    let a = train(&template, &data, &tc, 7).unwrap();
    let b = train(&template, &data, &tc, 7).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.history, b.history);
    let c = train(&template, &data, &tc, 8).unwrap();
    assert_ne!(a.params.weights, c.params.weights);
}

#[test]
fn training_separates_a_toy_problem() {
    let cfg = tiny_config(1, 4);
    let data = separable(2, 256, cfg.input_rows, cfg.steps);
    let held = separable(3, 128, cfg.input_rows, cfg.steps);
    let template = ModelParams::new(cfg, 1, 0).unwrap();
    let out = train(&template, &data, &quick(vec![1], 20), 1).unwrap();
    assert!(out.history.last().unwrap().loss < out.history[0].loss);
    let counts = evaluate(&out.params, &held, Exec::Sequential).unwrap();
    let exact = (0..held.len())
        .zip(predict_probabilities(&out.params, &held, Exec::Sequential).unwrap())
        .filter(|(i, p)| neurodecode::model::threshold(p) == held.target(*i))
        .count();
    assert!(exact as f64 / held.len() as f64 > 0.9, "{exact}/{} exact, {counts:?}", held.len());
}

#[test]
fn flat_loss_drops_the_rate_after_two_stale_epochs() {
    let mut cfg = tiny_config(1, 4);
    cfg.dropout_rate = 0.0;
    let data = separable(1, 32, cfg.input_rows, cfg.steps);
    let template = ModelParams::new(cfg, 1, 0).unwrap();
    let tc = TrainConfig {
        lr0: 0.0,
        batch_size: 64,
        max_epochs: 7,
        ..TrainConfig::default()
    };
    let out = train(&template, &data, &tc, 3).unwrap();
    assert_eq!(out.lr_drops, vec![3, 5, 7], "{:?}", out.history);
    assert!(out.history.windows(2).all(|w| (w[0].loss - w[1].loss).abs() < 1e-12 * w[0].loss));
}

#[test]
fn single_seed_multi_train_equals_train() {
    let cfg = tiny_config(1, 4);
    let data = separable(4, 64, cfg.input_rows, cfg.steps);
    let template = ModelParams::new(cfg, 1, 0).unwrap();
    let tc = quick(vec![5], 2);
    let (best, reports) = multi_seed_train(&template, &data, &data, &tc, Exec::Sequential).unwrap();
    let mut direct = train(&template, &data, &tc, 5).unwrap().params;
    direct.snap_to_f32();
    assert_eq!(best.weights, direct.weights);
    assert_eq!(reports.len(), 1);
}

#[test]
fn multi_seed_keeps_the_best_validation_score() {
    let cfg = tiny_config(1, 4);
    let data = separable(6, 96, cfg.input_rows, cfg.steps);
    let held = separable(7, 64, cfg.input_rows, cfg.steps);
    let template = ModelParams::new(cfg, 1, 0).unwrap();
    let tc = quick(vec![11, 12, 13, 14], 2);
    let (best, reports) = multi_seed_train(&template, &data, &held, &tc, Exec::Sequential).unwrap();
    let top = reports
        .iter()
        .map(|r| r.mean_balanced_accuracy)
        .fold(f64::NEG_INFINITY, f64::max);
    let first = reports.iter().find(|r| r.mean_balanced_accuracy == top).unwrap();
    assert_eq!(best.meta.seed, first.seed);
    assert_eq!(best.meta.validation_accuracy, top);
    let (again, _) = multi_seed_train(&template, &data, &held, &tc, Exec::Parallel).unwrap();
    assert_eq!(again, best);
}

#[test]
fn shape_mismatch_is_an_error() {
    let cfg = tiny_config(1, 4);
    let template = ModelParams::new(cfg, 1, 0).unwrap();
    let wrong = Toy { rows: 13, steps: 4, inputs: vec![vec![0.0; 52]], targets: vec![GestureLabel::REST] };
    assert!(train(&template, &wrong, &quick(vec![1], 1), 1).is_err());
    assert!(ModelParams::new(cfg, 2, 0).is_err());
}
