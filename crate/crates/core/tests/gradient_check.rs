mod common;

use common::{random_params, tiny_config, uniform};
use neurodecode::model::{loss_and_gradients, ModelParams, Mode, WEIGHT_NAMES};
use neurodecode::GestureLabel;

const H: f64 = 1e-5;

fn setup() -> (ModelParams, Vec<f64>, Vec<GestureLabel>, Vec<f64>) {
    let cfg = tiny_config(2, 5);
    let p = random_params(cfg, 2, 3);
    let batch = 4;
    let input = uniform(77, batch * cfg.steps * cfg.input_rows);
    let targets: Vec<GestureLabel> = ["100000", "011000", "000001", "110011"]
        .iter()
        .map(|s| s.parse().unwrap())
        .collect();
    let keep = 1.0 / (1.0 - cfg.dropout_rate);
    let mask: Vec<f64> = (0..batch * cfg.gru_hidden).map(|i| if i % 3 == 1 { 0.0 } else { keep }).collect();
    (p, input, targets, mask)
}

fn loss(p: &ModelParams, input: &[f64], targets: &[GestureLabel], mask: &[f64]) -> f64 {
    p.forward(input, targets.len(), Mode::Train { dropout: Some(mask) })
        .unwrap()
        .loss(targets)
}

/// Every parameter of every layer against central differences.
#[test]
fn analytic_matches_finite_differences() {
    let (p, input, targets, mask) = setup();
    let (g, _) = loss_and_gradients(&p, &input, &targets, Some(&mask)).unwrap();
    let analytic = g.weights.tensors();
    let mut worst = 0.0f64;
    for (k, name) in WEIGHT_NAMES.iter().enumerate() {
        let n = analytic[k].len();
        for i in 0..n {
            let mut plus = p.clone();
            plus.weights.tensors_mut()[k][i] += H;
            let mut minus = p.clone();
            minus.weights.tensors_mut()[k][i] -= H;
            let numeric = (loss(&plus, &input, &targets, &mask) - loss(&minus, &input, &targets, &mask)) / (2.0 * H);
            let a = analytic[k][i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
            assert!(rel < 1e-4, "{name}[{i}]: analytic {a:e}, numeric {numeric:e}, rel {rel:e}");
        }
    }
    eprintln!("worst relative error {worst:e}");
}

#[test]
fn duplicated_batch_gives_the_same_gradient() {
    let (p, input, targets, _) = setup();
    let per = p.config.steps * p.config.input_rows;
    let one = &input[..per];
    let (g1, _) = loss_and_gradients(&p, one, &targets[..1], None).unwrap();
    let dup: Vec<f64> = one.repeat(64);
    let (g64, _) = loss_and_gradients(&p, &dup, &vec![targets[0]; 64], None).unwrap();
    for (a, b) in g1.weights.tensors().iter().zip(g64.weights.tensors()) {
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() <= 1e-10 * x.abs().max(1e-8), "{x} vs {y}");
        }
    }

    // Two copies of a half batch: batch-norm statistics are unchanged.
    let half = 2;
    let mut doubled = input[..half * per].to_vec();
    doubled.extend_from_slice(&input[..half * per]);
    let mut t2 = targets[..half].to_vec();
    t2.extend_from_slice(&targets[..half]);
    let (gh, _) = loss_and_gradients(&p, &input[..half * per], &targets[..half], None).unwrap();
    let (gd, _) = loss_and_gradients(&p, &doubled, &t2, None).unwrap();
    for (a, b) in gh.weights.tensors().iter().zip(gd.weights.tensors()) {
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() <= 1e-10 * x.abs().max(1e-8));
        }
    }
}
