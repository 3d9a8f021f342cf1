mod common;

use common::{brute_features, uniform};
use neurodecode::features::{
    build_feature_tensor, extract_features, fit_norm_stats, normalize, FeatureTensor, FeatureThresholds,
    FeatureWindowSpec, NormStats, NUM_FEATURES,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn close(a: f64, b: f64, rel: f64) -> bool {
    a == b || (a - b).abs() <= rel * a.abs().max(b.abs())
}

#[test]
fn seed_42_window_matches_brute_force() {
    let x = uniform(42, 500);
    let th = FeatureThresholds::default();
    let got = extract_features(&x, &th).unwrap();
    let want = brute_features(&x, &th);
    for (i, (g, w)) in got.0.iter().zip(&want).enumerate() {
        assert!(close(*g, *w, 1e-12), "feature {i}: {g} vs {w}");
    }
}

#[test]
fn odd_lengths_and_scaled_inputs() {
    let th = FeatureThresholds::default();
    for (seed, n) in [(1, 4), (2, 5), (3, 7), (4, 333), (5, 501)] {
        for scale in [1e-3, 1.0, 40.0] {
            let x: Vec<f64> = uniform(seed, n).iter().map(|v| v * scale).collect();
            let got = extract_features(&x, &th).unwrap();
            let want = brute_features(&x, &th);
            for i in 0..NUM_FEATURES {
                // MAVS is a difference of means, so compare it on the MAB scale.
                let ok = if i == 12 {
                    (got.0[i] - want[i]).abs() <= 1e-12 * want[4]
                } else {
                    close(got.0[i], want[i], 1e-12)
                };
                assert!(ok, "n={n} scale={scale} feature {i}: {} vs {}", got.0[i], want[i]);
            }
        }
    }
}

#[test]
fn tiny_values_keep_ld_finite() {
    let th = FeatureThresholds::default();
    let x: Vec<f64> = uniform(9, 500).iter().map(|v| v * 1e-200).collect();
    let got = extract_features(&x, &th).unwrap();
    let want = brute_features(&x, &th);
    assert!(got.0.iter().all(|v| v.is_finite()));
    assert!(close(got.0[8], want[8], 1e-12));
}

#[test]
fn scale_equivariance() {
    let x = uniform(11, 500);
    let th = FeatureThresholds::default();
    let base = extract_features(&x, &th).unwrap();
    for a in [0.5, 3.0, 17.0] {
        let y: Vec<f64> = x.iter().map(|v| v * a).collect();
        let f = extract_features(&y, &th.scaled(a)).unwrap();
        for (name, i, p) in [("WL", 2, 1), ("MAB", 4, 1), ("RMS", 6, 1), ("DABS", 9, 1), ("MSQ", 5, 2)] {
            assert!(close(f.0[i], base.0[i] * a.powi(p), 1e-12), "{name} at a={a}");
        }
        for (name, i) in [("ZC", 0), ("SSC", 1), ("MPR", 11)] {
            assert_eq!(f.0[i], base.0[i], "{name} at a={a}");
        }
    }
}

#[test]
fn norm_matches_scalar_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (channels, steps) = (2, 6);
    let rows = channels * NUM_FEATURES;
    let tensors: Vec<FeatureTensor> = (0..4)
        .map(|i| {
            let v: Vec<f64> = (0..rows * steps).map(|_| rng.gen_range(-3.0..5.0)).collect();
            FeatureTensor::from_values(channels, steps, v, 1000 + i, 5000).unwrap()
        })
        .collect();
    let stats = fit_norm_stats(&tensors).unwrap();
    let count = (tensors.len() * steps) as f64;
    for r in 0..rows {
        let mean: f64 = tensors.iter().flat_map(|t| (0..steps).map(move |s| t.get(r, s))).sum::<f64>() / count;
        let var: f64 = tensors
            .iter()
            .flat_map(|t| (0..steps).map(move |s| (t.get(r, s) - mean).powi(2)))
            .sum::<f64>()
            / count;
        assert!((stats.mean[r] - mean).abs() <= 1e-10 * mean.abs().max(1.0));
        assert!((stats.std[r] - var.sqrt()).abs() <= 1e-10 * var.sqrt());
    }
    let out = normalize(&tensors[0], &stats).unwrap();
    for r in 0..rows {
        for s in 0..steps {
            let want = (tensors[0].get(r, s) - stats.mean[r]) / stats.std[r];
            assert!((out.get(r, s) - want).abs() <= 1e-12 * want.abs().max(1.0));
        }
    }
    let wrong = NormStats::identity(rows + 1);
    assert!(normalize(&tensors[0], &wrong).is_err());
}

#[test]
fn consecutive_frames_share_columns() {
    let spec = FeatureWindowSpec::default();
    let th = FeatureThresholds::default();
    let step = spec.step_samples(5000);
    let need = spec.required_samples(5000);
    let chans: Vec<Vec<f64>> = (0..3).map(|c| uniform(100 + c, need + 10 * step)).collect();
    let mut prev: Option<FeatureTensor> = None;
    for k in 0..10 {
        let end = need + k * step;
        let view: Vec<&[f64]> = chans.iter().map(|c| &c[..end]).collect();
        let t = build_feature_tensor(&view, &spec, &th, 5000, end as u64).unwrap();
        assert_eq!(t.shape(), (3 * NUM_FEATURES, 50));
        if let Some(p) = &prev {
            for s in 0..49 {
                assert_eq!(t.column(s), p.column(s + 1), "frame {k} column {s}");
            }
        }
        prev = Some(t);
    }
}
