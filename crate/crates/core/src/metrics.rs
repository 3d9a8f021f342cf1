//! Classification metrics and information-throughput arithmetic.

use serde::{Deserialize, Serialize};

use crate::label::{GestureLabel, DOF_NAMES, NUM_DOF};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("data error: {0}")]
    Data(String),
    #[error("configuration error: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DofCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl DofCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

/// Per-DOF confusion counts; positive means flexing.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts(pub [DofCounts; NUM_DOF]);

impl ConfusionCounts {
    pub fn add(&mut self, predicted: GestureLabel, truth: GestureLabel) {
        for (d, c) in self.0.iter_mut().enumerate() {
            match (predicted.is_flexed(d), truth.is_flexed(d)) {
                (true, true) => c.tp += 1,
                (false, false) => c.tn += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
            }
        }
    }

    pub fn frames(&self) -> u64 {
        self.0[0].total()
    }
}

pub fn confusion(
    predictions: &[GestureLabel],
    truth: &[GestureLabel],
) -> Result<ConfusionCounts, MetricsError> {
    if predictions.len() != truth.len() {
        return Err(MetricsError::Data(format!(
            "{} predictions for {} labels",
            predictions.len(),
            truth.len()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in predictions.iter().zip(truth) {
        c.add(p, t);
    }
    Ok(c)
}

/// Rates for one DOF. A rate is `None` when its class never occurs, and the
/// balanced accuracy is then undefined too.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DofScore {
    pub tpr: Option<f64>,
    pub tnr: Option<f64>,
    pub balanced_accuracy: Option<f64>,
    pub prediction_error: Option<f64>,
}

impl DofScore {
    pub fn from_counts(c: &DofCounts) -> Self {
        let tpr = (c.tp + c.fn_ > 0).then(|| c.tp as f64 / (c.tp + c.fn_) as f64);
        let tnr = (c.tn + c.fp > 0).then(|| c.tn as f64 / (c.tn + c.fp) as f64);
        let balanced_accuracy = tpr.zip(tnr).map(|(p, n)| balanced_from_rates(p, n));
        DofScore {
            tpr,
            tnr,
            balanced_accuracy,
            prediction_error: balanced_accuracy.map(|b| 1.0 - b),
        }
    }

    pub fn is_defined(&self) -> bool {
        self.balanced_accuracy.is_some()
    }
}

pub fn balanced_from_rates(tpr: f64, tnr: f64) -> f64 {
    (tpr + tnr) / 2.0
}

pub fn balanced_accuracy(counts: &ConfusionCounts) -> [DofScore; NUM_DOF] {
    std::array::from_fn(|d| DofScore::from_counts(&counts.0[d]))
}

/// Macro average of the defined per-DOF balanced accuracies; `None` if no DOF
/// is defined.
pub fn mean_balanced_accuracy(scores: &[DofScore; NUM_DOF]) -> Option<f64> {
    let defined: Vec<f64> = scores.iter().filter_map(|s| s.balanced_accuracy).collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

/// For each truth timestamp, the index of the prediction whose timestamp is
/// nearest, ties going to the earlier prediction. Both inputs must be sorted.
pub fn align_nearest(prediction_ts: &[u64], truth_ts: &[u64]) -> Result<Vec<usize>, MetricsError> {
    if prediction_ts.is_empty() {
        return Err(MetricsError::Data("no predictions to align".into()));
    }
    if prediction_ts.windows(2).any(|w| w[0] > w[1]) || truth_ts.windows(2).any(|w| w[0] > w[1]) {
        return Err(MetricsError::Data("timestamps must be sorted".into()));
    }
    let mut j = 0usize;
    Ok(truth_ts
        .iter()
        .map(|&t| {
            while j + 1 < prediction_ts.len() && prediction_ts[j + 1] <= t {
                j += 1;
            }
            if j + 1 < prediction_ts.len() && prediction_ts[j] < t {
                let before = t - prediction_ts[j];
                let after = prediction_ts[j + 1] - t;
                if after < before {
                    return j + 1;
                }
            }
            j
        })
        .collect())
}

/// One row of a per-DOF metric report.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DofRecord {
    pub dof: String,
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tpr: Option<f64>,
    pub tnr: Option<f64>,
    pub balanced_accuracy: Option<f64>,
    pub prediction_error: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricReport {
    pub frames: u64,
    pub dofs: Vec<DofRecord>,
    pub mean_balanced_accuracy: Option<f64>,
    pub undefined_dofs: Vec<String>,
}

impl MetricReport {
    pub fn new(counts: &ConfusionCounts) -> Self {
        let scores = balanced_accuracy(counts);
        let dofs: Vec<DofRecord> = (0..NUM_DOF)
            .map(|d| DofRecord {
                dof: DOF_NAMES[d].to_string(),
                tp: counts.0[d].tp,
                tn: counts.0[d].tn,
                fp: counts.0[d].fp,
                fn_: counts.0[d].fn_,
                tpr: scores[d].tpr,
                tnr: scores[d].tnr,
                balanced_accuracy: scores[d].balanced_accuracy,
                prediction_error: scores[d].prediction_error,
            })
            .collect();
        MetricReport {
            frames: counts.frames(),
            undefined_dofs: dofs
                .iter()
                .filter(|r| r.balanced_accuracy.is_none())
                .map(|r| r.dof.clone())
                .collect(),
            dofs,
            mean_balanced_accuracy: mean_balanced_accuracy(&scores),
        }
    }

    /// One JSON record per DOF, newline-terminated.
    pub fn to_json_lines(&self) -> String {
        self.dofs
            .iter()
            .map(|r| serde_json::to_string(r).expect("plain record") + "\n")
            .collect()
    }

    /// Per-DOF table: TPR, TNR, balanced accuracy, in percent.
    pub fn to_table(&self) -> String {
        let pct = |v: Option<f64>| v.map_or("   n/a".to_string(), |x| format!("{:6.2}", 100.0 * x));
        let mut s = String::from("DOF       TPR(%)  TNR(%)  BalAcc(%)  Error(%)\n");
        for r in &self.dofs {
            s += &format!(
                "{:<8} {}  {}  {}     {}\n",
                r.dof,
                pct(r.tpr),
                pct(r.tnr),
                pct(r.balanced_accuracy),
                pct(r.prediction_error)
            );
        }
        s += &format!("mean balanced accuracy: {}\n", pct(self.mean_balanced_accuracy));
        s
    }
}

/// A discrete distribution over gestures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GestureDistribution(Vec<(GestureLabel, f64)>);

impl GestureDistribution {
    pub fn new(entries: Vec<(GestureLabel, f64)>) -> Result<Self, MetricsError> {
        if entries.is_empty() {
            return Err(MetricsError::Config("empty distribution".into()));
        }
        if entries.iter().any(|(_, p)| !(p.is_finite() && *p >= 0.0)) {
            return Err(MetricsError::Config("probabilities must be finite and ≥ 0".into()));
        }
        let sum: f64 = entries.iter().map(|(_, p)| p).sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(MetricsError::Config(format!("probabilities sum to {sum}")));
        }
        Ok(GestureDistribution(entries))
    }

    /// Rest with probability `p_rest`, the remaining mass split evenly
    /// over `others`.
    pub fn rest_and_uniform(p_rest: f64, others: &[GestureLabel]) -> Result<Self, MetricsError> {
        let each = (1.0 - p_rest) / others.len() as f64;
        let mut entries = vec![(GestureLabel::REST, p_rest)];
        entries.extend(others.iter().map(|&g| (g, each)));
        Self::new(entries)
    }

    pub fn uniform(gestures: &[GestureLabel]) -> Result<Self, MetricsError> {
        let p = 1.0 / gestures.len() as f64;
        Self::new(gestures.iter().map(|&g| (g, p)).collect())
    }

    pub fn entries(&self) -> &[(GestureLabel, f64)] {
        &self.0
    }

    /// Shannon entropy in bits; zero-probability entries contribute nothing.
    pub fn entropy_bits(&self) -> f64 {
        self.0
            .iter()
            .filter(|(_, p)| *p > 0.0)
            .map(|(_, p)| -p * p.log2())
            .sum()
    }
}

pub fn info_per_trial(
    dist: &GestureDistribution,
    selections_per_trial: u32,
) -> Result<f64, MetricsError> {
    if selections_per_trial == 0 {
        return Err(MetricsError::Config("at least one selection per trial".into()));
    }
    Ok(f64::from(selections_per_trial) * dist.entropy_bits())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    pub bps: f64,
    pub bpm: f64,
}

/// Success rate × bits per trial / reaction time.
pub fn information_throughput(
    success_rate: f64,
    info_per_trial_bits: f64,
    reaction_time_s: f64,
) -> Result<Throughput, MetricsError> {
    if !(reaction_time_s > 0.0) {
        return Err(MetricsError::Config(format!(
            "reaction time {reaction_time_s} s must be positive"
        )));
    }
    if !(0.0..=1.0).contains(&success_rate) {
        return Err(MetricsError::Config(format!("success rate {success_rate} outside [0, 1]")));
    }
    let bps = success_rate * info_per_trial_bits / reaction_time_s;
    Ok(Throughput { bps, bpm: 60.0 * bps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::label::gestures;

    fn counts(tp: u64, fn_: u64, tn: u64, fp: u64) -> DofCounts {
        DofCounts { tp, tn, fp, fn_ }
    }

    #[test]
    fn identical_and_complement() {
        let truth: Vec<GestureLabel> = (0..64).map(|m| GestureLabel::from_mask(m).unwrap()).collect();
        let c = confusion(&truth, &truth).unwrap();
        assert!(c.0.iter().all(|d| d.fp == 0 && d.fn_ == 0));
        let comp: Vec<GestureLabel> = truth.iter().map(|g| g.complement()).collect();
        let c = confusion(&comp, &truth).unwrap();
        assert!(c.0.iter().all(|d| d.tp == 0 && d.tn == 0));
        assert!(confusion(&truth[..3], &truth).is_err());
    }

    #[test]
    fn balanced_examples() {
        let s = DofScore::from_counts(&counts(1, 0, 1, 0));
        assert_eq!(s.balanced_accuracy, Some(1.0));
        assert_eq!(s.prediction_error, Some(0.0));
        assert!((balanced_from_rates(0.946, 0.999) - 0.9725).abs() < 1e-12);
        let s = DofScore::from_counts(&counts(0, 10, 10, 0));
        assert_eq!(s.balanced_accuracy, Some(0.5));
        let s = DofScore::from_counts(&counts(0, 0, 10, 2));
        assert!(!s.is_defined());
        assert!(s.tnr.is_some());
    }

    #[test]
    fn nine_gesture_task_carries_five_bits() {
        let d = GestureDistribution::rest_and_uniform(0.5, &gestures::MATCHING_TARGETS).unwrap();
        assert!((info_per_trial(&d, 2).unwrap() - 5.0).abs() < 1e-12);
        let two = GestureDistribution::uniform(&[gestures::THUMB, gestures::INDEX]).unwrap();
        assert!((info_per_trial(&two, 2).unwrap() - 2.0).abs() < 1e-12);
        let four = GestureDistribution::uniform(&gestures::MATCHING_TARGETS[..4]).unwrap();
        assert!((info_per_trial(&four, 1).unwrap() - 2.0).abs() < 1e-12);
        let with_zero = GestureDistribution::new(vec![
            (gestures::THUMB, 0.5),
            (gestures::INDEX, 0.5),
            (gestures::RING, 0.0),
        ])
        .unwrap();
        assert_eq!(with_zero.entropy_bits(), 1.0);
        assert!(GestureDistribution::new(vec![(gestures::THUMB, 0.4)]).is_err());
    }

    #[test]
    fn throughput_examples() {
        let t = information_throughput(0.992, 5.0, 0.81).unwrap();
        assert!((t.bps - 6.123_456_790_123_457).abs() < 1e-12);
        assert!((t.bps - 6.09).abs() <= 0.05);
        assert_eq!(t.bpm, 60.0 * t.bps);
        let t = information_throughput(1.0, 5.0, 1.0).unwrap();
        assert_eq!((t.bps, t.bpm), (5.0, 300.0));
        assert_eq!(information_throughput(0.0, 5.0, 0.8).unwrap().bps, 0.0);
        assert!(information_throughput(1.0, 5.0, 0.0).is_err());
    }

    #[test]
    fn nearest_alignment_ties_go_earlier() {
        let preds = [0, 100, 200];
        assert_eq!(align_nearest(&preds, &[0, 49, 50, 51, 150, 260]).unwrap(), vec![0, 0, 0, 1, 1, 2]);
        assert!(align_nearest(&[], &[1]).is_err());
    }

    #[test]
    fn report_flags_undefined_dofs() {
        let truth = vec![gestures::THUMB, GestureLabel::REST];
        let c = confusion(&truth, &truth).unwrap();
        let r = MetricReport::new(&c);
        assert_eq!(r.undefined_dofs.len(), 5);
        assert_eq!(r.mean_balanced_accuracy, Some(1.0));
        assert_eq!(r.to_json_lines().lines().count(), 6);
        assert!(r.to_table().contains("thumb"));
    }
}
