use serde::{Deserialize, Serialize};

use crate::classifier::PredictionVector;
use crate::{Error, Result};

/// Accuracy of the attacker that calls every correctly classified sample a
/// member, on a balanced member/non-member set.
pub fn gap_attack_accuracy(train_acc: f64, test_acc: f64) -> Result<f64> {
    for a in [train_acc, test_acc] {
        if !(0.0..=1.0).contains(&a) {
            return Err(Error::arg(format!("accuracy {a} outside [0, 1]")));
        }
    }
    Ok(0.5 + (train_acc - test_acc) / 2.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Correctness,
    Loss,
    Confidence,
    Entropy,
    Mentropy,
}

impl MetricKind {
    pub const ALL: [MetricKind; 5] =
        [MetricKind::Correctness, MetricKind::Loss, MetricKind::Confidence, MetricKind::Entropy, MetricKind::Mentropy];

    pub fn id(self) -> &'static str {
        match self {
            MetricKind::Correctness => "correctness",
            MetricKind::Loss => "loss",
            MetricKind::Confidence => "confidence",
            MetricKind::Entropy => "entropy",
            MetricKind::Mentropy => "mentropy",
        }
    }
}

/// Member-oriented score of one prediction: larger means more member-like.
///
/// | kind        | score                                              |
/// |-------------|----------------------------------------------------|
/// | correctness | 1 if the argmax is the true label, else 0          |
/// | loss        | `log p_y`                                          |
/// | confidence  | `max_i p_i`                                        |
/// | entropy     | `sum_i p_i log p_i`                                |
/// | mentropy    | `(1 - p_y) log p_y + sum_{i != y} p_i log(1 - p_i)` |
///
/// Probabilities are clamped to `[1e-7, 1 - 1e-7]` first.
pub fn metric_score(pred: &PredictionVector, true_label: usize, kind: MetricKind) -> Result<f64> {
    if true_label >= pred.num_classes() {
        return Err(Error::arg(format!("label {true_label} outside {} classes", pred.num_classes())));
    }
    let p = pred.clamped();
    let py = p[true_label];
    Ok(match kind {
        MetricKind::Correctness => f64::from(u8::from(pred.predicted_label() == true_label)),
        MetricKind::Loss => py.ln(),
        MetricKind::Confidence => p.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        MetricKind::Entropy => p.iter().map(|q| q * q.ln()).sum(),
        MetricKind::Mentropy => {
            let others: f64 =
                p.iter().enumerate().filter(|(i, _)| *i != true_label).map(|(_, q)| q * (1.0 - q).ln()).sum();
            (1.0 - py) * py.ln() + others
        }
    })
}

/// `(TPR + TNR) / 2` of hard member decisions.
pub fn balanced_accuracy(decisions: &[bool], members: &[bool]) -> Result<f64> {
    if decisions.len() != members.len() {
        return Err(Error::arg("decisions and membership differ in length"));
    }
    let pos = members.iter().filter(|&&m| m).count();
    let neg = members.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Calibration("need both members and non-members".into()));
    }
    let tp = decisions.iter().zip(members).filter(|(&d, &m)| d && m).count();
    let tn = decisions.iter().zip(members).filter(|(&d, &m)| !d && !m).count();
    Ok(0.5 * (tp as f64 / pos as f64 + tn as f64 / neg as f64))
}

/// Decision thresholds: a sample is called a member when its score is at
/// least the threshold of its class (or the global one).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub global: f64,
    /// `None` for classes that fall back to `global`.
    pub per_class: Vec<Option<f64>>,
    /// Balanced accuracy of the global threshold on the calibration data.
    pub calibration_accuracy: f64,
}

impl Thresholds {
    pub fn threshold_for(&self, label: usize) -> f64 {
        self.per_class.get(label).copied().flatten().unwrap_or(self.global)
    }

    pub fn decide(&self, score: f64, label: usize) -> bool {
        score >= self.threshold_for(label)
    }

    /// Score relative to the applicable threshold, for ranking metrics.
    pub fn margin(&self, score: f64, label: usize) -> f64 {
        score - self.threshold_for(label)
    }
}

/// Threshold maximizing balanced accuracy, and that accuracy. Candidates are
/// the midpoints between consecutive distinct scores plus one value below and
/// one above the range; ties go to the lowest threshold.
fn sweep(scores: &[f64], members: &[bool]) -> Result<(f64, f64)> {
    let pos = members.iter().filter(|&&m| m).count();
    let neg = members.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Calibration("threshold calibration needs both members and non-members".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let bal = |tp: usize, fp: usize| 0.5 * (tp as f64 / pos as f64 + (neg - fp) as f64 / neg as f64);

    let (mut tp, mut fp) = (pos, neg);
    let lowest = scores[order[0]];
    let mut best = (lowest - 1.0, bal(tp, fp));
    let mut i = 0;
    while i < order.len() {
        let v = scores[order[i]];
        while i < order.len() && scores[order[i]] == v {
            if members[order[i]] {
                tp -= 1;
            } else {
                fp -= 1;
            }
            i += 1;
        }
        let tau = if i < order.len() { 0.5 * (v + scores[order[i]]) } else { v + 1.0 };
        let acc = bal(tp, fp);
        if acc > best.1 {
            best = (tau, acc);
        }
    }
    Ok(best)
}

/// Calibrates member/non-member thresholds on the attacker's known samples.
/// With `labels`, one threshold per class is fitted where that class has
/// both memberships; the remaining classes use the global threshold.
pub fn calibrate_threshold(
    scores: &[f64],
    members: &[bool],
    labels: Option<(&[usize], usize)>,
) -> Result<Thresholds> {
    if scores.len() != members.len() {
        return Err(Error::arg("scores and membership differ in length"));
    }
    let (global, calibration_accuracy) = sweep(scores, members)?;
    let per_class = match labels {
        None => Vec::new(),
        Some((labels, num_classes)) => {
            if labels.len() != scores.len() {
                return Err(Error::arg("scores and labels differ in length"));
            }
            (0..num_classes)
                .map(|c| {
                    let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
                    let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
                    let m: Vec<bool> = idx.iter().map(|&i| members[i]).collect();
                    sweep(&s, &m).ok().map(|(t, _)| t)
                })
                .collect()
        }
    };
    Ok(Thresholds { global, per_class, calibration_accuracy })
}
