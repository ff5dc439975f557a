//! Privacy and divergence metrics.
//!
//! Scores are member-oriented: a higher score means "more member-like".

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Number of bins used for logit histograms unless configured otherwise.
pub const DEFAULT_BINS: usize = 30;
/// Additive smoothing applied to histogram masses before JS divergence.
pub const JS_SMOOTHING: f64 = 1e-10;
/// The low-FPR / low-FNR operating point.
pub const LOW_RATE: f64 = 0.001;

fn class_counts(scores: &[f64], members: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != members.len() {
        return Err(Error::Metric(format!(
            "{} scores but {} membership labels",
            scores.len(),
            members.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Metric("scores must be finite".into()));
    }
    let pos = members.iter().filter(|&&m| m).count();
    let neg = members.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Metric("need both members and non-members".into()));
    }
    Ok((pos, neg))
}

/// Mann-Whitney AUC: the probability that a random member outscores a
/// random non-member, ties counted one half. Computed from average ranks.
pub fn roc_auc(scores: &[f64], members: &[bool]) -> Result<f64> {
    let (pos, neg) = class_counts(scores, members)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their average
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| members[k]).count() as f64;
        i = j + 1;
    }
    let pos_f = pos as f64;
    Ok((rank_sum - pos_f * (pos_f + 1.0) / 2.0) / (pos_f * neg as f64))
}

/// ROC operating points `(fpr, tpr)` for thresholds "member iff score >= tau",
/// from `tau = +inf` down through every distinct score. Starts at `(0, 0)`
/// and ends at `(1, 1)`.
pub fn roc_curve(scores: &[f64], members: &[bool]) -> Result<Vec<(f64, f64)>> {
    let (pos, neg) = class_counts(scores, members)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if members[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(points)
}

/// Best balanced accuracy over all thresholds.
pub fn best_threshold_accuracy(scores: &[f64], members: &[bool]) -> Result<f64> {
    Ok(roc_curve(scores, members)?
        .into_iter()
        .map(|(fpr, tpr)| 0.5 * (tpr + 1.0 - fpr))
        .fold(0.0, f64::max))
}

/// Largest TPR reachable with FPR at most `fpr_target`. No interpolation
/// between operating points.
pub fn tpr_at_fpr(scores: &[f64], members: &[bool], fpr_target: f64) -> Result<f64> {
    let neg = members.iter().filter(|&&m| !m).count();
    if neg > 0 && (neg as f64) < 1.0 / fpr_target {
        log::warn!("TPR at FPR {fpr_target} estimated from only {neg} non-members (low resolution)");
    }
    Ok(roc_curve(scores, members)?
        .into_iter()
        .filter(|&(fpr, _)| fpr <= fpr_target + 1e-15)
        .map(|(_, tpr)| tpr)
        .fold(0.0, f64::max))
}

/// Largest TNR reachable with FNR at most `fnr_target`.
pub fn tnr_at_fnr(scores: &[f64], members: &[bool], fnr_target: f64) -> Result<f64> {
    let pos = members.iter().filter(|&&m| m).count();
    if pos > 0 && (pos as f64) < 1.0 / fnr_target {
        log::warn!("TNR at FNR {fnr_target} estimated from only {pos} members (low resolution)");
    }
    Ok(roc_curve(scores, members)?
        .into_iter()
        .filter(|&(_, tpr)| 1.0 - tpr <= fnr_target + 1e-15)
        .map(|(fpr, _)| 1.0 - fpr)
        .fold(0.0, f64::max))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    bin_edges: Vec<f64>,
    mass: Vec<f64>,
}

impl Histogram {
    pub fn bin_edges(&self) -> &[f64] {
        &self.bin_edges
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    pub fn num_bins(&self) -> usize {
        self.mass.len()
    }
}

/// Equal-width histogram over `range` (or the observed range), with
/// out-of-range values clipped into the end bins.
pub fn histogram(values: &[f64], num_bins: usize, range: Option<(f64, f64)>) -> Result<Histogram> {
    let weights = vec![1.0; values.len()];
    histogram_weighted(values, &weights, num_bins, range)
}

/// Like [`histogram`] with a non-negative weight per value.
pub fn histogram_weighted(
    values: &[f64],
    weights: &[f64],
    num_bins: usize,
    range: Option<(f64, f64)>,
) -> Result<Histogram> {
    if values.is_empty() {
        return Err(Error::arg("histogram of an empty sample"));
    }
    if num_bins == 0 {
        return Err(Error::arg("histogram needs at least one bin"));
    }
    if weights.len() != values.len() || weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::arg("need one non-negative weight per value"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::arg("histogram values must be finite"));
    }
    let (mut lo, mut hi) = match range {
        Some(r) => r,
        None => value_range(values),
    };
    if !(lo.is_finite() && hi.is_finite()) || lo > hi {
        return Err(Error::arg(format!("invalid histogram range ({lo}, {hi})")));
    }
    if hi - lo <= f64::EPSILON * lo.abs().max(1.0) {
        lo -= 0.5;
        hi += 0.5;
    }
    let width = (hi - lo) / num_bins as f64;
    let bin_edges: Vec<f64> = (0..=num_bins)
        .map(|i| if i == num_bins { hi } else { lo + width * i as f64 })
        .collect();
    let mut mass = vec![0.0; num_bins];
    for (&v, &w) in values.iter().zip(weights) {
        let idx = ((v - lo) / width).floor();
        let idx = if idx < 0.0 { 0 } else { (idx as usize).min(num_bins - 1) };
        mass[idx] += w;
    }
    let total: f64 = mass.iter().sum();
    if !(total > 0.0) {
        return Err(Error::arg("histogram weights sum to zero"));
    }
    mass.iter_mut().for_each(|m| *m /= total);
    Ok(Histogram { bin_edges, mass })
}

pub fn value_range(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

/// Base-2 Jensen-Shannon divergence between two histograms on the same
/// bins, after `JS_SMOOTHING` additive smoothing. Lies in `[0, 1]`.
pub fn js_divergence(p: &Histogram, q: &Histogram) -> Result<f64> {
    if p.bin_edges != q.bin_edges {
        return Err(Error::arg("JS divergence needs histograms with identical bin edges"));
    }
    let smooth = |h: &Histogram| {
        let z: f64 = h.mass.iter().map(|m| m + JS_SMOOTHING).sum();
        h.mass.iter().map(|m| (m + JS_SMOOTHING) / z).collect::<Vec<_>>()
    };
    let (p, q) = (smooth(p), smooth(q));
    let mut js = 0.0;
    for (&a, &b) in p.iter().zip(&q) {
        let m = 0.5 * (a + b);
        js += 0.5 * a * (a / m).log2() + 0.5 * b * (b / m).log2();
    }
    Ok(js.clamp(0.0, 1.0))
}

/// JS divergence between two samples binned on their pooled range.
pub fn js_between(a: &[f64], b: &[f64], num_bins: usize) -> Result<f64> {
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let range = value_range(&pooled);
    js_divergence(&histogram(a, num_bins, Some(range))?, &histogram(b, num_bins, Some(range))?)
}

/// Average ranks (1-based), ties sharing the mean rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation; `None` when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Persisted summary of one attack against one target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricBundle {
    pub attack_id: String,
    pub target_id: String,
    pub auc: f64,
    pub attack_accuracy: f64,
    pub tpr_at_fpr001: f64,
    pub tnr_at_fnr001: f64,
    pub n_members: usize,
    pub n_nonmembers: usize,
}

impl MetricBundle {
    /// Computes every metric from eval-set scores. `attack_accuracy` is the
    /// best-threshold balanced accuracy unless the attack supplies its own.
    pub fn compute(
        attack_id: &str,
        target_id: &str,
        scores: &[f64],
        members: &[bool],
        attack_accuracy: Option<f64>,
    ) -> Result<Self> {
        let (pos, neg) = class_counts(scores, members)?;
        Ok(Self {
            attack_id: attack_id.to_string(),
            target_id: target_id.to_string(),
            auc: roc_auc(scores, members)?,
            attack_accuracy: match attack_accuracy {
                Some(a) => a,
                None => best_threshold_accuracy(scores, members)?,
            },
            tpr_at_fpr001: tpr_at_fpr(scores, members, LOW_RATE)?,
            tnr_at_fnr001: tnr_at_fnr(scores, members, LOW_RATE)?,
            n_members: pos,
            n_nonmembers: neg,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labels(pos: usize, neg: usize) -> Vec<bool> {
        std::iter::repeat_n(true, pos).chain(std::iter::repeat_n(false, neg)).collect()
    }

    #[test]
    fn auc_edge_cases() {
        let m = labels(3, 3);
        assert_eq!(roc_auc(&[4., 5., 6., 1., 2., 3.], &m).unwrap(), 1.0);
        assert_eq!(roc_auc(&[1.0; 6], &m).unwrap(), 0.5);
        assert!(roc_auc(&[1.0, 2.0], &[true, true]).is_err());
        assert!(roc_auc(&[1.0], &[true, false]).is_err());
    }

    #[test]
    fn accuracy_and_low_rates_on_separated_scores() {
        let m = labels(3, 3);
        let s = [4., 5., 6., 1., 2., 3.];
        assert_eq!(best_threshold_accuracy(&s, &m).unwrap(), 1.0);
        assert_eq!(tpr_at_fpr(&s, &m, 0.001).unwrap(), 1.0);
        assert_eq!(tnr_at_fnr(&s, &m, 0.001).unwrap(), 1.0);
    }

    #[test]
    fn hand_built_ten_point_case() {
        // members: 0.9 0.8 0.55 0.4 0.2 ; non-members: 0.7 0.6 0.5 0.3 0.1
        let s = [0.9, 0.8, 0.55, 0.4, 0.2, 0.7, 0.6, 0.5, 0.3, 0.1];
        let m = labels(5, 5);
        // Sweep by hand: tau=0.8 gives TPR 0.4 at FPR 0; tau=0.7 FPR 0.2.
        assert_eq!(tpr_at_fpr(&s, &m, 0.0).unwrap(), 0.4);
        assert_eq!(tpr_at_fpr(&s, &m, 0.2).unwrap(), 0.4);
        assert_eq!(tpr_at_fpr(&s, &m, 0.4).unwrap(), 0.6);
        // FNR 0 needs tau <= 0.2, which flags 4 of 5 non-members: TNR 0.2.
        assert!((tnr_at_fnr(&s, &m, 0.0).unwrap() - 0.2).abs() < 1e-12);
        // Pairwise wins: 5 + 5 + 3 + 2 + 1 = 16 of 25.
        assert!((roc_auc(&s, &m).unwrap() - 16.0 / 25.0).abs() < 1e-12);
        // Best threshold tau = 0.8: (0.4 + 1.0) / 2 = 0.7; tau = 0.55: (0.6 + 0.6)/2.
        assert!((best_threshold_accuracy(&s, &m).unwrap() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn histogram_basics() {
        let h = histogram(&[3.0], 1, None).unwrap();
        assert_eq!(h.mass(), &[1.0]);
        let grid: Vec<f64> = (0..100).map(|i| i as f64 + 0.5).collect();
        let h = histogram(&grid, 10, Some((0.0, 100.0))).unwrap();
        for m in h.mass() {
            assert!((m - 0.1).abs() < 1e-12);
        }
        let clipped = histogram(&[-5.0, 0.25, 50.0], 2, Some((0.0, 1.0))).unwrap();
        assert_eq!(clipped.mass(), &[2.0 / 3.0, 1.0 / 3.0]);
        assert!(histogram(&[], 3, None).is_err());
        assert!(histogram(&[1.0], 0, None).is_err());
    }

    #[test]
    fn js_extremes() {
        let a = histogram(&[0.1, 0.2], 2, Some((0.0, 1.0))).unwrap();
        let b = histogram(&[0.8, 0.9], 2, Some((0.0, 1.0))).unwrap();
        assert!(js_divergence(&a, &a).unwrap() < 1e-12);
        assert!((js_divergence(&a, &b).unwrap() - 1.0).abs() < 1e-6);
        let c = histogram(&[0.8], 3, Some((0.0, 1.0))).unwrap();
        assert!(js_divergence(&a, &c).is_err());
    }

    #[test]
    fn spearman_basics() {
        assert_eq!(spearman(&[1., 2., 3.], &[10., 20., 30.]), Some(1.0));
        assert_eq!(spearman(&[1., 2., 3.], &[3., 2., 1.]), Some(-1.0));
        assert_eq!(spearman(&[1., 1., 1.], &[3., 2., 1.]), None);
    }

    fn scored() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
        (2usize..40).prop_flat_map(|n| {
            (
                prop::collection::vec(-5.0f64..5.0, n).prop_map(|v| {
                    // coarse grid so ties occur
                    v.into_iter().map(|x| (x * 2.0).round() / 2.0).collect()
                }),
                prop::collection::vec(any::<bool>(), n),
            )
        })
        .prop_filter("both classes", |(_, m)| m.iter().any(|&b| b) && m.iter().any(|&b| !b))
    }

    proptest! {
        #[test]
        fn auc_is_rank_invariant_and_antisymmetric((s, m) in scored()) {
            let auc = roc_auc(&s, &m).unwrap();
            let exp: Vec<f64> = s.iter().map(|x| x.exp()).collect();
            let affine: Vec<f64> = s.iter().map(|x| 3.0 * x - 7.0).collect();
            let neg: Vec<f64> = s.iter().map(|x| -x).collect();
            prop_assert!((roc_auc(&exp, &m).unwrap() - auc).abs() < 1e-12);
            prop_assert!((roc_auc(&affine, &m).unwrap() - auc).abs() < 1e-12);
            prop_assert!((roc_auc(&neg, &m).unwrap() + auc - 1.0).abs() < 1e-12);
        }

        #[test]
        fn tpr_at_fpr_is_monotone((s, m) in scored(), a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(tpr_at_fpr(&s, &m, lo).unwrap() <= tpr_at_fpr(&s, &m, hi).unwrap());
            prop_assert!(best_threshold_accuracy(&s, &m).unwrap() >= 0.5);
        }

        #[test]
        fn js_is_symmetric_bounded(p in prop::collection::vec(0.0f64..1.0, 1..30),
                                   q in prop::collection::vec(0.0f64..1.0, 1..30)) {
            let (hp, hq) = (
                histogram(&p, 8, Some((0.0, 1.0))).unwrap(),
                histogram(&q, 8, Some((0.0, 1.0))).unwrap(),
            );
            let d = js_divergence(&hp, &hq).unwrap();
            prop_assert!((0.0..=1.0).contains(&d));
            prop_assert!((d - js_divergence(&hq, &hp).unwrap()).abs() < 1e-12);
            prop_assert!(js_divergence(&hp, &hp).unwrap() < 1e-9);
            prop_assert!((hp.mass().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
