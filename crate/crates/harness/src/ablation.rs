//! Sweeps and ablations over a built [`Run`]: the N/T grid, the interval
//! scan, the keep-generating CDF and per-query latency.

use std::time::Instant;

use anyhow::{bail, Result};
use serde::{Deserialize, Serialize};

use diffguard::attacks::{attack_target, TargetDescriptor, TargetParts};
use diffguard::defense::{candidate_set, simulated_js, DefenseConfig, Scenario, SelectionInterval};
use diffguard::metrics::spearman;

use crate::config::AttackKind;
use crate::experiment::{Observed, Run};

/// Best-attack AUC and accuracy of one grid cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub best_auc: f64,
    pub best_accuracy: f64,
    pub auc_by_attack: Vec<(String, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanRow {
    pub lo: f64,
    pub hi: f64,
    /// Simulated JS on the defender's calibration samples.
    pub calibration_js: f64,
    /// JS of the deployed defense on the eval samples.
    pub eval_js: f64,
    pub best_auc: f64,
    pub best_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeepGenerating {
    pub max_iters: usize,
    pub lo: f64,
    pub hi: f64,
    pub samples: usize,
    /// Samples whose first reconstruction misses the interval or flips the label.
    pub initially_missing: usize,
    /// `cdf[i]`: fraction of all samples hit within `i + 1` generations.
    pub cdf: Vec<f64>,
    /// `missing_cdf[i]`: fraction of the initially missing samples hit
    /// within `i + 1` generations.
    pub missing_cdf: Vec<f64>,
    /// Fraction of the defender's reconstruction logits inside the interval.
    pub interval_coverage: f64,
}

impl KeepGenerating {
    /// Fraction of initially missing samples that hit by the last iteration.
    pub fn late_hit_rate(&self) -> f64 {
        self.missing_cdf.last().copied().unwrap_or(0.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub target: String,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub queries: usize,
    pub mean_ms: f64,
    pub p95_ms: f64,
}

/// The configured attacks that work from black-box outputs alone.
pub fn output_attacks(attacks: &[AttackKind]) -> Vec<AttackKind> {
    let v: Vec<AttackKind> = attacks.iter().copied().filter(|a| !a.is_lira()).collect();
    if v.is_empty() {
        AttackKind::METRIC.to_vec()
    } else {
        v
    }
}

fn best_of(run: &Run, attacks: &[AttackKind], known: &Observed, eval: &Observed) -> Result<(f64, f64, Vec<(String, f64)>)> {
    let mut best = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    let mut by = Vec::new();
    for &a in attacks {
        let (scores, acc) = run.attack(a, "defended", known, eval)?;
        let m = scores.metrics(Some(acc))?;
        best = (best.0.max(m.auc), best.1.max(acc));
        by.push((a.id().to_string(), m.auc));
    }
    Ok((best.0, best.1, by))
}

/// Best-attack metrics of the defended target on the `N` x `T` grid. Each
/// cell refits the interval of the deployed scenario.
pub fn sweep_nt(run: &Run, n_values: &[usize], t_values: &[usize]) -> Result<Vec<SweepCell>> {
    let t_max = run.diffusion.schedule().t_max();
    if let Some(&t) = t_values.iter().find(|&&t| t == 0 || t > t_max) {
        bail!("T = {t} is outside 1..={t_max}");
    }
    if n_values.contains(&0) {
        bail!("N must be at least 1");
    }
    let attacks = output_attacks(&run.cfg.attacks);
    let mut cells = Vec::with_capacity(n_values.len() * t_values.len());
    for &n in n_values {
        for &t in t_values {
            let d = run.defense_with(n, t);
            let iv = run.calibrate(&d)?.interval()?;
            let (known, eval) = run.observe_pair(TargetDescriptor::Defended, &d, iv.as_ref())?;
            let (best_auc, best_accuracy, auc_by_attack) = best_of(run, &attacks, &known, &eval)?;
            log::info!("sweep N={n} T={t}: best AUC {best_auc:.4}");
            cells.push(SweepCell { n, t, best_auc, best_accuracy, auc_by_attack });
        }
    }
    Ok(cells)
}

/// `count` intervals from the Scenario 1 grid, spread evenly over the ranks
/// of their simulated JS, starting with the fitted optimum.
pub fn scan_candidates(evaluated: &[(SelectionInterval, f64)], count: usize) -> Vec<SelectionInterval> {
    if evaluated.is_empty() || count == 0 {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..evaluated.len()).collect();
    order.sort_by(|&a, &b| evaluated[a].1.total_cmp(&evaluated[b].1).then(a.cmp(&b)));
    let count = count.min(order.len());
    let last = order.len() - 1;
    (0..count)
        .map(|i| {
            let rank = if count == 1 { 0 } else { (i * last + (count - 1) / 2) / (count - 1) };
            evaluated[order[rank]].0
        })
        .collect()
}

/// Deploys each interval on the eval set and records its JS and the best
/// attack against it.
pub fn interval_js_scan(run: &Run, intervals: &[SelectionInterval]) -> Result<Vec<ScanRow>> {
    let d = DefenseConfig { scenario: Scenario::One, aggregation: false, ..run.defense.clone() };
    let members = run.calibration_samples(&run.split.defender_member_ids, &d)?;
    let nonmembers = run.calibration_samples(&run.split.defender_nonmember_ids, &d)?;
    let attacks = output_attacks(&run.cfg.attacks);
    intervals
        .iter()
        .map(|iv| {
            let calibration_js = simulated_js(&members, &nonmembers, iv, d.fallback, d.grid.num_bins)?;
            let (known, eval) = run.observe_pair(TargetDescriptor::Defended, &d, Some(iv))?;
            let (best_auc, best_accuracy, _) = best_of(run, &attacks, &known, &eval)?;
            Ok(ScanRow { lo: iv.lo, hi: iv.hi, calibration_js, eval_js: eval.js()?, best_auc, best_accuracy })
        })
        .collect()
}

/// Spearman correlation between eval JS and best-attack AUC over a scan.
pub fn scan_correlation(rows: &[ScanRow]) -> Option<f64> {
    let js: Vec<f64> = rows.iter().map(|r| r.eval_js).collect();
    let auc: Vec<f64> = rows.iter().map(|r| r.best_auc).collect();
    spearman(&js, &auc)
}

/// Generations-to-hit statistics of the keep-generating alternative on the
/// eval samples: generate single reconstructions until one keeps the label
/// and lands in `interval`. Uses the cached variants in generation order,
/// which are the same draws `keep_generating_select` makes.
pub fn keep_generating_cdf(run: &Run, interval: &SelectionInterval, max_iters: usize) -> Result<KeepGenerating> {
    if max_iters == 0 {
        bail!("max_iters must be at least 1");
    }
    let d = DefenseConfig { n: max_iters, ..run.defense.clone() };
    let ids = run.split.eval_ids();
    let queries = run.queries(&ids, &d)?;
    let mut first_hit = Vec::with_capacity(ids.len());
    for q in &queries {
        let label = q.original.predicted_label();
        first_hit.push(
            (0..max_iters)
                .find(|&j| q.batch.predictions[j].predicted_label() == label && interval.contains(q.batch.logits[j])),
        );
    }
    let missing: Vec<Option<usize>> = first_hit.iter().copied().filter(|h| *h != Some(0)).collect();
    let cdf_of = |hits: &[Option<usize>]| -> Vec<f64> {
        (0..max_iters)
            .map(|i| hits.iter().filter(|h| h.is_some_and(|j| j <= i)).count() as f64 / hits.len().max(1) as f64)
            .collect()
    };
    let cal = run.queries(&run.split.defender_member_ids, &run.defense)?;
    let cal_n = run.queries(&run.split.defender_nonmember_ids, &run.defense)?;
    let (inside, total) = cal.iter().chain(&cal_n).fold((0usize, 0usize), |(i, t), q| {
        let cands = candidate_set(&q.batch, &q.original);
        let hits = cands.indices.iter().filter(|&&j| interval.contains(q.batch.logits[j])).count();
        (i + hits, t + q.batch.len())
    });
    Ok(KeepGenerating {
        max_iters,
        lo: interval.lo,
        hi: interval.hi,
        samples: ids.len(),
        initially_missing: missing.len(),
        cdf: cdf_of(&first_hit),
        missing_cdf: cdf_of(&missing),
        interval_coverage: inside as f64 / total.max(1) as f64,
    })
}

/// Wall-clock per-query latency of `target` on single eval images, without
/// the reconstruction cache.
pub fn measure_latency(
    run: &Run,
    target: TargetDescriptor,
    defense: &DefenseConfig,
    interval: Option<SelectionInterval>,
    queries: usize,
) -> Result<LatencyRow> {
    if queries < 10 {
        bail!("latency needs at least 10 queries, got {queries}");
    }
    let parts = TargetParts {
        model: &run.classifier,
        diffusion: Some(&run.diffusion),
        defense: defense.clone(),
        interval,
        stages: run.cfg.stages.clone(),
    };
    let predictor = attack_target(target, &parts)?;
    let ids = run.split.eval_ids();
    let mut times = Vec::with_capacity(queries);
    for i in 0..queries {
        let image = &run.dataset.get(ids[i % ids.len()])?.image;
        let start = Instant::now();
        predictor.predict(&[image])?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let mean_ms = times.iter().sum::<f64>() / times.len() as f64;
    times.sort_by(f64::total_cmp);
    let p95_ms = times[((times.len() as f64 * 0.95).ceil() as usize).clamp(1, times.len()) - 1];
    Ok(LatencyRow { target: target.id().to_string(), n: defense.n, t: defense.t, queries, mean_ms, p95_ms })
}

/// Pairs `(N, T)` whose best-attack AUC rises with `T` at fixed `N`, with
/// the size of the rise.
pub fn t_inversions(cells: &[SweepCell]) -> Vec<(usize, usize, usize, f64)> {
    let mut out = Vec::new();
    for a in cells {
        for b in cells {
            if a.n == b.n && a.t < b.t && b.best_auc > a.best_auc {
                out.push((a.n, a.t, b.t, b.best_auc - a.best_auc));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scan_candidates_span_the_js_ranks() {
        let ev: Vec<(SelectionInterval, f64)> = (0..10)
            .map(|i| (SelectionInterval::new(i as f64, i as f64 + 1.0).unwrap(), (9 - i) as f64))
            .collect();
        let picked = scan_candidates(&ev, 4);
        assert_eq!(picked.len(), 4);
        assert_eq!(picked[0].lo, 9.0);
        assert_eq!(picked[3].lo, 0.0);
        assert_eq!(scan_candidates(&ev, 50).len(), 10);
        assert!(scan_candidates(&[], 3).is_empty());
    }

    #[test]
    fn inversions_only_count_rises_in_t() {
        let cell = |n, t, auc| SweepCell { n, t, best_auc: auc, best_accuracy: 0.5, auc_by_attack: Vec::new() };
        let cells = [cell(10, 10, 0.6), cell(10, 40, 0.58), cell(50, 10, 0.59), cell(50, 40, 0.595)];
        let inv = t_inversions(&cells);
        assert_eq!(inv.len(), 1);
        assert_eq!((inv[0].0, inv[0].1, inv[0].2), (50, 10, 40));
        assert!((inv[0].3 - 0.005).abs() < 1e-12);
    }
}
