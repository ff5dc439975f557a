//! Independent re-computations of library results: pairwise AUC, brute-force
//! interval search, the modified-entropy formula, Gaussian moments, direct
//! alpha-bar products and a Monte-Carlo check of closed-form noising.

use diffguard::attacks::{fit_gaussian, metric_score, MetricKind};
use diffguard::classifier::PredictionVector;
use diffguard::defense::{
    fit_interval_scenario1, CalibrationSample, Fallback, GridConfig, SelectionInterval,
};
use diffguard::diffusion::{build_schedule, forward_noise, NoiseSchedule};
use diffguard::metrics::{roc_auc, JS_SMOOTHING};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

// The checks are plain functions so the acceptance run can call them too.
macro_rules! tests {
    ($($check:ident),* $(,)?) => {
        mod run {
            $(#[test]
            fn $check() {
                super::$check()
            })*
        }
    };
}

tests!(
    auc_matches_pairwise_counting,
    scenario1_matches_exhaustive_enumeration,
    mentropy_matches_formula,
    gaussian_fit_matches_moments,
    alpha_bar_is_the_running_product,
    stepwise_noising_matches_closed_form,
    interval_contains_is_closed,
);

fn pairwise_auc(scores: &[f64], members: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        if !members[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if members[j] {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

pub fn auc_matches_pairwise_counting() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..100 {
        let n = rng.random_range(4..120);
        // coarse scores on some cases to exercise ties
        let levels = if case % 3 == 0 { 5 } else { 1_000_000 };
        let scores: Vec<f64> = (0..n)
            .map(|_| rng.random_range(0..levels) as f64 / levels as f64)
            .collect();
        let mut members: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        members[0] = true;
        members[1] = false;
        let lib = roc_auc(&scores, &members).unwrap();
        assert!(
            (lib - pairwise_auc(&scores, &members)).abs() < 1e-9,
            "case {case}"
        );
    }
}

/// Expected selection of one calibration sample, written from the rule:
/// uniform over label-preserving logits inside the interval, else the
/// label-preserving logits nearest to it, else the original logit.
fn expected_selection(s: &CalibrationSample, lo: f64, hi: f64) -> Vec<(f64, f64)> {
    let kept: Vec<f64> = s
        .logits
        .iter()
        .zip(&s.candidate)
        .filter(|(_, c)| **c)
        .map(|(l, _)| *l)
        .collect();
    if kept.is_empty() {
        return vec![(s.original_logit, 1.0)];
    }
    let inside: Vec<f64> = kept
        .iter()
        .copied()
        .filter(|l| *l >= lo && *l <= hi)
        .collect();
    if !inside.is_empty() {
        let w = 1.0 / inside.len() as f64;
        return inside.into_iter().map(|l| (l, w)).collect();
    }
    let gap = |l: f64| if l < lo { lo - l } else { l - hi };
    let best = kept.iter().map(|&l| gap(l)).fold(f64::MAX, f64::min);
    let near: Vec<f64> = kept.into_iter().filter(|&l| gap(l) == best).collect();
    let w = 1.0 / near.len() as f64;
    near.into_iter().map(|l| (l, w)).collect()
}

fn oracle_js(
    members: &[CalibrationSample],
    nonmembers: &[CalibrationSample],
    lo: f64,
    hi: f64,
    bins: usize,
) -> f64 {
    let mut all = Vec::new();
    for s in members.iter().chain(nonmembers) {
        all.extend_from_slice(&s.logits);
        all.push(s.original_logit);
    }
    let min = all.iter().copied().fold(f64::MAX, f64::min);
    let max = all.iter().copied().fold(f64::MIN, f64::max);
    let width = (max - min) / bins as f64;
    let hist = |pool: &[CalibrationSample]| {
        let mut h = vec![0.0; bins];
        for s in pool {
            for (l, w) in expected_selection(s, lo, hi) {
                let b = (((l - min) / width) as usize).min(bins - 1);
                h[b] += w;
            }
        }
        let z: f64 = h.iter().sum();
        let p: Vec<f64> = h.iter().map(|m| m / z).collect();
        let zs: f64 = p.iter().map(|m| m + JS_SMOOTHING).sum();
        p.iter()
            .map(|m| (m + JS_SMOOTHING) / zs)
            .collect::<Vec<f64>>()
    };
    let (p, q) = (hist(members), hist(nonmembers));
    let kl = |a: &[f64], m: &[f64]| {
        a.iter()
            .zip(m)
            .map(|(x, y)| x * (x / y).log2())
            .sum::<f64>()
    };
    let m: Vec<f64> = p.iter().zip(&q).map(|(a, b)| (a + b) / 2.0).collect();
    0.5 * kl(&p, &m) + 0.5 * kl(&q, &m)
}

fn random_pool(rng: &mut ChaCha8Rng, shift: f64) -> Vec<CalibrationSample> {
    (0..rng.random_range(3..8))
        .map(|_| {
            let n = rng.random_range(2..7);
            CalibrationSample {
                logits: (0..n)
                    .map(|_| shift + rng.random_range(-3.0..3.0))
                    .collect(),
                candidate: (0..n).map(|_| rng.random_bool(0.8)).collect(),
                original_logit: shift + rng.random_range(-3.0..3.0),
            }
        })
        .collect()
}

pub fn scenario1_matches_exhaustive_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let grid = GridConfig {
        num_endpoints: 5,
        num_bins: 12,
    };
    for pool in 0..20 {
        let members = random_pool(&mut rng, 1.0);
        let nonmembers = random_pool(&mut rng, 0.0);
        let fit = fit_interval_scenario1(&members, &nonmembers, grid, Fallback::Original).unwrap();

        let a = members
            .iter()
            .flat_map(|s| s.logits.iter().copied())
            .fold(f64::MAX, f64::min);
        let b = nonmembers
            .iter()
            .flat_map(|s| s.logits.iter().copied())
            .fold(f64::MIN, f64::max);
        assert!(a < b, "pool {pool} should overlap");
        let points: Vec<f64> = (0..5).map(|i| a + (b - a) * i as f64 / 4.0).collect();
        let mut best = f64::MAX;
        for i in 0..5 {
            for j in i + 1..5 {
                best = best.min(oracle_js(
                    &members,
                    &nonmembers,
                    points[i],
                    points[j],
                    grid.num_bins,
                ));
            }
        }
        let at_fit = oracle_js(
            &members,
            &nonmembers,
            fit.interval.lo,
            fit.interval.hi,
            grid.num_bins,
        );
        assert!(
            (at_fit - best).abs() < 1e-9,
            "pool {pool}: fitted {at_fit} vs oracle minimum {best}"
        );
        assert!(
            (fit.js - best).abs() < 1e-9,
            "pool {pool}: reported {} vs oracle {best}",
            fit.js
        );
        assert!(points.iter().any(|p| (p - fit.interval.lo).abs() < 1e-12));
        assert!(points.iter().any(|p| (p - fit.interval.hi).abs() < 1e-12));
    }
}

pub fn mentropy_matches_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let k = rng.random_range(2..12);
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
        let z: f64 = raw.iter().sum();
        let p = PredictionVector::from_probs(raw.iter().map(|v| v / z).collect()).unwrap();
        let y = rng.random_range(0..k);
        let probs = p.probs();
        let mut ment = -(1.0 - probs[y]) * probs[y].ln();
        for (i, &q) in probs.iter().enumerate() {
            if i != y {
                ment -= q * (1.0 - q).ln();
            }
        }
        let lib = metric_score(&p, y, MetricKind::Mentropy).unwrap();
        assert!((lib - (-ment)).abs() < 1e-10, "{lib} vs {}", -ment);
    }
}

pub fn gaussian_fit_matches_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let n = rng.random_range(2..64);
        let xs: Vec<f64> = (0..n).map(|_| rng.random_range(-20.0..20.0)).collect();
        // Welford running moments
        let (mut mean, mut m2) = (0.0, 0.0);
        for (i, &x) in xs.iter().enumerate() {
            let d = x - mean;
            mean += d / (i + 1) as f64;
            m2 += d * (x - mean);
        }
        let std = (m2 / n as f64).sqrt();
        let fit = fit_gaussian(&xs).unwrap();
        assert!((fit.mean - mean).abs() < 1e-10);
        assert!((fit.std - std.max(diffguard::attacks::SIGMA_FLOOR)).abs() < 1e-10);
    }
}

pub fn alpha_bar_is_the_running_product() {
    for (t_max, b0, b1) in [(1000, 1e-4, 0.02), (50, 1e-3, 0.05), (7, 0.01, 0.01)] {
        let s = build_schedule(t_max, b0, b1).unwrap();
        for t in 1..=t_max {
            let direct: f64 = (1..=t).map(|u| 1.0 - s.beta(u).unwrap()).product();
            assert!((s.alpha_bar(t).unwrap() - direct).abs() < 1e-12, "t = {t}");
        }
    }
}

/// Noising one step at a time with fresh noise must give the same
/// per-pixel marginal as the closed form.
pub fn stepwise_noising_matches_closed_form() {
    const TRIALS: usize = 10_000;
    let schedule = NoiseSchedule::default();
    let x0 = [-0.8f32, -0.1, 0.35, 0.9];
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for t in [5usize, 40] {
        let mut step = vec![Vec::with_capacity(TRIALS); x0.len()];
        let mut closed = vec![Vec::with_capacity(TRIALS); x0.len()];
        for _ in 0..TRIALS {
            let mut x: Vec<f64> = x0.iter().map(|&v| v as f64).collect();
            for u in 1..=t {
                let b = schedule.beta(u).unwrap();
                for v in &mut x {
                    let e: f64 = rng.sample(StandardNormal);
                    *v = (1.0 - b).sqrt() * *v + b.sqrt() * e;
                }
            }
            let eps: Vec<f32> = (0..x0.len())
                .map(|_| rng.sample::<f32, _>(StandardNormal))
                .collect();
            let xt = forward_noise(&x0, t, &eps, &schedule).unwrap();
            for p in 0..x0.len() {
                step[p].push(x[p]);
                closed[p].push(xt[p] as f64);
            }
        }
        for p in 0..x0.len() {
            let stats = |v: &[f64]| {
                let n = v.len() as f64;
                let m = v.iter().sum::<f64>() / n;
                let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
                let m4 = v.iter().map(|x| (x - m).powi(4)).sum::<f64>() / n;
                (m, var, (var / n).sqrt(), ((m4 - var * var) / n).sqrt())
            };
            let (ma, va, sema, seva) = stats(&step[p]);
            let (mb, vb, semb, sevb) = stats(&closed[p]);
            let se_mean = (sema * sema + semb * semb).sqrt();
            let se_var = (seva * seva + sevb * sevb).sqrt();
            assert!(
                (ma - mb).abs() < 3.0 * se_mean,
                "t={t} pixel {p}: means {ma} vs {mb} (se {se_mean})"
            );
            assert!(
                (va - vb).abs() < 3.0 * se_var,
                "t={t} pixel {p}: variances {va} vs {vb} (se {se_var})"
            );
            let expected_var = 1.0 - schedule.alpha_bar(t).unwrap();
            assert!((vb - expected_var).abs() < 4.0 * sevb);
        }
    }
}

pub fn interval_contains_is_closed() {
    let iv = SelectionInterval::new(-1.0, 2.0).unwrap();
    assert!(iv.contains(-1.0) && iv.contains(2.0) && !iv.contains(2.0 + 1e-12));
}
