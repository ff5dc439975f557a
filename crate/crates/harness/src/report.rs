//! Run-level report: per-seed results, mean/σ summaries and the files the
//! run directory holds.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use diffguard::attacks::TargetDescriptor;
use diffguard::metrics::roc_curve;

use crate::ablation::{self, LatencyRow};
use crate::config::ExperimentConfig;
use crate::experiment::{Run, SeedReport};
use crate::plots;

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub attack_id: String,
    pub target_id: String,
    pub auc: Stat,
    pub attack_accuracy: Stat,
    pub tpr_at_fpr001: Stat,
    pub tnr_at_fnr001: Stat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub seeds: Vec<SeedReport>,
    /// One row per (attack, target), over seeds.
    pub summary: Vec<SummaryRow>,
    /// Highest AUC and accuracy over all attacks, per target.
    pub best: Vec<SummaryRow>,
    #[serde(default)]
    pub latency: Vec<LatencyRow>,
    #[serde(default)]
    pub plots: Vec<PathBuf>,
}

impl Report {
    pub fn from_seeds(seeds: Vec<SeedReport>) -> Self {
        let mut summary = Vec::new();
        let mut best = Vec::new();
        let Some(first) = seeds.first() else {
            return Self { seeds, summary, best, latency: Vec::new(), plots: Vec::new() };
        };
        let mut targets: Vec<String> = Vec::new();
        for b in &first.metrics {
            if !targets.contains(&b.target_id) {
                targets.push(b.target_id.clone());
            }
            let rows: Vec<_> = seeds
                .iter()
                .filter_map(|s| s.metrics.iter().find(|m| m.attack_id == b.attack_id && m.target_id == b.target_id))
                .collect();
            summary.push(SummaryRow {
                attack_id: b.attack_id.clone(),
                target_id: b.target_id.clone(),
                auc: Stat::of(&rows.iter().map(|m| m.auc).collect::<Vec<_>>()),
                attack_accuracy: Stat::of(&rows.iter().map(|m| m.attack_accuracy).collect::<Vec<_>>()),
                tpr_at_fpr001: Stat::of(&rows.iter().map(|m| m.tpr_at_fpr001).collect::<Vec<_>>()),
                tnr_at_fnr001: Stat::of(&rows.iter().map(|m| m.tnr_at_fnr001).collect::<Vec<_>>()),
            });
        }
        for t in targets {
            let per_seed = |f: &dyn Fn(&diffguard::metrics::MetricBundle) -> f64| -> Vec<f64> {
                seeds
                    .iter()
                    .map(|s| s.metrics.iter().filter(|m| m.target_id == t).map(f).fold(f64::NEG_INFINITY, f64::max))
                    .collect()
            };
            best.push(SummaryRow {
                attack_id: "max".to_string(),
                target_id: t.clone(),
                auc: Stat::of(&per_seed(&|m| m.auc)),
                attack_accuracy: Stat::of(&per_seed(&|m| m.attack_accuracy)),
                tpr_at_fpr001: Stat::of(&per_seed(&|m| m.tpr_at_fpr001)),
                tnr_at_fnr001: Stat::of(&per_seed(&|m| m.tnr_at_fnr001)),
            });
        }
        Self { seeds, summary, best, latency: Vec::new(), plots: Vec::new() }
    }

    /// The metric part of the report, without wall-clock measurements or
    /// file locations.
    pub fn metrics_json(&self) -> Result<String> {
        let stripped = Report { latency: Vec::new(), plots: Vec::new(), ..self.clone() };
        Ok(serde_json::to_string_pretty(&stripped)?)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let metrics = dir.join("metrics");
        let tables = dir.join("tables");
        fs::create_dir_all(&metrics)?;
        fs::create_dir_all(&tables)?;
        fs::write(metrics.join("report.json"), self.metrics_json()?)?;
        if !self.latency.is_empty() {
            fs::write(metrics.join("latency.json"), serde_json::to_string_pretty(&self.latency)?)?;
        }
        let mut w = csv::Writer::from_path(tables.join("summary.csv"))?;
        w.write_record(["attack", "target", "auc_mean", "auc_std", "accuracy_mean", "accuracy_std", "tpr_at_fpr001", "tnr_at_fnr001"])?;
        for r in self.summary.iter().chain(&self.best) {
            w.write_record([
                r.attack_id.clone(),
                r.target_id.clone(),
                format!("{:.6}", r.auc.mean),
                format!("{:.6}", r.auc.std),
                format!("{:.6}", r.attack_accuracy.mean),
                format!("{:.6}", r.attack_accuracy.std),
                format!("{:.6}", r.tpr_at_fpr001.mean),
                format!("{:.6}", r.tnr_at_fnr001.mean),
            ])?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(tables.join("utility.csv"))?;
        w.write_record(["seed", "mode", "undefended_accuracy", "defended_accuracy", "delta", "mismatches", "n"])?;
        for s in &self.seeds {
            for u in &s.utility {
                w.write_record([
                    s.seed.to_string(),
                    u.mode.clone(),
                    u.undefended_accuracy.to_string(),
                    u.defended_accuracy.to_string(),
                    u.accuracy_delta.to_string(),
                    u.mismatches.to_string(),
                    u.n.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Plain-text table for the terminal.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for s in &self.seeds {
            out += &format!(
                "seed {}: train {:.3} test {:.3} gap attack {:.3}",
                s.seed, s.train_accuracy, s.test_accuracy, s.gap_attack_accuracy
            );
            if let Some(iv) = &s.interval {
                out += &format!(" interval [{:.4}, {:.4}]", iv.lo, iv.hi);
            }
            out += "\n";
            for u in &s.utility {
                out += &format!(
                    "  {:<12} accuracy {:.4} -> {:.4} ({} mismatched)\n",
                    u.mode, u.undefended_accuracy, u.defended_accuracy, u.mismatches
                );
            }
            for j in &s.js {
                out += &format!("  {:<12} JS {:.4} -> {:.4}\n", j.mode, j.undefended_js, j.defended_js);
            }
        }
        out += &format!("{:<14}{:<12}{:>16}{:>16}{:>10}{:>10}\n", "attack", "target", "AUC", "accuracy", "TPR@.1%", "TNR@.1%");
        for r in self.summary.iter().chain(&self.best) {
            out += &format!(
                "{:<14}{:<12}{:>9.4}±{:.4}{:>9.4}±{:.4}{:>10.4}{:>10.4}\n",
                r.attack_id,
                r.target_id,
                r.auc.mean,
                r.auc.std,
                r.attack_accuracy.mean,
                r.attack_accuracy.std,
                r.tpr_at_fpr001.mean,
                r.tnr_at_fnr001.mean
            );
        }
        for l in &self.latency {
            out += &format!("latency {:<12} N={:<3} T={:<3} mean {:.2} ms p95 {:.2} ms\n", l.target, l.n, l.t, l.mean_ms, l.p95_ms);
        }
        out
    }
}

/// Per-seed figures: logit histograms before and after the defense and
/// log-log ROC curves of every attack against every target.
pub fn seed_plots(run: &Run, report: &SeedReport) -> Result<Vec<PathBuf>> {
    let dir = run.run_dir().join("plots");
    fs::create_dir_all(&dir)?;
    let mut out = Vec::new();
    let iv = report.interval.as_ref().map(|f| f.interval()).transpose()?;
    let s = &run.split;
    for target in [TargetDescriptor::Undefended, TargetDescriptor::Defended] {
        let o = run.observe(target, &run.defense, iv.as_ref(), &s.eval_member_ids, &s.eval_nonmember_ids)?;
        let logits = o.logits();
        let (m, n): (Vec<f64>, Vec<f64>) = {
            let split = o.members.iter().filter(|&&m| m).count();
            (logits[..split].to_vec(), logits[split..].to_vec())
        };
        out.push(plots::logit_histograms(&dir, &format!("seed{}_logits_{}", run.seed, target.id()), &m, &n, 30)?);
    }
    let tables = run.run_dir().join("tables");
    for target in &run.cfg.targets {
        let mut curves = Vec::new();
        for a in &run.cfg.attacks {
            let path = tables.join(format!("scores_seed{}_{}_{}.csv", run.seed, target.id(), a.id()));
            let scores = diffguard::attacks::AttackScores::read_csv(&path)
                .with_context(|| format!("reading {}", path.display()))?;
            curves.push((a.id().to_string(), roc_curve(&scores.scores, &scores.is_member)?));
        }
        let negatives = s.eval_nonmember_ids.len();
        out.push(plots::roc_loglog(&dir, &format!("seed{}_roc_{}", run.seed, target.id()), &curves, negatives)?);
    }
    Ok(out)
}

/// Builds, evaluates and reports every repetition seed.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Report> {
    let mut seeds = Vec::new();
    let mut plot_files = Vec::new();
    let mut latency = Vec::new();
    fs::create_dir_all(&cfg.output_dir)?;
    fs::write(cfg.output_dir.join("config.toml"), cfg.to_toml()?)?;
    for &s in &cfg.seeds {
        log::info!("repetition seed {s}");
        let run = Run::new(cfg, s)?;
        let rep = run.evaluate()?;
        plot_files.extend(seed_plots(&run, &rep).context("stage plots")?);
        if cfg.latency_queries > 0 && latency.is_empty() {
            let iv = rep.interval.as_ref().map(|f| f.interval()).transpose()?;
            for target in [TargetDescriptor::Undefended, TargetDescriptor::Defended] {
                latency.push(ablation::measure_latency(&run, target, &run.defense, iv, cfg.latency_queries)?);
            }
        }
        seeds.push(rep);
    }
    let mut report = Report::from_seeds(seeds);
    report.latency = latency;
    report.plots = plot_files;
    report.write(&cfg.output_dir)?;
    write_manifest(cfg)?;
    Ok(report)
}

/// Records the config and crate version of a run directory.
pub fn write_manifest(cfg: &ExperimentConfig) -> Result<()> {
    let manifest = serde_json::json!({
        "version": env!("CARGO_PKG_VERSION"),
        "config": cfg,
    });
    fs::write(cfg.output_dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use diffguard::metrics::MetricBundle;

    fn bundle(attack: &str, target: &str, auc: f64) -> MetricBundle {
        MetricBundle {
            attack_id: attack.into(),
            target_id: target.into(),
            auc,
            attack_accuracy: 0.5,
            tpr_at_fpr001: 0.0,
            tnr_at_fnr001: 0.0,
            n_members: 10,
            n_nonmembers: 10,
        }
    }

    fn seed(s: u64, aucs: [f64; 2]) -> SeedReport {
        SeedReport {
            seed: s,
            split_hash: String::new(),
            train_accuracy: 1.0,
            test_accuracy: 0.8,
            gap_attack_accuracy: 0.6,
            interval: None,
            utility: Vec::new(),
            js: Vec::new(),
            metrics: vec![bundle("loss", "undefended", aucs[0]), bundle("entropy", "undefended", aucs[1])],
        }
    }

    #[test]
    fn summary_has_mean_and_sigma_per_pair() {
        let r = Report::from_seeds(vec![seed(0, [0.6, 0.7]), seed(1, [0.8, 0.5]), seed(2, [0.7, 0.6])]);
        assert_eq!(r.summary.len(), 2);
        assert!((r.summary[0].auc.mean - 0.7).abs() < 1e-12);
        assert!((r.summary[0].auc.std - (0.02f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(r.best.len(), 1);
        assert!((r.best[0].auc.mean - (0.7 + 0.8 + 0.7) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn stat_of_constant_has_zero_sigma() {
        let s = Stat::of(&[0.3, 0.3, 0.3]);
        assert_eq!(s.std, 0.0);
        assert!((s.mean - 0.3).abs() < 1e-15);
    }
}
