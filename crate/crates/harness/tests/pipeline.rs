use diffguard::attacks::TargetDescriptor;
use diffguard::classifier::ClassifierConfig;
use diffguard::data::{SplitCounts, SynthConfig};
use diffguard::defense::{keep_generating_select, DefenseConfig, Scenario, SelectionInterval, StageSpec};
use diffguard::diffusion::{DiffusionConfig, UNetConfig};
use diffguard_harness::ablation::keep_generating_cdf;
use diffguard_harness::config::LiraConfig;
use diffguard_harness::{run_experiment, AttackKind, DatasetSpec, ExperimentConfig, Run};

fn tiny(dir: &std::path::Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk();
    cfg.dataset = DatasetSpec::Synthetic(SynthConfig::new(4, 40, 8, 3));
    cfg.splits = SplitCounts::new(80, 10, 10, 20);
    cfg.classifier = ClassifierConfig { channels: vec![4, 4, 8, 8], epochs: 3, batch_size: 32, ..Default::default() };
    cfg.diffusion = DiffusionConfig {
        unet: UNetConfig { width: 8, mults: vec![1], time_features: 8 },
        steps: 20,
        batch_size: 16,
        ..Default::default()
    };
    cfg.defense = DefenseConfig { n: 4, t: 10, k: 5, ..Default::default() };
    cfg.attacks = vec![
        AttackKind::Correctness,
        AttackKind::Loss,
        AttackKind::Mentropy,
        AttackKind::Nn,
        AttackKind::LiraOnline,
        AttackKind::LiraOffline,
    ];
    cfg.lira = LiraConfig { num_models: 8, classifier: None };
    cfg.targets = vec![TargetDescriptor::Undefended, TargetDescriptor::Defended, TargetDescriptor::Cascaded];
    cfg.stages = vec![StageSpec::Reconstruct, StageSpec::Rounding { decimals: 2 }];
    cfg.seeds = vec![0, 1];
    cfg.output_dir = dir.to_path_buf();
    cfg
}

#[test]
fn tiny_experiment_reports_every_pair_and_keeps_utility() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let report = run_experiment(&cfg).unwrap();
    assert_eq!(report.seeds.len(), 2);
    for s in &report.seeds {
        assert_eq!(s.metrics.len(), cfg.attacks.len() * cfg.targets.len());
        for a in &cfg.attacks {
            for t in &cfg.targets {
                let n = s.metrics.iter().filter(|b| b.attack_id == a.id() && b.target_id == t.id()).count();
                assert_eq!(n, 1, "{} against {}", a.id(), t.id());
            }
        }
        for row in s.utility.iter().filter(|u| u.selection) {
            assert_eq!(row.mismatches, 0, "{}", row.mode);
            assert_eq!(row.accuracy_delta, 0.0, "{}", row.mode);
        }
        // label-only attacks cannot see a label-preserving defense
        let corr = |t: &str| s.metrics.iter().find(|b| b.attack_id == "correctness" && b.target_id == t).unwrap().auc;
        assert_eq!(corr("undefended"), corr("defended"));
    }
    for file in ["metrics/report.json", "tables/summary.csv", "tables/utility.csv", "config.toml", "manifest.json"] {
        assert!(dir.path().join(file).exists(), "{file}");
    }
}

#[test]
fn reports_are_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut ca = tiny(a.path());
    ca.attacks = vec![AttackKind::Loss, AttackKind::Entropy];
    ca.seeds = vec![4];
    let cb = ExperimentConfig { output_dir: b.path().to_path_buf(), ..ca.clone() };
    let ra = run_experiment(&ca).unwrap();
    let rb = run_experiment(&cb).unwrap();
    assert_eq!(ra.metrics_json().unwrap(), rb.metrics_json().unwrap());
}

#[test]
fn scenario3_with_metric_attacks_keeps_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.defense.scenario = Scenario::Three;
    cfg.attacks = AttackKind::METRIC.to_vec();
    cfg.targets = vec![TargetDescriptor::Undefended, TargetDescriptor::Defended];
    cfg.seeds = vec![1];
    let run = Run::new(&cfg, 1).unwrap();
    let report = run.evaluate().unwrap();
    assert!(report.interval.is_none());
    let row = report.utility.iter().find(|u| u.mode == "scenario3").unwrap();
    assert_eq!(row.accuracy_delta, 0.0);
    assert_eq!(report.metrics.len(), 10);
}

#[test]
fn keep_generating_statistics_match_the_online_loop() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let run = Run::new(&cfg, 0).unwrap();
    let cal = run.calibrate(&run.defense).unwrap();
    let iv = cal.interval().unwrap().unwrap_or_else(|| SelectionInterval::new(0.0, 1.0).unwrap());
    let iters = 6;
    let summary = keep_generating_cdf(&run, &iv, iters).unwrap();

    let ids = run.split.eval_ids();
    let mut by_iter = vec![0usize; iters];
    for &id in &ids {
        let x = &run.dataset.get(id).unwrap().image;
        let kg = keep_generating_select(
            x,
            &run.classifier,
            &run.diffusion,
            &iv,
            iters,
            run.defense.t,
            run.defense.k,
            run.defense.seed,
        )
        .unwrap();
        if kg.hit {
            for c in &mut by_iter[kg.n_generations - 1..] {
                *c += 1;
            }
        }
    }
    let cdf: Vec<f64> = by_iter.iter().map(|&c| c as f64 / ids.len() as f64).collect();
    assert_eq!(summary.samples, ids.len());
    for (a, b) in cdf.iter().zip(&summary.cdf) {
        assert!((a - b).abs() < 1e-12, "{cdf:?} vs {:?}", summary.cdf);
    }
}
