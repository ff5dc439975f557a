use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use diffguard::attacks::{LiraVariant, TargetDescriptor};
use diffguard::defense::{Scenario, SelectionInterval};
use diffguard_harness::ablation;
use diffguard_harness::config::{AttackKind, ExperimentConfig};
use diffguard_harness::experiment::{load_or_train_classifier, load_or_train_diffusion, prepare_data, Run};
use diffguard_harness::plots;
use diffguard_harness::report::{run_experiment, Report};

#[derive(Parser)]
#[command(name = "diffguard", about = "Diffusion-based membership inference defense: experiments and tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the built-in desk config instead of a file.
    #[arg(long, conflicts_with = "config")]
    desk: bool,
    /// Run only this repetition seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Selection scenario of the deployed defense (1, 2 or 3).
    #[arg(long)]
    scenario: Option<u8>,
    /// Reconstructions per query.
    #[arg(short = 'N', long = "n")]
    n: Option<usize>,
    /// Diffusion steps of the reconstruction.
    #[arg(short = 'T', long = "t")]
    t: Option<usize>,
    /// Average all reconstructions instead of selecting one.
    #[arg(long)]
    aggregation: bool,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match (&self.config, self.desk) {
            (Some(path), _) => ExperimentConfig::load(path)?,
            (None, true) => ExperimentConfig::desk(),
            (None, false) => bail!("pass --config <file> or --desk"),
        };
        if let Some(s) = self.seed {
            cfg.seeds = vec![s];
        }
        if let Some(dir) = &self.output_dir {
            cfg.output_dir = dir.clone();
        }
        if let Some(s) = self.scenario {
            cfg.defense.scenario = Scenario::try_from(s).map_err(anyhow::Error::msg)?;
        }
        if let Some(n) = self.n {
            cfg.defense.n = n;
        }
        if let Some(t) = self.t {
            cfg.defense.t = t;
        }
        cfg.defense.aggregation |= self.aggregation;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Print the desk config as TOML.
    Init,
    /// Load the dataset and write the member/non-member split.
    Data(Common),
    TrainClassifier(Common),
    TrainDiffusion(Common),
    /// Fit the selection interval of the deployed scenario.
    FitInterval(Common),
    /// Defend the first eval samples and write their predictions.
    Defend {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        count: usize,
    },
    /// Run one attack against one target.
    Attack {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        attack: String,
        #[arg(long, default_value = "defended")]
        target: String,
    },
    /// Full pipeline: train, calibrate, attack every target, report.
    Evaluate(Common),
    /// Best-attack metrics over an N x T grid.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long = "n-values", value_delimiter = ',')]
        n_values: Vec<usize>,
        #[arg(long = "t-values", value_delimiter = ',')]
        t_values: Vec<usize>,
    },
    /// JS divergence and attack metrics over candidate intervals.
    ScanIntervals {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Generations needed by the keep-generating alternative.
    KeepGenerating {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        max_iters: Option<usize>,
    },
    /// Per-query latency of the undefended and defended targets.
    Latency {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        queries: usize,
        #[arg(long = "n-values", value_delimiter = ',')]
        n_values: Vec<usize>,
    },
    /// Print a finished run's report.
    Report {
        /// Run directory holding metrics/report.json.
        dir: PathBuf,
    },
}

fn json_out(dir: &std::path::Path, name: &str, value: &impl serde::Serialize) -> Result<PathBuf> {
    let metrics = dir.join("metrics");
    fs::create_dir_all(&metrics)?;
    let path = metrics.join(name);
    fs::write(&path, serde_json::to_string_pretty(value)?)?;
    Ok(path)
}

fn parse_attack(s: &str) -> Result<AttackKind> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).with_context(|| format!("unknown attack '{s}'"))
}

fn each_seed(cfg: &ExperimentConfig, mut f: impl FnMut(Run) -> Result<()>) -> Result<()> {
    for &s in &cfg.seeds {
        f(Run::new(cfg, s)?)?;
    }
    Ok(())
}

fn deployed_interval(run: &Run) -> Result<Option<SelectionInterval>> {
    run.calibrate(&run.defense)?.interval()
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Init => print!("{}", ExperimentConfig::desk().to_toml()?),
        Command::Data(c) => {
            let cfg = c.load()?;
            for &s in &cfg.seeds {
                let (ds, split) = prepare_data(&cfg, s)?;
                let dir = cfg.output_dir.join("splits");
                fs::create_dir_all(&dir)?;
                fs::write(dir.join(format!("seed{s}.json")), split.to_json()?)?;
                println!(
                    "seed {s}: {} ({} samples, {} classes, {:?}), split {}",
                    ds.name(),
                    ds.len(),
                    ds.num_classes(),
                    ds.shape(),
                    split.hash()
                );
            }
        }
        Command::TrainClassifier(c) => {
            let cfg = c.load()?;
            for &s in &cfg.seeds {
                let (ds, split) = prepare_data(&cfg, s)?;
                let model = load_or_train_classifier(&cfg, s, &ds, &split)?;
                let train = diffguard::classifier::evaluate_accuracy(&model, &split.member_ids, &ds)?;
                let test = diffguard::classifier::evaluate_accuracy(&model, &split.eval_nonmember_ids, &ds)?;
                println!("seed {s}: train accuracy {train:.4}, test accuracy {test:.4}");
            }
        }
        Command::TrainDiffusion(c) => {
            let cfg = c.load()?;
            for &s in &cfg.seeds {
                let (ds, split) = prepare_data(&cfg, s)?;
                let model = load_or_train_diffusion(&cfg, s, &ds, &split)?;
                if let Some(m) = model.manifest() {
                    let curve = &m.loss_curve;
                    if let (Some(first), Some(last)) = (curve.first(), curve.last()) {
                        println!("seed {s}: loss {first:.4} -> {last:.4} over {} steps", curve.len());
                    }
                }
            }
        }
        Command::FitInterval(c) => {
            let cfg = c.load()?;
            each_seed(&cfg, |run| {
                match run.calibrate(&run.defense)?.fitted {
                    Some(f) => {
                        let path = json_out(&cfg.output_dir, &format!("interval_seed{}.json", run.seed), &f)?;
                        println!("seed {}: [{:.4}, {:.4}] js {:?} -> {}", run.seed, f.lo, f.hi, f.js_value, path.display());
                    }
                    None => println!("seed {}: the deployed defense selects without an interval", run.seed),
                }
                Ok(())
            })?;
        }
        Command::Defend { common, count } => {
            let cfg = common.load()?;
            each_seed(&cfg, |run| {
                let iv = deployed_interval(&run)?;
                let ids: Vec<usize> = run.split.eval_ids().into_iter().take(count).collect();
                let und = run.respond(TargetDescriptor::Undefended, &run.defense, None, &ids, None)?;
                let def = run.respond(TargetDescriptor::Defended, &run.defense, iv.as_ref(), &ids, None)?;
                let dir = cfg.output_dir.join("tables");
                fs::create_dir_all(&dir)?;
                let path = dir.join(format!("defended_seed{}.csv", run.seed));
                let mut w = csv::Writer::from_path(&path)?;
                w.write_record(["sample_id", "label", "undefended_label", "defended_label", "undefended_logit", "defended_logit"])?;
                let labels = run.dataset.labels(&ids)?;
                for i in 0..ids.len() {
                    w.write_record([
                        ids[i].to_string(),
                        labels[i].to_string(),
                        und[i].predicted_label().to_string(),
                        def[i].predicted_label().to_string(),
                        diffguard::defense::logit_score(&und[i]).to_string(),
                        diffguard::defense::logit_score(&def[i]).to_string(),
                    ])?;
                }
                w.flush()?;
                println!("seed {}: {} predictions -> {}", run.seed, ids.len(), path.display());
                Ok(())
            })?;
        }
        Command::Attack { common, attack, target } => {
            let cfg = common.load()?;
            let kind = parse_attack(&attack)?;
            let target: TargetDescriptor = target.parse()?;
            each_seed(&cfg, |run| {
                let iv = deployed_interval(&run)?;
                let (known, eval) = run.observe_pair(target, &run.defense, iv.as_ref())?;
                let (scores, acc) = match kind {
                    AttackKind::LiraOnline | AttackKind::LiraOffline => {
                        let variant = if kind == AttackKind::LiraOnline { LiraVariant::Online } else { LiraVariant::Offline };
                        run.lira(&run.shadows()?, variant, target, &run.defense, iv.as_ref(), &known, &eval)?
                    }
                    _ => run.attack(kind, target.id(), &known, &eval)?,
                };
                let bundle = scores.metrics(Some(acc))?;
                json_out(&cfg.output_dir, &format!("attack_seed{}_{}_{}.json", run.seed, target.id(), kind.id()), &bundle)?;
                println!(
                    "seed {}: {} vs {}: AUC {:.4} accuracy {:.4} TPR@0.1%FPR {:.4}",
                    run.seed, kind.id(), target.id(), bundle.auc, bundle.attack_accuracy, bundle.tpr_at_fpr001
                );
                Ok(())
            })?;
        }
        Command::Evaluate(c) => {
            let report = run_experiment(&c.load()?)?;
            print!("{}", report.render());
        }
        Command::Sweep { common, n_values, t_values } => {
            let cfg = common.load()?;
            let n_values = if n_values.is_empty() { cfg.sweep.n.clone() } else { n_values };
            let t_values = if t_values.is_empty() { cfg.sweep.t.clone() } else { t_values };
            each_seed(&cfg, |run| {
                let cells = ablation::sweep_nt(&run, &n_values, &t_values)?;
                json_out(&cfg.output_dir, &format!("sweep_seed{}.json", run.seed), &cells)?;
                let dir = cfg.output_dir.join("plots");
                fs::create_dir_all(&dir)?;
                plots::nt_heatmap(&dir, &format!("seed{}_sweep", run.seed), &cells)?;
                for c in &cells {
                    println!("seed {} N={:<4} T={:<4} best AUC {:.4} accuracy {:.4}", run.seed, c.n, c.t, c.best_auc, c.best_accuracy);
                }
                Ok(())
            })?;
        }
        Command::ScanIntervals { common, count } => {
            let mut cfg = common.load()?;
            cfg.defense.scenario = Scenario::One;
            cfg.defense.aggregation = false;
            let count = count.unwrap_or(cfg.scan_intervals);
            each_seed(&cfg, |run| {
                let cal = run.calibrate(&run.defense)?;
                let rows = ablation::interval_js_scan(&run, &ablation::scan_candidates(&cal.evaluated, count))?;
                json_out(&cfg.output_dir, &format!("scan_seed{}.json", run.seed), &rows)?;
                let dir = cfg.output_dir.join("plots");
                fs::create_dir_all(&dir)?;
                plots::js_scatter(&dir, &format!("seed{}_js_scan", run.seed), &rows)?;
                for r in &rows {
                    println!(
                        "seed {} [{:.4}, {:.4}] calibration JS {:.4} eval JS {:.4} best AUC {:.4}",
                        run.seed, r.lo, r.hi, r.calibration_js, r.eval_js, r.best_auc
                    );
                }
                match ablation::scan_correlation(&rows) {
                    Some(rho) => println!("seed {}: Spearman(JS, AUC) = {rho:.3}", run.seed),
                    None => println!("seed {}: Spearman undefined (constant column)", run.seed),
                }
                Ok(())
            })?;
        }
        Command::KeepGenerating { common, max_iters } => {
            let mut cfg = common.load()?;
            cfg.defense.scenario = Scenario::One;
            cfg.defense.aggregation = false;
            if let Some(m) = max_iters {
                cfg.keep_generating_iters = m;
            }
            each_seed(&cfg, |run| {
                let iv = deployed_interval(&run)?.context("Scenario 1 always fits an interval")?;
                let kg = ablation::keep_generating_cdf(&run, &iv, cfg.keep_generating_iters)?;
                json_out(&cfg.output_dir, &format!("keep_generating_seed{}.json", run.seed), &kg)?;
                let dir = cfg.output_dir.join("plots");
                fs::create_dir_all(&dir)?;
                plots::keep_generating_cdf(&dir, &format!("seed{}_keep_generating", run.seed), &kg)?;
                println!(
                    "seed {}: {} of {} samples miss at first; {:.1}% of those hit within {} generations",
                    run.seed,
                    kg.initially_missing,
                    kg.samples,
                    100.0 * kg.late_hit_rate(),
                    kg.max_iters
                );
                Ok(())
            })?;
        }
        Command::Latency { common, queries, n_values } => {
            let cfg = common.load()?;
            let n_values = if n_values.is_empty() { vec![cfg.defense.n] } else { n_values };
            let seed = cfg.seeds[0];
            let run = Run::new(&cfg, seed)?;
            let iv = deployed_interval(&run)?;
            let mut rows = vec![ablation::measure_latency(&run, TargetDescriptor::Undefended, &run.defense, None, queries)?];
            for n in n_values {
                let d = run.defense_with(n, run.defense.t);
                rows.push(ablation::measure_latency(&run, TargetDescriptor::Defended, &d, iv, queries)?);
            }
            json_out(&cfg.output_dir, "latency.json", &rows)?;
            for r in &rows {
                println!("{:<12} N={:<4} T={:<4} mean {:.2} ms p95 {:.2} ms", r.target, r.n, r.t, r.mean_ms, r.p95_ms);
            }
        }
        Command::Report { dir } => {
            let path = dir.join("metrics").join("report.json");
            let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            let mut report: Report = serde_json::from_str(&text)?;
            let latency = dir.join("metrics").join("latency.json");
            if latency.exists() {
                report.latency = serde_json::from_str(&fs::read_to_string(latency)?)?;
            }
            print!("{}", report.render());
        }
    }
    Ok(())
}
