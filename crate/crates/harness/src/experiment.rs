//! One repetition of an experiment: data, target classifier, diffusion model,
//! defense calibration and attack evaluation against every target.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use diffguard::attacks::{
    balanced_accuracy, calibrate_threshold, gap_attack_accuracy, lira_scores, metric_score, nn_attack, nn_features,
    train_shadow_ensemble, true_class_phi, AttackScores, LiraVariant, NnAttackConfig, ShadowEnsemble, ShadowManifest,
    TargetDescriptor,
};
use diffguard::classifier::{evaluate_accuracy, train_classifier, ClassifierConfig, ClassifierModel, PredictionVector, Predictor};
use diffguard::data::{load_dataset, make_splits, synth_dataset_with, Dataset, SplitSpec};
use diffguard::defense::{
    apply_post, calibration_hash, finish, fit_interval_scenario1, fit_interval_scenario2, logit_score, parse_stages,
    prepare, score_batch, CalibrationSample, DefenseConfig, FittedInterval, PreparedQuery, Scenario, SelectionInterval,
};
use diffguard::diffusion::{train_ddpm, DiffusionConfig, DiffusionModel};
use diffguard::metrics::{js_between, MetricBundle, DEFAULT_BINS};
use diffguard::seed;

use crate::config::{AttackKind, DatasetSpec, ExperimentConfig};

pub fn load_dataset_spec(spec: &DatasetSpec) -> Result<Dataset> {
    Ok(match spec {
        DatasetSpec::Synthetic(s) => synth_dataset_with(s)?,
        DatasetSpec::Path { path } => load_dataset(path)?,
    })
}

/// Short hex digest of the given parts, used to key cached artifacts.
pub fn content_hash(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

/// Predictions of one target on a labelled id list.
#[derive(Clone, Debug)]
pub struct Observed {
    pub ids: Vec<usize>,
    pub labels: Vec<usize>,
    pub members: Vec<bool>,
    pub preds: Vec<PredictionVector>,
}

impl Observed {
    pub fn logits(&self) -> Vec<f64> {
        self.preds.iter().map(logit_score).collect()
    }

    /// Base-2 JS divergence between member and non-member logit histograms.
    pub fn js(&self) -> Result<f64> {
        let logits = self.logits();
        let (m, n): (Vec<(f64, bool)>, Vec<(f64, bool)>) =
            logits.into_iter().zip(self.members.iter().copied()).partition(|(_, m)| *m);
        let m: Vec<f64> = m.into_iter().map(|(v, _)| v).collect();
        let n: Vec<f64> = n.into_iter().map(|(v, _)| v).collect();
        Ok(js_between(&m, &n, DEFAULT_BINS)?)
    }
}

/// Outcome of calibrating one defense configuration.
#[derive(Clone, Debug)]
pub struct Calibration {
    pub fitted: Option<FittedInterval>,
    /// Every `(interval, simulated JS)` pair of the Scenario 1 grid search.
    pub evaluated: Vec<(SelectionInterval, f64)>,
}

impl Calibration {
    pub fn interval(&self) -> Result<Option<SelectionInterval>> {
        self.fitted.as_ref().map(|f| f.interval()).transpose().map_err(Into::into)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtilityRow {
    pub mode: String,
    pub selection: bool,
    pub undefended_accuracy: f64,
    pub defended_accuracy: f64,
    pub accuracy_delta: f64,
    /// Eval samples whose defended label differs from the undefended one.
    pub mismatches: usize,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JsRow {
    pub mode: String,
    pub undefended_js: f64,
    pub defended_js: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub split_hash: String,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub gap_attack_accuracy: f64,
    /// Interval of the deployed defense, if its scenario fits one.
    pub interval: Option<FittedInterval>,
    pub utility: Vec<UtilityRow>,
    pub js: Vec<JsRow>,
    pub metrics: Vec<MetricBundle>,
}

impl SeedReport {
    /// Highest AUC over the given attacks against `target`.
    pub fn best_auc(&self, target: &str, attacks: &[&str]) -> Option<f64> {
        self.metrics
            .iter()
            .filter(|b| b.target_id == target && attacks.contains(&b.attack_id.as_str()))
            .map(|b| b.auc)
            .fold(None, |acc, v| Some(acc.map_or(v, |a: f64| a.max(v))))
    }
}

/// Loads the dataset and draws the split of repetition `seed_value`.
pub fn prepare_data(cfg: &ExperimentConfig, seed_value: u64) -> Result<(Dataset, SplitSpec)> {
    cfg.validate()?;
    let dataset = load_dataset_spec(&cfg.dataset).context("stage data")?;
    let split = make_splits(&dataset, cfg.splits, seed::derive(seed_value, "split", 0)).context("stage data")?;
    Ok((dataset, split))
}

fn checkpoint_dir(cfg: &ExperimentConfig, kind: &str, parts: &[&str]) -> Result<PathBuf> {
    let dataset_key = serde_json::to_string(&cfg.dataset)?;
    let mut all = vec![dataset_key.as_str()];
    all.extend_from_slice(parts);
    Ok(cfg.output_dir.join("checkpoints").join(format!("{kind}-{}", content_hash(&all))))
}

/// The target classifier of repetition `seed_value`, trained on the members
/// unless a checkpoint with the same inputs exists.
pub fn load_or_train_classifier(
    cfg: &ExperimentConfig,
    seed_value: u64,
    dataset: &Dataset,
    split: &SplitSpec,
) -> Result<ClassifierModel> {
    let ccfg = ClassifierConfig { seed: seed::derive(seed_value, "classifier", cfg.classifier.seed), ..cfg.classifier.clone() };
    let dir = checkpoint_dir(cfg, "classifier", &[&split.hash(), &serde_json::to_string(&ccfg)?])?;
    cached(&dir, ClassifierModel::load, |dir| {
        log::info!("training classifier on {} members", split.member_ids.len());
        let model = train_classifier(dataset, &split.member_ids, &ccfg, &split.hash())?;
        model.save(dir)?;
        Ok(model)
    })
    .context("stage train-classifier")
}

/// The diffusion model of repetition `seed_value`, trained on the members.
pub fn load_or_train_diffusion(
    cfg: &ExperimentConfig,
    seed_value: u64,
    dataset: &Dataset,
    split: &SplitSpec,
) -> Result<DiffusionModel> {
    let dcfg = DiffusionConfig { seed: seed::derive(seed_value, "diffusion", cfg.diffusion.seed), ..cfg.diffusion.clone() };
    let dir = checkpoint_dir(cfg, "diffusion", &[&seed::hash_ids(&split.member_ids), &serde_json::to_string(&dcfg)?])?;
    cached(&dir, DiffusionModel::load, |dir| {
        log::info!("training diffusion model for {} steps", dcfg.steps);
        let model = train_ddpm(dataset, &split.member_ids, &dcfg)?;
        model.save(dir)?;
        Ok(model)
    })
    .context("stage train-diffusion")
}

/// Everything one repetition seed needs, built or loaded from the
/// checkpoint cache.
pub struct Run {
    pub cfg: ExperimentConfig,
    pub seed: u64,
    pub dataset: Dataset,
    pub split: SplitSpec,
    pub classifier: ClassifierModel,
    pub diffusion: DiffusionModel,
    /// The deployed defense, with its seed derived from the repetition seed.
    pub defense: DefenseConfig,
    cache_n: usize,
    cache: Mutex<HashMap<(usize, usize, usize), PreparedQuery>>,
}

impl Run {
    pub fn new(cfg: &ExperimentConfig, seed_value: u64) -> Result<Self> {
        let (dataset, split) = prepare_data(cfg, seed_value)?;
        let classifier = load_or_train_classifier(cfg, seed_value, &dataset, &split)?;
        let diffusion = load_or_train_diffusion(cfg, seed_value, &dataset, &split)?;
        let defense = DefenseConfig { seed: seed::derive(seed_value, "defense", cfg.defense.seed), ..cfg.defense.clone() };
        let cache_n = std::iter::once(cfg.defense.n)
            .chain(cfg.sweep.n.iter().copied())
            .chain(std::iter::once(cfg.keep_generating_iters))
            .max()
            .unwrap_or(cfg.defense.n);
        Ok(Self {
            cfg: cfg.clone(),
            seed: seed_value,
            dataset,
            split,
            classifier,
            diffusion,
            defense,
            cache_n,
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn run_dir(&self) -> &Path {
        &self.cfg.output_dir
    }

    /// The deployed defense with a different `N` and `T`; the stride is
    /// capped at `T`.
    pub fn defense_with(&self, n: usize, t: usize) -> DefenseConfig {
        DefenseConfig { n, t, k: self.defense.k.min(t), ..self.defense.clone() }
    }

    /// Reconstructed and scored queries at `defense`'s `T` and stride,
    /// truncated to its `N`. Reconstructions are cached per sample at the
    /// largest `N` the run needs; since variant `j` depends only on the
    /// sample seed and `j`, a prefix equals a fresh run with fewer variants.
    pub fn queries(&self, ids: &[usize], defense: &DefenseConfig) -> Result<Vec<PreparedQuery>> {
        let mut cache = self.cache.lock().map_err(|_| anyhow!("query cache poisoned"))?;
        let full = DefenseConfig { n: defense.n.max(self.cache_n), ..defense.clone() };
        ids.iter()
            .map(|&id| {
                let key = (id, defense.t, defense.k);
                if !cache.get(&key).is_some_and(|q| q.batch.len() >= defense.n) {
                    let q = prepare(&self.dataset.get(id)?.image, &self.classifier, &self.diffusion, &full)
                        .with_context(|| format!("reconstructing sample {id}"))?;
                    cache.insert(key, q);
                }
                Ok(cache[&key].truncated(defense.n))
            })
            .collect()
    }

    pub fn calibration_samples(&self, ids: &[usize], defense: &DefenseConfig) -> Result<Vec<CalibrationSample>> {
        self.queries(ids, defense)?.iter().map(|q| q.calibration_sample().map_err(Into::into)).collect()
    }

    /// Fits the selection interval of `defense` on the defender's samples.
    pub fn calibrate(&self, defense: &DefenseConfig) -> Result<Calibration> {
        if defense.aggregation || defense.scenario == Scenario::Three {
            return Ok(Calibration { fitted: None, evaluated: Vec::new() });
        }
        let members = self.calibration_samples(&self.split.defender_member_ids, defense)?;
        let fitted = |lo: f64, hi: f64, js_value: Option<f64>, hash: String| FittedInterval {
            scenario: defense.scenario,
            lo,
            hi,
            n: defense.n,
            t: defense.t,
            k: defense.k,
            grid: defense.grid,
            js_value,
            calibration_hash: hash,
        };
        match defense.scenario {
            Scenario::One => {
                let nonmembers = self.calibration_samples(&self.split.defender_nonmember_ids, defense)?;
                let fit = fit_interval_scenario1(&members, &nonmembers, defense.grid, defense.fallback)
                    .context("stage fit-interval")?;
                let hash = calibration_hash(&members, &nonmembers);
                Ok(Calibration {
                    fitted: Some(fitted(fit.interval.lo, fit.interval.hi, Some(fit.js), hash)),
                    evaluated: fit.evaluated,
                })
            }
            Scenario::Two => {
                let logits: Vec<f64> = members.iter().flat_map(|s| s.logits.iter().copied()).collect();
                let iv = fit_interval_scenario2(&logits).context("stage fit-interval")?;
                Ok(Calibration {
                    fitted: Some(fitted(iv.lo, iv.hi, None, calibration_hash(&members, &[]))),
                    evaluated: Vec::new(),
                })
            }
            Scenario::Three => unreachable!("handled above"),
        }
    }

    /// Responses of `target` on `ids`. With `model` set, that classifier
    /// stands in for the target classifier behind the same pipeline, reusing
    /// the cached reconstructions; this is how shadow models see the defense.
    pub fn respond(
        &self,
        target: TargetDescriptor,
        defense: &DefenseConfig,
        interval: Option<&SelectionInterval>,
        ids: &[usize],
        model: Option<&dyn Predictor>,
    ) -> Result<Vec<PredictionVector>> {
        let (reconstruct, post) = match target {
            TargetDescriptor::Undefended => (false, Vec::new()),
            TargetDescriptor::Defended => (true, Vec::new()),
            TargetDescriptor::Cascaded => parse_stages(&self.cfg.stages)?,
        };
        let raw = if reconstruct {
            let queries = self.queries(ids, defense)?;
            match model {
                None => queries.iter().map(|q| finish(q, defense, interval)).collect::<diffguard::Result<Vec<_>>>()?,
                Some(m) => queries
                    .into_iter()
                    .map(|mut q| {
                        q.original = m.predict(&[&q.batch.original])?.remove(0);
                        score_batch(&mut q.batch, m)?;
                        finish(&q, defense, interval)
                    })
                    .collect::<diffguard::Result<Vec<_>>>()?,
            }
        } else {
            let model = model.unwrap_or(&self.classifier);
            model.predict(&self.dataset.images(ids)?)?
        };
        Ok(raw.into_iter().map(|p| apply_post(&post, p)).collect::<diffguard::Result<Vec<_>>>()?)
    }

    pub fn observe(
        &self,
        target: TargetDescriptor,
        defense: &DefenseConfig,
        interval: Option<&SelectionInterval>,
        member_ids: &[usize],
        nonmember_ids: &[usize],
    ) -> Result<Observed> {
        let ids: Vec<usize> = member_ids.iter().chain(nonmember_ids).copied().collect();
        let members: Vec<bool> = (0..ids.len()).map(|i| i < member_ids.len()).collect();
        let preds = self.respond(target, defense, interval, &ids, None)?;
        Ok(Observed { labels: self.dataset.labels(&ids)?, ids, members, preds })
    }

    /// The attacker's known samples and the eval samples, as seen through
    /// `target`.
    pub fn observe_pair(
        &self,
        target: TargetDescriptor,
        defense: &DefenseConfig,
        interval: Option<&SelectionInterval>,
    ) -> Result<(Observed, Observed)> {
        let s = &self.split;
        let known =
            self.observe(target, defense, interval, &s.attacker_known_member_ids, &s.attacker_known_nonmember_ids)?;
        let eval = self.observe(target, defense, interval, &s.eval_member_ids, &s.eval_nonmember_ids)?;
        Ok((known, eval))
    }

    /// Threshold and NN attacks: calibrated or trained on `known`, scored on
    /// `eval`. LiRA goes through [`Run::lira`].
    pub fn attack(&self, kind: AttackKind, target_id: &str, known: &Observed, eval: &Observed) -> Result<(AttackScores, f64)> {
        let (scores, decisions) = if let Some(metric) = kind.metric() {
            let score = |o: &Observed| -> Result<Vec<f64>> {
                o.preds.iter().zip(&o.labels).map(|(p, &y)| metric_score(p, y, metric).map_err(Into::into)).collect()
            };
            let k = score(known)?;
            let classes = self.dataset.num_classes();
            let labels = self.cfg.per_class_thresholds.then_some((known.labels.as_slice(), classes));
            let th = calibrate_threshold(&k, &known.members, labels)?;
            let e = score(eval)?;
            let margins: Vec<f64> = e.iter().zip(&eval.labels).map(|(&s, &y)| th.margin(s, y)).collect();
            let decisions = e.iter().zip(&eval.labels).map(|(&s, &y)| th.decide(s, y)).collect::<Vec<_>>();
            (margins, decisions)
        } else if kind == AttackKind::Nn {
            let feats = |o: &Observed| -> Result<Vec<Vec<f64>>> {
                o.preds.iter().zip(&o.labels).map(|(p, &y)| nn_features(p, y).map_err(Into::into)).collect()
            };
            let ncfg = NnAttackConfig { seed: seed::derive(self.seed, "nn-attack", self.cfg.nn_attack.seed), ..self.cfg.nn_attack.clone() };
            let probs = nn_attack(&feats(known)?, &known.members, &feats(eval)?, &ncfg)?;
            let decisions = probs.iter().map(|&p| p >= 0.5).collect();
            (probs, decisions)
        } else {
            bail!("{} is scored through the shadow ensemble", kind.id());
        };
        let acc = balanced_accuracy(&decisions, &eval.members)?;
        let scores = AttackScores::new(eval.ids.clone(), scores, eval.members.clone(), kind.id(), target_id)?;
        Ok((scores, acc))
    }

    /// Shadow models for LiRA, trained on halves of the attacker's pool
    /// (known and eval samples) and cached on disk.
    pub fn shadows(&self) -> Result<ShadowEnsemble> {
        let s = &self.split;
        let pool: Vec<usize> = s
            .attacker_known_member_ids
            .iter()
            .chain(&s.attacker_known_nonmember_ids)
            .chain(&s.eval_member_ids)
            .chain(&s.eval_nonmember_ids)
            .copied()
            .collect();
        let ccfg = self.cfg.lira.classifier.clone().unwrap_or_else(|| self.classifier.manifest().config.clone());
        let sseed = seed::derive(self.seed, "shadows", 0);
        let dir = checkpoint_dir(
            &self.cfg,
            "shadows",
            &[
                &seed::hash_ids(&pool),
                &serde_json::to_string(&ccfg)?,
                &self.cfg.lira.num_models.to_string(),
                &sseed.to_string(),
            ],
        )?;
        cached(&dir, load_shadows, |dir| {
            let ens = train_shadow_ensemble(&self.dataset, &pool, self.cfg.lira.num_models, &ccfg, sseed)?;
            save_shadows(&ens, dir)?;
            Ok(ens)
        })
        .context("stage shadow-models")
    }

    /// LiRA against `target`: shadow observations through the same pipeline,
    /// threshold calibrated on the known samples.
    pub fn lira(
        &self,
        shadows: &ShadowEnsemble,
        variant: LiraVariant,
        target: TargetDescriptor,
        defense: &DefenseConfig,
        interval: Option<&SelectionInterval>,
        known: &Observed,
        eval: &Observed,
    ) -> Result<(AttackScores, f64)> {
        let score = |o: &Observed| -> Result<Vec<f64>> {
            let obs = shadows.observe(&o.ids, &o.labels, |_, model, ids| {
                self.respond(target, defense, interval, ids, Some(model))
                    .map_err(|e| diffguard::Error::Config(format!("shadow query: {e:#}")))
            })?;
            let phi: Vec<f64> = o
                .preds
                .iter()
                .zip(&o.labels)
                .map(|(p, &y)| true_class_phi(p, y))
                .collect::<diffguard::Result<_>>()?;
            Ok(lira_scores(&obs, &phi, variant)?)
        };
        let k = score(known)?;
        let th = calibrate_threshold(&k, &known.members, None)?;
        let e = score(eval)?;
        let decisions: Vec<bool> = e.iter().map(|&s| th.decide(s, 0)).collect();
        let acc = balanced_accuracy(&decisions, &eval.members)?;
        let id = match variant {
            LiraVariant::Online => AttackKind::LiraOnline.id(),
            LiraVariant::Offline => AttackKind::LiraOffline.id(),
        };
        Ok((AttackScores::new(eval.ids.clone(), e, eval.members.clone(), id, target.id())?, acc))
    }

    /// Defended predictions of the eval set under every selection mode,
    /// compared with the undefended predictions.
    pub fn utility_and_js(&self) -> Result<(Vec<UtilityRow>, Vec<JsRow>, Option<FittedInterval>)> {
        let s = &self.split;
        let und =
            self.observe(TargetDescriptor::Undefended, &self.defense, None, &s.eval_member_ids, &s.eval_nonmember_ids)?;
        let und_acc = accuracy(&und);
        let und_js = und.js()?;
        let mut utility = Vec::new();
        let mut js = Vec::new();
        let mut deployed = None;
        let modes = [
            ("scenario1", Scenario::One, false),
            ("scenario2", Scenario::Two, false),
            ("scenario3", Scenario::Three, false),
            ("aggregation", Scenario::Three, true),
        ];
        for (name, scenario, aggregation) in modes {
            let d = DefenseConfig { scenario, aggregation, ..self.defense.clone() };
            let cal = self.calibrate(&d)?;
            if scenario == self.defense.scenario && aggregation == self.defense.aggregation {
                deployed = cal.fitted.clone();
            }
            let iv = cal.interval()?;
            let def = self.observe(TargetDescriptor::Defended, &d, iv.as_ref(), &s.eval_member_ids, &s.eval_nonmember_ids)?;
            let mismatches =
                und.preds.iter().zip(&def.preds).filter(|(a, b)| a.predicted_label() != b.predicted_label()).count();
            let def_acc = accuracy(&def);
            utility.push(UtilityRow {
                mode: name.to_string(),
                selection: !aggregation,
                undefended_accuracy: und_acc,
                defended_accuracy: def_acc,
                accuracy_delta: def_acc - und_acc,
                mismatches,
                n: def.ids.len(),
            });
            js.push(JsRow { mode: name.to_string(), undefended_js: und_js, defended_js: def.js()? });
        }
        Ok((utility, js, deployed))
    }

    /// The full evaluation of this repetition.
    pub fn evaluate(&self) -> Result<SeedReport> {
        let s = &self.split;
        let train_accuracy = evaluate_accuracy(&self.classifier, &s.member_ids, &self.dataset)?;
        let test_accuracy = evaluate_accuracy(&self.classifier, &s.eval_nonmember_ids, &self.dataset)?;
        let (utility, js, interval) = self.utility_and_js().context("stage defend")?;
        let iv = interval.as_ref().map(|f| f.interval()).transpose()?;
        let shadows = if self.cfg.attacks.iter().any(|a| a.is_lira()) { Some(self.shadows()?) } else { None };
        let mut metrics = Vec::new();
        for &target in &self.cfg.targets {
            let (known, eval) = self.observe_pair(target, &self.defense, iv.as_ref()).context("stage attack")?;
            for &kind in &self.cfg.attacks {
                let (scores, acc) = match (kind, &shadows) {
                    (AttackKind::LiraOnline, Some(sh)) => {
                        self.lira(sh, LiraVariant::Online, target, &self.defense, iv.as_ref(), &known, &eval)
                    }
                    (AttackKind::LiraOffline, Some(sh)) => {
                        self.lira(sh, LiraVariant::Offline, target, &self.defense, iv.as_ref(), &known, &eval)
                    }
                    _ => self.attack(kind, target.id(), &known, &eval),
                }
                .with_context(|| format!("stage attack: {} against {}", kind.id(), target.id()))?;
                let dir = self.cfg.output_dir.join("tables");
                fs::create_dir_all(&dir)?;
                scores.write_csv(&dir.join(format!("scores_seed{}_{}_{}.csv", self.seed, target.id(), kind.id())))?;
                metrics.push(scores.metrics(Some(acc))?);
            }
        }
        Ok(SeedReport {
            seed: self.seed,
            split_hash: s.hash(),
            train_accuracy,
            test_accuracy,
            gap_attack_accuracy: gap_attack_accuracy(train_accuracy, test_accuracy)?,
            interval,
            utility,
            js,
            metrics,
        })
    }
}

fn accuracy(o: &Observed) -> f64 {
    let correct = o.preds.iter().zip(&o.labels).filter(|(p, &y)| p.predicted_label() == y).count();
    correct as f64 / o.ids.len().max(1) as f64
}

/// Loads the artifact in `dir` if it exists, otherwise builds it.
fn cached<T>(
    dir: &Path,
    load: impl Fn(&Path) -> diffguard::Result<T>,
    build: impl FnOnce(&Path) -> Result<T>,
) -> Result<T> {
    if dir.join("manifest.json").exists() {
        log::info!("loading {}", dir.display());
        return load(dir).with_context(|| format!("loading {}", dir.display()));
    }
    build(dir)
}

#[derive(Serialize, Deserialize)]
struct ShadowIndex {
    manifest: ShadowManifest,
    pool_ids: Vec<usize>,
    in_masks: Vec<Vec<bool>>,
}

fn shadow_dir(dir: &Path, m: usize) -> PathBuf {
    dir.join(format!("model{m:03}"))
}

fn save_shadows(ens: &ShadowEnsemble, dir: &Path) -> Result<()> {
    for (m, model) in ens.models.iter().enumerate() {
        model.save(&shadow_dir(dir, m))?;
    }
    let index = ShadowIndex { manifest: ens.manifest.clone(), pool_ids: ens.pool_ids.clone(), in_masks: ens.in_masks.clone() };
    fs::write(dir.join("manifest.json"), serde_json::to_string(&index)?)?;
    Ok(())
}

fn load_shadows(dir: &Path) -> diffguard::Result<ShadowEnsemble> {
    let index: ShadowIndex = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let models = (0..index.manifest.num_models)
        .map(|m| ClassifierModel::load(&shadow_dir(dir, m)))
        .collect::<diffguard::Result<Vec<_>>>()?;
    Ok(ShadowEnsemble { models, pool_ids: index.pool_ids, in_masks: index.in_masks, manifest: index.manifest })
}
