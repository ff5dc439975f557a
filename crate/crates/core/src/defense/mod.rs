//! The reconstruction defense: logit modeling, label-preserving candidate
//! filtering, scenario-specific selection and the defended prediction path.
//!
//! A defended query reconstructs the input `N` times, classifies every
//! reconstruction and releases the prediction of one reconstruction whose
//! predicted label matches the label predicted for the raw input. Which one
//! is released depends on the scenario:
//!
//! - [`Scenario::One`]: defender holds members and non-members; a logit
//!   window is fitted by JS-divergence grid search
//!   ([`fit_interval_scenario1`]).
//! - [`Scenario::Two`]: defender holds members only; the window is
//!   `[min, mean]` of member reconstruction logits ([`fit_interval_scenario2`]).
//! - [`Scenario::Three`]: no membership knowledge; a uniformly random
//!   candidate is released.
//!
//! With [`Fallback::Original`] the released label always equals the label of
//! the undefended prediction, so top-1 accuracy is unchanged.

mod cascade;
mod interval;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use cascade::{
    apply_post, parse_stages, Cascade, Identity, PostStage, Rounding, StageSpec, TrainingPlugin, WeightDecayPlugin,
};
pub use interval::{
    calibration_hash, endpoint_grid, fit_interval_scenario1, fit_interval_scenario2, simulated_js, undefended_js,
    CalibrationSample, FittedInterval, GridConfig, IntervalFit,
};

use crate::classifier::{clamp_prob, PredictionVector, Predictor};
use crate::data::ImageShape;
use crate::diffusion::{reconstruct, reconstruct_range, DiffusionModel, ReconstructionBatch};
use crate::seed;
use crate::{Error, Result};

/// `log(p / (1 - p))` with `p` clamped away from 0 and 1.
pub fn phi(p: f64) -> f64 {
    let p = clamp_prob(p);
    (p / (1.0 - p)).ln()
}

/// Parametric-modeled confidence of a prediction: `phi` of its maximum
/// probability.
pub fn logit_score(p: &PredictionVector) -> f64 {
    phi(p.max_prob())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionInterval {
    pub lo: f64,
    pub hi: f64,
}

impl SelectionInterval {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite()) || lo > hi {
            return Err(Error::arg(format!("invalid selection interval [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi })
    }

    /// The practically unbounded window `[-1e9, 1e9]`.
    pub fn everything() -> Self {
        Self { lo: -1e9, hi: 1e9 }
    }

    pub fn contains(&self, logit: f64) -> bool {
        self.lo <= logit && logit <= self.hi
    }

    /// Distance from `logit` to the interval, zero inside.
    pub fn distance(&self, logit: f64) -> f64 {
        (self.lo - logit).max(logit - self.hi).max(0.0)
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Scenario {
    /// Defender knows some members and some non-members.
    One,
    /// Defender knows some members only.
    Two,
    /// Defender knows nothing about membership.
    Three,
}

impl TryFrom<u8> for Scenario {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(Scenario::One),
            2 => Ok(Scenario::Two),
            3 => Ok(Scenario::Three),
            other => Err(format!("scenario must be 1, 2 or 3, got {other}")),
        }
    }
}

impl From<Scenario> for u8 {
    fn from(s: Scenario) -> u8 {
        match s {
            Scenario::One => 1,
            Scenario::Two => 2,
            Scenario::Three => 3,
        }
    }
}

/// What to release when no reconstruction keeps the original label.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    /// The prediction on the unmodified input. Keeps the label.
    #[default]
    Original,
    /// The reconstruction closest to the interval (random one in Scenario
    /// 3), regardless of its label. Can change the label.
    Closest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenseConfig {
    pub scenario: Scenario,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub k: usize,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub fallback: Fallback,
    /// Release the mean of all reconstruction predictions instead of
    /// selecting one. Only valid with Scenario 3.
    #[serde(default)]
    pub aggregation: bool,
    #[serde(default)]
    pub seed: u64,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::One,
            n: 50,
            t: 40,
            k: 10,
            grid: GridConfig::default(),
            fallback: Fallback::Original,
            aggregation: false,
            seed: 0,
        }
    }
}

impl DefenseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("N must be at least 1".into()));
        }
        if self.t == 0 || self.k == 0 || self.k > self.t {
            return Err(Error::Config(format!("need 1 <= k <= T, got k = {}, T = {}", self.k, self.t)));
        }
        if self.aggregation && self.scenario != Scenario::Three {
            return Err(Error::Config(
                "aggregation replaces selection and cannot be combined with an interval scenario".into(),
            ));
        }
        Ok(())
    }
}

/// Indices of the reconstructions whose predicted label equals the original
/// predicted label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CandidateSet {
    pub indices: Vec<usize>,
}

impl CandidateSet {
    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }
}

pub fn candidate_set(batch: &ReconstructionBatch, original_pred: &PredictionVector) -> CandidateSet {
    let label = original_pred.predicted_label();
    CandidateSet {
        indices: batch
            .predictions
            .iter()
            .enumerate()
            .filter(|(_, p)| p.predicted_label() == label)
            .map(|(i, _)| i)
            .collect(),
    }
}

/// Classifies every reconstruction and records its logit score.
pub fn score_batch(batch: &mut ReconstructionBatch, model: &dyn Predictor) -> Result<()> {
    let refs: Vec<&[f32]> = batch.variants.iter().map(Vec::as_slice).collect();
    batch.predictions = model.predict(&refs)?;
    batch.logits = batch.predictions.iter().map(logit_score).collect();
    Ok(())
}

fn closest_index(batch: &ReconstructionBatch, pool: &[usize], interval: &SelectionInterval) -> usize {
    let mut best = pool[0];
    for &i in &pool[1..] {
        if interval.distance(batch.logits[i]) < interval.distance(batch.logits[best]) {
            best = i;
        }
    }
    best
}

/// Index of the reconstruction to release, or `None` for "release the
/// original prediction".
pub fn select_index(
    batch: &ReconstructionBatch,
    cands: &CandidateSet,
    interval: Option<&SelectionInterval>,
    fallback: Fallback,
    rng: &mut impl Rng,
) -> Option<usize> {
    if cands.is_empty() {
        return match (fallback, batch.is_empty()) {
            (Fallback::Original, _) | (_, true) => None,
            (Fallback::Closest, false) => {
                let all: Vec<usize> = (0..batch.len()).collect();
                Some(match interval {
                    Some(iv) => closest_index(batch, &all, iv),
                    None => all[rng.random_range(0..all.len())],
                })
            }
        };
    }
    let Some(iv) = interval else {
        return Some(cands.indices[rng.random_range(0..cands.len())]);
    };
    let inside: Vec<usize> = cands.indices.iter().copied().filter(|&i| iv.contains(batch.logits[i])).collect();
    if inside.is_empty() {
        Some(closest_index(batch, &cands.indices, iv))
    } else {
        Some(inside[rng.random_range(0..inside.len())])
    }
}

/// Picks the prediction to release: uniform among in-interval candidates,
/// else the candidate closest to the interval; uniform among all candidates
/// when there is no interval; the fallback when there are no candidates.
pub fn select_prediction(
    batch: &ReconstructionBatch,
    cands: &CandidateSet,
    interval: Option<&SelectionInterval>,
    fallback: Fallback,
    original_pred: &PredictionVector,
    rng: &mut impl Rng,
) -> PredictionVector {
    match select_index(batch, cands, interval, fallback, rng) {
        Some(i) => batch.predictions[i].clone(),
        None => original_pred.clone(),
    }
}

/// Mean of the reconstruction probability vectors, renormalized.
pub fn aggregate_predict(batch: &ReconstructionBatch) -> Result<PredictionVector> {
    if batch.predictions.is_empty() {
        return Err(Error::arg("cannot aggregate an empty reconstruction batch"));
    }
    let k = batch.predictions[0].num_classes();
    let mut mean = vec![0.0; k];
    for p in &batch.predictions {
        for (m, q) in mean.iter_mut().zip(p.probs()) {
            *m += q;
        }
    }
    PredictionVector::normalized(mean)
}

/// Per-input seed: mixes the configured seed with a digest of the pixels so
/// a given input always sees the same reconstructions.
pub fn sample_seed(base: u64, image: &[f32]) -> u64 {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for v in image {
        h.update(v.to_bits().to_le_bytes());
    }
    let digest = h.finalize();
    let mut word = [0u8; 8];
    word.copy_from_slice(&digest[..8]);
    seed::derive(base, "sample", u64::from_le_bytes(word))
}

/// The inputs to selection for one query: the undefended prediction and the
/// scored reconstructions.
#[derive(Clone, Debug)]
pub struct PreparedQuery {
    pub original: PredictionVector,
    pub batch: ReconstructionBatch,
}

impl PreparedQuery {
    pub fn original_logit(&self) -> f64 {
        logit_score(&self.original)
    }

    pub fn calibration_sample(&self) -> Result<CalibrationSample> {
        CalibrationSample::from_batch(&self.batch, self.original.predicted_label(), self.original_logit())
    }

    /// The first `n` reconstructions only.
    pub fn truncated(&self, n: usize) -> Self {
        Self { original: self.original.clone(), batch: self.batch.truncated(n) }
    }
}

/// Predicts the raw input and its `N` reconstructions.
pub fn prepare(x: &[f32], model: &dyn Predictor, dmodel: &DiffusionModel, cfg: &DefenseConfig) -> Result<PreparedQuery> {
    cfg.validate()?;
    let original = model
        .predict(&[x])?
        .pop()
        .ok_or_else(|| Error::arg("classifier returned no prediction"))?;
    let mut batch = reconstruct(dmodel, x, cfg.t, cfg.k, cfg.n, sample_seed(cfg.seed, x))?;
    score_batch(&mut batch, model)?;
    Ok(PreparedQuery { original, batch })
}

/// Selection (or aggregation) step of a defended query.
pub fn finish(query: &PreparedQuery, cfg: &DefenseConfig, interval: Option<&SelectionInterval>) -> Result<PredictionVector> {
    if cfg.aggregation {
        return aggregate_predict(&query.batch);
    }
    let interval = match cfg.scenario {
        Scenario::Three => None,
        _ => Some(interval.ok_or_else(|| {
            Error::Config(format!("scenario {} needs a fitted interval", u8::from(cfg.scenario)))
        })?),
    };
    let cands = candidate_set(&query.batch, &query.original);
    let mut rng = seed::rng(query.batch.seed, "select", 0);
    Ok(select_prediction(&query.batch, &cands, interval, cfg.fallback, &query.original, &mut rng))
}

/// End-to-end defended prediction for one input.
pub fn defend(
    x: &[f32],
    model: &dyn Predictor,
    dmodel: &DiffusionModel,
    cfg: &DefenseConfig,
    interval: Option<&SelectionInterval>,
) -> Result<PredictionVector> {
    finish(&prepare(x, model, dmodel, cfg)?, cfg, interval)
}

/// Outcome of the keep-generating strategy for one input.
#[derive(Clone, Debug)]
pub struct KeepGenerating {
    pub prediction: PredictionVector,
    /// Reconstructions generated, at most `max_iters`.
    pub n_generations: usize,
    /// Whether a label-preserving reconstruction landed in the interval.
    pub hit: bool,
}

/// Generates one reconstruction at a time until a label-preserving one has
/// its logit inside `interval`, giving up after `max_iters`. On a miss the
/// usual closest-candidate rule over everything generated applies.
#[allow(clippy::too_many_arguments)]
pub fn keep_generating_select(
    x: &[f32],
    model: &dyn Predictor,
    dmodel: &DiffusionModel,
    interval: &SelectionInterval,
    max_iters: usize,
    t: usize,
    k: usize,
    seed: u64,
) -> Result<KeepGenerating> {
    if max_iters == 0 {
        return Err(Error::arg("max_iters must be at least 1"));
    }
    let original = model.predict(&[x])?.pop().ok_or_else(|| Error::arg("classifier returned no prediction"))?;
    let sample_seed = sample_seed(seed, x);
    let mut seen: Option<ReconstructionBatch> = None;
    for i in 0..max_iters {
        let mut one = reconstruct_range(dmodel, x, t, k, i, 1, sample_seed)?;
        score_batch(&mut one, model)?;
        let keeps = one.predictions[0].predicted_label() == original.predicted_label();
        if keeps && interval.contains(one.logits[0]) {
            return Ok(KeepGenerating { prediction: one.predictions[0].clone(), n_generations: i + 1, hit: true });
        }
        match &mut seen {
            None => seen = Some(one),
            Some(all) => {
                all.variants.extend(one.variants);
                all.predictions.extend(one.predictions);
                all.logits.extend(one.logits);
            }
        }
    }
    let all = seen.expect("max_iters >= 1");
    let cands = candidate_set(&all, &original);
    let mut rng = seed::rng(sample_seed, "select", 0);
    let prediction = select_prediction(&all, &cands, Some(interval), Fallback::Original, &original, &mut rng);
    Ok(KeepGenerating { prediction, n_generations: max_iters, hit: false })
}

/// A classifier behind the reconstruction defense, usable wherever a
/// black-box [`Predictor`] is expected.
pub struct DefendedPredictor<'a> {
    pub model: &'a dyn Predictor,
    pub dmodel: &'a DiffusionModel,
    pub cfg: DefenseConfig,
    pub interval: Option<SelectionInterval>,
}

impl<'a> DefendedPredictor<'a> {
    pub fn new(
        model: &'a dyn Predictor,
        dmodel: &'a DiffusionModel,
        cfg: DefenseConfig,
        interval: Option<SelectionInterval>,
    ) -> Result<Self> {
        cfg.validate()?;
        if cfg.scenario != Scenario::Three && !cfg.aggregation && interval.is_none() {
            return Err(Error::Config("interval scenarios need a fitted interval".into()));
        }
        Ok(Self { model, dmodel, cfg, interval })
    }
}

impl Predictor for DefendedPredictor<'_> {
    fn num_classes(&self) -> usize {
        self.model.num_classes()
    }

    fn input_shape(&self) -> ImageShape {
        self.model.input_shape()
    }

    fn predict(&self, images: &[&[f32]]) -> Result<Vec<PredictionVector>> {
        images
            .iter()
            .map(|x| defend(x, self.model, self.dmodel, &self.cfg, self.interval.as_ref()))
            .collect()
    }
}
