//! Black-box membership-inference attacks.
//!
//! Every attack turns prediction vectors (and the known true labels) into a
//! per-sample score where larger means "more likely a member". The same code
//! runs against the raw classifier and against any defended pipeline,
//! through the [`Predictor`](crate::classifier::Predictor) interface.

mod lira;
mod metric;
mod nn_attack;
mod target;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use lira::{
    fit_gaussian, lira_offline_score, lira_online_score, lira_scores, train_shadow_ensemble, true_class_phi,
    GaussianFit, LiraVariant, ShadowEnsemble, ShadowManifest, ShadowObservations, MIN_ONLINE_SHADOWS, SIGMA_FLOOR,
};
pub use metric::{
    balanced_accuracy, calibrate_threshold, gap_attack_accuracy, metric_score, MetricKind, Thresholds,
};
pub use nn_attack::{nn_attack, nn_features, NnAttackConfig};
pub use target::{attack_target, TargetDescriptor, TargetParts};

use crate::metrics::MetricBundle;
use crate::{Error, Result};

/// Per-sample attack output on the evaluation set.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackScores {
    pub sample_ids: Vec<usize>,
    pub scores: Vec<f64>,
    pub is_member: Vec<bool>,
    pub attack_id: String,
    pub target_id: String,
}

#[derive(Serialize, Deserialize)]
struct ScoreRow {
    sample_id: usize,
    score: f64,
    is_member: bool,
    attack_id: String,
    target_id: String,
}

impl AttackScores {
    pub fn new(
        sample_ids: Vec<usize>,
        scores: Vec<f64>,
        is_member: Vec<bool>,
        attack_id: impl Into<String>,
        target_id: impl Into<String>,
    ) -> Result<Self> {
        if scores.len() != is_member.len() || scores.len() != sample_ids.len() {
            return Err(Error::arg(format!(
                "{} ids, {} scores and {} membership bits",
                sample_ids.len(),
                scores.len(),
                is_member.len()
            )));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::arg(format!("score for sample {} is not finite", sample_ids[i])));
        }
        Ok(Self { sample_ids, scores, is_member, attack_id: attack_id.into(), target_id: target_id.into() })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// AUC, low-rate metrics and accuracy. `attack_accuracy` overrides the
    /// best-threshold accuracy when the attack calibrated its own decision.
    pub fn metrics(&self, attack_accuracy: Option<f64>) -> Result<MetricBundle> {
        MetricBundle::compute(&self.attack_id, &self.target_id, &self.scores, &self.is_member, attack_accuracy)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for i in 0..self.len() {
            w.serialize(ScoreRow {
                sample_id: self.sample_ids[i],
                score: self.scores[i],
                is_member: self.is_member[i],
                attack_id: self.attack_id.clone(),
                target_id: self.target_id.clone(),
            })?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let (mut ids, mut scores, mut members) = (Vec::new(), Vec::new(), Vec::new());
        let (mut attack_id, mut target_id) = (String::new(), String::new());
        for row in r.deserialize() {
            let row: ScoreRow = row?;
            ids.push(row.sample_id);
            scores.push(row.score);
            members.push(row.is_member);
            attack_id = row.attack_id;
            target_id = row.target_id;
        }
        Self::new(ids, scores, members, attack_id, target_id)
    }
}
