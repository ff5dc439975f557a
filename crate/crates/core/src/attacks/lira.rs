//! Likelihood-ratio attack with shadow models.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::classifier::{train_classifier, ClassifierConfig, ClassifierModel, PredictionVector, Predictor};
use crate::data::Dataset;
use crate::defense::phi;
use crate::{seed, Error, Result};

pub const SIGMA_FLOOR: f64 = 1e-3;
/// Fewest shadow models the online variant accepts.
pub const MIN_ONLINE_SHADOWS: usize = 8;

/// `phi(p_y)`, the logit of the true-class probability.
pub fn true_class_phi(pred: &PredictionVector, true_label: usize) -> Result<f64> {
    if true_label >= pred.num_classes() {
        return Err(Error::arg(format!("label {true_label} outside {} classes", pred.num_classes())));
    }
    Ok(phi(pred.prob(true_label)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianFit {
    pub mean: f64,
    /// Population standard deviation, floored at [`SIGMA_FLOOR`].
    pub std: f64,
}

impl GaussianFit {
    pub fn log_pdf(&self, x: f64) -> f64 {
        let z = (x - self.mean) / self.std;
        -0.5 * z * z - self.std.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
    }
}

pub fn fit_gaussian(values: &[f64]) -> Result<GaussianFit> {
    if values.len() < 2 {
        return Err(Error::Calibration(format!("Gaussian fit needs >= 2 values, got {}", values.len())));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(GaussianFit { mean, std: var.sqrt().max(SIGMA_FLOOR) })
}

/// Log-likelihood ratio of `x` under the IN fit versus the OUT fit.
pub fn lira_online_score(x: f64, fit_in: &GaussianFit, fit_out: &GaussianFit) -> f64 {
    fit_in.log_pdf(x) - fit_out.log_pdf(x)
}

/// `log Phi((x - mean_out) / std_out)`: how far `x` sits above the OUT
/// distribution, one-sided.
pub fn lira_offline_score(x: f64, fit_out: &GaussianFit) -> f64 {
    let z = (x - fit_out.mean) / fit_out.std;
    if z < -30.0 {
        // Mills-ratio asymptote; erfc underflows here.
        -0.5 * z * z - (-z).ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
    } else {
        (0.5 * erfc(-z / std::f64::consts::SQRT_2)).ln()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LiraVariant {
    Online,
    Offline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShadowManifest {
    pub num_models: usize,
    pub pool_hash: String,
    pub seed: u64,
    pub config: ClassifierConfig,
}

pub struct ShadowEnsemble {
    pub models: Vec<ClassifierModel>,
    pub pool_ids: Vec<usize>,
    /// `in_masks[m][j]`: pool sample `j` was in model `m`'s training set.
    pub in_masks: Vec<Vec<bool>>,
    pub manifest: ShadowManifest,
}

/// Trains `num_models` shadow classifiers on random halves of the pool.
/// Every pool sample is IN for exactly `num_models / 2` of them.
pub fn train_shadow_ensemble(
    dataset: &Dataset,
    pool_ids: &[usize],
    num_models: usize,
    cfg: &ClassifierConfig,
    seed: u64,
) -> Result<ShadowEnsemble> {
    if num_models < 2 || pool_ids.len() < 2 {
        return Err(Error::arg("shadow ensemble needs >= 2 models and >= 2 pool samples"));
    }
    let mut in_masks = vec![vec![false; pool_ids.len()]; num_models];
    let mut rng = seed::rng(seed, "shadow-split", 0);
    let mut models_order: Vec<usize> = (0..num_models).collect();
    for j in 0..pool_ids.len() {
        models_order.shuffle(&mut rng);
        for &m in &models_order[..num_models / 2] {
            in_masks[m][j] = true;
        }
    }
    let pool_hash = seed::hash_ids(pool_ids);
    let mut models = Vec::with_capacity(num_models);
    for (m, mask) in in_masks.iter().enumerate() {
        let ids: Vec<usize> = pool_ids.iter().zip(mask).filter(|(_, &inside)| inside).map(|(&id, _)| id).collect();
        let shadow_cfg = ClassifierConfig { seed: seed::derive(seed, "shadow-model", m as u64), ..cfg.clone() };
        log::info!("training shadow model {}/{num_models} on {} samples", m + 1, ids.len());
        models.push(train_classifier(dataset, &ids, &shadow_cfg, &pool_hash)?);
    }
    Ok(ShadowEnsemble {
        models,
        pool_ids: pool_ids.to_vec(),
        in_masks,
        manifest: ShadowManifest { num_models, pool_hash, seed, config: cfg.clone() },
    })
}

/// Shadow-model confidences on a set of samples.
#[derive(Clone, Debug, PartialEq)]
pub struct ShadowObservations {
    pub sample_ids: Vec<usize>,
    /// `phi[m][i]`: true-class logit of sample `i` under shadow model `m`.
    pub phi: Vec<Vec<f64>>,
    pub in_mask: Vec<Vec<bool>>,
}

impl ShadowEnsemble {
    pub fn num_models(&self) -> usize {
        self.models.len()
    }

    /// Queries every shadow model on `ids` through `query`, which receives
    /// the model index and the model and must return one prediction per id.
    /// Wrapping the model in the deployed defense inside `query` gives the
    /// adaptive attacker. Samples outside the pool count as OUT everywhere.
    pub fn observe<F>(&self, ids: &[usize], labels: &[usize], mut query: F) -> Result<ShadowObservations>
    where
        F: FnMut(usize, &dyn Predictor, &[usize]) -> Result<Vec<PredictionVector>>,
    {
        if ids.len() != labels.len() {
            return Err(Error::arg("ids and labels differ in length"));
        }
        let position: std::collections::HashMap<usize, usize> =
            self.pool_ids.iter().enumerate().map(|(j, &id)| (id, j)).collect();
        let mut phi = Vec::with_capacity(self.models.len());
        let mut in_mask = Vec::with_capacity(self.models.len());
        for (m, model) in self.models.iter().enumerate() {
            let preds = query(m, model, ids)?;
            if preds.len() != ids.len() {
                return Err(Error::arg("shadow query returned the wrong number of predictions"));
            }
            phi.push(preds.iter().zip(labels).map(|(p, &y)| true_class_phi(p, y)).collect::<Result<Vec<_>>>()?);
            in_mask.push(ids.iter().map(|id| position.get(id).is_some_and(|&j| self.in_masks[m][j])).collect());
        }
        Ok(ShadowObservations { sample_ids: ids.to_vec(), phi, in_mask })
    }
}

/// Per-sample LiRA scores of the target's true-class logits `target_phi`.
pub fn lira_scores(obs: &ShadowObservations, target_phi: &[f64], variant: LiraVariant) -> Result<Vec<f64>> {
    if target_phi.len() != obs.sample_ids.len() {
        return Err(Error::arg("target observations do not match shadow observations"));
    }
    let models = obs.phi.len();
    if variant == LiraVariant::Online && models < MIN_ONLINE_SHADOWS {
        return Err(Error::Calibration(format!(
            "online LiRA needs >= {MIN_ONLINE_SHADOWS} shadow models, got {models}"
        )));
    }
    (0..target_phi.len())
        .map(|i| {
            let (ins, outs): (Vec<(f64, bool)>, Vec<(f64, bool)>) =
                (0..models).map(|m| (obs.phi[m][i], obs.in_mask[m][i])).partition(|(_, inside)| *inside);
            let outs: Vec<f64> = outs.into_iter().map(|(v, _)| v).collect();
            let fit_out = fit_gaussian(&outs).map_err(|_| {
                Error::Calibration(format!("sample {} has {} OUT observations", obs.sample_ids[i], outs.len()))
            })?;
            match variant {
                LiraVariant::Offline => Ok(lira_offline_score(target_phi[i], &fit_out)),
                LiraVariant::Online => {
                    let ins: Vec<f64> = ins.into_iter().map(|(v, _)| v).collect();
                    let fit_in = fit_gaussian(&ins).map_err(|_| {
                        Error::Calibration(format!("sample {} has {} IN observations", obs.sample_ids[i], ins.len()))
                    })?;
                    Ok(lira_online_score(target_phi[i], &fit_in, &fit_out))
                }
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn three_point_fit_matches_moments() {
        let v = [1.0, 2.0, 4.0];
        let mean = 7.0 / 3.0;
        let var = ((1.0 - mean) * (1.0f64 - mean) + (2.0 - mean) * (2.0 - mean) + (4.0 - mean) * (4.0 - mean)) / 3.0;
        let fit = fit_gaussian(&v).unwrap();
        assert!((fit.mean - mean).abs() < 1e-10);
        assert!((fit.std - var.sqrt()).abs() < 1e-10);
        assert_eq!(fit_gaussian(&[3.0, 3.0]).unwrap().std, SIGMA_FLOOR);
        assert!(fit_gaussian(&[1.0]).is_err());
    }

    #[test]
    fn online_score_direction() {
        let fin = GaussianFit { mean: 4.0, std: 1.0 };
        let fout = GaussianFit { mean: 0.0, std: 1.0 };
        assert!(lira_online_score(2.0, &fin, &fout).abs() < 1e-12);
        assert!(lira_online_score(4.0, &fin, &fout) > 5.0);
        assert!(lira_offline_score(3.0, &fout) > lira_offline_score(-1.0, &fout));
        assert!((lira_offline_score(0.0, &fout) - 0.5f64.ln()).abs() < 1e-12);
        assert!(lira_offline_score(-100.0, &fout).is_finite());
        assert!(lira_offline_score(-29.9, &fout) < lira_offline_score(-29.8, &fout));
        assert!(lira_offline_score(-30.1, &fout) < lira_offline_score(-29.9, &fout));
    }

    fn synthetic_obs(models: usize, samples: usize, in_shift: f64, rng: &mut ChaCha8Rng) -> ShadowObservations {
        let mut phi = vec![vec![0.0; samples]; models];
        let mut in_mask = vec![vec![false; samples]; models];
        for m in 0..models {
            for i in 0..samples {
                let inside = (m + i) % 2 == 0;
                let e: f64 = rng.sample(StandardNormal);
                phi[m][i] = e + if inside { in_shift } else { 0.0 };
                in_mask[m][i] = inside;
            }
        }
        ShadowObservations { sample_ids: (0..samples).collect(), phi, in_mask }
    }

    #[test]
    fn identical_in_out_gives_small_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let obs = synthetic_obs(64, 200, 0.0, &mut rng);
        let target: Vec<f64> = (0..200).map(|_| rng.sample(StandardNormal)).collect();
        let mut s = lira_scores(&obs, &target, LiraVariant::Online).unwrap();
        s.iter_mut().for_each(|v| *v = v.abs());
        s.sort_by(f64::total_cmp);
        assert!(s[100] < 0.3, "median |score| {}", s[100]);
    }

    #[test]
    fn coverage_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let obs = synthetic_obs(4, 3, 1.0, &mut rng);
        assert!(matches!(lira_scores(&obs, &[0.0; 3], LiraVariant::Online), Err(Error::Calibration(_))));
        lira_scores(&obs, &[0.0; 3], LiraVariant::Offline).unwrap();
        let mut obs = synthetic_obs(8, 3, 1.0, &mut rng);
        for m in 0..8 {
            obs.in_mask[m][1] = false;
        }
        assert!(matches!(lira_scores(&obs, &[0.0; 3], LiraVariant::Online), Err(Error::Calibration(_))));
    }

    #[test]
    fn shadow_masks_are_balanced() {
        let ds = crate::data::synth_dataset(2, 10, 8, 0).unwrap();
        let cfg = ClassifierConfig { channels: vec![4], epochs: 1, batch_size: 8, ..Default::default() };
        let pool: Vec<usize> = (0..20).collect();
        let ens = train_shadow_ensemble(&ds, &pool, 4, &cfg, 9).unwrap();
        for j in 0..pool.len() {
            assert_eq!(ens.in_masks.iter().filter(|m| m[j]).count(), 2);
        }
        let labels = ds.labels(&[0, 1]).unwrap();
        let obs = ens
            .observe(&[0, 1], &labels, |_, model, ids| model.predict(&ds.images(ids)?))
            .unwrap();
        assert_eq!(obs.phi.len(), 4);
        assert_eq!(obs.in_mask[0][0], ens.in_masks[0][0]);
    }
}
