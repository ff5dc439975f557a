use candle_core::{DType, Device, Tensor};
use candle_nn::{linear, Linear, Module, Optimizer, ParamsAdamW, VarBuilder, VarMap};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::classifier::PredictionVector;
use crate::{nn, seed, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NnAttackConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for NnAttackConfig {
    fn default() -> Self {
        Self { hidden: 64, epochs: 50, lr: 3e-3, batch_size: 32, seed: 0 }
    }
}

/// Descending-sorted probabilities followed by the one-hot true label.
pub fn nn_features(pred: &PredictionVector, true_label: usize) -> Result<Vec<f64>> {
    let k = pred.num_classes();
    if true_label >= k {
        return Err(Error::arg(format!("label {true_label} outside {k} classes")));
    }
    let mut f = pred.probs().to_vec();
    f.sort_by(|a, b| b.total_cmp(a));
    f.extend((0..k).map(|c| f64::from(u8::from(c == true_label))));
    Ok(f)
}

struct Mlp {
    l1: Linear,
    l2: Linear,
    out: Linear,
}

impl Mlp {
    fn new(dim: usize, hidden: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            l1: linear(dim, hidden, vb.pp("l1"))?,
            l2: linear(hidden, hidden, vb.pp("l2"))?,
            out: linear(hidden, 1, vb.pp("out"))?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.l1.forward(x)?.relu()?;
        let h = self.l2.forward(&h)?.relu()?;
        Ok(self.out.forward(&h)?.squeeze(1)?)
    }
}

fn to_tensor(rows: &[&Vec<f64>], dim: usize) -> Result<Tensor> {
    let flat: Vec<f32> = rows.iter().flat_map(|r| r.iter().map(|&v| v as f32)).collect();
    Ok(Tensor::from_vec(flat, (rows.len(), dim), &Device::Cpu)?)
}

/// Trains a two-hidden-layer discriminator on the known samples and returns
/// its member probability for every eval sample.
pub fn nn_attack(
    features_known: &[Vec<f64>],
    membership_known: &[bool],
    features_eval: &[Vec<f64>],
    cfg: &NnAttackConfig,
) -> Result<Vec<f64>> {
    if features_known.len() != membership_known.len() {
        return Err(Error::arg("features and membership differ in length"));
    }
    let pos = membership_known.iter().filter(|&&m| m).count();
    let neg = membership_known.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Calibration("NN attack needs known members and non-members".into()));
    }
    if pos.abs_diff(neg) as f64 > 0.1 * membership_known.len() as f64 {
        log::warn!("NN attack known set is unbalanced: {pos} members, {neg} non-members");
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 || cfg.hidden == 0 {
        return Err(Error::Config("NN attack needs epochs, batch_size and hidden >= 1".into()));
    }
    let dim = features_known[0].len();
    if features_known.iter().chain(features_eval).any(|f| f.len() != dim) {
        return Err(Error::arg("feature vectors differ in length"));
    }

    let varmap = VarMap::new();
    let vb = VarBuilder::from_varmap(&varmap, DType::F32, &Device::Cpu);
    let mlp = Mlp::new(dim, cfg.hidden, vb)?;
    nn::seeded_init(&varmap, cfg.seed)?;
    let mut opt = candle_nn::AdamW::new(varmap.all_vars(), ParamsAdamW { lr: cfg.lr, weight_decay: 0.0, ..Default::default() })?;

    let mut order: Vec<usize> = (0..features_known.len()).collect();
    let mut rng = seed::rng(cfg.seed, "nn-attack", 0);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let rows: Vec<&Vec<f64>> = batch.iter().map(|&i| &features_known[i]).collect();
            let x = to_tensor(&rows, dim)?;
            let y: Vec<f32> = batch.iter().map(|&i| f32::from(u8::from(membership_known[i]))).collect();
            let y = Tensor::from_vec(y, batch.len(), &Device::Cpu)?;
            let loss = candle_nn::loss::binary_cross_entropy_with_logit(&mlp.forward(&x)?, &y)?;
            opt.backward_step(&loss)?;
        }
    }
    if features_eval.is_empty() {
        return Ok(Vec::new());
    }
    let rows: Vec<&Vec<f64>> = features_eval.iter().collect();
    let logits = mlp.forward(&to_tensor(&rows, dim)?)?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    Ok(logits.into_iter().map(|z| 1.0 / (1.0 + (-z).exp())).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::roc_auc;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn feature_layout() {
        let p = PredictionVector::from_probs(vec![0.2, 0.5, 0.3]).unwrap();
        assert_eq!(nn_features(&p, 2).unwrap(), vec![0.5, 0.3, 0.2, 0.0, 0.0, 1.0]);
        assert!(nn_features(&p, 3).is_err());
    }

    fn toy(n: usize, separable: bool, rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<bool>) {
        let mut f = Vec::new();
        let mut m = Vec::new();
        for i in 0..n {
            let member = i % 2 == 0;
            let x: f64 = rng.random_range(0.0..1.0);
            let y: f64 = rng.random_range(0.0..1.0);
            let shift = if separable && member { 1.5 } else { 0.0 };
            f.push(vec![x + shift, y - shift, 1.0 - x]);
            m.push(member);
        }
        (f, m)
    }

    #[test]
    fn separable_toy_reaches_high_auc() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (fk, mk) = toy(200, true, &mut rng);
        let (fe, me) = toy(200, true, &mut rng);
        let s = nn_attack(&fk, &mk, &fe, &NnAttackConfig::default()).unwrap();
        assert!(roc_auc(&s, &me).unwrap() > 0.95);
    }

    #[test]
    fn shuffled_labels_carry_no_signal() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (fk, mut mk) = toy(400, true, &mut rng);
        mk.shuffle(&mut rng);
        let (fe, mut me) = toy(2000, true, &mut rng);
        me.shuffle(&mut rng);
        let s = nn_attack(&fk, &mk, &fe, &NnAttackConfig::default()).unwrap();
        assert!((roc_auc(&s, &me).unwrap() - 0.5).abs() < 0.05);
    }

    #[test]
    fn single_class_is_rejected() {
        let f = vec![vec![0.0, 1.0]; 4];
        assert!(matches!(nn_attack(&f, &[true; 4], &f, &NnAttackConfig::default()), Err(Error::Calibration(_))));
    }
}
