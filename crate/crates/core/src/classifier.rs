//! The target classifier `f` whose membership privacy is defended.

use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{linear, Linear, Optimizer, ParamsAdamW, VarBuilder, VarMap};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, ImageShape};
use crate::nn;
use crate::seed;
use crate::{Error, Result};

/// Lower clamp applied to probabilities before any log or logit transform.
pub const PROB_FLOOR: f64 = 1e-7;

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// A probability vector over classes as released by a black-box API.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionVector {
    probs: Vec<f64>,
    predicted_label: usize,
}

impl PredictionVector {
    /// Validates non-negativity and normalization (to 1e-5).
    pub fn from_probs(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::arg("empty probability vector"));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::arg("probabilities must be finite and non-negative"));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-5 {
            return Err(Error::arg(format!("probabilities sum to {sum}, not 1")));
        }
        let predicted_label = argmax(&probs);
        Ok(Self { probs, predicted_label })
    }

    /// Numerically stable softmax.
    pub fn from_logits(logits: &[f64]) -> Self {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exp.iter().sum();
        let probs: Vec<f64> = exp.into_iter().map(|e| e / z).collect();
        let predicted_label = argmax(&probs);
        Self { probs, predicted_label }
    }

    /// Scales non-negative weights to sum to one.
    pub fn normalized(weights: Vec<f64>) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if !(sum > 0.0) || weights.iter().any(|w| *w < 0.0) {
            return Err(Error::arg("cannot normalize a vector without positive mass"));
        }
        Self::from_probs(weights.into_iter().map(|w| w / sum).collect())
    }

    pub fn uniform(num_classes: usize) -> Self {
        Self::from_logits(&vec![0.0; num_classes])
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn predicted_label(&self) -> usize {
        self.predicted_label
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }

    pub fn max_prob(&self) -> f64 {
        self.probs[self.predicted_label]
    }

    pub fn prob(&self, class: usize) -> f64 {
        self.probs[class]
    }

    /// Probabilities clamped to `[PROB_FLOOR, 1 - PROB_FLOOR]`.
    pub fn clamped(&self) -> Vec<f64> {
        self.probs.iter().map(|&p| clamp_prob(p)).collect()
    }
}

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

/// Black-box batched inference.
pub trait Predictor: Send + Sync {
    fn num_classes(&self) -> usize;
    fn input_shape(&self) -> ImageShape;
    /// One prediction per image, in order.
    fn predict(&self, images: &[&[f32]]) -> Result<Vec<PredictionVector>>;
}

/// Top-1 accuracy of `model` on the given samples.
pub fn evaluate_accuracy(model: &dyn Predictor, ids: &[usize], dataset: &Dataset) -> Result<f64> {
    if ids.is_empty() {
        return Err(Error::arg("accuracy over an empty id list"));
    }
    let images = dataset.images(ids)?;
    let labels = dataset.labels(ids)?;
    let preds = model.predict(&images)?;
    let correct = preds.iter().zip(&labels).filter(|(p, &y)| p.predicted_label() == y).count();
    Ok(correct as f64 / ids.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    /// Output channels of each 3x3 conv block; a 2x2 max-pool follows every
    /// second block.
    pub channels: Vec<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            channels: vec![16, 16, 32, 32],
            epochs: 100,
            lr: 1e-3,
            weight_decay: 1e-6,
            batch_size: 128,
            seed: 0,
        }
    }
}

impl ClassifierConfig {
    pub fn architecture_id(&self) -> String {
        let widths: Vec<String> = self.channels.iter().map(|c| c.to_string()).collect();
        format!("small-cnn:{}", widths.join("-"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierManifest {
    pub architecture: String,
    pub num_classes: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub split_hash: String,
    pub input_shape: ImageShape,
    pub config: ClassifierConfig,
    /// Mean training loss per epoch.
    #[serde(default)]
    pub loss_curve: Vec<f64>,
}

struct SmallCnn {
    convs: Vec<nn::Conv3x3>,
    head: Linear,
}

impl SmallCnn {
    fn new(cfg: &ClassifierConfig, shape: ImageShape, num_classes: usize, vb: VarBuilder) -> Result<Self> {
        if cfg.channels.is_empty() {
            return Err(Error::arg("classifier needs at least one conv block"));
        }
        let mut convs = Vec::with_capacity(cfg.channels.len());
        let mut in_ch = shape.channels;
        let (mut h, mut w) = (shape.height, shape.width);
        for (i, &out) in cfg.channels.iter().enumerate() {
            convs.push(nn::conv3x3(in_ch, out, 1, vb.pp(format!("conv{i}")))?);
            in_ch = out;
            if i % 2 == 1 && h >= 2 && w >= 2 {
                h /= 2;
                w /= 2;
            }
        }
        let head = linear(in_ch * h * w, num_classes, vb.pp("head"))?;
        Ok(Self { convs, head })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = x.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.forward(&x)?.relu()?;
            let (_, h, w, _) = x.dims4()?;
            if i % 2 == 1 && h >= 2 && w >= 2 {
                x = nn::max_pool2(&x)?;
            }
        }
        Ok(self.head.forward(&x.flatten_from(1)?)?)
    }
}

pub struct ClassifierModel {
    varmap: VarMap,
    net: SmallCnn,
    manifest: ClassifierManifest,
    device: Device,
}

const INFER_CHUNK: usize = 256;

impl ClassifierModel {
    fn build(manifest: ClassifierManifest) -> Result<Self> {
        let device = Device::Cpu;
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, DType::F32, &device);
        let net = SmallCnn::new(&manifest.config, manifest.input_shape, manifest.num_classes, vb)?;
        nn::seeded_init(&varmap, manifest.seed)?;
        Ok(Self { varmap, net, manifest, device })
    }

    /// An untrained model with seeded weights.
    pub fn untrained(cfg: &ClassifierConfig, shape: ImageShape, num_classes: usize) -> Result<Self> {
        Self::build(ClassifierManifest {
            architecture: cfg.architecture_id(),
            num_classes,
            epochs: 0,
            lr: cfg.lr,
            seed: cfg.seed,
            split_hash: String::new(),
            input_shape: shape,
            config: cfg.clone(),
            loss_curve: Vec::new(),
        })
    }

    pub fn manifest(&self) -> &ClassifierManifest {
        &self.manifest
    }

    fn logits(&self, images: &[&[f32]]) -> Result<Tensor> {
        let x = nn::images_to_tensor(images, self.manifest.input_shape, 1.0, 0.0, &self.device)?;
        self.net.forward(&x)
    }

    /// Writes `weights.safetensors` and `manifest.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        nn::save_weights(&self.varmap, &dir.join("weights.safetensors"))?;
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&self.manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("manifest.json"))
            .map_err(|e| Error::Load { path: dir.join("manifest.json"), reason: e.to_string() })?;
        let manifest: ClassifierManifest = serde_json::from_str(&text)?;
        let mut model = Self::build(manifest)?;
        nn::load_weights(&mut model.varmap, &dir.join("weights.safetensors"))?;
        Ok(model)
    }
}

impl Predictor for ClassifierModel {
    fn num_classes(&self) -> usize {
        self.manifest.num_classes
    }

    fn input_shape(&self) -> ImageShape {
        self.manifest.input_shape
    }

    fn predict(&self, images: &[&[f32]]) -> Result<Vec<PredictionVector>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(INFER_CHUNK) {
            let logits = self.logits(chunk)?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
            out.extend(logits.iter().map(|l| PredictionVector::from_logits(l)));
        }
        Ok(out)
    }
}

/// Trains the small CNN with Adam and an explicit L2 penalty on the member
/// samples only. Mini-batch order is seeded.
pub fn train_classifier(
    dataset: &Dataset,
    member_ids: &[usize],
    config: &ClassifierConfig,
    split_hash: &str,
) -> Result<ClassifierModel> {
    if member_ids.is_empty() {
        return Err(Error::arg("cannot train a classifier on an empty member list"));
    }
    if config.epochs == 0 || config.batch_size == 0 {
        return Err(Error::arg("classifier training needs epochs >= 1 and batch_size >= 1"));
    }
    let mut model = ClassifierModel::untrained(config, dataset.shape(), dataset.num_classes())?;
    model.manifest.epochs = config.epochs;
    model.manifest.split_hash = split_hash.to_string();

    let vars = model.varmap.all_vars();
    let mut opt = candle_nn::AdamW::new(
        vars.clone(),
        ParamsAdamW { lr: config.lr, weight_decay: 0.0, ..Default::default() },
    )?;
    let mut order = member_ids.to_vec();
    let mut rng = seed::rng(config.seed, "classifier-batches", 0);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(config.batch_size) {
            let images = dataset.images(batch)?;
            let labels: Vec<u32> = dataset.labels(batch)?.into_iter().map(|l| l as u32).collect();
            let target = Tensor::new(labels.as_slice(), &model.device)?;
            let logits = model.logits(&images)?;
            let mut loss = candle_nn::loss::cross_entropy(&logits, &target)?;
            if config.weight_decay > 0.0 {
                loss = (loss + (nn::l2_penalty(&vars)? * (0.5 * config.weight_decay))?)?;
            }
            opt.backward_step(&loss)?;
            total += f64::from(loss.to_scalar::<f32>()?);
            batches += 1;
        }
        let mean = total / batches as f64;
        log::debug!("classifier epoch {epoch}: loss {mean:.5}");
        model.manifest.loss_curve.push(mean);
    }
    Ok(model)
}
