//! Minimal DDPM: schedule, epsilon-prediction training, closed-form forward
//! noising and the strided deterministic reconstruction used by the defense.
//!
//! Pixels are `[0, 1]` at the module boundary and `[-1, 1]` inside.

mod schedule;
mod unet;

use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use candle_nn::{Optimizer, ParamsAdamW, VarBuilder, VarMap};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use schedule::{build_schedule, NoiseSchedule, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_T_MAX};
pub use unet::{UNet, UNetConfig};

use crate::classifier::PredictionVector;
use crate::data::{Dataset, ImageShape};
use crate::nn;
use crate::seed;
use crate::{Error, Result};

/// `x_t = sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps`.
pub fn forward_noise(x0: &[f32], t: usize, eps: &[f32], schedule: &NoiseSchedule) -> Result<Vec<f32>> {
    if eps.len() != x0.len() {
        return Err(Error::arg(format!("noise has {} values, input has {}", eps.len(), x0.len())));
    }
    let ab = schedule.alpha_bar(t)?;
    if t == 0 {
        return Err(Error::arg("forward noising needs t >= 1"));
    }
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0
        .iter()
        .zip(eps)
        .map(|(&x, &e)| (a * f64::from(x) + b * f64::from(e)) as f32)
        .collect())
}

/// An epsilon-predictor over `[-1, 1]` images.
pub trait Denoiser: Send + Sync {
    /// `x_t` is `N x H x W x C`; `t` holds one timestep per row.
    fn predict_noise(&self, x_t: &Tensor, t: &[usize]) -> Result<Tensor>;

    /// Trainable weights, when the denoiser has any.
    fn varmap(&self) -> Option<&VarMap> {
        None
    }
}

/// Predicts zero noise everywhere.
pub struct ZeroDenoiser;

impl Denoiser for ZeroDenoiser {
    fn predict_noise(&self, x_t: &Tensor, _t: &[usize]) -> Result<Tensor> {
        Ok(x_t.zeros_like()?)
    }
}

pub struct UNetDenoiser {
    varmap: VarMap,
    net: UNet,
}

impl UNetDenoiser {
    pub fn new(cfg: &UNetConfig, shape: ImageShape, seed: u64) -> Result<Self> {
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, DType::F32, &Device::Cpu);
        let net = UNet::new(cfg, shape.channels, shape.height, shape.width, vb)?;
        nn::seeded_init(&varmap, seed)?;
        Ok(Self { varmap, net })
    }
}

impl Denoiser for UNetDenoiser {
    fn predict_noise(&self, x_t: &Tensor, t: &[usize]) -> Result<Tensor> {
        self.net.forward(x_t, t)
    }

    fn varmap(&self) -> Option<&VarMap> {
        Some(&self.varmap)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionConfig {
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub unet: UNetConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            t_max: DEFAULT_T_MAX,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
            unet: UNetConfig::default(),
            steps: 2000,
            batch_size: 64,
            lr: 2e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionManifest {
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub train_ids_hash: String,
    pub seed: u64,
    pub input_shape: ImageShape,
    pub config: DiffusionConfig,
    /// Training MSE per optimizer step.
    #[serde(default)]
    pub loss_curve: Vec<f64>,
}

pub struct DiffusionModel {
    schedule: NoiseSchedule,
    shape: ImageShape,
    denoiser: Box<dyn Denoiser>,
    manifest: Option<DiffusionManifest>,
}

impl DiffusionModel {
    pub fn new(schedule: NoiseSchedule, shape: ImageShape, denoiser: Box<dyn Denoiser>) -> Self {
        Self { schedule, shape, denoiser, manifest: None }
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn denoiser(&self) -> &dyn Denoiser {
        self.denoiser.as_ref()
    }

    pub fn manifest(&self) -> Option<&DiffusionManifest> {
        self.manifest.as_ref()
    }

    /// Writes `weights.safetensors` and `manifest.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let (Some(manifest), Some(varmap)) = (&self.manifest, self.denoiser.varmap()) else {
            return Err(Error::Config("only trained U-Net diffusion models can be saved".into()));
        };
        fs::create_dir_all(dir)?;
        nn::save_weights(varmap, &dir.join("weights.safetensors"))?;
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::Load { path, reason: e.to_string() })?;
        let manifest: DiffusionManifest = serde_json::from_str(&text)?;
        let mut unet = UNetDenoiser::new(&manifest.config.unet, manifest.input_shape, manifest.seed)?;
        nn::load_weights(&mut unet.varmap, &dir.join("weights.safetensors"))?;
        let schedule = build_schedule(manifest.t_max, manifest.beta_start, manifest.beta_end)?;
        Ok(Self {
            schedule,
            shape: manifest.input_shape,
            denoiser: Box::new(unet),
            manifest: Some(manifest),
        })
    }
}

fn standard_normal(rng: &mut impl Rng, len: usize) -> Vec<f32> {
    (0..len).map(|_| rng.sample(StandardNormal)).collect()
}

/// Trains a U-Net epsilon-predictor on the given samples with uniformly
/// drawn timesteps and mean-squared error on the noise.
pub fn train_ddpm(dataset: &Dataset, ids: &[usize], config: &DiffusionConfig) -> Result<DiffusionModel> {
    if ids.is_empty() {
        return Err(Error::arg("cannot train a diffusion model on an empty id list"));
    }
    if config.steps == 0 || config.batch_size == 0 {
        return Err(Error::arg("diffusion training needs steps >= 1 and batch_size >= 1"));
    }
    let schedule = build_schedule(config.t_max, config.beta_start, config.beta_end)?;
    let shape = dataset.shape();
    let unet = UNetDenoiser::new(&config.unet, shape, config.seed)?;
    let mut opt = candle_nn::AdamW::new(
        unet.varmap.all_vars(),
        ParamsAdamW { lr: config.lr, weight_decay: 0.0, ..Default::default() },
    )?;
    let device = Device::Cpu;
    let mut rng = seed::rng(config.seed, "ddpm-train", 0);
    let mut loss_curve = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let mut noisy = Vec::with_capacity(config.batch_size * shape.len());
        let mut targets = Vec::with_capacity(config.batch_size * shape.len());
        let mut ts = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            let id = ids[rng.random_range(0..ids.len())];
            let t = rng.random_range(1..=config.t_max);
            let x0: Vec<f32> = dataset.get(id)?.image.iter().map(|v| 2.0 * v - 1.0).collect();
            let eps = standard_normal(&mut rng, shape.len());
            noisy.push(forward_noise(&x0, t, &eps, &schedule)?);
            targets.push(eps);
            ts.push(t);
        }
        let noisy_refs: Vec<&[f32]> = noisy.iter().map(Vec::as_slice).collect();
        let target_refs: Vec<&[f32]> = targets.iter().map(Vec::as_slice).collect();
        let x_t = nn::images_to_tensor(&noisy_refs, shape, 1.0, 0.0, &device)?;
        let target = nn::images_to_tensor(&target_refs, shape, 1.0, 0.0, &device)?;
        let pred = unet.predict_noise(&x_t, &ts)?;
        let loss = (pred - target)?.sqr()?.mean_all()?;
        opt.backward_step(&loss)?;
        let l = f64::from(loss.to_scalar::<f32>()?);
        if step % 200 == 0 {
            log::debug!("ddpm step {step}: mse {l:.4}");
        }
        loss_curve.push(l);
    }
    let manifest = DiffusionManifest {
        t_max: config.t_max,
        beta_start: config.beta_start,
        beta_end: config.beta_end,
        train_ids_hash: seed::hash_ids(ids),
        seed: config.seed,
        input_shape: shape,
        config: config.clone(),
        loss_curve,
    };
    Ok(DiffusionModel { schedule, shape, denoiser: Box::new(unet), manifest: Some(manifest) })
}

/// The `n` reconstructions of one input together with, once the defense has
/// scored them, the classifier's predictions and logit scores.
#[derive(Clone, Debug)]
pub struct ReconstructionBatch {
    /// Original image in `[0, 1]`.
    pub original: Vec<f32>,
    /// Reconstructions in `[0, 1]`.
    pub variants: Vec<Vec<f32>>,
    pub predictions: Vec<PredictionVector>,
    pub logits: Vec<f64>,
    pub seed: u64,
    /// Denoiser evaluations spent per variant.
    pub denoiser_evals: usize,
}

impl ReconstructionBatch {
    pub fn len(&self) -> usize {
        self.variants.len()
    }

    pub fn is_empty(&self) -> bool {
        self.variants.is_empty()
    }

    pub fn is_scored(&self) -> bool {
        self.predictions.len() == self.variants.len() && self.logits.len() == self.variants.len()
    }

    /// Keeps only the first `n` variants. Variant `j` depends only on
    /// `(seed, j)`, so a truncated batch equals a batch built with `n`.
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            original: self.original.clone(),
            variants: self.variants[..n].to_vec(),
            predictions: self.predictions.iter().take(n).cloned().collect(),
            logits: self.logits.iter().take(n).copied().collect(),
            seed: self.seed,
            denoiser_evals: self.denoiser_evals,
        }
    }
}

/// Timesteps visited by the strided reverse sampler starting at `t`:
/// `t, t - k, ...` while positive.
pub fn strided_timesteps(t: usize, k: usize) -> Vec<usize> {
    (0..).map(|i| t as i64 - (i * k) as i64).take_while(|&s| s > 0).map(|s| s as usize).collect()
}

/// Noises `x` to level `t` with fresh noise per variant, then walks the
/// deterministic strided sampler (`eta = 0`) down to 0 and clamps.
///
/// Variant `j` uses the noise stream `(seed, j)`, so the output is a pure
/// function of `(model, x, t, k, n, seed)`.
pub fn reconstruct(
    model: &DiffusionModel,
    x: &[f32],
    t: usize,
    k: usize,
    n: usize,
    seed: u64,
) -> Result<ReconstructionBatch> {
    reconstruct_range(model, x, t, k, 0, n, seed)
}

/// Variants `start..start + n` of the stream [`reconstruct`] draws from.
pub fn reconstruct_range(
    model: &DiffusionModel,
    x: &[f32],
    t: usize,
    k: usize,
    start: usize,
    n: usize,
    seed: u64,
) -> Result<ReconstructionBatch> {
    let schedule = &model.schedule;
    if t == 0 || t > schedule.t_max() {
        return Err(Error::arg(format!("diffusion steps {t} outside [1, {}]", schedule.t_max())));
    }
    if k == 0 || k > t {
        return Err(Error::arg(format!("stride {k} outside [1, {t}]")));
    }
    if n == 0 {
        return Err(Error::arg("need at least one reconstruction"));
    }
    let shape = model.shape;
    if x.len() != shape.len() {
        return Err(Error::arg(format!("image has {} values, model expects {:?}", x.len(), shape)));
    }
    let x0: Vec<f32> = x.iter().map(|v| 2.0 * v - 1.0).collect();
    let mut noised = Vec::with_capacity(n);
    for j in start..start + n {
        let eps = standard_normal(&mut seed::rng(seed, "reconstruct", j as u64), shape.len());
        noised.push(forward_noise(&x0, t, &eps, schedule)?);
    }
    let refs: Vec<&[f32]> = noised.iter().map(Vec::as_slice).collect();
    let mut x_t = nn::images_to_tensor(&refs, shape, 1.0, 0.0, &Device::Cpu)?;

    let steps = strided_timesteps(t, k);
    for &cur in &steps {
        let next = cur.saturating_sub(k);
        let ab = schedule.alpha_bar(cur)?;
        let ab_next = schedule.alpha_bar(next)?;
        let eps_hat = model.denoiser.predict_noise(&x_t, &vec![cur; n])?;
        let x0_hat = ((&x_t - (&eps_hat * (1.0 - ab).sqrt())?)? / ab.sqrt())?;
        x_t = ((x0_hat * ab_next.sqrt())? + (eps_hat * (1.0 - ab_next).sqrt())?)?;
    }
    let x_t = x_t.clamp(-1.0f32, 1.0f32)?;
    let variants = nn::tensor_to_images(&x_t, 0.5, 0.5)?
        .into_iter()
        .map(|img| img.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
        .collect();
    Ok(ReconstructionBatch {
        original: x.to_vec(),
        variants,
        predictions: Vec::new(),
        logits: Vec::new(),
        seed,
        denoiser_evals: steps.len(),
    })
}

#[cfg(test)]
mod tests {
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    use super::*;
    use crate::data::synth_dataset;

    struct CountingDenoiser(Arc<AtomicUsize>);

    impl Denoiser for CountingDenoiser {
        fn predict_noise(&self, x_t: &Tensor, _t: &[usize]) -> Result<Tensor> {
            self.0.fetch_add(1, Ordering::SeqCst);
            Ok(x_t.zeros_like()?)
        }
    }

    fn shape() -> ImageShape {
        ImageShape::new(8, 8, 3)
    }

    #[test]
    fn forward_noise_special_cases() {
        let s = NoiseSchedule::default();
        let x0: Vec<f32> = (0..12).map(|i| i as f32 / 12.0 - 0.5).collect();
        let zero = vec![0.0; 12];
        let out = forward_noise(&x0, 40, &zero, &s).unwrap();
        let a = s.alpha_bar(40).unwrap().sqrt();
        for (o, x) in out.iter().zip(&x0) {
            assert!((f64::from(*o) - a * f64::from(*x)).abs() < 1e-6);
        }
        // alpha_bar -> 1 limit: the smallest beta the schedule allows.
        let tiny = build_schedule(1, f64::MIN_POSITIVE, f64::MIN_POSITIVE).unwrap();
        let eps = vec![1.0; 12];
        assert_eq!(forward_noise(&x0, 1, &eps, &tiny).unwrap(), x0);
        assert!(forward_noise(&x0, 0, &eps, &s).is_err());
        assert!(forward_noise(&x0, 1001, &eps, &s).is_err());
        assert!(forward_noise(&x0, 1, &eps[..3], &s).is_err());
    }

    #[test]
    fn strided_steps() {
        assert_eq!(strided_timesteps(40, 10), vec![40, 30, 20, 10]);
        assert_eq!(strided_timesteps(1, 1), vec![1]);
        assert_eq!(strided_timesteps(25, 10), vec![25, 15, 5]);
    }

    #[test]
    fn reconstruct_counts_denoiser_calls() {
        let calls = Arc::new(AtomicUsize::new(0));
        let model =
            DiffusionModel::new(NoiseSchedule::default(), shape(), Box::new(CountingDenoiser(calls.clone())));
        let x = vec![0.5; shape().len()];
        let batch = reconstruct(&model, &x, 40, 10, 3, 1).unwrap();
        // one batched call per strided step
        assert_eq!(calls.load(Ordering::SeqCst), 4);
        assert_eq!(batch.denoiser_evals, 4);
        assert_eq!(batch.len(), 3);
    }

    #[test]
    fn reconstruct_argument_errors() {
        let model = DiffusionModel::new(NoiseSchedule::default(), shape(), Box::new(ZeroDenoiser));
        let x = vec![0.5; shape().len()];
        assert!(reconstruct(&model, &x, 0, 1, 1, 0).is_err());
        assert!(reconstruct(&model, &x, 1001, 1, 1, 0).is_err());
        assert!(reconstruct(&model, &x, 10, 11, 1, 0).is_err());
        assert!(reconstruct(&model, &x, 10, 0, 1, 0).is_err());
        assert!(reconstruct(&model, &x, 10, 5, 0, 0).is_err());
        let one = reconstruct(&model, &x, 1, 1, 1, 0).unwrap();
        assert_eq!(one.variants[0].len(), x.len());
        assert_eq!(one.denoiser_evals, 1);
    }

    #[test]
    fn zero_denoiser_is_rescaled_noising() {
        // With eps_hat = 0 every step rescales by sqrt(ab_next / ab), so the
        // output is clamp(x_T / sqrt(ab_T)).
        let s = NoiseSchedule::default();
        let model = DiffusionModel::new(s.clone(), shape(), Box::new(ZeroDenoiser));
        let x: Vec<f32> = (0..shape().len()).map(|i| (i % 7) as f32 / 7.0).collect();
        let batch = reconstruct(&model, &x, 40, 10, 2, 9).unwrap();
        let x0: Vec<f32> = x.iter().map(|v| 2.0 * v - 1.0).collect();
        for j in 0..2 {
            let eps = standard_normal(&mut seed::rng(9, "reconstruct", j as u64), x.len());
            let xt = forward_noise(&x0, 40, &eps, &s).unwrap();
            let ab = s.alpha_bar(40).unwrap().sqrt();
            for (got, v) in batch.variants[j].iter().zip(&xt) {
                let expect = ((f64::from(*v) / ab).clamp(-1.0, 1.0) * 0.5 + 0.5) as f32;
                assert!((got - expect).abs() < 1e-5, "{got} vs {expect}");
            }
        }
    }

    #[test]
    fn reconstruct_is_deterministic_and_prefix_stable() {
        let model = DiffusionModel::new(NoiseSchedule::default(), shape(), Box::new(ZeroDenoiser));
        let x = vec![0.3; shape().len()];
        let a = reconstruct(&model, &x, 20, 5, 4, 11).unwrap();
        let b = reconstruct(&model, &x, 20, 5, 4, 11).unwrap();
        let c = reconstruct(&model, &x, 20, 5, 2, 11).unwrap();
        assert_eq!(a.variants, b.variants);
        assert_eq!(a.truncated(2).variants, c.variants);
        assert_ne!(a.variants[0], a.variants[1], "variants use fresh noise");
        for v in &a.variants {
            assert!(v.iter().all(|p| p.is_finite() && (0.0..=1.0).contains(p)));
        }
    }

    #[test]
    fn unet_preserves_shape_and_trains() {
        let ds = synth_dataset(2, 8, 8, 0).unwrap();
        let cfg = DiffusionConfig {
            unet: UNetConfig { width: 8, mults: vec![1, 2], time_features: 8 },
            steps: 3,
            batch_size: 4,
            ..Default::default()
        };
        let ids: Vec<usize> = (0..16).collect();
        let model = train_ddpm(&ds, &ids, &cfg).unwrap();
        assert_eq!(model.manifest().unwrap().loss_curve.len(), 3);
        let again = train_ddpm(&ds, &ids, &cfg).unwrap();
        assert_eq!(model.manifest().unwrap().loss_curve, again.manifest().unwrap().loss_curve);
        let batch = reconstruct(&model, &ds.samples()[0].image, 40, 10, 2, 0).unwrap();
        assert_eq!(batch.variants[0].len(), ds.shape().len());
        assert!(train_ddpm(&ds, &[], &cfg).is_err());

        let dir = tempfile::tempdir().unwrap();
        model.save(dir.path()).unwrap();
        let loaded = DiffusionModel::load(dir.path()).unwrap();
        let again = reconstruct(&loaded, &ds.samples()[0].image, 40, 10, 2, 0).unwrap();
        assert_eq!(batch.variants, again.variants);
    }
}
