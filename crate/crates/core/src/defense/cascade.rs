//! Composition of the reconstruction defense with other defenses: an
//! optional pre-inference reconstruction stage, the classifier, then any
//! number of post-inference transforms. Training-time defenses hook in
//! through [`TrainingPlugin`] before the classifier is trained.

use serde::{Deserialize, Serialize};

use super::{DefendedPredictor, DefenseConfig, SelectionInterval};
use crate::classifier::{ClassifierConfig, PredictionVector, Predictor};
use crate::data::ImageShape;
use crate::diffusion::DiffusionModel;
use crate::{Error, Result};

/// A transform applied to the released prediction vector.
pub trait PostStage: Send + Sync {
    fn name(&self) -> &str;
    fn apply(&self, p: &PredictionVector) -> Result<PredictionVector>;
}

pub struct Identity;

impl PostStage for Identity {
    fn name(&self) -> &str {
        "identity"
    }

    fn apply(&self, p: &PredictionVector) -> Result<PredictionVector> {
        Ok(p.clone())
    }
}

/// Rounds every probability to `decimals` places and renormalizes. If
/// everything rounds to zero the input is returned unchanged.
pub struct Rounding {
    pub decimals: u32,
}

impl Rounding {
    pub fn rounded(&self, p: &PredictionVector) -> Vec<f64> {
        let scale = 10f64.powi(self.decimals as i32);
        p.probs().iter().map(|q| (q * scale).round() / scale).collect()
    }
}

impl PostStage for Rounding {
    fn name(&self) -> &str {
        "rounding"
    }

    fn apply(&self, p: &PredictionVector) -> Result<PredictionVector> {
        let r = self.rounded(p);
        if r.iter().sum::<f64>() <= 0.0 {
            return Ok(p.clone());
        }
        PredictionVector::normalized(r)
    }
}

/// Declarative stage list entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StageSpec {
    /// Pre-inference: the reconstruction defense.
    Reconstruct,
    /// Post-inference: pass-through.
    Identity,
    /// Post-inference: probability rounding.
    Rounding { decimals: u32 },
}

/// Checks a stage list and instantiates its post-inference stages. The flag
/// tells whether the list starts with the reconstruction stage.
pub fn parse_stages(stages: &[StageSpec]) -> Result<(bool, Vec<Box<dyn PostStage>>)> {
    let mut reconstruct = false;
    let mut post: Vec<Box<dyn PostStage>> = Vec::new();
    for (i, stage) in stages.iter().enumerate() {
        match stage {
            StageSpec::Reconstruct => {
                if i != 0 {
                    return Err(Error::Config(format!(
                        "stage {i}: reconstruction is a pre-inference stage and must come first"
                    )));
                }
                reconstruct = true;
            }
            StageSpec::Identity => post.push(Box::new(Identity)),
            StageSpec::Rounding { decimals } => {
                if *decimals > 15 {
                    return Err(Error::Config(format!("stage {i}: rounding to {decimals} decimals")));
                }
                post.push(Box::new(Rounding { decimals: *decimals }));
            }
        }
    }
    Ok((reconstruct, post))
}

/// Applies post-inference stages in order.
pub fn apply_post(stages: &[Box<dyn PostStage>], p: PredictionVector) -> Result<PredictionVector> {
    stages.iter().try_fold(p, |acc, stage| {
        stage.apply(&acc).map_err(|e| Error::Config(format!("post stage {}: {e}", stage.name())))
    })
}

/// A full inference pipeline, usable as a [`Predictor`].
pub struct Cascade<'a> {
    model: &'a dyn Predictor,
    pre: Option<DefendedPredictor<'a>>,
    post: Vec<Box<dyn PostStage>>,
}

impl<'a> Cascade<'a> {
    /// Builds the pipeline from `stages`. At most one `Reconstruct` stage is
    /// allowed and it must come first; it needs `diffusion` and, outside
    /// Scenario 3, `interval`.
    pub fn build(
        stages: &[StageSpec],
        model: &'a dyn Predictor,
        diffusion: Option<&'a DiffusionModel>,
        defense: &DefenseConfig,
        interval: Option<SelectionInterval>,
    ) -> Result<Self> {
        let (reconstruct, post) = parse_stages(stages)?;
        let pre = if reconstruct {
            let dmodel =
                diffusion.ok_or_else(|| Error::Config("stage 0: reconstruction needs a diffusion model".into()))?;
            Some(DefendedPredictor::new(model, dmodel, defense.clone(), interval)?)
        } else {
            None
        };
        Ok(Self { model, pre, post })
    }

    pub fn from_parts(model: &'a dyn Predictor, pre: Option<DefendedPredictor<'a>>, post: Vec<Box<dyn PostStage>>) -> Self {
        Self { model, pre, post }
    }

    pub fn stage_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        if self.pre.is_some() {
            names.push("reconstruct".to_string());
        }
        names.extend(self.post.iter().map(|s| s.name().to_string()));
        names
    }

}

impl Predictor for Cascade<'_> {
    fn num_classes(&self) -> usize {
        self.model.num_classes()
    }

    fn input_shape(&self) -> ImageShape {
        self.model.input_shape()
    }

    fn predict(&self, images: &[&[f32]]) -> Result<Vec<PredictionVector>> {
        let raw = match &self.pre {
            Some(d) => d.predict(images)?,
            None => self.model.predict(images)?,
        };
        raw.into_iter().map(|p| apply_post(&self.post, p)).collect()
    }
}

/// A training-time defense: adjusts the classifier training setup before
/// the target model is trained.
pub trait TrainingPlugin {
    fn name(&self) -> &str;
    fn configure(&self, cfg: &mut ClassifierConfig);
}

/// Demo training-time plugin: stronger L2 regularization.
pub struct WeightDecayPlugin {
    pub weight_decay: f64,
}

impl TrainingPlugin for WeightDecayPlugin {
    fn name(&self) -> &str {
        "weight_decay"
    }

    fn configure(&self, cfg: &mut ClassifierConfig) {
        cfg.weight_decay = self.weight_decay;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Fixed(Vec<f64>);

    impl Predictor for Fixed {
        fn num_classes(&self) -> usize {
            self.0.len()
        }

        fn input_shape(&self) -> ImageShape {
            ImageShape::new(1, 1, 1)
        }

        fn predict(&self, images: &[&[f32]]) -> Result<Vec<PredictionVector>> {
            images.iter().map(|_| PredictionVector::from_probs(self.0.clone())).collect()
        }
    }

    #[test]
    fn rounding_to_two_decimals() {
        let p = PredictionVector::from_probs(vec![0.123456, 0.376544, 0.5]).unwrap();
        let r = Rounding { decimals: 2 }.rounded(&p);
        for v in &r {
            assert!(((v * 100.0).round() - v * 100.0).abs() < 1e-9);
        }
        assert_eq!(r, vec![0.12, 0.38, 0.5]);
        let out = Rounding { decimals: 2 }.apply(&p).unwrap();
        assert!((out.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(out.predicted_label(), 2);
    }

    #[test]
    fn post_only_pipeline() {
        let m = Fixed(vec![0.111, 0.889]);
        let cfg = DefenseConfig::default();
        let ident = Cascade::build(&[StageSpec::Identity], &m, None, &cfg, None).unwrap();
        let x = [0.5f32];
        assert_eq!(ident.predict(&[&x]).unwrap(), m.predict(&[&x]).unwrap());
        let rounded = Cascade::build(&[StageSpec::Identity, StageSpec::Rounding { decimals: 1 }], &m, None, &cfg, None)
            .unwrap();
        assert_eq!(rounded.predict(&[&x]).unwrap()[0].probs(), &[0.1, 0.9]);
        assert_eq!(rounded.stage_names(), vec!["identity", "rounding"]);
    }

    #[test]
    fn ill_typed_stages_are_rejected() {
        let m = Fixed(vec![0.5, 0.5]);
        let cfg = DefenseConfig::default();
        let late = [StageSpec::Identity, StageSpec::Reconstruct];
        assert!(matches!(Cascade::build(&late, &m, None, &cfg, None), Err(Error::Config(_))));
        assert!(matches!(Cascade::build(&[StageSpec::Reconstruct], &m, None, &cfg, None), Err(Error::Config(_))));
        let parsed: std::result::Result<StageSpec, _> = serde_json::from_str(r#"{"kind": "shuffle"}"#);
        assert!(parsed.is_err());
        let parsed: StageSpec = serde_json::from_str(r#"{"kind": "rounding", "decimals": 3}"#).unwrap();
        assert_eq!(parsed, StageSpec::Rounding { decimals: 3 });
    }

    #[test]
    fn weight_decay_plugin() {
        let mut cfg = ClassifierConfig::default();
        WeightDecayPlugin { weight_decay: 5e-4 }.configure(&mut cfg);
        assert_eq!(cfg.weight_decay, 5e-4);
    }
}
