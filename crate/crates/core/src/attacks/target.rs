use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::classifier::{PredictionVector, Predictor};
use crate::data::ImageShape;
use crate::defense::{Cascade, DefendedPredictor, DefenseConfig, SelectionInterval, StageSpec};
use crate::diffusion::DiffusionModel;
use crate::{Error, Result};

/// Which pipeline an attack queries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetDescriptor {
    Undefended,
    Defended,
    Cascaded,
}

impl TargetDescriptor {
    pub fn id(self) -> &'static str {
        match self {
            TargetDescriptor::Undefended => "undefended",
            TargetDescriptor::Defended => "defended",
            TargetDescriptor::Cascaded => "cascaded",
        }
    }
}

impl fmt::Display for TargetDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for TargetDescriptor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "undefended" => Ok(TargetDescriptor::Undefended),
            "defended" => Ok(TargetDescriptor::Defended),
            "cascaded" => Ok(TargetDescriptor::Cascaded),
            other => Err(Error::Config(format!("unknown attack target '{other}'"))),
        }
    }
}

/// Everything needed to assemble any of the targets.
pub struct TargetParts<'a> {
    pub model: &'a dyn Predictor,
    pub diffusion: Option<&'a DiffusionModel>,
    pub defense: DefenseConfig,
    pub interval: Option<SelectionInterval>,
    /// Stage list for [`TargetDescriptor::Cascaded`].
    pub stages: Vec<StageSpec>,
}

struct Plain<'a>(&'a dyn Predictor);

impl Predictor for Plain<'_> {
    fn num_classes(&self) -> usize {
        self.0.num_classes()
    }

    fn input_shape(&self) -> ImageShape {
        self.0.input_shape()
    }

    fn predict(&self, images: &[&[f32]]) -> Result<Vec<PredictionVector>> {
        self.0.predict(images)
    }
}

/// Black-box query interface for the selected target.
pub fn attack_target<'a>(desc: TargetDescriptor, parts: &TargetParts<'a>) -> Result<Box<dyn Predictor + 'a>> {
    match desc {
        TargetDescriptor::Undefended => Ok(Box::new(Plain(parts.model))),
        TargetDescriptor::Defended => {
            let dmodel =
                parts.diffusion.ok_or_else(|| Error::Config("defended target needs a diffusion model".into()))?;
            Ok(Box::new(DefendedPredictor::new(parts.model, dmodel, parts.defense.clone(), parts.interval)?))
        }
        TargetDescriptor::Cascaded => Ok(Box::new(Cascade::build(
            &parts.stages,
            parts.model,
            parts.diffusion,
            &parts.defense,
            parts.interval,
        )?)),
    }
}
