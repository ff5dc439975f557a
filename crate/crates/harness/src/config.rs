//! Experiment configuration, read from a TOML file. Unknown keys are
//! rejected everywhere.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use diffguard::attacks::{MetricKind, NnAttackConfig, TargetDescriptor, MIN_ONLINE_SHADOWS};
use diffguard::classifier::ClassifierConfig;
use diffguard::data::{SplitCounts, SynthConfig};
use diffguard::defense::{DefenseConfig, StageSpec};
use diffguard::diffusion::DiffusionConfig;

/// Where the images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic(SynthConfig),
    /// A CIFAR-10 binary directory or a class-per-folder image tree.
    Path { path: PathBuf },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Correctness,
    Loss,
    Confidence,
    Entropy,
    Mentropy,
    Nn,
    LiraOnline,
    LiraOffline,
}

impl AttackKind {
    pub const METRIC: [AttackKind; 5] =
        [AttackKind::Correctness, AttackKind::Loss, AttackKind::Confidence, AttackKind::Entropy, AttackKind::Mentropy];

    /// Score-threshold attacks that read the released confidences.
    pub const THRESHOLD: [AttackKind; 4] =
        [AttackKind::Loss, AttackKind::Confidence, AttackKind::Entropy, AttackKind::Mentropy];

    pub fn id(self) -> &'static str {
        match self {
            AttackKind::Correctness => "correctness",
            AttackKind::Loss => "loss",
            AttackKind::Confidence => "confidence",
            AttackKind::Entropy => "entropy",
            AttackKind::Mentropy => "mentropy",
            AttackKind::Nn => "nn",
            AttackKind::LiraOnline => "lira_online",
            AttackKind::LiraOffline => "lira_offline",
        }
    }

    pub fn metric(self) -> Option<MetricKind> {
        match self {
            AttackKind::Correctness => Some(MetricKind::Correctness),
            AttackKind::Loss => Some(MetricKind::Loss),
            AttackKind::Confidence => Some(MetricKind::Confidence),
            AttackKind::Entropy => Some(MetricKind::Entropy),
            AttackKind::Mentropy => Some(MetricKind::Mentropy),
            _ => None,
        }
    }

    pub fn is_lira(self) -> bool {
        matches!(self, AttackKind::LiraOnline | AttackKind::LiraOffline)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LiraConfig {
    pub num_models: usize,
    /// Shadow training setup; defaults to the target's.
    #[serde(default)]
    pub classifier: Option<ClassifierConfig>,
}

impl Default for LiraConfig {
    fn default() -> Self {
        Self { num_models: 16, classifier: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(rename = "N")]
    pub n: Vec<usize>,
    #[serde(rename = "T")]
    pub t: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { n: vec![10, 50], t: vec![10, 40] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub splits: SplitCounts,
    pub classifier: ClassifierConfig,
    pub diffusion: DiffusionConfig,
    pub defense: DefenseConfig,
    pub attacks: Vec<AttackKind>,
    pub targets: Vec<TargetDescriptor>,
    /// Stage list of the `cascaded` target.
    #[serde(default)]
    pub stages: Vec<StageSpec>,
    /// Per-class thresholds for the metric attacks.
    #[serde(default)]
    pub per_class_thresholds: bool,
    #[serde(default)]
    pub nn_attack: NnAttackConfig,
    #[serde(default)]
    pub lira: LiraConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    /// Iteration cap of the keep-generating ablation.
    #[serde(default = "default_keep_generating")]
    pub keep_generating_iters: usize,
    /// Number of candidate intervals in the JS scan.
    #[serde(default = "default_scan")]
    pub scan_intervals: usize,
    /// Queries per target for latency measurement; 0 skips it.
    #[serde(default)]
    pub latency_queries: usize,
    pub output_dir: PathBuf,
    /// One full repetition per seed.
    pub seeds: Vec<u64>,
}

fn default_keep_generating() -> usize {
    20
}

fn default_scan() -> usize {
    12
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).context("parsing experiment config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.defense.validate()?;
        if self.seeds.is_empty() {
            bail!("at least one seed is required");
        }
        if self.attacks.is_empty() || self.targets.is_empty() {
            bail!("attacks and targets must be non-empty");
        }
        if self.targets.contains(&TargetDescriptor::Cascaded) && self.stages.is_empty() {
            bail!("the cascaded target needs a non-empty stage list");
        }
        if self.attacks.iter().any(|a| a.is_lira()) && self.lira.num_models < 2 {
            bail!("LiRA needs at least 2 shadow models");
        }
        if self.attacks.contains(&AttackKind::LiraOnline) && self.lira.num_models < MIN_ONLINE_SHADOWS {
            bail!("online LiRA needs at least {MIN_ONLINE_SHADOWS} shadow models");
        }
        if self.diffusion.t_max < self.defense.t || self.sweep.t.iter().any(|&t| t > self.diffusion.t_max) {
            bail!("diffusion steps exceed the schedule length {}", self.diffusion.t_max);
        }
        if self.sweep.n.is_empty() || self.sweep.t.is_empty() {
            bail!("sweep grid must be non-empty");
        }
        Ok(())
    }

    /// A small synthetic setup that overfits within a few minutes on one CPU.
    pub fn desk() -> Self {
        Self {
            dataset: DatasetSpec::Synthetic(SynthConfig { noise_std: 0.2, ..SynthConfig::new(10, 200, 8, 0) }),
            splits: SplitCounts::new(1000, 200, 200, 1000),
            classifier: ClassifierConfig { channels: vec![32, 32, 64, 64], epochs: 150, ..ClassifierConfig::default() },
            diffusion: DiffusionConfig { steps: 1500, ..DiffusionConfig::default() },
            defense: DefenseConfig::default(),
            attacks: AttackKind::THRESHOLD.to_vec(),
            targets: vec![TargetDescriptor::Undefended, TargetDescriptor::Defended],
            stages: vec![StageSpec::Reconstruct, StageSpec::Rounding { decimals: 2 }],
            per_class_thresholds: false,
            nn_attack: NnAttackConfig::default(),
            lira: LiraConfig::default(),
            sweep: SweepConfig::default(),
            keep_generating_iters: default_keep_generating(),
            scan_intervals: default_scan(),
            latency_queries: 0,
            output_dir: PathBuf::from("runs/desk"),
            seeds: vec![0, 1, 2],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_config_roundtrips() {
        let cfg = ExperimentConfig::desk();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = ExperimentConfig::desk().to_toml().unwrap();
        let typo = text.replacen("seeds =", "seedz =", 1);
        assert!(ExperimentConfig::from_toml(&typo).is_err());
        let nested = text.replacen("[classifier]", "[classifier]\nepoch = 3", 1);
        assert!(ExperimentConfig::from_toml(&nested).is_err());
    }

    #[test]
    fn cascaded_target_needs_stages() {
        let mut cfg = ExperimentConfig::desk();
        cfg.targets.push(TargetDescriptor::Cascaded);
        cfg.stages.clear();
        assert!(cfg.validate().is_err());
    }
}
