//! Run configuration shared by every CLI subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cohort::CohortConfig;
use crate::distill::{DistillConfig, LabelEfficiencyConfig};
use crate::error::{Error, Result};
use crate::eval::NIA_CONSISTENT_AT;
use crate::grpo::{PolicyConfig, RftConfig};
use crate::pretrain::PretrainConfig;
use crate::rules::RuleConfig;
use crate::sea::SeaConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Cohort directory; `<outputs>/cohort` when unset.
    pub cohort: Option<PathBuf>,
    /// Checkpoint directory; `<outputs>/checkpoints` when unset.
    pub checkpoints: Option<PathBuf>,
    pub outputs: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            cohort: None,
            checkpoints: None,
            outputs: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelEfficiencySettings {
    pub fractions: Vec<f64>,
    pub sea: SeaConfig,
    pub distill: DistillConfig,
}

impl Default for LabelEfficiencySettings {
    fn default() -> Self {
        let base = LabelEfficiencyConfig::default();
        Self {
            fractions: vec![1.0, 0.5, 0.25],
            sea: base.sea,
            distill: base.distill,
        }
    }
}

impl LabelEfficiencySettings {
    pub fn experiment(&self) -> LabelEfficiencyConfig {
        LabelEfficiencyConfig {
            sea: self.sea,
            distill: self.distill,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    /// `r_nia` at or above which a report counts as guideline-consistent.
    pub nia_threshold: f64,
    /// Shuffles averaged into the chance-level MAP.
    pub chance_rounds: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            nia_threshold: NIA_CONSISTENT_AT,
            chance_rounds: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckSettings {
    pub seeds: usize,
    pub base_seed: u64,
}

impl Default for GradcheckSettings {
    fn default() -> Self {
        Self {
            seeds: 50,
            base_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// When set, every module seed is derived from it.
    pub seed: Option<u64>,
    pub paths: Paths,
    pub cohort: CohortConfig,
    pub rules: RuleConfig,
    pub sea: SeaConfig,
    pub distill: DistillConfig,
    pub label_efficiency: LabelEfficiencySettings,
    pub policy: PolicyConfig,
    pub grpo: RftConfig,
    pub pretrain: PretrainConfig,
    pub eval: EvalSettings,
    pub gradcheck: GradcheckSettings,
}

impl RunConfig {
    /// Reads a bare config or a `run.json` carrying one under `"config"`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        let inner = match value.get("config") {
            Some(c) if value.get("command").is_some() => c.clone(),
            _ => value,
        };
        let cfg: RunConfig = serde_json::from_value(inner)?;
        Ok(cfg.resolved())
    }

    /// Module seeds are `seed + k` for a fixed per-module offset `k`.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        let at = |k: u64| seed.wrapping_add(k);
        self.cohort.seed = seed;
        self.sea.seed = at(1);
        self.sea.decoder.seed = at(2);
        self.distill.seed = at(3);
        self.label_efficiency.sea.seed = at(1);
        self.label_efficiency.sea.decoder.seed = at(2);
        self.label_efficiency.distill.seed = at(3);
        self.policy.seed = at(4);
        self.grpo.seed = at(5);
        self.pretrain.seed = at(6);
        self.gradcheck.base_seed = seed;
    }

    /// Applies the global seed, if any, to the module seeds.
    pub fn resolved(mut self) -> Self {
        if let Some(s) = self.seed {
            self.apply_seed(s);
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.cohort.validate()?;
        self.rules.validate()?;
        self.sea.validate()?;
        self.distill.validate()?;
        self.label_efficiency.sea.validate()?;
        self.label_efficiency.distill.validate()?;
        self.policy.validate()?;
        self.grpo.validate()?;
        self.pretrain.validate()?;
        let fr = &self.label_efficiency.fractions;
        if fr.is_empty() || fr.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return Err(Error::Config("label_efficiency.fractions must be nonempty and lie in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.eval.nia_threshold) {
            return Err(Error::Config("eval.nia_threshold must lie in [0, 1]".into()));
        }
        if self.eval.chance_rounds == 0 || self.gradcheck.seeds == 0 {
            return Err(Error::Config("eval.chance_rounds and gradcheck.seeds must be positive".into()));
        }
        if self.policy.thresholds != self.rules.thresholds {
            return Err(Error::Config("policy.thresholds must equal rules.thresholds".into()));
        }
        Ok(())
    }

    pub fn outputs(&self) -> &Path {
        &self.paths.outputs
    }

    pub fn cohort_dir(&self) -> PathBuf {
        self.paths.cohort.clone().unwrap_or_else(|| self.paths.outputs.join("cohort"))
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.paths
            .checkpoints
            .clone()
            .unwrap_or_else(|| self.paths.outputs.join("checkpoints"))
    }

    /// Fails with `MissingCheckpoint` unless `path` exists.
    pub fn require(path: &Path) -> Result<()> {
        if path.exists() {
            Ok(())
        } else {
            Err(Error::MissingCheckpoint(path.to_path_buf()))
        }
    }
}
