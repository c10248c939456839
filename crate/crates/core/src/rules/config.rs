use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::report::Label;

/// Synthetic biomarker cut-offs shared with the cohort generator. These are
/// generator conventions, not clinical reference values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BiomarkerThresholds {
    pub abeta_abnormal_below: f64,
    pub ttau_abnormal_above: f64,
    pub ptau_abnormal_above: f64,
}

impl Default for BiomarkerThresholds {
    fn default() -> Self {
        Self {
            abeta_abnormal_below: 977.0,
            ttau_abnormal_above: 300.0,
            ptau_abnormal_above: 27.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardWeights {
    pub format: f64,
    pub nia: f64,
    pub consistency: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            format: 0.2,
            nia: 0.5,
            consistency: 0.3,
        }
    }
}

impl RewardWeights {
    pub fn sum(&self) -> f64 {
        self.format + self.nia + self.consistency
    }
}

/// Qualifier token with its severity (0 intact, 1 mild, 2 marked).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Qualifier {
    pub word: String,
    pub severity: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Lexicons {
    pub abeta: Vec<String>,
    pub ttau: Vec<String>,
    pub ptau: Vec<String>,
    /// Mentions that refer to all markers at once ("biomarkers").
    pub biomarkers_generic: Vec<String>,
    pub memory: Vec<String>,
    pub executive: Vec<String>,
    pub visuospatial: Vec<String>,
    pub language: Vec<String>,
    /// Mentions of cognition as a whole; used by the entailment scorer only.
    pub cognition_generic: Vec<String>,
    pub qualifiers: Vec<Qualifier>,
    pub status_abnormal: Vec<String>,
    pub status_normal: Vec<String>,
    /// Direction words; their meaning depends on the marker.
    pub direction_low: Vec<String>,
    pub direction_high: Vec<String>,
    pub negations: Vec<String>,
    pub negation_window: usize,
    pub label_cn: Vec<String>,
    pub label_mci: Vec<String>,
    pub label_dementia: Vec<String>,
}

fn words(ws: &[&str]) -> Vec<String> {
    ws.iter().map(|w| w.to_string()).collect()
}

impl Default for Lexicons {
    fn default() -> Self {
        let q = |w: &str, s| Qualifier {
            word: w.into(),
            severity: s,
        };
        Self {
            abeta: words(&["amyloid", "abeta", "aβ", "abeta42"]),
            ttau: words(&["total tau", "t tau", "ttau"]),
            ptau: words(&["phosphorylated tau", "p tau", "ptau", "ptau181"]),
            biomarkers_generic: words(&["biomarkers", "biomarker"]),
            memory: words(&["memory", "recall", "amnestic"]),
            executive: words(&["executive", "planning"]),
            visuospatial: words(&["visuospatial", "construction"]),
            language: words(&["language", "naming"]),
            cognition_generic: words(&["cognition", "cognitive"]),
            qualifiers: vec![
                q("intact", 0),
                q("normal", 0),
                q("mild", 1),
                q("moderate", 2),
                q("severe", 2),
                q("impaired", 2),
                q("declined", 2),
            ],
            status_abnormal: words(&["abnormal", "positive", "pathological"]),
            status_normal: words(&["normal", "unremarkable", "negative"]),
            direction_low: words(&["low", "reduced", "decreased"]),
            direction_high: words(&["elevated", "high", "increased"]),
            negations: words(&["not", "no", "without", "never"]),
            negation_window: 3,
            label_cn: words(&["cognitively normal", "normal cognition", "cn"]),
            label_mci: words(&["mild cognitive impairment", "mci"]),
            label_dementia: words(&["dementia", "alzheimer s disease", "ad"]),
        }
    }
}

impl Lexicons {
    pub fn label_cues(&self, label: Label) -> &[String] {
        match label {
            Label::Cn => &self.label_cn,
            Label::Mci => &self.label_mci,
            Label::Dementia => &self.label_dementia,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RuleConfig {
    pub thresholds: BiomarkerThresholds,
    pub weights: RewardWeights,
    pub lexicons: Lexicons,
}

impl Default for RuleConfig {
    fn default() -> Self {
        Self {
            thresholds: BiomarkerThresholds::default(),
            weights: RewardWeights::default(),
            lexicons: Lexicons::default(),
        }
    }
}

/// Fixed sub-weights of the clinical-validity reward (category, biomarker, feature).
pub const NIA_SUBWEIGHTS: [f64; 3] = [0.4, 0.3, 0.3];

impl RuleConfig {
    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        if [w.format, w.nia, w.consistency]
            .iter()
            .any(|v| !v.is_finite() || *v < 0.0)
        {
            return Err(Error::Config("reward weights must be finite and ≥ 0".into()));
        }
        let t = &self.thresholds;
        if [t.abeta_abnormal_below, t.ttau_abnormal_above, t.ptau_abnormal_above]
            .iter()
            .any(|v| !v.is_finite() || *v <= 0.0)
        {
            return Err(Error::Config("biomarker thresholds must be positive".into()));
        }
        Ok(())
    }

    /// Reads either a bare rule config or an object carrying it under `"rules"`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        let cfg: RuleConfig = match value.get("rules") {
            Some(inner) => serde_json::from_value(inner.clone())?,
            None => serde_json::from_value(value)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
