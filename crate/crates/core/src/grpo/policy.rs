use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cohort::{conclusion_phrase, qualifier};
use crate::error::{Error, Result};
use crate::numeric::{dot, read_tensor, softmax, write_tensor, Tensor};
use crate::optim::Parameterized;
use crate::record::PatientRecord;
use crate::report::{render_report, Label};
use crate::rules::BiomarkerThresholds;

/// A decision slot and its option names.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub name: &'static str,
    pub options: &'static [&'static str],
}

pub const DIAGNOSIS: usize = 0;
pub const CONFIDENCE: usize = 1;
pub const DOMAIN_SLOTS: [usize; 4] = [2, 3, 4, 5];
pub const MARKER_SLOTS: [usize; 3] = [6, 7, 8];
pub const CONCLUSION: usize = 9;

/// Index of the malformed option in the confidence slot.
pub const MALFORMED_CONFIDENCE: usize = 3;
pub const MALFORMED_CONFIDENCE_TEXT: &str = "Very likely";

const QUALIFIER_OPTIONS: &[&str] = &["omit", "intact", "mild", "moderate", "severe"];
const MARKER_OPTIONS: &[&str] = &["omit", "normal", "abnormal"];

pub const SLOTS: [Slot; 10] = [
    Slot { name: "diagnosis", options: &["CN", "MCI", "Dementia"] },
    Slot { name: "confidence", options: &["High", "Medium", "Low", "malformed"] },
    Slot { name: "memory", options: QUALIFIER_OPTIONS },
    Slot { name: "executive", options: QUALIFIER_OPTIONS },
    Slot { name: "visuospatial", options: QUALIFIER_OPTIONS },
    Slot { name: "language", options: QUALIFIER_OPTIONS },
    Slot { name: "abeta", options: MARKER_OPTIONS },
    Slot { name: "ttau", options: MARKER_OPTIONS },
    Slot { name: "ptau", options: MARKER_OPTIONS },
    Slot { name: "conclusion", options: &["omit", "consistent", "suggests"] },
];

const DOMAIN_SUBJECTS: [&str; 4] = ["Memory performance", "Executive function", "Visuospatial ability", "Language"];
const MARKER_SUBJECTS: [(&str, &str); 3] = [
    ("Amyloid-beta", "abnormal"),
    ("Total tau", "elevated"),
    ("Phosphorylated tau", "abnormal"),
];

/// Bias, four cognitive z-scores, three signed biomarker distances, APOE-e4 count.
pub const FEATURE_DIM: usize = 9;

pub fn slot_param_name(slot: usize) -> String {
    format!("slots.{}.weight", SLOTS[slot].name)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    /// Cut-offs the biomarker features are measured from.
    pub thresholds: BiomarkerThresholds,
    pub init_std: f64,
    pub seed: u64,
    /// Initial probability of the malformed confidence option; uniform when unset.
    pub malformed_confidence_rate: Option<f64>,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            thresholds: BiomarkerThresholds::default(),
            init_std: 0.0,
            seed: 3,
            malformed_confidence_rate: None,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.init_std >= 0.0) {
            return Err(Error::Config("init_std must be nonnegative".into()));
        }
        if let Some(r) = self.malformed_confidence_rate {
            if !(r > 0.0 && r < 1.0) {
                return Err(Error::Config("malformed_confidence_rate must lie in (0, 1)".into()));
            }
        }
        Ok(())
    }
}

/// Slot-factored categorical policy: slot `s` has logits `W_s·x` for patient features `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportPolicy {
    config: PolicyConfig,
    params: BTreeMap<String, Tensor>,
}

impl ReportPolicy {
    pub fn new(config: PolicyConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = BTreeMap::new();
        for (s, slot) in SLOTS.iter().enumerate() {
            let dims = [slot.options.len(), FEATURE_DIM];
            let w = if config.init_std > 0.0 {
                Tensor::randn(&dims, config.init_std, &mut rng)
            } else {
                Tensor::zeros(&dims)
            };
            params.insert(slot_param_name(s), w);
        }
        let mut policy = Self { config, params };
        if let Some(rate) = config.malformed_confidence_rate {
            policy.set_malformed_rate(rate);
        }
        Ok(policy)
    }

    /// Sets the bias column of the confidence slot so the malformed option has
    /// probability `rate` and the valid options share the rest evenly.
    fn set_malformed_rate(&mut self, rate: f64) {
        let n_valid = (SLOTS[CONFIDENCE].options.len() - 1) as f64;
        let bias = (rate * n_valid / (1.0 - rate)).ln();
        let w = self.params.get_mut(&slot_param_name(CONFIDENCE)).expect("confidence slot");
        for k in 0..SLOTS[CONFIDENCE].options.len() {
            w.data_mut()[k * FEATURE_DIM] = if k == MALFORMED_CONFIDENCE { bias } else { 0.0 };
        }
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn weight(&self, slot: usize) -> &Tensor {
        &self.params[&slot_param_name(slot)]
    }

    pub fn weight_mut(&mut self, slot: usize) -> &mut Tensor {
        self.params.get_mut(&slot_param_name(slot)).expect("slot weight")
    }

    pub fn features(&self, r: &PatientRecord) -> Vec<f64> {
        let t = &self.config.thresholds;
        let c = &r.cognition;
        let b = &r.biomarkers;
        vec![
            1.0,
            c.memory,
            c.executive,
            c.visuospatial,
            c.language,
            (t.abeta_abnormal_below - b.abeta) / 200.0,
            (b.ttau - t.ttau_abnormal_above) / 100.0,
            (b.ptau - t.ptau_abnormal_above) / 10.0,
            r.genetics.e4_count() as f64,
        ]
    }

    pub fn slot_logits(&self, slot: usize, x: &[f64]) -> Vec<f64> {
        self.weight(slot)
            .data()
            .chunks(FEATURE_DIM)
            .map(|row| dot(row, x))
            .collect()
    }

    /// Per-slot probability vectors.
    pub fn slot_probs(&self, x: &[f64]) -> Vec<Vec<f64>> {
        (0..SLOTS.len()).map(|s| softmax(&self.slot_logits(s, x), 1.0)).collect()
    }

    /// Sum of chosen-slot log-probabilities.
    pub fn log_prob(&self, x: &[f64], choices: &[usize]) -> f64 {
        self.slot_probs(x)
            .iter()
            .zip(choices)
            .map(|(p, &c)| p[c].ln())
            .sum()
    }

    pub fn sample<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Vec<usize> {
        self.slot_probs(x)
            .iter()
            .map(|p| {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (k, pk) in p.iter().enumerate() {
                    acc += pk;
                    if u < acc {
                        return k;
                    }
                }
                p.len() - 1
            })
            .collect()
    }

    pub fn greedy(&self, x: &[f64]) -> Vec<usize> {
        self.slot_probs(x)
            .iter()
            .map(|p| {
                p.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (k, &v)| if v > best.1 { (k, v) } else { best })
                    .0
            })
            .collect()
    }

    /// Mean over slots of `KL(self ‖ other)` at features `x`.
    pub fn kl_to(&self, other: &ReportPolicy, x: &[f64]) -> f64 {
        let p = self.slot_probs(x);
        let q = other.slot_probs(x);
        let total: f64 = p.iter().zip(&q).map(|(ps, qs)| categorical_kl(ps, qs)).sum();
        total / SLOTS.len() as f64
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("policy.json"), serde_json::to_string_pretty(&self.config)?)?;
        for (name, t) in &self.params {
            write_tensor(&dir.join(format!("{name}.emad")), t)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let sidecar = dir.join("policy.json");
        if !sidecar.exists() {
            return Err(Error::MissingCheckpoint(sidecar));
        }
        let config: PolicyConfig = serde_json::from_str(&fs::read_to_string(&sidecar)?)?;
        let mut policy = Self::new(config)?;
        for (name, t) in policy.params.iter_mut() {
            let loaded = read_tensor(&dir.join(format!("{name}.emad")))?;
            if loaded.dims() != t.dims() {
                return Err(Error::dims(t.dims(), loaded.dims()));
            }
            *t = loaded;
        }
        Ok(policy)
    }
}

impl Parameterized for ReportPolicy {
    fn parameters(&self) -> Vec<(String, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.clone(), v)).collect()
    }

    fn parameters_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.clone(), v)).collect()
    }
}

/// Exact `KL(p ‖ q)` of two categorical distributions.
pub fn categorical_kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi.ln() - qi.ln()))
        .sum::<f64>()
        .max(0.0)
}

fn qualifier_phrase(option: usize) -> Option<&'static str> {
    let z = match option {
        1 => 0.0,
        2 => -1.5,
        3 => -2.5,
        4 => -3.5,
        _ => return None,
    };
    Some(qualifier(z))
}

/// Report text for a slot tuple.
pub fn render_choices(choices: &[usize]) -> String {
    assert_eq!(choices.len(), SLOTS.len(), "one choice per slot");
    let label = Label::ALL[choices[DIAGNOSIS]];
    let mut sentences = vec!["Demographic profile is noted.".to_string()];
    for (subject, &s) in DOMAIN_SUBJECTS.iter().zip(&DOMAIN_SLOTS) {
        if let Some(q) = qualifier_phrase(choices[s]) {
            sentences.push(format!("{subject} {q}."));
        }
    }
    for ((subject, abnormal), &s) in MARKER_SUBJECTS.iter().zip(&MARKER_SLOTS) {
        match choices[s] {
            1 => sentences.push(format!("{subject} is normal.")),
            2 => sentences.push(format!("{subject} is {abnormal}.")),
            _ => {}
        }
    }
    match choices[CONCLUSION] {
        1 => sentences.push(format!("Overall findings are consistent with {}.", conclusion_phrase(label))),
        2 => sentences.push(format!("The clinical picture suggests {}.", conclusion_phrase(label))),
        _ => {}
    }
    let confidence = match choices[CONFIDENCE] {
        MALFORMED_CONFIDENCE => MALFORMED_CONFIDENCE_TEXT,
        k => SLOTS[CONFIDENCE].options[k],
    };
    render_report(&sentences, label.as_str(), confidence)
}
