use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::report::Label;

use super::config::Lexicons;
use super::lexical::{analyze, label_cue, Status};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Entailment {
    Contradiction,
    Neutral,
    Entailment,
}

impl Entailment {
    pub fn reward(self) -> f64 {
        match self {
            Entailment::Contradiction => 0.0,
            Entailment::Neutral => 0.5,
            Entailment::Entailment => 1.0,
        }
    }
}

/// Classifies whether `premise` supports `hypothesis`.
pub trait EntailmentScorer {
    fn classify(&self, premise: &str, hypothesis: &str) -> Entailment;

    /// Whether `classify` may run on several threads at once. Callers that
    /// fan out must go through [`SerializedScorer`] when this is false.
    fn concurrent_safe(&self) -> bool {
        true
    }
}

/// Wraps a scorer so that every call holds a lock.
pub struct SerializedScorer<S> {
    inner: Mutex<S>,
}

impl<S: EntailmentScorer> SerializedScorer<S> {
    pub fn new(inner: S) -> Self {
        Self {
            inner: Mutex::new(inner),
        }
    }
}

impl<S: EntailmentScorer> EntailmentScorer for SerializedScorer<S> {
    fn classify(&self, premise: &str, hypothesis: &str) -> Entailment {
        let guard = self.inner.lock().unwrap_or_else(|e| e.into_inner());
        guard.classify(premise, hypothesis)
    }
}

/// Deterministic scorer built from label cues, biomarker status cues and
/// cognitive qualifiers.
#[derive(Debug, Clone, Default)]
pub struct LexicalScorer {
    lex: Lexicons,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Implied {
    None,
    /// Findings pull in different directions.
    Mixed,
    /// Findings point at exactly this stage.
    Strong(usize),
    /// Partial evidence; the allowed stages are marked.
    Weak([bool; 3]),
}

impl LexicalScorer {
    pub fn new(lex: Lexicons) -> Self {
        Self { lex }
    }

    fn implied(&self, premise: &str) -> (Implied, Option<Label>) {
        let a = analyze(premise, &self.lex);
        let statuses = a.biomarker_statuses();
        let bio = if statuses.is_empty() {
            None
        } else {
            Some(statuses.contains(&Status::Abnormal))
        };
        let cog = a.cognition_severity.map(usize::from);
        let implied = match (bio, cog) {
            (Some(false), Some(0)) => Implied::Strong(0),
            (Some(true), Some(c)) if c >= 1 => Implied::Strong(c),
            (Some(_), Some(_)) => Implied::Mixed,
            (None, Some(c)) => {
                let mut set = [false; 3];
                set[c] = true;
                Implied::Weak(set)
            }
            (Some(true), None) => Implied::Weak([false, true, true]),
            (Some(false), None) => Implied::Weak([true, false, false]),
            (None, None) => Implied::None,
        };
        (implied, a.last_label)
    }
}

impl EntailmentScorer for LexicalScorer {
    fn classify(&self, premise: &str, hypothesis: &str) -> Entailment {
        let Some(target) = label_cue(hypothesis, &self.lex) else {
            return Entailment::Neutral;
        };
        let (implied, explicit) = self.implied(premise);
        if explicit.is_some_and(|e| e != target) {
            return Entailment::Contradiction;
        }
        let stated = explicit == Some(target);
        let x = target.stage();
        match implied {
            Implied::Strong(s) if s == x => Entailment::Entailment,
            Implied::Strong(_) => Entailment::Contradiction,
            Implied::Weak(set) if set[x] && stated => Entailment::Entailment,
            Implied::Weak(set) => {
                let nearest = (0..3).filter(|&s| set[s]).map(|s| s.abs_diff(x)).min();
                if nearest == Some(2) {
                    Entailment::Contradiction
                } else {
                    Entailment::Neutral
                }
            }
            Implied::None if stated => Entailment::Entailment,
            Implied::None | Implied::Mixed => Entailment::Neutral,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn classify(premise: &str, label: &str) -> Entailment {
        LexicalScorer::default().classify(premise, &format!("diagnosis is {label}"))
    }

    #[test]
    fn abnormal_biomarkers_and_impaired_memory_entail_dementia() {
        let p = "Amyloid-beta is abnormal. Total tau is elevated. Memory is impaired.";
        assert_eq!(classify(p, "Dementia"), Entailment::Entailment);
        assert_eq!(classify(p, "CN"), Entailment::Contradiction);
    }

    #[test]
    fn normal_findings_contradict_dementia() {
        let p = "All biomarkers are normal. Cognition is intact.";
        assert_eq!(classify(p, "Dementia"), Entailment::Contradiction);
        assert_eq!(classify(p, "CN"), Entailment::Entailment);
    }

    #[test]
    fn no_cues_is_neutral() {
        assert_eq!(classify("The patient attended the visit.", "MCI"), Entailment::Neutral);
    }

    #[test]
    fn explicit_conflicting_label_contradicts() {
        assert_eq!(
            classify("Findings indicate dementia.", "CN"),
            Entailment::Contradiction
        );
        assert_eq!(classify("Findings indicate dementia.", "Dementia"), Entailment::Entailment);
    }

    #[test]
    fn partial_evidence_is_weak() {
        assert_eq!(classify("Memory shows mild impairment.", "MCI"), Entailment::Neutral);
        assert_eq!(classify("Memory shows mild impairment.", "Dementia"), Entailment::Neutral);
        assert_eq!(classify("Memory is intact.", "Dementia"), Entailment::Contradiction);
    }

    #[test]
    fn serialized_wrapper_delegates() {
        let s = SerializedScorer::new(LexicalScorer::default());
        assert_eq!(
            s.classify("Findings indicate dementia.", "diagnosis is CN"),
            Entailment::Contradiction
        );
    }
}
