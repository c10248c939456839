//! Executable reward components for a parsed report against a patient record.

mod config;
pub mod lexical;
mod scorer;

use serde::{Deserialize, Serialize};

pub use config::{BiomarkerThresholds, Lexicons, Qualifier, RewardWeights, RuleConfig, NIA_SUBWEIGHTS};
pub use scorer::{Entailment, EntailmentScorer, LexicalScorer, SerializedScorer};

use crate::record::{Biomarkers, PatientRecord};
use crate::report::{format_reward, parse_report, ClinicalReport, Label};
use lexical::{analyze, Status};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_format: f64,
    pub r_cat: f64,
    pub r_bio: f64,
    pub r_feat: f64,
    pub r_nia: f64,
    pub r_consistency: f64,
    pub total: f64,
}

impl BiomarkerThresholds {
    /// Ground statuses of (abeta, ttau, ptau) under these cut-offs.
    pub fn statuses(&self, b: &Biomarkers) -> [Status; 3] {
        let s = |abnormal: bool| if abnormal { Status::Abnormal } else { Status::Normal };
        [
            s(b.abeta < self.abeta_abnormal_below),
            s(b.ttau > self.ttau_abnormal_above),
            s(b.ptau > self.ptau_abnormal_above),
        ]
    }
}

/// 1 when the last label cue in the reasoning agrees with the diagnosis (or
/// there is none), 0.5 when it names another label, 0 without a diagnosis.
pub fn category_alignment(r: &ClinicalReport, cfg: &RuleConfig) -> f64 {
    let Some(diag) = r.diagnosis else {
        return 0.0;
    };
    match analyze(&r.reasoning, &cfg.lexicons).last_label {
        Some(l) if l != diag => 0.5,
        _ => 1.0,
    }
}

/// Per marker: 1/6 for a mention plus 1/6 for a status matching the thresholds.
pub fn biomarker_consistency(r: &ClinicalReport, p: &PatientRecord, cfg: &RuleConfig) -> f64 {
    let a = analyze(&r.reasoning, &cfg.lexicons);
    let truth = cfg.thresholds.statuses(&p.biomarkers);
    (0..3)
        .map(|m| {
            let mention = if a.marker_mentioned[m] { 1.0 } else { 0.0 };
            let status = if a.marker_status[m] == Some(truth[m]) { 1.0 } else { 0.0 };
            (mention + status) / 6.0
        })
        .sum()
}

/// 1/4 per cognitive domain assessed with a qualifier.
pub fn feature_coverage(r: &ClinicalReport, cfg: &RuleConfig) -> f64 {
    let a = analyze(&r.reasoning, &cfg.lexicons);
    a.domain_assessed.iter().filter(|&&d| d).count() as f64 / 4.0
}

pub fn nia_weighted(r_cat: f64, r_bio: f64, r_feat: f64) -> f64 {
    NIA_SUBWEIGHTS[0] * r_cat + NIA_SUBWEIGHTS[1] * r_bio + NIA_SUBWEIGHTS[2] * r_feat
}

pub fn nia_aa_reward(r: &ClinicalReport, p: &PatientRecord, cfg: &RuleConfig) -> f64 {
    nia_weighted(
        category_alignment(r, cfg),
        biomarker_consistency(r, p, cfg),
        feature_coverage(r, cfg),
    )
}

pub fn diagnosis_hypothesis(label: Label) -> String {
    format!("diagnosis is {}", label.as_str())
}

/// Maps the scorer's verdict on (reasoning ⇒ diagnosis) to {0, 0.5, 1}; an
/// unparsed diagnosis scores 0.
pub fn consistency_reward(r: &ClinicalReport, scorer: &dyn EntailmentScorer) -> f64 {
    match r.diagnosis {
        None => 0.0,
        Some(label) => scorer
            .classify(&r.reasoning, &diagnosis_hypothesis(label))
            .reward(),
    }
}

pub fn total_reward(
    r: &ClinicalReport,
    p: &PatientRecord,
    cfg: &RuleConfig,
    scorer: &dyn EntailmentScorer,
) -> RewardBreakdown {
    let r_format = format_reward(r);
    let r_cat = category_alignment(r, cfg);
    let r_bio = biomarker_consistency(r, p, cfg);
    let r_feat = feature_coverage(r, cfg);
    let r_nia = nia_weighted(r_cat, r_bio, r_feat);
    let r_consistency = consistency_reward(r, scorer);
    let w = &cfg.weights;
    RewardBreakdown {
        r_format,
        r_cat,
        r_bio,
        r_feat,
        r_nia,
        r_consistency,
        total: w.format * r_format + w.nia * r_nia + w.consistency * r_consistency,
    }
}

/// Parses `text` and scores it.
pub fn score_text(
    text: &str,
    p: &PatientRecord,
    cfg: &RuleConfig,
    scorer: &dyn EntailmentScorer,
) -> RewardBreakdown {
    total_reward(&parse_report(text), p, cfg, scorer)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::record::*;
    use proptest::prelude::*;

    fn patient(abeta: f64, ttau: f64, ptau: f64) -> PatientRecord {
        PatientRecord {
            id: "p0".into(),
            demographics: Demographics {
                age: 72.0,
                sex: "F".into(),
                education_years: 14.0,
            },
            cognition: Cognition {
                memory: -1.5,
                executive: -0.5,
                visuospatial: 0.1,
                language: -0.2,
            },
            biomarkers: Biomarkers { abeta, ttau, ptau },
            genetics: Genetics { apoe: [3, 4] },
            history: History {
                family_history: false,
            },
            labs: Labs { b12: 400.0 },
            evidence: vec![],
            gt_label: Label::Mci,
            structures: vec![],
            mask_files: BTreeMap::new(),
        }
    }

    fn report(reasoning: &str, diag: &str) -> ClinicalReport {
        parse_report(&format!(
            "[Reasoning]\n{reasoning}\n[Diagnosis]\n{diag}\n[Confidence]\nHigh\n"
        ))
    }

    const MCI_REASONING: &str = "Memory shows mild impairment. Executive function is intact. \
        Visuospatial ability is intact. Language is intact. Amyloid-beta is abnormal. \
        Total tau is normal. Phosphorylated tau is abnormal. \
        Overall findings are consistent with mild cognitive impairment.";

    #[test]
    fn category_alignment_cases() {
        let cfg = RuleConfig::default();
        assert_eq!(category_alignment(&report(MCI_REASONING, "MCI"), &cfg), 1.0);
        let r = report("Memory is intact. Findings indicate dementia.", "CN");
        assert_eq!(category_alignment(&r, &cfg), 0.5);
        let r = report("Memory is intact.", "Unsure");
        assert_eq!(category_alignment(&r, &cfg), 0.0);
    }

    #[test]
    fn biomarker_credit() {
        let cfg = RuleConfig::default();
        let p = patient(700.0, 250.0, 35.0);
        assert!((biomarker_consistency(&report(MCI_REASONING, "MCI"), &p, &cfg) - 1.0).abs() < 1e-12);
        assert_eq!(biomarker_consistency(&report("Memory is intact.", "MCI"), &p, &cfg), 0.0);
        let r = report("Amyloid-beta is abnormal.", "MCI");
        assert!((biomarker_consistency(&r, &p, &cfg) - 1.0 / 3.0).abs() < 1e-12);
        let r = report("Amyloid-beta is normal.", "MCI");
        assert!((biomarker_consistency(&r, &p, &cfg) - 1.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn feature_credit() {
        let cfg = RuleConfig::default();
        assert_eq!(feature_coverage(&report(MCI_REASONING, "MCI"), &cfg), 1.0);
        assert_eq!(feature_coverage(&report("Memory is impaired.", "MCI"), &cfg), 0.25);
        assert_eq!(feature_coverage(&report("Memory was tested.", "MCI"), &cfg), 0.0);
    }

    #[test]
    fn nia_weighting() {
        assert_eq!(nia_weighted(1.0, 1.0, 1.0), 1.0);
        assert!((nia_weighted(1.0, 0.0, 0.0) - 0.4).abs() < 1e-15);
        // 0.4·0.5 + 0.3/3 + 0.3·0.25 = 0.2 + 0.1 + 0.075
        assert!((nia_weighted(0.5, 1.0 / 3.0, 0.25) - 0.375).abs() < 1e-12);
    }

    #[test]
    fn consistency_cases() {
        let s = LexicalScorer::default();
        let r = report("Amyloid-beta is abnormal. Memory is impaired.", "Dementia");
        assert_eq!(consistency_reward(&r, &s), 1.0);
        let r = report("All biomarkers are normal. Cognition is intact.", "Dementia");
        assert_eq!(consistency_reward(&r, &s), 0.0);
        let r = report("The visit was uneventful.", "MCI");
        assert_eq!(consistency_reward(&r, &s), 0.5);
        let r = report("Amyloid-beta is abnormal.", "Maybe");
        assert_eq!(consistency_reward(&r, &s), 0.0);
    }

    #[test]
    fn total_reward_cases() {
        let p = patient(700.0, 250.0, 35.0);
        let s = LexicalScorer::default();
        let cfg = RuleConfig::default();
        let b = total_reward(&report(MCI_REASONING, "MCI"), &p, &cfg, &s);
        assert!((b.total - cfg.weights.sum()).abs() < 1e-12);

        let b = score_text("", &p, &cfg, &s);
        assert_eq!(b.total, 0.0);

        let mut proj = cfg.clone();
        proj.weights = RewardWeights {
            format: 0.0,
            nia: 1.0,
            consistency: 0.0,
        };
        let r = report("Memory is impaired. Amyloid-beta is normal.", "CN");
        let b = total_reward(&r, &p, &proj, &s);
        assert_eq!(b.total, nia_aa_reward(&r, &p, &proj));
    }

    #[test]
    fn rules_json_round_trip() {
        let cfg = RuleConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: RuleConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        let partial: RuleConfig =
            serde_json::from_str(r#"{"weights": {"format": 1.0, "nia": 0.0, "consistency": 0.0}}"#).unwrap();
        assert_eq!(partial.thresholds, BiomarkerThresholds::default());
        assert_eq!(partial.weights.format, 1.0);
        let mut bad = cfg;
        bad.weights.nia = -1.0;
        assert!(bad.validate().is_err());
    }

    const SENTENCES: [&str; 10] = [
        "Memory shows mild impairment.",
        "Executive function is intact.",
        "Amyloid-beta is abnormal.",
        "Total tau is normal.",
        "Phosphorylated tau is elevated.",
        "Findings indicate dementia.",
        "Language is severe.",
        "The patient is cooperative.",
        "Biomarkers are not abnormal.",
        "Overall findings are consistent with cognitively normal.",
    ];

    fn arb_reasoning() -> impl Strategy<Value = String> {
        prop::collection::vec(0..SENTENCES.len(), 0..8)
            .prop_map(|idx| idx.iter().map(|&i| SENTENCES[i]).collect::<Vec<_>>().join(" "))
    }

    proptest! {
        #[test]
        fn components_bounded_and_weights_scale(
            reasoning in arb_reasoning(),
            diag in prop::sample::select(vec!["CN", "MCI", "Dementia", "Other"]),
            wf in 0.0f64..2.0, wn in 0.0f64..2.0, wc in 0.0f64..2.0,
        ) {
            let p = patient(700.0, 250.0, 35.0);
            let s = LexicalScorer::default();
            let mut cfg = RuleConfig::default();
            cfg.weights = RewardWeights { format: wf, nia: wn, consistency: wc };
            let r = report(&reasoning, diag);
            let b = total_reward(&r, &p, &cfg, &s);
            for v in [b.r_format, b.r_cat, b.r_bio, b.r_feat, b.r_nia, b.r_consistency] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            prop_assert!(b.total >= 0.0 && b.total <= cfg.weights.sum() + 1e-12);
            prop_assert!((b.r_nia - (0.4 * b.r_cat + 0.3 * b.r_bio + 0.3 * b.r_feat)).abs() < 1e-12);

            let mut doubled = cfg.clone();
            doubled.weights = RewardWeights { format: 2.0 * wf, nia: 2.0 * wn, consistency: 2.0 * wc };
            let d = total_reward(&r, &p, &doubled, &s);
            prop_assert!((d.total - 2.0 * b.total).abs() < 1e-12);
            prop_assert_eq!(d.r_nia, b.r_nia);
            prop_assert_eq!(total_reward(&r, &p, &cfg, &s), b);
        }

        #[test]
        fn correct_additions_never_lower_credit(reasoning in arb_reasoning(), pos in 0usize..8) {
            let p = patient(700.0, 250.0, 35.0);
            let cfg = RuleConfig::default();
            let base = report(&reasoning, "MCI");
            let mut sentences = crate::report::segment_sentences(&reasoning);
            let at = pos.min(sentences.len());
            sentences.insert(at, "Amyloid-beta is abnormal.".into());
            let with_bio = report(&sentences.join(" "), "MCI");
            prop_assert!(biomarker_consistency(&with_bio, &p, &cfg) >= biomarker_consistency(&base, &p, &cfg));

            let mut sentences = crate::report::segment_sentences(&reasoning);
            sentences.insert(at, "Visuospatial ability is intact.".into());
            let with_feat = report(&sentences.join(" "), "MCI");
            prop_assert!(feature_coverage(&with_feat, &cfg) >= feature_coverage(&base, &cfg));
        }
    }
}
