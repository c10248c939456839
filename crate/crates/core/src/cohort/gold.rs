use serde::{Deserialize, Serialize};

use crate::record::PatientRecord;
use crate::report::{render_report, Confidence, Label};
use crate::rules::lexical::Status;
use crate::rules::BiomarkerThresholds;

use super::patient::{LEFT_HIPPOCAMPUS, RIGHT_HIPPOCAMPUS};

/// One annotated reasoning sentence with its supporting evidence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundingLink {
    pub patient_id: String,
    pub sentence: String,
    pub evidence_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_file: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GoldReport {
    pub text: String,
    pub links: Vec<GroundingLink>,
}

impl GoldReport {
    pub fn sentences(&self) -> Vec<String> {
        self.links.iter().map(|l| l.sentence.clone()).collect()
    }
}

pub fn qualifier(z: f64) -> &'static str {
    if z > -1.0 {
        "is intact"
    } else if z > -2.0 {
        "shows mild impairment"
    } else if z > -3.0 {
        "shows moderate impairment"
    } else {
        "shows severe impairment"
    }
}

pub fn conclusion_phrase(label: Label) -> &'static str {
    match label {
        Label::Cn => "cognitively normal",
        Label::Mci => "mild cognitive impairment",
        Label::Dementia => "dementia",
    }
}

/// Template report for `p` whose every sentence carries its evidence links.
pub fn render_gold_report(p: &PatientRecord, thresholds: &BiomarkerThresholds) -> GoldReport {
    let c = &p.cognition;
    let status = thresholds.statuses(&p.biomarkers);
    let word = |s: Status, abnormal: &'static str| match s {
        Status::Abnormal => abnormal,
        Status::Normal => "normal",
    };
    let atrophy = match p.gt_label {
        Label::Cn => "absent",
        Label::Mci => "mild",
        Label::Dementia => "moderate",
    };
    let genetic = if p.genetics.e4_count() > 0 { "elevated" } else { "low" };

    let mut rows: Vec<(String, Vec<&str>, Option<&str>)> = vec![
        ("Demographic profile is noted.".into(), vec!["age", "education"], None),
        (format!("Genetic risk is {genetic}."), vec!["apoe"], None),
        (format!("Memory performance {}.", qualifier(c.memory)), vec!["memory"], None),
        (format!("Executive function {}.", qualifier(c.executive)), vec!["executive"], None),
        (format!("Visuospatial ability {}.", qualifier(c.visuospatial)), vec!["visuospatial"], None),
        (format!("Language {}.", qualifier(c.language)), vec!["language"], None),
        (format!("Amyloid-beta is {}.", word(status[0], "abnormal")), vec!["abeta"], None),
        (format!("Total tau is {}.", word(status[1], "elevated")), vec!["ttau"], None),
        (format!("Phosphorylated tau is {}.", word(status[2], "abnormal")), vec!["ptau"], None),
    ];
    for (side, s) in [("Left", LEFT_HIPPOCAMPUS), ("Right", RIGHT_HIPPOCAMPUS)] {
        if p.evidence_index(s).is_some() {
            rows.push((format!("{side} medial temporal atrophy is {atrophy}."), vec![s], Some(s)));
        }
    }
    rows.push((
        format!(
            "Overall findings are consistent with {}.",
            conclusion_phrase(p.gt_label)
        ),
        vec!["memory", "abeta"],
        None,
    ));

    let links: Vec<GroundingLink> = rows
        .into_iter()
        .map(|(sentence, ids, structure)| GroundingLink {
            patient_id: p.id.clone(),
            sentence,
            evidence_ids: ids.into_iter().map(String::from).collect(),
            mask_file: structure.and_then(|s| p.mask_files.get(s).cloned()),
        })
        .collect();
    let sentences: Vec<String> = links.iter().map(|l| l.sentence.clone()).collect();
    let text = render_report(&sentences, p.gt_label.as_str(), Confidence::High.as_str());
    GoldReport { text, links }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{generate_patient, CohortConfig};
    use crate::report::parse_report;
    use crate::rules::{total_reward, LexicalScorer, RuleConfig};

    #[test]
    fn gold_reports_parse_cleanly_and_score_maximally() {
        let cfg = CohortConfig::default();
        let rules = RuleConfig::default();
        let scorer = LexicalScorer::default();
        for seed in 0..60 {
            let label = Label::ALL[seed as usize % 3];
            let p = generate_patient(&cfg, "p", seed, label).record;
            let gold = render_gold_report(&p, &cfg.thresholds);
            let parsed = parse_report(&gold.text);
            assert!(parsed.parse_diagnostics.is_empty(), "{:?}", parsed.parse_diagnostics);
            assert_eq!(parsed.render(), gold.text);
            assert_eq!(parsed.reasoning_sentences, gold.sentences());
            let b = total_reward(&parsed, &p, &rules, &scorer);
            assert!((b.total - rules.weights.sum()).abs() < 1e-9, "{label:?}: {b:?}\n{}", gold.text);
            for l in &gold.links {
                assert!(!l.evidence_ids.is_empty());
                for id in &l.evidence_ids {
                    assert!(p.evidence_index(id).is_some());
                }
            }
        }
    }
}
