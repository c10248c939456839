//! Structured diagnostic report grammar.
//!
//! A report is a sequence of sections, each introduced by a bracketed header
//! on its own line: `[Reasoning]`, `[Diagnosis]`, `[Confidence]`. Headers are
//! case-insensitive, may appear in any order, and the first occurrence wins.
//! Parsing never fails; problems surface as `Unparsed` fields plus
//! diagnostics.

use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "CN")]
    Cn,
    #[serde(rename = "MCI")]
    Mci,
    Dementia,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Cn, Label::Mci, Label::Dementia];

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Cn => "CN",
            Label::Mci => "MCI",
            Label::Dementia => "Dementia",
        }
    }

    /// Disease stage ordinal: CN 0, MCI 1, Dementia 2.
    pub fn stage(self) -> usize {
        self as usize
    }

    pub fn from_stage(stage: usize) -> Option<Label> {
        Label::ALL.get(stage).copied()
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Confidence {
    High,
    Medium,
    Low,
}

impl Confidence {
    pub const ALL: [Confidence; 3] = [Confidence::High, Confidence::Medium, Confidence::Low];

    pub fn as_str(self) -> &'static str {
        match self {
            Confidence::High => "High",
            Confidence::Medium => "Medium",
            Confidence::Low => "Low",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DiagnosticKind {
    MissingSection,
    DuplicateSection,
    UnknownSection,
    EmptySection,
    StrayText,
    InvalidValue,
    Normalized,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseDiagnostic {
    pub kind: DiagnosticKind,
    pub section: Option<String>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClinicalReport {
    pub raw_text: String,
    pub reasoning: String,
    pub reasoning_sentences: Vec<String>,
    /// `None` when the section is absent or malformed.
    pub diagnosis: Option<Label>,
    pub confidence: Option<Confidence>,
    pub parse_diagnostics: Vec<ParseDiagnostic>,
}

impl ClinicalReport {
    /// Canonical text form of the parsed fields.
    pub fn render(&self) -> String {
        render_report(
            &self.reasoning_sentences,
            self.diagnosis.map_or("", Label::as_str),
            self.confidence.map_or("", Confidence::as_str),
        )
    }
}

pub fn render_report(sentences: &[String], diagnosis: &str, confidence: &str) -> String {
    format!(
        "[Reasoning]\n{}\n[Diagnosis]\n{}\n[Confidence]\n{}\n",
        sentences.join(" "),
        diagnosis,
        confidence
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Section {
    Reasoning,
    Diagnosis,
    Confidence,
}

impl Section {
    fn name(self) -> &'static str {
        match self {
            Section::Reasoning => "Reasoning",
            Section::Diagnosis => "Diagnosis",
            Section::Confidence => "Confidence",
        }
    }
}

/// Bracketed header name if `line` is a header line.
fn header_name(line: &str) -> Option<&str> {
    let t = line.trim();
    let inner = t.strip_prefix('[')?.strip_suffix(']')?;
    if inner.contains(['[', ']']) {
        return None;
    }
    Some(inner.trim())
}

fn known_section(name: &str) -> Option<Section> {
    match name.to_ascii_lowercase().as_str() {
        "reasoning" => Some(Section::Reasoning),
        "diagnosis" => Some(Section::Diagnosis),
        "confidence" => Some(Section::Confidence),
        _ => None,
    }
}

fn collapse_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn parse_report(text: &str) -> ClinicalReport {
    let mut diags = Vec::new();
    let mut bodies: [Option<Vec<&str>>; 3] = [None, None, None];
    // Index into `bodies` of the section currently collecting lines.
    let mut current: Option<usize> = None;
    let mut stray = false;

    for line in text.lines() {
        if let Some(name) = header_name(line) {
            match known_section(name) {
                Some(sec) => {
                    let idx = sec as usize;
                    if bodies[idx].is_some() {
                        diags.push(ParseDiagnostic {
                            kind: DiagnosticKind::DuplicateSection,
                            section: Some(sec.name().into()),
                            message: "repeated section ignored; first occurrence wins".into(),
                        });
                        current = None;
                    } else {
                        bodies[idx] = Some(Vec::new());
                        current = Some(idx);
                    }
                }
                None => {
                    diags.push(ParseDiagnostic {
                        kind: DiagnosticKind::UnknownSection,
                        section: Some(name.to_string()),
                        message: format!("unknown section [{name}] ignored"),
                    });
                    current = None;
                }
            }
            continue;
        }
        match current {
            Some(idx) => bodies[idx].as_mut().expect("open section").push(line),
            None if !line.trim().is_empty() && bodies.iter().all(Option::is_none) => stray = true,
            None => {}
        }
    }
    if stray {
        diags.push(ParseDiagnostic {
            kind: DiagnosticKind::StrayText,
            section: None,
            message: "text before the first section header".into(),
        });
    }

    let [reasoning_body, diagnosis_body, confidence_body] = bodies;

    let reasoning = match reasoning_body {
        Some(lines) => {
            let r = collapse_whitespace(&lines.join("\n"));
            if r.is_empty() {
                diags.push(empty_section(Section::Reasoning));
            }
            r
        }
        None => {
            diags.push(missing_section(Section::Reasoning));
            String::new()
        }
    };
    let reasoning_sentences = segment_sentences(&reasoning);

    let diagnosis = diagnosis_body.and_then(|lines| {
        let value = collapse_whitespace(&lines.join("\n"));
        parse_label(&value, &mut diags)
    });
    if diagnosis.is_none() && !diags.iter().any(|d| {
        d.section.as_deref() == Some("Diagnosis")
            && matches!(d.kind, DiagnosticKind::InvalidValue | DiagnosticKind::EmptySection)
    }) {
        diags.push(missing_section(Section::Diagnosis));
    }

    let confidence = confidence_body.and_then(|lines| {
        let value = collapse_whitespace(&lines.join("\n"));
        parse_confidence(&value, &mut diags)
    });
    if confidence.is_none() && !diags.iter().any(|d| {
        d.section.as_deref() == Some("Confidence")
            && matches!(d.kind, DiagnosticKind::InvalidValue | DiagnosticKind::EmptySection)
    }) {
        diags.push(missing_section(Section::Confidence));
    }

    ClinicalReport {
        raw_text: text.to_string(),
        reasoning,
        reasoning_sentences,
        diagnosis,
        confidence,
        parse_diagnostics: diags,
    }
}

fn missing_section(sec: Section) -> ParseDiagnostic {
    ParseDiagnostic {
        kind: DiagnosticKind::MissingSection,
        section: Some(sec.name().into()),
        message: format!("section [{}] not found", sec.name()),
    }
}

fn empty_section(sec: Section) -> ParseDiagnostic {
    ParseDiagnostic {
        kind: DiagnosticKind::EmptySection,
        section: Some(sec.name().into()),
        message: format!("section [{}] is empty", sec.name()),
    }
}

fn strip_terminal_period(v: &str) -> &str {
    v.strip_suffix('.').unwrap_or(v).trim_end()
}

fn parse_label(value: &str, diags: &mut Vec<ParseDiagnostic>) -> Option<Label> {
    if value.is_empty() {
        diags.push(empty_section(Section::Diagnosis));
        return None;
    }
    let v = strip_terminal_period(value);
    let folded = v.to_lowercase().replace('\u{2019}', "'");
    let (label, synonym) = match folded.as_str() {
        "cn" => (Label::Cn, false),
        "mci" => (Label::Mci, false),
        "dementia" => (Label::Dementia, false),
        "ad" | "alzheimer's disease" | "alzheimers disease" => (Label::Dementia, true),
        _ => {
            diags.push(ParseDiagnostic {
                kind: DiagnosticKind::InvalidValue,
                section: Some("Diagnosis".into()),
                message: format!("unrecognized diagnosis {value:?}"),
            });
            return None;
        }
    };
    if synonym || v != label.as_str() {
        diags.push(ParseDiagnostic {
            kind: DiagnosticKind::Normalized,
            section: Some("Diagnosis".into()),
            message: format!("{value:?} normalized to {label}"),
        });
    }
    Some(label)
}

fn parse_confidence(value: &str, diags: &mut Vec<ParseDiagnostic>) -> Option<Confidence> {
    if value.is_empty() {
        diags.push(empty_section(Section::Confidence));
        return None;
    }
    let v = strip_terminal_period(value);
    let c = match v.to_lowercase().as_str() {
        "high" => Confidence::High,
        "medium" => Confidence::Medium,
        "low" => Confidence::Low,
        _ => {
            diags.push(ParseDiagnostic {
                kind: DiagnosticKind::InvalidValue,
                section: Some("Confidence".into()),
                message: format!("confidence {value:?} not in High/Medium/Low"),
            });
            return None;
        }
    };
    if v != c.as_str() {
        diags.push(ParseDiagnostic {
            kind: DiagnosticKind::Normalized,
            section: Some("Confidence".into()),
            message: format!("{value:?} normalized to {}", c.as_str()),
        });
    }
    Some(c)
}

const ABBREVIATIONS: [&str; 5] = ["e.g.", "i.e.", "vs.", "mm.", "dr."];

/// Splits on `.`, `!` or `?` followed by whitespace or end of text, keeping
/// the terminator. Known abbreviations never end a sentence.
pub fn segment_sentences(reasoning: &str) -> Vec<String> {
    let text = collapse_whitespace(reasoning);
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut start = 0;
    for i in 0..chars.len() {
        let c = chars[i];
        if !matches!(c, '.' | '!' | '?') {
            continue;
        }
        let at_boundary = chars.get(i + 1).is_none_or(|n| n.is_whitespace());
        if !at_boundary {
            continue;
        }
        if c == '.' {
            let word_start = chars[..i]
                .iter()
                .rposition(|ch| ch.is_whitespace())
                .map_or(0, |p| p + 1);
            let word: String = chars[word_start..=i].iter().collect::<String>().to_lowercase();
            if ABBREVIATIONS.contains(&word.as_str()) {
                continue;
            }
        }
        push_segment(&chars[start..=i], &mut out);
        start = i + 1;
    }
    if start < chars.len() {
        push_segment(&chars[start..], &mut out);
    }
    out
}

fn push_segment(chars: &[char], out: &mut Vec<String>) {
    let s: String = chars.iter().collect();
    let s = s.trim();
    if !s.is_empty() {
        out.push(s.to_string());
    }
}

/// 1 iff the reasoning is nonempty and both diagnosis and confidence parsed.
pub fn format_reward(r: &ClinicalReport) -> f64 {
    let ok = !r.reasoning.trim().is_empty() && r.diagnosis.is_some() && r.confidence.is_some();
    if ok {
        1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const WELL_FORMED: &str = "[Reasoning]\nMemory is impaired. Amyloid-beta is abnormal.\n[Diagnosis]\nMCI\n[Confidence]\nHigh\n";

    #[test]
    fn well_formed_report_parses_cleanly() {
        let r = parse_report(WELL_FORMED);
        assert_eq!(r.diagnosis, Some(Label::Mci));
        assert_eq!(r.confidence, Some(Confidence::High));
        assert_eq!(
            r.reasoning_sentences,
            vec!["Memory is impaired.", "Amyloid-beta is abnormal."]
        );
        assert!(r.parse_diagnostics.is_empty(), "{:?}", r.parse_diagnostics);
        assert_eq!(format_reward(&r), 1.0);
    }

    #[test]
    fn missing_confidence_is_reported_once() {
        let r = parse_report("[Reasoning]\nA.\n[Diagnosis]\nCN\n");
        assert_eq!(r.confidence, None);
        assert_eq!(r.parse_diagnostics.len(), 1);
        assert_eq!(r.parse_diagnostics[0].kind, DiagnosticKind::MissingSection);
        assert_eq!(format_reward(&r), 0.0);
    }

    #[test]
    fn lowercase_and_synonym_labels_normalize() {
        let r = parse_report("[Reasoning]\nA.\n[Diagnosis]\ndementia\n[Confidence]\nLow\n");
        assert_eq!(r.diagnosis, Some(Label::Dementia));
        assert_eq!(r.parse_diagnostics.len(), 1);
        assert_eq!(r.parse_diagnostics[0].kind, DiagnosticKind::Normalized);
        for syn in ["AD", "Alzheimer's disease"] {
            let r = parse_report(&format!("[Diagnosis]\n{syn}\n"));
            assert_eq!(r.diagnosis, Some(Label::Dementia));
            assert!(r
                .parse_diagnostics
                .iter()
                .any(|d| d.kind == DiagnosticKind::Normalized));
        }
    }

    #[test]
    fn headers_any_order_case_insensitive_first_wins() {
        let r = parse_report(
            "[confidence]\nmedium\n[DIAGNOSIS]\nCN\n[Reasoning]\nFirst.\n[Reasoning]\nSecond.\n[Extra]\nx\n",
        );
        assert_eq!(r.reasoning, "First.");
        assert_eq!(r.diagnosis, Some(Label::Cn));
        assert_eq!(r.confidence, Some(Confidence::Medium));
        let kinds: Vec<_> = r.parse_diagnostics.iter().map(|d| d.kind).collect();
        assert!(kinds.contains(&DiagnosticKind::DuplicateSection));
        assert!(kinds.contains(&DiagnosticKind::UnknownSection));
    }

    #[test]
    fn format_reward_cases() {
        let bad_conf = parse_report("[Reasoning]\nA.\n[Diagnosis]\nCN\n[Confidence]\nCertain\n");
        assert_eq!(format_reward(&bad_conf), 0.0);
        let empty = parse_report("[Reasoning]\n\n[Diagnosis]\nCN\n[Confidence]\nHigh\n");
        assert_eq!(format_reward(&empty), 0.0);
        assert_eq!(format_reward(&parse_report("")), 0.0);
    }

    #[test]
    fn segmentation_examples() {
        assert_eq!(segment_sentences("A. B."), vec!["A.", "B."]);
        assert_eq!(
            segment_sentences("e.g. atrophy is mild."),
            vec!["e.g. atrophy is mild."]
        );
        assert_eq!(
            segment_sentences("Seen by Dr. Smith vs. baseline! Stable? yes"),
            vec!["Seen by Dr. Smith vs. baseline!", "Stable?", "yes"]
        );
        assert_eq!(segment_sentences("3.5 mm. wide. Next"), vec!["3.5 mm. wide.", "Next"]);
        assert!(segment_sentences("   ").is_empty());
    }

    proptest! {
        #[test]
        fn segmentation_is_lossless_up_to_whitespace(text in "[a-zA-Z.!? \n]{0,80}") {
            let segs = segment_sentences(&text);
            prop_assert_eq!(segs.join(" "), collapse_whitespace(&text));
        }

        #[test]
        fn parser_is_total_and_render_is_a_fixed_point(text in "(\\[?[A-Za-z]{0,10}\\]?\n?[ a-zA-Z.]{0,20}\n){0,6}") {
            let r = parse_report(&text);
            let again = parse_report(&r.render());
            prop_assert_eq!(&again.reasoning_sentences, &r.reasoning_sentences);
            prop_assert_eq!(again.diagnosis, r.diagnosis);
            prop_assert_eq!(again.confidence, r.confidence);
            let f = format_reward(&r);
            prop_assert!(f == 0.0 || f == 1.0);
        }
    }
}
