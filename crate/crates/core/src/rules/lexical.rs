//! Cue-phrase analysis of reasoning text shared by the reward components and
//! the default entailment scorer.

use crate::report::{segment_sentences, Label};

use super::config::Lexicons;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Normal,
    Abnormal,
}

impl Status {
    fn flip(self) -> Self {
        match self {
            Status::Normal => Status::Abnormal,
            Status::Abnormal => Status::Normal,
        }
    }
}

pub const MARKERS: [&str; 3] = ["abeta", "ttau", "ptau"];
pub const DOMAINS: [&str; 4] = ["memory", "executive", "visuospatial", "language"];

const GENERIC: usize = 3;

/// What a block of reasoning text asserts, as far as the lexicons can tell.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReasoningAnalysis {
    pub marker_mentioned: [bool; 3],
    /// Last status stated for each marker by a marker-specific mention.
    pub marker_status: [Option<Status>; 3],
    /// Statuses stated through a generic "biomarkers" mention, in order.
    pub generic_status: Vec<Status>,
    /// Domain cue and qualifier token in the same sentence.
    pub domain_assessed: [bool; 4],
    /// Highest qualifier severity found in a sentence with a cognition cue.
    pub cognition_severity: Option<u8>,
    /// Last non-negated label cue.
    pub last_label: Option<Label>,
}

impl ReasoningAnalysis {
    pub fn biomarker_statuses(&self) -> Vec<Status> {
        self.marker_status
            .iter()
            .flatten()
            .copied()
            .chain(self.generic_status.iter().copied())
            .collect()
    }
}

pub fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Non-overlapping occurrences `(start, end)` of any cue phrase, scanning left
/// to right and preferring the longest cue at each position.
fn find_cues(tokens: &[String], cues: &[String]) -> Vec<(usize, usize)> {
    let phrases: Vec<Vec<String>> = cues.iter().map(|c| words(c)).filter(|p| !p.is_empty()).collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let best = phrases
            .iter()
            .filter(|p| tokens[i..].starts_with(p))
            .map(Vec::len)
            .max();
        match best {
            Some(n) => {
                out.push((i, i + n));
                i += n;
            }
            None => i += 1,
        }
    }
    out
}

fn contains_word(list: &[String], w: &str) -> bool {
    list.iter().any(|x| x == w)
}

struct Analyzer<'a> {
    lex: &'a Lexicons,
}

impl Analyzer<'_> {
    fn negated(&self, tokens: &[String], pos: usize) -> bool {
        let lo = pos.saturating_sub(self.lex.negation_window);
        tokens[lo..pos].iter().any(|t| contains_word(&self.lex.negations, t))
    }

    /// Status asserted by token `j` about `marker` (0..3 or generic).
    fn status_at(&self, tokens: &[String], j: usize, marker: usize) -> Option<Status> {
        let w = tokens[j].as_str();
        let lex = self.lex;
        let s = if contains_word(&lex.status_abnormal, w) {
            Status::Abnormal
        } else if contains_word(&lex.status_normal, w) {
            Status::Normal
        } else if contains_word(&lex.direction_low, w) {
            match marker {
                0 => Status::Abnormal,
                1 | 2 => Status::Normal,
                _ => return None,
            }
        } else if contains_word(&lex.direction_high, w) {
            match marker {
                0 => Status::Normal,
                1 | 2 => Status::Abnormal,
                _ => return None,
            }
        } else {
            return None;
        };
        Some(if self.negated(tokens, j) { s.flip() } else { s })
    }

    fn label_spans(&self, tokens: &[String]) -> Vec<(usize, usize, Label)> {
        let mut spans = Vec::new();
        for label in Label::ALL {
            for (a, b) in find_cues(tokens, self.lex.label_cues(label)) {
                spans.push((a, b, label));
            }
        }
        spans.sort_by_key(|&(a, b, _)| (a, std::cmp::Reverse(b)));
        let mut kept: Vec<(usize, usize, Label)> = Vec::new();
        for s in spans {
            if kept.last().is_none_or(|k| s.0 >= k.1) {
                kept.push(s);
            }
        }
        kept
    }

    fn sentence(&self, sentence: &str, out: &mut ReasoningAnalysis) {
        let mut tokens = words(sentence);
        if tokens.is_empty() {
            return;
        }
        // Label phrases are diagnoses, not findings: record them, then blank
        // them out so their words are not read as qualifiers or cues.
        for (a, b, label) in self.label_spans(&tokens) {
            if !self.negated(&tokens, a) {
                out.last_label = Some(label);
            }
            for t in &mut tokens[a..b] {
                t.clear();
            }
        }

        let lex = self.lex;
        let mut marks: Vec<(usize, usize, usize)> = Vec::new();
        let marker_lists = [&lex.abeta, &lex.ttau, &lex.ptau, &lex.biomarkers_generic];
        for (m, list) in marker_lists.iter().enumerate() {
            for (a, b) in find_cues(&tokens, list) {
                marks.push((a, b, m));
            }
        }
        marks.sort_unstable();
        for (i, &(a, b, m)) in marks.iter().enumerate() {
            if m < GENERIC {
                out.marker_mentioned[m] = true;
            }
            let next = marks.get(i + 1).map_or(tokens.len(), |n| n.0);
            let prev = if i == 0 { 0 } else { marks[i - 1].1 };
            let status = (b..next.max(b))
                .find_map(|j| self.status_at(&tokens, j, m))
                .or_else(|| (prev..a).rev().find_map(|j| self.status_at(&tokens, j, m)));
            if let Some(s) = status {
                if m < GENERIC {
                    out.marker_status[m] = Some(s);
                } else {
                    out.generic_status.push(s);
                }
            }
        }

        let severity = tokens
            .iter()
            .enumerate()
            .filter_map(|(j, t)| {
                let q = lex.qualifiers.iter().find(|q| &q.word == t)?;
                Some(match (self.negated(&tokens, j), q.severity) {
                    (false, s) => s,
                    (true, 0) => 2,
                    (true, _) => 0,
                })
            })
            .max();
        let domain_lists = [&lex.memory, &lex.executive, &lex.visuospatial, &lex.language];
        let mut cognition_cue = !find_cues(&tokens, &lex.cognition_generic).is_empty();
        for (d, list) in domain_lists.iter().enumerate() {
            if !find_cues(&tokens, list).is_empty() {
                cognition_cue = true;
                if severity.is_some() {
                    out.domain_assessed[d] = true;
                }
            }
        }
        if cognition_cue {
            if let Some(s) = severity {
                out.cognition_severity = Some(out.cognition_severity.map_or(s, |c| c.max(s)));
            }
        }
    }
}

pub fn analyze(reasoning: &str, lex: &Lexicons) -> ReasoningAnalysis {
    let analyzer = Analyzer { lex };
    let mut out = ReasoningAnalysis::default();
    for s in segment_sentences(reasoning) {
        analyzer.sentence(&s, &mut out);
    }
    out
}

/// Last non-negated label cue in `text`.
pub fn label_cue(text: &str, lex: &Lexicons) -> Option<Label> {
    analyze(text, lex).last_label
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(text: &str) -> ReasoningAnalysis {
        analyze(text, &Lexicons::default())
    }

    #[test]
    fn statuses_bind_to_nearest_marker() {
        let a = run("Amyloid-beta is low and total tau is elevated. Phosphorylated tau is not abnormal.");
        assert_eq!(a.marker_mentioned, [true, true, true]);
        assert_eq!(
            a.marker_status,
            [Some(Status::Abnormal), Some(Status::Abnormal), Some(Status::Normal)]
        );
    }

    #[test]
    fn generic_biomarker_mentions_do_not_count_as_markers() {
        let a = run("All biomarkers are normal.");
        assert_eq!(a.marker_mentioned, [false; 3]);
        assert_eq!(a.generic_status, vec![Status::Normal]);
    }

    #[test]
    fn label_phrases_are_not_findings() {
        let a = run("Overall findings are consistent with mild cognitive impairment.");
        assert_eq!(a.last_label, Some(Label::Mci));
        assert_eq!(a.cognition_severity, None);
    }

    #[test]
    fn negated_label_cue_is_ignored() {
        let a = run("Findings suggest dementia. There is no dementia.");
        assert_eq!(a.last_label, Some(Label::Dementia));
        let b = run("There is no dementia.");
        assert_eq!(b.last_label, None);
    }

    #[test]
    fn qualifier_severity() {
        assert_eq!(run("Memory is intact.").cognition_severity, Some(0));
        assert_eq!(run("Memory shows mild impairment.").cognition_severity, Some(1));
        assert_eq!(run("Memory is not impaired.").cognition_severity, Some(0));
        assert_eq!(run("Cognition is severe.").cognition_severity, Some(2));
        assert_eq!(run("Atrophy is mild.").cognition_severity, None);
    }
}
