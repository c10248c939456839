//! Grounding evaluation (sentence–evidence retrieval, mask overlap) and
//! report-level consistency tables.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cohort::Cohort;
use crate::error::{Error, Result};
use crate::report::parse_report;
use crate::rules::{total_reward, EntailmentScorer, RuleConfig};
use crate::metrics::{average_precision, mean, rank_ids, recall_at_k};
use crate::numeric::{dice_score, Tensor};
use crate::sea::{decode_mask, evidence_cosines, evidence_tokens, mask_examples, SegDecoder};
use crate::textenc::Embedder;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub r1: f64,
    pub r3: f64,
    pub map: f64,
    pub queries: usize,
}

/// Ranked evidence ids and gold sets for every gold sentence of the given
/// patients; candidates are the patient's own evidences.
pub fn rankings(
    emb: &Embedder,
    cohort: &Cohort,
    indices: &[usize],
) -> Result<(Vec<Vec<String>>, Vec<BTreeSet<String>>)> {
    let mut ranked = Vec::new();
    let mut golds = Vec::new();
    for &i in indices {
        let p = &cohort.patients[i].record;
        let ids: Vec<String> = p.evidence.iter().map(|e| e.id.clone()).collect();
        for link in &cohort.gold[i].links {
            let scores = evidence_cosines(&link.sentence, &p.evidence, emb)?;
            ranked.push(rank_ids(&ids, &scores));
            golds.push(link.evidence_ids.iter().cloned().collect());
        }
    }
    Ok((ranked, golds))
}

pub fn retrieval_metrics(ranked: &[Vec<String>], golds: &[BTreeSet<String>]) -> Result<RetrievalMetrics> {
    let mut r1 = Vec::with_capacity(ranked.len());
    let mut r3 = Vec::with_capacity(ranked.len());
    let mut ap = Vec::with_capacity(ranked.len());
    for (r, g) in ranked.iter().zip(golds) {
        r1.push(recall_at_k(r, g, 1)?);
        r3.push(recall_at_k(r, g, 3)?);
        ap.push(average_precision(r, g)?);
    }
    if ranked.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(RetrievalMetrics {
        r1: mean(&r1),
        r3: mean(&r3),
        map: mean(&ap),
        queries: ranked.len(),
    })
}

pub fn eval_retrieval(emb: &Embedder, cohort: &Cohort, indices: &[usize]) -> Result<RetrievalMetrics> {
    let (ranked, golds) = rankings(emb, cohort, indices)?;
    retrieval_metrics(&ranked, &golds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceMetrics {
    pub per_structure: BTreeMap<String, f64>,
    pub overall: f64,
}

fn binarize(m: &Tensor) -> Tensor {
    let mut b = m.clone();
    b.data_mut().iter_mut().for_each(|v| *v = if *v >= 0.5 { 1.0 } else { 0.0 });
    b
}

/// Dice of the 0.5-thresholded decoded mask against the ground truth, averaged
/// per structure and overall.
pub fn eval_dice(dec: &SegDecoder, emb: &Embedder, cohort: &Cohort, indices: &[usize]) -> Result<DiceMetrics> {
    let mut by: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for &i in indices {
        for ex in mask_examples(&cohort.patients[i], &cohort.gold[i]) {
            let tokens = evidence_tokens(emb, ex.descriptor)?;
            let pred = binarize(&decode_mask(dec, ex.volume, &tokens)?);
            by.entry(ex.structure.to_string())
                .or_default()
                .push(dice_score(&pred, ex.target)?);
        }
    }
    let all: Vec<f64> = by.values().flatten().copied().collect();
    Ok(DiceMetrics {
        per_structure: by.iter().map(|(k, v)| (k.clone(), mean(v))).collect(),
        overall: mean(&all),
    })
}

/// Chance MAP: each query's gold set is mapped through a random permutation of
/// its candidate ids, averaged over `rounds` shuffles.
pub fn permutation_baseline_map(
    ranked: &[Vec<String>],
    golds: &[BTreeSet<String>],
    rounds: usize,
    seed: u64,
) -> Result<f64> {
    if ranked.is_empty() || rounds == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut maps = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        let mut aps = Vec::with_capacity(ranked.len());
        for (r, g) in ranked.iter().zip(golds) {
            let mut shuffled = r.clone();
            shuffled.shuffle(&mut rng);
            let moved: BTreeSet<String> = r
                .iter()
                .zip(&shuffled)
                .filter(|(from, _)| g.contains(*from))
                .map(|(_, to)| to.clone())
                .collect();
            aps.push(average_precision(r, &moved)?);
        }
        maps.push(mean(&aps));
    }
    Ok(mean(&maps))
}

pub const NIA_CONSISTENT_AT: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyTable {
    pub accuracy: f64,
    pub valid_format: f64,
    pub nia_consistency: f64,
    pub entailment: f64,
    pub reports: usize,
}

/// Scores report texts keyed by patient id. Ids absent from the cohort are
/// skipped; an empty intersection yields zeros.
pub fn eval_consistency(
    reports: &BTreeMap<String, String>,
    cohort: &Cohort,
    rules: &RuleConfig,
    scorer: &dyn EntailmentScorer,
    nia_threshold: f64,
) -> ConsistencyTable {
    let (mut acc, mut fmt, mut nia, mut ent, mut n) = (0.0, 0.0, 0.0, 0.0, 0usize);
    for (id, text) in reports {
        let Some(p) = cohort.patient(id) else { continue };
        let parsed = parse_report(text);
        let b = total_reward(&parsed, &p.record, rules, scorer);
        n += 1;
        if parsed.diagnosis == Some(p.record.gt_label) {
            acc += 1.0;
        }
        fmt += b.r_format;
        if b.r_nia >= nia_threshold {
            nia += 1.0;
        }
        if b.r_consistency == 1.0 {
            ent += 1.0;
        }
    }
    let d = n.max(1) as f64;
    ConsistencyTable {
        accuracy: acc / d,
        valid_format: fmt / d,
        nia_consistency: nia / d,
        entailment: ent / d,
        reports: n,
    }
}

/// Gold report texts of the given patients.
pub fn gold_reports(cohort: &Cohort, indices: &[usize]) -> BTreeMap<String, String> {
    indices
        .iter()
        .map(|&i| (cohort.patients[i].record.id.clone(), cohort.gold[i].text.clone()))
        .collect()
}

/// Reads `<patient_id>.txt` files from `dir`.
pub fn read_report_dir(dir: &std::path::Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("txt") {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), std::fs::read_to_string(&path)?);
        }
    }
    Ok(out)
}
