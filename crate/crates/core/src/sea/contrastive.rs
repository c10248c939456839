use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::numeric::{cosine_similarity, dot, softmax, LossWithGrad};
use crate::record::EvidenceItem;
use crate::textenc::{Embedder, TextForward};

/// One contrastive batch: sentences, candidate evidences and the annotated
/// (sentence, evidence) links. Every unlinked pair is a negative.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundingBatch {
    pub sentences: Vec<String>,
    pub evidences: Vec<EvidenceItem>,
    pub positive_pairs: BTreeSet<(usize, usize)>,
}

impl GroundingBatch {
    pub fn validate(&self) -> Result<()> {
        let (ns, ne) = (self.sentences.len(), self.evidences.len());
        if ns == 0 || ne == 0 || ns.max(ne) < 2 {
            return Err(Error::EmptyDataset);
        }
        for &(i, k) in &self.positive_pairs {
            if i >= ns {
                return Err(Error::IndexOutOfRange { index: i, len: ns });
            }
            if k >= ne {
                return Err(Error::IndexOutOfRange { index: k, len: ne });
            }
        }
        for i in 0..ns {
            if !self.positive_pairs.iter().any(|&(s, _)| s == i) {
                return Err(Error::NoPositive { anchor: i });
            }
        }
        Ok(())
    }
}

/// Scaled exponential similarity `exp(cos(s, e) / τ)`.
pub fn kappa(s: &[f64], e: &[f64], tau: f64) -> Result<f64> {
    Ok((cosine_similarity(s, e)? / tau).exp())
}

/// `−(1/|P|) Σ_{j∈P} log(κ_j / (κ_j + Σ_{n∈N} κ_n))` for one anchor, given its
/// row of scaled logits `c/τ`. Returns the value and d/d(logit) per column.
fn anchor_term(logits: &[f64], positives: &[usize]) -> (f64, Vec<f64>) {
    let mut is_pos = vec![false; logits.len()];
    for &j in positives {
        is_pos[j] = true;
    }
    let neg: Vec<usize> = (0..logits.len()).filter(|&k| !is_pos[k]).collect();
    let mut grad = vec![0.0; logits.len()];
    let mut value = 0.0;
    let w = 1.0 / positives.len() as f64;
    for &j in positives {
        let m = neg
            .iter()
            .map(|&n| logits[n])
            .fold(logits[j], f64::max);
        let z_j = (logits[j] - m).exp();
        let z_n: Vec<f64> = neg.iter().map(|&n| (logits[n] - m).exp()).collect();
        let denom = z_j + z_n.iter().sum::<f64>();
        value += w * (denom.ln() - (logits[j] - m));
        grad[j] += w * (z_j / denom - 1.0);
        for (&n, z) in neg.iter().zip(&z_n) {
            grad[n] += w * z / denom;
        }
    }
    (value, grad)
}

/// Value and d/d(cosine) matrix of the two-directional multi-positive loss
/// for a precomputed cosine matrix `cos[i][k]`.
///
/// Sentence anchors are averaged over all sentences; evidence anchors over
/// the evidences with at least one linked sentence.
pub fn infonce_from_cosines(
    cos: &[Vec<f64>],
    positives: &BTreeSet<(usize, usize)>,
    tau: f64,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let ns = cos.len();
    let ne = cos.first().map_or(0, Vec::len);
    let mut grad = vec![vec![0.0; ne]; ns];
    let mut s_terms = Vec::with_capacity(ns);
    let mut s_grads = Vec::with_capacity(ns);
    for (i, row) in cos.iter().enumerate() {
        let pos: Vec<usize> = positives.range((i, 0)..(i + 1, 0)).map(|&(_, k)| k).collect();
        if pos.is_empty() {
            return Err(Error::NoPositive { anchor: i });
        }
        let logits: Vec<f64> = row.iter().map(|c| c / tau).collect();
        let (v, g) = anchor_term(&logits, &pos);
        s_terms.push(v);
        s_grads.push(g);
    }
    let mut e_terms = Vec::new();
    let mut e_grads = Vec::new();
    for k in 0..ne {
        let pos: Vec<usize> = positives.iter().filter(|p| p.1 == k).map(|p| p.0).collect();
        if pos.is_empty() {
            continue;
        }
        let logits: Vec<f64> = (0..ns).map(|i| cos[i][k] / tau).collect();
        let (v, g) = anchor_term(&logits, &pos);
        e_terms.push(v);
        e_grads.push((k, g));
    }
    let ws = 1.0 / ns as f64;
    let we = 1.0 / e_terms.len() as f64;
    for (i, g) in s_grads.iter().enumerate() {
        for k in 0..ne {
            grad[i][k] += ws * g[k] / tau;
        }
    }
    for (k, g) in &e_grads {
        for i in 0..ns {
            grad[i][*k] += we * g[i] / tau;
        }
    }
    let value = ws * s_terms.iter().sum::<f64>() + we * e_terms.iter().sum::<f64>();
    Ok((value, grad))
}

/// Multi-positive InfoNCE over a batch with gradients for the embedder head,
/// keyed with `prefix` (e.g. `"head.weight"` for an empty prefix).
pub fn multi_positive_infonce_prefixed(
    batch: &GroundingBatch,
    emb: &Embedder,
    tau: f64,
    prefix: &str,
) -> Result<LossWithGrad> {
    batch.validate()?;
    let sf: Vec<TextForward> = batch
        .sentences
        .iter()
        .map(|s| emb.forward(s))
        .collect::<Result<_>>()?;
    let ef: Vec<TextForward> = batch
        .evidences
        .iter()
        .map(|e| emb.forward(&e.descriptor))
        .collect::<Result<_>>()?;
    let cos: Vec<Vec<f64>> = sf
        .iter()
        .map(|s| ef.iter().map(|e| dot(&s.unit, &e.unit)).collect())
        .collect();
    let (value, g) = infonce_from_cosines(&cos, &batch.positive_pairs, tau)?;

    let d = emb.dim();
    let mut grads = emb.zero_grads();
    for (i, s) in sf.iter().enumerate() {
        let mut gu = vec![0.0; d];
        for (k, e) in ef.iter().enumerate() {
            gu.iter_mut().zip(&e.unit).for_each(|(a, b)| *a += g[i][k] * b);
        }
        emb.backward(s, &gu, &mut grads);
    }
    for (k, e) in ef.iter().enumerate() {
        let mut gu = vec![0.0; d];
        for (i, s) in sf.iter().enumerate() {
            gu.iter_mut().zip(&s.unit).for_each(|(a, b)| *a += g[i][k] * b);
        }
        emb.backward(e, &gu, &mut grads);
    }
    let mut out = LossWithGrad::new(value);
    out.grads = grads.into_map(prefix);
    Ok(out)
}

pub fn multi_positive_infonce(batch: &GroundingBatch, emb: &Embedder, tau: f64) -> Result<LossWithGrad> {
    multi_positive_infonce_prefixed(batch, emb, tau, "")
}

/// Cosine similarity of `sentence` to each evidence descriptor.
pub fn evidence_cosines(sentence: &str, evidences: &[EvidenceItem], emb: &Embedder) -> Result<Vec<f64>> {
    if evidences.is_empty() {
        return Err(Error::EmptyEvidence);
    }
    let s = emb.embed_text(sentence)?;
    evidences
        .iter()
        .map(|e| Ok(dot(&s, &emb.embed_text(&e.descriptor)?)))
        .collect()
}

/// p(e | s): softmax of cosine similarities over temperature `tau`.
pub fn ground_sentence(
    sentence: &str,
    evidences: &[EvidenceItem],
    emb: &Embedder,
    tau: f64,
) -> Result<Vec<f64>> {
    Ok(softmax(&evidence_cosines(sentence, evidences, emb)?, tau))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::finite_difference_check;
    use crate::optim::Parameterized;
    use crate::record::EvidenceCategory;
    use crate::textenc::{EmbedderConfig, HEAD_BIAS, HEAD_WEIGHT};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn item(id: &str, text: &str) -> EvidenceItem {
        EvidenceItem {
            id: id.into(),
            descriptor: text.into(),
            source_field: format!("f.{id}"),
            category: EvidenceCategory::Lab,
            anatomy_ref: None,
        }
    }

    #[test]
    fn kappa_examples() {
        let u = [1.0, 0.0];
        let v = [0.0, 1.0];
        assert!((kappa(&u, &u, 1.0).unwrap() - std::f64::consts::E).abs() < 1e-12);
        assert!((kappa(&u, &v, 1.0).unwrap() - 1.0).abs() < 1e-12);
        let big = kappa(&u, &u, 0.07).unwrap();
        assert!((big / (1.0f64 / 0.07).exp() - 1.0).abs() < 1e-12);
        assert!((big - 1.6003e6).abs() < 100.0);
        assert!(matches!(kappa(&[0.0, 0.0], &u, 1.0), Err(Error::ZeroNorm)));
    }

    #[test]
    fn identical_positive_orthogonal_negative() {
        // s1 = e1 = u, s2 = e2 = v with u ⟂ v; links on the diagonal.
        let cos = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let pos = BTreeSet::from([(0, 0), (1, 1)]);
        let (v, _) = infonce_from_cosines(&cos, &pos, 1.0).unwrap();
        let e = std::f64::consts::E;
        let per_direction = -(e / (e + 1.0)).ln();
        assert!((per_direction - 0.3133).abs() < 1e-4);
        assert!((v - 2.0 * per_direction).abs() < 1e-12);
        assert!((v - 0.6266).abs() < 1e-4);
    }

    #[test]
    fn uniform_similarity_gives_log_two() {
        let cos = vec![vec![0.3, 0.3], vec![0.3, 0.3]];
        let pos = BTreeSet::from([(0, 0), (1, 1)]);
        let (v, _) = infonce_from_cosines(&cos, &pos, 0.5).unwrap();
        assert!((v - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn sentence_without_link_is_rejected() {
        let cos = vec![vec![0.1, 0.2], vec![0.3, 0.4]];
        let pos = BTreeSet::from([(0, 0)]);
        assert!(matches!(
            infonce_from_cosines(&cos, &pos, 1.0),
            Err(Error::NoPositive { anchor: 1 })
        ));
    }

    fn random_batch(rng: &mut ChaCha8Rng, ns: usize, ne: usize) -> GroundingBatch {
        let words = ["alpha", "beta", "gamma", "delta", "eps", "zeta", "eta", "theta", "iota"];
        let text = |rng: &mut ChaCha8Rng| {
            (0..rng.random_range(1..5))
                .map(|_| words[rng.random_range(0..words.len())])
                .collect::<Vec<_>>()
                .join(" ")
        };
        let sentences = (0..ns).map(|_| text(rng)).collect();
        let evidences = (0..ne).map(|k| item(&format!("e{k}"), &text(rng))).collect();
        let mut positive_pairs = BTreeSet::new();
        for i in 0..ns {
            positive_pairs.insert((i, rng.random_range(0..ne)));
            if rng.random_bool(0.4) {
                positive_pairs.insert((i, rng.random_range(0..ne)));
            }
        }
        GroundingBatch {
            sentences,
            evidences,
            positive_pairs,
        }
    }

    #[test]
    fn head_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = EmbedderConfig {
            input_dim: 8,
            embed_dim: 5,
            ..EmbedderConfig::default()
        };
        let emb = Embedder::new(cfg).unwrap();
        let batch = random_batch(&mut rng, 3, 4);
        let tau = 0.5;
        let lg = multi_positive_infonce(&batch, &emb, tau).unwrap();
        for name in [HEAD_WEIGHT, HEAD_BIAS] {
            let x = emb
                .parameters()
                .into_iter()
                .find(|(n, _)| n == name)
                .unwrap()
                .1
                .clone();
            let f = |t: &crate::numeric::Tensor| {
                let mut e = emb.clone();
                for (n, p) in e.parameters_mut() {
                    if n == name {
                        *p = t.clone();
                    }
                }
                multi_positive_infonce(&batch, &e, tau).unwrap().value
            };
            let err = finite_difference_check(f, &x, lg.grad(name).unwrap(), 1e-6);
            assert!(err < 1e-4, "{name}: {err}");
        }
    }

    #[test]
    fn ground_sentence_contract() {
        let emb = Embedder::new(EmbedderConfig::default()).unwrap();
        let one = [item("a", "serum level")];
        assert_eq!(ground_sentence("anything", &one, &emb, 0.07).unwrap(), vec![1.0]);
        assert!(matches!(
            ground_sentence("anything", &[], &emb, 0.07),
            Err(Error::EmptyEvidence)
        ));
        let ev = [item("a", "serum level"), item("b", "left volume"), item("c", "age years")];
        let p = ground_sentence("left volume", &ev, &emb, 0.07).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let rev: Vec<EvidenceItem> = ev.iter().rev().cloned().collect();
        let q = ground_sentence("left volume", &rev, &emb, 0.07).unwrap();
        for k in 0..3 {
            assert_eq!(p[k], q[2 - k]);
        }
    }
}
