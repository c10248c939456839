use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cohort::{Cohort, GoldReport, GeneratedPatient};
use crate::error::{Error, Result};
use crate::numeric::{dice_bce_loss, LossWithGrad, Tensor};
use crate::optim::Adam;
use crate::textenc::{tokenize, Embedder, EmbedderConfig};

use super::contrastive::{multi_positive_infonce, GroundingBatch};
use super::decoder::{DecoderConfig, SegDecoder};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SeaConfig {
    /// Contrastive temperature.
    pub tau: f64,
    pub lambda_mask: f64,
    pub lambda_dice: f64,
    pub lambda_bce: f64,
    pub epochs: usize,
    /// Patients per optimizer step.
    pub batch_patients: usize,
    pub lr_embedder: f64,
    pub lr_decoder: f64,
    pub seed: u64,
    pub embedder: EmbedderConfig,
    pub decoder: DecoderConfig,
}

impl Default for SeaConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            lambda_mask: 1.0,
            lambda_dice: 1.0,
            lambda_bce: 1.0,
            epochs: 30,
            batch_patients: 4,
            lr_embedder: 0.005,
            lr_decoder: 0.002,
            seed: 5,
            embedder: EmbedderConfig::default(),
            decoder: DecoderConfig::default(),
        }
    }
}

impl SeaConfig {
    pub fn validate(&self) -> Result<()> {
        self.embedder.validate()?;
        self.decoder.validate()?;
        if !(self.tau > 0.0) {
            return Err(Error::Config("tau must be positive".into()));
        }
        if [self.lambda_mask, self.lambda_dice, self.lambda_bce]
            .iter()
            .any(|v| !(*v >= 0.0))
        {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        if self.batch_patients == 0 || !(self.lr_embedder > 0.0) || !(self.lr_decoder > 0.0) {
            return Err(Error::Config("batch size and learning rates must be positive".into()));
        }
        if self.decoder.token_dim != self.embedder.embed_dim {
            return Err(Error::Config(format!(
                "decoder token_dim {} must equal embed_dim {}",
                self.decoder.token_dim, self.embedder.embed_dim
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub l_se: f64,
    pub l_mask: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct SeaModel {
    pub embedder: Embedder,
    pub decoder: SegDecoder,
    pub history: Vec<EpochLoss>,
}

/// Contrastive batch of one patient's gold sentences against its evidences.
pub fn grounding_batch(patient: &GeneratedPatient, gold: &GoldReport) -> Result<GroundingBatch> {
    let r = &patient.record;
    let mut positive_pairs = BTreeSet::new();
    for (i, link) in gold.links.iter().enumerate() {
        for id in &link.evidence_ids {
            let k = r.evidence_index(id).ok_or_else(|| {
                Error::Config(format!("link to unknown evidence `{id}` for patient `{}`", r.id))
            })?;
            positive_pairs.insert((i, k));
        }
    }
    Ok(GroundingBatch {
        sentences: gold.sentences(),
        evidences: r.evidence.clone(),
        positive_pairs,
    })
}

/// A mask-supervised example: volume, conditioning evidence text, target.
pub struct MaskExample<'a> {
    pub volume: &'a Tensor,
    pub descriptor: &'a str,
    pub structure: &'a str,
    pub target: &'a Tensor,
}

/// Mask examples of a patient: one per gold link that carries a mask file.
pub fn mask_examples<'a>(patient: &'a GeneratedPatient, gold: &'a GoldReport) -> Vec<MaskExample<'a>> {
    let r = &patient.record;
    gold.links
        .iter()
        .filter(|l| l.mask_file.is_some())
        .filter_map(|l| {
            let e = l.evidence_ids.iter().filter_map(|id| r.evidence_index(id)).map(|k| &r.evidence[k]).find(|e| e.anatomy_ref.is_some())?;
            let structure = e.anatomy_ref.as_deref()?;
            Some(MaskExample {
                volume: &patient.volume,
                descriptor: &e.descriptor,
                structure,
                target: patient.masks.get(structure)?,
            })
        })
        .collect()
}

/// Evidence token vectors fed to the decoder; no gradient flows back.
pub fn evidence_tokens(emb: &Embedder, descriptor: &str) -> Result<Tensor> {
    emb.embed_tokens(&tokenize(descriptor)?)
}

/// Mean Dice+BCE over `examples` with decoder gradients.
pub fn mask_loss(
    dec: &SegDecoder,
    emb: &Embedder,
    examples: &[MaskExample],
    lambda_dice: f64,
    lambda_bce: f64,
) -> Result<LossWithGrad> {
    let mut acc = LossWithGrad::new(0.0);
    if examples.is_empty() {
        return Ok(acc);
    }
    let w = 1.0 / examples.len() as f64;
    for ex in examples {
        let tokens = evidence_tokens(emb, ex.descriptor)?;
        let trace = dec.forward(ex.volume, &tokens)?;
        let lg = dice_bce_loss(&trace.logits, ex.target, lambda_dice, lambda_bce)?;
        let mut item = LossWithGrad::new(lg.value);
        item.grads = dec.backward(&trace, lg.grad("logits").expect("logits gradient"))?;
        acc.accumulate(&item, w)?;
    }
    Ok(acc)
}

fn check_indices(cohort: &Cohort, indices: &[usize]) -> Result<()> {
    if indices.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let Some(&i) = indices.iter().find(|&&i| i >= cohort.len()) {
        return Err(Error::IndexOutOfRange {
            index: i,
            len: cohort.len(),
        });
    }
    Ok(())
}

/// Minimizes `L_SE + λ_mask·L_mask` over the patients in `indices`.
/// The two terms touch disjoint parameters (embedder head, decoder), so each
/// minibatch takes one optimizer step on each.
pub fn train_sea(cohort: &Cohort, indices: &[usize], cfg: &SeaConfig) -> Result<SeaModel> {
    cfg.validate()?;
    check_indices(cohort, indices)?;
    let mut embedder = Embedder::new(cfg.embedder)?;
    let mut decoder = SegDecoder::new(cfg.decoder)?;
    let mut opt_e = Adam::new(cfg.lr_embedder);
    let mut opt_d = Adam::new(cfg.lr_decoder);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let batches: Vec<GroundingBatch> = indices
        .iter()
        .map(|&i| grounding_batch(&cohort.patients[i], &cohort.gold[i]))
        .collect::<Result<_>>()?;
    let train_masks = cfg.lambda_mask > 0.0;

    let mut order: Vec<usize> = (0..indices.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut se_sum, mut mask_sum, mut steps) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_patients) {
            let mut se = LossWithGrad::new(0.0);
            for &j in chunk {
                se.accumulate(&multi_positive_infonce(&batches[j], &embedder, cfg.tau)?, 1.0 / chunk.len() as f64)?;
            }
            let mut lm = 0.0;
            if train_masks {
                let examples: Vec<MaskExample> = chunk
                    .iter()
                    .flat_map(|&j| {
                        let i = indices[j];
                        mask_examples(&cohort.patients[i], &cohort.gold[i])
                    })
                    .collect();
                let ml = mask_loss(&decoder, &embedder, &examples, cfg.lambda_dice, cfg.lambda_bce)?;
                lm = ml.value;
                let mut g = ml.grads;
                g.values_mut().for_each(|t| t.scale(cfg.lambda_mask));
                opt_d.step(&mut decoder, &g);
            }
            opt_e.step(&mut embedder, &se.grads);
            se_sum += se.value;
            mask_sum += lm;
            steps += 1;
        }
        let l_se = se_sum / steps as f64;
        let l_mask = mask_sum / steps as f64;
        history.push(EpochLoss {
            epoch,
            l_se,
            l_mask,
            total: l_se + cfg.lambda_mask * l_mask,
        });
    }
    Ok(SeaModel {
        embedder,
        decoder,
        history,
    })
}

/// Trains a decoder against a fixed embedder. With `cross_attention` off in
/// `cfg.decoder` this is the image-only baseline.
pub fn train_mask_decoder(
    cohort: &Cohort,
    indices: &[usize],
    embedder: &Embedder,
    cfg: &SeaConfig,
) -> Result<(SegDecoder, Vec<f64>)> {
    cfg.validate()?;
    check_indices(cohort, indices)?;
    let mut decoder = SegDecoder::new(cfg.decoder)?;
    let mut opt = Adam::new(cfg.lr_decoder);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = indices.to_vec();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut steps) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_patients) {
            let examples: Vec<MaskExample> = chunk
                .iter()
                .flat_map(|&i| mask_examples(&cohort.patients[i], &cohort.gold[i]))
                .collect();
            let ml = mask_loss(&decoder, embedder, &examples, cfg.lambda_dice, cfg.lambda_bce)?;
            opt.step(&mut decoder, &ml.grads);
            sum += ml.value;
            steps += 1;
        }
        curve.push(sum / steps as f64);
    }
    Ok((decoder, curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::CohortConfig;
    use crate::optim::Parameterized;

    fn tiny() -> (Cohort, SeaConfig) {
        let cohort = Cohort::generate(&CohortConfig {
            n_patients: 6,
            ..CohortConfig::default()
        })
        .unwrap();
        let cfg = SeaConfig {
            epochs: 3,
            batch_patients: 3,
            decoder: DecoderConfig {
                num_layers: 1,
                ..DecoderConfig::default()
            },
            ..SeaConfig::default()
        };
        (cohort, cfg)
    }

    #[test]
    fn zero_mask_weight_leaves_decoder_untouched() {
        let (cohort, mut cfg) = tiny();
        cfg.lambda_mask = 0.0;
        let model = train_sea(&cohort, &[0, 1, 2, 3], &cfg).unwrap();
        let fresh = SegDecoder::new(cfg.decoder).unwrap();
        assert_eq!(model.decoder.fingerprint(), fresh.fingerprint());
        assert_ne!(
            model.embedder.fingerprint(),
            Embedder::new(cfg.embedder).unwrap().fingerprint()
        );
    }

    #[test]
    fn batches_link_every_sentence() {
        let (cohort, _) = tiny();
        for i in 0..cohort.len() {
            let b = grounding_batch(&cohort.patients[i], &cohort.gold[i]).unwrap();
            b.validate().unwrap();
            assert_eq!(mask_examples(&cohort.patients[i], &cohort.gold[i]).len(), 2);
        }
    }

    #[test]
    fn rejects_mismatched_widths() {
        let (cohort, mut cfg) = tiny();
        cfg.decoder.token_dim = 16;
        assert!(matches!(train_sea(&cohort, &[0], &cfg), Err(Error::Config(_))));
        assert!(matches!(
            train_sea(&cohort, &[], &SeaConfig::default()),
            Err(Error::EmptyDataset)
        ));
    }
}
