//! Two-stage grounding transfer: a frozen teacher labels generated sentences
//! with tempered evidence distributions and a student matches them under KL.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cohort::{Cohort, GeneratedPatient};
use crate::error::{Error, Result};
use crate::eval::eval_retrieval;
use crate::numeric::{dice_bce_loss, dot, kl_divergence, sigmoid, softmax, LossWithGrad, Tensor, PROB_FLOOR};
use crate::optim::{Adam, Parameterized};
use crate::record::EvidenceItem;
use crate::report::{parse_report, ClinicalReport};
use crate::sea::{evidence_cosines, evidence_tokens, train_sea, SeaConfig, SeaModel, SegDecoder};
use crate::textenc::{Embedder, TextForward};

pub const MIN_LABELED: usize = 8;
pub const STUDENT_PREFIX: &str = "student.";
pub const STUDENT_DECODER_PREFIX: &str = "student.decoder.";

/// Frozen stage-one grounder.
#[derive(Debug, Clone)]
pub struct TeacherGrounder {
    embedder: Embedder,
    decoder: Option<SegDecoder>,
    tau_ground: f64,
    trained: bool,
}

impl TeacherGrounder {
    pub fn from_sea(model: SeaModel, tau_ground: f64) -> Self {
        Self {
            embedder: model.embedder,
            decoder: Some(model.decoder),
            tau_ground,
            trained: true,
        }
    }

    /// A teacher that never went through stage one; the student trainer rejects it.
    pub fn untrained(embedder: Embedder, tau_ground: f64) -> Self {
        Self {
            embedder,
            decoder: None,
            tau_ground,
            trained: false,
        }
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn embedder(&self) -> &Embedder {
        &self.embedder
    }

    pub fn decoder(&self) -> Option<&SegDecoder> {
        self.decoder.as_ref()
    }

    pub fn tau_ground(&self) -> f64 {
        self.tau_ground
    }

    /// Teacher evidence distribution tempered by `tau_d`.
    pub fn soft_labels(&self, sentence: &str, evidences: &[EvidenceItem], tau_d: f64) -> Result<Vec<f64>> {
        let cos = evidence_cosines(sentence, evidences, &self.embedder)?;
        Ok(softmax(&cos, self.tau_ground * tau_d))
    }

    /// Teacher soft mask σ(logits) for one imaging evidence.
    pub fn soft_mask(&self, volume: &Tensor, descriptor: &str) -> Result<Option<Tensor>> {
        let Some(dec) = &self.decoder else { return Ok(None) };
        let trace = dec.forward(volume, &evidence_tokens(&self.embedder, descriptor)?)?;
        let data = trace.logits.data().iter().map(|&x| sigmoid(x)).collect();
        Ok(Some(Tensor::new(trace.logits.dims().to_vec(), data)?))
    }

    pub fn fingerprint(&self) -> String {
        let mut s = self.embedder.fingerprint();
        if let Some(d) = &self.decoder {
            s.push_str(&d.fingerprint());
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudentInit {
    /// Teacher backbone with a freshly initialized head.
    FreshHead,
    /// Exact copy of the teacher embedder.
    Teacher,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub tau_d: f64,
    pub lambda_kl: f64,
    /// Fraction of training patients whose grounding links the teacher sees.
    pub label_fraction: f64,
    pub epochs: usize,
    /// Reports per optimizer step.
    pub batch_reports: usize,
    pub lr: f64,
    pub seed: u64,
    pub student_init: StudentInit,
    pub student_head_seed: u64,
    /// Also match teacher soft masks with a soft-Dice term.
    pub distill_masks: bool,
    pub lambda_mask: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            tau_d: 2.0,
            lambda_kl: 1.0,
            label_fraction: 1.0,
            epochs: 30,
            batch_reports: 4,
            lr: 0.005,
            seed: 13,
            student_init: StudentInit::FreshHead,
            student_head_seed: 101,
            distill_masks: false,
            lambda_mask: 1.0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_d > 0.0) {
            return Err(Error::Config("tau_d must be positive".into()));
        }
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return Err(Error::Config("label_fraction must lie in (0, 1]".into()));
        }
        if !(self.lambda_kl >= 0.0) || !(self.lambda_mask >= 0.0) {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        if self.batch_reports == 0 || !(self.lr > 0.0) {
            return Err(Error::Config("batch size and learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// `τ²·KL(q ‖ softmax(z/τ))` with the gradient w.r.t. `z` under `"logits"`.
/// The gradient is exact for the clamped objective: entries whose student
/// probability falls below the floor contribute a constant.
pub fn distill_loss(teacher_p: &[f64], student_logits: &[f64], tau_d: f64) -> Result<LossWithGrad> {
    if teacher_p.len() != student_logits.len() {
        return Err(Error::dims(&[teacher_p.len()], &[student_logits.len()]));
    }
    if !(tau_d > 0.0) {
        return Err(Error::Config("tau_d must be positive".into()));
    }
    let p = softmax(student_logits, tau_d);
    let value = tau_d * tau_d * kl_divergence(teacher_p, &p)?;
    let live_mass: f64 = teacher_p
        .iter()
        .zip(&p)
        .filter(|(_, pi)| **pi >= PROB_FLOOR)
        .map(|(q, _)| q)
        .sum();
    let grad: Vec<f64> = teacher_p
        .iter()
        .zip(&p)
        .map(|(&q, &pj)| {
            let own = if pj >= PROB_FLOOR { q } else { 0.0 };
            tau_d * (pj * live_mass - own)
        })
        .collect();
    Ok(LossWithGrad::new(value).with_grad("logits", Tensor::vector(grad)?))
}

/// One generated report ready for distillation.
#[derive(Debug, Clone)]
pub struct DistillSample {
    pub sentences: Vec<String>,
    pub evidences: Vec<EvidenceItem>,
    pub volume: Option<Tensor>,
}

impl DistillSample {
    pub fn from_report(report: &ClinicalReport, patient: &GeneratedPatient) -> Self {
        Self {
            sentences: report.reasoning_sentences.clone(),
            evidences: patient.record.evidence.clone(),
            volume: Some(patient.volume.clone()),
        }
    }
}

/// Reports from the template renderer for the given patients; grounding
/// links are discarded.
pub fn template_samples(cohort: &Cohort, indices: &[usize]) -> Vec<DistillSample> {
    indices
        .iter()
        .map(|&i| DistillSample::from_report(&parse_report(&cohort.gold[i].text), &cohort.patients[i]))
        .collect()
}

#[derive(Debug, Clone)]
pub struct StudentGrounder {
    pub embedder: Embedder,
    pub decoder: Option<SegDecoder>,
    /// Mean distillation objective per epoch.
    pub history: Vec<f64>,
}

impl Parameterized for StudentGrounder {
    fn parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self
            .embedder
            .parameters()
            .into_iter()
            .map(|(n, t)| (format!("{STUDENT_PREFIX}{n}"), t))
            .collect();
        if let Some(d) = &self.decoder {
            out.extend(d.parameters().into_iter().map(|(n, t)| (format!("{STUDENT_DECODER_PREFIX}{n}"), t)));
        }
        out
    }

    fn parameters_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = self
            .embedder
            .parameters_mut()
            .into_iter()
            .map(|(n, t)| (format!("{STUDENT_PREFIX}{n}"), t))
            .collect();
        if let Some(d) = &mut self.decoder {
            out.extend(
                d.parameters_mut()
                    .into_iter()
                    .map(|(n, t)| (format!("{STUDENT_DECODER_PREFIX}{n}"), t)),
            );
        }
        out
    }
}

/// Teacher outputs computed once before student training.
struct TeacherCache {
    /// Per sample, per sentence.
    soft_labels: Vec<Vec<Vec<f64>>>,
    /// Per sample: (descriptor, soft mask) for every imaging evidence.
    masks: Vec<Vec<(String, Tensor)>>,
}

fn cache_teacher(samples: &[DistillSample], teacher: &TeacherGrounder, cfg: &DistillConfig) -> Result<TeacherCache> {
    let mut soft_labels = Vec::with_capacity(samples.len());
    let mut masks = Vec::with_capacity(samples.len());
    for s in samples {
        soft_labels.push(
            s.sentences
                .iter()
                .map(|t| teacher.soft_labels(t, &s.evidences, cfg.tau_d))
                .collect::<Result<Vec<_>>>()?,
        );
        let mut m = Vec::new();
        if cfg.distill_masks {
            if let Some(vol) = &s.volume {
                for e in s.evidences.iter().filter(|e| e.anatomy_ref.is_some()) {
                    if let Some(mask) = teacher.soft_mask(vol, &e.descriptor)? {
                        m.push((e.descriptor.clone(), mask));
                    }
                }
            }
        }
        masks.push(m);
    }
    Ok(TeacherCache { soft_labels, masks })
}

/// `λ_KL·τ²·KL` averaged over every sentence of `samples`, with gradients for
/// the student embedder keyed under [`STUDENT_PREFIX`].
pub fn student_kl_loss(
    student: &Embedder,
    samples: &[&DistillSample],
    soft_labels: &[&Vec<Vec<f64>>],
    tau_ground: f64,
    cfg: &DistillConfig,
) -> Result<LossWithGrad> {
    let n_sent: usize = samples.iter().map(|s| s.sentences.len()).sum();
    let mut grads = student.zero_grads();
    let mut total = 0.0;
    if n_sent == 0 {
        let mut out = LossWithGrad::new(0.0);
        out.grads = grads.into_map(STUDENT_PREFIX);
        return Ok(out);
    }
    let w = cfg.lambda_kl / n_sent as f64;
    let d = student.dim();
    for (s, qs) in samples.iter().zip(soft_labels) {
        if s.evidences.is_empty() {
            return Err(Error::EmptyEvidence);
        }
        let ef: Vec<TextForward> = s
            .evidences
            .iter()
            .map(|e| student.forward(&e.descriptor))
            .collect::<Result<_>>()?;
        let mut ge = vec![vec![0.0; d]; ef.len()];
        for (sentence, q) in s.sentences.iter().zip(qs.iter()) {
            let sf = student.forward(sentence)?;
            let logits: Vec<f64> = ef.iter().map(|e| dot(&sf.unit, &e.unit) / tau_ground).collect();
            let lg = distill_loss(q, &logits, cfg.tau_d)?;
            total += w * lg.value;
            let g_logit = lg.grad("logits").expect("logits gradient").data();
            let mut gs = vec![0.0; d];
            for (k, e) in ef.iter().enumerate() {
                let g = w * g_logit[k] / tau_ground;
                gs.iter_mut().zip(&e.unit).for_each(|(a, b)| *a += g * b);
                ge[k].iter_mut().zip(&sf.unit).for_each(|(a, b)| *a += g * b);
            }
            student.backward(&sf, &gs, &mut grads);
        }
        for (e, g) in ef.iter().zip(&ge) {
            student.backward(e, g, &mut grads);
        }
    }
    let mut out = LossWithGrad::new(total);
    out.grads = grads.into_map(STUDENT_PREFIX);
    Ok(out)
}

fn student_mask_loss(
    decoder: &SegDecoder,
    student: &Embedder,
    samples: &[&DistillSample],
    masks: &[&Vec<(String, Tensor)>],
) -> Result<LossWithGrad> {
    let n: usize = masks.iter().map(|m| m.len()).sum();
    let mut acc = LossWithGrad::new(0.0);
    if n == 0 {
        return Ok(acc);
    }
    for (s, ms) in samples.iter().zip(masks) {
        let Some(vol) = &s.volume else { continue };
        for (descriptor, target) in ms.iter() {
            let trace = decoder.forward(vol, &evidence_tokens(student, descriptor)?)?;
            let lg = dice_bce_loss(&trace.logits, target, 1.0, 0.0)?;
            let mut item = LossWithGrad::new(lg.value);
            item.grads = decoder
                .backward(&trace, lg.grad("logits").expect("logits gradient"))?
                .into_iter()
                .map(|(k, v)| (format!("{STUDENT_DECODER_PREFIX}{k}"), v))
                .collect();
            acc.accumulate(&item, 1.0 / n as f64)?;
        }
    }
    Ok(acc)
}

/// Minimizes the student objective against cached teacher outputs.
pub fn train_student(
    samples: &[DistillSample],
    teacher: &TeacherGrounder,
    cfg: &DistillConfig,
) -> Result<StudentGrounder> {
    cfg.validate()?;
    if !teacher.is_trained() {
        return Err(Error::UntrainedTeacher);
    }
    if samples.is_empty() || samples.iter().all(|s| s.sentences.is_empty()) {
        return Err(Error::EmptyDataset);
    }
    let cache = cache_teacher(samples, teacher, cfg)?;
    let embedder = match cfg.student_init {
        StudentInit::FreshHead => teacher.embedder().with_fresh_head(cfg.student_head_seed),
        StudentInit::Teacher => teacher.embedder().clone(),
    };
    let decoder = match (cfg.distill_masks, teacher.decoder()) {
        (true, Some(d)) => {
            let mut c = *d.config();
            c.seed = cfg.seed;
            Some(SegDecoder::new(c)?)
        }
        _ => None,
    };
    let mut student = StudentGrounder {
        embedder,
        decoder,
        history: Vec::with_capacity(cfg.epochs),
    };
    let mut opt = Adam::new(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut steps) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_reports) {
            let batch: Vec<&DistillSample> = chunk.iter().map(|&j| &samples[j]).collect();
            let labels: Vec<&Vec<Vec<f64>>> = chunk.iter().map(|&j| &cache.soft_labels[j]).collect();
            let mut loss = student_kl_loss(&student.embedder, &batch, &labels, teacher.tau_ground(), cfg)?;
            if let Some(dec) = &student.decoder {
                let ms: Vec<&Vec<(String, Tensor)>> = chunk.iter().map(|&j| &cache.masks[j]).collect();
                let ml = student_mask_loss(dec, &student.embedder, &batch, &ms)?;
                loss.accumulate(&ml, cfg.lambda_mask)?;
            }
            opt.step(&mut student, &loss.grads);
            sum += loss.value;
            steps += 1;
        }
        student.history.push(sum / steps as f64);
    }
    Ok(student)
}

/// Mean distillation objective of `student` over all samples, no update.
pub fn distill_objective(
    student: &Embedder,
    samples: &[DistillSample],
    teacher: &TeacherGrounder,
    cfg: &DistillConfig,
) -> Result<f64> {
    let cache = cache_teacher(samples, teacher, &DistillConfig { distill_masks: false, ..*cfg })?;
    let batch: Vec<&DistillSample> = samples.iter().collect();
    let labels: Vec<&Vec<Vec<f64>>> = cache.soft_labels.iter().collect();
    Ok(student_kl_loss(student, &batch, &labels, teacher.tau_ground(), cfg)?.value)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyRow {
    pub fraction: f64,
    pub teacher_r3: f64,
    pub student_r3: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelEfficiencyConfig {
    pub sea: SeaConfig,
    pub distill: DistillConfig,
}

impl Default for LabelEfficiencyConfig {
    fn default() -> Self {
        Self {
            sea: SeaConfig {
                lambda_mask: 0.0,
                ..SeaConfig::default()
            },
            distill: DistillConfig::default(),
        }
    }
}

/// Labeled subset of the training split for `fraction`.
pub fn labeled_subset(train: &[usize], fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("fraction {fraction} outside (0, 1]")));
    }
    let labeled = (fraction * train.len() as f64).round() as usize;
    if labeled < MIN_LABELED {
        return Err(Error::InsufficientLabels {
            fraction,
            labeled,
            minimum: MIN_LABELED,
        });
    }
    let mut shuffled = train.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    shuffled.truncate(labeled);
    shuffled.sort_unstable();
    Ok(shuffled)
}

/// For each fraction: a teacher trained on that share of labeled training
/// patients, a student distilled on reports for every training patient, both
/// scored by R@3 on the test split.
pub fn label_efficiency_experiment(
    cohort: &Cohort,
    fractions: &[f64],
    cfg: &LabelEfficiencyConfig,
) -> Result<Vec<EfficiencyRow>> {
    cfg.distill.validate()?;
    let train = cohort.train_indices();
    let test = cohort.test_indices();
    let subsets = fractions
        .iter()
        .map(|&f| labeled_subset(&train, f, cfg.distill.seed))
        .collect::<Result<Vec<_>>>()?;
    let samples = template_samples(cohort, &train);
    let mut rows = Vec::with_capacity(fractions.len());
    for (&fraction, subset) in fractions.iter().zip(&subsets) {
        let teacher = TeacherGrounder::from_sea(train_sea(cohort, subset, &cfg.sea)?, cfg.sea.tau);
        let student = train_student(&samples, &teacher, &cfg.distill)?;
        let teacher_r3 = eval_retrieval(teacher.embedder(), cohort, &test)?.r3;
        let student_r3 = eval_retrieval(&student.embedder, cohort, &test)?.r3;
        let ratio = if teacher_r3 > 0.0 { student_r3 / teacher_r3 } else { 0.0 };
        rows.push(EfficiencyRow {
            fraction,
            teacher_r3,
            student_r3,
            ratio,
        });
    }
    Ok(rows)
}

pub fn write_efficiency_csv(path: &Path, rows: &[EfficiencyRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Gradient map keys a student step may touch.
pub fn student_parameter_names(student: &StudentGrounder) -> Vec<String> {
    student.parameters().into_iter().map(|(n, _)| n).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::CohortConfig;
    use crate::numeric::finite_difference_check;
    use crate::sea::DecoderConfig;

    #[test]
    fn matching_distributions_have_zero_loss() {
        let z = [0.3, -1.2, 2.0];
        let q = softmax(&z, 2.0);
        let l = distill_loss(&q, &z, 2.0).unwrap();
        assert!(l.value.abs() < 1e-12);
        assert!(l.grad("logits").unwrap().data().iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn one_hot_teacher_against_uniform_student() {
        let l = distill_loss(&[1.0, 0.0], &[0.0, 0.0], 1.0).unwrap();
        assert!((l.value - 2f64.ln()).abs() < 1e-12);
        let l2 = distill_loss(&[1.0, 0.0], &[0.0, 0.0], 2.0).unwrap();
        assert!((l2.value - 4.0 * 2f64.ln()).abs() < 1e-12);
        assert!(matches!(distill_loss(&[1.0], &[0.0, 0.0], 1.0), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn distill_gradient_matches_finite_differences() {
        let q = softmax(&[0.5, -0.4, 1.1, 0.0], 1.0);
        for tau in [0.5, 1.0, 2.0] {
            let x = Tensor::vector(vec![0.2, 1.3, -0.7, 0.4]).unwrap();
            let g = distill_loss(&q, x.data(), tau).unwrap();
            let err = finite_difference_check(
                |t| distill_loss(&q, t.data(), tau).unwrap().value,
                &x,
                g.grad("logits").unwrap(),
                1e-6,
            );
            assert!(err < 1e-4, "tau {tau}: rel err {err}");
        }
    }

    fn tiny() -> (Cohort, SeaConfig) {
        let cohort = Cohort::generate(&CohortConfig {
            n_patients: 12,
            ..CohortConfig::default()
        })
        .unwrap();
        let sea = SeaConfig {
            epochs: 4,
            decoder: DecoderConfig {
                num_layers: 1,
                ..DecoderConfig::default()
            },
            ..SeaConfig::default()
        };
        (cohort, sea)
    }

    #[test]
    fn stage_order_and_freeze_contract() {
        let (cohort, sea) = tiny();
        let train = cohort.train_indices();
        let samples = template_samples(&cohort, &train);
        let untrained = TeacherGrounder::untrained(Embedder::new(sea.embedder).unwrap(), sea.tau);
        assert!(matches!(
            train_student(&samples, &untrained, &DistillConfig::default()),
            Err(Error::UntrainedTeacher)
        ));

        let teacher = TeacherGrounder::from_sea(train_sea(&cohort, &train, &sea).unwrap(), sea.tau);
        assert!(matches!(
            train_student(&[], &teacher, &DistillConfig::default()),
            Err(Error::EmptyDataset)
        ));
        let before = teacher.fingerprint();
        let cfg = DistillConfig {
            epochs: 2,
            distill_masks: true,
            ..DistillConfig::default()
        };
        let student = train_student(&samples, &teacher, &cfg).unwrap();
        assert_eq!(teacher.fingerprint(), before);
        assert!(student.decoder.is_some());

        let names = student_parameter_names(&student);
        assert!(names.iter().all(|n| n.starts_with(STUDENT_PREFIX)));
        let batch: Vec<&DistillSample> = samples.iter().collect();
        let cache = cache_teacher(&samples, &teacher, &cfg).unwrap();
        let labels: Vec<&Vec<Vec<f64>>> = cache.soft_labels.iter().collect();
        let g = student_kl_loss(&student.embedder, &batch, &labels, sea.tau, &cfg).unwrap();
        assert!(g.grads.keys().all(|k| names.contains(k)));
    }

    #[test]
    fn student_copy_of_teacher_starts_at_zero() {
        let (cohort, sea) = tiny();
        let train = cohort.train_indices();
        let teacher = TeacherGrounder::from_sea(train_sea(&cohort, &train, &sea).unwrap(), sea.tau);
        let samples = template_samples(&cohort, &train);
        let cfg = DistillConfig {
            student_init: StudentInit::Teacher,
            ..DistillConfig::default()
        };
        let l = distill_objective(teacher.embedder(), &samples, &teacher, &cfg).unwrap();
        assert!(l <= 1e-9, "initial loss {l}");
    }

    #[test]
    fn label_subsets() {
        let train: Vec<usize> = (0..40).collect();
        assert_eq!(labeled_subset(&train, 0.25, 1).unwrap().len(), 10);
        assert!(matches!(
            labeled_subset(&train, 0.1, 1),
            Err(Error::InsufficientLabels { labeled: 4, .. })
        ));
        assert!(labeled_subset(&train, 0.0, 1).is_err());
        assert!(labeled_subset(&train, 1.5, 1).is_err());
    }
}
