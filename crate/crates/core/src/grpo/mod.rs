//! Group-relative policy optimization of the toy report policy against
//! executable rewards.

mod policy;

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use policy::{
    categorical_kl, render_choices, slot_param_name, PolicyConfig, ReportPolicy, Slot, CONCLUSION, CONFIDENCE,
    DIAGNOSIS, DOMAIN_SLOTS, FEATURE_DIM, MALFORMED_CONFIDENCE, MALFORMED_CONFIDENCE_TEXT, MARKER_SLOTS, SLOTS,
};

use crate::cohort::Cohort;
use crate::error::{Error, Result};
use crate::metrics::mean;
use crate::numeric::{LossWithGrad, Tensor};
use crate::optim::sgd_step;
use crate::record::PatientRecord;
use crate::report::parse_report;
use crate::rules::{total_reward, EntailmentScorer, RewardBreakdown, RuleConfig};

pub const ADVANTAGE_EPS: f64 = 1e-8;
pub const RATIO_EXP_CLAMP: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub choices: Vec<usize>,
    pub text: String,
    pub old_logprob: f64,
    pub reward: RewardBreakdown,
    pub advantage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleGroup {
    pub patient_id: String,
    pub prompt: String,
    pub features: Vec<f64>,
    pub rollouts: Vec<Rollout>,
}

/// Query text shown to the policy: the patient's evidence descriptors.
pub fn prompt_for(p: &PatientRecord) -> String {
    p.evidence
        .iter()
        .map(|e| e.descriptor.as_str())
        .collect::<Vec<_>>()
        .join("\n")
}

/// Rollout `i` draws from its own stream derived from `(seed, i)`.
fn rollout_rng(seed: u64, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64);
    rng
}

/// `g` independent rollouts; rewards and advantages are left at zero.
pub fn sample_group(policy: &ReportPolicy, patient: &PatientRecord, g: usize, seed: u64) -> Result<SampleGroup> {
    if g < 2 {
        return Err(Error::Config(format!("group size {g} must be at least 2")));
    }
    let x = policy.features(patient);
    let rollouts = (0..g)
        .map(|i| {
            let choices = policy.sample(&x, &mut rollout_rng(seed, i));
            Rollout {
                text: render_choices(&choices),
                old_logprob: policy.log_prob(&x, &choices),
                choices,
                reward: RewardBreakdown::default(),
                advantage: 0.0,
            }
        })
        .collect();
    Ok(SampleGroup {
        patient_id: patient.id.clone(),
        prompt: prompt_for(patient),
        features: x,
        rollouts,
    })
}

/// `(R_i − mean)/(std + 1e-8)` with population std; exact zeros for a flat group.
pub fn normalize_advantages(rewards: &[f64]) -> Vec<f64> {
    if rewards.is_empty() {
        return Vec::new();
    }
    if rewards.iter().all(|&r| r == rewards[0]) {
        return vec![0.0; rewards.len()];
    }
    let m = mean(rewards);
    let var = mean(&rewards.iter().map(|r| (r - m) * (r - m)).collect::<Vec<_>>());
    let sd = var.sqrt();
    rewards.iter().map(|r| (r - m) / (sd + ADVANTAGE_EPS)).collect()
}

/// Scores every rollout and fills in group-normalized advantages.
pub fn score_group(
    group: &mut SampleGroup,
    patient: &PatientRecord,
    cfg: &RuleConfig,
    scorer: &dyn EntailmentScorer,
) {
    for r in &mut group.rollouts {
        r.reward = total_reward(&parse_report(&r.text), patient, cfg, scorer);
    }
    let totals: Vec<f64> = group.rollouts.iter().map(|r| r.reward.total).collect();
    for (r, a) in group.rollouts.iter_mut().zip(normalize_advantages(&totals)) {
        r.advantage = a;
    }
}

/// Sequence-level `exp(new − old)` with the exponent clamped to ±30.
pub fn importance_ratio(new_logprob: f64, old_logprob: f64) -> f64 {
    (new_logprob - old_logprob).clamp(-RATIO_EXP_CLAMP, RATIO_EXP_CLAMP).exp()
}

/// `−(1/G)·Σ min(ρA, clip(ρ, 1−ε, 1+ε)A) + β·KL(π ‖ π_ref)` for one group,
/// with the KL averaged over slots; gradients keyed by policy parameter.
pub fn grpo_loss(
    group: &SampleGroup,
    policy: &ReportPolicy,
    ref_policy: &ReportPolicy,
    epsilon: f64,
    beta: f64,
) -> Result<LossWithGrad> {
    if group.rollouts.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let x = &group.features;
    if x.len() != FEATURE_DIM {
        return Err(Error::dims(&[FEATURE_DIM], &[x.len()]));
    }
    let probs = policy.slot_probs(x);
    let ref_probs = ref_policy.slot_probs(x);
    let g = group.rollouts.len() as f64;
    // dL/dlogits per slot.
    let mut dz: Vec<Vec<f64>> = probs.iter().map(|p| vec![0.0; p.len()]).collect();

    let mut surrogate = 0.0;
    for r in &group.rollouts {
        let new_lp: f64 = probs.iter().zip(&r.choices).map(|(p, &c)| p[c].ln()).sum();
        let d = new_lp - r.old_logprob;
        let rho = importance_ratio(new_lp, r.old_logprob);
        let unclipped = rho * r.advantage;
        let clipped = rho.clamp(1.0 - epsilon, 1.0 + epsilon) * r.advantage;
        surrogate += unclipped.min(clipped);
        let active = unclipped <= clipped && d.abs() <= RATIO_EXP_CLAMP;
        if active && r.advantage != 0.0 {
            let coef = -r.advantage * rho / g;
            for (s, &c) in r.choices.iter().enumerate() {
                for (k, pk) in probs[s].iter().enumerate() {
                    let onehot = if k == c { 1.0 } else { 0.0 };
                    dz[s][k] += coef * (onehot - pk);
                }
            }
        }
    }

    let n_slots = SLOTS.len() as f64;
    let mut kl = 0.0;
    for (s, (p, q)) in probs.iter().zip(&ref_probs).enumerate() {
        let ks = categorical_kl(p, q);
        kl += ks / n_slots;
        if beta != 0.0 {
            for k in 0..p.len() {
                dz[s][k] += beta / n_slots * p[k] * (p[k].ln() - q[k].ln() - ks);
            }
        }
    }

    let mut out = LossWithGrad::new(-surrogate / g + beta * kl);
    for (s, dzs) in dz.iter().enumerate() {
        let mut w = Tensor::zeros(&[dzs.len(), FEATURE_DIM]);
        for (k, &dk) in dzs.iter().enumerate() {
            for (f, &xf) in x.iter().enumerate() {
                w.data_mut()[k * FEATURE_DIM + f] = dk * xf;
            }
        }
        out.grads.insert(slot_param_name(s), w);
    }
    Ok(out)
}

/// Mean of [`grpo_loss`] over several groups.
pub fn grpo_batch_loss(
    groups: &[SampleGroup],
    policy: &ReportPolicy,
    ref_policy: &ReportPolicy,
    epsilon: f64,
    beta: f64,
) -> Result<LossWithGrad> {
    if groups.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut acc = LossWithGrad::new(0.0);
    for g in groups {
        acc.accumulate(&grpo_loss(g, policy, ref_policy, epsilon, beta)?, 1.0 / groups.len() as f64)?;
    }
    Ok(acc)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RftConfig {
    pub group_size: usize,
    pub epsilon: f64,
    pub beta: f64,
    pub iters: usize,
    pub lr: f64,
    /// Patients (one group each) per parameter update.
    pub groups_per_iter: usize,
    pub seed: u64,
}

impl Default for RftConfig {
    fn default() -> Self {
        Self {
            group_size: 4,
            epsilon: 0.2,
            beta: 0.1,
            iters: 500,
            lr: 0.05,
            groups_per_iter: 8,
            seed: 11,
        }
    }
}

impl RftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::Config("group_size must be at least 2".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::Config("epsilon must lie in (0, 1)".into()));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::Config("beta must be finite and nonnegative".into()));
        }
        if !(self.lr > 0.0) || self.groups_per_iter == 0 {
            return Err(Error::Config("lr and groups_per_iter must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterLog {
    pub iter: usize,
    pub mean_reward: f64,
    pub r_format: f64,
    pub r_nia: f64,
    pub r_consistency: f64,
    pub kl_ref: f64,
}

#[derive(Debug, Clone)]
pub struct RftResult {
    pub policy: ReportPolicy,
    pub reference: ReportPolicy,
    pub log: Vec<IterLog>,
}

/// Sample → score → normalize → one gradient step, repeated `cfg.iters`
/// times. The reference policy is the input policy, fixed for the run.
pub fn train_rft(
    policy: ReportPolicy,
    cohort: &Cohort,
    indices: &[usize],
    rules: &RuleConfig,
    scorer: &dyn EntailmentScorer,
    cfg: &RftConfig,
) -> Result<RftResult> {
    cfg.validate()?;
    rules.validate()?;
    if indices.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let Some(&i) = indices.iter().find(|&&i| i >= cohort.len()) {
        return Err(Error::IndexOutOfRange {
            index: i,
            len: cohort.len(),
        });
    }
    let reference = policy.clone();
    let mut policy = policy;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::with_capacity(cfg.iters);
    for iter in 0..cfg.iters {
        let mut groups = Vec::with_capacity(cfg.groups_per_iter);
        for _ in 0..cfg.groups_per_iter {
            let i = indices[rng.random_range(0..indices.len())];
            let record = &cohort.patients[i].record;
            let mut group = sample_group(&policy, record, cfg.group_size, rng.random())?;
            score_group(&mut group, record, rules, scorer);
            groups.push(group);
        }
        let rewards: Vec<RewardBreakdown> = groups.iter().flat_map(|g| g.rollouts.iter().map(|r| r.reward)).collect();
        let component = |f: fn(&RewardBreakdown) -> f64| mean(&rewards.iter().map(f).collect::<Vec<_>>());
        let kl_ref = mean(&groups.iter().map(|g| policy.kl_to(&reference, &g.features)).collect::<Vec<_>>());
        log.push(IterLog {
            iter,
            mean_reward: component(|r| r.total),
            r_format: component(|r| r.r_format),
            r_nia: component(|r| r.r_nia),
            r_consistency: component(|r| r.r_consistency),
            kl_ref,
        });
        let loss = grpo_batch_loss(&groups, &policy, &reference, cfg.epsilon, cfg.beta)?;
        sgd_step(&mut policy, &loss.grads, cfg.lr);
    }
    Ok(RftResult {
        policy,
        reference,
        log,
    })
}

pub fn write_rft_csv(path: &Path, log: &[IterLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in log {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Greedy report text for every patient in `indices`.
pub fn greedy_reports(policy: &ReportPolicy, cohort: &Cohort, indices: &[usize]) -> BTreeMap<String, String> {
    indices
        .iter()
        .map(|&i| {
            let r = &cohort.patients[i].record;
            (r.id.clone(), render_choices(&policy.greedy(&policy.features(r))))
        })
        .collect()
}
