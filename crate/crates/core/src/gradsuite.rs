//! Central finite-difference checks of every analytic gradient, run over many
//! random instances.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distill::distill_loss;
use crate::grpo::{grpo_loss, slot_param_name, PolicyConfig, ReportPolicy, Rollout, SampleGroup, FEATURE_DIM, SLOTS};
use crate::numeric::{
    dice_bce_loss, finite_difference_check_floored, mse_loss_grad, softmax, token_nll_logits, Tensor,
};
use crate::optim::Parameterized;
use crate::pretrain::itc_loss;
use crate::record::{EvidenceCategory, EvidenceItem};
use crate::rules::RewardBreakdown;
use crate::sea::{multi_positive_infonce, GroundingBatch};
use crate::textenc::{Embedder, EmbedderConfig};

pub const MAX_REL_ERR: f64 = 1e-4;
/// Denominator floor of the relative error, `|num − g| / max(|g|, floor)`.
pub const ABS_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub name: String,
    pub seeds: usize,
    pub max_rel_err: f64,
    pub worst_seed: u64,
    pub seconds: f64,
    pub passed: bool,
}

pub const SUITES: [&str; 7] = [
    "multi_positive_infonce",
    "dice_bce_loss",
    "distill_loss",
    "itc_loss",
    "token_nll",
    "mse_loss",
    "grpo_loss",
];

fn check<F: Fn(&Tensor) -> f64>(f: F, x: &Tensor, g: &Tensor, h: f64) -> f64 {
    finite_difference_check_floored(f, x, g, h, ABS_FLOOR)
}

fn infonce_case(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words = ["alpha", "beta", "gamma", "delta", "eps", "zeta", "eta", "theta", "iota", "kappa"];
    let text = |rng: &mut ChaCha8Rng| {
        (0..rng.random_range(1..5))
            .map(|_| words[rng.random_range(0..words.len())])
            .collect::<Vec<_>>()
            .join(" ")
    };
    let ns = rng.random_range(2..5);
    let ne = rng.random_range(2..6);
    let sentences = (0..ns).map(|_| text(&mut rng)).collect();
    let evidences = (0..ne)
        .map(|k| EvidenceItem {
            id: format!("e{k}"),
            descriptor: text(&mut rng),
            source_field: format!("f.e{k}"),
            category: EvidenceCategory::Lab,
            anatomy_ref: None,
        })
        .collect();
    let mut positive_pairs = BTreeSet::new();
    for i in 0..ns {
        positive_pairs.insert((i, rng.random_range(0..ne)));
        if rng.random_bool(0.4) {
            positive_pairs.insert((i, rng.random_range(0..ne)));
        }
    }
    let batch = GroundingBatch {
        sentences,
        evidences,
        positive_pairs,
    };
    let emb = Embedder::new(EmbedderConfig {
        input_dim: 8,
        embed_dim: 5,
        head_seed: seed,
        ..EmbedderConfig::default()
    })
    .expect("valid embedder config");
    let tau = rng.random_range(0.2..1.0);
    let lg = multi_positive_infonce(&batch, &emb, tau).expect("valid batch");
    let params: Vec<(String, Tensor)> = emb.parameters().into_iter().map(|(n, t)| (n, t.clone())).collect();
    params
        .iter()
        .map(|(name, x)| {
            let f = |t: &Tensor| {
                let mut e = emb.clone();
                for (n, p) in e.parameters_mut() {
                    if &n == name {
                        *p = t.clone();
                    }
                }
                multi_positive_infonce(&batch, &e, tau).expect("valid batch").value
            };
            check(f, x, lg.grad(name).expect("head gradient"), 1e-6)
        })
        .fold(0.0, f64::max)
}

fn dice_bce_case(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = [rng.random_range(2..4), rng.random_range(2..4), rng.random_range(2..4)];
    let x = Tensor::randn(&dims, 1.5, &mut rng);
    let n: usize = dims.iter().product();
    let labels = (0..n).map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 }).collect();
    let g = Tensor::new(dims.to_vec(), labels).expect("dims match");
    let (ld, lb) = (rng.random_range(0.0..2.0), rng.random_range(0.0..2.0));
    let lg = dice_bce_loss(&x, &g, ld, lb).expect("same dims");
    check(
        |t| dice_bce_loss(t, &g, ld, lb).expect("same dims").value,
        &x,
        lg.grad("logits").expect("logits gradient"),
        1e-5,
    )
}

fn distill_case(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.random_range(2..9);
    let q_logits: Vec<f64> = (0..k).map(|_| rng.random_range(-3.0..3.0)).collect();
    let q = softmax(&q_logits, 1.0);
    let z = Tensor::vector((0..k).map(|_| rng.random_range(-3.0..3.0)).collect()).expect("nonempty");
    let tau = rng.random_range(0.5..4.0);
    let lg = distill_loss(&q, z.data(), tau).expect("valid inputs");
    check(
        |t| distill_loss(&q, t.data(), tau).expect("valid inputs").value,
        &z,
        lg.grad("logits").expect("logits gradient"),
        1e-5,
    )
}

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
    let mut t = Tensor::randn(&[n, d], 1.0, rng);
    for row in t.data_mut().chunks_mut(d) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        row.iter_mut().for_each(|v| *v /= norm);
    }
    t
}

fn itc_case(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, d) = (rng.random_range(2..6), rng.random_range(2..6));
    let img = unit_rows(&mut rng, n, d);
    let txt = unit_rows(&mut rng, n, d);
    let tau = rng.random_range(0.1..1.0);
    let lg = itc_loss(&img, &txt, tau).expect("valid batch");
    let e_img = check(
        |t| itc_loss(t, &txt, tau).expect("valid batch").value,
        &img,
        lg.grad("img").expect("img gradient"),
        1e-6,
    );
    let e_txt = check(
        |t| itc_loss(&img, t, tau).expect("valid batch").value,
        &txt,
        lg.grad("txt").expect("txt gradient"),
        1e-6,
    );
    e_img.max(e_txt)
}

fn token_nll_case(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (steps, vocab) = (rng.random_range(1..6), rng.random_range(2..8));
    let logits = Tensor::randn(&[steps, vocab], 2.0, &mut rng);
    let targets: Vec<usize> = (0..steps).map(|_| rng.random_range(0..vocab)).collect();
    let lg = token_nll_logits(&logits, &targets).expect("valid targets");
    check(
        |t| token_nll_logits(t, &targets).expect("valid targets").value,
        &logits,
        lg.grad("logits").expect("logits gradient"),
        1e-5,
    )
}

fn mse_case(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..20);
    let x = Tensor::randn(&[n], 1.0, &mut rng);
    let x_hat = Tensor::randn(&[n], 1.0, &mut rng);
    let lg = mse_loss_grad(&x, &x_hat).expect("same dims");
    check(
        |t| mse_loss_grad(&x, t).expect("same dims").value,
        &x_hat,
        lg.grad("x_hat").expect("x_hat gradient"),
        1e-5,
    )
}

fn grpo_case(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let policy_with = |s: u64| {
        ReportPolicy::new(PolicyConfig {
            init_std: 0.4,
            seed: s,
            ..PolicyConfig::default()
        })
        .expect("valid policy config")
    };
    let policy = policy_with(seed.wrapping_mul(3).wrapping_add(1));
    let reference = policy_with(seed.wrapping_mul(3).wrapping_add(2));
    let x: Vec<f64> = (0..FEATURE_DIM)
        .map(|f| if f == 0 { 1.0 } else { rng.random_range(-2.0..2.0) })
        .collect();
    let g = rng.random_range(2..7);
    let epsilon = 0.2;
    let rollouts = (0..g)
        .map(|_| {
            let choices = policy.sample(&x, &mut rng);
            // Ratios away from the clip boundaries so both branches are smooth.
            let mut log_rho: f64 = rng.random_range(-0.5..0.5);
            while ((log_rho.exp() - (1.0 - epsilon)).abs() < 1e-3) || ((log_rho.exp() - (1.0 + epsilon)).abs() < 1e-3) {
                log_rho = rng.random_range(-0.5..0.5);
            }
            Rollout {
                old_logprob: policy.log_prob(&x, &choices) - log_rho,
                text: String::new(),
                choices,
                reward: RewardBreakdown::default(),
                advantage: rng.random_range(-2.0..2.0),
            }
        })
        .collect();
    let group = SampleGroup {
        patient_id: "p".into(),
        prompt: String::new(),
        features: x,
        rollouts,
    };
    let beta = rng.random_range(0.0..0.5);
    let lg = grpo_loss(&group, &policy, &reference, epsilon, beta).expect("valid group");
    (0..SLOTS.len())
        .map(|s| {
            check(
                |w| {
                    let mut q = policy.clone();
                    *q.weight_mut(s) = w.clone();
                    grpo_loss(&group, &q, &reference, epsilon, beta).expect("valid group").value
                },
                policy.weight(s),
                &lg.grads[&slot_param_name(s)],
                1e-5,
            )
        })
        .fold(0.0, f64::max)
}

/// Max relative error of suite `name` on one random instance.
pub fn run_case(name: &str, seed: u64) -> Option<f64> {
    Some(match name {
        "multi_positive_infonce" => infonce_case(seed),
        "dice_bce_loss" => dice_bce_case(seed),
        "distill_loss" => distill_case(seed),
        "itc_loss" => itc_case(seed),
        "token_nll" => token_nll_case(seed),
        "mse_loss" => mse_case(seed),
        "grpo_loss" => grpo_case(seed),
        _ => return None,
    })
}

/// Every suite on seeds `base_seed .. base_seed + seeds`.
pub fn run_gradient_suite(seeds: usize, base_seed: u64) -> Vec<SuiteResult> {
    SUITES
        .iter()
        .map(|&name| {
            let start = Instant::now();
            let (mut worst, mut worst_seed) = (0.0f64, base_seed);
            for s in 0..seeds as u64 {
                let seed = base_seed.wrapping_add(s);
                let err = run_case(name, seed).expect("known suite");
                // NaN counts as a failure.
                if !(err <= worst) {
                    worst = if err.is_nan() { f64::INFINITY } else { err };
                    worst_seed = seed;
                }
            }
            SuiteResult {
                name: name.to_string(),
                seeds,
                max_rel_err: worst,
                worst_seed,
                seconds: start.elapsed().as_secs_f64(),
                passed: seeds > 0 && worst < MAX_REL_ERR,
            }
        })
        .collect()
}
