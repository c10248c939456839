//! Elementary losses with hand-derived backward passes.

use super::tensor::{LossWithGrad, Tensor};
use crate::error::{Error, Result};

/// Floor applied to probabilities before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-9;

/// Additive smoothing in the Dice ratio.
pub const DICE_SMOOTH: f64 = 1e-5;

const NORM_EPS: f64 = 1e-12;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dims(&[a.len()], &[b.len()]));
    }
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na < NORM_EPS || nb < NORM_EPS {
        return Err(Error::ZeroNorm);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Returns `v / ‖v‖` and the norm.
pub fn normalize(v: &[f64]) -> Result<(Vec<f64>, f64)> {
    let n = l2_norm(v);
    if n < NORM_EPS {
        return Err(Error::ZeroNorm);
    }
    Ok((v.iter().map(|x| x / n).collect(), n))
}

/// Backward through `u = v / ‖v‖`: maps dL/du to dL/dv.
pub fn normalize_backward(unit: &[f64], norm: f64, grad_unit: &[f64]) -> Vec<f64> {
    let proj = dot(unit, grad_unit);
    unit.iter()
        .zip(grad_unit)
        .map(|(u, g)| (g - u * proj) / norm)
        .collect()
}

/// Temperature-scaled softmax with max subtraction.
pub fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    assert!(temperature > 0.0, "temperature must be positive");
    if logits.is_empty() {
        return Vec::new();
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits
        .iter()
        .map(|l| ((l - max) / temperature).exp())
        .collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

/// KL(q ‖ p) with `p` clamped to [`PROB_FLOOR`] and `0·log 0 = 0`.
pub fn kl_divergence(q: &[f64], p: &[f64]) -> Result<f64> {
    if q.len() != p.len() {
        return Err(Error::dims(&[q.len()], &[p.len()]));
    }
    let kl: f64 = q
        .iter()
        .zip(p)
        .filter(|(qi, _)| **qi > 0.0)
        .map(|(qi, pi)| qi * (qi.ln() - pi.max(PROB_FLOOR).ln()))
        .sum();
    Ok(kl.max(0.0))
}

/// Mean negative log-likelihood of `targets` under per-step probability vectors.
pub fn token_nll(probs: &[Vec<f64>], targets: &[usize]) -> Result<f64> {
    if probs.len() != targets.len() {
        return Err(Error::dims(&[probs.len()], &[targets.len()]));
    }
    if probs.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (step, &t) in probs.iter().zip(targets) {
        let p = step.get(t).ok_or(Error::IndexOutOfRange {
            index: t,
            len: step.len(),
        })?;
        total -= p.max(PROB_FLOOR).ln();
    }
    Ok(total / probs.len() as f64)
}

/// Token cross-entropy from raw logits (`steps × vocab`), gradient under key `"logits"`.
pub fn token_nll_logits(logits: &Tensor, targets: &[usize]) -> Result<LossWithGrad> {
    if logits.rank() != 2 || logits.dims()[0] != targets.len() {
        return Err(Error::dims(&[targets.len(), 0], logits.dims()));
    }
    let (steps, vocab) = (logits.dims()[0], logits.dims()[1]);
    let mut grad = vec![0.0; steps * vocab];
    let mut total = 0.0;
    for (s, &t) in targets.iter().enumerate() {
        if t >= vocab {
            return Err(Error::IndexOutOfRange {
                index: t,
                len: vocab,
            });
        }
        let row = &logits.data()[s * vocab..(s + 1) * vocab];
        let lp = log_softmax(row);
        total -= lp[t];
        for (v, l) in lp.iter().enumerate() {
            let onehot = if v == t { 1.0 } else { 0.0 };
            grad[s * vocab + v] = (l.exp() - onehot) / steps as f64;
        }
    }
    Ok(LossWithGrad::new(total / steps as f64)
        .with_grad("logits", Tensor::new(logits.dims().to_vec(), grad)?))
}

pub fn mse_loss(x: &Tensor, x_hat: &Tensor) -> Result<f64> {
    x.ensure_same_dims(x_hat)?;
    let n = x.len() as f64;
    Ok(x
        .data()
        .iter()
        .zip(x_hat.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// MSE with its gradient w.r.t. the reconstruction (key `"x_hat"`).
pub fn mse_loss_grad(x: &Tensor, x_hat: &Tensor) -> Result<LossWithGrad> {
    let value = mse_loss(x, x_hat)?;
    let n = x.len() as f64;
    let g = x
        .data()
        .iter()
        .zip(x_hat.data())
        .map(|(a, b)| 2.0 * (b - a) / n)
        .collect();
    Ok(LossWithGrad::new(value).with_grad("x_hat", Tensor::new(x.dims().to_vec(), g)?))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Smoothed soft Dice between probabilities and labels.
pub fn dice_score(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    pred.ensure_same_dims(gt)?;
    let (inter, sp, sg) = dice_sums(pred.data(), gt.data());
    Ok((2.0 * inter + DICE_SMOOTH) / (sp + sg + DICE_SMOOTH))
}

fn dice_sums(p: &[f64], g: &[f64]) -> (f64, f64, f64) {
    p.iter().zip(g).fold((0.0, 0.0, 0.0), |(i, sp, sg), (a, b)| {
        (i + a * b, sp + a, sg + b)
    })
}

/// `λ_dice·(1 − Dice(σ(x), g)) + λ_bce·BCE(σ(x), g)` with its gradient w.r.t.
/// the logits `x` under key `"logits"`. BCE is averaged over voxels.
pub fn dice_bce_loss(
    logits: &Tensor,
    gt: &Tensor,
    lambda_dice: f64,
    lambda_bce: f64,
) -> Result<LossWithGrad> {
    logits.ensure_same_dims(gt)?;
    let n = logits.len() as f64;
    let probs: Vec<f64> = logits.data().iter().map(|&x| sigmoid(x)).collect();
    let g = gt.data();
    let (inter, sp, sg) = dice_sums(&probs, g);
    let denom = sp + sg + DICE_SMOOTH;
    let numer = 2.0 * inter + DICE_SMOOTH;
    let dice = numer / denom;
    let bce = logits
        .data()
        .iter()
        .zip(g)
        .map(|(&x, &y)| softplus(x) - y * x)
        .sum::<f64>()
        / n;
    let value = lambda_dice * (1.0 - dice) + lambda_bce * bce;

    let grad: Vec<f64> = probs
        .iter()
        .zip(g)
        .map(|(&p, &y)| {
            let d_dice_dp = (2.0 * y * denom - numer) / (denom * denom);
            -lambda_dice * d_dice_dp * p * (1.0 - p) + lambda_bce * (p - y) / n
        })
        .collect();
    Ok(LossWithGrad::new(value).with_grad("logits", Tensor::new(logits.dims().to_vec(), grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::finite_difference_check;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn half_ones_grid() -> Tensor {
        let data = (0..8).map(|i| if i < 4 { 1.0 } else { 0.0 }).collect();
        Tensor::new(vec![2, 2, 2], data).unwrap()
    }

    #[test]
    fn cosine_examples() {
        let v = [0.3, -1.2, 2.0];
        assert!((cosine_similarity(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - 0.707_106_781).abs() < 1e-6);
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::ZeroNorm)
        ));
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0], 1.0), vec![0.5, 0.5]);
        let p = softmax(&[3f64.ln(), 0.0], 1.0);
        assert!((p[0] - 0.75).abs() < 1e-12 && (p[1] - 0.25).abs() < 1e-12);
        let a = softmax(&[2.0, 0.0], 2.0);
        let b = softmax(&[1.0, 0.0], 1.0);
        assert!((a[0] - b[0]).abs() < 1e-15);
    }

    #[test]
    fn kl_examples() {
        let q = [0.2, 0.3, 0.5];
        assert_eq!(kl_divergence(&q, &q).unwrap(), 0.0);
        let kl = kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((kl - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn kl_matches_direct_summation_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let q = softmax(&Tensor::randn(&[5], 1.0, &mut rng).into_data(), 1.0);
            let p = softmax(&Tensor::randn(&[5], 1.0, &mut rng).into_data(), 1.0);
            let mut direct = 0.0;
            for i in 0..5 {
                direct += q[i] * (q[i] / p[i]).ln();
            }
            assert!((kl_divergence(&q, &p).unwrap() - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn token_nll_examples() {
        let exact = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        assert_eq!(token_nll(&exact, &[1, 0]).unwrap(), 0.0);
        let uniform = vec![vec![0.25; 4]; 3];
        assert!((token_nll(&uniform, &[0, 1, 3]).unwrap() - 4f64.ln()).abs() < 1e-12);
        let single = vec![vec![0.25, 0.75]];
        assert!((token_nll(&single, &[0]).unwrap() - 1.386_294_4).abs() < 1e-6);
        assert!(matches!(
            token_nll(&single, &[2]),
            Err(Error::IndexOutOfRange { index: 2, len: 2 })
        ));
    }

    #[test]
    fn token_nll_logits_agrees_with_probability_form() {
        let logits = Tensor::new(vec![2, 3], vec![0.1, 2.0, -1.0, 0.5, 0.5, 0.0]).unwrap();
        let probs: Vec<Vec<f64>> = logits
            .data()
            .chunks(3)
            .map(|r| softmax(r, 1.0))
            .collect();
        let a = token_nll(&probs, &[1, 2]).unwrap();
        let b = token_nll_logits(&logits, &[1, 2]).unwrap().value;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn mse_examples() {
        let x = Tensor::vector(vec![0.0, 0.0]).unwrap();
        let y = Tensor::vector(vec![1.0, 1.0]).unwrap();
        assert_eq!(mse_loss(&x, &x).unwrap(), 0.0);
        assert_eq!(mse_loss(&x, &y).unwrap(), 1.0);
        let z = Tensor::vector(vec![1.0]).unwrap();
        assert!(matches!(mse_loss(&x, &z), Err(Error::DimMismatch { .. })));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::randn(&[4, 5], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 5], 1.0, &mut rng);
        let mut direct = 0.0;
        for i in 0..20 {
            let d = a.data()[i] - b.data()[i];
            direct += d * d;
        }
        assert!((mse_loss(&a, &b).unwrap() - direct / 20.0).abs() < 1e-12);
    }

    #[test]
    fn dice_examples() {
        let g = half_ones_grid();
        assert!((dice_score(&g, &g).unwrap() - 1.0).abs() < 1e-4);
        let mut other = Tensor::zeros(&[2, 2, 2]);
        other.data_mut()[4..].iter_mut().for_each(|v| *v = 1.0);
        assert!(dice_score(&other, &g).unwrap() <= 1e-4);
        // I = 2, Σp = 4, Σg = 4  =>  (2·2 + s) / (8 + s)
        let half = Tensor::filled(&[2, 2, 2], 0.5);
        assert!((dice_score(&half, &g).unwrap() - 0.5).abs() < 1e-3);
    }

    #[test]
    fn dice_bce_examples() {
        let g = half_ones_grid();
        let perfect = Tensor::new(
            vec![2, 2, 2],
            g.data().iter().map(|&y| if y > 0.5 { 30.0 } else { -30.0 }).collect(),
        )
        .unwrap();
        assert!(dice_bce_loss(&perfect, &g, 1.0, 1.0).unwrap().value <= 1e-3);
        let uniform = Tensor::zeros(&[2, 2, 2]);
        let l = dice_bce_loss(&uniform, &g, 1.0, 0.0).unwrap().value;
        assert!((l - 0.5).abs() < 1e-3);
    }

    #[test]
    fn dice_bce_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[2, 3, 2], 1.5, &mut rng);
        let labels = [1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0];
        let g = Tensor::new(vec![2, 3, 2], labels.to_vec()).unwrap();
        let lg = dice_bce_loss(&x, &g, 1.0, 1.0).unwrap();
        let err = finite_difference_check(
            |t| dice_bce_loss(t, &g, 1.0, 1.0).unwrap().value,
            &x,
            lg.grad("logits").unwrap(),
            1e-5,
        );
        assert!(err < 1e-4, "rel err {err}");
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_ignores_shifts(
            logits in prop::collection::vec(-50.0f64..50.0, 1..12),
            shift in -100.0f64..100.0,
        ) {
            let p = softmax(&logits, 1.0);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let shifted: Vec<f64> = logits.iter().map(|l| l + shift).collect();
            let ps = softmax(&shifted, 1.0);
            for (a, b) in p.iter().zip(&ps) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn kl_nonnegative_and_zero_on_identity(
            a in prop::collection::vec(-4.0f64..4.0, 10),
            b in prop::collection::vec(-4.0f64..4.0, 10),
        ) {
            let q = softmax(&a, 1.0);
            let p = softmax(&b, 1.0);
            prop_assert!(kl_divergence(&q, &p).unwrap() >= 0.0);
            prop_assert!(kl_divergence(&q, &q).unwrap().abs() < 1e-15);
            if a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-3) {
                let same_up_to_shift = {
                    let d = a[0] - b[0];
                    a.iter().zip(&b).all(|(x, y)| ((x - y) - d).abs() < 1e-9)
                };
                if !same_up_to_shift {
                    prop_assert!(kl_divergence(&q, &p).unwrap() > 0.0);
                }
            }
        }

        #[test]
        fn dice_symmetric_for_binary_masks(bits in prop::collection::vec(any::<(bool, bool)>(), 8)) {
            let a = Tensor::new(vec![2, 2, 2], bits.iter().map(|b| b.0 as u8 as f64).collect()).unwrap();
            let b = Tensor::new(vec![2, 2, 2], bits.iter().map(|b| b.1 as u8 as f64).collect()).unwrap();
            prop_assert_eq!(dice_score(&a, &b).unwrap(), dice_score(&b, &a).unwrap());
        }
    }
}
