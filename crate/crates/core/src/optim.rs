//! Parameter access and first-order optimizers.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::numeric::Tensor;

/// Anything that owns named trainable tensors.
pub trait Parameterized {
    fn parameters(&self) -> Vec<(String, &Tensor)>;
    fn parameters_mut(&mut self) -> Vec<(String, &mut Tensor)>;

    /// SHA-256 over names and bit patterns of every parameter, in order.
    fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.parameters() {
            h.update(name.as_bytes());
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Plain gradient descent: `θ ← θ − lr·g` for every parameter with a gradient.
pub fn sgd_step<P: Parameterized + ?Sized>(
    model: &mut P,
    grads: &BTreeMap<String, Tensor>,
    lr: f64,
) {
    for (name, p) in model.parameters_mut() {
        if let Some(g) = grads.get(&name) {
            p.add_scaled(g, -lr).expect("gradient dims match parameter");
        }
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.values_mut().for_each(|g| g.scale(s));
    }
    norm
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step<P: Parameterized + ?Sized>(
        &mut self,
        model: &mut P,
        grads: &BTreeMap<String, Tensor>,
    ) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, p) in model.parameters_mut() {
            let Some(g) = grads.get(&name) else { continue };
            let (m, v) = self
                .moments
                .entry(name)
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                *w -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Quad {
        x: Tensor,
    }

    impl Parameterized for Quad {
        fn parameters(&self) -> Vec<(String, &Tensor)> {
            vec![("x".into(), &self.x)]
        }
        fn parameters_mut(&mut self) -> Vec<(String, &mut Tensor)> {
            vec![("x".into(), &mut self.x)]
        }
    }

    fn grad_of(q: &Quad) -> BTreeMap<String, Tensor> {
        let mut g = q.x.clone();
        g.scale(2.0);
        BTreeMap::from([("x".to_string(), g)])
    }

    #[test]
    fn sgd_and_adam_minimize_a_quadratic() {
        let mut q = Quad {
            x: Tensor::vector(vec![3.0, -2.0]).unwrap(),
        };
        for _ in 0..200 {
            let g = grad_of(&q);
            sgd_step(&mut q, &g, 0.1);
        }
        assert!(q.x.norm() < 1e-6);

        let mut q = Quad {
            x: Tensor::vector(vec![3.0, -2.0]).unwrap(),
        };
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let g = grad_of(&q);
            opt.step(&mut q, &g);
        }
        assert!(q.x.norm() < 1e-2);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = BTreeMap::from([("a".to_string(), Tensor::vector(vec![3.0, 4.0]).unwrap())]);
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g["a"].norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fingerprint_tracks_bits() {
        let mut q = Quad {
            x: Tensor::vector(vec![1.0]).unwrap(),
        };
        let a = q.fingerprint();
        q.x.data_mut()[0] = 1.0 + f64::EPSILON;
        assert_ne!(a, q.fingerprint());
    }
}
