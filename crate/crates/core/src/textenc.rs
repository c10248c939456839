//! Frozen hashed bag-of-features text backbone with a trainable linear head.
//!
//! Each token selects a fixed random row of `base_table` by a 64-bit FNV-1a
//! hash; the head maps rows to the embedding space. Sentence vectors are the
//! mean of projected token vectors, L2-normalized.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{normalize, normalize_backward, read_tensor, write_tensor, Tensor};
use crate::optim::Parameterized;

pub const HEAD_WEIGHT: &str = "head.weight";
pub const HEAD_BIAS: &str = "head.bias";

/// Lowercased word tokens; never empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence(Vec<String>);

impl TokenSequence {
    pub fn tokens(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn join(&self) -> String {
        self.0.join(" ")
    }
}

/// Lowercase and split on runs of non-alphanumeric characters.
pub fn tokenize(text: &str) -> Result<TokenSequence> {
    let tokens: Vec<String> = text
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect();
    if tokens.is_empty() {
        return Err(Error::EmptyText);
    }
    Ok(TokenSequence(tokens))
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedderConfig {
    pub vocab_hash_dim: usize,
    pub input_dim: usize,
    pub embed_dim: usize,
    /// Seeds the frozen base table.
    pub seed: u64,
    /// Seeds the initial head weights.
    pub head_seed: u64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            vocab_hash_dim: 256,
            input_dim: 64,
            embed_dim: 32,
            seed: 7,
            head_seed: 8,
        }
    }
}

impl EmbedderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_hash_dim == 0 || self.input_dim == 0 || self.embed_dim == 0 {
            return Err(Error::Config("embedder dimensions must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedder {
    config: EmbedderConfig,
    base_table: Tensor,
    head_weight: Tensor,
    head_bias: Tensor,
}

/// Cached forward pass of one text through the embedder.
#[derive(Debug, Clone)]
pub struct TextForward {
    /// Mean of the selected base rows.
    pub pooled: Vec<f64>,
    /// Unit-norm output.
    pub unit: Vec<f64>,
    pub norm: f64,
}

impl Embedder {
    pub fn new(config: EmbedderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let base_table = Tensor::randn(&[config.vocab_hash_dim, config.input_dim], 1.0, &mut rng);
        let (head_weight, head_bias) = init_head(&config, config.head_seed);
        Ok(Self {
            config,
            base_table,
            head_weight,
            head_bias,
        })
    }

    pub fn config(&self) -> &EmbedderConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn base_table(&self) -> &Tensor {
        &self.base_table
    }

    pub fn head_weight(&self) -> &Tensor {
        &self.head_weight
    }

    pub fn head_bias(&self) -> &Tensor {
        &self.head_bias
    }

    /// Same frozen backbone with a freshly initialized head.
    pub fn with_fresh_head(&self, head_seed: u64) -> Self {
        let mut config = self.config;
        config.head_seed = head_seed;
        let (head_weight, head_bias) = init_head(&config, head_seed);
        Self {
            config,
            base_table: self.base_table.clone(),
            head_weight,
            head_bias,
        }
    }

    fn row_of(&self, token: &str) -> &[f64] {
        let r = (fnv1a64(token.as_bytes()) % self.config.vocab_hash_dim as u64) as usize;
        let w = self.config.input_dim;
        &self.base_table.data()[r * w..(r + 1) * w]
    }

    fn project(&self, x: &[f64]) -> Vec<f64> {
        let (din, d) = (self.config.input_dim, self.config.embed_dim);
        let w = self.head_weight.data();
        let mut out = self.head_bias.data().to_vec();
        for (i, &xi) in x.iter().enumerate().take(din) {
            if xi == 0.0 {
                continue;
            }
            let row = &w[i * d..(i + 1) * d];
            out.iter_mut().zip(row).for_each(|(o, wij)| *o += xi * wij);
        }
        out
    }

    /// Per-token vectors as a `tokens × embed_dim` tensor.
    pub fn embed_tokens(&self, ts: &TokenSequence) -> Result<Tensor> {
        if ts.is_empty() {
            return Err(Error::EmptyText);
        }
        let d = self.config.embed_dim;
        let mut data = Vec::with_capacity(ts.len() * d);
        for tok in ts.tokens() {
            data.extend(self.project(self.row_of(tok)));
        }
        Tensor::new(vec![ts.len(), d], data)
    }

    pub fn forward_tokens(&self, ts: &TokenSequence) -> Result<TextForward> {
        if ts.is_empty() {
            return Err(Error::EmptyText);
        }
        let mut pooled = vec![0.0; self.config.input_dim];
        for tok in ts.tokens() {
            pooled
                .iter_mut()
                .zip(self.row_of(tok))
                .for_each(|(p, r)| *p += r);
        }
        let n = ts.len() as f64;
        pooled.iter_mut().for_each(|p| *p /= n);
        let raw = self.project(&pooled);
        let (unit, norm) = normalize(&raw)?;
        Ok(TextForward { pooled, unit, norm })
    }

    pub fn forward(&self, text: &str) -> Result<TextForward> {
        self.forward_tokens(&tokenize(text)?)
    }

    /// Mean-pooled, L2-normalized sentence vector.
    pub fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        Ok(self.forward(text)?.unit)
    }

    /// Accumulates head gradients given dL/d(unit output).
    pub fn backward(&self, fwd: &TextForward, grad_unit: &[f64], grads: &mut HeadGrads) {
        let g_raw = normalize_backward(&fwd.unit, fwd.norm, grad_unit);
        let d = self.config.embed_dim;
        let gw = grads.weight.data_mut();
        for (i, &xi) in fwd.pooled.iter().enumerate() {
            let row = &mut gw[i * d..(i + 1) * d];
            row.iter_mut().zip(&g_raw).for_each(|(w, g)| *w += xi * g);
        }
        grads
            .bias
            .data_mut()
            .iter_mut()
            .zip(&g_raw)
            .for_each(|(b, g)| *b += g);
    }

    pub fn zero_grads(&self) -> HeadGrads {
        HeadGrads {
            weight: Tensor::zeros(self.head_weight.dims()),
            bias: Tensor::zeros(self.head_bias.dims()),
        }
    }

    pub fn save(&self, dir: &Path, prefix: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_tensor(&dir.join(format!("{prefix}.base.emad")), &self.base_table)?;
        write_tensor(&dir.join(format!("{prefix}.head.emad")), &self.head_weight)?;
        write_tensor(&dir.join(format!("{prefix}.bias.emad")), &self.head_bias)?;
        fs::write(
            dir.join(format!("{prefix}.json")),
            serde_json::to_string_pretty(&self.config)?,
        )?;
        Ok(())
    }

    pub fn load(dir: &Path, prefix: &str) -> Result<Self> {
        let sidecar = dir.join(format!("{prefix}.json"));
        if !sidecar.exists() {
            return Err(Error::MissingCheckpoint(sidecar));
        }
        let config: EmbedderConfig = serde_json::from_str(&fs::read_to_string(&sidecar)?)?;
        config.validate()?;
        let base_table = read_tensor(&dir.join(format!("{prefix}.base.emad")))?;
        let head_weight = read_tensor(&dir.join(format!("{prefix}.head.emad")))?;
        let head_bias = read_tensor(&dir.join(format!("{prefix}.bias.emad")))?;
        let expect = [
            (&base_table, vec![config.vocab_hash_dim, config.input_dim]),
            (&head_weight, vec![config.input_dim, config.embed_dim]),
            (&head_bias, vec![config.embed_dim]),
        ];
        for (t, dims) in expect {
            if t.dims() != dims.as_slice() {
                return Err(Error::dims(&dims, t.dims()));
            }
        }
        Ok(Self {
            config,
            base_table,
            head_weight,
            head_bias,
        })
    }
}

fn init_head(config: &EmbedderConfig, seed: u64) -> (Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let std = 1.0 / (config.input_dim as f64).sqrt();
    (
        Tensor::randn(&[config.input_dim, config.embed_dim], std, &mut rng),
        Tensor::zeros(&[config.embed_dim]),
    )
}

/// Gradient buffers for the trainable head.
#[derive(Debug, Clone)]
pub struct HeadGrads {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl HeadGrads {
    pub fn into_map(self, prefix: &str) -> std::collections::BTreeMap<String, Tensor> {
        std::collections::BTreeMap::from([
            (format!("{prefix}{HEAD_WEIGHT}"), self.weight),
            (format!("{prefix}{HEAD_BIAS}"), self.bias),
        ])
    }
}

impl Parameterized for Embedder {
    fn parameters(&self) -> Vec<(String, &Tensor)> {
        vec![
            (HEAD_WEIGHT.into(), &self.head_weight),
            (HEAD_BIAS.into(), &self.head_bias),
        ]
    }

    fn parameters_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            (HEAD_WEIGHT.into(), &mut self.head_weight),
            (HEAD_BIAS.into(), &mut self.head_bias),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{dot, finite_difference_check, LossWithGrad};
    use crate::optim::sgd_step;
    use proptest::prelude::*;

    fn toks(words: &[&str]) -> Vec<String> {
        words.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn tokenize_examples() {
        let t = tokenize("Hippocampal volume 4,724 mm3").unwrap();
        assert_eq!(t.tokens(), toks(&["hippocampal", "volume", "4", "724", "mm3"]).as_slice());
        assert_eq!(tokenize("CN").unwrap().tokens(), toks(&["cn"]).as_slice());
        assert!(matches!(tokenize(" ,.; "), Err(Error::EmptyText)));
    }

    proptest! {
        #[test]
        fn tokenize_is_idempotent(text in "[A-Za-z0-9 ,.;:'()-]{1,60}") {
            if let Ok(t) = tokenize(&text) {
                prop_assert_eq!(tokenize(&t.join()).unwrap(), t);
            }
        }
    }

    #[test]
    fn embeddings_are_deterministic() {
        let a = Embedder::new(EmbedderConfig::default()).unwrap();
        let b = Embedder::new(EmbedderConfig::default()).unwrap();
        let ts = tokenize("memory memory").unwrap();
        let v = a.embed_tokens(&ts).unwrap();
        assert_eq!(v.view2().row(0), v.view2().row(1));
        assert_eq!(a.embed_text("amyloid is low").unwrap(), b.embed_text("amyloid is low").unwrap());
    }

    #[test]
    fn sentence_vectors_are_unit_and_order_free() {
        let e = Embedder::new(EmbedderConfig::default()).unwrap();
        let one = e.embed_text("hippocampal").unwrap();
        let tok = e.embed_tokens(&tokenize("hippocampal").unwrap()).unwrap();
        let (expect, _) = normalize(tok.data()).unwrap();
        for (a, b) in one.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
        for text in ["a b c", "Total tau is elevated.", "x"] {
            let v = e.embed_text(text).unwrap();
            assert!((dot(&v, &v).sqrt() - 1.0).abs() < 1e-9);
        }
        let ab = e.embed_text("memory is impaired").unwrap();
        let ba = e.embed_text("impaired is memory").unwrap();
        for (a, b) in ab.iter().zip(&ba) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn probe_loss(e: &Embedder, target: &[f64]) -> LossWithGrad {
        let fwd = e.forward("left hippocampal volume 2,310 mm3").unwrap();
        let value = dot(&fwd.unit, target);
        let mut g = e.zero_grads();
        e.backward(&fwd, target, &mut g);
        LossWithGrad {
            value,
            grads: g.into_map(""),
        }
    }

    #[test]
    fn head_gradient_matches_finite_differences() {
        let e = Embedder::new(EmbedderConfig::default()).unwrap();
        let target: Vec<f64> = (0..32).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect();
        let lg = probe_loss(&e, &target);
        let err_w = finite_difference_check(
            |w| {
                let mut e2 = e.clone();
                e2.head_weight = w.clone();
                dot(&e2.embed_text("left hippocampal volume 2,310 mm3").unwrap(), &target)
            },
            e.head_weight(),
            lg.grad(HEAD_WEIGHT).unwrap(),
            1e-5,
        );
        let err_b = finite_difference_check(
            |b| {
                let mut e2 = e.clone();
                e2.head_bias = b.clone();
                dot(&e2.embed_text("left hippocampal volume 2,310 mm3").unwrap(), &target)
            },
            e.head_bias(),
            lg.grad(HEAD_BIAS).unwrap(),
            1e-5,
        );
        assert!(err_w < 1e-4 && err_b < 1e-4, "{err_w} {err_b}");
        assert_eq!(
            lg.grads.keys().collect::<Vec<_>>(),
            vec![HEAD_BIAS, HEAD_WEIGHT]
        );
    }

    #[test]
    fn optimizer_step_leaves_base_table_untouched() {
        let mut e = Embedder::new(EmbedderConfig::default()).unwrap();
        let before = e.base_table().bit_pattern();
        let lg = probe_loss(&e, &[1.0; 32]);
        sgd_step(&mut e, &lg.grads, 0.1);
        assert_eq!(before, e.base_table().bit_pattern());
        assert_ne!(e, Embedder::new(EmbedderConfig::default()).unwrap());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let e = Embedder::new(EmbedderConfig::default()).unwrap();
        e.save(dir.path(), "emb").unwrap();
        let back = Embedder::load(dir.path(), "emb").unwrap();
        assert_eq!(back.config(), e.config());
        for (a, b) in back.head_weight().data().iter().zip(e.head_weight().data()) {
            assert_eq!(*a, (*b as f32) as f64);
        }
        assert!(matches!(
            Embedder::load(dir.path(), "missing"),
            Err(Error::MissingCheckpoint(_))
        ));
    }
}
