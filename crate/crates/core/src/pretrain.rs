//! Alignment and restoration pretraining: symmetric image–text contrastive
//! loss, reconstruction losses and momentum (EMA) copies.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cohort::{Cohort, LEFT_HIPPOCAMPUS, RIGHT_HIPPOCAMPUS};
use crate::error::{Error, Result};
use crate::numeric::{dot, log_softmax, mse_loss_grad, normalize, normalize_backward, token_nll_logits, LossWithGrad, Tensor};
use crate::optim::{Adam, Parameterized};
use crate::sea::patchify;
use crate::textenc::{tokenize, Embedder, EmbedderConfig, TextForward};

const UNK: &str = "<unk>";

fn rows_of(t: &Tensor) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::InvalidTensor(format!("expected a matrix, got {:?}", t.dims())));
    }
    Ok((t.dims()[0], t.dims()[1]))
}

fn row(t: &Tensor, i: usize) -> &[f64] {
    let w = t.dims()[1];
    &t.data()[i * w..(i + 1) * w]
}

/// Cross-entropy of `logits` against `target` and its gradient.
fn row_ce(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let lp = log_softmax(logits);
    let grad = lp
        .iter()
        .enumerate()
        .map(|(k, l)| l.exp() - if k == target { 1.0 } else { 0.0 })
        .collect();
    (-lp[target], grad)
}

/// One contrastive direction: row `i` of `a` against all of `b` plus the
/// rows `j ≠ i` of `extra`. Accumulates gradients into `ga`, `gb`.
fn itc_direction(
    a: &Tensor,
    b: &Tensor,
    extra: Option<&Tensor>,
    tau: f64,
    ga: &mut [f64],
    gb: &mut [f64],
) -> f64 {
    let (n, d) = (a.dims()[0], a.dims()[1]);
    let mut total = 0.0;
    for i in 0..n {
        let ai = row(a, i);
        let mut logits: Vec<f64> = (0..n).map(|j| dot(ai, row(b, j)) / tau).collect();
        let extra_rows: Vec<usize> = match extra {
            Some(_) => (0..n).filter(|&j| j != i).collect(),
            None => Vec::new(),
        };
        if let Some(m) = extra {
            logits.extend(extra_rows.iter().map(|&j| dot(ai, row(m, j)) / tau));
        }
        let (l, g) = row_ce(&logits, i);
        total += l / n as f64;
        for (j, gj) in g.iter().take(n).enumerate() {
            let c = gj / (tau * n as f64);
            for k in 0..d {
                ga[i * d + k] += c * b.data()[j * d + k];
                gb[j * d + k] += c * ai[k];
            }
        }
        if let Some(m) = extra {
            for (&j, gj) in extra_rows.iter().zip(&g[n..]) {
                let c = gj / (tau * n as f64);
                for k in 0..d {
                    ga[i * d + k] += c * m.data()[j * d + k];
                }
            }
        }
    }
    total
}

/// Symmetric contrastive loss over the `B × B` cosine matrix: the mean of
/// image→text and text→image cross-entropies with the diagonal as targets.
/// Gradients w.r.t. the unit features under `"img"` and `"txt"`.
pub fn itc_loss(img: &Tensor, txt: &Tensor, tau: f64) -> Result<LossWithGrad> {
    itc_loss_with_momentum(img, txt, None, tau)
}

/// [`itc_loss`] where each row additionally sees the momentum features of the
/// other rows as negatives; momentum features receive no gradient.
pub fn itc_loss_with_momentum(
    img: &Tensor,
    txt: &Tensor,
    momentum: Option<(&Tensor, &Tensor)>,
    tau: f64,
) -> Result<LossWithGrad> {
    let (n, d) = rows_of(img)?;
    if txt.dims() != img.dims() {
        return Err(Error::dims(img.dims(), txt.dims()));
    }
    if let Some((mi, mt)) = momentum {
        img.ensure_same_dims(mi)?;
        img.ensure_same_dims(mt)?;
    }
    if n < 2 {
        return Err(Error::Config("contrastive batch needs at least 2 pairs".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::Config("tau must be positive".into()));
    }
    let mut gi = vec![0.0; n * d];
    let mut gt = vec![0.0; n * d];
    let i2t = itc_direction(img, txt, momentum.map(|m| m.1), tau, &mut gi, &mut gt);
    let t2i = itc_direction(txt, img, momentum.map(|m| m.0), tau, &mut gt, &mut gi);
    gi.iter_mut().chain(gt.iter_mut()).for_each(|g| *g *= 0.5);
    Ok(LossWithGrad::new(0.5 * (i2t + t2i))
        .with_grad("img", Tensor::new(vec![n, d], gi)?)
        .with_grad("txt", Tensor::new(vec![n, d], gt)?))
}

/// `(MSE(x_v, x̂_v), token cross-entropy of txt_logits against x_t_tokens)`.
pub fn reconstruction_losses(
    x_v: &Tensor,
    x_v_hat: &Tensor,
    x_t_tokens: &[usize],
    txt_logits: &Tensor,
) -> Result<(LossWithGrad, LossWithGrad)> {
    Ok((mse_loss_grad(x_v, x_v_hat)?, token_nll_logits(txt_logits, x_t_tokens)?))
}

pub fn pretrain_objective(l_itc: f64, l_res_v: f64, l_res_t: f64, lambda_res: f64) -> f64 {
    l_itc + lambda_res * (l_res_v + l_res_t)
}

/// `momentum ← m·momentum + (1−m)·online`.
pub fn ema_update_tensor(momentum: &mut Tensor, online: &Tensor, m: f64) -> Result<()> {
    momentum.ensure_same_dims(online)?;
    if !(0.0..1.0).contains(&m) {
        return Err(Error::Config(format!("momentum {m} outside [0, 1)")));
    }
    for (a, b) in momentum.data_mut().iter_mut().zip(online.data()) {
        *a = m * *a + (1.0 - m) * b;
    }
    Ok(())
}

/// Momentum copies of a model's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState {
    pub m: f64,
    pub momentum: BTreeMap<String, Tensor>,
}

impl EmaState {
    pub fn new<P: Parameterized + ?Sized>(online: &P, m: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&m) {
            return Err(Error::Config(format!("momentum {m} outside [0, 1)")));
        }
        Ok(Self {
            m,
            momentum: online.parameters().into_iter().map(|(n, t)| (n, t.clone())).collect(),
        })
    }

    pub fn update<P: Parameterized + ?Sized>(&mut self, online: &P) -> Result<()> {
        let params = online.parameters();
        if params.len() != self.momentum.len() {
            return Err(Error::dims(&[self.momentum.len()], &[params.len()]));
        }
        for (name, t) in params {
            let mom = self
                .momentum
                .get_mut(&name)
                .ok_or_else(|| Error::Config(format!("no momentum copy for `{name}`")))?;
            ema_update_tensor(mom, t, self.m)?;
        }
        Ok(())
    }
}

/// A paired volume and text.
#[derive(Debug, Clone)]
pub struct PretrainPair {
    pub volume: Tensor,
    pub text: String,
}

/// Each patient's volume with its hippocampal descriptors.
pub fn pairs_from_cohort(cohort: &Cohort, indices: &[usize]) -> Vec<PretrainPair> {
    indices
        .iter()
        .map(|&i| {
            let p = &cohort.patients[i];
            let text = [LEFT_HIPPOCAMPUS, RIGHT_HIPPOCAMPUS]
                .iter()
                .filter_map(|s| p.record.evidence_index(s))
                .map(|k| p.record.evidence[k].descriptor.clone())
                .collect::<Vec<_>>()
                .join(" ");
            PretrainPair {
                volume: p.volume.clone(),
                text,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub tau: f64,
    pub lambda_res: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Use momentum features as extra contrastive negatives.
    pub momentum_negatives: bool,
    /// Edge of the cubes averaged into image features.
    pub pool: usize,
    pub seed: u64,
    pub embedder: EmbedderConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            lambda_res: 0.5,
            steps: 200,
            batch_size: 8,
            lr: 0.005,
            momentum: 0.995,
            momentum_negatives: false,
            pool: 4,
            seed: 19,
            embedder: EmbedderConfig::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.embedder.validate()?;
        if !(self.tau > 0.0) || !(self.lambda_res >= 0.0) || !(self.lr > 0.0) {
            return Err(Error::Config("tau and lr must be positive, lambda_res nonnegative".into()));
        }
        if self.batch_size < 2 || self.pool == 0 {
            return Err(Error::Config("batch_size must be at least 2 and pool positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

pub const IMG_ENC_W: &str = "image.encoder.weight";
pub const IMG_ENC_B: &str = "image.encoder.bias";
pub const IMG_DEC_W: &str = "image.decoder.weight";
pub const IMG_DEC_B: &str = "image.decoder.bias";
pub const TXT_DEC_W: &str = "text.decoder.weight";
pub const TXT_DEC_POS: &str = "text.decoder.position";
pub const TXT_PREFIX: &str = "text.";

/// Linear image encoder over pooled cubes, hashed-bag text encoder, and
/// linear decoders back to voxels and per-position token logits.
#[derive(Debug, Clone)]
pub struct PretrainModel {
    pub text: Embedder,
    params: BTreeMap<String, Tensor>,
    vocab: BTreeMap<String, usize>,
    pool: usize,
    volume_dim: usize,
    max_len: usize,
}

struct ImageForward {
    pooled: Vec<f64>,
    unit: Vec<f64>,
    norm: f64,
}

impl PretrainModel {
    pub fn new(pairs: &[PretrainPair], cfg: &PretrainConfig) -> Result<Self> {
        cfg.validate()?;
        let first = pairs.first().ok_or(Error::EmptyDataset)?;
        let volume_dim = first.volume.dims()[0];
        let n_pool = patchify(&first.volume, cfg.pool)?.nrows();
        let mut words = BTreeSet::new();
        let mut max_len = 1;
        for p in pairs {
            let ts = tokenize(&p.text)?;
            max_len = max_len.max(ts.len());
            words.extend(ts.tokens().iter().cloned());
        }
        let mut vocab: BTreeMap<String, usize> = BTreeMap::new();
        vocab.insert(UNK.into(), 0);
        for w in words {
            let id = vocab.len();
            vocab.entry(w).or_insert(id);
        }
        let d = cfg.embedder.embed_dim;
        let voxels = volume_dim.pow(3);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = BTreeMap::new();
        params.insert(IMG_ENC_W.into(), Tensor::randn(&[n_pool, d], 1.0 / (n_pool as f64).sqrt(), &mut rng));
        params.insert(IMG_ENC_B.into(), Tensor::zeros(&[d]));
        params.insert(IMG_DEC_W.into(), Tensor::randn(&[d, voxels], 0.01, &mut rng));
        params.insert(IMG_DEC_B.into(), Tensor::zeros(&[voxels]));
        params.insert(TXT_DEC_W.into(), Tensor::randn(&[d, vocab.len()], 0.01, &mut rng));
        params.insert(TXT_DEC_POS.into(), Tensor::zeros(&[max_len, vocab.len()]));
        Ok(Self {
            text: Embedder::new(cfg.embedder)?,
            params,
            vocab,
            pool: cfg.pool,
            volume_dim,
            max_len,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn token_ids(&self, text: &str) -> Result<Vec<usize>> {
        Ok(tokenize(text)?
            .tokens()
            .iter()
            .take(self.max_len)
            .map(|t| self.vocab.get(t).copied().unwrap_or(0))
            .collect())
    }

    fn image_forward(&self, volume: &Tensor) -> Result<ImageForward> {
        if volume.dims() != [self.volume_dim; 3] {
            return Err(Error::dims(&[self.volume_dim; 3], volume.dims()));
        }
        let pooled: Vec<f64> = patchify(volume, self.pool)?
            .rows()
            .into_iter()
            .map(|r| r.mean().unwrap_or(0.0))
            .collect();
        let w = &self.params[IMG_ENC_W];
        let d = w.dims()[1];
        let mut raw = self.params[IMG_ENC_B].data().to_vec();
        for (i, &x) in pooled.iter().enumerate() {
            for k in 0..d {
                raw[k] += x * w.data()[i * d + k];
            }
        }
        let (unit, norm) = normalize(&raw)?;
        Ok(ImageForward { pooled, unit, norm })
    }

    /// Unit image feature.
    pub fn embed_image(&self, volume: &Tensor) -> Result<Vec<f64>> {
        Ok(self.image_forward(volume)?.unit)
    }

    /// `x̂ = W_decᵀ·h + b` over the flattened grid.
    pub fn reconstruct_image(&self, h: &[f64]) -> Result<Tensor> {
        let w = &self.params[IMG_DEC_W];
        let v = w.dims()[1];
        let mut out = self.params[IMG_DEC_B].data().to_vec();
        for (k, &hk) in h.iter().enumerate() {
            let r = &w.data()[k * v..(k + 1) * v];
            out.iter_mut().zip(r).for_each(|(o, wk)| *o += hk * wk);
        }
        Tensor::new(vec![self.volume_dim; 3], out)
    }

    /// Per-position logits `W_decᵀ·h + P_j` for `len` positions.
    pub fn text_logits(&self, h: &[f64], len: usize) -> Result<Tensor> {
        let w = &self.params[TXT_DEC_W];
        let pos = &self.params[TXT_DEC_POS];
        let v = w.dims()[1];
        let mut base = vec![0.0; v];
        for (k, &hk) in h.iter().enumerate() {
            base.iter_mut().zip(&w.data()[k * v..(k + 1) * v]).for_each(|(o, wk)| *o += hk * wk);
        }
        let mut data = Vec::with_capacity(len * v);
        for j in 0..len.min(self.max_len) {
            data.extend(base.iter().zip(&pos.data()[j * v..(j + 1) * v]).map(|(b, p)| b + p));
        }
        Tensor::new(vec![len.min(self.max_len), v], data)
    }

    /// Stage objective over a batch of pairs with gradients for every parameter.
    pub fn batch_loss(&self, batch: &[&PretrainPair], cfg: &PretrainConfig, ema: Option<&PretrainModel>) -> Result<(StepLoss, BTreeMap<String, Tensor>)> {
        let n = batch.len();
        let d = self.text.dim();
        let imgs: Vec<ImageForward> = batch.iter().map(|p| self.image_forward(&p.volume)).collect::<Result<_>>()?;
        let txts: Vec<TextForward> = batch.iter().map(|p| self.text.forward(&p.text)).collect::<Result<_>>()?;
        let img_t = Tensor::new(vec![n, d], imgs.iter().flat_map(|f| f.unit.clone()).collect())?;
        let txt_t = Tensor::new(vec![n, d], txts.iter().flat_map(|f| f.unit.clone()).collect())?;
        let momentum = match ema {
            Some(m) if cfg.momentum_negatives => {
                let mi: Vec<f64> = batch.iter().map(|p| m.embed_image(&p.volume)).collect::<Result<Vec<_>>>()?.concat();
                let mt: Vec<f64> = batch.iter().map(|p| m.text.embed_text(&p.text)).collect::<Result<Vec<_>>>()?.concat();
                Some((Tensor::new(vec![n, d], mi)?, Tensor::new(vec![n, d], mt)?))
            }
            _ => None,
        };
        let itc = itc_loss_with_momentum(&img_t, &txt_t, momentum.as_ref().map(|(a, b)| (a, b)), cfg.tau)?;
        let mut g_img = itc.grad("img").expect("img gradient").data().to_vec();
        let mut g_txt = itc.grad("txt").expect("txt gradient").data().to_vec();

        let mut grads: BTreeMap<String, Tensor> = self
            .params
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::zeros(t.dims())))
            .collect();
        let (mut l_v, mut l_t) = (0.0, 0.0);
        let w_res = cfg.lambda_res / n as f64;
        for (i, p) in batch.iter().enumerate() {
            let hv = &imgs[i].unit;
            let ht = &txts[i].unit;
            let targets = self.token_ids(&p.text)?;
            let (rv, rt) = reconstruction_losses(
                &p.volume,
                &self.reconstruct_image(hv)?,
                &targets,
                &self.text_logits(ht, targets.len())?,
            )?;
            l_v += rv.value / n as f64;
            l_t += rt.value / n as f64;
            if w_res == 0.0 {
                continue;
            }
            let gx = rv.grad("x_hat").expect("x_hat gradient").data();
            let wdv = self.params[IMG_DEC_W].data();
            let vox = gx.len();
            {
                let gw = grads.get_mut(IMG_DEC_W).expect("param").data_mut();
                for (k, &hk) in hv.iter().enumerate() {
                    for (v, &g) in gx.iter().enumerate() {
                        gw[k * vox + v] += w_res * hk * g;
                    }
                }
            }
            grads
                .get_mut(IMG_DEC_B)
                .expect("param")
                .data_mut()
                .iter_mut()
                .zip(gx)
                .for_each(|(a, g)| *a += w_res * g);
            for k in 0..d {
                g_img[i * d + k] += w_res * dot(&wdv[k * vox..(k + 1) * vox], gx);
            }

            let gl = rt.grad("logits").expect("logits gradient");
            let v = gl.dims()[1];
            let wdt = self.params[TXT_DEC_W].data();
            let mut col = vec![0.0; v];
            for j in 0..gl.dims()[0] {
                let r = &gl.data()[j * v..(j + 1) * v];
                col.iter_mut().zip(r).for_each(|(c, g)| *c += g);
                grads.get_mut(TXT_DEC_POS).expect("param").data_mut()[j * v..(j + 1) * v]
                    .iter_mut()
                    .zip(r)
                    .for_each(|(a, g)| *a += w_res * g);
            }
            {
                let gw = grads.get_mut(TXT_DEC_W).expect("param").data_mut();
                for (k, &hk) in ht.iter().enumerate() {
                    for (u, &c) in col.iter().enumerate() {
                        gw[k * v + u] += w_res * hk * c;
                    }
                }
            }
            for k in 0..d {
                g_txt[i * d + k] += w_res * dot(&wdt[k * v..(k + 1) * v], &col);
            }
        }

        let enc_w = self.params[IMG_ENC_W].data().len();
        let mut gw_enc = vec![0.0; enc_w];
        let mut gb_enc = vec![0.0; d];
        let mut head = self.text.zero_grads();
        for i in 0..n {
            let f = &imgs[i];
            let g_raw = normalize_backward(&f.unit, f.norm, &g_img[i * d..(i + 1) * d]);
            for (r, &x) in f.pooled.iter().enumerate() {
                for k in 0..d {
                    gw_enc[r * d + k] += x * g_raw[k];
                }
            }
            gb_enc.iter_mut().zip(&g_raw).for_each(|(a, g)| *a += g);
            self.text.backward(&txts[i], &g_txt[i * d..(i + 1) * d], &mut head);
        }
        grads.insert(IMG_ENC_W.into(), Tensor::new(self.params[IMG_ENC_W].dims().to_vec(), gw_enc)?);
        grads.insert(IMG_ENC_B.into(), Tensor::vector(gb_enc)?);
        grads.extend(head.into_map(TXT_PREFIX));
        let loss = StepLoss {
            step: 0,
            l_itc: itc.value,
            l_res_v: l_v,
            l_res_t: l_t,
            l_pt: pretrain_objective(itc.value, l_v, l_t, cfg.lambda_res),
        };
        Ok((loss, grads))
    }
}

impl Parameterized for PretrainModel {
    fn parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self.params.iter().map(|(k, v)| (k.clone(), v)).collect();
        out.extend(self.text.parameters().into_iter().map(|(k, v)| (format!("{TXT_PREFIX}{k}"), v)));
        out
    }

    fn parameters_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = self.params.iter_mut().map(|(k, v)| (k.clone(), v)).collect();
        out.extend(
            self.text
                .parameters_mut()
                .into_iter()
                .map(|(k, v)| (format!("{TXT_PREFIX}{k}"), v)),
        );
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: usize,
    pub l_itc: f64,
    pub l_res_v: f64,
    pub l_res_t: f64,
    pub l_pt: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainResult {
    pub model: PretrainModel,
    pub momentum: PretrainModel,
    pub log: Vec<StepLoss>,
}

fn copy_momentum(target: &mut PretrainModel, ema: &EmaState) {
    for (name, t) in target.parameters_mut() {
        if let Some(m) = ema.momentum.get(&name) {
            *t = m.clone();
        }
    }
}

pub fn pretrain(pairs: &[PretrainPair], cfg: &PretrainConfig) -> Result<PretrainResult> {
    let mut model = PretrainModel::new(pairs, cfg)?;
    if pairs.len() < 2 {
        return Err(Error::Config("pretraining needs at least 2 pairs".into()));
    }
    let mut ema = EmaState::new(&model, cfg.momentum)?;
    let mut momentum = model.clone();
    let mut opt = Adam::new(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut cursor = order.len();
    let bs = cfg.batch_size.min(pairs.len());
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        if cursor + bs > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let batch: Vec<&PretrainPair> = order[cursor..cursor + bs].iter().map(|&i| &pairs[i]).collect();
        cursor += bs;
        let (mut loss, grads) = model.batch_loss(&batch, cfg, Some(&momentum))?;
        loss.step = step;
        log.push(loss);
        opt.step(&mut model, &grads);
        ema.update(&model)?;
        copy_momentum(&mut momentum, &ema);
    }
    Ok(PretrainResult { model, momentum, log })
}

pub fn write_pretrain_csv(path: &Path, log: &[StepLoss]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in log {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
