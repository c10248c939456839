//! Evidence-conditioned 3D mask decoder: pre-norm transformer blocks with
//! self-attention over visual patch tokens, cross-attention from visual
//! queries to evidence token keys/values, and a feed-forward layer.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{read_tensor, sigmoid, write_tensor, Tensor, VoxelMask, VoxelVolume};
use crate::optim::Parameterized;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub num_layers: usize,
    pub token_dim: usize,
    pub ffn_hidden: usize,
    pub patch: usize,
    pub volume_dim: usize,
    /// When false the cross-attention sub-block is skipped entirely.
    pub cross_attention: bool,
    pub seed: u64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            token_dim: 32,
            ffn_hidden: 64,
            patch: 4,
            volume_dim: 16,
            cross_attention: true,
            seed: 17,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.token_dim == 0 || self.ffn_hidden == 0 || self.patch == 0 {
            return Err(Error::Config("decoder sizes must be positive".into()));
        }
        if self.volume_dim % self.patch != 0 {
            return Err(Error::Config(format!(
                "volume_dim {} is not a multiple of patch {}",
                self.volume_dim, self.patch
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.volume_dim / self.patch
    }

    pub fn num_tokens(&self) -> usize {
        self.grid().pow(3)
    }

    pub fn patch_len(&self) -> usize {
        self.patch.pow(3)
    }
}

/// Splits a cubic volume into non-overlapping `p³` patches, one row each.
pub fn patchify(volume: &Tensor, patch: usize) -> Result<Array2<f64>> {
    let dims = volume.dims();
    if dims.len() != 3 || dims[0] != dims[1] || dims[1] != dims[2] || dims[0] % patch != 0 {
        return Err(Error::InvalidTensor(format!(
            "expected a cube divisible by {patch}, got {dims:?}"
        )));
    }
    let g = dims[0] / patch;
    let mut out = Array2::zeros((g * g * g, patch * patch * patch));
    for (t, mut row) in out.rows_mut().into_iter().enumerate() {
        let (pz, py, px) = (t / (g * g), (t / g) % g, t % g);
        for (j, v) in row.iter_mut().enumerate() {
            let (iz, iy, ix) = (j / (patch * patch), (j / patch) % patch, j % patch);
            *v = volume.data()[volume.offset3(pz * patch + iz, py * patch + iy, px * patch + ix)];
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(tokens: ArrayView2<f64>, patch: usize, dim: usize) -> Tensor {
    let g = dim / patch;
    let mut out = Tensor::zeros(&[dim, dim, dim]);
    for (t, row) in tokens.rows().into_iter().enumerate() {
        let (pz, py, px) = (t / (g * g), (t / g) % g, t % g);
        for (j, v) in row.iter().enumerate() {
            let (iz, iy, ix) = (j / (patch * patch), (j / patch) % patch, j % patch);
            let o = out.offset3(pz * patch + iz, py * patch + iy, px * patch + ix);
            out.data_mut()[o] = *v;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegDecoder {
    config: DecoderConfig,
    params: BTreeMap<String, Tensor>,
}

fn lp(l: usize, name: &str) -> String {
    format!("layers.{l}.{name}")
}

struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

struct AttnCache {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    a: Array2<f64>,
    o: Array2<f64>,
}

struct LayerCache {
    h1: Array2<f64>,
    ln1: LnCache,
    sa: AttnCache,
    h2: Option<(Array2<f64>, LnCache, AttnCache)>,
    h3: Array2<f64>,
    ln3: LnCache,
    z1: Array2<f64>,
    r: Array2<f64>,
}

/// Intermediate values of one forward pass, kept for the backward pass.
pub struct DecoderTrace {
    patches: Array2<f64>,
    evidence: Array2<f64>,
    layers: Vec<LayerCache>,
    hf: Array2<f64>,
    lnf: LnCache,
    /// Voxel logits on the full grid.
    pub logits: Tensor,
}

fn layer_norm(x: &Array2<f64>, gain: &[f64], bias: &[f64]) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (r, mut row) in xhat.rows_mut().into_iter().enumerate() {
        let mu = row.sum() / d;
        let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / d;
        let is = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|v| (v - mu) * is);
        inv_std[r] = is;
    }
    let mut y = xhat.clone();
    for mut row in y.rows_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = *v * gain[j] + bias[j];
        }
    }
    (y, LnCache { xhat, inv_std })
}

/// Returns dx and accumulates d gain / d bias.
fn layer_norm_backward(
    dy: &Array2<f64>,
    c: &LnCache,
    gain: &[f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
) -> Array2<f64> {
    let d = dy.ncols() as f64;
    let mut dx = Array2::zeros(dy.raw_dim());
    for r in 0..dy.nrows() {
        let dyr = dy.row(r);
        let xr = c.xhat.row(r);
        let mut dxhat = vec![0.0; dy.ncols()];
        for j in 0..dy.ncols() {
            dgain[j] += dyr[j] * xr[j];
            dbias[j] += dyr[j];
            dxhat[j] = dyr[j] * gain[j];
        }
        let m1 = dxhat.iter().sum::<f64>() / d;
        let m2 = dxhat.iter().zip(xr.iter()).map(|(a, b)| a * b).sum::<f64>() / d;
        for j in 0..dy.ncols() {
            dx[[r, j]] = c.inv_std[r] * (dxhat[j] - m1 - xr[j] * m2);
        }
    }
    dx
}

fn softmax_rows(s: &mut Array2<f64>) {
    for mut row in s.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
}

fn attention(
    hq: &Array2<f64>,
    hkv: &Array2<f64>,
    wq: ArrayView2<f64>,
    wk: ArrayView2<f64>,
    wv: ArrayView2<f64>,
    wo: ArrayView2<f64>,
) -> (Array2<f64>, AttnCache) {
    let q = hq.dot(&wq);
    let k = hkv.dot(&wk);
    let v = hkv.dot(&wv);
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let mut a = q.dot(&k.t()) * scale;
    softmax_rows(&mut a);
    let o = a.dot(&v);
    let out = o.dot(&wo);
    (out, AttnCache { q, k, v, a, o })
}

struct AttnGrads {
    dhq: Array2<f64>,
    dhkv: Array2<f64>,
    dwq: Array2<f64>,
    dwk: Array2<f64>,
    dwv: Array2<f64>,
    dwo: Array2<f64>,
}

fn attention_backward(
    dout: &Array2<f64>,
    c: &AttnCache,
    hq: &Array2<f64>,
    hkv: &Array2<f64>,
    wq: ArrayView2<f64>,
    wk: ArrayView2<f64>,
    wv: ArrayView2<f64>,
    wo: ArrayView2<f64>,
) -> AttnGrads {
    let scale = 1.0 / (c.q.ncols() as f64).sqrt();
    let dwo = c.o.t().dot(dout);
    let do_ = dout.dot(&wo.t());
    let dv = c.a.t().dot(&do_);
    let da = do_.dot(&c.v.t());
    let mut ds = da.clone();
    for (mut row, arow) in ds.rows_mut().into_iter().zip(c.a.rows()) {
        let dot: f64 = row.iter().zip(arow.iter()).map(|(x, y)| x * y).sum();
        for (x, y) in row.iter_mut().zip(arow.iter()) {
            *x = y * (*x - dot) * scale;
        }
    }
    let dq = ds.dot(&c.k);
    let dk = ds.t().dot(&c.q);
    AttnGrads {
        dhq: dq.dot(&wq.t()),
        dhkv: dk.dot(&wk.t()) + dv.dot(&wv.t()),
        dwq: hq.t().dot(&dq),
        dwk: hkv.t().dot(&dk),
        dwv: hkv.t().dot(&dv),
        dwo,
    }
}

impl SegDecoder {
    pub fn new(config: DecoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.token_dim;
        let h = config.ffn_hidden;
        let pl = config.patch_len();
        let mut params = BTreeMap::new();
        let mut add = |name: String, t: Tensor| {
            params.insert(name, t);
        };
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        add("patch.weight".into(), Tensor::randn(&[pl, d], inv(pl), &mut rng));
        add("patch.bias".into(), Tensor::zeros(&[d]));
        add("pos".into(), Tensor::randn(&[config.num_tokens(), d], 0.5, &mut rng));
        for l in 0..config.num_layers {
            for ln in ["ln1", "ln2", "ln3"] {
                add(lp(l, &format!("{ln}.gain")), Tensor::filled(&[d], 1.0));
                add(lp(l, &format!("{ln}.bias")), Tensor::zeros(&[d]));
            }
            for blk in ["self", "cross"] {
                for w in ["q", "k", "v"] {
                    add(lp(l, &format!("{blk}.{w}")), Tensor::randn(&[d, d], inv(d), &mut rng));
                }
                add(lp(l, &format!("{blk}.o")), Tensor::randn(&[d, d], 0.5 * inv(d), &mut rng));
            }
            add(lp(l, "ffn.w1"), Tensor::randn(&[d, h], inv(d), &mut rng));
            add(lp(l, "ffn.b1"), Tensor::zeros(&[h]));
            add(lp(l, "ffn.w2"), Tensor::randn(&[h, d], 0.5 * inv(h), &mut rng));
            add(lp(l, "ffn.b2"), Tensor::zeros(&[d]));
        }
        add("final_ln.gain".into(), Tensor::filled(&[d], 1.0));
        add("final_ln.bias".into(), Tensor::zeros(&[d]));
        add("head.weight".into(), Tensor::randn(&[d, pl], inv(d), &mut rng));
        add("head.bias".into(), Tensor::zeros(&[pl]));
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn param(&self, name: &str) -> &Tensor {
        &self.params[name]
    }

    fn view(&self, name: &str) -> ArrayView2<'_, f64> {
        self.params[name].view2()
    }

    fn vec(&self, name: &str) -> &[f64] {
        self.params[name].data()
    }

    /// Sets every cross-attention weight to zero.
    pub fn zero_cross_attention(&mut self) {
        for (name, t) in self.params.iter_mut() {
            if name.contains(".cross.") {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    fn check_inputs(&self, volume: &VoxelVolume, evidence: &Tensor) -> Result<()> {
        let c = &self.config;
        let want = [c.volume_dim; 3];
        if volume.dims() != want {
            return Err(Error::dims(&want, volume.dims()));
        }
        if evidence.rank() != 2 || evidence.dims()[1] != c.token_dim {
            return Err(Error::dims(&[evidence.dims()[0], c.token_dim], evidence.dims()));
        }
        Ok(())
    }

    /// Forward pass returning voxel logits and the cached activations.
    pub fn forward(&self, volume: &VoxelVolume, evidence_tokens: &Tensor) -> Result<DecoderTrace> {
        self.check_inputs(volume, evidence_tokens)?;
        let c = &self.config;
        let patches = patchify(volume, c.patch)?;
        let evidence = evidence_tokens.view2().to_owned();
        let mut x = patches.dot(&self.view("patch.weight")) + &self.view("pos");
        let pb = Array1::from(self.vec("patch.bias").to_vec());
        x += &pb;

        let mut layers = Vec::with_capacity(c.num_layers);
        for l in 0..c.num_layers {
            let (h1, ln1) = layer_norm(&x, self.vec(&lp(l, "ln1.gain")), self.vec(&lp(l, "ln1.bias")));
            let (sa_out, sa) = attention(
                &h1,
                &h1,
                self.view(&lp(l, "self.q")),
                self.view(&lp(l, "self.k")),
                self.view(&lp(l, "self.v")),
                self.view(&lp(l, "self.o")),
            );
            x += &sa_out;
            let h2 = if c.cross_attention {
                let (h2, ln2) = layer_norm(&x, self.vec(&lp(l, "ln2.gain")), self.vec(&lp(l, "ln2.bias")));
                let (ca_out, ca) = attention(
                    &h2,
                    &evidence,
                    self.view(&lp(l, "cross.q")),
                    self.view(&lp(l, "cross.k")),
                    self.view(&lp(l, "cross.v")),
                    self.view(&lp(l, "cross.o")),
                );
                x += &ca_out;
                Some((h2, ln2, ca))
            } else {
                None
            };
            let (h3, ln3) = layer_norm(&x, self.vec(&lp(l, "ln3.gain")), self.vec(&lp(l, "ln3.bias")));
            let z1 = h3.dot(&self.view(&lp(l, "ffn.w1"))) + &Array1::from(self.vec(&lp(l, "ffn.b1")).to_vec());
            let r = z1.mapv(|v| v.max(0.0));
            let f = r.dot(&self.view(&lp(l, "ffn.w2"))) + &Array1::from(self.vec(&lp(l, "ffn.b2")).to_vec());
            x += &f;
            layers.push(LayerCache {
                h1,
                ln1,
                sa,
                h2,
                h3,
                ln3,
                z1,
                r,
            });
        }
        let (hf, lnf) = layer_norm(&x, self.vec("final_ln.gain"), self.vec("final_ln.bias"));
        let tok_logits = hf.dot(&self.view("head.weight")) + &Array1::from(self.vec("head.bias").to_vec());
        let logits = unpatchify(tok_logits.view(), c.patch, c.volume_dim);
        Ok(DecoderTrace {
            patches,
            evidence,
            layers,
            hf,
            lnf,
            logits,
        })
    }

    /// Gradients of a loss w.r.t. every decoder parameter given dL/d(logits).
    pub fn backward(&self, trace: &DecoderTrace, dlogits: &Tensor) -> Result<BTreeMap<String, Tensor>> {
        trace.logits.ensure_same_dims(dlogits)?;
        let c = &self.config;
        let d = c.token_dim;
        let mut g: BTreeMap<String, Array2<f64>> = BTreeMap::new();
        let mut gv: BTreeMap<String, Vec<f64>> = BTreeMap::new();

        let dtok = patchify(dlogits, c.patch)?;
        g.insert("head.weight".into(), trace.hf.t().dot(&dtok));
        gv.insert("head.bias".into(), dtok.sum_axis(Axis(0)).to_vec());
        let dhf = dtok.dot(&self.view("head.weight").t());
        let (mut dg, mut db) = (vec![0.0; d], vec![0.0; d]);
        let mut dx = layer_norm_backward(&dhf, &trace.lnf, self.vec("final_ln.gain"), &mut dg, &mut db);
        gv.insert("final_ln.gain".into(), dg);
        gv.insert("final_ln.bias".into(), db);

        for l in (0..c.num_layers).rev() {
            let lc = &trace.layers[l];
            // Feed-forward.
            let w2 = self.view(&lp(l, "ffn.w2"));
            g.insert(lp(l, "ffn.w2"), lc.r.t().dot(&dx));
            gv.insert(lp(l, "ffn.b2"), dx.sum_axis(Axis(0)).to_vec());
            let mut dz1 = dx.dot(&w2.t());
            dz1.zip_mut_with(&lc.z1, |g, &z| {
                if z <= 0.0 {
                    *g = 0.0
                }
            });
            g.insert(lp(l, "ffn.w1"), lc.h3.t().dot(&dz1));
            gv.insert(lp(l, "ffn.b1"), dz1.sum_axis(Axis(0)).to_vec());
            let dh3 = dz1.dot(&self.view(&lp(l, "ffn.w1")).t());
            let (mut dg, mut db) = (vec![0.0; d], vec![0.0; d]);
            dx += &layer_norm_backward(&dh3, &lc.ln3, self.vec(&lp(l, "ln3.gain")), &mut dg, &mut db);
            gv.insert(lp(l, "ln3.gain"), dg);
            gv.insert(lp(l, "ln3.bias"), db);

            // Cross-attention; evidence tokens are inputs, not parameters.
            if let Some((h2, ln2, ca)) = &lc.h2 {
                let ag = attention_backward(
                    &dx,
                    ca,
                    h2,
                    &trace.evidence,
                    self.view(&lp(l, "cross.q")),
                    self.view(&lp(l, "cross.k")),
                    self.view(&lp(l, "cross.v")),
                    self.view(&lp(l, "cross.o")),
                );
                g.insert(lp(l, "cross.q"), ag.dwq);
                g.insert(lp(l, "cross.k"), ag.dwk);
                g.insert(lp(l, "cross.v"), ag.dwv);
                g.insert(lp(l, "cross.o"), ag.dwo);
                let (mut dg, mut db) = (vec![0.0; d], vec![0.0; d]);
                dx += &layer_norm_backward(&ag.dhq, ln2, self.vec(&lp(l, "ln2.gain")), &mut dg, &mut db);
                gv.insert(lp(l, "ln2.gain"), dg);
                gv.insert(lp(l, "ln2.bias"), db);
            }

            // Self-attention.
            let ag = attention_backward(
                &dx,
                &lc.sa,
                &lc.h1,
                &lc.h1,
                self.view(&lp(l, "self.q")),
                self.view(&lp(l, "self.k")),
                self.view(&lp(l, "self.v")),
                self.view(&lp(l, "self.o")),
            );
            g.insert(lp(l, "self.q"), ag.dwq);
            g.insert(lp(l, "self.k"), ag.dwk);
            g.insert(lp(l, "self.v"), ag.dwv);
            g.insert(lp(l, "self.o"), ag.dwo);
            let dh1 = ag.dhq + &ag.dhkv;
            let (mut dg, mut db) = (vec![0.0; d], vec![0.0; d]);
            dx += &layer_norm_backward(&dh1, &lc.ln1, self.vec(&lp(l, "ln1.gain")), &mut dg, &mut db);
            gv.insert(lp(l, "ln1.gain"), dg);
            gv.insert(lp(l, "ln1.bias"), db);
        }
        g.insert("pos".into(), dx.clone());
        gv.insert("patch.bias".into(), dx.sum_axis(Axis(0)).to_vec());
        g.insert("patch.weight".into(), trace.patches.t().dot(&dx));

        let mut out = BTreeMap::new();
        for (k, a) in g {
            out.insert(k, Tensor::from_array2(a));
        }
        for (k, v) in gv {
            let dims = self.params[&k].dims().to_vec();
            out.insert(k, Tensor::new(dims, v)?);
        }
        Ok(out)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("decoder.json"), serde_json::to_string_pretty(&self.config)?)?;
        for (name, t) in &self.params {
            write_tensor(&dir.join(format!("{name}.emad")), t)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let sidecar = dir.join("decoder.json");
        if !sidecar.exists() {
            return Err(Error::MissingCheckpoint(sidecar));
        }
        let config: DecoderConfig = serde_json::from_str(&fs::read_to_string(&sidecar)?)?;
        let mut dec = Self::new(config)?;
        for (name, t) in dec.params.iter_mut() {
            let loaded = read_tensor(&dir.join(format!("{name}.emad")))?;
            if loaded.dims() != t.dims() {
                return Err(Error::dims(t.dims(), loaded.dims()));
            }
            *t = loaded;
        }
        Ok(dec)
    }
}

impl Parameterized for SegDecoder {
    fn parameters(&self) -> Vec<(String, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.clone(), v)).collect()
    }

    fn parameters_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.clone(), v)).collect()
    }
}

/// Voxelwise probabilities `σ(Head(Y))` on the full grid.
pub fn decode_mask(dec: &SegDecoder, volume: &VoxelVolume, evidence_tokens: &Tensor) -> Result<VoxelMask> {
    let trace = dec.forward(volume, evidence_tokens)?;
    let mut m = trace.logits;
    m.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{dice_bce_loss, finite_difference_check_floored};
    use rand::Rng;

    fn small_config() -> DecoderConfig {
        DecoderConfig {
            num_layers: 2,
            token_dim: 6,
            ffn_hidden: 7,
            patch: 2,
            volume_dim: 4,
            cross_attention: true,
            seed: 3,
        }
    }

    fn inputs(seed: u64, d: usize, dim: usize) -> (Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vol = Tensor::randn(&[dim, dim, dim], 1.0, &mut rng);
        let n = rng.random_range(1..5);
        let ev = Tensor::randn(&[n, d], 1.0, &mut rng);
        (vol, ev)
    }

    #[test]
    fn patchify_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v = Tensor::randn(&[8, 8, 8], 1.0, &mut rng);
        let p = patchify(&v, 4).unwrap();
        assert_eq!(p.dim(), (8, 64));
        assert_eq!(unpatchify(p.view(), 4, 8), v);
    }

    #[test]
    fn output_shape_and_range() {
        let dec = SegDecoder::new(DecoderConfig::default()).unwrap();
        let (vol, ev) = inputs(1, 32, 16);
        let m = decode_mask(&dec, &vol, &ev).unwrap();
        assert_eq!(m.dims(), &[16, 16, 16]);
        assert!(m.data().iter().all(|&p| p > 0.0 && p < 1.0));
        let again = decode_mask(&dec, &vol, &ev).unwrap();
        assert_eq!(m.bit_pattern(), again.bit_pattern());
    }

    #[test]
    fn rejects_wrong_token_width() {
        let dec = SegDecoder::new(DecoderConfig::default()).unwrap();
        let (vol, _) = inputs(1, 32, 16);
        let bad = Tensor::zeros(&[3, 16]);
        assert!(matches!(decode_mask(&dec, &vol, &bad), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn zeroed_cross_attention_ignores_evidence() {
        let mut dec = SegDecoder::new(DecoderConfig::default()).unwrap();
        dec.zero_cross_attention();
        let (vol, a) = inputs(2, 32, 16);
        let (_, b) = inputs(5, 32, 16);
        let ma = decode_mask(&dec, &vol, &a).unwrap();
        let mb = decode_mask(&dec, &vol, &b).unwrap();
        assert_eq!(ma.bit_pattern(), mb.bit_pattern());
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        for seed in 0..3 {
            let mut cfg = small_config();
            cfg.seed = seed;
            let dec = SegDecoder::new(cfg).unwrap();
            let (vol, ev) = inputs(seed + 10, cfg.token_dim, cfg.volume_dim);
            let gt = Tensor::new(
                vec![4, 4, 4],
                (0..64).map(|i| ((i * 7 + seed as usize) % 3 == 0) as u8 as f64).collect(),
            )
            .unwrap();
            let loss = |d: &SegDecoder| {
                let tr = d.forward(&vol, &ev).unwrap();
                dice_bce_loss(&tr.logits, &gt, 1.0, 1.0).unwrap()
            };
            let tr = dec.forward(&vol, &ev).unwrap();
            let lg = dice_bce_loss(&tr.logits, &gt, 1.0, 1.0).unwrap();
            let grads = dec.backward(&tr, lg.grad("logits").unwrap()).unwrap();
            assert_eq!(grads.len(), dec.params.len());
            for (name, x) in &dec.params {
                let f = |t: &Tensor| {
                    let mut d2 = dec.clone();
                    d2.params.insert(name.clone(), t.clone());
                    loss(&d2).value
                };
                // Entries below 1e-5 sit at finite-difference noise level.
                let err = finite_difference_check_floored(f, x, &grads[name], 1e-6, 1e-5);
                assert!(err < 1e-4, "seed {seed} {name}: {err}");
            }
        }
    }
}
