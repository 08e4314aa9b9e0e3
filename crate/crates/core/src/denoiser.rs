//! A small fully-connected denoiser `D(x, sigma)` trained by denoising score
//! matching, with hand-written backpropagation and Adam.
//!
//! Forward pass for a batch row `x` at noise level `sigma`:
//!
//! ```text
//! u   = x / sqrt(1 + sigma^2)
//! h0  = [u, sin(w_k ln sigma), cos(w_k ln sigma)]      w_k = 2^k / 8
//! h_l = silu(h_{l-1} W_l + b_l)                          hidden layers
//! raw = h_L W_out + b_out + u W_skip
//! D   = x + sigma * raw
//! ```
//!
//! `W_out`, `b_out` and `W_skip` start at zero, so a fresh model is the
//! identity denoiser (score zero).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{gemm, MatRef, Rng};
use crate::scores::ScoreModel;
use crate::sources::SourceArray;

const MAGIC: &[u8; 8] = b"MSDMMLP\0";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub n_sources: usize,
    pub dim: usize,
    pub hidden: Vec<usize>,
    /// Number of log-sigma frequencies `F`; the embedding has `2F` features.
    pub f_features: usize,
}

impl MlpConfig {
    pub fn new(n_sources: usize, dim: usize) -> Self {
        MlpConfig {
            n_sources,
            dim,
            hidden: vec![256, 256, 256],
            f_features: 8,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_sources == 0 || self.dim == 0 {
            return Err(Error::config("model", "n_sources and dim must be positive"));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::config("model.hidden", "need at least one non-empty hidden layer"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpDenoiser {
    cfg: MlpConfig,
    layer_sizes: Vec<usize>,
    params: Vec<f64>,
    w_off: Vec<usize>,
    b_off: Vec<usize>,
    skip_off: usize,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

struct Cache {
    /// Input of each dense layer (`h[0]` is the embedded input).
    h: Vec<Vec<f64>>,
    /// Pre-activations of the hidden layers.
    z: Vec<Vec<f64>>,
    u: Vec<f64>,
    raw: Vec<f64>,
}

impl MlpDenoiser {
    /// Fresh model: hidden layers use the usual `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
    /// init; output layer and skip map are zero.
    pub fn new(cfg: MlpConfig, seed: u64) -> Result<Self> {
        let mut model = MlpDenoiser::zeros(cfg)?;
        let mut rng = Rng::new(seed, 0);
        let n_dense = model.layer_sizes.len() - 1;
        for l in 0..n_dense - 1 {
            model.init_layer(l, &mut rng);
        }
        Ok(model)
    }

    /// Every layer (output and skip included) randomly initialized; useful
    /// for gradient checks where a zero output layer would hide the rest.
    pub fn new_fully_random(cfg: MlpConfig, seed: u64) -> Result<Self> {
        let mut model = MlpDenoiser::zeros(cfg)?;
        let mut rng = Rng::new(seed, 0);
        for l in 0..model.layer_sizes.len() - 1 {
            model.init_layer(l, &mut rng);
        }
        let nd = model.nd();
        let bound = 1.0 / (nd as f64).sqrt();
        let off = model.skip_off;
        for p in &mut model.params[off..off + nd * nd] {
            *p = rng.uniform_range(-bound, bound);
        }
        Ok(model)
    }

    fn zeros(cfg: MlpConfig) -> Result<Self> {
        cfg.validate()?;
        let nd = cfg.n_sources * cfg.dim;
        let mut layer_sizes = vec![nd + 2 * cfg.f_features];
        layer_sizes.extend_from_slice(&cfg.hidden);
        layer_sizes.push(nd);
        let mut w_off = Vec::new();
        let mut b_off = Vec::new();
        let mut off = 0;
        for w in layer_sizes.windows(2) {
            w_off.push(off);
            off += w[0] * w[1];
            b_off.push(off);
            off += w[1];
        }
        let skip_off = off;
        off += nd * nd;
        Ok(MlpDenoiser {
            cfg,
            layer_sizes,
            params: vec![0.0; off],
            w_off,
            b_off,
            skip_off,
        })
    }

    fn init_layer(&mut self, l: usize, rng: &mut Rng) {
        let (fan_in, fan_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
        let bound = 1.0 / (fan_in as f64).sqrt();
        let (w, b) = (self.w_off[l], self.b_off[l]);
        for p in &mut self.params[w..w + fan_in * fan_out] {
            *p = rng.uniform_range(-bound, bound);
        }
        for p in &mut self.params[b..b + fan_out] {
            *p = rng.uniform_range(-bound, bound);
        }
    }

    pub fn config(&self) -> &MlpConfig {
        &self.cfg
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn nd(&self) -> usize {
        self.cfg.n_sources * self.cfg.dim
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    fn embed(&self, sigma: f64, out: &mut [f64]) {
        let f = self.cfg.f_features;
        let ls = sigma.ln();
        for k in 0..f {
            let arg = ls * (1u64 << k) as f64 / 8.0;
            out[k] = arg.sin();
            out[f + k] = arg.cos();
        }
    }

    fn forward_cache(&self, xs: &[f64], sigmas: &[f64]) -> Cache {
        let batch = sigmas.len();
        let nd = self.nd();
        let n_dense = self.layer_sizes.len() - 1;
        let in0 = self.layer_sizes[0];

        let mut u = vec![0.0; batch * nd];
        let mut h0 = vec![0.0; batch * in0];
        for b in 0..batch {
            let c_in = 1.0 / (1.0 + sigmas[b] * sigmas[b]).sqrt();
            let row = &mut h0[b * in0..(b + 1) * in0];
            for (i, (hv, x)) in row[..nd].iter_mut().zip(&xs[b * nd..(b + 1) * nd]).enumerate() {
                *hv = c_in * x;
                u[b * nd + i] = *hv;
            }
            self.embed(sigmas[b], &mut row[nd..]);
        }

        let mut h = vec![h0];
        let mut z = Vec::with_capacity(n_dense - 1);
        for l in 0..n_dense {
            let (fin, fout) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let mut out = vec![0.0; batch * fout];
            let bias = &self.params[self.b_off[l]..self.b_off[l] + fout];
            for row in out.chunks_exact_mut(fout) {
                row.copy_from_slice(bias);
            }
            gemm(
                batch,
                fin,
                fout,
                1.0,
                MatRef::row_major(&h[l], fin),
                MatRef::row_major(&self.params[self.w_off[l]..], fout),
                1.0,
                &mut out,
            );
            if l + 1 < n_dense {
                let act = out.iter().map(|&v| silu(v)).collect();
                z.push(out);
                h.push(act);
            } else {
                gemm(
                    batch,
                    nd,
                    nd,
                    1.0,
                    MatRef::row_major(&u, nd),
                    MatRef::row_major(&self.params[self.skip_off..], nd),
                    1.0,
                    &mut out,
                );
                return Cache { h, z, u, raw: out };
            }
        }
        unreachable!("network has an output layer")
    }

    /// `D(x, sigma_b)` for each batch row; `xs` holds `sigmas.len()` flat arrays.
    pub fn denoise_batch(&self, xs: &[f64], sigmas: &[f64]) -> Vec<f64> {
        let nd = self.nd();
        let cache = self.forward_cache(xs, sigmas);
        let mut out = cache.raw;
        for (b, &s) in sigmas.iter().enumerate() {
            for (o, x) in out[b * nd..(b + 1) * nd].iter_mut().zip(&xs[b * nd..(b + 1) * nd]) {
                *o = x + s * *o;
            }
        }
        out
    }

    pub fn forward(&self, x_noisy: &SourceArray, sigma: f64) -> Result<SourceArray> {
        x_noisy.check_shape(self.cfg.n_sources, self.cfg.dim)?;
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::NonPositiveSigma(sigma));
        }
        let out = self.denoise_batch(x_noisy.as_slice(), &[sigma]);
        SourceArray::from_vec(self.cfg.n_sources, self.cfg.dim, out)
    }

    /// Mean squared error of `D(x0 + sigma eps, sigma)` against `x0` over all
    /// entries, and its gradient with respect to every parameter.
    ///
    /// `x0`, `noise` hold `sigmas.len()` flat arrays each.
    pub fn loss_and_grad(&self, x0: &[f64], sigmas: &[f64], noise: &[f64]) -> (f64, Vec<f64>) {
        let batch = sigmas.len();
        let nd = self.nd();
        let n_dense = self.layer_sizes.len() - 1;
        let mut xn = x0.to_vec();
        for b in 0..batch {
            for (v, e) in xn[b * nd..(b + 1) * nd].iter_mut().zip(&noise[b * nd..(b + 1) * nd]) {
                *v += sigmas[b] * e;
            }
        }
        let cache = self.forward_cache(&xn, sigmas);

        let scale = 1.0 / (batch * nd) as f64;
        let mut loss = 0.0;
        // d loss / d raw
        let mut delta = vec![0.0; batch * nd];
        for b in 0..batch {
            let s = sigmas[b];
            for i in b * nd..(b + 1) * nd {
                let r = xn[i] + s * cache.raw[i] - x0[i];
                loss += r * r;
                delta[i] = 2.0 * scale * r * s;
            }
        }
        loss *= scale;

        let mut grad = vec![0.0; self.params.len()];
        gemm(
            nd,
            batch,
            nd,
            1.0,
            MatRef::transposed(&cache.u, nd),
            MatRef::row_major(&delta, nd),
            0.0,
            &mut grad[self.skip_off..self.skip_off + nd * nd],
        );
        for l in (0..n_dense).rev() {
            let (fin, fout) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            gemm(
                fin,
                batch,
                fout,
                1.0,
                MatRef::transposed(&cache.h[l], fin),
                MatRef::row_major(&delta, fout),
                0.0,
                &mut grad[self.w_off[l]..self.w_off[l] + fin * fout],
            );
            let gb = &mut grad[self.b_off[l]..self.b_off[l] + fout];
            for row in delta.chunks_exact(fout) {
                for (g, d) in gb.iter_mut().zip(row) {
                    *g += d;
                }
            }
            if l == 0 {
                break;
            }
            let mut below = vec![0.0; batch * fin];
            gemm(
                batch,
                fout,
                fin,
                1.0,
                MatRef::row_major(&delta, fout),
                MatRef::transposed(&self.params[self.w_off[l]..self.w_off[l] + fin * fout], fout),
                0.0,
                &mut below,
            );
            for (d, zv) in below.iter_mut().zip(&cache.z[l - 1]) {
                *d *= silu_grad(*zv);
            }
            delta = below;
        }
        (loss, grad)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 8 * self.params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let header = [
            self.cfg.n_sources,
            self.cfg.dim,
            self.cfg.f_features,
            self.cfg.hidden.len(),
        ];
        for v in header.iter().chain(&self.cfg.hidden) {
            out.extend_from_slice(&(*v as u64).to_le_bytes());
        }
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::config("checkpoint", m);
        let mut pos = 0;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated file"))?;
            pos += n;
            Ok(s)
        };
        if take(8)? != MAGIC {
            return Err(bad("not a denoiser checkpoint"));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let mut next_u64 = || -> Result<usize> {
            Ok(u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize)
        };
        let n_sources = next_u64()?;
        let dim = next_u64()?;
        let f_features = next_u64()?;
        let n_hidden = next_u64()?;
        if n_hidden > 64 {
            return Err(bad("implausible layer count"));
        }
        let hidden = (0..n_hidden).map(|_| next_u64()).collect::<Result<Vec<_>>>()?;
        let n_params = next_u64()?;
        let mut model = MlpDenoiser::zeros(MlpConfig {
            n_sources,
            dim,
            hidden,
            f_features,
        })?;
        if n_params != model.params.len() {
            return Err(bad("parameter count does not match architecture"));
        }
        for p in model.params.iter_mut() {
            *p = f64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        MlpDenoiser::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

impl ScoreModel for MlpDenoiser {
    fn n_sources(&self) -> usize {
        self.cfg.n_sources
    }

    fn dim(&self) -> usize {
        self.cfg.dim
    }

    /// `(D - x) / sigma^2 = raw / sigma`.
    fn score_into(&self, xs: &[f64], batch: usize, sigma: f64, out: &mut [f64]) {
        let cache = self.forward_cache(xs, &vec![sigma; batch]);
        for (o, r) in out.iter_mut().zip(&cache.raw) {
            *o = r / sigma;
        }
    }
}

/// Anything that maps noisy arrays to clean estimates.
pub trait Denoiser: Sync {
    /// Entries per example (`N * D`).
    fn entries(&self) -> usize;
    fn denoise(&self, xs: &[f64], sigmas: &[f64]) -> Vec<f64>;
}

impl Denoiser for MlpDenoiser {
    fn entries(&self) -> usize {
        self.nd()
    }

    fn denoise(&self, xs: &[f64], sigmas: &[f64]) -> Vec<f64> {
        self.denoise_batch(xs, sigmas)
    }
}

/// `D(x, sigma) = x + sigma^2 S(x, sigma)` for an analytic score.
pub struct ScoreDenoiser<'a>(pub &'a dyn ScoreModel);

impl Denoiser for ScoreDenoiser<'_> {
    fn entries(&self) -> usize {
        self.0.flat_len()
    }

    fn denoise(&self, xs: &[f64], sigmas: &[f64]) -> Vec<f64> {
        let nd = self.entries();
        let mut out = vec![0.0; xs.len()];
        for (b, &s) in sigmas.iter().enumerate() {
            let (x, o) = (&xs[b * nd..(b + 1) * nd], &mut out[b * nd..(b + 1) * nd]);
            self.0.score_into(x, 1, s, o);
            for (ov, xv) in o.iter_mut().zip(x) {
                *ov = xv + s * s * *ov;
            }
        }
        out
    }
}

/// One draw of the noise levels and perturbations for a training batch.
#[derive(Debug, Clone)]
pub struct DsmBatch {
    pub x0: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub noise: Vec<f64>,
}

/// Picks `batch` examples (with replacement) and draws `sigma ~ U(lo, hi)`
/// and unit Gaussian perturbations.
pub fn draw_batch(data: &[SourceArray], batch: usize, sigma_range: (f64, f64), rng: &mut Rng) -> DsmBatch {
    let nd = data[0].len();
    let mut x0 = Vec::with_capacity(batch * nd);
    let mut sigmas = Vec::with_capacity(batch);
    for _ in 0..batch {
        x0.extend_from_slice(data[rng.below(data.len())].as_slice());
        sigmas.push(rng.uniform_range(sigma_range.0, sigma_range.1));
    }
    let mut noise = vec![0.0; batch * nd];
    rng.fill_normal(&mut noise);
    DsmBatch { x0, sigmas, noise }
}

/// Denoising loss of any [`Denoiser`] on one random batch.
pub fn dsm_loss_value(
    model: &dyn Denoiser,
    data: &[SourceArray],
    batch: usize,
    sigma_range: (f64, f64),
    rng: &mut Rng,
) -> f64 {
    let b = draw_batch(data, batch, sigma_range, rng);
    let nd = model.entries();
    let mut xn = b.x0.clone();
    for (i, v) in xn.iter_mut().enumerate() {
        *v += b.sigmas[i / nd] * b.noise[i];
    }
    let d = model.denoise(&xn, &b.sigmas);
    d.iter().zip(&b.x0).map(|(a, c)| (a - c) * (a - c)).sum::<f64>() / d.len() as f64
}

/// Loss and parameter gradient of the MLP on one random batch.
pub fn dsm_loss(
    model: &MlpDenoiser,
    data: &[SourceArray],
    batch: usize,
    sigma_range: (f64, f64),
    rng: &mut Rng,
) -> (f64, Vec<f64>) {
    let b = draw_batch(data, batch, sigma_range, rng);
    model.loss_and_grad(&b.x0, &b.sigmas, &b.noise)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch: usize,
    pub steps: usize,
    pub sigma_range: (f64, f64),
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.99,
            batch: 16,
            steps: 20_000,
            sigma_range: (1e-4, 1.0),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr", "must be positive"));
        }
        for (name, b) in [("train.beta1", self.beta1), ("train.beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::config(name, "must lie in (0, 1)"));
            }
        }
        if self.batch == 0 {
            return Err(Error::config("train.batch", "must be positive"));
        }
        let (lo, hi) = self.sigma_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::config("train.sigma_range", "need 0 < lo <= hi"));
        }
        Ok(())
    }
}

const ADAM_EPS: f64 = 1e-8;

/// Adam with bias correction. Returns the trained model and the per-step loss.
pub fn train(model: MlpDenoiser, data: &[SourceArray], cfg: &TrainConfig) -> Result<(MlpDenoiser, Vec<f64>)> {
    train_with_progress(model, data, cfg, |_, _| {})
}

/// [`train`] with a callback receiving `(step, loss)` after every update.
pub fn train_with_progress(
    mut model: MlpDenoiser,
    data: &[SourceArray],
    cfg: &TrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<(MlpDenoiser, Vec<f64>)> {
    cfg.validate()?;
    if cfg.steps == 0 {
        return Ok((model, Vec::new()));
    }
    if data.len() < cfg.batch {
        return Err(Error::config(
            "train.batch",
            format!("dataset has {} examples, fewer than the batch size {}", data.len(), cfg.batch),
        ));
    }
    for x in data {
        x.check_shape(model.cfg.n_sources, model.cfg.dim)?;
    }
    let mut rng = Rng::new(cfg.seed, 1);
    let n = model.params.len();
    let mut m = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let (loss, grad) = dsm_loss(&model, data, cfg.batch, cfg.sigma_range, &mut rng);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::DivergedLoss { step });
        }
        let c1 = 1.0 - cfg.beta1.powi(step as i32);
        let c2 = 1.0 - cfg.beta2.powi(step as i32);
        for i in 0..n {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            model.params[i] -= cfg.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
        }
        trace.push(loss);
        progress(step, loss);
    }
    Ok((model, trace))
}
