//! Score models `S(x, sigma) ~ grad_x log p_sigma(x)` over `N x D` source arrays.
//!
//! `p_sigma` is the prior convolved with `N(0, sigma^2 I)`. The analytic
//! backends use the exact convolution identity (`Sigma -> Sigma + sigma^2 I`),
//! so their scores are exact and serve as ground truth for the samplers.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{cholesky, cholesky_solve, gemm, sym_eigen, Mat, MatRef, Rng, SymEigen};
use crate::sources::SourceArray;

/// Evaluable noisy score over a fixed `(N, D)` shape.
///
/// Implementations receive pre-validated input: `xs` holds `batch` arrays of
/// `N * D` entries each, `sigma > 0`, and `out` has the same length as `xs`.
pub trait ScoreModel: Send + Sync {
    fn n_sources(&self) -> usize;
    fn dim(&self) -> usize;
    fn score_into(&self, xs: &[f64], batch: usize, sigma: f64, out: &mut [f64]);

    fn flat_len(&self) -> usize {
        self.n_sources() * self.dim()
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::NonPositiveSigma(sigma))
    }
}

pub fn eval_score(model: &dyn ScoreModel, x: &SourceArray, sigma: f64) -> Result<SourceArray> {
    x.check_shape(model.n_sources(), model.dim())?;
    check_sigma(sigma)?;
    let mut out = vec![0.0; x.len()];
    model.score_into(x.as_slice(), 1, sigma, &mut out);
    SourceArray::from_vec(model.n_sources(), model.dim(), out)
}

pub fn eval_score_batch(
    model: &dyn ScoreModel,
    xs: &[SourceArray],
    sigma: f64,
) -> Result<Vec<SourceArray>> {
    check_sigma(sigma)?;
    let flat_len = model.flat_len();
    let mut flat = Vec::with_capacity(xs.len() * flat_len);
    for x in xs {
        x.check_shape(model.n_sources(), model.dim())?;
        flat.extend_from_slice(x.as_slice());
    }
    let mut out = vec![0.0; flat.len()];
    model.score_into(&flat, xs.len(), sigma, &mut out);
    out.chunks_exact(flat_len.max(1))
        .map(|c| SourceArray::from_vec(model.n_sources(), model.dim(), c.to_vec()))
        .collect()
}

/// Row `n` (0-based) of the joint score.
pub fn eval_score_slice(
    model: &dyn ScoreModel,
    x: &SourceArray,
    sigma: f64,
    n: usize,
) -> Result<Vec<f64>> {
    if n >= model.n_sources() {
        return Err(Error::IndexOutOfRange {
            index: n,
            len: model.n_sources(),
        });
    }
    Ok(eval_score(model, x, sigma)?.row(n).to_vec())
}

/// Score implied by a denoiser output: `(D(x, sigma) - x) / sigma^2`.
pub fn denoiser_to_score(d_out: &SourceArray, x: &SourceArray, sigma: f64) -> Result<SourceArray> {
    check_sigma(sigma)?;
    x.check_shape(d_out.n_sources(), d_out.dim())?;
    let inv = 1.0 / (sigma * sigma);
    let data = d_out
        .as_slice()
        .iter()
        .zip(x.as_slice())
        .map(|(d, v)| (d - v) * inv)
        .collect();
    SourceArray::from_vec(x.n_sources(), x.dim(), data)
}

/// Central-difference check of `model` against an exact smoothed log-density.
///
/// Returns `max_i |fd_i - s_i| / max_j |s_j|` (falls back to absolute error
/// when the analytic score is identically zero).
pub fn finite_diff_check(
    model: &dyn ScoreModel,
    log_density: &dyn Fn(&SourceArray) -> f64,
    x: &SourceArray,
    sigma: f64,
    h: f64,
) -> Result<f64> {
    let analytic = eval_score(model, x, sigma)?;
    let mut probe = x.clone();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = probe.as_slice()[i];
        probe.as_mut_slice()[i] = orig + h;
        let up = log_density(&probe);
        probe.as_mut_slice()[i] = orig - h;
        let down = log_density(&probe);
        probe.as_mut_slice()[i] = orig;
        let fd = (up - down) / (2.0 * h);
        worst = worst.max((fd - analytic.as_slice()[i]).abs());
    }
    let scale = analytic.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    Ok(if scale > 0.0 { worst / scale } else { worst })
}

/// Jointly Gaussian prior over the stacked `N * D` source vector.
#[derive(Debug, Clone)]
pub struct GaussianPrior {
    n_sources: usize,
    dim: usize,
    mean: Vec<f64>,
    cov: Mat,
    chol: Mat,
    eigen: SymEigen,
}

impl GaussianPrior {
    pub fn new(n_sources: usize, dim: usize, mean: Vec<f64>, cov: Mat) -> Result<Self> {
        let len = n_sources * dim;
        if len == 0 {
            return Err(Error::shape("non-empty (N, D)", format!("({n_sources}, {dim})")));
        }
        if mean.len() != len {
            return Err(Error::shape(len, mean.len()));
        }
        if cov.rows() != len || cov.cols() != len {
            return Err(Error::shape(
                format!("{len}x{len}"),
                format!("{}x{}", cov.rows(), cov.cols()),
            ));
        }
        let chol = cholesky(&cov)?;
        let eigen = sym_eigen(&cov)?;
        if let Some((row, &pivot)) = eigen
            .values
            .iter()
            .enumerate()
            .find(|(_, &v)| v <= 0.0)
        {
            return Err(Error::NotPositiveDefinite { row, pivot });
        }
        Ok(GaussianPrior {
            n_sources,
            dim,
            mean,
            cov,
            chol,
            eigen,
        })
    }

    /// `N(0, I)` over `n_sources * dim` entries.
    pub fn standard(n_sources: usize, dim: usize) -> Result<Self> {
        let len = n_sources * dim;
        GaussianPrior::new(n_sources, dim, vec![0.0; len], Mat::identity(len))
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn cov(&self) -> &Mat {
        &self.cov
    }

    pub fn chol(&self) -> &Mat {
        &self.chol
    }

    pub fn eigen(&self) -> &SymEigen {
        &self.eigen
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    /// Log-density of the prior convolved with `N(0, sigma^2 I)`.
    pub fn log_density(&self, x: &[f64], sigma: f64) -> f64 {
        let s2 = sigma * sigma;
        let centered: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        let (quad, logdet) = self.quad_logdet(&centered, s2);
        -0.5 * (quad + logdet + self.len() as f64 * (2.0 * PI).ln())
    }

    fn quad_logdet(&self, centered: &[f64], s2: f64) -> (f64, f64) {
        let n = self.len();
        let q = &self.eigen.vectors;
        let mut quad = 0.0;
        let mut logdet = 0.0;
        for j in 0..n {
            let lam = self.eigen.values[j] + s2;
            let c: f64 = (0..n).map(|i| q[(i, j)] * centered[i]).sum();
            quad += c * c / lam;
            logdet += lam.ln();
        }
        (quad, logdet)
    }

    /// Score through a fresh Cholesky solve of `Sigma + sigma^2 I`; an
    /// independent route to the eigen-based [`ScoreModel`] implementation.
    pub fn score_via_cholesky(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        let l = cholesky(&self.cov.add_diag(sigma * sigma))?;
        let centered: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        Ok(cholesky_solve(&l, &centered)?.into_iter().map(|v| -v).collect())
    }

    pub fn sample(&self, rng: &mut Rng) -> SourceArray {
        let z: Vec<f64> = (0..self.len()).map(|_| rng.normal()).collect();
        let mut x = self.mean.clone();
        for (i, xi) in x.iter_mut().enumerate() {
            *xi += (0..=i).map(|k| self.chol[(i, k)] * z[k]).sum::<f64>();
        }
        SourceArray::from_vec(self.n_sources, self.dim, x).expect("prior shape")
    }

    /// Marginal over a subset of sources, in the given order.
    pub fn marginal(&self, sources: &[usize]) -> Result<GaussianPrior> {
        let idx = self.coordinates(sources)?;
        let mean = idx.iter().map(|&i| self.mean[i]).collect();
        GaussianPrior::new(sources.len(), self.dim, mean, self.cov.select(&idx, &idx))
    }

    /// One single-source prior per stem, as used by factorized separators.
    pub fn source_marginals(&self) -> Result<Vec<GaussianPrior>> {
        (0..self.n_sources).map(|n| self.marginal(&[n])).collect()
    }

    /// Flat coordinates covered by the given sources.
    pub fn coordinates(&self, sources: &[usize]) -> Result<Vec<usize>> {
        let mut idx = Vec::with_capacity(sources.len() * self.dim);
        for &s in sources {
            if s >= self.n_sources {
                return Err(Error::IndexOutOfRange {
                    index: s,
                    len: self.n_sources,
                });
            }
            idx.extend(s * self.dim..(s + 1) * self.dim);
        }
        Ok(idx)
    }

    /// `C = (X - mu) Q` for a batch, the shared first half of score and density.
    fn project(&self, xs: &[f64], batch: usize) -> Vec<f64> {
        let n = self.len();
        let mut centered = xs.to_vec();
        for row in centered.chunks_exact_mut(n) {
            for (v, m) in row.iter_mut().zip(&self.mean) {
                *v -= m;
            }
        }
        let mut c = vec![0.0; batch * n];
        gemm(
            batch,
            n,
            n,
            1.0,
            MatRef::row_major(&centered, n),
            MatRef::row_major(self.eigen.vectors.as_slice(), n),
            0.0,
            &mut c,
        );
        c
    }

    fn score_and_logdens(&self, xs: &[f64], batch: usize, sigma: f64, out: &mut [f64]) -> Vec<f64> {
        let n = self.len();
        let s2 = sigma * sigma;
        let mut c = self.project(xs, batch);
        let logdet: f64 = self.eigen.values.iter().map(|l| (l + s2).ln()).sum();
        let norm = logdet + n as f64 * (2.0 * PI).ln();
        let mut logdens = Vec::with_capacity(batch);
        for row in c.chunks_exact_mut(n) {
            let mut quad = 0.0;
            for (v, l) in row.iter_mut().zip(&self.eigen.values) {
                let scaled = *v / (l + s2);
                quad += *v * scaled;
                *v = scaled;
            }
            logdens.push(-0.5 * (quad + norm));
        }
        gemm(
            batch,
            n,
            n,
            -1.0,
            MatRef::row_major(&c, n),
            MatRef::transposed(self.eigen.vectors.as_slice(), n),
            0.0,
            out,
        );
        logdens
    }
}

impl ScoreModel for GaussianPrior {
    fn n_sources(&self) -> usize {
        self.n_sources
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn score_into(&self, xs: &[f64], batch: usize, sigma: f64, out: &mut [f64]) {
        self.score_and_logdens(xs, batch, sigma, out);
    }
}

/// Finite mixture of Gaussian priors sharing one `(N, D)` shape.
#[derive(Debug, Clone)]
pub struct GmmPrior {
    weights: Vec<f64>,
    components: Vec<GaussianPrior>,
}

impl GmmPrior {
    pub fn new(weights: Vec<f64>, components: Vec<GaussianPrior>) -> Result<Self> {
        if weights.is_empty() || weights.len() != components.len() {
            return Err(Error::BadConfig(format!(
                "{} weights for {} components",
                weights.len(),
                components.len()
            )));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::BadConfig("mixture weights must be non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::BadConfig(format!("mixture weights sum to {total}, not 1")));
        }
        let shape = (components[0].n_sources, components[0].dim);
        if components.iter().any(|c| (c.n_sources, c.dim) != shape) {
            return Err(Error::shape(format!("{shape:?}"), "components of differing shape"));
        }
        Ok(GmmPrior {
            weights,
            components,
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[GaussianPrior] {
        &self.components
    }

    pub fn log_density(&self, x: &[f64], sigma: f64) -> f64 {
        let terms: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.components)
            .map(|(w, c)| w.ln() + c.log_density(x, sigma))
            .collect();
        log_sum_exp(&terms)
    }

    pub fn sample(&self, rng: &mut Rng) -> SourceArray {
        let u = rng.uniform();
        let mut acc = 0.0;
        for (w, c) in self.weights.iter().zip(&self.components) {
            acc += w;
            if u < acc {
                return c.sample(rng);
            }
        }
        self.components.last().expect("non-empty").sample(rng)
    }
}

pub fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

impl ScoreModel for GmmPrior {
    fn n_sources(&self) -> usize {
        self.components[0].n_sources
    }

    fn dim(&self) -> usize {
        self.components[0].dim
    }

    fn score_into(&self, xs: &[f64], batch: usize, sigma: f64, out: &mut [f64]) {
        let n = self.flat_len();
        let k = self.components.len();
        let mut scores = vec![vec![0.0; xs.len()]; k];
        let mut logw = vec![vec![0.0; batch]; k];
        for (j, comp) in self.components.iter().enumerate() {
            let ld = comp.score_and_logdens(xs, batch, sigma, &mut scores[j]);
            for (b, l) in ld.into_iter().enumerate() {
                logw[j][b] = self.weights[j].ln() + l;
            }
        }
        out.fill(0.0);
        let mut terms = vec![0.0; k];
        for b in 0..batch {
            for j in 0..k {
                terms[j] = logw[j][b];
            }
            let lse = log_sum_exp(&terms);
            for j in 0..k {
                let r = (terms[j] - lse).exp();
                if r == 0.0 {
                    continue;
                }
                let src = &scores[j][b * n..(b + 1) * n];
                for (o, s) in out[b * n..(b + 1) * n].iter_mut().zip(src) {
                    *o += r * s;
                }
            }
        }
    }
}

/// Score of pure noise (`p_sigma` flat): always zero. Useful for checking
/// sampler noise bookkeeping.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ZeroScore {
    pub n_sources: usize,
    pub dim: usize,
}

impl ScoreModel for ZeroScore {
    fn n_sources(&self) -> usize {
        self.n_sources
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn score_into(&self, _xs: &[f64], _batch: usize, _sigma: f64, out: &mut [f64]) {
        out.fill(0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::randn;

    fn correlated_prior(n: usize, d: usize, seed: u64) -> GaussianPrior {
        let len = n * d;
        let mut rng = Rng::new(seed, 0);
        let g = Mat::from_vec(len, len, randn(&mut rng, len * len)).unwrap();
        let cov = g.matmul(&g.transpose()).unwrap().scale(1.0 / len as f64).add_diag(0.1);
        let mean = randn(&mut rng, len);
        GaussianPrior::new(n, d, mean, cov).unwrap()
    }

    #[test]
    fn scalar_closed_form() {
        let p = GaussianPrior::standard(1, 1).unwrap();
        let x = SourceArray::from_vec(1, 1, vec![1.0]).unwrap();
        let s = eval_score(&p, &x, 1.0).unwrap();
        assert!((s.as_slice()[0] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_at_the_mean() {
        let p = correlated_prior(2, 3, 1);
        let x = SourceArray::from_vec(2, 3, p.mean().to_vec()).unwrap();
        let s = eval_score(&p, &x, 0.3).unwrap();
        assert!(s.as_slice().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn symmetric_gmm_is_zero_at_origin() {
        let mu = vec![1.5, -0.5];
        let neg: Vec<f64> = mu.iter().map(|v| -v).collect();
        let a = GaussianPrior::new(2, 1, mu, Mat::identity(2).scale(0.2)).unwrap();
        let b = GaussianPrior::new(2, 1, neg, Mat::identity(2).scale(0.2)).unwrap();
        let gmm = GmmPrior::new(vec![0.5, 0.5], vec![a, b]).unwrap();
        let s = eval_score(&gmm, &SourceArray::zeros(2, 1), 0.1).unwrap();
        assert!(s.as_slice().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn slice_matches_full_row() {
        let p = correlated_prior(3, 2, 2);
        let x = SourceArray::from_vec(3, 2, vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.6]).unwrap();
        let full = eval_score(&p, &x, 0.5).unwrap();
        for n in 0..3 {
            assert_eq!(eval_score_slice(&p, &x, 0.5, n).unwrap(), full.row(n));
        }
        assert!(matches!(
            eval_score_slice(&p, &x, 0.5, 3),
            Err(Error::IndexOutOfRange { index: 3, len: 3 })
        ));
    }

    #[test]
    fn block_diagonal_slice_depends_only_on_own_row() {
        let mut cov = Mat::zeros(4, 4);
        let blocks = [[1.0, 0.4], [0.4, 0.8]];
        for b in 0..2 {
            for i in 0..2 {
                for j in 0..2 {
                    cov[(2 * b + i, 2 * b + j)] = blocks[i][j] * (b + 1) as f64;
                }
            }
        }
        let p = GaussianPrior::new(2, 2, vec![0.0; 4], cov).unwrap();
        let x = SourceArray::from_vec(2, 2, vec![0.3, -0.2, 1.0, 2.0]).unwrap();
        let mut x2 = x.clone();
        x2.row_mut(1).copy_from_slice(&[-5.0, 7.0]);
        let a = eval_score_slice(&p, &x, 0.2, 0).unwrap();
        let b = eval_score_slice(&p, &x2, 0.2, 0).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_and_sigma_errors() {
        let p = GaussianPrior::standard(2, 2).unwrap();
        let bad = SourceArray::zeros(2, 3);
        assert!(matches!(eval_score(&p, &bad, 1.0), Err(Error::ShapeMismatch { .. })));
        let ok = SourceArray::zeros(2, 2);
        assert!(matches!(eval_score(&p, &ok, 0.0), Err(Error::NonPositiveSigma(_))));
        assert!(matches!(eval_score(&p, &ok, -1.0), Err(Error::NonPositiveSigma(_))));
    }

    #[test]
    fn denoiser_round_trips() {
        let x = SourceArray::from_vec(1, 3, vec![0.5, -1.0, 2.0]).unwrap();
        let zero = denoiser_to_score(&x, &x, 0.7).unwrap();
        assert!(zero.as_slice().iter().all(|v| *v == 0.0));

        let sigma: f64 = 0.5;
        let s = [1.0, -2.0, 0.25];
        let d = SourceArray::from_vec(
            1,
            3,
            x.as_slice().iter().zip(&s).map(|(v, si)| v + sigma * sigma * si).collect(),
        )
        .unwrap();
        let back = denoiser_to_score(&d, &x, sigma).unwrap();
        for (a, b) in back.as_slice().iter().zip(&s) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(denoiser_to_score(&d, &x, 0.0).is_err());
    }

    #[test]
    fn optimal_gaussian_denoiser_matches_score() {
        // Tweedie: mu + Sigma (Sigma + s^2 I)^-1 (x - mu) == x + s^2 * score
        let p = correlated_prior(2, 3, 4);
        let x = SourceArray::from_vec(2, 3, vec![0.3, -0.1, 0.9, 1.2, -0.4, 0.05]).unwrap();
        for sigma in [0.01, 0.2, 1.0] {
            let centered: Vec<f64> = x.as_slice().iter().zip(p.mean()).map(|(a, m)| a - m).collect();
            let solved = crate::numkit::solve_spd(&p.cov().add_diag(sigma * sigma), &centered).unwrap();
            let shrunk = p.cov().matvec(&solved).unwrap();
            let d: Vec<f64> = p.mean().iter().zip(&shrunk).map(|(m, v)| m + v).collect();
            let d = SourceArray::from_vec(2, 3, d).unwrap();
            let via_denoiser = denoiser_to_score(&d, &x, sigma).unwrap();
            let direct = eval_score(&p, &x, sigma).unwrap();
            for (a, b) in via_denoiser.as_slice().iter().zip(direct.as_slice()) {
                assert!((a - b).abs() < 1e-10 * (1.0 + b.abs()), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn eigen_and_cholesky_routes_agree() {
        let p = correlated_prior(3, 4, 7);
        let mut rng = Rng::new(3, 3);
        for sigma in [1e-3, 0.1, 1.0, 10.0] {
            let x = randn(&mut rng, 12);
            let a = eval_score(&p, &SourceArray::from_vec(3, 4, x.clone()).unwrap(), sigma).unwrap();
            let b = p.score_via_cholesky(&x, sigma).unwrap();
            for (u, v) in a.as_slice().iter().zip(&b) {
                assert!((u - v).abs() <= 1e-10 * (1.0 + v.abs()));
            }
        }
    }

    #[test]
    fn gaussian_score_is_affine() {
        let p = correlated_prior(2, 4, 9);
        let mut rng = Rng::new(8, 0);
        let x = SourceArray::from_vec(2, 4, randn(&mut rng, 8)).unwrap();
        let delta = randn(&mut rng, 8);
        let mut xd = x.clone();
        for (v, d) in xd.as_mut_slice().iter_mut().zip(&delta) {
            *v += d;
        }
        let sigma = 0.3;
        let diff: Vec<f64> = eval_score(&p, &xd, sigma)
            .unwrap()
            .as_slice()
            .iter()
            .zip(eval_score(&p, &x, sigma).unwrap().as_slice())
            .map(|(a, b)| a - b)
            .collect();
        let expected: Vec<f64> = crate::numkit::solve_spd(&p.cov().add_diag(sigma * sigma), &delta)
            .unwrap()
            .into_iter()
            .map(|v| -v)
            .collect();
        for (a, b) in diff.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn large_sigma_approaches_pure_noise_score() {
        let p = correlated_prior(2, 2, 10);
        let x = SourceArray::from_vec(2, 2, vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let sigma: f64 = 1e3;
        let s = eval_score(&p, &x, sigma).unwrap();
        let centered: Vec<f64> = x.as_slice().iter().zip(p.mean()).map(|(a, m)| a - m).collect();
        let resid: Vec<f64> = s
            .as_slice()
            .iter()
            .zip(&centered)
            .map(|(sv, c)| sigma * sigma * sv + c)
            .collect();
        assert!(crate::numkit::norm2(&resid) / crate::numkit::norm2(&centered) <= 1e-3);
    }

    #[test]
    fn single_component_gmm_equals_gaussian() {
        let p = correlated_prior(2, 2, 11);
        let gmm = GmmPrior::new(vec![1.0], vec![p.clone()]).unwrap();
        let x = SourceArray::from_vec(2, 2, vec![0.2, 0.1, -0.7, 0.4]).unwrap();
        assert_eq!(eval_score(&gmm, &x, 0.05).unwrap(), eval_score(&p, &x, 0.05).unwrap());
    }

    #[test]
    fn finite_differences_gaussian_and_gmm() {
        let p = correlated_prior(2, 3, 12);
        let x = SourceArray::from_vec(2, 3, vec![0.2, 0.1, -0.7, 0.4, 0.0, 1.0]).unwrap();
        let err = finite_diff_check(&p, &|v: &SourceArray| p.log_density(v.as_slice(), 0.1), &x, 0.1, 1e-4).unwrap();
        assert!(err <= 1e-5, "gaussian err {err}");

        let comps: Vec<GaussianPrior> = (0..3).map(|k| correlated_prior(2, 3, 20 + k)).collect();
        let gmm = GmmPrior::new(vec![0.2, 0.5, 0.3], comps).unwrap();
        let err = finite_diff_check(&gmm, &|v: &SourceArray| gmm.log_density(v.as_slice(), 0.1), &x, 0.1, 1e-4).unwrap();
        assert!(err <= 1e-4, "gmm err {err}");
    }

    #[test]
    fn gmm_weights_validated() {
        let p = GaussianPrior::standard(1, 1).unwrap();
        assert!(GmmPrior::new(vec![0.5, 0.6], vec![p.clone(), p.clone()]).is_err());
        assert!(GmmPrior::new(vec![-0.5, 1.5], vec![p.clone(), p.clone()]).is_err());
        assert!(GmmPrior::new(vec![1.0], vec![]).is_err());
    }

    #[test]
    fn rejects_indefinite_covariance() {
        let cov = Mat::from_rows(&[&[1.0, 2.0], &[2.0, 1.0]]);
        assert!(matches!(
            GaussianPrior::new(2, 1, vec![0.0; 2], cov),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn batch_matches_single() {
        let p = correlated_prior(2, 2, 13);
        let mut rng = Rng::new(1, 1);
        let xs: Vec<SourceArray> = (0..5).map(|_| SourceArray::from_vec(2, 2, randn(&mut rng, 4)).unwrap()).collect();
        let batch = eval_score_batch(&p, &xs, 0.4).unwrap();
        for (x, b) in xs.iter().zip(&batch) {
            let single = eval_score(&p, x, 0.4).unwrap();
            for (u, v) in single.as_slice().iter().zip(b.as_slice()) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }
}
