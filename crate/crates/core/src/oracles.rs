//! Exact reference answers for the samplers: Gaussian conditioning in closed
//! form, brute-force quadrature over the mixture constraint, and the
//! analytic probability-flow solution for a scalar Gaussian.

use crate::error::{Error, Result};
use crate::numkit::{cholesky, cholesky_solve, Mat};
use crate::samplers::ImputationSpec;
use crate::scores::{log_sum_exp, GaussianPrior, ScoreModel};
use crate::sources::SourceArray;

/// Posterior of a Gaussian prior given the mixture `y = sum_n x_n`.
#[derive(Debug, Clone)]
pub struct GaussianPosterior {
    pub n_sources: usize,
    pub dim: usize,
    pub mean: Vec<f64>,
    /// Rank `(N - 1) D`; zero along the mixture direction.
    pub cov: Mat,
    /// Orthonormal columns spanning `{v : sum_n v_n = 0}`.
    pub support_basis: Mat,
}

impl GaussianPosterior {
    pub fn mean_array(&self) -> SourceArray {
        SourceArray::from_vec(self.n_sources, self.dim, self.mean.clone()).expect("posterior shape")
    }

    /// Posterior variance of every coordinate.
    pub fn variances(&self) -> Vec<f64> {
        (0..self.cov.rows()).map(|i| self.cov[(i, i)]).collect()
    }
}

/// Columns of `Sigma A^T` where `A` sums the sources at each sample index.
fn cov_times_sum_map(cov: &Mat, n_sources: usize, dim: usize) -> Mat {
    let len = n_sources * dim;
    let mut out = Mat::zeros(len, dim);
    for i in 0..len {
        let row = cov.row(i);
        let dst = out.row_mut(i);
        for n in 0..n_sources {
            for (d, v) in dst.iter_mut().enumerate() {
                *v += row[n * dim + d];
            }
        }
    }
    out
}

/// Helmert contrasts over the source axis, one block per sample index.
fn constraint_basis(n_sources: usize, dim: usize) -> Mat {
    let len = n_sources * dim;
    let mut basis = Mat::zeros(len, (n_sources - 1) * dim);
    for k in 1..n_sources {
        let norm = 1.0 / ((k * (k + 1)) as f64).sqrt();
        for d in 0..dim {
            let col = (k - 1) * dim + d;
            for n in 0..k {
                basis.row_mut(n * dim + d)[col] = norm;
            }
            basis.row_mut(k * dim + d)[col] = -(k as f64) * norm;
        }
    }
    basis
}

/// `mean = mu + Sigma A^T (A Sigma A^T)^{-1} (y - A mu)`,
/// `cov = Sigma - Sigma A^T (A Sigma A^T)^{-1} A Sigma`.
pub fn gaussian_posterior_given_mixture(prior: &GaussianPrior, y: &[f64]) -> Result<GaussianPosterior> {
    let (n_src, dim) = (prior.n_sources(), prior.dim());
    if y.len() != dim {
        return Err(Error::shape(dim, y.len()));
    }
    let len = n_src * dim;
    let sat = cov_times_sum_map(prior.cov(), n_src, dim);
    // A Sigma A^T: sum the rows of Sigma A^T over sources.
    let mut s = Mat::zeros(dim, dim);
    for n in 0..n_src {
        for d in 0..dim {
            for (v, w) in s.row_mut(d).iter_mut().zip(sat.row(n * dim + d)) {
                *v += w;
            }
        }
    }
    // Symmetrize against rounding before factoring.
    let s = s.add(&s.transpose())?.scale(0.5);
    let l = cholesky(&s)?;

    let mu = prior.mean();
    let mut resid = y.to_vec();
    for n in 0..n_src {
        for (r, m) in resid.iter_mut().zip(&mu[n * dim..(n + 1) * dim]) {
            *r -= m;
        }
    }
    let w = cholesky_solve(&l, &resid)?;
    let mean: Vec<f64> = (0..len)
        .map(|i| mu[i] + sat.row(i).iter().zip(&w).map(|(a, b)| a * b).sum::<f64>())
        .collect();

    // K = S^{-1} (Sigma A^T)^T, column by column.
    let mut k = Mat::zeros(dim, len);
    for i in 0..len {
        let col = cholesky_solve(&l, sat.row(i))?;
        for (d, v) in col.into_iter().enumerate() {
            k.row_mut(d)[i] = v;
        }
    }
    let cov = prior.cov().add(&sat.matmul(&k)?.scale(-1.0))?;
    let cov = cov.add(&cov.transpose())?.scale(0.5);

    Ok(GaussianPosterior {
        n_sources: n_src,
        dim,
        mean,
        cov,
        support_basis: constraint_basis(n_src, dim),
    })
}

/// Conditional of the free sources given the fixed ones; returned in the
/// order of [`ImputationSpec::free_indices`].
pub fn gaussian_conditional(prior: &GaussianPrior, spec: &ImputationSpec) -> Result<(Vec<f64>, Mat)> {
    let n_src = prior.n_sources();
    let free = spec.free_indices(n_src);
    if free.is_empty() {
        return Err(Error::BadConfig("no free sources to condition".into()));
    }
    spec.fixed_values().check_shape(spec.fixed_indices().len(), prior.dim())?;
    let fi = prior.coordinates(&free)?;
    let ii = prior.coordinates(spec.fixed_indices())?;
    let cov = prior.cov();
    let s_ff = cov.select(&fi, &fi);
    let s_fi = cov.select(&fi, &ii);
    let s_ii = cov.select(&ii, &ii);
    let l = cholesky(&s_ii)?;

    let mu = prior.mean();
    let delta: Vec<f64> = ii
        .iter()
        .zip(spec.fixed_values().as_slice())
        .map(|(&i, v)| v - mu[i])
        .collect();
    let w = cholesky_solve(&l, &delta)?;
    let mean: Vec<f64> = fi
        .iter()
        .enumerate()
        .map(|(r, &i)| mu[i] + s_fi.row(r).iter().zip(&w).map(|(a, b)| a * b).sum::<f64>())
        .collect();

    // Sigma_ff - Sigma_fi Sigma_ii^{-1} Sigma_if
    let mut solved = Mat::zeros(ii.len(), fi.len());
    for r in 0..fi.len() {
        let col = cholesky_solve(&l, s_fi.row(r))?;
        for (c, v) in col.into_iter().enumerate() {
            solved.row_mut(c)[r] = v;
        }
    }
    let cond = s_ff.add(&s_fi.matmul(&solved)?.scale(-1.0))?;
    Ok((mean, cond))
}

/// Uniform tensor grid over the free coordinates, centred on `y / N`.
#[derive(Debug, Clone, Copy)]
pub struct GridSpec {
    pub half_width: f64,
    /// Points per axis (odd keeps the centre on the grid).
    pub points: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            half_width: 8.0,
            points: 801,
        }
    }
}

/// Per-source posterior moments from quadrature.
#[derive(Debug, Clone)]
pub struct GridMoments {
    pub mean: SourceArray,
    pub variance: SourceArray,
    /// Normalized mass in the outermost grid layer.
    pub boundary_mass: f64,
}

/// Largest number of free coordinates `grid_posterior` will integrate over.
pub const MAX_GRID_DIMS: usize = 3;

/// Brute-force posterior moments over `{x : sum_n x_n = y}`, parameterizing
/// the first `N - 1` sources freely and setting the last to the residual.
///
/// `log_density` is the (unnormalized) prior log-density of a full array.
pub fn grid_posterior(
    log_density: &dyn Fn(&SourceArray) -> f64,
    n_sources: usize,
    y: &[f64],
    grid: GridSpec,
) -> Result<GridMoments> {
    let dim = y.len();
    if n_sources < 2 || dim == 0 {
        return Err(Error::BadConfig("grid posterior needs N >= 2 and D >= 1".into()));
    }
    let free = (n_sources - 1) * dim;
    if free > MAX_GRID_DIMS {
        return Err(Error::BadConfig(format!(
            "{free} free coordinates exceed the quadrature limit of {MAX_GRID_DIMS}"
        )));
    }
    if grid.points < 3 || !(grid.half_width > 0.0) {
        return Err(Error::BadConfig("grid needs >= 3 points and positive width".into()));
    }
    let p = grid.points;
    let step = 2.0 * grid.half_width / (p - 1) as f64;
    let centre: Vec<f64> = (0..free).map(|c| y[c % dim] / n_sources as f64).collect();
    let total = p.pow(free as u32);

    let mut x = SourceArray::zeros(n_sources, dim);
    let mut logw = Vec::with_capacity(total);
    let mut on_edge = Vec::with_capacity(total);
    for flat in 0..total {
        let mut rem = flat;
        let mut edge = false;
        for c in 0..free {
            let k = rem % p;
            rem /= p;
            edge |= k == 0 || k == p - 1;
            x.as_mut_slice()[c] = centre[c] - grid.half_width + k as f64 * step;
        }
        fill_last(&mut x, y);
        logw.push(log_density(&x));
        on_edge.push(edge);
    }
    let lse = log_sum_exp(&logw);
    if !lse.is_finite() {
        return Err(Error::GridTooCoarse(f64::NAN));
    }

    let len = n_sources * dim;
    let mut m1 = vec![0.0; len];
    let mut m2 = vec![0.0; len];
    let mut boundary = 0.0;
    for flat in 0..total {
        let w = (logw[flat] - lse).exp();
        if on_edge[flat] {
            boundary += w;
        }
        let mut rem = flat;
        for c in 0..free {
            let k = rem % p;
            rem /= p;
            x.as_mut_slice()[c] = centre[c] - grid.half_width + k as f64 * step;
        }
        fill_last(&mut x, y);
        for (i, v) in x.as_slice().iter().enumerate() {
            m1[i] += w * v;
            m2[i] += w * v * v;
        }
    }
    if boundary > 1e-6 {
        return Err(Error::GridTooCoarse(boundary));
    }
    let var: Vec<f64> = m1.iter().zip(&m2).map(|(a, b)| (b - a * a).max(0.0)).collect();
    Ok(GridMoments {
        mean: SourceArray::from_vec(n_sources, dim, m1)?,
        variance: SourceArray::from_vec(n_sources, dim, var)?,
        boundary_mass: boundary,
    })
}

fn fill_last(x: &mut SourceArray, y: &[f64]) {
    let n = x.n_sources();
    let mut resid = y.to_vec();
    for row in 0..n - 1 {
        for (r, v) in resid.iter_mut().zip(x.row(row)) {
            *r -= v;
        }
    }
    x.row_mut(n - 1).copy_from_slice(&resid);
}

/// Exact probability-flow solution for a centred scalar `N(0, s^2)` prior,
/// transported from noise level `t_end` down to `t`.
pub fn gaussian_flow_closed_form(s: f64, x_t: f64, t: f64, t_end: f64) -> f64 {
    assert!(s > 0.0, "prior scale must be positive");
    x_t * ((s * s + t * t) / (s * s + t_end * t_end)).sqrt()
}

/// Minimum-MSE denoiser `E[x0 | x0 + sigma eps = x] = x + sigma^2 S(x, sigma)`.
pub fn optimal_denoiser(prior: &GaussianPrior, x: &[f64], sigma: f64) -> Vec<f64> {
    let mut s = vec![0.0; x.len()];
    prior.score_into(x, 1, sigma, &mut s);
    x.iter().zip(&s).map(|(v, g)| v + sigma * sigma * g).collect()
}

/// `trace(Cov(x0 | x0 + sigma eps)) / (N D)`: the per-entry error floor of
/// any denoiser at noise level `sigma`.
pub fn optimal_denoiser_mse(prior: &GaussianPrior, sigma: f64) -> f64 {
    let s2 = sigma * sigma;
    let tr: f64 = prior.eigen().values.iter().map(|l| l * s2 / (l + s2)).sum();
    tr / prior.len() as f64
}
