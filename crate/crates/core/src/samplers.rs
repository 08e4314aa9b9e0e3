//! Euler probability-flow samplers with churn and corrector passes.
//!
//! Every procedure shares one loop: for each schedule index `i = I..1` and
//! corrector pass `r = R..0`, raise the noise level to
//! `sigma_hat = sigma_i (1 + alpha)` by injecting fresh noise, take an Euler
//! step of the flow `dx = -sigma S(x, sigma) dsigma` down to `sigma_{i-1}`,
//! and on corrector passes (`r > 0`) re-noise back up to `sigma_i`. The
//! procedures differ only in which gradient replaces `S`:
//!
//! * total generation: the prior score itself;
//! * imputation: the prior score evaluated with the fixed stems replaced by
//!   forward-process draws around their clean values;
//! * Dirac separation: `S_n(z) - S_c(z)` with the constrained stem `c`
//!   pinned to `y - sum(free stems)`;
//! * Gaussian separation: `S_n(x) - (sum(x) - y) / (c sigma)^2`.
//!
//! The Dirac and Gaussian separators also come in factorized
//! ("weakly supervised") form where each stem has its own single-source model.
//!
//! Chains run in lockstep so that model evaluations batch; chain `k` draws
//! all of its noise from stream `k` of the configured seed, so a chain's
//! output does not depend on which other chains share its batch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::Rng;
use crate::schedule::Schedule;
use crate::scores::ScoreModel;
use crate::sources::SourceArray;

/// Cap on the churn factor `alpha`.
pub const MAX_CHURN_ALPHA: f64 = std::f64::consts::SQRT_2 - 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub s_churn: f64,
    pub corrector_steps: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: 150,
            s_churn: 20.0,
            corrector_steps: 1,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, sched: &Schedule) -> Result<()> {
        if self.steps < 2 {
            return Err(Error::BadConfig(format!("steps must be >= 2, got {}", self.steps)));
        }
        if self.steps != sched.steps() {
            return Err(Error::BadConfig(format!(
                "sampler steps ({}) differ from schedule steps ({})",
                self.steps,
                sched.steps()
            )));
        }
        if !(self.s_churn >= 0.0 && self.s_churn.is_finite()) {
            return Err(Error::BadConfig(format!("s_churn must be >= 0, got {}", self.s_churn)));
        }
        Ok(())
    }

    pub fn alpha(&self) -> f64 {
        churn_alpha(self.s_churn, self.steps)
    }
}

/// `min(S_churn / I, sqrt(2) - 1)`.
pub fn churn_alpha(s_churn: f64, steps: usize) -> f64 {
    (s_churn / steps as f64).min(MAX_CHURN_ALPHA)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Likelihood {
    Dirac,
    Gaussian,
}

impl std::fmt::Display for Likelihood {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Likelihood::Dirac => "dirac",
            Likelihood::Gaussian => "gaussian",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeparationConfig {
    pub base: SamplerConfig,
    pub likelihood: Likelihood,
    /// Stem pinned to the mixture residual (Dirac only), 0-based.
    pub constrained_source: usize,
    /// `gamma(sigma) = gamma_coeff * sigma` (Gaussian only).
    pub gamma_coeff: f64,
}

impl SeparationConfig {
    pub fn dirac(base: SamplerConfig, constrained_source: usize) -> Self {
        SeparationConfig {
            base,
            likelihood: Likelihood::Dirac,
            constrained_source,
            gamma_coeff: 0.75,
        }
    }

    pub fn gaussian(base: SamplerConfig, gamma_coeff: f64) -> Self {
        SeparationConfig {
            base,
            likelihood: Likelihood::Gaussian,
            constrained_source: 0,
            gamma_coeff,
        }
    }
}

/// Stems held fixed during partial generation.
#[derive(Debug, Clone, PartialEq)]
pub struct ImputationSpec {
    fixed_indices: Vec<usize>,
    fixed_values: SourceArray,
}

impl ImputationSpec {
    /// `fixed_values` row `k` holds the clean stem `fixed_indices[k]`.
    pub fn new(n_sources: usize, fixed_indices: Vec<usize>, fixed_values: SourceArray) -> Result<Self> {
        if fixed_indices.is_empty() || fixed_indices.len() >= n_sources {
            return Err(Error::BadConfig(format!(
                "fixed set must be a proper non-empty subset of {n_sources} sources, got {}",
                fixed_indices.len()
            )));
        }
        let mut seen = vec![false; n_sources];
        for &i in &fixed_indices {
            if i >= n_sources {
                return Err(Error::IndexOutOfRange {
                    index: i,
                    len: n_sources,
                });
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::BadConfig(format!("source {i} fixed twice")));
            }
        }
        if fixed_values.n_sources() != fixed_indices.len() {
            return Err(Error::shape(fixed_indices.len(), fixed_values.n_sources()));
        }
        Ok(ImputationSpec {
            fixed_indices,
            fixed_values,
        })
    }

    pub fn fixed_indices(&self) -> &[usize] {
        &self.fixed_indices
    }

    pub fn fixed_values(&self) -> &SourceArray {
        &self.fixed_values
    }

    pub fn free_indices(&self, n_sources: usize) -> Vec<usize> {
        (0..n_sources).filter(|n| !self.fixed_indices.contains(n)).collect()
    }
}

/// Where the prior score comes from.
#[derive(Clone, Copy)]
pub enum Prior<'a> {
    /// One model over all `N` stems.
    Joint(&'a dyn ScoreModel),
    /// One single-stem model per source.
    Factorized(&'a [&'a dyn ScoreModel]),
}

impl Prior<'_> {
    fn shape(&self) -> Result<(usize, usize)> {
        match self {
            Prior::Joint(m) => Ok((m.n_sources(), m.dim())),
            Prior::Factorized(models) => {
                let first = models
                    .first()
                    .ok_or_else(|| Error::BadConfig("no per-source models".into()))?;
                let dim = first.dim();
                for m in models.iter() {
                    if m.n_sources() != 1 || m.dim() != dim {
                        return Err(Error::shape(
                            format!("(1, {dim}) per-source model"),
                            format!("({}, {})", m.n_sources(), m.dim()),
                        ));
                    }
                }
                Ok((models.len(), dim))
            }
        }
    }

    /// Prior score of every chain in `xs`.
    fn score(&self, xs: &[f64], batch: usize, sigma: f64, out: &mut [f64], dim: usize) {
        match self {
            Prior::Joint(m) => m.score_into(xs, batch, sigma, out),
            Prior::Factorized(models) => {
                let n_src = models.len();
                let mut rows = vec![0.0; batch * dim];
                let mut scores = vec![0.0; batch * dim];
                for (n, model) in models.iter().enumerate() {
                    for b in 0..batch {
                        let at = (b * n_src + n) * dim;
                        rows[b * dim..(b + 1) * dim].copy_from_slice(&xs[at..at + dim]);
                    }
                    model.score_into(&rows, batch, sigma, &mut scores);
                    for b in 0..batch {
                        let at = (b * n_src + n) * dim;
                        out[at..at + dim].copy_from_slice(&scores[b * dim..(b + 1) * dim]);
                    }
                }
            }
        }
    }
}

/// Which conditional gradient drives the flow.
#[derive(Clone, Copy)]
pub enum Task<'a> {
    Generate,
    Impute(&'a ImputationSpec),
    /// One mixture per chain.
    SeparateDirac { mixtures: &'a [Vec<f64>], constrained: usize },
    SeparateGaussian { mixtures: &'a [Vec<f64>], gamma_coeff: f64 },
}

/// Snapshot handed to an observer after every inner-loop pass.
pub struct PassState<'a> {
    pub step: usize,
    pub pass: usize,
    pub sigma_hat: f64,
    pub n_sources: usize,
    pub dim: usize,
    /// `batch * N * D` entries, chain-major.
    pub state: &'a [f64],
}

pub type Observer<'o> = &'o mut dyn FnMut(&PassState<'_>);

/// Runs `batch` chains of `task` in lockstep. Chain `k` uses noise stream
/// `first_stream + k` of `cfg.seed`.
pub fn run_chains(
    prior: Prior<'_>,
    task: Task<'_>,
    sched: &Schedule,
    cfg: &SamplerConfig,
    batch: usize,
    first_stream: u64,
    mut observer: Option<Observer<'_>>,
) -> Result<Vec<SourceArray>> {
    cfg.validate(sched)?;
    let (n_src, dim) = prior.shape()?;
    let flat = n_src * dim;
    validate_task(&task, n_src, dim, batch)?;
    if batch == 0 {
        return Ok(Vec::new());
    }

    let mut rngs: Vec<Rng> = (0..batch as u64)
        .map(|k| Rng::new(cfg.seed, first_stream + k))
        .collect();
    let steps = sched.steps();
    let sigmas = sched.sigmas();
    let alpha = cfg.alpha();

    let mut x = vec![0.0; batch * flat];
    for (b, rng) in rngs.iter_mut().enumerate() {
        for v in &mut x[b * flat..(b + 1) * flat] {
            *v = sigmas[steps] * rng.normal();
        }
    }
    if let Task::SeparateDirac { mixtures, constrained } = task {
        project_constrained(&mut x, mixtures, constrained, n_src, dim);
    }

    let mut z = vec![0.0; batch * flat];
    let mut score = vec![0.0; batch * flat];
    let mut grad = vec![0.0; batch * flat];

    for i in (1..=steps).rev() {
        let sigma_i = sigmas[i];
        let sigma_prev = sigmas[i - 1];
        for r in (0..=cfg.corrector_steps).rev() {
            let sigma_hat = sigma_i * (alpha + 1.0);
            if alpha > 0.0 {
                let churn = (sigma_hat * sigma_hat - sigma_i * sigma_i).sqrt();
                add_noise(&mut x, churn, &mut rngs, flat);
            }

            conditional_gradient(
                &prior, &task, &x, &mut z, &mut score, &mut grad, &mut rngs, batch, n_src, dim, sigma_hat,
            );

            // Euler step of dx/dsigma = -sigma * g from sigma_hat to sigma_{i-1}.
            let h = (sigma_prev - sigma_hat) * -sigma_hat;
            for (xv, g) in x.iter_mut().zip(&grad) {
                *xv += h * g;
            }
            if let Task::SeparateDirac { mixtures, constrained } = task {
                project_constrained(&mut x, mixtures, constrained, n_src, dim);
            }

            if r > 0 {
                let renoise = (sigma_i * sigma_i - sigma_prev * sigma_prev).sqrt();
                add_noise(&mut x, renoise, &mut rngs, flat);
                if let Task::SeparateDirac { mixtures, constrained } = task {
                    project_constrained(&mut x, mixtures, constrained, n_src, dim);
                }
            }

            if let Some(obs) = observer.as_mut() {
                obs(&PassState {
                    step: i,
                    pass: r,
                    sigma_hat,
                    n_sources: n_src,
                    dim,
                    state: &x,
                });
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { step: i });
        }
    }

    if let Task::Impute(spec) = task {
        for b in 0..batch {
            for (k, &n) in spec.fixed_indices().iter().enumerate() {
                let at = (b * n_src + n) * dim;
                x[at..at + dim].copy_from_slice(spec.fixed_values().row(k));
            }
        }
    }

    x.chunks_exact(flat)
        .map(|c| SourceArray::from_vec(n_src, dim, c.to_vec()))
        .collect()
}

fn validate_task(task: &Task<'_>, n_src: usize, dim: usize, batch: usize) -> Result<()> {
    let check_mixtures = |mixtures: &[Vec<f64>]| -> Result<()> {
        if mixtures.len() != batch {
            return Err(Error::shape(format!("{batch} mixtures"), mixtures.len()));
        }
        for y in mixtures {
            if y.len() != dim {
                return Err(Error::shape(format!("mixture of length {dim}"), y.len()));
            }
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::BadConfig("mixture contains non-finite samples".into()));
            }
        }
        Ok(())
    };
    match task {
        Task::Generate => Ok(()),
        Task::Impute(spec) => {
            if spec.fixed_indices().iter().any(|&i| i >= n_src)
                || spec.fixed_indices().len() >= n_src
            {
                return Err(Error::BadConfig(format!(
                    "imputation spec does not fit a {n_src}-source model"
                )));
            }
            spec.fixed_values().check_shape(spec.fixed_indices().len(), dim)
        }
        Task::SeparateDirac { mixtures, constrained } => {
            if n_src < 2 {
                return Err(Error::BadConfig("Dirac separation needs at least two sources".into()));
            }
            if *constrained >= n_src {
                return Err(Error::IndexOutOfRange {
                    index: *constrained,
                    len: n_src,
                });
            }
            check_mixtures(mixtures)
        }
        Task::SeparateGaussian { mixtures, gamma_coeff } => {
            if !(*gamma_coeff > 0.0 && gamma_coeff.is_finite()) {
                return Err(Error::BadConfig(format!("gamma coefficient must be positive, got {gamma_coeff}")));
            }
            check_mixtures(mixtures)
        }
    }
}

fn add_noise(x: &mut [f64], scale: f64, rngs: &mut [Rng], flat: usize) {
    for (chain, rng) in x.chunks_exact_mut(flat).zip(rngs.iter_mut()) {
        for v in chain {
            *v += scale * rng.normal();
        }
    }
}

/// Sets the constrained row of every chain to `y - sum(free rows)`.
fn project_constrained(x: &mut [f64], mixtures: &[Vec<f64>], constrained: usize, n_src: usize, dim: usize) {
    for (chain, y) in x.chunks_exact_mut(n_src * dim).zip(mixtures) {
        let mut resid = y.clone();
        for n in (0..n_src).filter(|&n| n != constrained) {
            for (r, v) in resid.iter_mut().zip(&chain[n * dim..(n + 1) * dim]) {
                *r -= v;
            }
        }
        chain[constrained * dim..(constrained + 1) * dim].copy_from_slice(&resid);
    }
}

#[allow(clippy::too_many_arguments)]
fn conditional_gradient(
    prior: &Prior<'_>,
    task: &Task<'_>,
    x: &[f64],
    z: &mut [f64],
    score: &mut [f64],
    grad: &mut [f64],
    rngs: &mut [Rng],
    batch: usize,
    n_src: usize,
    dim: usize,
    sigma_hat: f64,
) {
    let flat = n_src * dim;
    match *task {
        Task::Generate => {
            prior.score(x, batch, sigma_hat, grad, dim);
        }
        Task::Impute(spec) => {
            z.copy_from_slice(x);
            for (b, rng) in rngs.iter_mut().enumerate() {
                for (k, &n) in spec.fixed_indices().iter().enumerate() {
                    let at = (b * n_src + n) * dim;
                    for (zv, clean) in z[at..at + dim].iter_mut().zip(spec.fixed_values().row(k)) {
                        *zv = clean + sigma_hat * rng.normal();
                    }
                }
            }
            prior.score(z, batch, sigma_hat, grad, dim);
            for b in 0..batch {
                for &n in spec.fixed_indices() {
                    let at = (b * n_src + n) * dim;
                    grad[at..at + dim].fill(0.0);
                }
            }
        }
        Task::SeparateDirac { constrained, .. } => {
            // x already carries the projected constrained row, so x is z.
            prior.score(x, batch, sigma_hat, score, dim);
            for b in 0..batch {
                let chain = &score[b * flat..(b + 1) * flat];
                let pinned = &chain[constrained * dim..(constrained + 1) * dim];
                let out = &mut grad[b * flat..(b + 1) * flat];
                for n in 0..n_src {
                    let row = &mut out[n * dim..(n + 1) * dim];
                    if n == constrained {
                        row.fill(0.0);
                    } else {
                        for ((g, s), p) in row.iter_mut().zip(&chain[n * dim..(n + 1) * dim]).zip(pinned) {
                            *g = s - p;
                        }
                    }
                }
            }
        }
        Task::SeparateGaussian { mixtures, gamma_coeff } => {
            prior.score(x, batch, sigma_hat, grad, dim);
            let gamma = gamma_coeff * sigma_hat;
            let inv = 1.0 / (gamma * gamma);
            for (b, y) in mixtures.iter().enumerate() {
                let chain = &x[b * flat..(b + 1) * flat];
                let mut resid: Vec<f64> = y.iter().map(|v| -v).collect();
                for n in 0..n_src {
                    for (r, v) in resid.iter_mut().zip(&chain[n * dim..(n + 1) * dim]) {
                        *r += v;
                    }
                }
                let out = &mut grad[b * flat..(b + 1) * flat];
                for n in 0..n_src {
                    for (g, r) in out[n * dim..(n + 1) * dim].iter_mut().zip(&resid) {
                        *g -= inv * r;
                    }
                }
            }
        }
    }
}

/// Total generation: `count` joint samples.
pub fn generate(
    model: &dyn ScoreModel,
    sched: &Schedule,
    cfg: &SamplerConfig,
    count: usize,
) -> Result<Vec<SourceArray>> {
    run_chains(Prior::Joint(model), Task::Generate, sched, cfg, count, 0, None)
}

/// Partial generation of the free stems given the fixed ones.
pub fn impute(
    model: &dyn ScoreModel,
    spec: &ImputationSpec,
    sched: &Schedule,
    cfg: &SamplerConfig,
) -> Result<SourceArray> {
    Ok(impute_many(model, spec, sched, cfg, 1)?.remove(0))
}

/// `count` independent imputations (chain `k` on stream `k`).
pub fn impute_many(
    model: &dyn ScoreModel,
    spec: &ImputationSpec,
    sched: &Schedule,
    cfg: &SamplerConfig,
    count: usize,
) -> Result<Vec<SourceArray>> {
    run_chains(Prior::Joint(model), Task::Impute(spec), sched, cfg, count, 0, None)
}

fn require(cfg: &SeparationConfig, likelihood: Likelihood) -> Result<()> {
    if cfg.likelihood != likelihood {
        return Err(Error::BadConfig(format!(
            "{likelihood} separator called with a {} likelihood config",
            cfg.likelihood
        )));
    }
    Ok(())
}

/// Separates a batch of mixtures with either likelihood; chain `k` uses
/// stream `first_stream + k`.
pub fn separate_batch(
    prior: Prior<'_>,
    mixtures: &[Vec<f64>],
    sched: &Schedule,
    cfg: &SeparationConfig,
    first_stream: u64,
) -> Result<Vec<SourceArray>> {
    let task = match cfg.likelihood {
        Likelihood::Dirac => Task::SeparateDirac {
            mixtures,
            constrained: cfg.constrained_source,
        },
        Likelihood::Gaussian => Task::SeparateGaussian {
            mixtures,
            gamma_coeff: cfg.gamma_coeff,
        },
    };
    run_chains(prior, task, sched, &cfg.base, mixtures.len(), first_stream, None)
}

pub fn separate_dirac(
    model: &dyn ScoreModel,
    y: &[f64],
    sched: &Schedule,
    cfg: &SeparationConfig,
) -> Result<SourceArray> {
    require(cfg, Likelihood::Dirac)?;
    Ok(separate_batch(Prior::Joint(model), &[y.to_vec()], sched, cfg, 0)?.remove(0))
}

pub fn separate_gaussian(
    model: &dyn ScoreModel,
    y: &[f64],
    sched: &Schedule,
    cfg: &SeparationConfig,
) -> Result<SourceArray> {
    require(cfg, Likelihood::Gaussian)?;
    Ok(separate_batch(Prior::Joint(model), &[y.to_vec()], sched, cfg, 0)?.remove(0))
}

pub fn separate_weak_dirac(
    models: &[&dyn ScoreModel],
    y: &[f64],
    sched: &Schedule,
    cfg: &SeparationConfig,
) -> Result<SourceArray> {
    require(cfg, Likelihood::Dirac)?;
    Ok(separate_batch(Prior::Factorized(models), &[y.to_vec()], sched, cfg, 0)?.remove(0))
}

pub fn separate_weak_gaussian(
    models: &[&dyn ScoreModel],
    y: &[f64],
    sched: &Schedule,
    cfg: &SeparationConfig,
) -> Result<SourceArray> {
    require(cfg, Likelihood::Gaussian)?;
    Ok(separate_batch(Prior::Factorized(models), &[y.to_vec()], sched, cfg, 0)?.remove(0))
}

/// `max |sum(x) - y|` of a separated array.
pub fn mixture_residual(x: &SourceArray, y: &[f64]) -> f64 {
    x.mixture()
        .iter()
        .zip(y)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}
