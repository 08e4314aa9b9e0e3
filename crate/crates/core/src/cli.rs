//! The `msdm-lab` command line: TOML experiment configs, the six
//! subcommands, and the CSV/JSON/binary writers they share.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::{train_with_progress, MlpConfig, MlpDenoiser, TrainConfig};
use crate::error::{Error, Result};
use crate::metrics::{extract_chunks, score_chunk, summarize, Chunk, ChunkEval, ChunkFilter, EvalSummary};
use crate::samplers::{
    impute_many, mixture_residual, run_chains, separate_batch, Task, ImputationSpec, Likelihood, Prior, SamplerConfig,
    SeparationConfig,
};
use crate::schedule::Schedule;
use crate::scores::{GaussianPrior, ScoreModel};
use crate::sources::SourceArray;
use crate::toyslakh::{
    export_wav, make_correlated_gaussian_tracks, make_harmonic_tracks, source_name, ColoringSpec, GeneratorKind,
    HarmonicSpec, SplitSizes, Splits, ToyTrack,
};

pub const VERSION: &str = env!("MSDM_LAB_VERSION");

/// Chains separated together in one lockstep batch. Fixed so that results
/// do not depend on the worker count.
const CHUNK_BATCH: usize = 32;

#[derive(Debug, Parser)]
#[command(name = "msdm-lab", version = VERSION, about = "Multi-source diffusion sampling on toy stems")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// Experiment config (TOML); defaults are used for anything missing.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, env = "MSDM_LAB_WORKERS")]
    pub workers: Option<usize>,
    /// Also export audio as 16-bit WAV.
    #[arg(long, global = true)]
    pub wav: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Train the MLP denoiser on the dataset's train split.
    Train,
    /// Sample whole mixtures (all stems) from the model.
    Generate,
    /// Generate the free stems of a test track given the fixed ones.
    Impute,
    /// Separate every test chunk with the configured separator.
    Separate,
    /// Grid search over churn, constrained source / gamma and model variant.
    Sweep,
    /// Separate and score the test split.
    Eval,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Generate => "generate",
            Command::Impute => "impute",
            Command::Separate => "separate",
            Command::Sweep => "sweep",
            Command::Eval => "eval",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub sampler: SamplerParams,
    pub separation: SeparationParams,
    pub sweep: SweepConfig,
    pub eval: EvalConfig,
    pub train: TrainParams,
    pub generate: GenerateParams,
    pub impute: ImputeParams,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            schedule: ScheduleConfig::default(),
            sampler: SamplerParams::default(),
            separation: SeparationParams::default(),
            sweep: SweepConfig::default(),
            eval: EvalConfig::default(),
            train: TrainParams::default(),
            generate: GenerateParams::default(),
            impute: ImputeParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: GeneratorKind,
    pub n_sources: usize,
    pub dim: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub coupling: f64,
    pub sample_rate: u32,
    pub seed: u64,
    /// Filled with the defaults for `n_sources` when absent.
    pub coloring: Option<ColoringSpec>,
    pub harmonic: HarmonicSpec,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        let sizes = SplitSizes::default();
        DatasetConfig {
            kind: GeneratorKind::CorrelatedGaussian,
            n_sources: 4,
            dim: 64,
            train: sizes.train,
            valid: sizes.valid,
            test: sizes.test,
            coupling: 0.9,
            sample_rate: crate::toyslakh::DEFAULT_SAMPLE_RATE,
            seed: 0,
            coloring: None,
            harmonic: HarmonicSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Exact score of the correlated-Gaussian dataset's prior.
    Analytic,
    /// Trained MLP checkpoints.
    Denoiser,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub checkpoint: Option<PathBuf>,
    pub per_source_checkpoints: Vec<PathBuf>,
    pub hidden: Vec<usize>,
    pub f_features: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::Analytic,
            checkpoint: None,
            per_source_checkpoints: Vec::new(),
            hidden: vec![256, 256, 256],
            f_features: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: 150,
            sigma_min: crate::schedule::DEFAULT_SIGMA_MIN,
            sigma_max: crate::schedule::DEFAULT_SIGMA_MAX,
            rho: crate::schedule::DEFAULT_RHO,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerParams {
    pub s_churn: f64,
    pub corrector_steps: usize,
}

impl Default for SamplerParams {
    fn default() -> Self {
        SamplerParams {
            s_churn: 20.0,
            corrector_steps: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeparationParams {
    pub likelihood: Likelihood,
    pub constrained_source: usize,
    pub gamma_coeff: f64,
    /// Use per-source models instead of the joint one.
    pub weak: bool,
}

impl Default for SeparationParams {
    fn default() -> Self {
        SeparationParams {
            likelihood: Likelihood::Dirac,
            constrained_source: 0,
            gamma_coeff: 0.75,
            weak: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    Joint,
    Weak,
}

impl std::fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelVariant::Joint => "joint",
            ModelVariant::Weak => "weak",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub models: Vec<ModelVariant>,
    pub likelihoods: Vec<Likelihood>,
    pub s_churn: Vec<f64>,
    pub constrained_sources: Vec<usize>,
    pub gamma_coeffs: Vec<f64>,
    pub corrector_steps: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            models: vec![ModelVariant::Joint, ModelVariant::Weak],
            likelihoods: vec![Likelihood::Dirac, Likelihood::Gaussian],
            s_churn: vec![0.0, 1.0, 20.0, 40.0],
            constrained_sources: vec![0, 1, 2, 3],
            gamma_coeffs: vec![0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 2.0],
            corrector_steps: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeparatorKind {
    /// The configured diffusion separator.
    Sampler,
    /// Ground-truth stems (upper bound, checks the metric plumbing).
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub chunk_len: usize,
    pub hop: usize,
    pub silence_ratio: f64,
    pub drop_single_source: bool,
    pub separator: SeparatorKind,
    /// Evaluate only the first this-many kept chunks.
    pub max_chunks: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            chunk_len: 64,
            hop: 32,
            silence_ratio: 1e-4,
            drop_single_source: true,
            separator: SeparatorKind::Sampler,
            max_chunks: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch: usize,
    pub steps: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// Also train one single-stem model per source.
    pub per_source: bool,
}

impl Default for TrainParams {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainParams {
            lr: t.lr,
            beta1: t.beta1,
            beta2: t.beta2,
            batch: t.batch,
            steps: t.steps,
            sigma_min: t.sigma_range.0,
            sigma_max: t.sigma_range.1,
            per_source: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateParams {
    pub count: usize,
}

impl Default for GenerateParams {
    fn default() -> Self {
        GenerateParams { count: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImputeParams {
    pub fixed_sources: Vec<usize>,
    /// Test-split track providing the fixed stems.
    pub track: usize,
    pub count: usize,
}

impl Default for ImputeParams {
    fn default() -> Self {
        ImputeParams {
            fixed_sources: vec![1, 2, 3],
            track: 0,
            count: 16,
        }
    }
}

fn check(cond: bool, field: &str, message: impl Into<String>) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::config(field, message))
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, origin: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(origin, e.to_string().trim_end().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ExperimentConfig::from_toml(&text, &path.display().to_string())
    }

    /// Applies command-line overrides and fills defaults that depend on
    /// other fields, then validates.
    pub fn resolve(mut self, args: &CommonArgs) -> Result<Self> {
        if let Some(seed) = args.seed {
            self.seed = seed;
        }
        if let Some(out) = &args.out {
            self.out_dir = out.clone();
        }
        if self.dataset.coloring.is_none() {
            self.dataset.coloring = Some(ColoringSpec::default_for(self.dataset.n_sources));
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        let n = d.n_sources;
        check(n >= 1, "dataset.n_sources", "must be at least 1")?;
        check(d.dim >= 1, "dataset.dim", "must be at least 1")?;
        check(d.test >= 1, "dataset.test", "need at least one test track")?;
        check((0.0..1.0).contains(&d.coupling), "dataset.coupling", "must lie in [0, 1)")?;
        for p in self.model.checkpoint.iter().chain(&self.model.per_source_checkpoints) {
            check(p.exists(), "model.checkpoint", format!("{} does not exist", p.display()))?;
        }
        if !self.model.per_source_checkpoints.is_empty() {
            check(
                self.model.per_source_checkpoints.len() == n,
                "model.per_source_checkpoints",
                format!("need one checkpoint per source ({n})"),
            )?;
        }
        let s = &self.schedule;
        Schedule::new(s.steps, s.sigma_min, s.sigma_max, s.rho)
            .map_err(|e| Error::config("schedule", e.to_string()))?;
        check(
            self.sampler.s_churn >= 0.0 && self.sampler.s_churn.is_finite(),
            "sampler.s_churn",
            "must be >= 0",
        )?;
        check(
            self.separation.constrained_source < n,
            "separation.constrained_source",
            format!("must be below n_sources ({n})"),
        )?;
        check(self.separation.gamma_coeff > 0.0, "separation.gamma_coeff", "must be positive")?;

        let w = &self.sweep;
        check(!w.models.is_empty(), "sweep.models", "grid is empty")?;
        check(!w.likelihoods.is_empty(), "sweep.likelihoods", "grid is empty")?;
        check(!w.s_churn.is_empty(), "sweep.s_churn", "grid is empty")?;
        check(w.s_churn.iter().all(|&c| c >= 0.0 && c.is_finite()), "sweep.s_churn", "values must be >= 0")?;
        if w.likelihoods.contains(&Likelihood::Dirac) {
            check(!w.constrained_sources.is_empty(), "sweep.constrained_sources", "grid is empty")?;
            check(
                w.constrained_sources.iter().all(|&c| c < n),
                "sweep.constrained_sources",
                format!("indices must be below n_sources ({n})"),
            )?;
        }
        if w.likelihoods.contains(&Likelihood::Gaussian) {
            check(!w.gamma_coeffs.is_empty(), "sweep.gamma_coeffs", "grid is empty")?;
            check(w.gamma_coeffs.iter().all(|&g| g > 0.0), "sweep.gamma_coeffs", "values must be positive")?;
        }

        let e = &self.eval;
        check(e.chunk_len >= 1 && e.chunk_len <= d.dim, "eval.chunk_len", "must lie in 1..=dataset.dim")?;
        check(e.hop >= 1, "eval.hop", "must be positive")?;
        check(e.silence_ratio >= 0.0, "eval.silence_ratio", "must be non-negative")?;
        self.train_config().validate()?;

        check(self.impute.track < d.test, "impute.track", "must index a test track")?;
        ImputationSpec::new(n, self.impute.fixed_sources.clone(), SourceArray::zeros(self.impute.fixed_sources.len().max(1), d.dim))
            .map_err(|e| Error::config("impute.fixed_sources", e.to_string()))?;
        Ok(())
    }

    /// The config with every default spelled out, itself a valid input.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn schedule(&self) -> Schedule {
        let s = &self.schedule;
        Schedule::new(s.steps, s.sigma_min, s.sigma_max, s.rho).expect("validated schedule")
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            steps: self.schedule.steps,
            s_churn: self.sampler.s_churn,
            corrector_steps: self.sampler.corrector_steps,
            seed: self.seed,
        }
    }

    pub fn separation_config(&self) -> SeparationConfig {
        SeparationConfig {
            base: self.sampler_config(),
            likelihood: self.separation.likelihood,
            constrained_source: self.separation.constrained_source,
            gamma_coeff: self.separation.gamma_coeff,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            lr: t.lr,
            beta1: t.beta1,
            beta2: t.beta2,
            batch: t.batch,
            steps: t.steps,
            sigma_range: (t.sigma_min, t.sigma_max),
            seed: self.seed,
        }
    }

    pub fn chunk_filter(&self) -> ChunkFilter {
        ChunkFilter {
            silence_ratio: self.eval.silence_ratio,
            drop_single_source: self.eval.drop_single_source,
        }
    }
}

/// Dataset splits plus the exact prior when the generator has one.
pub struct Dataset {
    pub splits: Splits,
    pub prior: Option<GaussianPrior>,
}

pub fn build_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let d = &cfg.dataset;
    let sizes = SplitSizes {
        train: d.train,
        valid: d.valid,
        test: d.test,
    };
    let (tracks, prior) = match d.kind {
        GeneratorKind::CorrelatedGaussian => {
            let coloring = d.coloring.clone().unwrap_or_else(|| ColoringSpec::default_for(d.n_sources));
            let (mut t, p) =
                make_correlated_gaussian_tracks(sizes.total(), d.n_sources, d.dim, d.coupling, &coloring, d.seed)?;
            for track in &mut t {
                track.sample_rate = d.sample_rate;
            }
            (t, Some(p))
        }
        GeneratorKind::Harmonic => (
            make_harmonic_tracks(sizes.total(), d.n_sources, d.dim, d.sample_rate, &d.harmonic, d.seed)?,
            None,
        ),
    };
    Ok(Dataset {
        splits: Splits::from_tracks(tracks, sizes)?,
        prior,
    })
}

/// Score models available to the samplers.
pub enum Models {
    Analytic {
        joint: GaussianPrior,
        marginals: Vec<GaussianPrior>,
    },
    Learned {
        joint: Option<MlpDenoiser>,
        per_source: Vec<MlpDenoiser>,
    },
}

impl Models {
    pub fn load(cfg: &ExperimentConfig, dataset: &Dataset) -> Result<Self> {
        match cfg.model.kind {
            ModelKind::Analytic => {
                let prior = dataset.prior.clone().ok_or_else(|| {
                    Error::config("model.kind", "the analytic model needs the correlated_gaussian dataset")
                })?;
                Ok(Models::Analytic {
                    marginals: prior.source_marginals()?,
                    joint: prior,
                })
            }
            ModelKind::Denoiser => {
                let joint = cfg.model.checkpoint.as_deref().map(MlpDenoiser::load).transpose()?;
                let per_source = cfg
                    .model
                    .per_source_checkpoints
                    .iter()
                    .map(|p| MlpDenoiser::load(p))
                    .collect::<Result<Vec<_>>>()?;
                let (n, d) = (cfg.dataset.n_sources, cfg.dataset.dim);
                if let Some(m) = &joint {
                    check(
                        (m.n_sources(), m.dim()) == (n, d),
                        "model.checkpoint",
                        format!("checkpoint shape ({}, {}) does not match the dataset ({n}, {d})", m.n_sources(), m.dim()),
                    )?;
                }
                for m in &per_source {
                    check(
                        (m.n_sources(), m.dim()) == (1, d),
                        "model.per_source_checkpoints",
                        format!("expected single-source models of length {d}"),
                    )?;
                }
                Ok(Models::Learned { joint, per_source })
            }
        }
    }

    pub fn joint(&self) -> Result<&dyn ScoreModel> {
        match self {
            Models::Analytic { joint, .. } => Ok(joint),
            Models::Learned { joint: Some(m), .. } => Ok(m),
            Models::Learned { joint: None, .. } => Err(Error::config("model.checkpoint", "no joint model configured")),
        }
    }

    pub fn per_source(&self) -> Result<Vec<&dyn ScoreModel>> {
        let out: Vec<&dyn ScoreModel> = match self {
            Models::Analytic { marginals, .. } => marginals.iter().map(|m| m as &dyn ScoreModel).collect(),
            Models::Learned { per_source, .. } => per_source.iter().map(|m| m as &dyn ScoreModel).collect(),
        };
        if out.is_empty() {
            return Err(Error::config("model.per_source_checkpoints", "no per-source models configured"));
        }
        Ok(out)
    }
}

/// Separates every chunk; chunk `k` draws its noise from stream `chunk.index`.
pub fn separate_chunks(
    prior: Prior<'_>,
    chunks: &[Chunk],
    sched: &Schedule,
    sep: &SeparationConfig,
) -> Result<Vec<SourceArray>> {
    let groups = chunks
        .par_chunks(CHUNK_BATCH)
        .map(|group| {
            let mixtures: Vec<Vec<f64>> = group.iter().map(|c| c.mixture.clone()).collect();
            separate_batch(prior, &mixtures, sched, sep, group[0].index as u64)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(groups.into_iter().flatten().collect())
}

pub fn test_chunks(cfg: &ExperimentConfig, tracks: &[ToyTrack]) -> Result<Vec<Chunk>> {
    let mut chunks = extract_chunks(tracks, cfg.eval.chunk_len, cfg.eval.hop, &cfg.chunk_filter())?;
    if let Some(max) = cfg.eval.max_chunks {
        chunks.truncate(max);
    }
    if chunks.is_empty() {
        return Err(Error::EmptyAfterFilter);
    }
    Ok(chunks)
}

pub fn score_estimates(tracks: &[ToyTrack], chunks: &[Chunk], estimates: &[SourceArray]) -> Result<(Vec<ChunkEval>, EvalSummary)> {
    let evals = chunks
        .iter()
        .zip(estimates)
        .map(|(c, e)| score_chunk(&tracks[c.track_idx].track_id, c, e))
        .collect::<Result<Vec<_>>>()?;
    let summary = summarize(&evals)?;
    Ok((evals, summary))
}

/// One grid point of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub model: ModelVariant,
    pub likelihood: Likelihood,
    pub s_churn: f64,
    pub constrained_source: Option<usize>,
    pub gamma_coeff: Option<f64>,
    pub seed: u64,
    pub n_chunks: usize,
    /// `None` unless `status` is `Ok`.
    pub summary: Option<EvalSummary>,
    /// Per-chunk mean SI-SDR_i over non-silent stems, in chunk order.
    pub chunk_means: Vec<f64>,
    /// `max |sum(x) - y| / max |y|` over chunks.
    pub max_rel_residual: Option<f64>,
    pub status: CellStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    /// Some chain's state became non-finite at this schedule index.
    Diverged { step: usize },
    /// The state stayed finite but the SI-SDR did not (estimates near overflow).
    NonFiniteMetric,
}

pub fn sweep_grid(cfg: &ExperimentConfig) -> Vec<(ModelVariant, SeparationConfig)> {
    let w = &cfg.sweep;
    let mut cells = Vec::new();
    for &model in &w.models {
        for &likelihood in &w.likelihoods {
            for &s_churn in &w.s_churn {
                let base = SamplerConfig {
                    steps: cfg.schedule.steps,
                    s_churn,
                    corrector_steps: w.corrector_steps,
                    seed: cfg.seed,
                };
                match likelihood {
                    Likelihood::Dirac => {
                        for &c in &w.constrained_sources {
                            cells.push((model, SeparationConfig::dirac(base, c)));
                        }
                    }
                    Likelihood::Gaussian => {
                        for &g in &w.gamma_coeffs {
                            cells.push((model, SeparationConfig::gaussian(base, g)));
                        }
                    }
                }
            }
        }
    }
    cells
}

fn chunk_mean(e: &ChunkEval) -> f64 {
    let vals: Vec<f64> = e.si_sdr_i.iter().flatten().copied().collect();
    vals.iter().sum::<f64>() / vals.len() as f64
}

/// Runs one separator configuration over the test chunks.
pub fn run_cell(
    models: &Models,
    tracks: &[ToyTrack],
    chunks: &[Chunk],
    sched: &Schedule,
    variant: ModelVariant,
    sep: &SeparationConfig,
) -> Result<SweepCell> {
    let per_source;
    let prior = match variant {
        ModelVariant::Joint => Prior::Joint(models.joint()?),
        ModelVariant::Weak => {
            per_source = models.per_source()?;
            Prior::Factorized(&per_source)
        }
    };
    let mut cell = SweepCell {
        model: variant,
        likelihood: sep.likelihood,
        s_churn: sep.base.s_churn,
        constrained_source: (sep.likelihood == Likelihood::Dirac).then_some(sep.constrained_source),
        gamma_coeff: (sep.likelihood == Likelihood::Gaussian).then_some(sep.gamma_coeff),
        seed: sep.base.seed,
        n_chunks: chunks.len(),
        summary: None,
        chunk_means: Vec::new(),
        max_rel_residual: None,
        status: CellStatus::Ok,
    };
    let estimates = match separate_chunks(prior, chunks, sched, sep) {
        Ok(e) => e,
        Err(Error::NonFiniteState { step }) => {
            cell.status = CellStatus::Diverged { step };
            return Ok(cell);
        }
        Err(e) => return Err(e),
    };
    let (evals, summary) = score_estimates(tracks, chunks, &estimates)?;
    let max_rel_residual = chunks
        .iter()
        .zip(&estimates)
        .map(|(c, e)| {
            let scale = c.mixture.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            mixture_residual(e, &c.mixture) / scale.max(f64::MIN_POSITIVE)
        })
        .fold(0.0, f64::max);
    let chunk_means: Vec<f64> = evals.iter().map(chunk_mean).collect();
    if !summary.all.is_finite() || chunk_means.iter().any(|v| !v.is_finite()) {
        cell.status = CellStatus::NonFiniteMetric;
        return Ok(cell);
    }
    cell.chunk_means = chunk_means;
    cell.summary = Some(summary);
    cell.max_rel_residual = Some(max_rel_residual);
    Ok(cell)
}

/// Every cell of the configured grid, in grid order.
pub fn run_sweep(cfg: &ExperimentConfig, dataset: &Dataset, models: &Models) -> Result<Vec<SweepCell>> {
    let chunks = test_chunks(cfg, &dataset.splits.test)?;
    let sched = cfg.schedule();
    sweep_grid(cfg)
        .par_iter()
        .map(|(variant, sep)| run_cell(models, &dataset.splits.test, &chunks, &sched, *variant, sep))
        .collect()
}

fn fmt_db(v: f64) -> String {
    format!("{v:.2}")
}

pub fn sweep_csv(cells: &[SweepCell], n_sources: usize) -> Result<String> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let mut header = vec!["model".to_string(), "likelihood".into(), "s_churn".into(), "constrained_or_gamma".into()];
    header.extend((0..n_sources).map(source_name));
    header.extend(["all".to_string(), "n_chunks".into(), "seed".into()]);
    w.write_record(&header).map_err(csv_err)?;
    for c in cells {
        let axis = match (c.constrained_source, c.gamma_coeff) {
            (Some(s), _) => source_name(s),
            (None, Some(g)) => format!("{g}"),
            (None, None) => String::new(),
        };
        let mut row = vec![c.model.to_string(), c.likelihood.to_string(), format!("{}", c.s_churn), axis];
        match &c.summary {
            Some(sum) => {
                row.extend(sum.per_source.iter().map(|&v| fmt_db(v)));
                row.push(fmt_db(sum.all));
            }
            None => row.extend(std::iter::repeat("nan".to_string()).take(n_sources + 1)),
        }
        row.extend([c.n_chunks.to_string(), c.seed.to_string()]);
        w.write_record(&row).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::config("csv", e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

fn csv_err(e: csv::Error) -> Error {
    Error::config("csv", e.to_string())
}

/// Writes `<base>.bin` (little-endian f64, row-major) and a `<base>.json` sidecar.
pub fn write_array(dir: &Path, base: &str, data: &[f64], shape: &[usize]) -> Result<Vec<String>> {
    assert_eq!(data.len(), shape.iter().product::<usize>());
    let bin = dir.join(format!("{base}.bin"));
    let mut bytes = Vec::with_capacity(data.len() * 8);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
    let meta = ArrayMeta {
        dtype: "f64-le".into(),
        order: "row-major".into(),
        shape: shape.to_vec(),
    };
    let side = dir.join(format!("{base}.json"));
    write_text(&side, &(serde_json::to_string_pretty(&meta).expect("meta serializes") + "\n"))?;
    Ok(vec![format!("{base}.bin"), format!("{base}.json")])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayMeta {
    pub dtype: String,
    pub order: String,
    pub shape: Vec<usize>,
}

/// Reads an array written by [`write_array`].
pub fn read_array(dir: &Path, base: &str) -> Result<(Vec<f64>, Vec<usize>)> {
    let side = dir.join(format!("{base}.json"));
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta: ArrayMeta = serde_json::from_str(&text).map_err(|e| Error::config(side.display().to_string(), e.to_string()))?;
    let bin = dir.join(format!("{base}.bin"));
    let bytes = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let want = meta.shape.iter().product::<usize>();
    if bytes.len() != want * 8 {
        return Err(Error::shape(want * 8, bytes.len()));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((data, meta.shape))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    seed: u64,
    config: &'static str,
    outputs: &'a [String],
}

/// Shared state of one invocation.
pub struct Run {
    pub cfg: ExperimentConfig,
    pub command: Command,
    pub wav: bool,
    outputs: Vec<String>,
}

impl Run {
    pub fn out_dir(&self) -> &Path {
        &self.cfg.out_dir
    }

    fn text(&mut self, name: &str, text: &str) -> Result<()> {
        write_text(&self.cfg.out_dir.join(name), text)?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    fn array(&mut self, base: &str, data: &[f64], shape: &[usize]) -> Result<()> {
        let files = write_array(&self.cfg.out_dir, base, data, shape)?;
        self.outputs.extend(files);
        Ok(())
    }

    fn wav_set(&mut self, prefix: &str, stems: &SourceArray) -> Result<()> {
        let dir = self.cfg.out_dir.join("wav");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let rate = self.cfg.dataset.sample_rate;
        for n in 0..stems.n_sources() {
            let name = format!("wav/{prefix}_{}.wav", source_name(n));
            export_wav(stems.row(n), &self.cfg.out_dir.join(&name), rate)?;
            self.outputs.push(name);
        }
        let name = format!("wav/{prefix}_mix.wav");
        export_wav(&stems.mixture(), &self.cfg.out_dir.join(&name), rate)?;
        self.outputs.push(name);
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        self.outputs.push("manifest.json".into());
        let manifest = RunManifest {
            tool: "msdm-lab",
            version: VERSION,
            command: self.command.name(),
            seed: self.cfg.seed,
            config: "config.resolved.toml",
            outputs: &self.outputs,
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
        write_text(&self.cfg.out_dir.join("manifest.json"), &text)
    }
}

/// Loads, resolves and dumps the config, then dispatches.
pub fn run(cli: &Cli) -> Result<()> {
    let cfg = match &cli.common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    }
    .resolve(&cli.common)?;
    let workers = match cli.common.workers {
        Some(0) => return Err(Error::config("workers", "must be at least 1")),
        Some(w) => w,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let mut run = Run {
        cfg,
        command: cli.command,
        wav: cli.common.wav,
        outputs: Vec::new(),
    };
    let dump = run.cfg.to_toml();
    run.text("config.resolved.toml", &dump)?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::config("workers", e.to_string()))?;
    pool.install(|| {
        match run.command {
            Command::Train => cmd_train(&mut run)?,
            Command::Generate => cmd_generate(&mut run)?,
            Command::Impute => cmd_impute(&mut run)?,
            Command::Separate => cmd_separate(&mut run)?,
            Command::Sweep => cmd_sweep(&mut run)?,
            Command::Eval => cmd_eval(&mut run)?,
        }
        run.finish()
    })
}

fn stack(arrays: &[SourceArray]) -> Vec<f64> {
    arrays.iter().flat_map(|a| a.as_slice().iter().copied()).collect()
}

pub fn cmd_train(run: &mut Run) -> Result<()> {
    let dataset = build_dataset(&run.cfg)?;
    let (n, d) = (run.cfg.dataset.n_sources, run.cfg.dataset.dim);
    let tcfg = run.cfg.train_config();
    let (hidden, f_features) = (run.cfg.model.hidden.clone(), run.cfg.model.f_features);
    let arch = |n_sources| MlpConfig {
        n_sources,
        dim: d,
        hidden: hidden.clone(),
        f_features,
    };
    let data: Vec<SourceArray> = dataset.splits.train.iter().map(|t| t.stems.clone()).collect();
    let report = |label: String| {
        let mut window = 0.0;
        let every = (tcfg.steps / 10).max(1);
        move |step: usize, loss: f64| {
            window += loss;
            if step % every == 0 {
                println!("{label} step {step}: loss {:.5}", window / every as f64);
                window = 0.0;
            }
        }
    };
    let model = MlpDenoiser::new(arch(n), run.cfg.seed)?;
    let (model, trace) = train_with_progress(model, &data, &tcfg, report("joint".into()))?;
    model.save(&run.cfg.out_dir.join("model.ckpt"))?;
    run.outputs.push("model.ckpt".into());
    let mut loss_csv = String::from("step,loss\n");
    for (i, l) in trace.iter().enumerate() {
        let _ = writeln!(loss_csv, "{},{l:e}", i + 1);
    }
    run.text("loss.csv", &loss_csv)?;

    if run.cfg.train.per_source {
        for s in 0..n {
            let rows: Vec<SourceArray> = data
                .iter()
                .map(|x| SourceArray::from_vec(1, d, x.row(s).to_vec()))
                .collect::<Result<_>>()?;
            let model = MlpDenoiser::new(arch(1), run.cfg.seed.wrapping_add(1 + s as u64))?;
            let (model, _) = train_with_progress(model, &rows, &tcfg, report(source_name(s)))?;
            let name = format!("model_{}.ckpt", source_name(s));
            model.save(&run.cfg.out_dir.join(&name))?;
            run.outputs.push(name);
        }
    }
    println!("wrote checkpoints to {}", run.out_dir().display());
    Ok(())
}

pub fn cmd_generate(run: &mut Run) -> Result<()> {
    let dataset = build_dataset(&run.cfg)?;
    let models = Models::load(&run.cfg, &dataset)?;
    let (n, d) = (run.cfg.dataset.n_sources, run.cfg.dataset.dim);
    let count = run.cfg.generate.count;
    let sched = run.cfg.schedule();
    let scfg = run.cfg.sampler_config();
    let model = models.joint()?;
    let samples: Vec<SourceArray> = (0..count)
        .collect::<Vec<_>>()
        .par_chunks(CHUNK_BATCH)
        .map(|g| run_chains(Prior::Joint(model), Task::Generate, &sched, &scfg, g.len(), g[0] as u64, None))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    run.array("generated", &stack(&samples), &[count, n, d])?;
    if run.wav {
        for (k, s) in samples.iter().enumerate() {
            run.wav_set(&format!("generated{k:03}"), s)?;
        }
    }
    println!("generated {count} samples");
    Ok(())
}

pub fn cmd_impute(run: &mut Run) -> Result<()> {
    let dataset = build_dataset(&run.cfg)?;
    let models = Models::load(&run.cfg, &dataset)?;
    let (n, d) = (run.cfg.dataset.n_sources, run.cfg.dataset.dim);
    let track = &dataset.splits.test[run.cfg.impute.track];
    let fixed = &run.cfg.impute.fixed_sources;
    let rows: Vec<Vec<f64>> = fixed.iter().map(|&s| track.stems.row(s).to_vec()).collect();
    let spec = ImputationSpec::new(n, fixed.clone(), SourceArray::from_rows(&rows)?)?;
    let count = run.cfg.impute.count;
    let out = impute_many(models.joint()?, &spec, &run.cfg.schedule(), &run.cfg.sampler_config(), count)?;
    run.array("imputed", &stack(&out), &[count, n, d])?;
    run.array("reference", track.stems.as_slice(), &[n, d])?;
    if run.wav {
        for (k, s) in out.iter().enumerate() {
            run.wav_set(&format!("imputed{k:03}"), s)?;
        }
    }
    println!("imputed {count} completions of {}", track.track_id);
    Ok(())
}

fn configured_estimates(run: &Run, dataset: &Dataset, chunks: &[Chunk]) -> Result<Vec<SourceArray>> {
    if run.cfg.eval.separator == SeparatorKind::Identity {
        return Ok(chunks.iter().map(|c| c.stems.clone()).collect());
    }
    let models = Models::load(&run.cfg, dataset)?;
    let per_source;
    let prior = if run.cfg.separation.weak {
        per_source = models.per_source()?;
        Prior::Factorized(&per_source)
    } else {
        Prior::Joint(models.joint()?)
    };
    separate_chunks(prior, chunks, &run.cfg.schedule(), &run.cfg.separation_config())
}

pub fn cmd_separate(run: &mut Run) -> Result<()> {
    let dataset = build_dataset(&run.cfg)?;
    let chunks = test_chunks(&run.cfg, &dataset.splits.test)?;
    let estimates = configured_estimates(run, &dataset, &chunks)?;
    let (n, len) = (run.cfg.dataset.n_sources, run.cfg.eval.chunk_len);
    let mixtures: Vec<f64> = chunks.iter().flat_map(|c| c.mixture.iter().copied()).collect();
    run.array("separated", &stack(&estimates), &[chunks.len(), n, len])?;
    run.array("mixtures", &mixtures, &[chunks.len(), len])?;
    let residuals: Vec<f64> = chunks.iter().zip(&estimates).map(|(c, e)| mixture_residual(e, &c.mixture)).collect();
    run.text("residuals.json", &(serde_json::to_string_pretty(&residuals).expect("floats serialize") + "\n"))?;
    if run.wav {
        for (k, e) in estimates.iter().enumerate().take(8) {
            run.wav_set(&format!("chunk{k:03}"), e)?;
        }
    }
    let worst = residuals.iter().fold(0.0f64, |m, &r| m.max(r));
    println!("separated {} chunks; max mixture residual {worst:.3e}", chunks.len());
    Ok(())
}

pub fn cmd_eval(run: &mut Run) -> Result<()> {
    let dataset = build_dataset(&run.cfg)?;
    let chunks = test_chunks(&run.cfg, &dataset.splits.test)?;
    let estimates = configured_estimates(run, &dataset, &chunks)?;
    let (evals, summary) = score_estimates(&dataset.splits.test, &chunks, &estimates)?;
    let n = run.cfg.dataset.n_sources;

    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let mut header = vec!["track_id".to_string(), "chunk_start".into()];
    header.extend((0..n).map(source_name));
    header.push("mixture_residual".into());
    w.write_record(&header).map_err(csv_err)?;
    for e in &evals {
        let mut row = vec![e.track_id.clone(), e.chunk_start.to_string()];
        row.extend(e.si_sdr_i.iter().map(|v| v.map_or_else(String::new, fmt_db)));
        row.push(format!("{:e}", e.mixture_residual));
        w.write_record(&row).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::config("csv", e.to_string()))?;
    run.text("eval_chunks.csv", &String::from_utf8(bytes).expect("utf-8"))?;
    run.text("summary.json", &(serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n"))?;

    for (k, v) in summary.per_source.iter().enumerate() {
        println!("{:>8}: {v:7.2} dB", source_name(k));
    }
    println!("{:>8}: {:7.2} dB over {} chunks", "all", summary.all, summary.n_chunks);
    Ok(())
}

pub fn cmd_sweep(run: &mut Run) -> Result<()> {
    let dataset = build_dataset(&run.cfg)?;
    let models = Models::load(&run.cfg, &dataset)?;
    let cells = run_sweep(&run.cfg, &dataset, &models)?;
    let csv = sweep_csv(&cells, run.cfg.dataset.n_sources)?;
    run.text("results.csv", &csv)?;
    let failed = cells.iter().filter(|c| c.status != CellStatus::Ok).count();
    if failed > 0 {
        eprintln!("{failed} of {} cells did not produce finite scores; see results.json", cells.len());
    }
    run.text("results.json", &(serde_json::to_string_pretty(&cells).expect("cells serialize") + "\n"))?;
    print!("{csv}");
    Ok(())
}

/// Parses `std::env::args`, runs, and returns the process exit code.
pub fn main_entry() -> i32 {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
