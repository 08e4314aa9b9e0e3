//! Runs a small churn x likelihood grid through the same code path as
//! `msdm-lab sweep` and prints the CSV.
//!
//! cargo run --release --example hyperparameter_sweep

use msdm_lab::cli::{build_dataset, run_sweep, sweep_csv, ExperimentConfig, ModelVariant, Models};
use msdm_lab::samplers::Likelihood;

fn main() -> msdm_lab::Result<()> {
    let mut cfg = ExperimentConfig::default();
    cfg.dataset.test = 48;
    cfg.sweep.models = vec![ModelVariant::Joint, ModelVariant::Weak];
    cfg.sweep.likelihoods = vec![Likelihood::Dirac, Likelihood::Gaussian];
    cfg.sweep.s_churn = vec![0.0, 20.0];
    cfg.sweep.constrained_sources = vec![0];
    cfg.sweep.gamma_coeffs = vec![0.75, 1.5];
    let cfg = cfg.resolve(&Default::default())?;

    let dataset = build_dataset(&cfg)?;
    let models = Models::load(&cfg, &dataset)?;
    let cells = run_sweep(&cfg, &dataset, &models)?;
    print!("{}", sweep_csv(&cells, cfg.dataset.n_sources)?);
    Ok(())
}
