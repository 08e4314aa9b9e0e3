//! Separates one mixture with the Dirac-likelihood sampler and compares the
//! average of many separations with the exact posterior mean.
//!
//! cargo run --release --example dirac_separation -- [runs]

use msdm_lab::numkit::Rng;
use msdm_lab::oracles::gaussian_posterior_given_mixture;
use msdm_lab::samplers::{mixture_residual, separate_batch, Prior, SamplerConfig, SeparationConfig};
use msdm_lab::schedule::Schedule;
use msdm_lab::toyslakh::{correlated_prior, source_name, ColoringSpec};

fn main() -> msdm_lab::Result<()> {
    let runs: usize = std::env::args().nth(1).map_or(200, |s| s.parse().expect("runs"));
    let (n, d) = (4, 16);
    let prior = correlated_prior(n, d, 0.9, &ColoringSpec::default_for(n))?;
    let truth = prior.sample(&mut Rng::new(1, 0));
    let y = truth.mixture();

    let sep = SeparationConfig::dirac(SamplerConfig::default(), 0);
    let out = separate_batch(Prior::Joint(&prior), &vec![y.clone(); runs], &Schedule::paper_default(), &sep, 0)?;
    let worst = out.iter().map(|x| mixture_residual(x, &y)).fold(0.0, f64::max);
    println!("max |sum(x) - y| over {runs} separations: {worst:.2e}");

    let post = gaussian_posterior_given_mixture(&prior, &y)?.mean_array();
    for s in 0..n {
        let gap = (0..d)
            .map(|t| (out.iter().map(|x| x.row(s)[t]).sum::<f64>() / runs as f64 - post.row(s)[t]).abs())
            .fold(0.0, f64::max);
        println!("{:>8}: max |sample mean - posterior mean| = {gap:.3}", source_name(s));
    }
    Ok(())
}
