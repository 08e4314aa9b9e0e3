//! Fixes three stems of a track and samples the fourth, then checks the
//! sample mean against exact Gaussian conditioning.
//!
//! cargo run --release --example imputation -- [count]

use msdm_lab::numkit::Rng;
use msdm_lab::oracles::gaussian_conditional;
use msdm_lab::samplers::{impute_many, ImputationSpec, SamplerConfig};
use msdm_lab::schedule::Schedule;
use msdm_lab::toyslakh::{correlated_prior, ColoringSpec};
use msdm_lab::SourceArray;

fn main() -> msdm_lab::Result<()> {
    let count: usize = std::env::args().nth(1).map_or(1000, |s| s.parse().expect("count"));
    let (n, d) = (4, 8);
    let prior = correlated_prior(n, d, 0.9, &ColoringSpec::default_for(n))?;
    let track = prior.sample(&mut Rng::new(3, 0));
    let fixed = vec![1, 2, 3];
    let rows: Vec<Vec<f64>> = fixed.iter().map(|&s| track.row(s).to_vec()).collect();
    let spec = ImputationSpec::new(n, fixed, SourceArray::from_rows(&rows)?)?;

    let cfg = SamplerConfig {
        s_churn: 80.0,
        corrector_steps: 8,
        ..SamplerConfig::default()
    };
    let out = impute_many(&prior, &spec, &Schedule::paper_default(), &cfg, count)?;
    let (mean, cov) = gaussian_conditional(&prior, &spec)?;

    println!(" t   sampled   oracle   true bass");
    for t in 0..d {
        let m = out.iter().map(|x| x.row(0)[t]).sum::<f64>() / count as f64;
        let se = (cov.row(t)[t] / count as f64).sqrt();
        println!("{t:>2}  {m:8.3}  {:7.3}   {:8.3}   (se {se:.3})", mean[t], track.row(0)[t]);
    }
    Ok(())
}
