//! Samples whole four-stem tracks from the exact score of a correlated
//! Gaussian prior and compares per-stem and mixture energy with the prior,
//! for the default schedule and for one starting at a much larger sigma.
//!
//! cargo run --release --example total_generation -- [count]

use msdm_lab::samplers::{generate, SamplerConfig};
use msdm_lab::schedule::Schedule;
use msdm_lab::toyslakh::{correlated_prior, source_name, ColoringSpec};

fn main() -> msdm_lab::Result<()> {
    let count: usize = std::env::args().nth(1).map_or(500, |s| s.parse().expect("count"));
    let (n, d) = (4, 32);
    let prior = correlated_prior(n, d, 0.9, &ColoringSpec::default_for(n))?;
    let cov = prior.cov();
    let entry = |a: usize, b: usize| cov.row(a)[b];

    // Chains start from N(0, sigma_max^2); with sigma_max = 1 that is far
    // from the noised prior, so energy comes out low.
    for sched in [Schedule::paper_default(), Schedule::new(150, 1e-4, 80.0, 7.0)?] {
        let samples = generate(&prior, &sched, &SamplerConfig::default(), count)?;
        println!("sigma_max = {}: {count} samples, energy per sample (sampled vs prior)", sched.sigma_max());
        for s in 0..n {
            let sampled = samples.iter().map(|x| x.row(s).iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / (count * d) as f64;
            let expected = (0..d).map(|t| entry(s * d + t, s * d + t)).sum::<f64>() / d as f64;
            println!("{:>8}: {sampled:.3} vs {expected:.3}", source_name(s));
        }
        let sampled = samples.iter().map(|x| x.mixture().iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / (count * d) as f64;
        let expected = (0..d)
            .map(|t| (0..n).flat_map(|a| (0..n).map(move |b| (a, b))).map(|(a, b)| entry(a * d + t, b * d + t)).sum::<f64>())
            .sum::<f64>()
            / d as f64;
        println!("{:>8}: {sampled:.3} vs {expected:.3}", "mixture");
    }
    Ok(())
}
