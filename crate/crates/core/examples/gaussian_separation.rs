//! Compares the Dirac and Gaussian likelihoods, each with the joint score
//! and with independent per-stem scores, on correlated Gaussian tracks.
//!
//! cargo run --release --example gaussian_separation -- [tracks]

use msdm_lab::metrics::{eval_chunks, ChunkFilter};
use msdm_lab::samplers::{separate_batch, Prior, SamplerConfig, SeparationConfig};
use msdm_lab::schedule::Schedule;
use msdm_lab::scores::ScoreModel;
use msdm_lab::toyslakh::{make_correlated_gaussian_tracks, ColoringSpec};

fn main() -> msdm_lab::Result<()> {
    let tracks: usize = std::env::args().nth(1).map_or(64, |s| s.parse().expect("tracks"));
    let (n, d) = (4, 64);
    let (tracks, prior) = make_correlated_gaussian_tracks(tracks, n, d, 0.9, &ColoringSpec::default_for(n), 1)?;
    let marginals = prior.source_marginals()?;
    let weak: Vec<&dyn ScoreModel> = marginals.iter().map(|m| m as &dyn ScoreModel).collect();
    let sched = Schedule::paper_default();

    let base = SamplerConfig::default();
    for (label, sep) in [
        ("dirac", SeparationConfig::dirac(base, 0)),
        ("gaussian 0.75", SeparationConfig::gaussian(base, 0.75)),
        ("gaussian 1.5", SeparationConfig::gaussian(base, 1.5)),
    ] {
        for (model, prior) in [("joint", Prior::Joint(&prior)), ("weak", Prior::Factorized(&weak))] {
            let (_, summary) = eval_chunks(
                &tracks,
                |c| Ok(separate_batch(prior, &[c.mixture.clone()], &sched, &sep, c.index as u64)?.remove(0)),
                d,
                d,
                &ChunkFilter::default(),
            )?;
            println!("{label:>14} {model:>5}: {:6.2} dB", summary.all);
        }
    }
    Ok(())
}
