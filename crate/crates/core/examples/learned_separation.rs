//! Trains the MLP denoiser on harmonic toy tracks, then separates the test
//! split with the Dirac sampler driven by the learned joint score.
//!
//! cargo run --release --example learned_separation -- [train_steps] [test_tracks]

use std::time::Instant;

use msdm_lab::denoiser::{train_with_progress, MlpConfig, MlpDenoiser, TrainConfig};
use msdm_lab::metrics::{eval_chunks, ChunkFilter};
use msdm_lab::samplers::{separate_batch, Prior, SamplerConfig, SeparationConfig};
use msdm_lab::schedule::Schedule;
use msdm_lab::toyslakh::{make_harmonic_tracks, source_name, HarmonicSpec, SplitSizes, Splits};

fn main() -> msdm_lab::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().map_or(20_000, |s| s.parse().expect("train steps"));
    let n_test: usize = args.next().map_or(225, |s| s.parse().expect("test tracks"));

    let (n, d) = (4, 64);
    let sizes = SplitSizes {
        test: n_test,
        ..SplitSizes::default()
    };
    let tracks = make_harmonic_tracks(sizes.total(), n, d, 22_050, &HarmonicSpec::default(), 7)?;
    let splits = Splits::from_tracks(tracks, sizes)?;
    let train_set: Vec<_> = splits.train.iter().map(|t| t.stems.clone()).collect();

    let cfg = TrainConfig {
        steps,
        ..TrainConfig::default()
    };
    let started = Instant::now();
    let model = MlpDenoiser::new(MlpConfig::new(n, d), 0)?;
    let mut window = 0.0;
    let (model, _) = train_with_progress(model, &train_set, &cfg, |step, loss| {
        window += loss;
        if step % 2000 == 0 {
            println!("step {step:>6}  loss {:.5}", window / 2000.0);
            window = 0.0;
        }
    })?;
    println!("trained {steps} steps in {:.1?}", started.elapsed());

    let sched = Schedule::paper_default();
    let sep = SeparationConfig::dirac(SamplerConfig::default(), 0);
    let started = Instant::now();
    let (_, summary) = eval_chunks(
        &splits.test,
        |chunk| Ok(separate_batch(Prior::Joint(&model), &[chunk.mixture.clone()], &sched, &sep, chunk.index as u64)?.remove(0)),
        d,
        d / 2,
        &ChunkFilter::default(),
    )?;
    println!("separated {} chunks in {:.1?}", summary.n_chunks, started.elapsed());
    for (k, v) in summary.per_source.iter().enumerate() {
        println!("{:>8}: {v:6.2} dB", source_name(k));
    }
    println!("{:>8}: {:6.2} dB", "all", summary.all);
    Ok(())
}
