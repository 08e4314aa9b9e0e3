//! Trains the MLP denoiser on correlated Gaussian tracks, where the optimal
//! denoiser is known, and reports how close the loss gets to its floor.
//!
//! cargo run --release --example train_denoiser -- [steps] [checkpoint]

use msdm_lab::denoiser::{dsm_loss_value, train_with_progress, MlpConfig, MlpDenoiser, ScoreDenoiser, TrainConfig};
use msdm_lab::numkit::Rng;
use msdm_lab::toyslakh::{make_correlated_gaussian_tracks, ColoringSpec};

fn main() -> msdm_lab::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().map_or(3000, |s| s.parse().expect("steps"));
    let checkpoint = args.next();

    let (n, d) = (4, 16);
    let (tracks, prior) = make_correlated_gaussian_tracks(600, n, d, 0.9, &ColoringSpec::default_for(n), 2)?;
    let (train, held_out) = tracks.split_at(500);
    let train: Vec<_> = train.iter().map(|t| t.stems.clone()).collect();
    let held_out: Vec<_> = held_out.iter().map(|t| t.stems.clone()).collect();

    let cfg = TrainConfig {
        steps,
        lr: 3e-4,
        ..TrainConfig::default()
    };
    let model = MlpDenoiser::new(MlpConfig::new(n, d), 0)?;
    let every = (steps / 10).max(1);
    let mut window = 0.0;
    let (model, _) = train_with_progress(model, &train, &cfg, |step, loss| {
        window += loss;
        if step % every == 0 {
            println!("step {step:>6}  loss {:.5}", window / every as f64);
            window = 0.0;
        }
    })?;

    let fresh = MlpDenoiser::new(MlpConfig::new(n, d), 0)?;
    let held = |m: &dyn msdm_lab::denoiser::Denoiser| dsm_loss_value(m, &held_out, 2000, cfg.sigma_range, &mut Rng::new(9, 0));
    println!("held-out loss: untrained {:.5}, trained {:.5}, optimal {:.5}", held(&fresh), held(&model), held(&ScoreDenoiser(&prior)));

    if let Some(path) = checkpoint {
        model.save(path.as_ref())?;
        println!("saved {path}");
    }
    Ok(())
}
