//! Writes a small harmonic dataset as WAV stems plus a JSON manifest and
//! reads one file back.
//!
//! cargo run --release --example export_wav -- [out_dir]

use std::path::PathBuf;

use msdm_lab::toyslakh::{export_dataset, make_harmonic_tracks, read_wav, HarmonicSpec, SplitSizes, Splits};

fn main() -> msdm_lab::Result<()> {
    let dir: PathBuf = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("msdm-toy-wav"), PathBuf::from);
    let sizes = SplitSizes {
        train: 8,
        valid: 2,
        test: 2,
    };
    let tracks = make_harmonic_tracks(sizes.total(), 4, 2048, 22_050, &HarmonicSpec::default(), 0)?;
    let splits = Splits::from_tracks(tracks, sizes)?;
    let manifest = export_dataset(
        &[("train", &splits.train), ("valid", &splits.valid), ("test", &splits.test)],
        &dir,
        0,
    )?;
    println!("wrote {} tracks to {}", manifest.tracks.len(), dir.display());

    let mix = manifest.tracks[0].files.last().expect("mixture file");
    let (samples, rate) = read_wav(&dir.join(mix))?;
    println!("{mix}: {} samples at {rate} Hz", samples.len());
    Ok(())
}
