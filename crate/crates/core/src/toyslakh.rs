//! Synthetic four-stem tracks ("bass, drums, guitar, piano" by position) for
//! desk-scale experiments, plus a minimal 16-bit PCM WAV writer/reader.
//!
//! Two generators:
//! * correlated Gaussian: stems drawn from an explicit joint Gaussian whose
//!   per-stem blocks are band-limited stationary processes and whose
//!   cross-stem blocks come from a shared low-rank oscillator term;
//! * harmonic: each track picks a fundamental and each stem a harmonic of it,
//!   with random amplitude, phase and exponential decay.

use std::f64::consts::TAU;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{Mat, Rng};
use crate::scores::GaussianPrior;
use crate::sources::SourceArray;

pub const DEFAULT_SAMPLE_RATE: u32 = 22_050;
pub const DEFAULT_N_SOURCES: usize = 4;
pub const DEFAULT_DIM: usize = 64;
pub const SOURCE_NAMES: [&str; 4] = ["bass", "drums", "guitar", "piano"];

/// Display name of stem `n`.
pub fn source_name(n: usize) -> String {
    SOURCE_NAMES
        .get(n)
        .map_or_else(|| format!("source{n}"), |s| s.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    CorrelatedGaussian,
    Harmonic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyTrack {
    pub track_id: String,
    pub stems: SourceArray,
    pub sample_rate: u32,
    pub kind: GeneratorKind,
}

impl ToyTrack {
    pub fn mixture(&self) -> Vec<f64> {
        self.stems.mixture()
    }
}

/// Train/valid/test track counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes {
            train: 1500,
            valid: 375,
            test: 225,
        }
    }
}

impl SplitSizes {
    pub fn total(&self) -> usize {
        self.train + self.valid + self.test
    }
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Vec<ToyTrack>,
    pub valid: Vec<ToyTrack>,
    pub test: Vec<ToyTrack>,
}

impl Splits {
    /// Consecutive slices of `tracks` in train, valid, test order.
    pub fn from_tracks(mut tracks: Vec<ToyTrack>, sizes: SplitSizes) -> Result<Self> {
        if tracks.len() != sizes.total() {
            return Err(Error::shape(sizes.total(), tracks.len()));
        }
        let test = tracks.split_off(sizes.train + sizes.valid);
        let valid = tracks.split_off(sizes.train);
        Ok(Splits {
            train: tracks,
            valid,
            test,
        })
    }
}

/// Per-stem stationary kernels
/// `K_n(tau) = scale_n^2 exp(-tau^2 / (2 l_n^2)) cos(2 pi f_n tau)` plus a
/// diagonal nugget, and a shared rank-2 oscillator at each stem's frequency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColoringSpec {
    /// Centre frequencies in cycles per sample.
    pub freqs: Vec<f64>,
    pub lengths: Vec<f64>,
    pub scales: Vec<f64>,
    pub nugget: f64,
    /// Amplitude of the shared oscillator relative to `scale_n`.
    pub shared_gain: f64,
}

impl ColoringSpec {
    /// The four-stem defaults cycled to `n_sources` stems.
    pub fn default_for(n_sources: usize) -> Self {
        let f = [0.03, 0.12, 0.22, 0.35];
        let l = [6.0, 4.0, 5.0, 3.0];
        let s = [1.0, 0.8, 0.7, 0.6];
        ColoringSpec {
            freqs: (0..n_sources).map(|n| f[n % 4]).collect(),
            lengths: (0..n_sources).map(|n| l[n % 4]).collect(),
            scales: (0..n_sources).map(|n| s[n % 4]).collect(),
            nugget: 1e-3,
            shared_gain: 0.5,
        }
    }

    fn validate(&self, n_sources: usize) -> Result<()> {
        for (name, v) in [("freqs", &self.freqs), ("lengths", &self.lengths), ("scales", &self.scales)] {
            if v.len() != n_sources {
                return Err(Error::config(
                    format!("coloring.{name}"),
                    format!("expected {n_sources} entries, got {}", v.len()),
                ));
            }
        }
        if self.lengths.iter().chain(&self.scales).any(|&v| !(v > 0.0)) {
            return Err(Error::config("coloring", "lengths and scales must be positive"));
        }
        if !(self.nugget >= 0.0) {
            return Err(Error::config("coloring.nugget", "must be non-negative"));
        }
        Ok(())
    }
}

/// Joint covariance `blockdiag(K_1..K_N) + coupling * L L^T` (zero mean).
pub fn correlated_prior(n_sources: usize, dim: usize, coupling: f64, coloring: &ColoringSpec) -> Result<GaussianPrior> {
    if !(0.0..1.0).contains(&coupling) {
        return Err(Error::BadRange(format!("coupling must lie in [0, 1), got {coupling}")));
    }
    coloring.validate(n_sources)?;
    let len = n_sources * dim;
    let mut cov = Mat::zeros(len, len);
    for n in 0..n_sources {
        let (f, l, s) = (coloring.freqs[n], coloring.lengths[n], coloring.scales[n]);
        for i in 0..dim {
            for j in 0..dim {
                let tau = i as f64 - j as f64;
                let k = s * s * (-tau * tau / (2.0 * l * l)).exp() * (TAU * f * tau).cos();
                cov.row_mut(n * dim + i)[n * dim + j] = k;
            }
        }
    }
    // Shared rank-2 oscillator: L_n[i] = g s_n [cos(2 pi f_n i), sin(2 pi f_n i)].
    let mut l = Mat::zeros(len, 2);
    for n in 0..n_sources {
        let amp = coloring.shared_gain * coloring.scales[n];
        for i in 0..dim {
            let ph = TAU * coloring.freqs[n] * i as f64;
            let row = l.row_mut(n * dim + i);
            row[0] = amp * ph.cos();
            row[1] = amp * ph.sin();
        }
    }
    let shared = l.matmul(&l.transpose())?.scale(coupling);
    let cov = cov.add(&shared)?.add_diag(coloring.nugget);
    GaussianPrior::new(n_sources, dim, vec![0.0; len], cov)
}

/// Tracks drawn from [`correlated_prior`]; track `k` uses stream `k` of `seed`.
pub fn make_correlated_gaussian_tracks(
    n_tracks: usize,
    n_sources: usize,
    dim: usize,
    coupling: f64,
    coloring: &ColoringSpec,
    seed: u64,
) -> Result<(Vec<ToyTrack>, GaussianPrior)> {
    let prior = correlated_prior(n_sources, dim, coupling, coloring)?;
    let tracks = (0..n_tracks)
        .map(|k| ToyTrack {
            track_id: format!("cg-{k:05}"),
            stems: prior.sample(&mut Rng::new(seed, k as u64)),
            sample_rate: DEFAULT_SAMPLE_RATE,
            kind: GeneratorKind::CorrelatedGaussian,
        })
        .collect();
    Ok((tracks, prior))
}

/// Latent ranges for [`make_harmonic_tracks`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarmonicSpec {
    /// The fundamental sits at `k0 * sample_rate / D` for `k0` drawn from here.
    pub fundamental_bins: Vec<usize>,
    pub amplitude: (f64, f64),
    /// Envelope `exp(-decay * t / D)` with `decay ~ U(0, max_decay)`.
    pub max_decay: f64,
}

impl Default for HarmonicSpec {
    fn default() -> Self {
        HarmonicSpec {
            fundamental_bins: vec![4, 5, 6],
            amplitude: (0.3, 1.0),
            max_decay: 1.5,
        }
    }
}

/// Harmonic number of stem `n`; the last stem picks one of two adjacent
/// harmonics at random.
fn harmonic_choices(n: usize, n_sources: usize) -> (usize, usize) {
    if n + 1 == n_sources {
        (n + 1, n + 2)
    } else {
        (n + 1, n + 1)
    }
}

/// Track `k` uses stream `k` of `seed`.
pub fn make_harmonic_tracks(
    n_tracks: usize,
    n_sources: usize,
    dim: usize,
    sample_rate: u32,
    spec: &HarmonicSpec,
    seed: u64,
) -> Result<Vec<ToyTrack>> {
    let min_k0 = spec.fundamental_bins.iter().copied().min().ok_or_else(|| {
        Error::config("harmonic.fundamental_bins", "must not be empty")
    })?;
    let max_k0 = spec.fundamental_bins.iter().copied().max().unwrap_or(0);
    // f0 * D / sample_rate = k0 periods per track.
    if min_k0 < 4 {
        return Err(Error::config(
            "harmonic.fundamental_bins",
            "each track must span at least 4 fundamental periods",
        ));
    }
    if n_sources == 0 || max_k0 * (n_sources + 1) >= dim / 2 {
        return Err(Error::config(
            "dim",
            format!("D = {dim} cannot hold harmonic {} of bin {max_k0} below Nyquist", n_sources + 1),
        ));
    }
    if sample_rate == 0 {
        return Err(Error::config("sample_rate", "must be positive"));
    }
    let (a_lo, a_hi) = spec.amplitude;
    let tracks = (0..n_tracks)
        .map(|k| {
            let mut rng = Rng::new(seed, k as u64);
            let k0 = spec.fundamental_bins[rng.below(spec.fundamental_bins.len())];
            let mut stems = SourceArray::zeros(n_sources, dim);
            for n in 0..n_sources {
                let (h_lo, h_hi) = harmonic_choices(n, n_sources);
                let h = if h_lo == h_hi { h_lo } else { h_lo + rng.below(h_hi - h_lo + 1) };
                let amp = rng.uniform_range(a_lo, a_hi);
                let phase = rng.uniform_range(0.0, TAU);
                let decay = rng.uniform_range(0.0, spec.max_decay);
                let bin = (k0 * h) as f64;
                for (t, v) in stems.row_mut(n).iter_mut().enumerate() {
                    let tt = t as f64 / dim as f64;
                    *v = amp * (-decay * tt).exp() * (TAU * bin * tt + phase).cos();
                }
            }
            ToyTrack {
                track_id: format!("hm-{k:05}"),
                stems,
                sample_rate,
                kind: GeneratorKind::Harmonic,
            }
        })
        .collect();
    Ok(tracks)
}

/// Writes mono 16-bit PCM. Signals whose peak exceeds 1 are rescaled to a
/// 0.9 peak first; others are written as-is.
pub fn export_wav(signal: &[f64], path: &Path, sample_rate: u32) -> Result<()> {
    if signal.iter().any(|v| !v.is_finite()) {
        return Err(Error::BadConfig("cannot export a non-finite signal".into()));
    }
    let peak = signal.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let gain = if peak > 1.0 { 0.9 / peak } else { 1.0 };
    let data_len = u32::try_from(signal.len() * 2)
        .map_err(|_| Error::BadConfig("signal too long for a WAV file".into()))?;

    let mut bytes = Vec::with_capacity(44 + data_len as usize);
    bytes.extend_from_slice(b"RIFF");
    bytes.extend_from_slice(&(36 + data_len).to_le_bytes());
    bytes.extend_from_slice(b"WAVE");
    bytes.extend_from_slice(b"fmt ");
    bytes.extend_from_slice(&16u32.to_le_bytes());
    bytes.extend_from_slice(&1u16.to_le_bytes()); // PCM
    bytes.extend_from_slice(&1u16.to_le_bytes()); // mono
    bytes.extend_from_slice(&sample_rate.to_le_bytes());
    bytes.extend_from_slice(&(sample_rate * 2).to_le_bytes());
    bytes.extend_from_slice(&2u16.to_le_bytes());
    bytes.extend_from_slice(&16u16.to_le_bytes());
    bytes.extend_from_slice(b"data");
    bytes.extend_from_slice(&data_len.to_le_bytes());
    for v in signal {
        let q = (v * gain).clamp(-1.0, 1.0) * 32767.0;
        bytes.extend_from_slice(&(q.round() as i16).to_le_bytes());
    }
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    w.write_all(&bytes).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

/// Reads a mono 16-bit PCM file written by [`export_wav`] (or any file with
/// that layout); returns samples in `[-1, 1]` and the sample rate.
pub fn read_wav(path: &Path) -> Result<(Vec<f64>, u32)> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::io(path, std::io::Error::new(std::io::ErrorKind::InvalidData, msg.to_string()));
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(bad("not a RIFF/WAVE file"));
    }
    let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
    let u32_at = |i: usize| u32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]);
    let mut pos = 12;
    let mut rate = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(pos + 4) as usize;
        let body = pos + 8;
        if body + size > bytes.len() {
            return Err(bad("truncated chunk"));
        }
        if id == b"fmt " {
            if size < 16 || u16_at(body) != 1 || u16_at(body + 2) != 1 || u16_at(body + 14) != 16 {
                return Err(bad("only mono 16-bit PCM is supported"));
            }
            rate = Some(u32_at(body + 4));
        } else if id == b"data" {
            let rate = rate.ok_or_else(|| bad("data chunk before fmt chunk"))?;
            let samples = bytes[body..body + size]
                .chunks_exact(2)
                .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32767.0)
                .collect();
            return Ok((samples, rate));
        }
        pos = body + size + (size & 1);
    }
    Err(bad("no data chunk"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub track_id: String,
    pub split: String,
    pub files: Vec<String>,
}

/// JSON index of an exported dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub generator_kind: GeneratorKind,
    pub seed: u64,
    pub n_sources: usize,
    pub dim: usize,
    pub sample_rate: u32,
    pub tracks: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::config(path.display().to_string(), e.to_string()))
    }
}

/// Writes one WAV per stem plus the mixture for every track, and a manifest.
pub fn export_dataset(splits: &[(&str, &[ToyTrack])], dir: &Path, seed: u64) -> Result<DatasetManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let first = splits
        .iter()
        .flat_map(|(_, t)| t.iter())
        .next()
        .ok_or(Error::EmptyAfterFilter)?;
    let mut entries = Vec::new();
    for (split, tracks) in splits {
        for track in tracks.iter() {
            let mut files = Vec::new();
            let mut write = |name: String, signal: &[f64]| -> Result<()> {
                let file: PathBuf = format!("{}_{name}.wav", track.track_id).into();
                export_wav(signal, &dir.join(&file), track.sample_rate)?;
                files.push(file.display().to_string());
                Ok(())
            };
            for n in 0..track.stems.n_sources() {
                write(source_name(n), track.stems.row(n))?;
            }
            write("mix".into(), &track.mixture())?;
            entries.push(ManifestEntry {
                track_id: track.track_id.clone(),
                split: split.to_string(),
                files,
            });
        }
    }
    let manifest = DatasetManifest {
        generator_kind: first.kind,
        seed,
        n_sources: first.stems.n_sources(),
        dim: first.stems.dim(),
        sample_rate: first.sample_rate,
        tracks: entries,
    };
    manifest.write(&dir.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silence_golden_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.wav");
        export_wav(&vec![0.0; 22050], &path, 22050).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 44 + 44100);
        let mut golden = Vec::new();
        golden.extend_from_slice(b"RIFF");
        golden.extend_from_slice(&[0x68, 0xAC, 0x00, 0x00]); // 36 + 44100
        golden.extend_from_slice(b"WAVEfmt ");
        golden.extend_from_slice(&[16, 0, 0, 0, 1, 0, 1, 0]);
        golden.extend_from_slice(&[0x22, 0x56, 0x00, 0x00]); // 22050
        golden.extend_from_slice(&[0x44, 0xAC, 0x00, 0x00]); // 44100 bytes/s
        golden.extend_from_slice(&[2, 0, 16, 0]);
        golden.extend_from_slice(b"data");
        golden.extend_from_slice(&[0x44, 0xAC, 0x00, 0x00]);
        golden.resize(44 + 44100, 0);
        assert_eq!(bytes, golden);
    }

    #[test]
    fn sine_round_trip_within_one_step() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sine.wav");
        let sig: Vec<f64> = (0..1000).map(|i| (TAU * 440.0 * i as f64 / 22050.0).sin()).collect();
        export_wav(&sig, &path, 22050).unwrap();
        let (back, rate) = read_wav(&path).unwrap();
        assert_eq!(rate, 22050);
        for (a, b) in sig.iter().zip(&back) {
            assert!((a - b).abs() <= 1.0 / 32767.0);
        }
    }

    #[test]
    fn loud_signal_is_normalized() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loud.wav");
        export_wav(&[0.0, 2.0, -4.0], &path, 8000).unwrap();
        let (back, _) = read_wav(&path).unwrap();
        assert!((back[2] + 0.9).abs() < 1e-4);
        assert!((back[1] - 0.45).abs() < 1e-4);
    }

    #[test]
    fn harmonic_tracks_are_deterministic_and_additive() {
        let spec = HarmonicSpec::default();
        let a = make_harmonic_tracks(2, 4, 64, 22050, &spec, 3).unwrap();
        let b = make_harmonic_tracks(2, 4, 64, 22050, &spec, 3).unwrap();
        assert_eq!(a, b);
        let mix = a[0].mixture();
        for (t, m) in mix.iter().enumerate() {
            let direct = ((a[0].stems.row(0)[t] + a[0].stems.row(1)[t]) + a[0].stems.row(2)[t]) + a[0].stems.row(3)[t];
            assert_eq!(*m, direct);
        }
        assert!(make_harmonic_tracks(1, 4, 32, 22050, &spec, 0).is_err());
    }

    #[test]
    fn correlated_prior_rejects_full_coupling() {
        let c = ColoringSpec::default_for(4);
        assert!(matches!(correlated_prior(4, 8, 1.0, &c), Err(Error::BadRange(_))));
        assert!(correlated_prior(4, 8, 0.9, &c).is_ok());
    }
}
