//! Scale-invariant SDR and chunked evaluation over a track collection.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::samplers::mixture_residual;
use crate::sources::SourceArray;
use crate::toyslakh::ToyTrack;

pub const SI_SDR_EPS: f64 = 1e-8;

fn check_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(Error::LengthMismatch(0, 0));
    }
    Ok(())
}

/// SI-SDR in dB with the stabilizing epsilon in both the projection and the ratio.
pub fn si_sdr(target: &[f64], estimate: &[f64]) -> Result<f64> {
    check_len(target, estimate)?;
    let dot: f64 = target.iter().zip(estimate).map(|(a, b)| a * b).sum();
    let energy: f64 = target.iter().map(|a| a * a).sum();
    let alpha = (dot + SI_SDR_EPS) / (energy + SI_SDR_EPS);
    let mut signal = 0.0;
    let mut noise = 0.0;
    for (t, e) in target.iter().zip(estimate) {
        let s = alpha * t;
        signal += s * s;
        noise += (s - e) * (s - e);
    }
    Ok(10.0 * ((signal + SI_SDR_EPS) / (noise + SI_SDR_EPS)).log10())
}

/// Improvement over using the mixture itself as the estimate.
pub fn si_sdr_i(target: &[f64], estimate: &[f64], mixture: &[f64]) -> Result<f64> {
    check_len(target, mixture)?;
    Ok(si_sdr(target, estimate)? - si_sdr(target, mixture)?)
}

/// Silence thresholds for chunk filtering.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChunkFilter {
    /// A stem is silent in a chunk when its peak is below this fraction of
    /// the track's global peak.
    pub silence_ratio: f64,
    /// Drop chunks where at least `N - 1` stems are silent.
    pub drop_single_source: bool,
}

impl Default for ChunkFilter {
    fn default() -> Self {
        ChunkFilter {
            silence_ratio: 1e-4,
            drop_single_source: true,
        }
    }
}

/// One evaluation window.
#[derive(Debug, Clone)]
pub struct Chunk {
    /// Position in the filtered chunk list; used as the noise stream.
    pub index: usize,
    pub track_idx: usize,
    pub start: usize,
    pub stems: SourceArray,
    pub mixture: Vec<f64>,
    pub silent: Vec<bool>,
}

fn peak(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Windows of `chunk_len` every `hop` samples that pass `filter`.
pub fn extract_chunks(tracks: &[ToyTrack], chunk_len: usize, hop: usize, filter: &ChunkFilter) -> Result<Vec<Chunk>> {
    if chunk_len == 0 || hop == 0 {
        return Err(Error::config("eval", "chunk_len and hop must be positive"));
    }
    let mut out = Vec::new();
    for (track_idx, track) in tracks.iter().enumerate() {
        let stems = &track.stems;
        if chunk_len > stems.dim() {
            return Err(Error::config(
                "eval.chunk_len",
                format!("{chunk_len} exceeds track length {}", stems.dim()),
            ));
        }
        let global = stems.rows().map(peak).fold(0.0, f64::max);
        let n = stems.n_sources();
        let mut start = 0;
        while start + chunk_len <= stems.dim() {
            let window = stems.window(start, chunk_len);
            let silent: Vec<bool> = window
                .rows()
                .map(|r| global == 0.0 || peak(r) < filter.silence_ratio * global)
                .collect();
            let n_silent = silent.iter().filter(|&&s| s).count();
            let keep = n_silent < n && !(filter.drop_single_source && n_silent + 1 >= n);
            if keep {
                out.push(Chunk {
                    index: out.len(),
                    track_idx,
                    start,
                    mixture: window.mixture(),
                    stems: window,
                    silent,
                });
            }
            start += hop;
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyAfterFilter);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkEval {
    pub track_id: String,
    pub chunk_start: usize,
    /// `None` where the target stem is silent.
    pub si_sdr_i: Vec<Option<f64>>,
    pub mixture_residual: f64,
}

/// Per-source means over non-silent targets and their average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub per_source: Vec<f64>,
    pub all: f64,
    pub n_chunks: usize,
}

pub fn score_chunk(track_id: &str, chunk: &Chunk, estimate: &SourceArray) -> Result<ChunkEval> {
    estimate.check_shape(chunk.stems.n_sources(), chunk.stems.dim())?;
    let scores = (0..chunk.stems.n_sources())
        .map(|n| {
            if chunk.silent[n] {
                Ok(None)
            } else {
                si_sdr_i(chunk.stems.row(n), estimate.row(n), &chunk.mixture).map(Some)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ChunkEval {
        track_id: track_id.to_string(),
        chunk_start: chunk.start,
        si_sdr_i: scores,
        mixture_residual: mixture_residual(estimate, &chunk.mixture),
    })
}

pub fn summarize(evals: &[ChunkEval]) -> Result<EvalSummary> {
    let n_src = evals.first().ok_or(Error::EmptyAfterFilter)?.si_sdr_i.len();
    let per_source: Vec<f64> = (0..n_src)
        .map(|n| {
            let vals: Vec<f64> = evals.iter().filter_map(|e| e.si_sdr_i[n]).collect();
            if vals.is_empty() {
                f64::NAN
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            }
        })
        .collect();
    let defined: Vec<f64> = per_source.iter().copied().filter(|v| v.is_finite()).collect();
    let all = defined.iter().sum::<f64>() / defined.len() as f64;
    Ok(EvalSummary {
        per_source,
        all,
        n_chunks: evals.len(),
    })
}

/// Runs `separator(chunk) -> estimate` over every kept chunk (in parallel,
/// results kept in chunk order) and aggregates.
pub fn eval_chunks<F>(
    tracks: &[ToyTrack],
    separator: F,
    chunk_len: usize,
    hop: usize,
    filter: &ChunkFilter,
) -> Result<(Vec<ChunkEval>, EvalSummary)>
where
    F: Fn(&Chunk) -> Result<SourceArray> + Sync,
{
    let chunks = extract_chunks(tracks, chunk_len, hop, filter)?;
    let evals = chunks
        .par_iter()
        .map(|c| score_chunk(&tracks[c.track_idx].track_id, c, &separator(c)?))
        .collect::<Result<Vec<_>>>()?;
    let summary = summarize(&evals)?;
    Ok((evals, summary))
}
