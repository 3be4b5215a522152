//! Fixed spectral audio features aligned to video frames.
//!
//! The clip is cut into `r * T` half-overlapping Hann windows: token `j` is
//! centred at `(j + 0.5) * hop` with length `2 * hop`, where
//! `hop = clip_samples / (r * T)`. Samples outside the clip count as zero.
//! Each window yields `ln(eps + E_k)` for `D_a` triangular mel-spaced bands
//! of the power spectrum.

use std::sync::Arc;

use ndarray::{s, Array2, Axis};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::world::AudioSignal;

pub const LOG_EPS: f64 = 1e-8;
pub const DEFAULT_AUDIO_DIM: usize = 16;
pub const DEFAULT_TOKENS_PER_FRAME: usize = 2;

/// `[L, D_a]` audio tokens, `L = r * T`, positions `0..L`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioTokens {
    pub tokens: Array2<f32>,
    pub positions: Vec<i64>,
    pub tokens_per_frame: usize,
}

impl AudioTokens {
    pub fn new(tokens: Array2<f32>, tokens_per_frame: usize) -> Result<Self> {
        ensure!(tokens_per_frame >= 1, "tokens_per_frame must be positive");
        ensure!(tokens.nrows().is_multiple_of(tokens_per_frame), "token count is not a multiple of tokens_per_frame");
        ensure!(tokens.iter().all(|v| v.is_finite()), "audio tokens must be finite");
        let positions = (0..tokens.nrows() as i64).collect();
        Ok(Self { tokens, positions, tokens_per_frame })
    }

    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }

    /// Video frames covered.
    pub fn frames(&self) -> usize {
        self.len() / self.tokens_per_frame
    }

    /// Tokens for frames `start..end`, positions re-based to zero.
    pub fn slice_frames(&self, start: usize, end: usize) -> Result<AudioTokens> {
        let r = self.tokens_per_frame;
        ensure!(start <= end && end * r <= self.len(), "frames {start}..{end} exceed audio coverage of {}", self.frames());
        AudioTokens::new(self.tokens.slice(s![start * r..end * r, ..]).to_owned(), r)
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filter `k` evaluated at frequency `f`.
fn triangle(edges: &[f64], k: usize, f: f64) -> f64 {
    let (lo, mid, hi) = (edges[k], edges[k + 1], edges[k + 2]);
    if f <= lo || f >= hi {
        0.0
    } else if f <= mid {
        (f - lo) / (mid - lo)
    } else {
        (hi - f) / (hi - mid)
    }
}

/// Centre frequencies (Hz) of the `bands` filters for `sample_rate`.
pub fn band_centers(sample_rate: u32, bands: usize) -> Vec<f64> {
    band_edges(sample_rate, bands)[1..=bands].to_vec()
}

fn band_edges(sample_rate: u32, bands: usize) -> Vec<f64> {
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    (0..bands + 2).map(|i| mel_to_hz(top * i as f64 / (bands + 1) as f64)).collect()
}

/// Featurizer for a fixed window length; reusable across clips.
pub struct Featurizer {
    window: Vec<f64>,
    filters: Array2<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl Featurizer {
    pub fn new(sample_rate: u32, window_len: usize, bands: usize) -> Result<Self> {
        ensure!(window_len >= 2, "window length must be at least 2 samples");
        ensure!(bands >= 1, "need at least one band");
        let window = (0..window_len)
            .map(|i| 0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / window_len as f64).cos())
            .collect();
        let bins = window_len / 2 + 1;
        let edges = band_edges(sample_rate, bands);
        let filters = Array2::from_shape_fn((bands, bins), |(k, b)| {
            triangle(&edges, k, b as f64 * sample_rate as f64 / window_len as f64)
        });
        let fft = FftPlanner::new().plan_fft_forward(window_len);
        Ok(Self { window, filters, fft })
    }

    /// Log band energies of the window starting at sample `start` (may be
    /// negative or run past the end).
    fn frame(&self, samples: &[f32], start: i64, clip_end: usize, out: &mut [f32]) {
        let n = self.window.len();
        let mut buf: Vec<Complex<f64>> = (0..n)
            .map(|i| {
                let idx = start + i as i64;
                let v = if idx >= 0 && (idx as usize) < clip_end { samples[idx as usize] as f64 } else { 0.0 };
                Complex::new(v * self.window[i], 0.0)
            })
            .collect();
        self.fft.process(&mut buf);
        let power: Vec<f64> = buf[..n / 2 + 1].iter().map(|c| c.norm_sqr()).collect();
        for (k, o) in out.iter_mut().enumerate() {
            let e: f64 = self.filters.row(k).iter().zip(&power).map(|(w, p)| w * p).sum();
            *o = (LOG_EPS + e).ln() as f32;
        }
    }
}

/// Raw (un-normalised) features for a `frames`-long clip at `fps`.
pub fn featurize(audio: &AudioSignal, fps: f32, frames: usize, r: usize, bands: usize) -> Result<AudioTokens> {
    ensure!(frames >= 1 && r >= 1, "frames and tokens_per_frame must be positive");
    ensure!(fps > 0.0, "fps must be positive");
    let clip = (frames as f64 * audio.sample_rate as f64 / fps as f64).round() as usize;
    ensure!(
        audio.samples.len() >= clip,
        "audio has {} samples, {frames} frames at {fps} fps need {clip}",
        audio.samples.len()
    );
    let count = r * frames;
    let hop = clip as f64 / count as f64;
    let window_len = (2.0 * hop).round().max(2.0) as usize;
    let fz = Featurizer::new(audio.sample_rate, window_len, bands)?;
    let mut tokens = Array2::zeros((count, bands));
    for (j, mut row) in tokens.axis_iter_mut(Axis(0)).enumerate() {
        let start = ((j as f64 - 0.5) * hop).round() as i64;
        fz.frame(&audio.samples, start, clip, row.as_slice_mut().expect("row-major"));
    }
    AudioTokens::new(tokens, r)
}

/// Per-band mean and standard deviation over a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl FeatureStats {
    pub fn identity(bands: usize) -> Self {
        Self { mean: vec![0.0; bands], std: vec![1.0; bands] }
    }

    pub fn fit<'a>(sets: impl IntoIterator<Item = &'a AudioTokens>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut n = 0usize;
        for t in sets {
            if sum.is_empty() {
                sum = vec![0.0; t.dim()];
                sq = vec![0.0; t.dim()];
            }
            ensure!(t.dim() == sum.len(), "inconsistent audio feature dims");
            for row in t.tokens.rows() {
                for (k, &v) in row.iter().enumerate() {
                    sum[k] += v as f64;
                    sq[k] += (v as f64) * (v as f64);
                }
                n += 1;
            }
        }
        ensure!(n > 0, "no audio tokens to fit statistics on");
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| ((q / n as f64 - m * m).max(0.0).sqrt().max(1e-6)) as f32)
            .collect();
        Ok(Self { mean: mean.into_iter().map(|m| m as f32).collect(), std })
    }

    pub fn normalize(&self, tokens: &AudioTokens) -> Result<AudioTokens> {
        ensure!(tokens.dim() == self.mean.len(), "feature dim {} does not match stats {}", tokens.dim(), self.mean.len());
        let mut out = tokens.clone();
        for mut row in out.tokens.rows_mut() {
            for (k, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[k]) / self.std[k];
            }
        }
        Ok(out)
    }
}
