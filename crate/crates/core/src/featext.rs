//! Log-mel filterbank features and corpus mean/variance normalization.
//!
//! 80-dim FBANK at a 10 ms stride: 25 ms Hann window, 512-point FFT,
//! 80 mel bands spanning 0-8000 Hz, natural log with a floor so silence
//! stays finite.

use rustfft::{num_complex::Complex, FftPlanner};
use thiserror::Error;

use crate::audio::AudioBuffer;

pub const FRAME_DIM: usize = 80;
pub const WINDOW_SAMPLES: usize = 400; // 25 ms at 16 kHz
pub const HOP_SAMPLES: usize = 160; // 10 ms at 16 kHz
pub const FFT_SIZE: usize = 512;
pub const FRAME_STRIDE_MS: f64 = 10.0;
pub const MEL_LOW_HZ: f64 = 0.0;
pub const MEL_HIGH_HZ: f64 = 8000.0;
/// Applied to mel energies before the log, so all-zero audio maps to
/// ln(LOG_FLOOR) instead of -inf.
pub const LOG_FLOOR: f64 = 1e-10;
/// Lower bound on fitted per-dimension variance, tolerating constant dims.
pub const VARIANCE_FLOOR: f64 = 1e-8;

#[derive(Error, Debug)]
pub enum FeatError {
    #[error("audio too short for one analysis window ({0} samples < {WINDOW_SAMPLES})")]
    TooShort(usize),
    #[error("feature dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("need at least 2 frames to fit normalization stats, got {0}")]
    InsufficientData(usize),
}

/// T x D matrix of log-mel energies at a 10 ms stride.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    num_frames: usize,
    dim: usize,
    data: Vec<f64>,
}

impl FeatureSequence {
    pub fn from_flat(num_frames: usize, dim: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), num_frames * dim);
        FeatureSequence {
            num_frames,
            dim,
            data,
        }
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn frames_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Number of feature frames produced for a sample count.
pub fn num_frames_for(samples: usize) -> usize {
    if samples < WINDOW_SAMPLES {
        0
    } else {
        (samples - WINDOW_SAMPLES) / HOP_SAMPLES + 1
    }
}

/// Precomputed window, mel weights and FFT plan; reusable across calls.
pub struct FbankExtractor {
    window: Vec<f64>,
    /// Per mel band, the (fft_bin, weight) pairs with nonzero weight.
    filters: Vec<Vec<(usize, f64)>>,
    fft: std::sync::Arc<dyn rustfft::Fft<f64>>,
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

impl FbankExtractor {
    pub fn new() -> Self {
        let window: Vec<f64> = (0..WINDOW_SAMPLES)
            .map(|n| {
                0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / WINDOW_SAMPLES as f64).cos()
            })
            .collect();

        let n_bins = FFT_SIZE / 2 + 1;
        let mel_lo = hz_to_mel(MEL_LOW_HZ);
        let mel_hi = hz_to_mel(MEL_HIGH_HZ);
        let edges: Vec<f64> = (0..FRAME_DIM + 2)
            .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (FRAME_DIM + 1) as f64))
            .collect();
        let bin_hz = crate::audio::SAMPLE_RATE as f64 / FFT_SIZE as f64;
        let mut filters = Vec::with_capacity(FRAME_DIM);
        for b in 0..FRAME_DIM {
            let (lo, mid, hi) = (edges[b], edges[b + 1], edges[b + 2]);
            let mut taps = Vec::new();
            for k in 0..n_bins {
                let f = k as f64 * bin_hz;
                let w = if f >= lo && f <= mid && mid > lo {
                    (f - lo) / (mid - lo)
                } else if f > mid && f <= hi && hi > mid {
                    (hi - f) / (hi - mid)
                } else {
                    0.0
                };
                if w > 0.0 {
                    taps.push((k, w));
                }
            }
            filters.push(taps);
        }

        let fft = FftPlanner::new().plan_fft_forward(FFT_SIZE);
        FbankExtractor {
            window,
            filters,
            fft,
        }
    }

    pub fn compute(&self, audio: &AudioBuffer) -> Result<FeatureSequence, FeatError> {
        let samples = audio.samples();
        let t = num_frames_for(samples.len());
        if t == 0 {
            return Err(FeatError::TooShort(samples.len()));
        }
        let mut data = Vec::with_capacity(t * FRAME_DIM);
        let mut buf = vec![Complex::new(0.0, 0.0); FFT_SIZE];
        let mut power = vec![0.0f64; FFT_SIZE / 2 + 1];
        for fi in 0..t {
            let start = fi * HOP_SAMPLES;
            for n in 0..FFT_SIZE {
                buf[n] = if n < WINDOW_SAMPLES {
                    Complex::new(samples[start + n] * self.window[n], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.fft.process(&mut buf);
            for (k, p) in power.iter_mut().enumerate() {
                *p = buf[k].re * buf[k].re + buf[k].im * buf[k].im;
            }
            for taps in &self.filters {
                let e: f64 = taps.iter().map(|&(k, w)| w * power[k]).sum();
                data.push(e.max(LOG_FLOOR).ln());
            }
        }
        Ok(FeatureSequence::from_flat(t, FRAME_DIM, data))
    }
}

impl Default for FbankExtractor {
    fn default() -> Self {
        Self::new()
    }
}

/// One-shot FBANK computation.
pub fn compute_fbank(audio: &AudioBuffer) -> Result<FeatureSequence, FeatError> {
    FbankExtractor::new().compute(audio)
}

/// Per-dimension mean and variance pooled over a corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

/// Pooled population mean/variance over all frames of all sequences,
/// via Welford's online update. Variances are floored.
pub fn fit_norm_stats(corpus: &[FeatureSequence]) -> Result<NormStats, FeatError> {
    let dim = corpus.first().map(|f| f.dim()).unwrap_or(0);
    let total: usize = corpus.iter().map(|f| f.num_frames()).sum();
    if total < 2 {
        return Err(FeatError::InsufficientData(total));
    }
    let mut mean = vec![0.0f64; dim];
    let mut m2 = vec![0.0f64; dim];
    let mut n = 0.0f64;
    for seq in corpus {
        if seq.dim() != dim {
            return Err(FeatError::DimMismatch(seq.dim(), dim));
        }
        for frame in seq.frames_iter() {
            n += 1.0;
            for d in 0..dim {
                let delta = frame[d] - mean[d];
                mean[d] += delta / n;
                m2[d] += delta * (frame[d] - mean[d]);
            }
        }
    }
    let variance = m2.iter().map(|v| (v / n).max(VARIANCE_FLOOR)).collect();
    Ok(NormStats { mean, variance })
}

/// (x - mean) / sqrt(variance), per dimension.
pub fn normalize(
    features: &FeatureSequence,
    stats: &NormStats,
) -> Result<FeatureSequence, FeatError> {
    if features.dim() != stats.mean.len() {
        return Err(FeatError::DimMismatch(features.dim(), stats.mean.len()));
    }
    let dim = features.dim();
    let inv_std: Vec<f64> = stats.variance.iter().map(|v| 1.0 / v.sqrt()).collect();
    let data = features
        .data()
        .iter()
        .enumerate()
        .map(|(i, x)| (x - stats.mean[i % dim]) * inv_std[i % dim])
        .collect();
    Ok(FeatureSequence::from_flat(features.num_frames(), dim, data))
}

/// Inverse of [`normalize`].
pub fn denormalize(
    features: &FeatureSequence,
    stats: &NormStats,
) -> Result<FeatureSequence, FeatError> {
    if features.dim() != stats.mean.len() {
        return Err(FeatError::DimMismatch(features.dim(), stats.mean.len()));
    }
    let dim = features.dim();
    let std: Vec<f64> = stats.variance.iter().map(|v| v.sqrt()).collect();
    let data = features
        .data()
        .iter()
        .enumerate()
        .map(|(i, x)| x * std[i % dim] + stats.mean[i % dim])
        .collect();
    Ok(FeatureSequence::from_flat(features.num_frames(), dim, data))
}
