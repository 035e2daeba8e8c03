//! Chunk-wise streaming attention masks, masked-span sampling, and the
//! algorithmic-latency calculator.
//!
//! The T x T mask S allows frame i to read frame j when both share a
//! chunk, or when j's chunk lies within the h-1 chunks preceding i's.
//! Stacking layers grows the left receptive field while the right edge
//! stays at the current chunk end, which is what bounds latency.

use rand::Rng;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum MaskError {
    #[error("sequence length {t} must exceed span length {span}")]
    SpanTooLong { t: usize, span: usize },
}

/// Chunk geometry for the streaming attention mask.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChunkMaskConfig {
    /// Encoder frames per chunk.
    pub chunk_size: usize,
    /// How many chunks are visible including the current one (h >= 1).
    /// `None` means unbounded history.
    pub history_chunks: Option<usize>,
    /// Offline attention: the mask is all ones.
    pub offline: bool,
}

impl ChunkMaskConfig {
    pub fn streaming(chunk_size: usize, history_chunks: usize) -> Self {
        assert!(chunk_size >= 1 && history_chunks >= 1);
        ChunkMaskConfig {
            chunk_size,
            history_chunks: Some(history_chunks),
            offline: false,
        }
    }

    pub fn offline() -> Self {
        ChunkMaskConfig {
            chunk_size: 1,
            history_chunks: None,
            offline: true,
        }
    }
}

/// T x T binary visibility matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    t_len: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn t_len(&self) -> usize {
        self.t_len
    }

    #[inline]
    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.t_len + j]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allowed
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.allowed[i * self.t_len..(i + 1) * self.t_len]
    }

    pub fn is_all_ones(&self) -> bool {
        self.allowed.iter().all(|&b| b)
    }

    /// Rows as 0/1 strings, the `mask-dump` output format.
    pub fn dump_rows(&self) -> Vec<String> {
        (0..self.t_len)
            .map(|i| {
                self.row(i)
                    .iter()
                    .map(|&b| if b { '1' } else { '0' })
                    .collect()
            })
            .collect()
    }

    /// Visible set after stacking `layers` attention layers with this mask:
    /// the boolean closure of S applied `layers` times.
    pub fn visible_after_layers(&self, i: usize, layers: usize) -> Vec<bool> {
        let t = self.t_len;
        let mut vis = vec![false; t];
        vis[i] = true;
        for _ in 0..layers {
            let mut next = vec![false; t];
            for a in 0..t {
                if !vis[a] {
                    continue;
                }
                for b in 0..t {
                    if self.allows(a, b) {
                        next[b] = true;
                    }
                }
            }
            vis = next;
        }
        vis
    }
}

/// Builds the chunk-wise mask for a sequence of length `t_len`.
pub fn build_chunk_mask(t_len: usize, config: &ChunkMaskConfig) -> AttentionMask {
    assert!(t_len >= 1, "mask needs at least one frame");
    let mut allowed = vec![false; t_len * t_len];
    if config.offline {
        allowed.fill(true);
        return AttentionMask { t_len, allowed };
    }
    let cs = config.chunk_size;
    for i in 0..t_len {
        let li = i / cs;
        for j in 0..t_len {
            let lj = j / cs;
            let ok = match config.history_chunks {
                _ if lj == li => true,
                Some(h) => lj < li && li - lj < h,
                None => lj < li,
            };
            allowed[i * t_len + j] = ok;
        }
    }
    AttentionMask { t_len, allowed }
}

/// Algorithmic latency of a mask configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Latency {
    Millis(f64),
    Unbounded,
}

impl std::fmt::Display for Latency {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Latency::Millis(ms) => write!(f, "{ms} ms"),
            Latency::Unbounded => write!(f, "inf"),
        }
    }
}

/// Future lookahead in milliseconds: chunk size times the encoder frame
/// duration; unbounded for offline masks.
pub fn latency_ms(config: &ChunkMaskConfig, encoder_frame_ms: f64) -> Latency {
    assert!(encoder_frame_ms > 0.0);
    if config.offline {
        Latency::Unbounded
    } else {
        Latency::Millis(config.chunk_size as f64 * encoder_frame_ms)
    }
}

/// Parameters for sampling masked spans for masked speech prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskSpanConfig {
    pub span_length: usize,
    pub start_probability: f64,
}

impl Default for MaskSpanConfig {
    fn default() -> Self {
        // HuBERT convention; the masking parameters are not fixed by the
        // chunk geometry.
        MaskSpanConfig {
            span_length: 10,
            start_probability: 0.08,
        }
    }
}

/// Sorted set of masked encoder-frame indices. Non-empty by construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedSet {
    indices: Vec<usize>,
}

impl MaskedSet {
    pub fn from_sorted(indices: Vec<usize>) -> Self {
        debug_assert!(indices.windows(2).all(|w| w[0] < w[1]));
        MaskedSet { indices }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.indices.binary_search(&i).is_ok()
    }
}

/// Frame indices covered by a span starting at `start`, truncated at `t_len`.
pub fn span_indices(start: usize, span_length: usize, t_len: usize) -> std::ops::Range<usize> {
    start..(start + span_length).min(t_len)
}

fn draw_spans(t_len: usize, config: &MaskSpanConfig, rng: &mut impl Rng) -> Vec<bool> {
    let mut masked = vec![false; t_len];
    for t in 0..t_len {
        if rng.random_bool(config.start_probability) {
            for i in span_indices(t, config.span_length, t_len) {
                masked[i] = true;
            }
        }
    }
    masked
}

/// Samples masked spans: each frame starts a span with the configured
/// probability; spans are truncated at T and unioned. An empty draw is
/// resampled once, then falls back to one random full span.
pub fn sample_mask_spans(
    t_len: usize,
    config: &MaskSpanConfig,
    rng: &mut impl Rng,
) -> Result<MaskedSet, MaskError> {
    if t_len <= config.span_length {
        return Err(MaskError::SpanTooLong {
            t: t_len,
            span: config.span_length,
        });
    }
    assert!(config.span_length >= 1);
    assert!(config.start_probability > 0.0 && config.start_probability < 1.0);

    let mut masked = draw_spans(t_len, config, rng);
    if !masked.iter().any(|&m| m) {
        masked = draw_spans(t_len, config, rng);
    }
    if !masked.iter().any(|&m| m) {
        let start = rng.random_range(0..=t_len - config.span_length);
        for i in span_indices(start, config.span_length, t_len) {
            masked[i] = true;
        }
    }
    let indices = masked
        .iter()
        .enumerate()
        .filter_map(|(i, &m)| m.then_some(i))
        .collect();
    Ok(MaskedSet::from_sorted(indices))
}
