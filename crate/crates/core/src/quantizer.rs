//! Pseudo-label generation: k-means codebooks over feature frames, label
//! assignment with x4 downsampling to the encoder frame rate, external
//! label import, and bi-label target construction.
//!
//! Labels are 1-based (`1..=C`); 0 is reserved for the secondary-stream
//! blank that marks frames with no secondary speech.

use std::path::Path;

use rand::Rng;
use thiserror::Error;

use crate::containers::{self, ContainerError, LabelFormat};
use crate::featext::FeatureSequence;
use crate::mixer::{MixKind, MixSpec, PresenceMask};

/// Label downsampling factor from the 10 ms feature rate to the 40 ms
/// encoder rate.
pub const LABEL_DOWNSAMPLE: usize = 4;
/// Reserved secondary label for frames without secondary speech.
pub const BLANK_LABEL: u32 = 0;

#[derive(Error, Debug)]
pub enum QuantizerError {
    #[error("need at least {needed} frames to fit {needed} centroids, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("dimension mismatch: frames are {0}-dim, centroids are {1}-dim")]
    DimMismatch(usize, usize),
    #[error("label {label} out of range 1..={max} at index {index}")]
    LabelOutOfRange { label: u32, max: u32, index: usize },
    #[error("label/feature alignment mismatch: {0}")]
    Alignment(String),
    #[error("container: {0}")]
    Container(#[from] ContainerError),
}

/// C x D codebook of centroids.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    size: usize,
    dim: usize,
    centroids: Vec<f64>,
}

impl Codebook {
    pub fn from_flat(size: usize, dim: usize, centroids: Vec<f64>) -> Self {
        assert!(size >= 2, "codebook needs at least 2 centroids");
        assert_eq!(centroids.len(), size * dim);
        Codebook {
            size,
            dim,
            centroids,
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn centroid(&self, c: usize) -> &[f64] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }

    pub fn save(&self, path: &Path) -> Result<(), QuantizerError> {
        containers::save_codebook_raw(path, self.size, self.dim, &self.centroids)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, QuantizerError> {
        let (c, d, data) = containers::load_codebook_raw(path)?;
        Ok(Codebook::from_flat(c, d, data))
    }
}

/// Per-frame pseudo labels at the 40 ms encoder rate, values in `1..=C`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelStream {
    labels: Vec<u32>,
}

impl LabelStream {
    pub fn from_labels(labels: Vec<u32>) -> Self {
        LabelStream { labels }
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Aligned primary/secondary label streams; secondary uses 0 for blank.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BiLabelStream {
    pub primary: LabelStream,
    pub secondary: Vec<u32>,
}

impl BiLabelStream {
    pub fn len(&self) -> usize {
        self.primary.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primary.is_empty()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Result of k-means training: the codebook plus the inertia recorded at
/// each iteration (sum of squared distances to the nearest centroid).
#[derive(Debug, Clone)]
pub struct KmeansResult {
    pub codebook: Codebook,
    pub inertia_per_iteration: Vec<f64>,
}

/// Relative inertia improvement below which training stops early.
pub const KMEANS_EARLY_STOP: f64 = 1e-7;

/// Lloyd's algorithm with k-means++ initialization over all frames of the
/// corpus. Deterministic for a given rng state.
pub fn train_kmeans(
    corpus: &[&FeatureSequence],
    num_centroids: usize,
    iterations: usize,
    rng: &mut impl Rng,
) -> Result<KmeansResult, QuantizerError> {
    let dim = corpus.first().map(|f| f.dim()).unwrap_or(0);
    let frames: Vec<&[f64]> = corpus.iter().flat_map(|f| f.frames_iter()).collect();
    if frames.len() < num_centroids {
        return Err(QuantizerError::InsufficientData {
            needed: num_centroids,
            got: frames.len(),
        });
    }

    // k-means++ seeding: D^2-weighted draws.
    let mut centroids: Vec<f64> = Vec::with_capacity(num_centroids * dim);
    let first = rng.random_range(0..frames.len());
    centroids.extend_from_slice(frames[first]);
    let mut d2: Vec<f64> = frames.iter().map(|f| sq_dist(f, frames[first])).collect();
    for _ in 1..num_centroids {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut threshold = rng.random_range(0.0..total);
            let mut chosen = frames.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if threshold < w {
                    chosen = i;
                    break;
                }
                threshold -= w;
            }
            chosen
        } else {
            rng.random_range(0..frames.len())
        };
        centroids.extend_from_slice(frames[pick]);
        let newc = frames[pick].to_vec();
        for (i, f) in frames.iter().enumerate() {
            let d = sq_dist(f, &newc);
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }

    let c_at = |cs: &[f64], c: usize| -> Vec<f64> { cs[c * dim..(c + 1) * dim].to_vec() };
    let mut assignments = vec![0usize; frames.len()];
    let mut inertia_per_iteration: Vec<f64> = Vec::with_capacity(iterations);
    for _iter in 0..iterations {
        // Assignment step, recording the inertia of the current centroids.
        let mut inertia = 0.0;
        for (i, f) in frames.iter().enumerate() {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for c in 0..num_centroids {
                let d = sq_dist(f, &centroids[c * dim..(c + 1) * dim]);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            assignments[i] = best;
            inertia += best_d;
        }
        if let Some(&prev) = inertia_per_iteration.last() {
            debug_assert!(inertia <= prev + prev.abs() * 1e-12, "inertia increased");
            if prev > 0.0 && (prev - inertia) / prev < KMEANS_EARLY_STOP {
                inertia_per_iteration.push(inertia);
                break;
            }
        }
        inertia_per_iteration.push(inertia);

        // Update step: fixed summation order over frames; empty clusters
        // keep their previous centroid, which preserves monotonicity.
        let mut sums = vec![0.0f64; num_centroids * dim];
        let mut counts = vec![0usize; num_centroids];
        for (i, f) in frames.iter().enumerate() {
            let c = assignments[i];
            for (s, x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(*f) {
                *s += x;
            }
            counts[c] += 1;
        }
        for c in 0..num_centroids {
            if counts[c] > 0 {
                for d in 0..dim {
                    centroids[c * dim + d] = sums[c * dim + d] / counts[c] as f64;
                }
            } else {
                let keep = c_at(&centroids, c);
                centroids[c * dim..(c + 1) * dim].copy_from_slice(&keep);
            }
        }
    }

    Ok(KmeansResult {
        codebook: Codebook::from_flat(num_centroids, dim, centroids),
        inertia_per_iteration,
    })
}

/// Nearest centroid (squared Euclidean, ties to the lowest index),
/// 1-based label.
pub fn nearest_label(frame: &[f64], codebook: &Codebook) -> u32 {
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for c in 0..codebook.size() {
        let d = sq_dist(frame, codebook.centroid(c));
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    (best + 1) as u32
}

/// Assigns a nearest-centroid label per feature frame, then downsamples
/// x4 by keeping the first label of each group of 4.
pub fn assign_labels(
    features: &FeatureSequence,
    codebook: &Codebook,
) -> Result<LabelStream, QuantizerError> {
    if features.dim() != codebook.dim() {
        return Err(QuantizerError::DimMismatch(features.dim(), codebook.dim()));
    }
    let labels = (0..features.num_frames())
        .step_by(LABEL_DOWNSAMPLE)
        .map(|t| nearest_label(features.frame(t), codebook))
        .collect();
    Ok(LabelStream::from_labels(labels))
}

/// Encoder-rate length for a feature-frame count: ceil(T / 4).
pub fn encoder_len(feature_frames: usize) -> usize {
    feature_frames.div_ceil(LABEL_DOWNSAMPLE)
}

/// Validates labels against the codebook size `1..=C`.
pub fn validate_labels(labels: &[u32], num_classes: u32) -> Result<(), QuantizerError> {
    for (index, &label) in labels.iter().enumerate() {
        if label < 1 || label > num_classes {
            return Err(QuantizerError::LabelOutOfRange {
                label,
                max: num_classes,
                index,
            });
        }
    }
    Ok(())
}

/// Loads an externally generated label stream, already at the encoder
/// frame rate, rejecting out-of-range labels.
pub fn import_labels(
    path: &Path,
    num_classes: u32,
    format: LabelFormat,
) -> Result<LabelStream, QuantizerError> {
    let labels = containers::load_labels(path, format)?;
    validate_labels(&labels, num_classes)?;
    Ok(LabelStream::from_labels(labels))
}

pub fn export_labels(
    path: &Path,
    stream: &LabelStream,
    format: LabelFormat,
) -> Result<(), QuantizerError> {
    containers::save_labels(path, stream.labels(), format)?;
    Ok(())
}

/// Builds bi-label targets for a mixed utterance: primary labels from the
/// clean primary features, secondary labels from the clean secondary
/// features inside the inserted segment, blank (0) elsewhere.
///
/// Pseudo labels come from the clean pre-mix signals; on overlapped frames
/// that is the only construction under which both targets are defined.
pub fn build_bilabel_targets(
    primary_clean: &FeatureSequence,
    secondary_clean: Option<&FeatureSequence>,
    spec: &MixSpec,
    mask: &PresenceMask,
    codebook: &Codebook,
) -> Result<BiLabelStream, QuantizerError> {
    let primary = assign_labels(primary_clean, codebook)?;
    if mask.len() != primary_clean.num_frames() {
        return Err(QuantizerError::Alignment(format!(
            "presence mask has {} frames, features have {}",
            mask.len(),
            primary_clean.num_frames()
        )));
    }
    let t_enc = encoder_len(primary_clean.num_frames());
    debug_assert_eq!(primary.len(), t_enc);

    let mut secondary = vec![BLANK_LABEL; t_enc];
    if spec.kind == MixKind::Speech {
        let sec = secondary_clean.ok_or_else(|| {
            QuantizerError::Alignment("speech mix requires clean secondary features".into())
        })?;
        if sec.dim() != codebook.dim() {
            return Err(QuantizerError::DimMismatch(sec.dim(), codebook.dim()));
        }
        let hop = crate::featext::HOP_SAMPLES as f64;
        let insert_frame = spec.insert_offset_samples() as f64 / hop;
        let seg_start_frame = spec.segment_start_samples() as f64 / hop;
        for (te, s) in secondary.iter_mut().enumerate() {
            let f = te * LABEL_DOWNSAMPLE;
            if f < mask.len() && mask.active(f) {
                // Map the mixture frame back onto the secondary's own
                // feature timeline.
                let sec_frame = (f as f64 - insert_frame + seg_start_frame).round();
                let sec_frame = sec_frame.clamp(0.0, (sec.num_frames() - 1) as f64) as usize;
                *s = nearest_label(sec.frame(sec_frame), codebook);
            }
        }
    }
    Ok(BiLabelStream { primary, secondary })
}

/// Bi-label targets from precomputed label streams (the import path):
/// the secondary's stream is sampled at the mixture's encoder positions
/// mapped back onto the secondary's own timeline.
pub fn build_bilabel_targets_from_streams(
    primary: &LabelStream,
    secondary: Option<&LabelStream>,
    spec: &MixSpec,
    mask: &PresenceMask,
) -> Result<BiLabelStream, QuantizerError> {
    let t_enc = encoder_len(mask.len());
    if primary.len() != t_enc {
        return Err(QuantizerError::Alignment(format!(
            "primary stream has {} frames, presence mask implies {t_enc}",
            primary.len()
        )));
    }
    let mut sec_out = vec![BLANK_LABEL; t_enc];
    if spec.kind == MixKind::Speech {
        let sec = secondary.ok_or_else(|| {
            QuantizerError::Alignment("speech mix requires a secondary label stream".into())
        })?;
        if sec.is_empty() {
            return Err(QuantizerError::Alignment(
                "secondary label stream is empty".into(),
            ));
        }
        let hop = crate::featext::HOP_SAMPLES as f64;
        let insert_frame = spec.insert_offset_samples() as f64 / hop;
        let seg_start_frame = spec.segment_start_samples() as f64 / hop;
        for (te, s) in sec_out.iter_mut().enumerate() {
            let f = te * LABEL_DOWNSAMPLE;
            if f < mask.len() && mask.active(f) {
                let sec_feat = f as f64 - insert_frame + seg_start_frame;
                let sec_enc = (sec_feat / LABEL_DOWNSAMPLE as f64)
                    .round()
                    .clamp(0.0, (sec.len() - 1) as f64) as usize;
                *s = sec.labels()[sec_enc];
            }
        }
    }
    Ok(BiLabelStream {
        primary: primary.clone(),
        secondary: sec_out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq(rows: usize, dim: usize, data: Vec<f64>) -> FeatureSequence {
        FeatureSequence::from_flat(rows, dim, data)
    }

    #[test]
    fn c_points_c_clusters_reach_zero_inertia() {
        let f = seq(4, 2, vec![0.0, 0.0, 10.0, 0.0, 0.0, 10.0, 10.0, 10.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = train_kmeans(&[&f], 4, 10, &mut rng).unwrap();
        assert!(out.inertia_per_iteration.last().unwrap() < &1e-12);
        for p in 0..4 {
            let lbl = nearest_label(f.frame(p), &out.codebook);
            let c = out.codebook.centroid((lbl - 1) as usize);
            assert!(sq_dist(f.frame(p), c) < 1e-12);
        }
    }

    #[test]
    fn two_blobs_recover_blob_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut data = Vec::new();
        let mut blob_a = [0.0f64; 2];
        let mut blob_b = [0.0f64; 2];
        for i in 0..50 {
            let x = rng.random_range(-0.5..0.5);
            let y = rng.random_range(-0.5..0.5);
            data.extend_from_slice(&[x, y]);
            blob_a[0] += x;
            blob_a[1] += y;
            let _ = i;
        }
        for _ in 0..50 {
            let x = 100.0 + rng.random_range(-0.5..0.5);
            let y = -40.0 + rng.random_range(-0.5..0.5);
            data.extend_from_slice(&[x, y]);
            blob_b[0] += x;
            blob_b[1] += y;
        }
        let f = seq(100, 2, data);
        let out = train_kmeans(&[&f], 2, 30, &mut rng).unwrap();
        let mut means = [
            [blob_a[0] / 50.0, blob_a[1] / 50.0],
            [blob_b[0] / 50.0, blob_b[1] / 50.0],
        ];
        let mut got = [
            [out.codebook.centroid(0)[0], out.codebook.centroid(0)[1]],
            [out.codebook.centroid(1)[0], out.codebook.centroid(1)[1]],
        ];
        means.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap());
        got.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap());
        for (m, g) in means.iter().zip(&got) {
            assert!((m[0] - g[0]).abs() < 1e-6 && (m[1] - g[1]).abs() < 1e-6);
        }
    }

    /// Re-evaluates inertia from scratch given centroids, independent of
    /// the training loop's bookkeeping.
    fn inertia_oracle(frames: &FeatureSequence, centroids: &Codebook) -> f64 {
        let mut total = 0.0;
        for f in frames.frames_iter() {
            let mut best = f64::INFINITY;
            for c in 0..centroids.size() {
                best = best.min(sq_dist(f, centroids.centroid(c)));
            }
            total += best;
        }
        total
    }

    #[test]
    fn inertia_is_monotone_and_final_value_matches_reevaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = seq(
            200,
            4,
            (0..800).map(|_| rng.random_range(-1.0..1.0)).collect(),
        );
        let out = train_kmeans(&[&f], 8, 20, &mut rng).unwrap();
        let inertias = &out.inertia_per_iteration;
        assert!(!inertias.is_empty());
        for w in inertias.windows(2) {
            assert!(
                w[1] <= w[0] + w[0].abs() * 1e-12,
                "inertia increased: {w:?}"
            );
        }
        // The last recorded inertia was measured against the centroids in
        // place at that assignment; after the final update the oracle value
        // can only be equal or better.
        let reeval = inertia_oracle(&f, &out.codebook);
        assert!(reeval <= inertias[inertias.len() - 1] + 1e-9);
    }

    #[test]
    fn frame_at_centroid_gets_that_label() {
        let cb = Codebook::from_flat(3, 2, vec![0.0, 0.0, 5.0, 5.0, -3.0, 4.0]);
        assert_eq!(nearest_label(&[5.0, 5.0], &cb), 2);
        assert_eq!(nearest_label(&[-3.0, 4.0], &cb), 3);
    }

    #[test]
    fn equidistant_frame_breaks_tie_to_lowest_index() {
        // Centroids 2 and 5 (1-based) equidistant from the probe.
        let cb = Codebook::from_flat(
            6,
            2,
            vec![
                100.0, 100.0, // label 1, far
                1.0, 0.0, // label 2
                90.0, 90.0, // label 3
                80.0, 80.0, // label 4
                -1.0, 0.0, // label 5, mirror of label 2
                70.0, 70.0, // label 6
            ],
        );
        assert_eq!(nearest_label(&[0.0, 0.0], &cb), 2);
    }

    #[test]
    fn labels_match_bruteforce_scan_and_downsample_by_four() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f = seq(
            100,
            3,
            (0..300).map(|_| rng.random_range(-2.0..2.0)).collect(),
        );
        let out = train_kmeans(&[&f], 5, 10, &mut rng).unwrap();
        let stream = assign_labels(&f, &out.codebook).unwrap();
        assert_eq!(stream.len(), 25);
        for (i, &lbl) in stream.labels().iter().enumerate() {
            let frame = f.frame(i * LABEL_DOWNSAMPLE);
            // brute force across all centroids
            let mut best = (0usize, f64::INFINITY);
            for c in 0..5 {
                let d = sq_dist(frame, out.codebook.centroid(c));
                if d < best.1 {
                    best = (c, d);
                }
            }
            assert_eq!(lbl, (best.0 + 1) as u32);
        }
    }

    #[test]
    fn odd_length_rounds_up() {
        assert_eq!(encoder_len(7), 2);
        assert_eq!(encoder_len(8), 2);
        assert_eq!(encoder_len(9), 3);
        let cb = Codebook::from_flat(2, 1, vec![0.0, 1.0]);
        let f = seq(7, 1, vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let stream = assign_labels(&f, &cb).unwrap();
        assert_eq!(stream.labels(), &[1, 2]);
    }

    #[test]
    fn permuting_centroids_permutes_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f = seq(
            40,
            2,
            (0..80).map(|_| rng.random_range(-1.0..1.0)).collect(),
        );
        let cb = Codebook::from_flat(4, 2, vec![0.9, 0.9, -0.9, 0.9, 0.9, -0.9, -0.9, -0.9]);
        // Rotate centroids by one position.
        let mut rotated = cb.centroid(3).to_vec();
        for c in 0..3 {
            rotated.extend_from_slice(cb.centroid(c));
        }
        let cb_rot = Codebook::from_flat(4, 2, rotated);
        let a = assign_labels(&f, &cb).unwrap();
        let b = assign_labels(&f, &cb_rot).unwrap();
        for (&la, &lb) in a.labels().iter().zip(b.labels()) {
            // old label c moved to position (c % 4) + 1 in the rotation
            let expected = (la % 4) + 1;
            assert_eq!(lb, expected);
        }
    }

    #[test]
    fn bilabel_targets_place_secondary_labels_inside_the_overlap() {
        // Codebook with two obvious centroids; primary sits at centroid 1,
        // secondary at centroid 2.
        let cb = Codebook::from_flat(2, 2, vec![0.0, 0.0, 10.0, 10.0]);
        let t_feat = 40; // 10 encoder frames
        let primary = seq(t_feat, 2, vec![0.1; 80]);
        let secondary = seq(t_feat, 2, vec![10.0; 80]);
        // Segment covering feature frames [16, 28) => encoder frames 4..7.
        let hop = crate::featext::HOP_SAMPLES;
        let spec = MixSpec {
            primary_id: "p".into(),
            kind: MixKind::Speech,
            secondary_id: Some("q".into()),
            segment_start_s: 0.0,
            segment_len_s: (12 * hop) as f64 / 16000.0,
            insert_offset_s: (16 * hop) as f64 / 16000.0,
            snr_db: 0.0,
            noise_seed: 0,
        };
        // Build the mask exactly as apply_mix would (hop-interval rule).
        let mask = {
            let mut active = vec![false; t_feat];
            let (a, b) = (16 * hop, 28 * hop);
            for (t, flag) in active.iter_mut().enumerate() {
                let lo = t * hop;
                *flag = lo < b && a < lo + hop;
            }
            PresenceMask::from_bools(active)
        };
        let out = build_bilabel_targets(&primary, Some(&secondary), &spec, &mask, &cb).unwrap();
        assert_eq!(out.primary.labels(), &[1u32; 10]);
        for te in 0..10 {
            if (4..7).contains(&te) {
                assert_eq!(out.secondary[te], 2, "encoder frame {te}");
            } else {
                assert_eq!(out.secondary[te], BLANK_LABEL, "encoder frame {te}");
            }
        }
        // Stream route agrees on this aligned case.
        let pstream = assign_labels(&primary, &cb).unwrap();
        let sstream = assign_labels(&secondary, &cb).unwrap();
        let out2 =
            build_bilabel_targets_from_streams(&pstream, Some(&sstream), &spec, &mask).unwrap();
        assert_eq!(out2.secondary, out.secondary);
    }

    #[test]
    fn clean_mix_yields_all_blank_secondary() {
        let cb = Codebook::from_flat(2, 2, vec![0.0, 0.0, 10.0, 10.0]);
        let primary = seq(16, 2, vec![0.1; 32]);
        let spec = MixSpec::clean("p");
        let mask = PresenceMask::all_inactive(16);
        let out = build_bilabel_targets(&primary, None, &spec, &mask, &cb).unwrap();
        assert_eq!(out.secondary, vec![BLANK_LABEL; 4]);
    }

    #[test]
    fn import_validates_range_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("labels.txt");
        containers::save_labels(&p, &[1, 1, 2], LabelFormat::Text).unwrap();
        let s = import_labels(&p, 500, LabelFormat::Text).unwrap();
        assert_eq!(s.labels(), &[1, 1, 2]);

        containers::save_labels(&p, &[1, 501], LabelFormat::Text).unwrap();
        match import_labels(&p, 500, LabelFormat::Text) {
            Err(QuantizerError::LabelOutOfRange {
                label: 501,
                max: 500,
                index: 1,
            }) => {}
            other => panic!("expected range error, got {other:?}"),
        }

        let s = LabelStream::from_labels(vec![3, 2, 1, 500]);
        let pb = dir.path().join("labels.bin");
        export_labels(&pb, &s, LabelFormat::Binary).unwrap();
        assert_eq!(import_labels(&pb, 500, LabelFormat::Binary).unwrap(), s);
    }
}
