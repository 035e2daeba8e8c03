//! Masked-speech-prediction training loop: batched gradient steps with
//! AdamW, a warmup/linear-decay schedule, deterministic per-step masking,
//! and line-delimited training logs.

use rayon::prelude::*;

use super::{decay_mask, EncoderError, PretrainModel};
use crate::featext::FeatureSequence;
use crate::mixer::example_rng;
use crate::nn::{AdamW, LrSchedule};
use crate::quantizer::BiLabelStream;
use crate::streammask::{build_chunk_mask, sample_mask_spans, ChunkMaskConfig, MaskSpanConfig};

/// One prepared training example: normalized features of the (possibly
/// mixed) audio plus aligned bi-label targets. The single-label objective
/// reads only the primary stream.
#[derive(Debug, Clone)]
pub struct PretrainExample {
    pub features: FeatureSequence,
    pub targets: BiLabelStream,
}

#[derive(Debug, Clone)]
pub struct PretrainHyperparams {
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub mask_config: MaskSpanConfig,
    pub chunk_config: ChunkMaskConfig,
    pub log_every: usize,
    pub seed: u64,
}

impl Default for PretrainHyperparams {
    fn default() -> Self {
        PretrainHyperparams {
            steps: 500,
            batch_size: 8,
            peak_lr: 2e-3,
            warmup_steps: 50,
            weight_decay: 0.01,
            mask_config: MaskSpanConfig::default(),
            chunk_config: ChunkMaskConfig::streaming(4, 2),
            log_every: 25,
            seed: 0,
        }
    }
}

/// One training-log line: step, loss, masked accuracies, learning rate.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogRecord {
    pub step: usize,
    pub loss: f64,
    pub accuracy_primary: f64,
    /// Masked accuracy on frames with a non-blank secondary target; absent
    /// when the batch had none.
    pub accuracy_secondary: Option<f64>,
    pub lr: f64,
}

impl TrainLogRecord {
    /// Tab-separated line; `-` for a missing secondary accuracy.
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.4}\t{}\t{:.6e}",
            self.step,
            self.loss,
            self.accuracy_primary,
            self.accuracy_secondary
                .map(|a| format!("{a:.4}"))
                .unwrap_or_else(|| "-".into()),
            self.lr
        )
    }
}

/// Final masked accuracies measured over every example with a fixed
/// evaluation seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Accuracies {
    pub primary: f64,
    /// Over masked frames whose secondary target is non-blank. For the
    /// single-label objective this probes the only head against the
    /// secondary targets.
    pub secondary_nonblank: Option<f64>,
    /// Secondary-head accuracy over all masked frames including blanks;
    /// present for the bi-label objective.
    pub secondary_all: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct PretrainRun {
    pub log: Vec<TrainLogRecord>,
    pub final_loss: f64,
}

/// Trains the model in place. Batch gradients are evaluated in parallel
/// and reduced in example order, so runs with the same seed are identical
/// regardless of worker count.
pub fn pretrain(
    model: &mut PretrainModel,
    examples: &[PretrainExample],
    hp: &PretrainHyperparams,
) -> Result<PretrainRun, EncoderError> {
    assert!(!examples.is_empty(), "pretrain needs at least one example");
    let schedule = LrSchedule {
        peak_lr: hp.peak_lr,
        warmup_steps: hp.warmup_steps,
        total_steps: hp.steps,
    };
    let mut opt = AdamW::new(model.params.num_scalars(), hp.weight_decay);
    let decay = decay_mask(&model.params);
    let mut log = Vec::new();
    let mut final_loss = f64::NAN;

    for step in 0..hp.steps {
        let mut rng = example_rng(hp.seed, step as u64);
        let batch: Vec<usize> = (0..hp.batch_size)
            .map(|_| rand::Rng::random_range(&mut rng, 0..examples.len()))
            .collect();
        let mask_seeds: Vec<u64> = (0..batch.len())
            .map(|i| (step * hp.batch_size + i) as u64 + 1)
            .collect();

        let model_ref: &PretrainModel = model;
        let results: Vec<Result<super::LossBundle, EncoderError>> = batch
            .par_iter()
            .zip(mask_seeds.par_iter())
            .map(|(&ei, &ms)| {
                let ex = &examples[ei];
                let t_enc = ex.features.num_frames().div_ceil(super::DOWNSAMPLE);
                let attn = build_chunk_mask(t_enc, &hp.chunk_config);
                let mut mrng = example_rng(hp.seed.wrapping_add(0x6d61736b), ms);
                let masked = sample_mask_spans(t_enc, &hp.mask_config, &mut mrng)
                    .map_err(|e| EncoderError::ShapeMismatch(e.to_string()))?;
                model_ref.loss_and_grad(&ex.features, &attn, &masked, &ex.targets)
            })
            .collect();

        let mut grads = vec![0.0f64; model.params.num_scalars()];
        let mut loss_sum = 0.0;
        let (mut pc, mut pt, mut sc, mut st) = (0usize, 0usize, 0usize, 0usize);
        for r in results {
            let b = r?;
            loss_sum += b.loss;
            pc += b.primary_correct;
            pt += b.primary_total;
            sc += b.secondary_correct;
            st += b.secondary_total;
            for (g, x) in grads.iter_mut().zip(&b.grads) {
                *g += x;
            }
        }
        let inv = 1.0 / hp.batch_size as f64;
        for g in grads.iter_mut() {
            *g *= inv;
        }
        let loss = loss_sum * inv;
        if !loss.is_finite() {
            return Err(EncoderError::Numerical(format!(
                "loss diverged at step {step}: {loss}"
            )));
        }
        final_loss = loss;

        let lr = schedule.lr_at(step);
        let mut flat = model.params.flatten();
        opt.step(&mut flat, &grads, lr, &decay);
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(EncoderError::Numerical(format!(
                "parameters diverged at step {step}"
            )));
        }
        model.params.unflatten(&flat);

        if hp.log_every > 0 && (step % hp.log_every == 0 || step + 1 == hp.steps) {
            log.push(TrainLogRecord {
                step,
                loss,
                accuracy_primary: pc as f64 / pt.max(1) as f64,
                accuracy_secondary: (st > 0).then(|| sc as f64 / st as f64),
                lr,
            });
        }
    }
    Ok(PretrainRun { log, final_loss })
}

/// Masked accuracies over all examples with deterministic evaluation
/// masks derived from `eval_seed`.
pub fn evaluate_masked_accuracy(
    model: &PretrainModel,
    examples: &[PretrainExample],
    mask_config: &MaskSpanConfig,
    chunk_config: &ChunkMaskConfig,
    eval_seed: u64,
) -> Result<Accuracies, EncoderError> {
    let (mut pc, mut pt, mut sc, mut st) = (0usize, 0usize, 0usize, 0usize);
    let (mut sac, mut sat) = (0usize, 0usize);
    for (i, ex) in examples.iter().enumerate() {
        let t_enc = ex.features.num_frames().div_ceil(super::DOWNSAMPLE);
        let attn = build_chunk_mask(t_enc, chunk_config);
        let mut mrng = example_rng(eval_seed, i as u64);
        let masked = sample_mask_spans(t_enc, mask_config, &mut mrng)
            .map_err(|e| EncoderError::ShapeMismatch(e.to_string()))?;
        let bundle = model.loss_and_grad(&ex.features, &attn, &masked, &ex.targets)?;
        pc += bundle.primary_correct;
        pt += bundle.primary_total;
        sc += bundle.secondary_correct;
        st += bundle.secondary_total;
        sac += bundle.secondary_all_correct;
        sat += bundle.secondary_all_total;
    }
    Ok(Accuracies {
        primary: pc as f64 / pt.max(1) as f64,
        secondary_nonblank: (st > 0).then(|| sc as f64 / st as f64),
        secondary_all: (sat > 0).then(|| sac as f64 / sat as f64),
    })
}
