//! Streaming transformer encoder with convolutional x4 downsampling, the
//! cosine-similarity masked-prediction head, and the single- and bi-label
//! masked speech prediction losses, all with full gradient support.
//!
//! The conv frontend stacks two kernel-2 stride-2 layers, so encoder frame
//! i depends on exactly feature frames [4i, 4i+4); chunk visibility is
//! then governed entirely by the attention mask, which is what makes the
//! causality contract exact.

mod pretrain;

pub use pretrain::{
    evaluate_masked_accuracy, pretrain, Accuracies, PretrainExample, PretrainHyperparams,
    PretrainRun, TrainLogRecord,
};

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, RngState};
use crate::featext::FeatureSequence;
use crate::nn::{Mat, NodeId, ParamLeaves, ParamSet, Tape};
use crate::quantizer::{BiLabelStream, LabelStream};
use crate::streammask::{AttentionMask, MaskedSet};

/// Downsampling factor of the convolutional frontend.
pub const DOWNSAMPLE: usize = 4;

#[derive(Error, Debug)]
pub enum EncoderError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("label {label} out of range for {max} classes")]
    LabelOutOfRange { label: u32, max: usize },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("checkpoint: {0}")]
    BadCheckpoint(String),
}

/// Architecture of the encoder stack.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub num_layers: usize,
    /// Bottom layers transferred to fine-tuning; the rest form the
    /// pre-training head and are discarded afterwards.
    pub body_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    /// Dimension of the masked-prediction projection and label embeddings.
    pub embed_dim: usize,
    /// Logit scale of the masked-prediction softmax.
    pub gamma: f64,
    /// Relative-position bias clip, in encoder frames.
    pub relpos_clip: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_dim: crate::featext::FRAME_DIM,
            num_layers: 6,
            body_layers: 4,
            model_dim: 128,
            num_heads: 4,
            ff_dim: 512,
            embed_dim: 64,
            gamma: 0.1,
            relpos_clip: 16,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.model_dim % self.num_heads != 0 {
            return Err(EncoderError::ShapeMismatch(format!(
                "model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if self.body_layers > self.num_layers {
            return Err(EncoderError::ShapeMismatch(format!(
                "body_layers {} exceeds num_layers {}",
                self.body_layers, self.num_layers
            )));
        }
        if self.gamma <= 0.0 {
            return Err(EncoderError::ShapeMismatch("gamma must be positive".into()));
        }
        Ok(())
    }

    pub fn head_layers(&self) -> usize {
        self.num_layers - self.body_layers
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

/// The pre-training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Msp,
    Bilabel,
}

impl Objective {
    pub fn as_str(&self) -> &'static str {
        match self {
            Objective::Msp => "msp",
            Objective::Bilabel => "bilabel",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "msp" => Some(Objective::Msp),
            "bilabel" => Some(Objective::Bilabel),
            _ => None,
        }
    }
}

fn normal_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Mat {
    let dist = Normal::new(0.0, std).expect("valid normal");
    Mat::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| dist.sample(rng)).collect(),
    )
}

fn xavier_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    normal_mat(rng, rows, cols, (2.0 / (rows + cols) as f64).sqrt())
}

/// Registers all encoder-stack parameters (conv frontend, `num_layers`
/// transformer layers, final norm) under the given name prefix.
pub(crate) fn push_encoder_params(
    params: &mut ParamSet,
    config: &EncoderConfig,
    num_layers: usize,
    rng: &mut ChaCha8Rng,
) {
    let d = config.model_dim;
    params.push("conv1.w", xavier_mat(rng, 2 * config.input_dim, d));
    params.push("conv1.b", Mat::zeros(1, d));
    params.push("conv2.w", xavier_mat(rng, 2 * d, d));
    params.push("conv2.b", Mat::zeros(1, d));
    // Unit-scale embedding: layer norm removes the scale, and rows with
    // healthy variance keep the normalization well conditioned.
    params.push("mask_emb", normal_mat(rng, 1, d, 1.0));
    for l in 0..num_layers {
        let p = format!("layer{l}");
        params.push(format!("{p}.ln1_g"), Mat::from_vec(1, d, vec![1.0; d]));
        params.push(format!("{p}.ln1_b"), Mat::zeros(1, d));
        params.push(format!("{p}.wq"), xavier_mat(rng, d, d));
        params.push(format!("{p}.bq"), Mat::zeros(1, d));
        params.push(format!("{p}.wk"), xavier_mat(rng, d, d));
        params.push(format!("{p}.bk"), Mat::zeros(1, d));
        params.push(format!("{p}.wv"), xavier_mat(rng, d, d));
        params.push(format!("{p}.bv"), Mat::zeros(1, d));
        params.push(format!("{p}.wo"), xavier_mat(rng, d, d));
        params.push(format!("{p}.bo"), Mat::zeros(1, d));
        params.push(
            format!("{p}.relpos"),
            Mat::zeros(config.num_heads, 2 * config.relpos_clip + 1),
        );
        params.push(format!("{p}.ln2_g"), Mat::from_vec(1, d, vec![1.0; d]));
        params.push(format!("{p}.ln2_b"), Mat::zeros(1, d));
        params.push(format!("{p}.ff_w1"), xavier_mat(rng, d, config.ff_dim));
        params.push(format!("{p}.ff_b1"), Mat::zeros(1, config.ff_dim));
        params.push(format!("{p}.ff_w2"), xavier_mat(rng, config.ff_dim, d));
        params.push(format!("{p}.ff_b2"), Mat::zeros(1, d));
    }
    params.push("final_ln_g", Mat::from_vec(1, d, vec![1.0; d]));
    params.push("final_ln_b", Mat::zeros(1, d));
}

/// Parameter leaves addressable by name on one tape.
pub(crate) struct NetLeaves<'p> {
    params: &'p ParamSet,
    leaves: ParamLeaves,
}

impl<'p> NetLeaves<'p> {
    pub fn new(tape: &mut Tape, params: &'p ParamSet) -> Self {
        let leaves = tape.leaves_for(params);
        NetLeaves { params, leaves }
    }

    pub fn id(&self, name: &str) -> NodeId {
        let idx = self
            .params
            .index_of(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"));
        self.leaves.id(idx)
    }

    pub fn leaves(&self) -> &ParamLeaves {
        &self.leaves
    }
}

fn linear(tape: &mut Tape, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
    let y = tape.matmul(x, w);
    tape.add_row(y, b)
}

fn layer_norm_affine(tape: &mut Tape, x: NodeId, g: NodeId, b: NodeId) -> NodeId {
    let n = tape.layer_norm_rows(x);
    let n = tape.mul_row(n, g);
    tape.add_row(n, b)
}

/// Features as a leaf matrix, zero-padded at the tail to a multiple of 4
/// frames. Returns the padded matrix and the encoder-rate length.
fn features_to_padded(features: &FeatureSequence) -> (Mat, usize) {
    let t = features.num_frames();
    let t_enc = t.div_ceil(DOWNSAMPLE);
    let t_pad = t_enc * DOWNSAMPLE;
    let mut data = features.data().to_vec();
    data.resize(t_pad * features.dim(), 0.0);
    (Mat::from_vec(t_pad, features.dim(), data), t_enc)
}

/// One kernel-2 stride-2 conv layer expressed as gather + linear.
fn conv_downsample(tape: &mut Tape, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
    let rows = tape.value(x).rows;
    debug_assert_eq!(rows % 2, 0);
    let even: Rc<Vec<usize>> = Rc::new((0..rows).step_by(2).collect());
    let odd: Rc<Vec<usize>> = Rc::new((1..rows).step_by(2).collect());
    let a = tape.gather_rows(x, even);
    let c = tape.gather_rows(x, odd);
    let paired = tape.concat_cols(&[a, c]);
    let y = linear(tape, paired, w, b);
    tape.gelu(y)
}

/// Builds the full encoder forward pass on a tape and returns the
/// final-representation node (T' x model_dim).
pub(crate) fn encoder_forward(
    tape: &mut Tape,
    net: &NetLeaves,
    config: &EncoderConfig,
    num_layers: usize,
    features: &FeatureSequence,
    attn: &AttentionMask,
    masked: Option<&MaskedSet>,
) -> Result<NodeId, EncoderError> {
    if features.dim() != config.input_dim {
        return Err(EncoderError::ShapeMismatch(format!(
            "features are {}-dim, encoder expects {}",
            features.dim(),
            config.input_dim
        )));
    }
    let (padded, t_enc) = features_to_padded(features);
    if attn.t_len() != t_enc {
        return Err(EncoderError::ShapeMismatch(format!(
            "attention mask is {} frames, encoder output is {t_enc}",
            attn.t_len()
        )));
    }
    if let Some(m) = masked {
        if let Some(&max) = m.indices().last() {
            if max >= t_enc {
                return Err(EncoderError::ShapeMismatch(format!(
                    "masked index {max} out of range for {t_enc} encoder frames"
                )));
            }
        }
    }

    let x = tape.leaf(padded);
    let x = conv_downsample(tape, x, net.id("conv1.w"), net.id("conv1.b"));
    let mut x = conv_downsample(tape, x, net.id("conv2.w"), net.id("conv2.b"));

    if let Some(m) = masked {
        if !m.is_empty() {
            let idx = Rc::new(m.indices().to_vec());
            x = tape.replace_rows(x, net.id("mask_emb"), idx);
        }
    }

    let allowed: Rc<Vec<bool>> = Rc::new(attn.as_slice().to_vec());
    let dh = config.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    for l in 0..num_layers {
        let p = format!("layer{l}");
        let ln = layer_norm_affine(
            tape,
            x,
            net.id(&format!("{p}.ln1_g")),
            net.id(&format!("{p}.ln1_b")),
        );
        let q = linear(
            tape,
            ln,
            net.id(&format!("{p}.wq")),
            net.id(&format!("{p}.bq")),
        );
        let k = linear(
            tape,
            ln,
            net.id(&format!("{p}.wk")),
            net.id(&format!("{p}.bk")),
        );
        let v = linear(
            tape,
            ln,
            net.id(&format!("{p}.wv")),
            net.id(&format!("{p}.bv")),
        );
        let relpos = net.id(&format!("{p}.relpos"));
        let mut heads = Vec::with_capacity(config.num_heads);
        for h in 0..config.num_heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = tape.slice_cols(q, lo, hi);
            let kh = tape.slice_cols(k, lo, hi);
            let vh = tape.slice_cols(v, lo, hi);
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt);
            let scores = tape.scale(scores, scale);
            let table = tape.gather_rows(relpos, Rc::new(vec![h]));
            let bias = tape.rel_pos_bias(table, t_enc, config.relpos_clip);
            let scores = tape.add(scores, bias);
            let probs = tape.softmax_rows_masked(scores, allowed.clone());
            heads.push(tape.matmul(probs, vh));
        }
        let ctx = tape.concat_cols(&heads);
        let attn_out = linear(
            tape,
            ctx,
            net.id(&format!("{p}.wo")),
            net.id(&format!("{p}.bo")),
        );
        x = tape.add(x, attn_out);

        let ln2 = layer_norm_affine(
            tape,
            x,
            net.id(&format!("{p}.ln2_g")),
            net.id(&format!("{p}.ln2_b")),
        );
        let f1 = linear(
            tape,
            ln2,
            net.id(&format!("{p}.ff_w1")),
            net.id(&format!("{p}.ff_b1")),
        );
        let f1 = tape.gelu(f1);
        let f2 = linear(
            tape,
            f1,
            net.id(&format!("{p}.ff_w2")),
            net.id(&format!("{p}.ff_b2")),
        );
        x = tape.add(x, f2);
    }
    Ok(layer_norm_affine(
        tape,
        x,
        net.id("final_ln_g"),
        net.id("final_ln_b"),
    ))
}

/// Cosine-similarity head distribution over the masked-prediction classes:
/// softmax of cos(o W^P, e_c) / gamma.
pub fn msp_distribution(o: &[f64], proj: &Mat, emb: &Mat, gamma: f64) -> Vec<f64> {
    assert_eq!(o.len(), proj.rows, "representation dim mismatch");
    let eps = 1e-8;
    let mut p = vec![0.0f64; proj.cols];
    for (r, &ov) in o.iter().enumerate() {
        for c in 0..proj.cols {
            p[c] += ov * proj.at(r, c);
        }
    }
    let pn = (p.iter().map(|x| x * x).sum::<f64>() + eps * eps).sqrt();
    let mut logits = Vec::with_capacity(emb.rows);
    for c in 0..emb.rows {
        let e = emb.row(c);
        let en = (e.iter().map(|x| x * x).sum::<f64>() + eps * eps).sqrt();
        let dot: f64 = e.iter().zip(&p).map(|(a, b)| a * b).sum();
        logits.push(dot / (pn * en) / gamma);
    }
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for l in logits.iter_mut() {
        *l = (*l - mx).exp();
        sum += *l;
    }
    for l in logits.iter_mut() {
        *l /= sum;
    }
    logits
}

/// Sum of -log p over rows; 0 exactly when every row puts probability 1 on
/// its target class.
pub fn nll_sum(prob_rows: &[Vec<f64>], targets: &[usize]) -> f64 {
    assert_eq!(prob_rows.len(), targets.len());
    prob_rows
        .iter()
        .zip(targets)
        .map(|(p, &t)| -p[t].ln())
        .sum()
}

/// A masked-prediction loss value; `empty_masked_set` flags the degenerate
/// case where the loss is defined as 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MspLoss {
    pub value: f64,
    pub empty_masked_set: bool,
}

/// Per-batch gradient bundle with the masked-accuracy tallies used for
/// training logs.
pub(crate) struct LossBundle {
    pub loss: f64,
    pub grads: Vec<f64>,
    pub primary_correct: usize,
    pub primary_total: usize,
    /// Secondary-head hits on masked frames with a non-blank target (for
    /// the single-label objective: the primary head probed against them).
    pub secondary_correct: usize,
    pub secondary_total: usize,
    /// Secondary-head hits over every masked frame, blanks included.
    /// Meaningful for the bi-label objective only.
    pub secondary_all_correct: usize,
    pub secondary_all_total: usize,
}

/// Encoder plus masked-prediction heads, trained by `pretrain`.
pub struct PretrainModel {
    pub config: EncoderConfig,
    pub num_classes: usize,
    pub objective: Objective,
    pub params: ParamSet,
}

impl PretrainModel {
    pub fn new(
        config: EncoderConfig,
        num_classes: usize,
        objective: Objective,
        seed: u64,
    ) -> Result<Self, EncoderError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        push_encoder_params(&mut params, &config, config.num_layers, &mut rng);
        // Label embeddings at unit scale: the cosine head is invariant to
        // their magnitude, and longer rows keep its normalization tame.
        params.push(
            "msp_pr.proj",
            xavier_mat(&mut rng, config.model_dim, config.embed_dim),
        );
        params.push(
            "msp_pr.emb",
            normal_mat(&mut rng, num_classes, config.embed_dim, 1.0),
        );
        params.push(
            "msp_sc.proj",
            xavier_mat(&mut rng, config.model_dim, config.embed_dim),
        );
        params.push(
            "msp_sc.emb",
            normal_mat(&mut rng, num_classes + 1, config.embed_dim, 1.0),
        );
        Ok(PretrainModel {
            config,
            num_classes,
            objective,
            params,
        })
    }

    /// Forward pass: masked frames replaced by the learned mask embedding,
    /// then the chunk-masked transformer stack. Returns T' x model_dim.
    pub fn encode(
        &self,
        features: &FeatureSequence,
        attn: &AttentionMask,
        masked: &MaskedSet,
    ) -> Result<Mat, EncoderError> {
        let mut tape = Tape::new();
        let net = NetLeaves::new(&mut tape, &self.params);
        let out = encoder_forward(
            &mut tape,
            &net,
            &self.config,
            self.config.num_layers,
            features,
            attn,
            Some(masked),
        )?;
        Ok(tape.value(out).clone())
    }

    fn head_mats(&self, primary: bool) -> (&Mat, &Mat) {
        let prefix = if primary { "msp_pr" } else { "msp_sc" };
        let proj = self
            .params
            .get(self.params.index_of(&format!("{prefix}.proj")).unwrap());
        let emb = self
            .params
            .get(self.params.index_of(&format!("{prefix}.emb")).unwrap());
        (proj, emb)
    }

    /// Distribution of the primary head at one output frame.
    pub fn primary_distribution(&self, o: &[f64]) -> Vec<f64> {
        let (proj, emb) = self.head_mats(true);
        msp_distribution(o, proj, emb, self.config.gamma)
    }

    /// Distribution of the secondary head (class 0 is blank).
    pub fn secondary_distribution(&self, o: &[f64]) -> Vec<f64> {
        let (proj, emb) = self.head_mats(false);
        msp_distribution(o, proj, emb, self.config.gamma)
    }

    fn primary_classes(
        &self,
        labels: &LabelStream,
        masked: &MaskedSet,
    ) -> Result<Vec<usize>, EncoderError> {
        masked
            .indices()
            .iter()
            .map(|&t| {
                let l = *labels.labels().get(t).ok_or_else(|| {
                    EncoderError::ShapeMismatch(format!(
                        "label stream has {} frames, masked index {t}",
                        labels.len()
                    ))
                })?;
                if l < 1 || l as usize > self.num_classes {
                    return Err(EncoderError::LabelOutOfRange {
                        label: l,
                        max: self.num_classes,
                    });
                }
                Ok(l as usize - 1)
            })
            .collect()
    }

    fn secondary_classes(
        &self,
        targets: &BiLabelStream,
        masked: &MaskedSet,
    ) -> Result<Vec<usize>, EncoderError> {
        masked
            .indices()
            .iter()
            .map(|&t| {
                let l = *targets.secondary.get(t).ok_or_else(|| {
                    EncoderError::ShapeMismatch(format!(
                        "secondary stream has {} frames, masked index {t}",
                        targets.secondary.len()
                    ))
                })?;
                if l as usize > self.num_classes {
                    return Err(EncoderError::LabelOutOfRange {
                        label: l,
                        max: self.num_classes + 1,
                    });
                }
                Ok(l as usize)
            })
            .collect()
    }

    /// Single-label masked prediction loss: sum over masked frames of
    /// -log p(label | o_t) under the primary head. Direct evaluation;
    /// the training path has its own tape route and is cross-checked
    /// against this one in tests.
    pub fn msp_loss(
        &self,
        features: &FeatureSequence,
        attn: &AttentionMask,
        masked: &MaskedSet,
        labels: &LabelStream,
    ) -> Result<MspLoss, EncoderError> {
        if masked.is_empty() {
            return Ok(MspLoss {
                value: 0.0,
                empty_masked_set: true,
            });
        }
        let out = self.encode(features, attn, masked)?;
        let classes = self.primary_classes(labels, masked)?;
        let rows: Vec<Vec<f64>> = masked
            .indices()
            .iter()
            .map(|&t| self.primary_distribution(out.row(t)))
            .collect();
        Ok(MspLoss {
            value: nll_sum(&rows, &classes),
            empty_masked_set: false,
        })
    }

    /// Bi-label loss: the primary-head and secondary-head cross-entropies
    /// summed over masked frames.
    pub fn bilabel_msp_loss(
        &self,
        features: &FeatureSequence,
        attn: &AttentionMask,
        masked: &MaskedSet,
        targets: &BiLabelStream,
    ) -> Result<MspLoss, EncoderError> {
        if masked.is_empty() {
            return Ok(MspLoss {
                value: 0.0,
                empty_masked_set: true,
            });
        }
        let out = self.encode(features, attn, masked)?;
        let pr = self.primary_classes(&targets.primary, masked)?;
        let sc = self.secondary_classes(targets, masked)?;
        let pr_rows: Vec<Vec<f64>> = masked
            .indices()
            .iter()
            .map(|&t| self.primary_distribution(out.row(t)))
            .collect();
        let sc_rows: Vec<Vec<f64>> = masked
            .indices()
            .iter()
            .map(|&t| self.secondary_distribution(out.row(t)))
            .collect();
        Ok(MspLoss {
            value: nll_sum(&pr_rows, &pr) + nll_sum(&sc_rows, &sc),
            empty_masked_set: false,
        })
    }

    fn head_loss_on_tape(
        &self,
        tape: &mut Tape,
        net: &NetLeaves,
        out: NodeId,
        masked: &MaskedSet,
        classes: Vec<usize>,
        primary: bool,
    ) -> NodeId {
        let prefix = if primary { "msp_pr" } else { "msp_sc" };
        let idx = Rc::new(masked.indices().to_vec());
        let gathered = tape.gather_rows(out, idx);
        let proj = tape.matmul(gathered, net.id(&format!("{prefix}.proj")));
        let pn = tape.l2_normalize_rows(proj);
        let en = tape.l2_normalize_rows(net.id(&format!("{prefix}.emb")));
        let ent = tape.transpose(en);
        let sims = tape.matmul(pn, ent);
        let logits = tape.scale(sims, 1.0 / self.config.gamma);
        let logp = tape.log_softmax_rows(logits);
        tape.nll(logp, Rc::new(classes))
    }

    /// Builds the full training tape: encoder forward plus the objective's
    /// head losses. Returns the tape, the parameter leaves, the output
    /// node and the loss node.
    fn loss_tape(
        &self,
        features: &FeatureSequence,
        attn: &AttentionMask,
        masked: &MaskedSet,
        targets: &BiLabelStream,
    ) -> Result<(Tape, NetLeaves<'_>, NodeId, NodeId), EncoderError> {
        let mut tape = Tape::new();
        let net = NetLeaves::new(&mut tape, &self.params);
        let out = encoder_forward(
            &mut tape,
            &net,
            &self.config,
            self.config.num_layers,
            features,
            attn,
            Some(masked),
        )?;
        let pr_classes = self.primary_classes(&targets.primary, masked)?;
        let pr_loss = self.head_loss_on_tape(&mut tape, &net, out, masked, pr_classes, true);
        let loss = match self.objective {
            Objective::Msp => pr_loss,
            Objective::Bilabel => {
                let sc_classes = self.secondary_classes(targets, masked)?;
                let sc_loss =
                    self.head_loss_on_tape(&mut tape, &net, out, masked, sc_classes, false);
                tape.add(pr_loss, sc_loss)
            }
        };
        let loss_value = tape.value(loss).data[0];
        if !loss_value.is_finite() {
            return Err(EncoderError::Numerical(format!("loss is {loss_value}")));
        }
        Ok((tape, net, out, loss))
    }

    /// Training-route loss value (tape forward only); the route gradient
    /// checks differentiate.
    pub fn training_loss(
        &self,
        features: &FeatureSequence,
        attn: &AttentionMask,
        masked: &MaskedSet,
        targets: &BiLabelStream,
    ) -> Result<f64, EncoderError> {
        let (tape, _, _, loss) = self.loss_tape(features, attn, masked, targets)?;
        Ok(tape.value(loss).data[0])
    }

    /// Training-route loss and its gradient w.r.t. every parameter, in
    /// `ParamSet::flatten` layout.
    pub fn training_loss_and_grad(
        &self,
        features: &FeatureSequence,
        attn: &AttentionMask,
        masked: &MaskedSet,
        targets: &BiLabelStream,
    ) -> Result<(f64, Vec<f64>), EncoderError> {
        let (mut tape, net, _, loss) = self.loss_tape(features, attn, masked, targets)?;
        let loss_value = tape.value(loss).data[0];
        tape.backward(loss);
        let mut grads = vec![0.0f64; self.params.num_scalars()];
        tape.accumulate_param_grads(net.leaves(), &mut grads);
        Ok((loss_value, grads))
    }

    /// Training-path loss and gradient w.r.t. every parameter, plus the
    /// masked-accuracy tallies. The secondary tally counts only frames
    /// whose secondary target is non-blank; for the single-label
    /// objective the primary head is probed against those targets.
    pub(crate) fn loss_and_grad(
        &self,
        features: &FeatureSequence,
        attn: &AttentionMask,
        masked: &MaskedSet,
        targets: &BiLabelStream,
    ) -> Result<LossBundle, EncoderError> {
        let (mut tape, net, out, loss) = self.loss_tape(features, attn, masked, targets)?;
        let loss_value = tape.value(loss).data[0];
        let pr_classes = self.primary_classes(&targets.primary, masked)?;
        tape.backward(loss);
        let mut grads = vec![0.0f64; self.params.num_scalars()];
        tape.accumulate_param_grads(net.leaves(), &mut grads);

        // Accuracy tallies from the tape's final representations.
        let rep = tape.value(out).clone();
        let sc_targets = self.secondary_classes(targets, masked)?;
        let mut bundle = LossBundle {
            loss: loss_value,
            grads,
            primary_correct: 0,
            primary_total: masked.len(),
            secondary_correct: 0,
            secondary_total: 0,
            secondary_all_correct: 0,
            secondary_all_total: 0,
        };
        for (slot, &t) in masked.indices().iter().enumerate() {
            let row = rep.row(t);
            let pr = self.primary_distribution(row);
            if argmax(&pr) == pr_classes[slot] {
                bundle.primary_correct += 1;
            }
            let sc_class = sc_targets[slot];
            if self.objective == Objective::Bilabel {
                bundle.secondary_all_total += 1;
                if argmax(&self.secondary_distribution(row)) == sc_class {
                    bundle.secondary_all_correct += 1;
                }
            }
            if sc_class != 0 {
                bundle.secondary_total += 1;
                let hit = match self.objective {
                    Objective::Bilabel => argmax(&self.secondary_distribution(row)) == sc_class,
                    // Probe: the single head's C classes against the
                    // secondary label (1-based label -> class label-1).
                    Objective::Msp => argmax(&pr) == sc_class - 1,
                };
                if hit {
                    bundle.secondary_correct += 1;
                }
            }
        }
        Ok(bundle)
    }

    pub fn to_checkpoint(&self, rng: RngState) -> Checkpoint {
        let c = &self.config;
        let config = vec![
            ("kind".into(), "pretrain".into()),
            ("input_dim".into(), c.input_dim.to_string()),
            ("num_layers".into(), c.num_layers.to_string()),
            ("body_layers".into(), c.body_layers.to_string()),
            ("model_dim".into(), c.model_dim.to_string()),
            ("num_heads".into(), c.num_heads.to_string()),
            ("ff_dim".into(), c.ff_dim.to_string()),
            ("embed_dim".into(), c.embed_dim.to_string()),
            ("gamma".into(), format!("{:e}", c.gamma)),
            ("relpos_clip".into(), c.relpos_clip.to_string()),
            ("num_classes".into(), self.num_classes.to_string()),
            ("objective".into(), self.objective.as_str().into()),
        ];
        Checkpoint::from_params(config, &self.params, rng)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, EncoderError> {
        let get = |k: &str| {
            ck.config_value(k)
                .ok_or_else(|| EncoderError::BadCheckpoint(format!("missing config key {k}")))
        };
        let parse_usize = |k: &str| -> Result<usize, EncoderError> {
            get(k)?
                .parse()
                .map_err(|_| EncoderError::BadCheckpoint(format!("bad value for {k}")))
        };
        let config = EncoderConfig {
            input_dim: parse_usize("input_dim")?,
            num_layers: parse_usize("num_layers")?,
            body_layers: parse_usize("body_layers")?,
            model_dim: parse_usize("model_dim")?,
            num_heads: parse_usize("num_heads")?,
            ff_dim: parse_usize("ff_dim")?,
            embed_dim: parse_usize("embed_dim")?,
            gamma: get("gamma")?
                .parse()
                .map_err(|_| EncoderError::BadCheckpoint("bad gamma".into()))?,
            relpos_clip: parse_usize("relpos_clip")?,
        };
        let num_classes = parse_usize("num_classes")?;
        let objective = Objective::parse(get("objective")?)
            .ok_or_else(|| EncoderError::BadCheckpoint("bad objective".into()))?;
        let mut model = PretrainModel::new(config, num_classes, objective, 0)?;
        for i in 0..model.params.len() {
            let name = model.params.name(i).to_string();
            let src = ck
                .tensor(&name)
                .ok_or_else(|| EncoderError::BadCheckpoint(format!("missing tensor {name}")))?;
            if src.shape() != model.params.get(i).shape() {
                return Err(EncoderError::BadCheckpoint(format!(
                    "tensor {name} shape mismatch"
                )));
            }
            *model.params.get_mut(i) = src.clone();
        }
        Ok(model)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Weight-decay mask in flat layout: matrices decay, 1-row vectors
/// (biases, norm gains, embeddings of size one) do not.
pub(crate) fn decay_mask(params: &ParamSet) -> Vec<bool> {
    let mut out = Vec::with_capacity(params.num_scalars());
    for (_, m) in params.iter() {
        let decay = m.rows > 1;
        out.extend(std::iter::repeat_n(decay, m.data.len()));
    }
    out
}
