//! Transformer-transducer fine-tuning and greedy streaming decoding over
//! the t-SOT vocabulary: a 2-layer LSTM prediction network, an additive
//! joint network, and the RNN-T loss from `loss`.

pub mod loss;

pub use loss::{
    rnnt_grad, rnnt_loss, rnnt_trellis, RnntLogProbs, RnntTapeOp, TransducerError,
    TransducerTrellis,
};

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use thiserror::Error;

use crate::checkpoint::{Checkpoint, RngState};
use crate::encoder::{
    encoder_forward, push_encoder_params, EncoderConfig, EncoderError, NetLeaves,
};
use crate::featext::FeatureSequence;
use crate::mixer::example_rng;
use crate::nn::{sigmoid, AdamW, LrSchedule, Mat, NodeId, ParamSet, Tape};
use crate::streammask::{build_chunk_mask, AttentionMask, ChunkMaskConfig};
use crate::tsot::{SerializedTranscript, CC_TOKEN};

/// Emission cap per encoder frame during greedy decoding.
pub const MAX_EMISSIONS_PER_FRAME: usize = 8;

#[derive(Error, Debug)]
pub enum FinetuneError {
    #[error(transparent)]
    Transducer(#[from] TransducerError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("checkpoint: {0}")]
    BadCheckpoint(String),
}

/// Token inventory; id 0 is the reserved transducer blank, real tokens are
/// 1-based. `<cc>` is an ordinary vocabulary token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
}

impl Vocab {
    pub const BLANK: usize = 0;

    /// Builds a sorted vocabulary from corpus tokens, always including the
    /// channel-change token.
    pub fn from_tokens<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v: Vec<String> = tokens.into_iter().map(|t| t.to_string()).collect();
        v.push(CC_TOKEN.to_string());
        v.sort_unstable();
        v.dedup();
        Vocab { tokens: v }
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    /// Vocabulary plus blank.
    pub fn num_symbols(&self) -> usize {
        self.tokens.len() + 1
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.tokens
            .binary_search_by(|t| t.as_str().cmp(token))
            .ok()
            .map(|i| i + 1)
    }

    pub fn token_of(&self, id: usize) -> &str {
        &self.tokens[id - 1]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, tokens: &[String]) -> Result<Vec<usize>, TransducerError> {
        tokens
            .iter()
            .map(|t| {
                self.id_of(t).ok_or_else(|| {
                    TransducerError::VocabMismatch(format!("token {t:?} not in vocabulary"))
                })
            })
            .collect()
    }
}

/// Transducer architecture on top of the transferred encoder body.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TtConfig {
    pub encoder: EncoderConfig,
    pub pred_embed: usize,
    pub pred_hidden: usize,
    pub joint_dim: usize,
}

impl TtConfig {
    pub fn desk_default(encoder: EncoderConfig) -> Self {
        TtConfig {
            encoder,
            pred_embed: 64,
            pred_hidden: 128,
            joint_dim: 64,
        }
    }
}

/// Prediction-network state: hidden and cell vectors for both LSTM layers.
#[derive(Debug, Clone, PartialEq)]
pub struct PredState {
    h: [Vec<f64>; 2],
    c: [Vec<f64>; 2],
}

/// The transformer transducer: frozen conv frontend, trainable encoder
/// body, prediction network and joint network.
pub struct TtModel {
    pub config: TtConfig,
    pub vocab: Vocab,
    pub params: ParamSet,
}

/// Parameter-name prefixes excluded from fine-tuning updates.
pub const FROZEN_PREFIXES: [&str; 2] = ["conv1.", "conv2."];

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

impl TtModel {
    /// Fresh random model (the zero-pretraining baseline).
    pub fn new(config: TtConfig, vocab: Vocab, seed: u64) -> Result<Self, FinetuneError> {
        config.encoder.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        push_encoder_params(
            &mut params,
            &config.encoder,
            config.encoder.num_layers,
            &mut rng,
        );
        let (e, h, j) = (config.pred_embed, config.pred_hidden, config.joint_dim);
        params.push(
            "pred.emb",
            normal_mat(&mut rng, vocab.num_symbols(), e, 0.1),
        );
        params.push("pred.l0.wih", xavier_mat(&mut rng, e, 4 * h));
        params.push("pred.l0.whh", xavier_mat(&mut rng, h, 4 * h));
        params.push("pred.l0.b", Mat::zeros(1, 4 * h));
        params.push("pred.l1.wih", xavier_mat(&mut rng, h, 4 * h));
        params.push("pred.l1.whh", xavier_mat(&mut rng, h, 4 * h));
        params.push("pred.l1.b", Mat::zeros(1, 4 * h));
        params.push(
            "joint.enc_w",
            xavier_mat(&mut rng, config.encoder.model_dim, j),
        );
        params.push("joint.enc_b", Mat::zeros(1, j));
        params.push("joint.pred_w", xavier_mat(&mut rng, h, j));
        params.push("joint.pred_b", Mat::zeros(1, j));
        params.push("joint.out_w", xavier_mat(&mut rng, j, vocab.num_symbols()));
        params.push("joint.out_b", Mat::zeros(1, vocab.num_symbols()));
        Ok(TtModel {
            config,
            vocab,
            params,
        })
    }

    /// Initializes from a pre-training checkpoint: the conv frontend and
    /// the body layers transfer; the pre-training head layers and MSP
    /// heads are discarded; prediction and joint networks start fresh.
    pub fn from_pretrained(
        ck: &Checkpoint,
        tt: TtConfig,
        vocab: Vocab,
        seed: u64,
    ) -> Result<Self, FinetuneError> {
        let body_layers: usize = ck
            .config_value("body_layers")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| FinetuneError::BadCheckpoint("missing body_layers".into()))?;
        if tt.encoder.num_layers != body_layers {
            return Err(FinetuneError::BadCheckpoint(format!(
                "transducer encoder has {} layers but the checkpoint transfers {body_layers}",
                tt.encoder.num_layers
            )));
        }
        let mut model = TtModel::new(tt, vocab, seed)?;
        for i in 0..model.params.len() {
            let name = model.params.name(i).to_string();
            let transferable = name.starts_with("conv1.")
                || name.starts_with("conv2.")
                || name.starts_with("mask_emb")
                || name.starts_with("layer");
            if !transferable {
                continue;
            }
            let src = ck.tensor(&name).ok_or_else(|| {
                FinetuneError::BadCheckpoint(format!("checkpoint missing tensor {name}"))
            })?;
            if src.shape() != model.params.get(i).shape() {
                return Err(FinetuneError::BadCheckpoint(format!(
                    "tensor {name} shape mismatch"
                )));
            }
            *model.params.get_mut(i) = src.clone();
        }
        Ok(model)
    }

    fn p(&self, name: &str) -> &Mat {
        self.params.get(
            self.params
                .index_of(name)
                .unwrap_or_else(|| panic!("missing {name}")),
        )
    }

    /// Encoder forward without masked-frame replacement.
    pub fn encode(
        &self,
        features: &FeatureSequence,
        attn: &AttentionMask,
    ) -> Result<Mat, FinetuneError> {
        let mut tape = Tape::new();
        let net = NetLeaves::new(&mut tape, &self.params);
        let out = encoder_forward(
            &mut tape,
            &net,
            &self.config.encoder,
            self.config.encoder.num_layers,
            features,
            attn,
            None,
        )?;
        Ok(tape.value(out).clone())
    }

    fn zero_state(&self) -> PredState {
        let h = self.config.pred_hidden;
        PredState {
            h: [vec![0.0; h], vec![0.0; h]],
            c: [vec![0.0; h], vec![0.0; h]],
        }
    }

    /// Prediction state before any emission: one LSTM step on the start
    /// (blank) symbol, matching the training lattice's u = 0 state.
    pub fn start_state(&self) -> PredState {
        self.pred_step(&self.zero_state(), Vocab::BLANK)
    }

    /// One plain-math LSTM step over both layers; `token_id` 0 is the
    /// start/blank symbol.
    pub fn pred_step(&self, state: &PredState, token_id: usize) -> PredState {
        let h = self.config.pred_hidden;
        let emb = self.p("pred.emb");
        let mut x: Vec<f64> = emb.row(token_id).to_vec();
        let mut out = state.clone();
        for layer in 0..2 {
            let prefix = format!("pred.l{layer}");
            let wih = self.p(&format!("{prefix}.wih"));
            let whh = self.p(&format!("{prefix}.whh"));
            let b = self.p(&format!("{prefix}.b"));
            let mut gates = b.row(0).to_vec();
            for (r, &xv) in x.iter().enumerate() {
                if xv != 0.0 {
                    for (g, &w) in gates.iter_mut().zip(wih.row(r)) {
                        *g += xv * w;
                    }
                }
            }
            for (r, &hv) in state.h[layer].iter().enumerate() {
                if hv != 0.0 {
                    for (g, &w) in gates.iter_mut().zip(whh.row(r)) {
                        *g += hv * w;
                    }
                }
            }
            let mut new_h = vec![0.0; h];
            let mut new_c = vec![0.0; h];
            for k in 0..h {
                let i = sigmoid(gates[k]);
                let f = sigmoid(gates[h + k]);
                let g = gates[2 * h + k].tanh();
                let o = sigmoid(gates[3 * h + k]);
                new_c[k] = f * state.c[layer][k] + i * g;
                new_h[k] = o * new_c[k].tanh();
            }
            x = new_h.clone();
            out.h[layer] = new_h;
            out.c[layer] = new_c;
        }
        out
    }

    /// Joint-network logits over V+1 symbols for one (encoder frame,
    /// prediction state) pair.
    pub fn joint_logits(&self, enc_frame: &[f64], state: &PredState) -> Vec<f64> {
        let j = self.config.joint_dim;
        let mut acc = self.p("joint.enc_b").row(0).to_vec();
        let enc_w = self.p("joint.enc_w");
        for (r, &x) in enc_frame.iter().enumerate() {
            if x != 0.0 {
                for (a, &w) in acc.iter_mut().zip(enc_w.row(r)) {
                    *a += x * w;
                }
            }
        }
        let pred_w = self.p("joint.pred_w");
        let pred_b = self.p("joint.pred_b");
        for (a, &b) in acc.iter_mut().zip(pred_b.row(0)) {
            *a += b;
        }
        for (r, &x) in state.h[1].iter().enumerate() {
            if x != 0.0 {
                for (a, &w) in acc.iter_mut().zip(pred_w.row(r)) {
                    *a += x * w;
                }
            }
        }
        for a in acc.iter_mut() {
            *a = a.tanh();
        }
        let out_w = self.p("joint.out_w");
        let mut logits = self.p("joint.out_b").row(0).to_vec();
        for r in 0..j {
            let x = acc[r];
            if x != 0.0 {
                for (l, &w) in logits.iter_mut().zip(out_w.row(r)) {
                    *l += x * w;
                }
            }
        }
        logits
    }

    /// Tape forward producing the per-cell log-probability node for the
    /// RNN-T loss: encoder output x prediction states through the joint.
    fn logprobs_on_tape(
        &self,
        tape: &mut Tape,
        net: &NetLeaves,
        features: &FeatureSequence,
        attn: &AttentionMask,
        target_ids: &[usize],
    ) -> Result<(NodeId, usize, usize), FinetuneError> {
        let enc_out = encoder_forward(
            tape,
            net,
            &self.config.encoder,
            self.config.encoder.num_layers,
            features,
            attn,
            None,
        )?;
        let t_len = tape.value(enc_out).rows;

        // Prediction inputs: start symbol then the target prefix.
        let mut ids: Vec<usize> = Vec::with_capacity(target_ids.len() + 1);
        ids.push(Vocab::BLANK);
        ids.extend_from_slice(target_ids);
        let emb = tape.gather_rows(net.id("pred.emb"), Rc::new(ids));
        let h = self.config.pred_hidden;
        let zero = tape.leaf(Mat::zeros(1, h));
        let mut states = Vec::with_capacity(target_ids.len() + 1);
        let mut hc = [(zero, zero), (zero, zero)];
        for u in 0..=target_ids.len() {
            let mut x = tape.gather_rows(emb, Rc::new(vec![u]));
            for layer in 0..2 {
                let prefix = format!("pred.l{layer}");
                let xg = tape.matmul(x, net.id(&format!("{prefix}.wih")));
                let hg = tape.matmul(hc[layer].0, net.id(&format!("{prefix}.whh")));
                let gates = tape.add(xg, hg);
                let gates = tape.add_row(gates, net.id(&format!("{prefix}.b")));
                let i_raw = tape.slice_cols(gates, 0, h);
                let f_raw = tape.slice_cols(gates, h, 2 * h);
                let g_raw = tape.slice_cols(gates, 2 * h, 3 * h);
                let o_raw = tape.slice_cols(gates, 3 * h, 4 * h);
                let i = tape.sigmoid(i_raw);
                let f = tape.sigmoid(f_raw);
                let g = tape.tanh(g_raw);
                let o = tape.sigmoid(o_raw);
                let fc = tape.mul(f, hc[layer].1);
                let ig = tape.mul(i, g);
                let c = tape.add(fc, ig);
                let ct = tape.tanh(c);
                let h_out = tape.mul(o, ct);
                hc[layer] = (h_out, c);
                x = h_out;
            }
            states.push(hc[1].0);
        }
        let pred_out = tape.concat_rows(&states);

        let enc_proj = tape.matmul(enc_out, net.id("joint.enc_w"));
        let enc_proj = tape.add_row(enc_proj, net.id("joint.enc_b"));
        let pred_proj = tape.matmul(pred_out, net.id("joint.pred_w"));
        let pred_proj = tape.add_row(pred_proj, net.id("joint.pred_b"));
        let cross = tape.cross_add_rows(enc_proj, pred_proj);
        let act = tape.tanh(cross);
        let logits = tape.matmul(act, net.id("joint.out_w"));
        let logits = tape.add_row(logits, net.id("joint.out_b"));
        let logp = tape.log_softmax_rows(logits);
        Ok((logp, t_len, target_ids.len() + 1))
    }

    /// RNN-T loss of one example (sum over alignments, negative log).
    pub fn example_loss(
        &self,
        features: &FeatureSequence,
        attn: &AttentionMask,
        target_ids: &[usize],
    ) -> Result<f64, FinetuneError> {
        let mut tape = Tape::new();
        let net = NetLeaves::new(&mut tape, &self.params);
        let (logp, t_len, u_len) =
            self.logprobs_on_tape(&mut tape, &net, features, attn, target_ids)?;
        let lp = RnntLogProbs::from_mat(tape.value(logp), t_len, u_len);
        Ok(rnnt_loss(&lp, target_ids, Vocab::BLANK)?)
    }

    fn example_loss_and_grad(
        &self,
        features: &FeatureSequence,
        attn: &AttentionMask,
        target_ids: &[usize],
    ) -> Result<(f64, Vec<f64>), FinetuneError> {
        let mut tape = Tape::new();
        let net = NetLeaves::new(&mut tape, &self.params);
        let (logp, t_len, u_len) =
            self.logprobs_on_tape(&mut tape, &net, features, attn, target_ids)?;
        let lp = RnntLogProbs::from_mat(tape.value(logp), t_len, u_len);
        let loss_value = rnnt_loss(&lp, target_ids, Vocab::BLANK)?;
        let op = RnntTapeOp {
            t_len,
            u_len,
            target: target_ids.to_vec(),
            blank: Vocab::BLANK,
        };
        let loss = tape.custom(&[logp], Mat::from_vec(1, 1, vec![loss_value]), Rc::new(op));
        tape.backward(loss);
        let mut grads = vec![0.0f64; self.params.num_scalars()];
        tape.accumulate_param_grads(net.leaves(), &mut grads);
        Ok((loss_value, grads))
    }

    /// Greedy decode over encoder outputs arriving chunk by chunk. Per
    /// frame: emit argmax tokens until blank wins, advancing the
    /// prediction state, capped at `MAX_EMISSIONS_PER_FRAME`.
    pub fn greedy_streaming_decode(&self, chunks: impl IntoIterator<Item = Mat>) -> DecodeOutcome {
        let mut tokens: Vec<String> = Vec::new();
        let mut state = self.start_state();
        let mut frames = 0usize;
        let mut per_chunk = Vec::new();
        let mut cap_hits = 0usize;
        for chunk in chunks {
            let mut emitted_here = 0usize;
            for r in 0..chunk.rows {
                let frame = chunk.row(r);
                frames += 1;
                let mut emissions = 0usize;
                loop {
                    let logits = self.joint_logits(frame, &state);
                    let k = crate::encoder::argmax(&logits);
                    if k == Vocab::BLANK {
                        break;
                    }
                    tokens.push(self.vocab.token_of(k).to_string());
                    state = self.pred_step(&state, k);
                    emissions += 1;
                    emitted_here += 1;
                    if emissions >= MAX_EMISSIONS_PER_FRAME {
                        cap_hits += 1;
                        break;
                    }
                }
            }
            per_chunk.push(emitted_here);
        }
        DecodeOutcome {
            transcript: SerializedTranscript::from_tokens(tokens),
            frames_consumed: frames,
            emissions_per_chunk: per_chunk,
            cap_hits,
        }
    }

    /// Full-sequence decode, processed in chunk-sized groups.
    pub fn greedy_decode(&self, encoder_out: &Mat, chunk_size: usize) -> DecodeOutcome {
        let chunks: Vec<Mat> = (0..encoder_out.rows)
            .step_by(chunk_size.max(1))
            .map(|start| {
                let end = (start + chunk_size.max(1)).min(encoder_out.rows);
                let mut m = Mat::zeros(end - start, encoder_out.cols);
                for r in start..end {
                    m.row_mut(r - start).copy_from_slice(encoder_out.row(r));
                }
                m
            })
            .collect();
        self.greedy_streaming_decode(chunks)
    }

    pub fn to_checkpoint(&self, rng: RngState) -> Checkpoint {
        let e = &self.config.encoder;
        let config = vec![
            ("kind".into(), "transducer".into()),
            ("input_dim".into(), e.input_dim.to_string()),
            ("num_layers".into(), e.num_layers.to_string()),
            ("body_layers".into(), e.body_layers.to_string()),
            ("model_dim".into(), e.model_dim.to_string()),
            ("num_heads".into(), e.num_heads.to_string()),
            ("ff_dim".into(), e.ff_dim.to_string()),
            ("embed_dim".into(), e.embed_dim.to_string()),
            ("gamma".into(), format!("{:e}", e.gamma)),
            ("relpos_clip".into(), e.relpos_clip.to_string()),
            ("pred_embed".into(), self.config.pred_embed.to_string()),
            ("pred_hidden".into(), self.config.pred_hidden.to_string()),
            ("joint_dim".into(), self.config.joint_dim.to_string()),
            ("vocab".into(), self.vocab.tokens().join(" ")),
        ];
        Checkpoint::from_params(config, &self.params, rng)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, FinetuneError> {
        let get = |k: &str| {
            ck.config_value(k)
                .ok_or_else(|| FinetuneError::BadCheckpoint(format!("missing config key {k}")))
        };
        let parse_usize = |k: &str| -> Result<usize, FinetuneError> {
            get(k)?
                .parse()
                .map_err(|_| FinetuneError::BadCheckpoint(format!("bad value for {k}")))
        };
        let encoder = EncoderConfig {
            input_dim: parse_usize("input_dim")?,
            num_layers: parse_usize("num_layers")?,
            body_layers: parse_usize("body_layers")?,
            model_dim: parse_usize("model_dim")?,
            num_heads: parse_usize("num_heads")?,
            ff_dim: parse_usize("ff_dim")?,
            embed_dim: parse_usize("embed_dim")?,
            gamma: get("gamma")?
                .parse()
                .map_err(|_| FinetuneError::BadCheckpoint("bad gamma".into()))?,
            relpos_clip: parse_usize("relpos_clip")?,
        };
        let config = TtConfig {
            encoder,
            pred_embed: parse_usize("pred_embed")?,
            pred_hidden: parse_usize("pred_hidden")?,
            joint_dim: parse_usize("joint_dim")?,
        };
        let vocab = Vocab::from_tokens(get("vocab")?.split_whitespace());
        let mut model = TtModel::new(config, vocab, 0)?;
        for i in 0..model.params.len() {
            let name = model.params.name(i).to_string();
            let src = ck
                .tensor(&name)
                .ok_or_else(|| FinetuneError::BadCheckpoint(format!("missing tensor {name}")))?;
            if src.shape() != model.params.get(i).shape() {
                return Err(FinetuneError::BadCheckpoint(format!(
                    "tensor {name} shape mismatch"
                )));
            }
            *model.params.get_mut(i) = src.clone();
        }
        Ok(model)
    }
}

/// Decode result plus streaming bookkeeping.
#[derive(Debug, Clone)]
pub struct DecodeOutcome {
    pub transcript: SerializedTranscript,
    pub frames_consumed: usize,
    pub emissions_per_chunk: Vec<usize>,
    pub cap_hits: usize,
}

/// One fine-tuning example: normalized mixture features and the
/// serialized t-SOT target tokens.
#[derive(Debug, Clone)]
pub struct FinetuneItem {
    pub features: FeatureSequence,
    pub target_tokens: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct FinetuneHyperparams {
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub chunk_config: ChunkMaskConfig,
    pub log_every: usize,
    pub seed: u64,
}

impl Default for FinetuneHyperparams {
    fn default() -> Self {
        FinetuneHyperparams {
            steps: 300,
            batch_size: 8,
            peak_lr: 2e-3,
            warmup_steps: 30,
            weight_decay: 0.01,
            chunk_config: ChunkMaskConfig::streaming(4, 2),
            log_every: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneLogRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct FinetuneRun {
    pub log: Vec<FinetuneLogRecord>,
    pub final_loss: f64,
}

/// Fine-tunes the transducer with the RNN-T loss on serialized targets,
/// using the same chunk mask as pre-training. The conv frontend stays
/// frozen; everything else updates.
pub fn finetune(
    model: &mut TtModel,
    examples: &[FinetuneItem],
    hp: &FinetuneHyperparams,
) -> Result<FinetuneRun, FinetuneError> {
    assert!(!examples.is_empty(), "finetune needs at least one example");
    let targets: Vec<Vec<usize>> = examples
        .iter()
        .map(|ex| model.vocab.encode(&ex.target_tokens))
        .collect::<Result<_, _>>()?;

    let schedule = LrSchedule {
        peak_lr: hp.peak_lr,
        warmup_steps: hp.warmup_steps,
        total_steps: hp.steps,
    };
    let mut opt = AdamW::new(model.params.num_scalars(), hp.weight_decay);
    let decay = crate::encoder::decay_mask(&model.params);
    // Flat indices of frozen parameters, restored after every step.
    let frozen: Vec<(usize, usize)> = {
        let mut spans = Vec::new();
        let mut off = 0;
        for (name, m) in model.params.iter() {
            if FROZEN_PREFIXES.iter().any(|p| name.starts_with(p)) {
                spans.push((off, m.data.len()));
            }
            off += m.data.len();
        }
        spans
    };
    let frozen_values: Vec<Vec<f64>> = {
        let flat = model.params.flatten();
        frozen
            .iter()
            .map(|&(off, len)| flat[off..off + len].to_vec())
            .collect()
    };

    let mut log = Vec::new();
    let mut final_loss = f64::NAN;
    for step in 0..hp.steps {
        let mut rng = example_rng(hp.seed, step as u64);
        let batch: Vec<usize> = (0..hp.batch_size)
            .map(|_| rand::Rng::random_range(&mut rng, 0..examples.len()))
            .collect();

        let model_ref: &TtModel = model;
        let results: Vec<Result<(f64, Vec<f64>), FinetuneError>> = batch
            .par_iter()
            .map(|&ei| {
                let ex = &examples[ei];
                let t_enc = ex
                    .features
                    .num_frames()
                    .div_ceil(crate::encoder::DOWNSAMPLE);
                let attn = build_chunk_mask(t_enc, &hp.chunk_config);
                model_ref.example_loss_and_grad(&ex.features, &attn, &targets[ei])
            })
            .collect();

        let mut grads = vec![0.0f64; model.params.num_scalars()];
        let mut loss_sum = 0.0;
        for r in results {
            let (l, g) = r?;
            loss_sum += l;
            for (dst, src) in grads.iter_mut().zip(&g) {
                *dst += src;
            }
        }
        let inv = 1.0 / hp.batch_size as f64;
        for g in grads.iter_mut() {
            *g *= inv;
        }
        let loss = loss_sum * inv;
        if !loss.is_finite() {
            return Err(FinetuneError::Numerical(format!(
                "loss diverged at step {step}: {loss}"
            )));
        }
        final_loss = loss;

        let lr = schedule.lr_at(step);
        let mut flat = model.params.flatten();
        opt.step(&mut flat, &grads, lr, &decay);
        for (&(off, len), vals) in frozen.iter().zip(&frozen_values) {
            flat[off..off + len].copy_from_slice(vals);
        }
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(FinetuneError::Numerical(format!(
                "parameters diverged at step {step}"
            )));
        }
        model.params.unflatten(&flat);

        if hp.log_every > 0 && (step % hp.log_every == 0 || step + 1 == hp.steps) {
            log.push(FinetuneLogRecord { step, loss, lr });
        }
    }
    Ok(FinetuneRun { log, final_loss })
}
