//! Experiment configuration: a flat plain-text file of dotted keys, with
//! CLI overrides applied on top. The canonical line form is what gets
//! hashed into the run manifest.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::encoder::{EncoderConfig, Objective};
use crate::mixer::AugmentConfig;
use crate::streammask::{ChunkMaskConfig, MaskSpanConfig};
use crate::transducer::TtConfig;

use super::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantizerKind {
    KmeansFbank,
    Import,
}

impl QuantizerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            QuantizerKind::KmeansFbank => "kmeans-fbank",
            QuantizerKind::Import => "import",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: String,
    /// Corpus manifest; empty means `<out_dir>/corpus/manifest.tsv`.
    pub corpus_manifest: String,
    /// Decode/score manifest; empty means `<out_dir>/eval/manifest.tsv`.
    pub eval_manifest: String,

    pub synth_size: usize,
    pub synth_num_speakers: usize,
    pub synth_vocab_size: usize,
    pub synth_words_min: usize,
    pub synth_words_max: usize,
    pub synth_eval_size: usize,
    pub synth_eval_mix_probability: f64,

    pub augment_p_clean: f64,
    pub augment_p_noise: f64,
    pub augment_p_speech: f64,

    pub quantizer_kind: QuantizerKind,
    pub quantizer_codebook_size: usize,
    pub quantizer_iterations: usize,
    pub quantizer_import_dir: String,
    pub quantizer_label_format: String,

    pub mask_span_length: usize,
    pub mask_start_probability: f64,

    pub chunk_size: usize,
    pub chunk_history: usize,
    pub chunk_offline: bool,

    pub encoder_num_layers: usize,
    pub encoder_body_layers: usize,
    pub encoder_model_dim: usize,
    pub encoder_num_heads: usize,
    pub encoder_ff_dim: usize,
    pub encoder_embed_dim: usize,
    pub encoder_gamma: f64,
    pub encoder_relpos_clip: usize,

    pub objective: Objective,

    pub pretrain_steps: usize,
    pub pretrain_batch_size: usize,
    pub pretrain_peak_lr: f64,
    pub pretrain_warmup_steps: usize,
    pub pretrain_weight_decay: f64,
    pub pretrain_log_every: usize,
    pub pretrain_examples: usize,

    pub finetune_steps: usize,
    pub finetune_batch_size: usize,
    pub finetune_peak_lr: f64,
    pub finetune_warmup_steps: usize,
    pub finetune_weight_decay: f64,
    pub finetune_log_every: usize,
    /// Number of stream examples to materialize and cycle; the whole point
    /// of a fixed set is overfit-style experiments.
    pub finetune_examples: usize,
    pub finetune_mix_probability: f64,
    pub finetune_volume_perturb: bool,

    pub tt_pred_embed: usize,
    pub tt_pred_hidden: usize,
    pub tt_joint_dim: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 42,
            out_dir: "runs/default".into(),
            corpus_manifest: String::new(),
            eval_manifest: String::new(),
            synth_size: 16,
            synth_num_speakers: 4,
            synth_vocab_size: 8,
            synth_words_min: 3,
            synth_words_max: 5,
            synth_eval_size: 8,
            synth_eval_mix_probability: 0.5,
            augment_p_clean: 0.5,
            augment_p_noise: 0.0,
            augment_p_speech: 0.5,
            quantizer_kind: QuantizerKind::KmeansFbank,
            quantizer_codebook_size: 16,
            quantizer_iterations: 20,
            quantizer_import_dir: String::new(),
            quantizer_label_format: "text".into(),
            mask_span_length: 5,
            mask_start_probability: 0.12,
            chunk_size: 4,
            chunk_history: 2,
            chunk_offline: false,
            encoder_num_layers: 4,
            encoder_body_layers: 3,
            encoder_model_dim: 64,
            encoder_num_heads: 4,
            encoder_ff_dim: 256,
            encoder_embed_dim: 32,
            encoder_gamma: 0.1,
            encoder_relpos_clip: 16,
            objective: Objective::Bilabel,
            pretrain_steps: 300,
            pretrain_batch_size: 8,
            pretrain_peak_lr: 2e-3,
            pretrain_warmup_steps: 30,
            pretrain_weight_decay: 0.01,
            pretrain_log_every: 25,
            pretrain_examples: 32,
            finetune_steps: 200,
            finetune_batch_size: 8,
            finetune_peak_lr: 2e-3,
            finetune_warmup_steps: 20,
            finetune_weight_decay: 0.01,
            finetune_log_every: 20,
            finetune_examples: 16,
            finetune_mix_probability: 0.5,
            finetune_volume_perturb: false,
            tt_pred_embed: 32,
            tt_pred_hidden: 48,
            tt_joint_dim: 48,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, HarnessError> {
    value
        .parse()
        .map_err(|_| HarnessError::Usage(format!("bad value {value:?} for key {key}")))
}

impl ExperimentConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), HarnessError> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = parse(key, v)?,
            "out_dir" => self.out_dir = v.to_string(),
            "corpus.manifest" => self.corpus_manifest = v.to_string(),
            "eval.manifest" => self.eval_manifest = v.to_string(),
            "synth.size" => self.synth_size = parse(key, v)?,
            "synth.num_speakers" => self.synth_num_speakers = parse(key, v)?,
            "synth.vocab_size" => self.synth_vocab_size = parse(key, v)?,
            "synth.words_min" => self.synth_words_min = parse(key, v)?,
            "synth.words_max" => self.synth_words_max = parse(key, v)?,
            "synth.eval_size" => self.synth_eval_size = parse(key, v)?,
            "synth.eval_mix_probability" => self.synth_eval_mix_probability = parse(key, v)?,
            "augment.p_clean" => self.augment_p_clean = parse(key, v)?,
            "augment.p_noise" => self.augment_p_noise = parse(key, v)?,
            "augment.p_speech" => self.augment_p_speech = parse(key, v)?,
            "quantizer.kind" => {
                self.quantizer_kind = match v {
                    "kmeans-fbank" => QuantizerKind::KmeansFbank,
                    "import" => QuantizerKind::Import,
                    _ => {
                        return Err(HarnessError::Usage(format!(
                            "quantizer.kind must be kmeans-fbank or import, got {v:?}"
                        )))
                    }
                }
            }
            "quantizer.codebook_size" => self.quantizer_codebook_size = parse(key, v)?,
            "quantizer.iterations" => self.quantizer_iterations = parse(key, v)?,
            "quantizer.import_dir" => self.quantizer_import_dir = v.to_string(),
            "quantizer.label_format" => {
                if v != "text" && v != "binary" {
                    return Err(HarnessError::Usage(format!(
                        "quantizer.label_format must be text or binary, got {v:?}"
                    )));
                }
                self.quantizer_label_format = v.to_string();
            }
            "mask.span_length" => self.mask_span_length = parse(key, v)?,
            "mask.start_probability" => self.mask_start_probability = parse(key, v)?,
            "chunk.size" => self.chunk_size = parse(key, v)?,
            "chunk.history" => self.chunk_history = parse(key, v)?,
            "chunk.offline" => self.chunk_offline = parse(key, v)?,
            "encoder.num_layers" => self.encoder_num_layers = parse(key, v)?,
            "encoder.body_layers" => self.encoder_body_layers = parse(key, v)?,
            "encoder.model_dim" => self.encoder_model_dim = parse(key, v)?,
            "encoder.num_heads" => self.encoder_num_heads = parse(key, v)?,
            "encoder.ff_dim" => self.encoder_ff_dim = parse(key, v)?,
            "encoder.embed_dim" => self.encoder_embed_dim = parse(key, v)?,
            "encoder.gamma" => self.encoder_gamma = parse(key, v)?,
            "encoder.relpos_clip" => self.encoder_relpos_clip = parse(key, v)?,
            "objective" => {
                self.objective = Objective::parse(v).ok_or_else(|| {
                    HarnessError::Usage(format!("objective must be msp or bilabel, got {v:?}"))
                })?
            }
            "pretrain.steps" => self.pretrain_steps = parse(key, v)?,
            "pretrain.batch_size" => self.pretrain_batch_size = parse(key, v)?,
            "pretrain.peak_lr" => self.pretrain_peak_lr = parse(key, v)?,
            "pretrain.warmup_steps" => self.pretrain_warmup_steps = parse(key, v)?,
            "pretrain.weight_decay" => self.pretrain_weight_decay = parse(key, v)?,
            "pretrain.log_every" => self.pretrain_log_every = parse(key, v)?,
            "pretrain.examples" => self.pretrain_examples = parse(key, v)?,
            "finetune.steps" => self.finetune_steps = parse(key, v)?,
            "finetune.batch_size" => self.finetune_batch_size = parse(key, v)?,
            "finetune.peak_lr" => self.finetune_peak_lr = parse(key, v)?,
            "finetune.warmup_steps" => self.finetune_warmup_steps = parse(key, v)?,
            "finetune.weight_decay" => self.finetune_weight_decay = parse(key, v)?,
            "finetune.log_every" => self.finetune_log_every = parse(key, v)?,
            "finetune.examples" => self.finetune_examples = parse(key, v)?,
            "finetune.mix_probability" => self.finetune_mix_probability = parse(key, v)?,
            "finetune.volume_perturb" => self.finetune_volume_perturb = parse(key, v)?,
            "tt.pred_embed" => self.tt_pred_embed = parse(key, v)?,
            "tt.pred_hidden" => self.tt_pred_hidden = parse(key, v)?,
            "tt.joint_dim" => self.tt_joint_dim = parse(key, v)?,
            other => return Err(HarnessError::Usage(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Parses a config file of `key = value` lines; `#` starts a comment.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            HarnessError::Data(format!("cannot read config {}: {e}", path.display()))
        })?;
        let mut cfg = ExperimentConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                HarnessError::Usage(format!("config line {}: expected key = value", i + 1))
            })?;
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    /// Canonical `key = value` lines for diffing and hashing.
    pub fn to_canonical_lines(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("out_dir", self.out_dir.clone());
        kv("corpus.manifest", self.corpus_manifest.clone());
        kv("eval.manifest", self.eval_manifest.clone());
        kv("synth.size", self.synth_size.to_string());
        kv("synth.num_speakers", self.synth_num_speakers.to_string());
        kv("synth.vocab_size", self.synth_vocab_size.to_string());
        kv("synth.words_min", self.synth_words_min.to_string());
        kv("synth.words_max", self.synth_words_max.to_string());
        kv("synth.eval_size", self.synth_eval_size.to_string());
        kv(
            "synth.eval_mix_probability",
            format!("{:?}", self.synth_eval_mix_probability),
        );
        kv("augment.p_clean", format!("{:?}", self.augment_p_clean));
        kv("augment.p_noise", format!("{:?}", self.augment_p_noise));
        kv("augment.p_speech", format!("{:?}", self.augment_p_speech));
        kv("quantizer.kind", self.quantizer_kind.as_str().to_string());
        kv(
            "quantizer.codebook_size",
            self.quantizer_codebook_size.to_string(),
        );
        kv(
            "quantizer.iterations",
            self.quantizer_iterations.to_string(),
        );
        kv("quantizer.import_dir", self.quantizer_import_dir.clone());
        kv(
            "quantizer.label_format",
            self.quantizer_label_format.clone(),
        );
        kv("mask.span_length", self.mask_span_length.to_string());
        kv(
            "mask.start_probability",
            format!("{:?}", self.mask_start_probability),
        );
        kv("chunk.size", self.chunk_size.to_string());
        kv("chunk.history", self.chunk_history.to_string());
        kv("chunk.offline", self.chunk_offline.to_string());
        kv("encoder.num_layers", self.encoder_num_layers.to_string());
        kv("encoder.body_layers", self.encoder_body_layers.to_string());
        kv("encoder.model_dim", self.encoder_model_dim.to_string());
        kv("encoder.num_heads", self.encoder_num_heads.to_string());
        kv("encoder.ff_dim", self.encoder_ff_dim.to_string());
        kv("encoder.embed_dim", self.encoder_embed_dim.to_string());
        kv("encoder.gamma", format!("{:?}", self.encoder_gamma));
        kv("encoder.relpos_clip", self.encoder_relpos_clip.to_string());
        kv("objective", self.objective.as_str().to_string());
        kv("pretrain.steps", self.pretrain_steps.to_string());
        kv("pretrain.batch_size", self.pretrain_batch_size.to_string());
        kv("pretrain.peak_lr", format!("{:?}", self.pretrain_peak_lr));
        kv(
            "pretrain.warmup_steps",
            self.pretrain_warmup_steps.to_string(),
        );
        kv(
            "pretrain.weight_decay",
            format!("{:?}", self.pretrain_weight_decay),
        );
        kv("pretrain.log_every", self.pretrain_log_every.to_string());
        kv("pretrain.examples", self.pretrain_examples.to_string());
        kv("finetune.steps", self.finetune_steps.to_string());
        kv("finetune.batch_size", self.finetune_batch_size.to_string());
        kv("finetune.peak_lr", format!("{:?}", self.finetune_peak_lr));
        kv(
            "finetune.warmup_steps",
            self.finetune_warmup_steps.to_string(),
        );
        kv(
            "finetune.weight_decay",
            format!("{:?}", self.finetune_weight_decay),
        );
        kv("finetune.log_every", self.finetune_log_every.to_string());
        kv("finetune.examples", self.finetune_examples.to_string());
        kv(
            "finetune.mix_probability",
            format!("{:?}", self.finetune_mix_probability),
        );
        kv(
            "finetune.volume_perturb",
            self.finetune_volume_perturb.to_string(),
        );
        kv("tt.pred_embed", self.tt_pred_embed.to_string());
        kv("tt.pred_hidden", self.tt_pred_hidden.to_string());
        kv("tt.joint_dim", self.tt_joint_dim.to_string());
        s
    }

    pub fn config_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        hasher.update(self.to_canonical_lines().as_bytes());
        let out = hasher.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(&self.out_dir)
    }

    pub fn corpus_manifest_path(&self) -> PathBuf {
        if self.corpus_manifest.is_empty() {
            self.out_dir().join("corpus/manifest.tsv")
        } else {
            PathBuf::from(&self.corpus_manifest)
        }
    }

    pub fn eval_manifest_path(&self) -> PathBuf {
        if self.eval_manifest.is_empty() {
            self.out_dir().join("eval/manifest.tsv")
        } else {
            PathBuf::from(&self.eval_manifest)
        }
    }

    pub fn augment_config(&self) -> Result<AugmentConfig, HarnessError> {
        AugmentConfig::new(
            self.augment_p_clean,
            self.augment_p_noise,
            self.augment_p_speech,
        )
        .map_err(|e| HarnessError::Usage(e.to_string()))
    }

    pub fn chunk_config(&self) -> ChunkMaskConfig {
        if self.chunk_offline {
            ChunkMaskConfig::offline()
        } else {
            ChunkMaskConfig::streaming(self.chunk_size, self.chunk_history)
        }
    }

    pub fn mask_config(&self) -> MaskSpanConfig {
        MaskSpanConfig {
            span_length: self.mask_span_length,
            start_probability: self.mask_start_probability,
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            input_dim: crate::featext::FRAME_DIM,
            num_layers: self.encoder_num_layers,
            body_layers: self.encoder_body_layers,
            model_dim: self.encoder_model_dim,
            num_heads: self.encoder_num_heads,
            ff_dim: self.encoder_ff_dim,
            embed_dim: self.encoder_embed_dim,
            gamma: self.encoder_gamma,
            relpos_clip: self.encoder_relpos_clip,
        }
    }

    /// Body-only encoder config for the fine-tuned transducer.
    pub fn tt_config(&self) -> TtConfig {
        let mut enc = self.encoder_config();
        enc.num_layers = self.encoder_body_layers;
        enc.body_layers = self.encoder_body_layers;
        TtConfig {
            encoder: enc,
            pred_embed: self.tt_pred_embed,
            pred_hidden: self.tt_pred_hidden,
            joint_dim: self.tt_joint_dim,
        }
    }

    pub fn label_format(&self) -> crate::containers::LabelFormat {
        if self.quantizer_label_format == "binary" {
            crate::containers::LabelFormat::Binary
        } else {
            crate::containers::LabelFormat::Text
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_values_and_overrides_apply() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("exp.cfg");
        std::fs::write(
            &p,
            "# comment\nseed = 7\nencoder.model_dim = 32  # inline comment\nobjective = msp\n",
        )
        .unwrap();
        let mut cfg = ExperimentConfig::load(&p).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.encoder_model_dim, 32);
        assert_eq!(cfg.objective, Objective::Msp);
        cfg.set("encoder.model_dim", "64").unwrap();
        assert_eq!(cfg.encoder_model_dim, 64);
    }

    #[test]
    fn unknown_keys_are_usage_errors() {
        let mut cfg = ExperimentConfig::default();
        assert!(matches!(
            cfg.set("nope.key", "1"),
            Err(HarnessError::Usage(_))
        ));
    }

    #[test]
    fn hash_changes_with_any_field() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.config_hash(), b.config_hash());
        b.set("pretrain.steps", "301").unwrap();
        assert_ne!(a.config_hash(), b.config_hash());
    }
}
