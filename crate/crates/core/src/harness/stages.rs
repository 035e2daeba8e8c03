//! Pipeline stages: quantize -> pre-train -> fine-tune -> decode -> score,
//! plus corpus synthesis and feature extraction. Each stage reads only
//! recorded artifacts of earlier stages and appends to the run manifest.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::SystemTime;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, RngState};
use crate::containers;
use crate::encoder::{
    evaluate_masked_accuracy, pretrain, PretrainExample, PretrainHyperparams, PretrainModel,
};
use crate::eval::{normalize_text, permutation_wer, WerReport};
use crate::featext::{fit_norm_stats, normalize, FbankExtractor, NormStats};
use crate::mixer::{
    apply_mix, read_manifest, read_timed_transcript, sample_mix_spec, BatchMixStream,
    LoadedUtterance, UtteranceRecord,
};
use crate::quantizer::{
    assign_labels, build_bilabel_targets, build_bilabel_targets_from_streams, import_labels,
    train_kmeans, Codebook, LabelStream,
};
use crate::streammask::build_chunk_mask;
use crate::transducer::{finetune, FinetuneHyperparams, FinetuneItem, TtModel, Vocab};
use crate::tsot;

use super::config::{ExperimentConfig, QuantizerKind};
use super::manifest::RunManifest;
use super::synth::{make_eval_set, make_synthetic_corpus, SynthSpec};
use super::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Synth,
    Features,
    Quantize,
    Pretrain,
    Finetune,
    Decode,
    Score,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Features => "features",
            Stage::Quantize => "quantize",
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
            Stage::Decode => "decode",
            Stage::Score => "score",
        }
    }

    pub fn parse(s: &str) -> Option<Stage> {
        Some(match s {
            "synth" => Stage::Synth,
            "features" => Stage::Features,
            "quantize" => Stage::Quantize,
            "pretrain" => Stage::Pretrain,
            "finetune" => Stage::Finetune,
            "decode" => Stage::Decode,
            "score" => Stage::Score,
            _ => return None,
        })
    }
}

fn require(path: &Path, produced_by: &str) -> Result<(), HarnessError> {
    if path.exists() {
        Ok(())
    } else {
        Err(HarnessError::Data(format!(
            "missing {}; run stage '{produced_by}' first",
            path.display()
        )))
    }
}

fn ensure_dir(path: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(path).map_err(|e| HarnessError::Data(e.to_string()))
}

fn data_err<E: std::fmt::Display>(e: E) -> HarnessError {
    HarnessError::Data(e.to_string())
}

/// Executes one stage and records its artifacts in the run manifest.
pub fn run_stage(cfg: &ExperimentConfig, stage: Stage) -> Result<(), HarnessError> {
    let out_dir = cfg.out_dir();
    ensure_dir(&out_dir)?;
    let mut manifest = RunManifest::load_or_new(&out_dir, &cfg.config_hash())?;
    let started = SystemTime::now();
    let artifacts: Vec<PathBuf> = match stage {
        Stage::Synth => stage_synth(cfg)?,
        Stage::Features => stage_features(cfg)?,
        Stage::Quantize => stage_quantize(cfg)?,
        Stage::Pretrain => stage_pretrain(cfg)?,
        Stage::Finetune => stage_finetune(cfg)?,
        Stage::Decode => stage_decode(cfg)?,
        Stage::Score => stage_score(cfg)?,
    };
    let refs: Vec<&Path> = artifacts.iter().map(|p| p.as_path()).collect();
    manifest.record_stage(&out_dir, stage.name(), &refs, cfg.seed, started)?;
    Ok(())
}

fn stage_synth(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>, HarnessError> {
    let out = cfg.out_dir();
    let corpus_dir = out.join("corpus");
    let spec = SynthSpec {
        size: cfg.synth_size,
        num_speakers: cfg.synth_num_speakers,
        vocab_size: cfg.synth_vocab_size,
        words_min: cfg.synth_words_min,
        words_max: cfg.synth_words_max,
        seed: cfg.seed,
    };
    let records = make_synthetic_corpus(&corpus_dir, &spec)?;
    let loaded: Vec<LoadedUtterance> = records
        .iter()
        .map(|r| LoadedUtterance::load(r).map_err(data_err))
        .collect::<Result<_, _>>()?;
    let eval_dir = out.join("eval");
    let eval_records = make_eval_set(
        &eval_dir,
        &loaded,
        cfg.synth_eval_size,
        cfg.synth_eval_mix_probability,
        cfg.seed.wrapping_add(1),
    )?;

    let mut artifacts = vec![
        corpus_dir.join("manifest.tsv"),
        eval_dir.join("manifest.tsv"),
    ];
    for r in records.iter().chain(eval_records.iter()) {
        artifacts.push(r.audio_path.clone());
        if let Some(t) = &r.transcript_path {
            artifacts.push(t.clone());
        }
    }
    Ok(artifacts)
}

fn load_corpus(cfg: &ExperimentConfig) -> Result<Vec<LoadedUtterance>, HarnessError> {
    let manifest_path = cfg.corpus_manifest_path();
    require(&manifest_path, "synth")?;
    let records = read_manifest(&manifest_path).map_err(data_err)?;
    if records.is_empty() {
        return Err(HarnessError::Data(format!(
            "{} lists no utterances",
            manifest_path.display()
        )));
    }
    records
        .iter()
        .map(|r| LoadedUtterance::load(r).map_err(data_err))
        .collect()
}

fn features_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir().join("features")
}

fn feature_file(cfg: &ExperimentConfig, utt: &str) -> PathBuf {
    features_dir(cfg).join(format!("{utt}.fb"))
}

fn norm_stats_file(cfg: &ExperimentConfig) -> PathBuf {
    features_dir(cfg).join("norm_stats.bin")
}

fn stage_features(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>, HarnessError> {
    let corpus = load_corpus(cfg)?;
    let dir = features_dir(cfg);
    ensure_dir(&dir)?;
    let extractor = FbankExtractor::new();
    let mut artifacts = Vec::new();
    let mut all = Vec::with_capacity(corpus.len());
    for u in &corpus {
        let feats = extractor.compute(&u.audio).map_err(data_err)?;
        let path = feature_file(cfg, &u.record.utterance_id);
        containers::save_features(&path, &feats).map_err(data_err)?;
        artifacts.push(path);
        all.push(feats);
    }
    let stats = fit_norm_stats(&all).map_err(data_err)?;
    let stats_path = norm_stats_file(cfg);
    containers::save_norm_stats(&stats_path, &stats).map_err(data_err)?;
    artifacts.push(stats_path);
    Ok(artifacts)
}

fn codebook_file(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir().join("quantize/codebook.bin")
}

fn labels_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir().join("quantize/labels")
}

fn label_file(cfg: &ExperimentConfig, utt: &str) -> PathBuf {
    labels_dir(cfg).join(format!("{utt}.labels"))
}

/// Loads the feature artifact of one utterance, normalized with the
/// corpus statistics.
fn load_normalized_features(
    cfg: &ExperimentConfig,
    stats: &NormStats,
    utt: &str,
) -> Result<crate::featext::FeatureSequence, HarnessError> {
    let path = feature_file(cfg, utt);
    require(&path, "features")?;
    let feats = containers::load_features(&path).map_err(data_err)?;
    normalize(&feats, stats).map_err(data_err)
}

fn stage_quantize(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>, HarnessError> {
    let manifest_path = cfg.corpus_manifest_path();
    require(&manifest_path, "synth")?;
    let records = read_manifest(&manifest_path).map_err(data_err)?;
    require(&norm_stats_file(cfg), "features")?;
    let stats = containers::load_norm_stats(&norm_stats_file(cfg)).map_err(data_err)?;
    ensure_dir(&labels_dir(cfg))?;

    let mut artifacts = Vec::new();
    match cfg.quantizer_kind {
        QuantizerKind::KmeansFbank => {
            let mut normalized = Vec::with_capacity(records.len());
            for r in &records {
                normalized.push(load_normalized_features(cfg, &stats, &r.utterance_id)?);
            }
            let refs: Vec<&crate::featext::FeatureSequence> = normalized.iter().collect();
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6b6d65616e73);
            let result = train_kmeans(
                &refs,
                cfg.quantizer_codebook_size,
                cfg.quantizer_iterations,
                &mut rng,
            )
            .map_err(data_err)?;
            let cb_path = codebook_file(cfg);
            result.codebook.save(&cb_path).map_err(data_err)?;
            artifacts.push(cb_path);
            for (r, feats) in records.iter().zip(&normalized) {
                let stream = assign_labels(feats, &result.codebook).map_err(data_err)?;
                let path = label_file(cfg, &r.utterance_id);
                containers::save_labels(&path, stream.labels(), cfg.label_format())
                    .map_err(data_err)?;
                artifacts.push(path);
            }
        }
        QuantizerKind::Import => {
            if cfg.quantizer_import_dir.is_empty() {
                return Err(HarnessError::Usage(
                    "quantizer.import_dir must be set for quantizer.kind = import".into(),
                ));
            }
            let import_dir = PathBuf::from(&cfg.quantizer_import_dir);
            for r in &records {
                let src = import_dir.join(format!("{}.labels", r.utterance_id));
                require(&src, "external labeling")?;
                let stream =
                    import_labels(&src, cfg.quantizer_codebook_size as u32, cfg.label_format())
                        .map_err(data_err)?;
                let path = label_file(cfg, &r.utterance_id);
                containers::save_labels(&path, stream.labels(), cfg.label_format())
                    .map_err(data_err)?;
                artifacts.push(path);
            }
        }
    }
    Ok(artifacts)
}

fn pretrain_checkpoint_file(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir().join("pretrain/checkpoint.bin")
}

/// Builds the augmented pre-training example set from recorded artifacts.
fn build_pretrain_examples(
    cfg: &ExperimentConfig,
    corpus: &[LoadedUtterance],
    stats: &NormStats,
) -> Result<Vec<PretrainExample>, HarnessError> {
    let augment = cfg.augment_config()?;
    let extractor = FbankExtractor::new();
    // Records with durations taken from the decoded audio, so segment
    // sampling and bounds validation agree exactly.
    let pool: Vec<UtteranceRecord> = corpus
        .iter()
        .map(|u| UtteranceRecord {
            duration_secs: u.audio.duration_secs(),
            ..u.record.clone()
        })
        .collect();
    let by_id: BTreeMap<&str, &LoadedUtterance> = corpus
        .iter()
        .map(|u| (u.record.utterance_id.as_str(), u))
        .collect();

    let codebook: Option<Codebook> = match cfg.quantizer_kind {
        QuantizerKind::KmeansFbank => {
            require(&codebook_file(cfg), "quantize")?;
            Some(Codebook::load(&codebook_file(cfg)).map_err(data_err)?)
        }
        QuantizerKind::Import => None,
    };
    let mut label_streams: BTreeMap<String, LabelStream> = BTreeMap::new();
    if codebook.is_none() {
        for u in corpus {
            let path = label_file(cfg, &u.record.utterance_id);
            require(&path, "quantize")?;
            let labels = containers::load_labels(&path, cfg.label_format()).map_err(data_err)?;
            label_streams.insert(
                u.record.utterance_id.clone(),
                LabelStream::from_labels(labels),
            );
        }
    }

    let mut normalized: BTreeMap<String, crate::featext::FeatureSequence> = BTreeMap::new();
    for u in corpus {
        normalized.insert(
            u.record.utterance_id.clone(),
            load_normalized_features(cfg, stats, &u.record.utterance_id)?,
        );
    }

    let mut examples = Vec::with_capacity(cfg.pretrain_examples);
    for i in 0..cfg.pretrain_examples {
        let primary = &pool[i % pool.len()];
        let mut rng = crate::mixer::example_rng(cfg.seed ^ 0x70726574, i as u64);
        let spec = sample_mix_spec(&augment, primary, &pool, &mut rng).map_err(data_err)?;
        let primary_loaded = by_id[primary.utterance_id.as_str()];
        let secondary_audio = spec
            .secondary_id
            .as_ref()
            .map(|id| &by_id[id.as_str()].audio);
        let outcome = apply_mix(&primary_loaded.audio, &spec, secondary_audio).map_err(data_err)?;
        let mixed_feats = extractor.compute(&outcome.audio).map_err(data_err)?;
        let mixed_norm = normalize(&mixed_feats, stats).map_err(data_err)?;

        let targets = match &codebook {
            Some(cb) => {
                let primary_feats = &normalized[&primary.utterance_id];
                let secondary_feats = spec
                    .secondary_id
                    .as_ref()
                    .map(|id| &normalized[id.as_str()]);
                build_bilabel_targets(primary_feats, secondary_feats, &spec, &outcome.presence, cb)
                    .map_err(data_err)?
            }
            None => {
                let primary_stream = &label_streams[&primary.utterance_id];
                let secondary_stream = spec
                    .secondary_id
                    .as_ref()
                    .map(|id| &label_streams[id.as_str()]);
                build_bilabel_targets_from_streams(
                    primary_stream,
                    secondary_stream,
                    &spec,
                    &outcome.presence,
                )
                .map_err(data_err)?
            }
        };
        examples.push(PretrainExample {
            features: mixed_norm,
            targets,
        });
    }
    Ok(examples)
}

fn stage_pretrain(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>, HarnessError> {
    let corpus = load_corpus(cfg)?;
    require(&norm_stats_file(cfg), "features")?;
    let stats = containers::load_norm_stats(&norm_stats_file(cfg)).map_err(data_err)?;
    let examples = build_pretrain_examples(cfg, &corpus, &stats)?;

    let mut model = PretrainModel::new(
        cfg.encoder_config(),
        cfg.quantizer_codebook_size,
        cfg.objective,
        cfg.seed,
    )?;
    let hp = PretrainHyperparams {
        steps: cfg.pretrain_steps,
        batch_size: cfg.pretrain_batch_size,
        peak_lr: cfg.pretrain_peak_lr,
        warmup_steps: cfg.pretrain_warmup_steps,
        weight_decay: cfg.pretrain_weight_decay,
        mask_config: cfg.mask_config(),
        chunk_config: cfg.chunk_config(),
        log_every: cfg.pretrain_log_every,
        seed: cfg.seed,
    };
    let run = pretrain(&mut model, &examples, &hp)?;

    let dir = cfg.out_dir().join("pretrain");
    ensure_dir(&dir)?;
    let log_path = dir.join("log.tsv");
    let mut w = std::fs::File::create(&log_path).map_err(data_err)?;
    writeln!(w, "step\tloss\tacc_primary\tacc_secondary\tlr").map_err(data_err)?;
    for rec in &run.log {
        writeln!(w, "{}", rec.to_line()).map_err(data_err)?;
    }
    let final_acc = evaluate_masked_accuracy(
        &model,
        &examples,
        &cfg.mask_config(),
        &cfg.chunk_config(),
        cfg.seed ^ 0x6576616c,
    )?;
    writeln!(
        w,
        "# final masked accuracy: primary {:.4}, secondary(non-blank) {}",
        final_acc.primary,
        final_acc
            .secondary_nonblank
            .map(|a| format!("{a:.4}"))
            .unwrap_or_else(|| "-".into())
    )
    .map_err(data_err)?;

    let ck_path = pretrain_checkpoint_file(cfg);
    let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    model
        .to_checkpoint(RngState::capture(&rng))
        .save(&ck_path)
        .map_err(data_err)?;
    Ok(vec![ck_path, log_path])
}

fn tt_checkpoint_file(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir().join("finetune/tt_checkpoint.bin")
}

/// Materializes fine-tuning examples from the on-the-fly mixture stream
/// and serializes their transcripts.
pub fn build_finetune_items(
    cfg: &ExperimentConfig,
    corpus: &[LoadedUtterance],
    stats: &NormStats,
    count: usize,
) -> Result<(Vec<FinetuneItem>, Vocab), HarnessError> {
    let stream = BatchMixStream::new(
        corpus,
        cfg.finetune_mix_probability,
        cfg.finetune_volume_perturb,
        cfg.seed ^ 0x66696e65,
    )
    .map_err(data_err)?;
    let extractor = FbankExtractor::new();
    let mut items = Vec::with_capacity(count);
    for i in 0..count {
        let ex = stream.example_at(i as u64).map_err(data_err)?;
        let serialized = tsot::serialize(&ex.tokens).map_err(data_err)?;
        let feats = extractor.compute(&ex.audio).map_err(data_err)?;
        let norm = normalize(&feats, stats).map_err(data_err)?;
        items.push(FinetuneItem {
            features: norm,
            target_tokens: serialized.tokens().to_vec(),
        });
    }
    let vocab = Vocab::from_tokens(
        corpus
            .iter()
            .filter_map(|u| u.transcript.as_ref())
            .flatten()
            .map(|t| t.token.as_str()),
    );
    Ok((items, vocab))
}

fn stage_finetune(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>, HarnessError> {
    require(&pretrain_checkpoint_file(cfg), "pretrain")?;
    let corpus = load_corpus(cfg)?;
    require(&norm_stats_file(cfg), "features")?;
    let stats = containers::load_norm_stats(&norm_stats_file(cfg)).map_err(data_err)?;
    if cfg.finetune_examples == 0 {
        return Err(HarnessError::Usage(
            "finetune.examples must be at least 1".into(),
        ));
    }
    let (items, vocab) = build_finetune_items(cfg, &corpus, &stats, cfg.finetune_examples)?;

    let ck = Checkpoint::load(&pretrain_checkpoint_file(cfg)).map_err(data_err)?;
    let mut model = TtModel::from_pretrained(&ck, cfg.tt_config(), vocab, cfg.seed)?;
    let hp = FinetuneHyperparams {
        steps: cfg.finetune_steps,
        batch_size: cfg.finetune_batch_size,
        peak_lr: cfg.finetune_peak_lr,
        warmup_steps: cfg.finetune_warmup_steps,
        weight_decay: cfg.finetune_weight_decay,
        chunk_config: cfg.chunk_config(),
        log_every: cfg.finetune_log_every,
        seed: cfg.seed,
    };
    let run = finetune(&mut model, &items, &hp)?;

    let dir = cfg.out_dir().join("finetune");
    ensure_dir(&dir)?;
    let log_path = dir.join("log.tsv");
    let mut w = std::fs::File::create(&log_path).map_err(data_err)?;
    writeln!(w, "step\tloss\tlr").map_err(data_err)?;
    for rec in &run.log {
        writeln!(w, "{}\t{:.6}\t{:.6e}", rec.step, rec.loss, rec.lr).map_err(data_err)?;
    }
    let ck_path = tt_checkpoint_file(cfg);
    let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    model
        .to_checkpoint(RngState::capture(&rng))
        .save(&ck_path)
        .map_err(data_err)?;
    Ok(vec![ck_path, log_path])
}

fn hyp_file(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir().join("decode/hyp.tsv")
}

fn stage_decode(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>, HarnessError> {
    require(&tt_checkpoint_file(cfg), "finetune")?;
    require(&norm_stats_file(cfg), "features")?;
    let eval_manifest = cfg.eval_manifest_path();
    require(&eval_manifest, "synth")?;

    let model =
        TtModel::from_checkpoint(&Checkpoint::load(&tt_checkpoint_file(cfg)).map_err(data_err)?)?;
    let stats = containers::load_norm_stats(&norm_stats_file(cfg)).map_err(data_err)?;
    let records = read_manifest(&eval_manifest).map_err(data_err)?;
    let extractor = FbankExtractor::new();

    let dir = cfg.out_dir().join("decode");
    ensure_dir(&dir)?;
    let hyp_path = hyp_file(cfg);
    let meta_path = dir.join("metadata.tsv");
    let mut hyp = std::fs::File::create(&hyp_path).map_err(data_err)?;
    let mut meta = std::fs::File::create(&meta_path).map_err(data_err)?;
    writeln!(meta, "utterance_id\tframes\tcap_hits\temissions_per_chunk").map_err(data_err)?;

    for r in &records {
        let audio = crate::audio::AudioBuffer::read_wav(&r.audio_path).map_err(data_err)?;
        let feats = extractor.compute(&audio).map_err(data_err)?;
        let norm = normalize(&feats, &stats).map_err(data_err)?;
        let t_enc = norm.num_frames().div_ceil(crate::encoder::DOWNSAMPLE);
        let attn = build_chunk_mask(t_enc, &cfg.chunk_config());
        let enc = model.encode(&norm, &attn)?;
        let chunk = if cfg.chunk_offline {
            t_enc
        } else {
            cfg.chunk_size
        };
        let out = model.greedy_decode(&enc, chunk);
        writeln!(hyp, "{}\t{}", r.utterance_id, out.transcript.text()).map_err(data_err)?;
        writeln!(
            meta,
            "{}\t{}\t{}\t{}",
            r.utterance_id,
            out.frames_consumed,
            out.cap_hits,
            out.emissions_per_chunk
                .iter()
                .map(|e| e.to_string())
                .collect::<Vec<_>>()
                .join(",")
        )
        .map_err(data_err)?;
    }
    Ok(vec![hyp_path, meta_path])
}

/// Per-utterance scoring record used by the score stage and its tests.
#[derive(Debug, Clone)]
pub struct ScoredUtterance {
    pub utterance_id: String,
    pub num_speakers: usize,
    pub report: WerReport,
}

/// Scores a hypothesis file against the reference transcripts of an
/// evaluation manifest. Returns per-utterance reports and pooled
/// (1spk, 2spk, all) summaries.
pub fn score_hypotheses(
    hyp_path: &Path,
    eval_manifest: &Path,
) -> Result<(Vec<ScoredUtterance>, BTreeMap<String, WerReport>), HarnessError> {
    let records = read_manifest(eval_manifest).map_err(data_err)?;
    let text = std::fs::read_to_string(hyp_path).map_err(data_err)?;
    let mut hyp_by_id: BTreeMap<&str, &str> = BTreeMap::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, rest) = line.split_once('\t').unwrap_or((line, ""));
        hyp_by_id.insert(id, rest);
    }

    let mut per_utt = Vec::new();
    let mut pooled: BTreeMap<String, WerReport> = BTreeMap::new();
    for r in &records {
        let transcript_path = r.transcript_path.as_ref().ok_or_else(|| {
            HarnessError::Data(format!("{} has no reference transcript", r.utterance_id))
        })?;
        let tokens = read_timed_transcript(transcript_path).map_err(data_err)?;
        let mut speakers: Vec<&str> = tokens.iter().map(|t| t.speaker_id.as_str()).collect();
        speakers.sort_unstable();
        speakers.dedup();
        let references: Vec<Vec<String>> = speakers
            .iter()
            .map(|spk| {
                let joined: Vec<String> = tokens
                    .iter()
                    .filter(|t| t.speaker_id == *spk)
                    .map(|t| t.token.clone())
                    .collect();
                normalize_text(&joined.join(" "))
            })
            .collect();

        let hyp_text = hyp_by_id
            .get(r.utterance_id.as_str())
            .copied()
            .ok_or_else(|| HarnessError::Data(format!("no hypothesis for {}", r.utterance_id)))?;
        let serialized = tsot::SerializedTranscript::parse(hyp_text);
        let (channels, _repairs) = tsot::deserialize(&serialized);
        let hyp_channels: Vec<Vec<String>> = channels
            .channels
            .iter()
            .map(|c| normalize_text(&c.join(" ")))
            .collect();

        let result = permutation_wer(&hyp_channels, &references).map_err(data_err)?;
        let subset = format!("{}spk", speakers.len());
        pooled
            .entry(subset)
            .or_insert_with(WerReport::zero)
            .add(&result.pooled);
        pooled
            .entry("all".into())
            .or_insert_with(WerReport::zero)
            .add(&result.pooled);
        per_utt.push(ScoredUtterance {
            utterance_id: r.utterance_id.clone(),
            num_speakers: speakers.len(),
            report: result.pooled,
        });
    }
    Ok((per_utt, pooled))
}

pub fn format_score_summary(pooled: &BTreeMap<String, WerReport>) -> String {
    let mut s = String::from("subset\tutt_ref_words\tsub\tdel\tins\twer\n");
    for (subset, report) in pooled {
        s.push_str(&format!(
            "{subset}\t{}\t{}\t{}\t{}\t{:.4}\n",
            report.reference_length,
            report.substitutions,
            report.deletions,
            report.insertions,
            report.wer()
        ));
    }
    s
}

fn stage_score(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>, HarnessError> {
    require(&hyp_file(cfg), "decode")?;
    let eval_manifest = cfg.eval_manifest_path();
    require(&eval_manifest, "synth")?;
    let (per_utt, pooled) = score_hypotheses(&hyp_file(cfg), &eval_manifest)?;

    let dir = cfg.out_dir().join("score");
    ensure_dir(&dir)?;
    let per_path = dir.join("per_utt.tsv");
    let mut w = std::fs::File::create(&per_path).map_err(data_err)?;
    writeln!(
        w,
        "utterance_id\tnum_speakers\tsub\tdel\tins\tref_words\twer"
    )
    .map_err(data_err)?;
    for u in &per_utt {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}\t{:.4}",
            u.utterance_id,
            u.num_speakers,
            u.report.substitutions,
            u.report.deletions,
            u.report.insertions,
            u.report.reference_length,
            u.report.wer()
        )
        .map_err(data_err)?;
    }
    let summary = format_score_summary(&pooled);
    let sum_path = dir.join("summary.txt");
    std::fs::write(&sum_path, &summary).map_err(data_err)?;
    print!("{summary}");
    Ok(vec![per_path, sum_path])
}
