//! Deterministic synthetic corpus generation: tone-burst "words" with
//! known timed transcripts, plus a mixed evaluation set, so the whole
//! pipeline runs without external data.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{AudioBuffer, SAMPLE_RATE};
use crate::mixer::{
    example_rng, simulate_finetune_mixture, write_manifest, write_timed_transcript,
    LoadedUtterance, UtteranceRecord,
};
use crate::tsot::TimedToken;

use super::HarnessError;

/// Consonant-vowel pseudo-words; index selects the tone frequency.
const SYLLABLES: [&str; 16] = [
    "ba", "de", "ki", "mo", "lu", "ne", "pa", "ri", "su", "te", "vo", "ga", "hi", "jo", "fu", "za",
];

pub const WORD_TONE_SECS: f64 = 0.28;
/// Two encoder frames of silence, so repeated words stay separable.
pub const WORD_GAP_SECS: f64 = 0.08;

/// Frequency of a vocabulary word's tone, spaced to land in distinct mel
/// bands.
pub fn word_frequency(word_index: usize) -> f64 {
    320.0 * 1.24f64.powi(word_index as i32)
}

#[derive(Debug, Clone, Copy)]
pub struct SynthSpec {
    pub size: usize,
    pub num_speakers: usize,
    pub vocab_size: usize,
    pub words_min: usize,
    pub words_max: usize,
    pub seed: u64,
}

/// Renders one utterance: a sequence of tone words with per-word end
/// times. Speakers differ by a slight amplitude so mixtures are not
/// symmetric.
pub fn render_utterance(
    word_indices: &[usize],
    speaker_id: &str,
    amplitude: f64,
) -> (AudioBuffer, Vec<TimedToken>) {
    let sr = SAMPLE_RATE as f64;
    let word_samples = (WORD_TONE_SECS * sr) as usize;
    let gap_samples = (WORD_GAP_SECS * sr) as usize;
    let total = word_indices.len() * (word_samples + gap_samples);
    let mut samples = vec![0.0f64; total];
    let mut tokens = Vec::with_capacity(word_indices.len());
    for (wi, &w) in word_indices.iter().enumerate() {
        let start = wi * (word_samples + gap_samples);
        let freq = word_frequency(w);
        for i in 0..word_samples {
            // Short raised-cosine ramps avoid clicks at word boundaries.
            let ramp_len = 160.0;
            let ramp_in = (i as f64 / ramp_len).min(1.0);
            let ramp_out = ((word_samples - i) as f64 / ramp_len).min(1.0);
            samples[start + i] = amplitude
                * ramp_in
                * ramp_out
                * (2.0 * std::f64::consts::PI * freq * i as f64 / sr).sin();
        }
        let end_time = (start + word_samples) as f64 / sr;
        tokens.push(TimedToken {
            token: SYLLABLES[w].to_string(),
            end_time,
            speaker_id: speaker_id.to_string(),
        });
    }
    let audio = AudioBuffer::new(samples, SAMPLE_RATE).expect("synthesized audio is valid");
    (audio, tokens)
}

/// Generates `spec.size` single-speaker utterances under `dir`: WAV files,
/// timed transcripts and a manifest. Deterministic in the seed.
pub fn make_synthetic_corpus(
    dir: &Path,
    spec: &SynthSpec,
) -> Result<Vec<UtteranceRecord>, HarnessError> {
    assert!(spec.vocab_size >= 2 && spec.vocab_size <= SYLLABLES.len());
    assert!(spec.words_min >= 1 && spec.words_min <= spec.words_max);
    let wav_dir = dir.join("wav");
    let txt_dir = dir.join("transcripts");
    std::fs::create_dir_all(&wav_dir).map_err(|e| HarnessError::Data(e.to_string()))?;
    std::fs::create_dir_all(&txt_dir).map_err(|e| HarnessError::Data(e.to_string()))?;

    let mut records = Vec::with_capacity(spec.size);
    for i in 0..spec.size {
        let mut rng = example_rng(spec.seed, i as u64);
        let num_words = rng.random_range(spec.words_min..=spec.words_max);
        let words: Vec<usize> = (0..num_words)
            .map(|_| rng.random_range(0..spec.vocab_size))
            .collect();
        let speaker = format!("spk{:02}", i % spec.num_speakers);
        let amplitude = 0.25 + 0.02 * (i % spec.num_speakers) as f64;
        let (audio, tokens) = render_utterance(&words, &speaker, amplitude);

        let utt_id = format!("utt{i:04}");
        let wav_path = wav_dir.join(format!("{utt_id}.wav"));
        let txt_path = txt_dir.join(format!("{utt_id}.txt"));
        audio
            .write_wav(&wav_path)
            .map_err(|e| HarnessError::Data(e.to_string()))?;
        write_timed_transcript(&txt_path, &tokens)
            .map_err(|e| HarnessError::Data(e.to_string()))?;
        records.push(UtteranceRecord {
            utterance_id: utt_id,
            speaker_id: speaker,
            audio_path: wav_path,
            transcript_path: Some(txt_path),
            duration_secs: audio.duration_secs(),
        });
    }
    write_manifest(&dir.join("manifest.tsv"), &records)
        .map_err(|e| HarnessError::Data(e.to_string()))?;
    Ok(records)
}

/// Generates a mixed evaluation set from a clean corpus: each example is
/// either a copy of a single utterance or a two-speaker mixture with a
/// random delay, written with its multi-speaker timed transcript.
pub fn make_eval_set(
    dir: &Path,
    corpus: &[LoadedUtterance],
    size: usize,
    mix_probability: f64,
    seed: u64,
) -> Result<Vec<UtteranceRecord>, HarnessError> {
    let wav_dir = dir.join("wav");
    let txt_dir = dir.join("transcripts");
    std::fs::create_dir_all(&wav_dir).map_err(|e| HarnessError::Data(e.to_string()))?;
    std::fs::create_dir_all(&txt_dir).map_err(|e| HarnessError::Data(e.to_string()))?;

    let mut records = Vec::with_capacity(size);
    for i in 0..size {
        let mut rng = ChaCha8Rng::seed_from_u64(
            seed ^ 0x65766121u64
                .wrapping_add(i as u64)
                .wrapping_mul(0x9E3779B97F4A7C15),
        );
        let mixed = rng.random_bool(mix_probability);
        let (audio, tokens) = if mixed {
            let a = &corpus[rng.random_range(0..corpus.len())];
            let partners: Vec<&LoadedUtterance> = corpus
                .iter()
                .filter(|u| u.record.speaker_id != a.record.speaker_id)
                .collect();
            let b = partners[rng.random_range(0..partners.len())];
            simulate_finetune_mixture(a, b, &mut rng)
                .map_err(|e| HarnessError::Data(e.to_string()))?
        } else {
            let u = &corpus[rng.random_range(0..corpus.len())];
            (
                u.audio.clone(),
                u.transcript
                    .clone()
                    .expect("synthetic corpus has transcripts"),
            )
        };
        let utt_id = format!("eval{i:04}");
        let wav_path = wav_dir.join(format!("{utt_id}.wav"));
        let txt_path = txt_dir.join(format!("{utt_id}.txt"));
        audio
            .write_wav(&wav_path)
            .map_err(|e| HarnessError::Data(e.to_string()))?;
        write_timed_transcript(&txt_path, &tokens)
            .map_err(|e| HarnessError::Data(e.to_string()))?;
        let speakers: std::collections::BTreeSet<&str> =
            tokens.iter().map(|t| t.speaker_id.as_str()).collect();
        records.push(UtteranceRecord {
            utterance_id: utt_id,
            speaker_id: speakers.into_iter().collect::<Vec<_>>().join("+"),
            audio_path: wav_path,
            transcript_path: Some(txt_path),
            duration_secs: audio.duration_secs(),
        });
    }
    write_manifest(&dir.join("manifest.tsv"), &records)
        .map_err(|e| HarnessError::Data(e.to_string()))?;
    Ok(records)
}
