//! Utterance-mixing augmentation for pre-training and two-speaker mixture
//! simulation for fine-tuning.
//!
//! Pre-training augmentation inserts a short segment of interfering speech
//! (or noise) into a primary utterance at a sampled SNR. The inserted
//! speech segment is capped at half the primary duration, which is what
//! justifies fixed primary/secondary output-node assignment downstream.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::audio::{AudioBuffer, AudioError, SAMPLE_RATE};
use crate::featext::{num_frames_for, HOP_SAMPLES};
use crate::tsot::TimedToken;

/// Speech segment length bounds as fractions of the primary duration.
pub const SPEECH_SEG_FRAC: (f64, f64) = (0.1, 0.5);
/// Noise segment length bounds as fractions of the primary duration.
pub const NOISE_SEG_FRAC: (f64, f64) = (0.5, 1.0);
/// SNR range for speech mixing, dB.
pub const SPEECH_SNR_DB: (f64, f64) = (-5.0, 5.0);
/// SNR range for noise mixing, dB.
pub const NOISE_SNR_DB: (f64, f64) = (0.0, 20.0);
/// Volume perturbation gain range for fine-tuning examples.
pub const VOLUME_GAIN: (f64, f64) = (0.5, 1.5);

#[derive(Error, Debug)]
pub enum MixerError {
    #[error("mixing pool is empty but mixing probability is nonzero")]
    EmptyPool,
    #[error("mix spec out of bounds: {0}")]
    SpecOutOfBounds(String),
    #[error("utterance {0} has no timed transcript")]
    MissingTranscript(String),
    #[error("mixture simulation needs two distinct speakers, got {0:?}")]
    SameSpeaker(String),
    #[error("corpus needs at least 2 speakers for mixing")]
    NeedTwoSpeakers,
    #[error("invalid augmentation config: {0}")]
    BadConfig(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("audio: {0}")]
    Audio(#[from] AudioError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Augmentation mixture over {clean, noise, speech}.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub p_clean: f64,
    pub p_noise: f64,
    pub p_speech: f64,
}

impl AugmentConfig {
    pub fn new(p_clean: f64, p_noise: f64, p_speech: f64) -> Result<Self, MixerError> {
        let c = AugmentConfig {
            p_clean,
            p_noise,
            p_speech,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), MixerError> {
        let ps = [self.p_clean, self.p_noise, self.p_speech];
        if ps.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(MixerError::BadConfig(format!(
                "probabilities out of [0,1]: {ps:?}"
            )));
        }
        let sum: f64 = ps.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(MixerError::BadConfig(format!(
                "probabilities sum to {sum}, expected 1"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixKind {
    None,
    Noise,
    Speech,
}

/// Fully resolved plan for one augmented example.
#[derive(Debug, Clone, PartialEq)]
pub struct MixSpec {
    pub primary_id: String,
    pub kind: MixKind,
    /// Pool utterance supplying the secondary segment (speech kind).
    pub secondary_id: Option<String>,
    /// Segment start within the secondary source, seconds.
    pub segment_start_s: f64,
    /// Segment length, seconds.
    pub segment_len_s: f64,
    /// Where the segment lands inside the primary, seconds.
    pub insert_offset_s: f64,
    /// Mixing SNR in dB (primary energy over scaled secondary energy,
    /// measured on the overlap region).
    pub snr_db: f64,
    /// Seed for synthesized noise when no noise corpus is supplied.
    pub noise_seed: u64,
}

impl MixSpec {
    pub fn clean(primary_id: impl Into<String>) -> Self {
        MixSpec {
            primary_id: primary_id.into(),
            kind: MixKind::None,
            secondary_id: None,
            segment_start_s: 0.0,
            segment_len_s: 0.0,
            insert_offset_s: 0.0,
            snr_db: 0.0,
            noise_seed: 0,
        }
    }

    pub fn segment_start_samples(&self) -> usize {
        (self.segment_start_s * SAMPLE_RATE as f64).round() as usize
    }

    pub fn segment_len_samples(&self) -> usize {
        (self.segment_len_s * SAMPLE_RATE as f64).round() as usize
    }

    pub fn insert_offset_samples(&self) -> usize {
        (self.insert_offset_s * SAMPLE_RATE as f64).round() as usize
    }
}

/// Per-feature-frame flag: secondary speech active at this frame. A frame
/// covers its 10 ms hop interval.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PresenceMask {
    active: Vec<bool>,
}

impl PresenceMask {
    pub fn all_inactive(num_frames: usize) -> Self {
        PresenceMask {
            active: vec![false; num_frames],
        }
    }

    pub fn from_bools(active: Vec<bool>) -> Self {
        PresenceMask { active }
    }

    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }

    pub fn active(&self, frame: usize) -> bool {
        self.active[frame]
    }

    pub fn count_active(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }
}

/// Manifest entry for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceRecord {
    pub utterance_id: String,
    pub speaker_id: String,
    pub audio_path: PathBuf,
    pub transcript_path: Option<PathBuf>,
    pub duration_secs: f64,
}

/// Utterance with its audio (and transcript, when present) in memory.
#[derive(Debug, Clone)]
pub struct LoadedUtterance {
    pub record: UtteranceRecord,
    pub audio: AudioBuffer,
    pub transcript: Option<Vec<TimedToken>>,
}

impl LoadedUtterance {
    pub fn load(record: &UtteranceRecord) -> Result<Self, MixerError> {
        let audio = AudioBuffer::read_wav(&record.audio_path)?;
        let transcript = match &record.transcript_path {
            Some(p) => Some(read_timed_transcript(p)?),
            None => None,
        };
        Ok(LoadedUtterance {
            record: record.clone(),
            audio,
            transcript,
        })
    }
}

/// Reads a corpus manifest: one record per line,
/// `utterance_id TAB speaker_id TAB audio_path TAB transcript_path|- TAB duration_secs`.
pub fn read_manifest(path: &Path) -> Result<Vec<UtteranceRecord>, MixerError> {
    let r = BufReader::new(File::open(path)?);
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(MixerError::Manifest(format!(
                "line {}: expected 5 tab-separated fields, got {}",
                i + 1,
                fields.len()
            )));
        }
        let resolve = |p: &str| {
            let pb = PathBuf::from(p);
            if pb.is_absolute() {
                pb
            } else {
                base.join(pb)
            }
        };
        let duration_secs: f64 = fields[4].parse().map_err(|_| {
            MixerError::Manifest(format!("line {}: bad duration {:?}", i + 1, fields[4]))
        })?;
        out.push(UtteranceRecord {
            utterance_id: fields[0].to_string(),
            speaker_id: fields[1].to_string(),
            audio_path: resolve(fields[2]),
            transcript_path: if fields[3] == "-" {
                None
            } else {
                Some(resolve(fields[3]))
            },
            duration_secs,
        });
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, records: &[UtteranceRecord]) -> Result<(), MixerError> {
    let mut w = File::create(path)?;
    for r in records {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{:.3}",
            r.utterance_id,
            r.speaker_id,
            r.audio_path.display(),
            r.transcript_path
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_else(|| "-".into()),
            r.duration_secs
        )?;
    }
    Ok(())
}

/// Reads a timed transcript: one token per line,
/// `surface TAB end_time_secs TAB speaker_id`. End times must be
/// non-decreasing within each speaker.
pub fn read_timed_transcript(path: &Path) -> Result<Vec<TimedToken>, MixerError> {
    let r = BufReader::new(File::open(path)?);
    let mut out: Vec<TimedToken> = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(MixerError::Manifest(format!(
                "transcript line {}: expected 3 fields, got {}",
                i + 1,
                fields.len()
            )));
        }
        let end_time: f64 = fields[1].parse().map_err(|_| {
            MixerError::Manifest(format!("transcript line {}: bad end time", i + 1))
        })?;
        if end_time < 0.0 {
            return Err(MixerError::Manifest(format!(
                "transcript line {}: negative end time",
                i + 1
            )));
        }
        if let Some(prev) = out.iter().rev().find(|t| t.speaker_id == fields[2]) {
            if end_time < prev.end_time {
                return Err(MixerError::Manifest(format!(
                    "transcript line {}: end times decrease for speaker {}",
                    i + 1,
                    fields[2]
                )));
            }
        }
        out.push(TimedToken {
            token: fields[0].to_string(),
            end_time,
            speaker_id: fields[2].to_string(),
        });
    }
    Ok(out)
}

pub fn write_timed_transcript(path: &Path, tokens: &[TimedToken]) -> Result<(), MixerError> {
    let mut w = File::create(path)?;
    for t in tokens {
        writeln!(w, "{}\t{:.3}\t{}", t.token, t.end_time, t.speaker_id)?;
    }
    Ok(())
}

/// Draws an augmentation plan for one primary utterance.
///
/// Speech segments are uniform in [0.1, 0.5] x primary duration (capped by
/// the secondary source), noise segments uniform in [0.5, 1.0] x primary
/// duration; insert offsets are uniform over placements that fit.
pub fn sample_mix_spec(
    config: &AugmentConfig,
    primary: &UtteranceRecord,
    pool: &[UtteranceRecord],
    rng: &mut impl Rng,
) -> Result<MixSpec, MixerError> {
    config.validate()?;
    if config.p_noise + config.p_speech > 0.0 && pool.is_empty() {
        return Err(MixerError::EmptyPool);
    }
    let u: f64 = rng.random();
    let kind = if u < config.p_clean {
        MixKind::None
    } else if u < config.p_clean + config.p_noise {
        MixKind::Noise
    } else {
        MixKind::Speech
    };
    // Sample positions in whole samples so segment bounds are exact.
    let sr = SAMPLE_RATE as f64;
    let prim_samples = (primary.duration_secs * sr).round() as i64;
    let secs = |samples: i64| samples as f64 / sr;
    match kind {
        MixKind::None => Ok(MixSpec::clean(&primary.utterance_id)),
        MixKind::Noise => {
            let lo = ((NOISE_SEG_FRAC.0 * prim_samples as f64) as i64).max(1);
            let hi = ((NOISE_SEG_FRAC.1 * prim_samples as f64) as i64).max(lo);
            let seg = rng.random_range(lo..=hi).min(prim_samples);
            let insert = rng.random_range(0..=(prim_samples - seg).max(0));
            Ok(MixSpec {
                primary_id: primary.utterance_id.clone(),
                kind,
                secondary_id: None,
                segment_start_s: 0.0,
                segment_len_s: secs(seg),
                insert_offset_s: secs(insert),
                snr_db: rng.random_range(NOISE_SNR_DB.0..NOISE_SNR_DB.1),
                noise_seed: rng.random(),
            })
        }
        MixKind::Speech => {
            let candidates: Vec<&UtteranceRecord> = pool
                .iter()
                .filter(|r| r.utterance_id != primary.utterance_id)
                .collect();
            if candidates.is_empty() {
                return Err(MixerError::EmptyPool);
            }
            let secondary = candidates[rng.random_range(0..candidates.len())];
            let sec_samples = (secondary.duration_secs * sr).round() as i64;
            let lo = ((SPEECH_SEG_FRAC.0 * prim_samples as f64) as i64).max(1);
            let hi = ((SPEECH_SEG_FRAC.1 * prim_samples as f64) as i64).max(lo);
            let seg = rng.random_range(lo..=hi).min(sec_samples).min(prim_samples);
            let seg_start = rng.random_range(0..=(sec_samples - seg).max(0));
            let insert = rng.random_range(0..=(prim_samples - seg).max(0));
            Ok(MixSpec {
                primary_id: primary.utterance_id.clone(),
                kind,
                secondary_id: Some(secondary.utterance_id.clone()),
                segment_start_s: secs(seg_start),
                segment_len_s: secs(seg),
                insert_offset_s: secs(insert),
                snr_db: rng.random_range(SPEECH_SNR_DB.0..SPEECH_SNR_DB.1),
                noise_seed: 0,
            })
        }
    }
}

/// Deterministic colored noise: white noise through a one-pole lowpass,
/// scaled to a fixed RMS. Keeps the toolkit self-contained when no noise
/// corpus is supplied.
pub fn synth_colored_noise(seed: u64, num_samples: usize) -> AudioBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(num_samples.max(1));
    let mut prev = 0.0f64;
    for _ in 0..num_samples.max(1) {
        let white: f64 = rng.random_range(-1.0..1.0);
        prev = 0.95 * prev + 0.05 * white;
        out.push(prev);
    }
    let rms = (out.iter().map(|x| x * x).sum::<f64>() / out.len() as f64).sqrt();
    if rms > 0.0 {
        let g = 0.25 / rms;
        for x in out.iter_mut() {
            *x = (*x * g).clamp(-1.0, 1.0);
        }
    }
    AudioBuffer::new(out, SAMPLE_RATE).expect("synthesized noise is valid audio")
}

/// Result of applying a mix plan.
#[derive(Debug, Clone)]
pub struct MixOutcome {
    pub audio: AudioBuffer,
    pub presence: PresenceMask,
    /// Samples clamped to [-1, 1] during addition.
    pub clipped_samples: usize,
}

/// Scales the secondary segment to the spec's SNR relative to the primary's
/// energy over the overlap region, adds it in place, and clamps.
///
/// The output length equals the primary length; samples outside the overlap
/// are bit-identical to the primary. The presence mask marks overlapped
/// feature frames for speech mixes and is all false otherwise.
pub fn apply_mix(
    primary: &AudioBuffer,
    spec: &MixSpec,
    secondary: Option<&AudioBuffer>,
) -> Result<MixOutcome, MixerError> {
    let t_frames = num_frames_for(primary.len());
    if spec.kind == MixKind::None {
        return Ok(MixOutcome {
            audio: primary.clone(),
            presence: PresenceMask::all_inactive(t_frames),
            clipped_samples: 0,
        });
    }
    let secondary = match (spec.kind, secondary) {
        (MixKind::Noise, None) => None,
        (_, Some(s)) => Some(s),
        (k, None) => {
            return Err(MixerError::SpecOutOfBounds(format!(
                "{k:?} mix without a secondary buffer"
            )))
        }
    };
    let synth;
    let sec_buf: &AudioBuffer = match secondary {
        Some(s) => s,
        None => {
            synth = synth_colored_noise(spec.noise_seed, spec.segment_len_samples());
            &synth
        }
    };

    let seg_start = spec.segment_start_samples();
    let seg_len = spec.segment_len_samples();
    let insert = spec.insert_offset_samples();
    if seg_len == 0 {
        return Err(MixerError::SpecOutOfBounds("zero-length segment".into()));
    }
    if seg_start + seg_len > sec_buf.len() {
        return Err(MixerError::SpecOutOfBounds(format!(
            "segment [{seg_start}, {}) exceeds secondary length {}",
            seg_start + seg_len,
            sec_buf.len()
        )));
    }
    if insert + seg_len > primary.len() {
        return Err(MixerError::SpecOutOfBounds(format!(
            "insert [{insert}, {}) exceeds primary length {}",
            insert + seg_len,
            primary.len()
        )));
    }

    let p = primary.samples();
    let s = &sec_buf.samples()[seg_start..seg_start + seg_len];
    let e_primary: f64 = p[insert..insert + seg_len].iter().map(|x| x * x).sum();
    let e_secondary: f64 = s.iter().map(|x| x * x).sum();
    // snr = 10 log10(Ep / (g^2 Es))  =>  g = sqrt(Ep / (Es 10^(snr/10)))
    let gain = if e_secondary <= 0.0 || spec.snr_db.is_infinite() && spec.snr_db > 0.0 {
        0.0
    } else {
        (e_primary / (e_secondary * 10f64.powf(spec.snr_db / 10.0))).sqrt()
    };

    let mut out = primary.clone();
    let mut clipped = 0usize;
    {
        let samples = out.samples_mut();
        for (i, &sv) in s.iter().enumerate() {
            let v = samples[insert + i] + gain * sv;
            let clamped = v.clamp(-1.0, 1.0);
            if clamped != v {
                clipped += 1;
            }
            samples[insert + i] = clamped;
        }
    }

    let mut presence = PresenceMask::all_inactive(t_frames);
    if spec.kind == MixKind::Speech {
        let (a, b) = (insert, insert + seg_len);
        for (t, flag) in presence.active.iter_mut().enumerate() {
            let lo = t * HOP_SAMPLES;
            let hi = lo + HOP_SAMPLES;
            *flag = lo < b && a < hi;
        }
    }
    Ok(MixOutcome {
        audio: out,
        presence,
        clipped_samples: clipped,
    })
}

/// Overlays utterance b on utterance a at a fixed delay, shifting b's
/// token end times by the delay.
pub fn mix_at_delay(
    a: &LoadedUtterance,
    b: &LoadedUtterance,
    delay_s: f64,
) -> Result<(AudioBuffer, Vec<TimedToken>), MixerError> {
    let ta = a
        .transcript
        .as_ref()
        .ok_or_else(|| MixerError::MissingTranscript(a.record.utterance_id.clone()))?;
    let tb = b
        .transcript
        .as_ref()
        .ok_or_else(|| MixerError::MissingTranscript(b.record.utterance_id.clone()))?;
    if a.record.speaker_id == b.record.speaker_id {
        return Err(MixerError::SameSpeaker(a.record.speaker_id.clone()));
    }
    let delay = (delay_s * SAMPLE_RATE as f64).round() as usize;
    let out_len = a.audio.len().max(delay + b.audio.len());
    let mut samples = vec![0.0f64; out_len];
    samples[..a.audio.len()].copy_from_slice(a.audio.samples());
    for (i, &v) in b.audio.samples().iter().enumerate() {
        samples[delay + i] = (samples[delay + i] + v).clamp(-1.0, 1.0);
    }
    let audio = AudioBuffer::new(samples, SAMPLE_RATE)?;
    let mut tokens = ta.clone();
    tokens.extend(tb.iter().map(|t| TimedToken {
        token: t.token.clone(),
        end_time: t.end_time + delay as f64 / SAMPLE_RATE as f64,
        speaker_id: t.speaker_id.clone(),
    }));
    Ok((audio, tokens))
}

/// Overlays utterance b on utterance a at a random delay uniform in
/// [0, duration(a)].
pub fn simulate_finetune_mixture(
    a: &LoadedUtterance,
    b: &LoadedUtterance,
    rng: &mut impl Rng,
) -> Result<(AudioBuffer, Vec<TimedToken>), MixerError> {
    let delay_s: f64 = rng.random_range(0.0..=a.audio.duration_secs());
    mix_at_delay(a, b, delay_s)
}

/// One training example emitted by the fine-tuning stream.
#[derive(Debug, Clone)]
pub struct FinetuneExample {
    pub index: u64,
    pub audio: AudioBuffer,
    pub tokens: Vec<TimedToken>,
    pub is_mixed: bool,
}

/// Splitmix64, used to derive per-example seeds from a master seed.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Deterministic per-example generator: identical regardless of which
/// worker evaluates the example.
pub fn example_rng(master_seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(master_seed ^ splitmix64(index)))
}

/// On-the-fly stream of fine-tuning examples: a fair coin picks single vs
/// two-speaker mixed, volume perturbation optionally applied.
pub struct BatchMixStream<'a> {
    corpus: &'a [LoadedUtterance],
    mix_probability: f64,
    volume_perturb: bool,
    master_seed: u64,
    next_index: u64,
}

impl<'a> BatchMixStream<'a> {
    pub fn new(
        corpus: &'a [LoadedUtterance],
        mix_probability: f64,
        volume_perturb: bool,
        master_seed: u64,
    ) -> Result<Self, MixerError> {
        if corpus.is_empty() {
            return Err(MixerError::EmptyPool);
        }
        if mix_probability > 0.0 {
            let first = &corpus[0].record.speaker_id;
            if corpus.iter().all(|u| &u.record.speaker_id == first) {
                return Err(MixerError::NeedTwoSpeakers);
            }
        }
        Ok(BatchMixStream {
            corpus,
            mix_probability,
            volume_perturb,
            master_seed,
            next_index: 0,
        })
    }

    /// Builds the example at a given stream position; pure in
    /// (corpus, seed, index).
    pub fn example_at(&self, index: u64) -> Result<FinetuneExample, MixerError> {
        let mut rng = example_rng(self.master_seed, index);
        let mixed = rng.random_bool(self.mix_probability);
        let (mut audio, tokens) = if mixed {
            let a = &self.corpus[rng.random_range(0..self.corpus.len())];
            let partners: Vec<&LoadedUtterance> = self
                .corpus
                .iter()
                .filter(|u| u.record.speaker_id != a.record.speaker_id)
                .collect();
            let b = partners[rng.random_range(0..partners.len())];
            simulate_finetune_mixture(a, b, &mut rng)?
        } else {
            let u = &self.corpus[rng.random_range(0..self.corpus.len())];
            let t = u
                .transcript
                .clone()
                .ok_or_else(|| MixerError::MissingTranscript(u.record.utterance_id.clone()))?;
            (u.audio.clone(), t)
        };
        if self.volume_perturb {
            let gain = rng.random_range(VOLUME_GAIN.0..VOLUME_GAIN.1);
            for s in audio.samples_mut() {
                *s = (*s * gain).clamp(-1.0, 1.0);
            }
        }
        Ok(FinetuneExample {
            index,
            audio,
            tokens,
            is_mixed: mixed,
        })
    }
}

impl Iterator for BatchMixStream<'_> {
    type Item = Result<FinetuneExample, MixerError>;

    fn next(&mut self) -> Option<Self::Item> {
        let ex = self.example_at(self.next_index);
        self.next_index += 1;
        Some(ex)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rec(id: &str, spk: &str, dur: f64) -> UtteranceRecord {
        UtteranceRecord {
            utterance_id: id.into(),
            speaker_id: spk.into(),
            audio_path: PathBuf::from(format!("{id}.wav")),
            transcript_path: None,
            duration_secs: dur,
        }
    }

    fn tone(freq: f64, secs: f64, amp: f64) -> AudioBuffer {
        let n = (secs * SAMPLE_RATE as f64) as usize;
        AudioBuffer::new(
            (0..n)
                .map(|i| {
                    amp * (2.0 * std::f64::consts::PI * freq * i as f64 / SAMPLE_RATE as f64).sin()
                })
                .collect(),
            SAMPLE_RATE,
        )
        .unwrap()
    }

    #[test]
    fn all_clean_config_never_mixes() {
        let cfg = AugmentConfig::new(1.0, 0.0, 0.0).unwrap();
        let primary = rec("p", "spk0", 2.0);
        let pool = vec![rec("q", "spk1", 2.0)];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let spec = sample_mix_spec(&cfg, &primary, &pool, &mut rng).unwrap();
            assert_eq!(spec.kind, MixKind::None);
        }
    }

    #[test]
    fn half_speech_config_hits_its_ratio() {
        let cfg = AugmentConfig::new(0.5, 0.0, 0.5).unwrap();
        let primary = rec("p", "spk0", 2.0);
        let pool = vec![rec("q", "spk1", 2.0), rec("r", "spk2", 3.0)];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 10_000;
        let mut speech = 0;
        for _ in 0..n {
            if sample_mix_spec(&cfg, &primary, &pool, &mut rng)
                .unwrap()
                .kind
                == MixKind::Speech
            {
                speech += 1;
            }
        }
        let frac = speech as f64 / n as f64;
        assert!((frac - 0.5).abs() <= 0.02, "speech fraction {frac}");
    }

    #[test]
    fn wavlm_style_config_hits_its_ratios() {
        let cfg = AugmentConfig::new(0.8, 0.1, 0.1).unwrap();
        let primary = rec("p", "spk0", 2.0);
        let pool = vec![rec("q", "spk1", 2.0)];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 10_000;
        let (mut noise, mut speech) = (0, 0);
        for _ in 0..n {
            match sample_mix_spec(&cfg, &primary, &pool, &mut rng)
                .unwrap()
                .kind
            {
                MixKind::Noise => noise += 1,
                MixKind::Speech => speech += 1,
                MixKind::None => {}
            }
        }
        assert!((noise as f64 / n as f64 - 0.1).abs() <= 0.01);
        assert!((speech as f64 / n as f64 - 0.1).abs() <= 0.01);
    }

    #[test]
    fn empty_pool_with_mixing_is_a_config_error() {
        let cfg = AugmentConfig::new(0.5, 0.0, 0.5).unwrap();
        let primary = rec("p", "spk0", 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert!(matches!(
            sample_mix_spec(&cfg, &primary, &[], &mut rng),
            Err(MixerError::EmptyPool)
        ));
    }

    #[test]
    fn speech_segments_respect_the_half_duration_cap() {
        let cfg = AugmentConfig::new(0.0, 0.0, 1.0).unwrap();
        let primary = rec("p", "spk0", 2.0);
        let pool = vec![rec("q", "spk1", 5.0)];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let spec = sample_mix_spec(&cfg, &primary, &pool, &mut rng).unwrap();
            assert!(spec.segment_len_s <= 0.5 * primary.duration_secs + 1e-12);
            assert!(spec.segment_len_s >= 0.1 * primary.duration_secs - 1e-12);
            assert!(spec.insert_offset_s + spec.segment_len_s <= primary.duration_secs + 1e-12);
            assert!(spec.segment_start_s + spec.segment_len_s <= 5.0 + 1e-12);
        }
    }

    #[test]
    fn clean_mix_is_bit_identical_with_inactive_mask() {
        let primary = tone(300.0, 1.0, 0.5);
        let spec = MixSpec::clean("p");
        let out = apply_mix(&primary, &spec, None).unwrap();
        assert_eq!(out.audio, primary);
        assert_eq!(out.presence.count_active(), 0);
        assert_eq!(out.clipped_samples, 0);
    }

    #[test]
    fn infinite_snr_leaves_primary_unchanged() {
        let primary = tone(300.0, 1.0, 0.5);
        let secondary = tone(700.0, 1.0, 0.5);
        let spec = MixSpec {
            primary_id: "p".into(),
            kind: MixKind::Speech,
            secondary_id: Some("q".into()),
            segment_start_s: 0.1,
            segment_len_s: 0.4,
            insert_offset_s: 0.2,
            snr_db: f64::INFINITY,
            noise_seed: 0,
        };
        let out = apply_mix(&primary, &spec, Some(&secondary)).unwrap();
        for (a, b) in out.audio.samples().iter().zip(primary.samples()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_db_snr_equalizes_overlap_energies_counterphase() {
        // Secondary = inverted copy of the primary overlap region, so the
        // 0 dB gain is exactly 1 and no sample clips.
        let primary = tone(440.0, 1.0, 1.0);
        let insert = 4000usize;
        let seg = 6000usize;
        let sec_samples: Vec<f64> = primary.samples()[insert..insert + seg]
            .iter()
            .map(|x| -x)
            .collect();
        let secondary = AudioBuffer::new(sec_samples, SAMPLE_RATE).unwrap();
        let spec = MixSpec {
            primary_id: "p".into(),
            kind: MixKind::Speech,
            secondary_id: Some("q".into()),
            segment_start_s: 0.0,
            segment_len_s: seg as f64 / SAMPLE_RATE as f64,
            insert_offset_s: insert as f64 / SAMPLE_RATE as f64,
            snr_db: 0.0,
            noise_seed: 0,
        };
        let out = apply_mix(&primary, &spec, Some(&secondary)).unwrap();
        assert_eq!(out.clipped_samples, 0);
        // Independent RMS oracle over the overlap: the added component must
        // carry the same energy as the primary there.
        let added: Vec<f64> = out.audio.samples()[insert..insert + seg]
            .iter()
            .zip(&primary.samples()[insert..insert + seg])
            .map(|(m, p)| m - p)
            .collect();
        let rms = |v: &[f64]| (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();
        let r_primary = rms(&primary.samples()[insert..insert + seg]);
        let r_added = rms(&added);
        assert!(
            (r_added / r_primary - 1.0).abs() < 1e-9,
            "overlap RMS ratio {}",
            r_added / r_primary
        );
    }

    #[test]
    fn requested_snr_is_realized_per_rms_oracle() {
        let primary = tone(350.0, 1.0, 0.3);
        let secondary = tone(900.0, 1.0, 0.3);
        for snr_db in [-5.0, 0.0, 5.0, 12.5] {
            let spec = MixSpec {
                primary_id: "p".into(),
                kind: MixKind::Speech,
                secondary_id: Some("q".into()),
                segment_start_s: 0.05,
                segment_len_s: 0.5,
                insert_offset_s: 0.25,
                snr_db,
                noise_seed: 0,
            };
            let out = apply_mix(&primary, &spec, Some(&secondary)).unwrap();
            assert_eq!(out.clipped_samples, 0);
            let (a, b) = (
                spec.insert_offset_samples(),
                spec.insert_offset_samples() + spec.segment_len_samples(),
            );
            let added: Vec<f64> = out.audio.samples()[a..b]
                .iter()
                .zip(&primary.samples()[a..b])
                .map(|(m, p)| m - p)
                .collect();
            let e = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
            let measured = 10.0 * (e(&primary.samples()[a..b]) / e(&added)).log10();
            assert!(
                (measured - snr_db).abs() < 1e-6,
                "snr {measured} vs {snr_db}"
            );
        }
    }

    #[test]
    fn primary_is_untouched_outside_the_overlap() {
        let primary = tone(500.0, 1.0, 0.4);
        let secondary = tone(800.0, 1.0, 0.4);
        let spec = MixSpec {
            primary_id: "p".into(),
            kind: MixKind::Speech,
            secondary_id: Some("q".into()),
            segment_start_s: 0.0,
            segment_len_s: 0.3,
            insert_offset_s: 0.5,
            snr_db: 0.0,
            noise_seed: 0,
        };
        let out = apply_mix(&primary, &spec, Some(&secondary)).unwrap();
        let (a, b) = (
            spec.insert_offset_samples(),
            spec.insert_offset_samples() + spec.segment_len_samples(),
        );
        for i in 0..primary.len() {
            if i < a || i >= b {
                assert_eq!(out.audio.samples()[i], primary.samples()[i], "sample {i}");
            }
        }
        assert_eq!(out.audio.len(), primary.len());
    }

    #[test]
    fn out_of_bounds_segment_is_rejected() {
        let primary = tone(500.0, 1.0, 0.4);
        let secondary = tone(800.0, 0.2, 0.4);
        let spec = MixSpec {
            primary_id: "p".into(),
            kind: MixKind::Speech,
            secondary_id: Some("q".into()),
            segment_start_s: 0.1,
            segment_len_s: 0.3,
            insert_offset_s: 0.0,
            snr_db: 0.0,
            noise_seed: 0,
        };
        assert!(matches!(
            apply_mix(&primary, &spec, Some(&secondary)),
            Err(MixerError::SpecOutOfBounds(_))
        ));
    }

    #[test]
    fn presence_mask_tracks_segment_duration_within_one_frame() {
        let primary = tone(500.0, 1.2, 0.4);
        let secondary = tone(800.0, 1.0, 0.4);
        let spec = MixSpec {
            primary_id: "p".into(),
            kind: MixKind::Speech,
            secondary_id: Some("q".into()),
            segment_start_s: 0.2,
            segment_len_s: 0.37,
            insert_offset_s: 0.41,
            snr_db: 3.0,
            noise_seed: 0,
        };
        let out = apply_mix(&primary, &spec, Some(&secondary)).unwrap();
        assert_eq!(out.presence.len(), num_frames_for(primary.len()));
        let active_frames = out.presence.count_active();
        let seg_frames = spec.segment_len_s / 0.010;
        assert!((active_frames as f64 - seg_frames).abs() <= 1.0 + 1e-9);
        // Noise mixes carry an all-false mask.
        let nspec = MixSpec {
            kind: MixKind::Noise,
            secondary_id: None,
            segment_start_s: 0.0,
            ..spec
        };
        let nout = apply_mix(&primary, &nspec, None).unwrap();
        assert_eq!(nout.presence.count_active(), 0);
    }

    fn loaded(id: &str, spk: &str, audio: AudioBuffer, tokens: Vec<TimedToken>) -> LoadedUtterance {
        LoadedUtterance {
            record: UtteranceRecord {
                utterance_id: id.into(),
                speaker_id: spk.into(),
                audio_path: PathBuf::from(format!("{id}.wav")),
                transcript_path: None,
                duration_secs: audio.duration_secs(),
            },
            audio,
            transcript: Some(tokens),
        }
    }

    fn tok(t: &str, end: f64, spk: &str) -> TimedToken {
        TimedToken {
            token: t.into(),
            end_time: end,
            speaker_id: spk.into(),
        }
    }

    #[test]
    fn mixture_shifts_b_tokens_by_the_delay() {
        let a = loaded(
            "a",
            "spkA",
            tone(400.0, 1.0, 0.3),
            vec![tok("x", 0.5, "spkA"), tok("y", 0.9, "spkA")],
        );
        let b = loaded(
            "b",
            "spkB",
            tone(700.0, 0.6, 0.3),
            vec![tok("z", 0.4, "spkB")],
        );
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (audio, tokens) = simulate_finetune_mixture(&a, &b, &mut rng).unwrap();
        let delay = tokens
            .iter()
            .find(|t| t.speaker_id == "spkB")
            .map(|t| t.end_time - 0.4)
            .unwrap();
        assert!(delay >= 0.0 && delay <= 1.0 + 1e-9);
        let expected_len = a
            .audio
            .len()
            .max((delay * SAMPLE_RATE as f64).round() as usize + b.audio.len());
        assert_eq!(audio.len(), expected_len);
    }

    #[test]
    fn abutting_mixture_serializes_with_exactly_one_cc() {
        let a = loaded(
            "a",
            "spkA",
            tone(400.0, 1.0, 0.3),
            vec![tok("x", 0.5, "spkA"), tok("y", 0.9, "spkA")],
        );
        let b = loaded(
            "b",
            "spkB",
            tone(700.0, 0.6, 0.3),
            vec![tok("z", 0.4, "spkB")],
        );
        let (audio, tokens) = mix_at_delay(&a, &b, a.audio.duration_secs()).unwrap();
        assert_eq!(audio.len(), a.audio.len() + b.audio.len());
        let s = crate::tsot::serialize(&tokens).unwrap();
        let cc_count = s
            .tokens()
            .iter()
            .filter(|t| *t == crate::tsot::CC_TOKEN)
            .count();
        assert_eq!(
            cc_count,
            1,
            "zero overlap means one channel change: {}",
            s.text()
        );
    }

    #[test]
    fn zero_delay_fully_overlaps_the_shorter_utterance() {
        let a = loaded(
            "a",
            "spkA",
            tone(400.0, 1.0, 0.3),
            vec![tok("x", 0.9, "spkA")],
        );
        let b = loaded(
            "b",
            "spkB",
            tone(700.0, 0.4, 0.3),
            vec![tok("z", 0.3, "spkB")],
        );
        let (audio, tokens) = mix_at_delay(&a, &b, 0.0).unwrap();
        assert_eq!(audio.len(), a.audio.len());
        let z = tokens.iter().find(|t| t.speaker_id == "spkB").unwrap();
        assert!((z.end_time - 0.3).abs() < 1e-12);
    }

    #[test]
    fn transcript_reader_rejects_decreasing_end_times() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.txt");
        std::fs::write(&p, "x\t1.0\tspkA\ny\t0.5\tspkA\n").unwrap();
        assert!(matches!(
            read_timed_transcript(&p),
            Err(MixerError::Manifest(_))
        ));
        std::fs::write(&p, "x\t1.0\tspkA\ny\t0.5\tspkB\n").unwrap();
        assert!(
            read_timed_transcript(&p).is_ok(),
            "other speakers may interleave"
        );
    }

    #[test]
    fn missing_transcript_is_a_data_error() {
        let mut a = loaded("a", "spkA", tone(400.0, 0.5, 0.3), vec![]);
        a.transcript = None;
        let b = loaded(
            "b",
            "spkB",
            tone(700.0, 0.5, 0.3),
            vec![tok("z", 0.4, "spkB")],
        );
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        assert!(matches!(
            simulate_finetune_mixture(&a, &b, &mut rng),
            Err(MixerError::MissingTranscript(_))
        ));
    }

    #[test]
    fn delay_distribution_is_uniform_by_ks_test() {
        let a = loaded(
            "a",
            "spkA",
            tone(400.0, 1.0, 0.3),
            vec![tok("x", 0.5, "spkA")],
        );
        let b = loaded(
            "b",
            "spkB",
            tone(700.0, 0.5, 0.3),
            vec![tok("z", 0.25, "spkB")],
        );
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 1000;
        let mut delays: Vec<f64> = (0..n)
            .map(|_| {
                let (_, tokens) = simulate_finetune_mixture(&a, &b, &mut rng).unwrap();
                tokens
                    .iter()
                    .find(|t| t.speaker_id == "spkB")
                    .unwrap()
                    .end_time
                    - 0.25
            })
            .collect();
        delays.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let dur = a.audio.duration_secs();
        // One-sample Kolmogorov-Smirnov statistic against U[0, dur].
        let mut d = 0.0f64;
        for (i, &x) in delays.iter().enumerate() {
            let cdf = (x / dur).clamp(0.0, 1.0);
            d = d.max(((i + 1) as f64 / n as f64 - cdf).abs());
            d = d.max((cdf - i as f64 / n as f64).abs());
        }
        // Critical value at alpha = 0.01 for large n.
        let crit = 1.628 / (n as f64).sqrt();
        assert!(d < crit, "KS statistic {d} >= {crit}");
    }

    fn tiny_corpus() -> Vec<LoadedUtterance> {
        vec![
            loaded(
                "u0",
                "spkA",
                tone(300.0, 0.5, 0.3),
                vec![tok("a", 0.4, "spkA")],
            ),
            loaded(
                "u1",
                "spkB",
                tone(500.0, 0.5, 0.3),
                vec![tok("b", 0.4, "spkB")],
            ),
            loaded(
                "u2",
                "spkA",
                tone(700.0, 0.5, 0.3),
                vec![tok("c", 0.4, "spkA")],
            ),
            loaded(
                "u3",
                "spkB",
                tone(900.0, 0.5, 0.3),
                vec![tok("d", 0.4, "spkB")],
            ),
        ]
    }

    #[test]
    fn batchmix_hits_the_half_and_half_ratio() {
        let corpus = tiny_corpus();
        let stream = BatchMixStream::new(&corpus, 0.5, false, 99).unwrap();
        let n = 10_000u64;
        let mixed = (0..n)
            .filter(|&i| stream.example_at(i).unwrap().is_mixed)
            .count();
        let frac = mixed as f64 / n as f64;
        assert!((frac - 0.5).abs() <= 0.02, "mixed fraction {frac}");
    }

    #[test]
    fn forced_mixing_on_a_two_utterance_corpus() {
        let corpus = vec![
            loaded(
                "u0",
                "spkA",
                tone(300.0, 0.5, 0.3),
                vec![tok("a", 0.4, "spkA")],
            ),
            loaded(
                "u1",
                "spkB",
                tone(500.0, 0.5, 0.3),
                vec![tok("b", 0.4, "spkB")],
            ),
        ];
        let stream = BatchMixStream::new(&corpus, 1.0, false, 7).unwrap();
        for i in 0..20 {
            let ex = stream.example_at(i).unwrap();
            assert!(ex.is_mixed);
            let speakers: std::collections::BTreeSet<&str> =
                ex.tokens.iter().map(|t| t.speaker_id.as_str()).collect();
            assert_eq!(speakers.len(), 2);
        }
    }

    #[test]
    fn single_speaker_corpus_with_mixing_is_rejected() {
        let corpus = vec![
            loaded(
                "u0",
                "spkA",
                tone(300.0, 0.5, 0.3),
                vec![tok("a", 0.4, "spkA")],
            ),
            loaded(
                "u1",
                "spkA",
                tone(500.0, 0.5, 0.3),
                vec![tok("b", 0.4, "spkA")],
            ),
        ];
        assert!(matches!(
            BatchMixStream::new(&corpus, 0.5, false, 7),
            Err(MixerError::NeedTwoSpeakers)
        ));
    }

    #[test]
    fn fixed_seed_reproduces_the_stream() {
        let corpus = tiny_corpus();
        let s1 = BatchMixStream::new(&corpus, 0.5, true, 1234).unwrap();
        let s2 = BatchMixStream::new(&corpus, 0.5, true, 1234).unwrap();
        for i in 0..50 {
            let a = s1.example_at(i).unwrap();
            let b = s2.example_at(i).unwrap();
            assert_eq!(a.audio, b.audio);
            assert_eq!(a.is_mixed, b.is_mixed);
            assert_eq!(a.tokens.len(), b.tokens.len());
        }
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("manifest.tsv");
        let records = vec![
            UtteranceRecord {
                utterance_id: "u0".into(),
                speaker_id: "spkA".into(),
                audio_path: dir.path().join("u0.wav"),
                transcript_path: Some(dir.path().join("u0.txt")),
                duration_secs: 1.25,
            },
            UtteranceRecord {
                utterance_id: "u1".into(),
                speaker_id: "spkB".into(),
                audio_path: dir.path().join("u1.wav"),
                transcript_path: None,
                duration_secs: 0.75,
            },
        ];
        write_manifest(&p, &records).unwrap();
        let back = read_manifest(&p).unwrap();
        assert_eq!(back, records);
    }
}
