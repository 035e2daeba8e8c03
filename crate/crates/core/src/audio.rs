//! Audio buffers and WAV file I/O.

use std::path::Path;

use thiserror::Error;

/// The only sample rate the pipeline accepts.
pub const SAMPLE_RATE: u32 = 16_000;

#[derive(Error, Debug)]
pub enum AudioError {
    #[error("empty audio")]
    Empty,
    #[error("unsupported sample rate {0} Hz (expected {SAMPLE_RATE})")]
    BadSampleRate(u32),
    #[error("non-finite sample at index {0}")]
    NonFinite(usize),
    #[error("unsupported WAV layout: {0}")]
    BadWav(String),
    #[error("wav: {0}")]
    Hound(#[from] hound::Error),
}

/// Mono audio at 16 kHz, samples in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self, AudioError> {
        if sample_rate != SAMPLE_RATE {
            return Err(AudioError::BadSampleRate(sample_rate));
        }
        if samples.is_empty() {
            return Err(AudioError::Empty);
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(AudioError::NonFinite(i));
        }
        Ok(AudioBuffer {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub(crate) fn samples_mut(&mut self) -> &mut Vec<f64> {
        &mut self.samples
    }

    /// Reads a mono 16-bit PCM RIFF WAV file.
    pub fn read_wav(path: &Path) -> Result<Self, AudioError> {
        let mut reader = hound::WavReader::open(path)?;
        let spec = reader.spec();
        if spec.channels != 1 {
            return Err(AudioError::BadWav(format!(
                "{} channels, expected mono",
                spec.channels
            )));
        }
        if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
            return Err(AudioError::BadWav("expected 16-bit PCM".into()));
        }
        if spec.sample_rate != SAMPLE_RATE {
            return Err(AudioError::BadSampleRate(spec.sample_rate));
        }
        let samples: Vec<f64> = reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<Result<_, _>>()?;
        AudioBuffer::new(samples, SAMPLE_RATE)
    }

    /// Writes a mono 16-bit PCM WAV file.
    pub fn write_wav(&self, path: &Path) -> Result<(), AudioError> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(path, spec)?;
        for &s in &self.samples {
            let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
            writer.write_sample(v)?;
        }
        writer.finalize()?;
        Ok(())
    }
}
