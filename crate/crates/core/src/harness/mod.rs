//! Experiment orchestration: configuration, the synthetic corpus
//! generator, the run manifest, and the pipeline stages behind the CLI.

pub mod config;
pub mod manifest;
pub mod stages;
pub mod synth;

pub use config::{ExperimentConfig, QuantizerKind};
pub use manifest::{sha256_file, RunManifest, StageEntry, MANIFEST_FILE};
pub use stages::{
    build_finetune_items, format_score_summary, run_stage, score_hypotheses, ScoredUtterance, Stage,
};
pub use synth::{make_eval_set, make_synthetic_corpus, render_utterance, SynthSpec};

use thiserror::Error;

/// Harness-level errors, mapped onto process exit codes: usage 1,
/// data/dependency 2, numerical 3.
#[derive(Error, Debug)]
pub enum HarnessError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Usage(_) => 1,
            HarnessError::Data(_) => 2,
            HarnessError::Numerical(_) => 3,
        }
    }
}

impl From<crate::encoder::EncoderError> for HarnessError {
    fn from(e: crate::encoder::EncoderError) -> Self {
        match e {
            crate::encoder::EncoderError::Numerical(m) => HarnessError::Numerical(m),
            other => HarnessError::Data(other.to_string()),
        }
    }
}

impl From<crate::transducer::FinetuneError> for HarnessError {
    fn from(e: crate::transducer::FinetuneError) -> Self {
        match e {
            crate::transducer::FinetuneError::Numerical(m) => HarnessError::Numerical(m),
            crate::transducer::FinetuneError::Encoder(crate::encoder::EncoderError::Numerical(
                m,
            )) => HarnessError::Numerical(m),
            other => HarnessError::Data(other.to_string()),
        }
    }
}
