//! Toolkit for self-supervised pre-training of streaming multi-talker ASR.
//!
//! The pipeline runs end to end at desk scale: log-mel feature extraction,
//! utterance-mixing augmentation, k-means pseudo-label quantization, masked
//! speech prediction (single- and bi-label) over a chunk-masked streaming
//! transformer, t-SOT transcript serialization, transducer fine-tuning with
//! the RNN-T loss, greedy streaming decoding, and permutation-minimum WER
//! scoring.

pub mod audio;
pub mod checkpoint;
pub mod containers;
pub mod encoder;
pub mod eval;
pub mod featext;
pub mod harness;
pub mod mixer;
pub mod nn;
pub mod quantizer;
pub mod streammask;
pub mod transducer;
pub mod tsot;
