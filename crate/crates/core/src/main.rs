//! Command-line entry point for the pipeline: synth, features, quantize,
//! pretrain, finetune, decode, score, and the streaming-mask dump.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mtasr::harness::{run_stage, ExperimentConfig, HarnessError, Stage};
use mtasr::streammask::{build_chunk_mask, latency_ms, ChunkMaskConfig};

#[derive(Parser)]
#[command(
    name = "mtasr",
    version,
    about = "Self-supervised pre-training and streaming multi-talker ASR toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Plain-text config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config out_dir.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus and evaluation set.
    Synth(CommonArgs),
    /// Extract FBANK features and fit normalization statistics.
    Features(CommonArgs),
    /// Train the k-means codebook and write pseudo-label streams, or
    /// import external label streams.
    Quantize(CommonArgs),
    /// Masked-speech-prediction pre-training (msp or bilabel objective).
    Pretrain(CommonArgs),
    /// Transducer fine-tuning on simulated mixtures with t-SOT targets.
    Finetune(CommonArgs),
    /// Greedy streaming decode of the evaluation set.
    Decode(CommonArgs),
    /// Permutation-minimum WER scoring of decoded hypotheses.
    Score(CommonArgs),
    /// Print a chunk-wise attention mask as 0/1 rows.
    MaskDump {
        /// Sequence length in encoder frames.
        #[arg(long)]
        frames: usize,
        /// Chunk size in encoder frames.
        #[arg(long, default_value_t = 4)]
        chunk: usize,
        /// Visible chunks including the current one.
        #[arg(long, default_value_t = 2)]
        history: usize,
        /// All-ones offline mask.
        #[arg(long, default_value_t = false)]
        offline: bool,
        /// Encoder frame duration for the latency line, ms.
        #[arg(long, default_value_t = 40.0)]
        frame_ms: f64,
    },
}

fn load_config(common: &CommonArgs) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| HarnessError::Usage(format!("--set expects key=value, got {kv:?}")))?;
        cfg.set(k, v)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out_dir) = &common.out_dir {
        cfg.out_dir = out_dir.display().to_string();
    }
    Ok(cfg)
}

fn run() -> Result<(), HarnessError> {
    let cli = Cli::try_parse().map_err(|e| {
        // clap renders its own message; classify everything as usage.
        let _ = e.print();
        HarnessError::Usage(String::new())
    })?;
    match cli.command {
        Command::Synth(c) => run_stage(&load_config(&c)?, Stage::Synth),
        Command::Features(c) => run_stage(&load_config(&c)?, Stage::Features),
        Command::Quantize(c) => run_stage(&load_config(&c)?, Stage::Quantize),
        Command::Pretrain(c) => run_stage(&load_config(&c)?, Stage::Pretrain),
        Command::Finetune(c) => run_stage(&load_config(&c)?, Stage::Finetune),
        Command::Decode(c) => run_stage(&load_config(&c)?, Stage::Decode),
        Command::Score(c) => run_stage(&load_config(&c)?, Stage::Score),
        Command::MaskDump {
            frames,
            chunk,
            history,
            offline,
            frame_ms,
        } => {
            if frames == 0 {
                return Err(HarnessError::Usage("--frames must be positive".into()));
            }
            let config = if offline {
                ChunkMaskConfig::offline()
            } else {
                if chunk == 0 || history == 0 {
                    return Err(HarnessError::Usage(
                        "--chunk and --history must be positive".into(),
                    ));
                }
                ChunkMaskConfig::streaming(chunk, history)
            };
            let mask = build_chunk_mask(frames, &config);
            for row in mask.dump_rows() {
                println!("{row}");
            }
            println!("# algorithmic latency: {}", latency_ms(&config, frame_ms));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if !matches!(&e, HarnessError::Usage(m) if m.is_empty()) {
                eprintln!("error: {e}");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
