mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, malformed or inconsistent configuration.
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Run(#[from] waftm::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Run(_) | CliError::Io(_) => 1,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "waftm",
    version,
    about = "Multi-modal video captioning with fusion gates and memory attention"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train (cross-entropy or SCST) from a JSON run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Print the fully resolved config and exit.
        #[arg(long)]
        print_config: bool,
    },
    /// Caption every video in a manifest, one JSON line per video.
    Caption {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Defaults to `vocab.txt` next to the manifest.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        beam: usize,
        /// Only caption videos in this split (train, val or test).
        #[arg(long)]
        split: Option<String>,
    },
    /// Score candidate captions against references.
    Eval {
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        references: PathBuf,
    },
    /// Write a synthetic corpus described by a JSON spec.
    GenSynth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Turn stdin lines into token ids, or ids back into text.
    Tokenize {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        decode: bool,
        /// Longest encoded sequence, `[BOS]` and `[EOS]` included.
        #[arg(long, default_value_t = 512)]
        max_len: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            config,
            resume,
            print_config,
        } => commands::train(&config, resume.as_deref(), print_config),
        Command::Caption {
            checkpoint,
            manifest,
            vocab,
            beam,
            split,
        } => commands::caption(
            &checkpoint,
            &manifest,
            vocab.as_deref(),
            beam,
            split.as_deref(),
        ),
        Command::Eval {
            candidates,
            references,
        } => commands::eval(&candidates, &references),
        Command::GenSynth { spec, out } => commands::gen_synth(&spec, &out),
        Command::Tokenize {
            vocab,
            decode,
            max_len,
        } => commands::tokenize(&vocab, decode, max_len),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
