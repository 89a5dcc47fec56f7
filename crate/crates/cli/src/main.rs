//! `xbm`: the explanation-bottleneck pipeline, one subcommand per stage.

mod commands;
mod layout;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use xbm_core::XbmError;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "XBM_OUT";

#[derive(Parser, Debug)]
#[command(name = "xbm", version, about = "Explanation bottleneck models on a procedural shapes world")]
pub struct Cli {
    /// Output root; defaults to $XBM_OUT, then ./xbm-out.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Override the config's seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Cap every training loop at 50 steps.
    #[arg(long, global = true)]
    pub smoke: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the five dataset splits and the vocabulary sidecar.
    GenData {
        #[arg(long)]
        config: PathBuf,
    },
    /// Pretrain the captioning encoder-decoder (the teacher).
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train the frozen alignment and fluency judges.
    TrainJudges {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Fine-tune an explanation bottleneck model from the teacher.
    TrainXbm {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Run directory name under runs/.
        #[arg(long, default_value = "xbm")]
        name: String,
    },
    /// Evaluate a trained run on the test split.
    Eval {
        #[arg(long, default_value = "xbm")]
        name: String,
        /// Evaluate even if dataset or judge checksums changed.
        #[arg(long)]
        force: bool,
        #[arg(long, default_value_t = 3)]
        beam_width: usize,
    },
    /// Write the three-part explanation report for one test image.
    Explain {
        #[arg(long, default_value = "xbm")]
        name: String,
        #[arg(long)]
        index: usize,
        /// Combine heads by max instead of mean.
        #[arg(long)]
        max_heads: bool,
        #[arg(long, default_value_t = 3)]
        beam_width: usize,
    },
    /// Replace generated explanations and re-classify the intervention split.
    Intervene {
        #[arg(long, default_value = "xbm")]
        name: String,
        /// randomized, ground_truth or custom.
        #[arg(long)]
        kind: String,
        /// Replacement text for `custom`.
        #[arg(long)]
        text: Option<String>,
        #[arg(long, default_value_t = 3)]
        beam_width: usize,
    },
    /// Train and evaluate the ablation row set into one report.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn exit_code(e: &XbmError) -> u8 {
    match e {
        XbmError::Config { .. } | XbmError::Invalid(_) => 2,
        XbmError::Data(_) | XbmError::Io { .. } => 3,
        XbmError::Numeric { .. } | XbmError::Shape { .. } | XbmError::Graph(_) => 4,
        XbmError::Checksum { .. } => 5,
    }
}

fn kind(e: &XbmError) -> &'static str {
    match e {
        XbmError::Config { .. } | XbmError::Invalid(_) => "config",
        XbmError::Data(_) | XbmError::Io { .. } => "data",
        XbmError::Numeric { .. } | XbmError::Shape { .. } | XbmError::Graph(_) => "numeric",
        XbmError::Checksum { .. } => "checksum",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            let mut line = format!("error kind={} exit={code}", kind(&e));
            if let XbmError::Config { key, .. } = &e {
                line.push_str(&format!(" key={key:?}"));
            }
            line.push_str(&format!(" message={:?}", e.to_string()));
            eprintln!("{line}");
            ExitCode::from(code)
        }
    }
}
