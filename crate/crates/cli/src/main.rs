//! `fpo-lab`: runs the preference-optimization lab stage by stage.
//!
//! Every command reads the same experiment config, reads its inputs from the
//! output directory and writes its outputs there, stamped with the config
//! hash.

mod artifacts;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use fpo_core::optimloss::LossVariant;
use fpo_core::Error;

/// Exit codes.
pub const EXIT_OK: u8 = 0;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_INPUT: u8 = 3;
pub const EXIT_RUNTIME: u8 = 4;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Core(Error),
    /// A diagnostic ran but its check did not pass.
    Check(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Core(e) => match e {
                Error::Config(_) => EXIT_CONFIG,
                Error::MissingInput(_)
                | Error::SchemaVersion { .. }
                | Error::Provenance { .. }
                | Error::Format(_)
                | Error::Json(_) => EXIT_INPUT,
                _ => EXIT_RUNTIME,
            },
            CliError::Check(_) => EXIT_RUNTIME,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Check(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

#[derive(Parser, Debug)]
#[command(name = "fpo-lab", version, about = "Fine-grained preference optimization lab")]
#[command(after_help = "Exit codes: 0 success, 2 configuration error, 3 missing or incompatible input, 4 runtime failure.")]
struct Cli {
    /// Experiment config (TOML); built-in defaults when omitted.
    #[arg(long, short, global = true, env = "FPO_CONFIG")]
    config: Option<PathBuf>,
    /// Override the global seed.
    #[arg(long, global = true, env = "FPO_SEED")]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, global = true, env = "FPO_OUT_DIR")]
    out_dir: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, short, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Variant {
    /// Token-level masked sigmoid loss.
    Fpo,
    /// Masked sequence-level sigmoid loss.
    FpoSeq,
    /// Utterance-level DPO.
    Dpo,
}

impl From<Variant> for LossVariant {
    fn from(v: Variant) -> Self {
        match v {
            Variant::Fpo => LossVariant::FpoTokenSigmoid,
            Variant::FpoSeq => LossVariant::FpoSequenceSigmoid,
            Variant::Dpo => LossVariant::DpoUtterance,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the resolved config and its hash.
    Config,
    /// Generate the task and the (partly corrupted) supervised set.
    GenSft,
    /// Supervised training; writes the SFT checkpoint.
    TrainSft,
    /// Sample scored candidate groups from the SFT model for inspection.
    Sample {
        #[arg(long, default_value_t = 64)]
        prompts: usize,
    },
    /// Sample, score, select, annotate and mask preference pairs.
    BuildPairs,
    /// Preference training from the SFT checkpoint.
    Train {
        #[arg(long, value_enum)]
        variant: Variant,
    },
    /// Evaluate the SFT model and trained policies; compare against SFT.
    Eval {
        /// Models to evaluate (sft, fpo_token_sigmoid, fpo_sequence_sigmoid,
        /// dpo_utterance); default: every checkpoint present.
        #[arg(long, value_delimiter = ',')]
        models: Vec<String>,
    },
    /// Pair-budget sweep over methods and seeds.
    Sweep,
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
        #[arg(long, default_value_t = 50)]
        coords: usize,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(CliError::Config("--jobs must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    let cfg = config::load(cli.config.as_deref(), cli.seed, cli.out_dir)?;
    match cli.command {
        Command::Config => commands::show_config(&cfg),
        Command::GenSft => commands::gen_sft(&cfg),
        Command::TrainSft => commands::train_sft(&cfg),
        Command::Sample { prompts } => commands::sample(&cfg, prompts),
        Command::BuildPairs => commands::build_pairs_cmd(&cfg),
        Command::Train { variant } => commands::train(&cfg, variant.into()),
        Command::Eval { models } => commands::eval(&cfg, &models),
        Command::Sweep => commands::sweep_cmd(&cfg),
        Command::Gradcheck { instances, h, coords } => commands::gradcheck(&cfg, instances, h, coords),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::from(EXIT_OK),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
