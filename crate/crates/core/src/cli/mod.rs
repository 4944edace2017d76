//! Command-line surface. The `meshmae` binary only calls [`main_from`].
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numerical failure.

mod data;
mod train;

use std::ffi::OsString;
use std::fs::File;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use thiserror::Error;

pub use data::{cmd_preprocess, cmd_synth, write_synthetic, Manifest, ManifestEntry, ManifestFailure, SynthArgs};
pub use train::{
    cmd_ablate, cmd_eval, cmd_finetune, cmd_pretrain, cmd_probe, cmd_reconstruct, AblateArgs, AblationRow, EvalArgs,
    FinetuneArgs, FinetuneRow, PretrainArgs, ProbeArgs, ReconstructArgs,
};

use crate::config::{ConfigError, Preset, RunConfig};
use crate::dataset::DataError;
use crate::downstream::DownstreamError;
use crate::pretrain::PretrainError;
use crate::transformer::ModelError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 1,
            Self::Data(_) => 2,
            Self::Numerical(_) => 3,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => Self::Data(e.to_string()),
            _ => Self::Usage(e.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) => Self::Usage(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<PretrainError> for CliError {
    fn from(e: PretrainError) -> Self {
        match e {
            PretrainError::NonFinite { .. } => Self::Numerical(e.to_string()),
            PretrainError::Config(_) => Self::Usage(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<DownstreamError> for CliError {
    fn from(e: DownstreamError) -> Self {
        match e {
            DownstreamError::NonFinite(_) => Self::Numerical(e.to_string()),
            DownstreamError::Config(_) => Self::Usage(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        Self::Data(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "meshmae", version, about = "Masked autoencoder pretraining for triangle meshes")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GlobalArgs {
    /// TOML file overriding the preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output file (pretrain) or directory (everything else).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Reduced model and schedules (default).
    #[arg(long, global = true, conflicts_with = "paper_config")]
    pub desk_config: bool,
    /// Full-size model and schedules.
    #[arg(long, global = true)]
    pub paper_config: bool,
}

impl GlobalArgs {
    /// The preset, overridden by the config file and then by `--seed`.
    pub fn run_config(&self) -> CliResult<RunConfig> {
        let preset = if self.paper_config { Preset::Paper } else { Preset::Desk };
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p, preset)?,
            None => RunConfig::preset(preset),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
            cfg.validate()?;
        }
        Ok(cfg)
    }

    pub fn out(&self) -> CliResult<&Path> {
        self.out.as_deref().ok_or_else(|| CliError::Usage("--out is required".into()))
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Remesh raw meshes into patch-structured variants.
    Preprocess {
        #[arg(long)]
        input: PathBuf,
        /// Variants per input; defaults to the config value.
        #[arg(long)]
        variants: Option<usize>,
    },
    /// Generate a labelled synthetic dataset.
    Synth(SynthArgs),
    /// Masked-autoencoder pretraining; `--out` names the checkpoint.
    Pretrain(PretrainArgs),
    /// Classification or segmentation fine-tuning.
    Finetune(FinetuneArgs),
    /// Linear probe on a frozen encoder.
    Probe(ProbeArgs),
    /// Evaluate a checkpoint on a split.
    Eval(EvalArgs),
    /// Export predicted and true masked patches as OBJ files.
    Reconstruct(ReconstructArgs),
    /// Grid over mask ratio, lambda, positional strategy and face order.
    Ablate(AblateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Task {
    Cls,
    Seg,
}

pub fn run(cli: Cli) -> CliResult<()> {
    let cfg = cli.global.run_config()?;
    log::info!("config {} seed {}", cfg.hash(), cfg.seed);
    let out = cli.global.out()?;
    match cli.command {
        Command::Preprocess { input, variants } => {
            let mut cfg = cfg;
            if let Some(k) = variants {
                cfg.variants = k;
                cfg.validate()?;
            }
            let manifest = cmd_preprocess(&input, out, &cfg)?;
            log::info!("{} processed, {} failed", manifest.processed.len(), manifest.failed.len());
            Ok(())
        }
        Command::Synth(args) => cmd_synth(&args, &cfg, out).map(|_| ()),
        Command::Pretrain(args) => cmd_pretrain(&args, &cfg, out).map(|_| ()),
        Command::Finetune(args) => cmd_finetune(&args, &cfg, out).map(|_| ()),
        Command::Probe(args) => cmd_probe(&args, &cfg, out).map(|_| ()),
        Command::Eval(args) => cmd_eval(&args, &cfg, out).map(|_| ()),
        Command::Reconstruct(args) => cmd_reconstruct(&args, &cfg, out).map(|_| ()),
        Command::Ablate(args) => cmd_ablate(&args, &cfg, out).map(|_| ()),
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub(crate) fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(File::create(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// `key: value` lines, always starting with the config hash and seed.
pub(crate) fn write_summary(path: &Path, cfg: &RunConfig, lines: &[(&str, String)]) -> CliResult<()> {
    let mut s = format!("config_hash: {}\nseed: {}\n", cfg.hash(), cfg.seed);
    for (k, v) in lines {
        s += &format!("{k}: {v}\n");
    }
    std::fs::write(path, s).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}
