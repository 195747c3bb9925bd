//! Argument parsing and dispatch.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::commands::{
    cmd_build_graph, cmd_evaluate, cmd_predict, cmd_preprocess, cmd_sweep, cmd_synth, cmd_train, format_report,
    load_model, sweep_table, EvalSplit,
};
use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "crisisgraph",
    version,
    about = "Graph-based semi-supervised tweet classification"
)]
pub struct Cli {
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Seed for every random stream of the run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output path; its meaning depends on the command.
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,

    /// Overrides a configuration key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Clean and tokenize a raw TSV file.
    Preprocess {
        #[arg(long, value_name = "PATH")]
        input: PathBuf,
        /// Input has two columns (id, text) instead of three.
        #[arg(long)]
        unlabeled: bool,
    },
    /// Build the k-NN similarity graph over training and unlabeled documents.
    BuildGraph,
    /// Train a model and write its checkpoint and training log.
    Train,
    /// Print weighted precision, recall and F1 of a checkpoint.
    Evaluate {
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: EvalSplit,
    },
    /// Classify the documents of a two-column TSV file.
    Predict {
        #[arg(long, value_name = "PATH")]
        input: PathBuf,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Train both modes at several label budgets and report test scores.
    Sweep,
    /// Generate a synthetic corpus with word vectors.
    Synth,
    /// Print the effective configuration.
    ShowConfig,
}

impl Cli {
    /// Default values, then the config file, then `--set`, then `--seed`.
    pub fn resolve_config(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for o in &self.overrides {
            cfg.apply_override(o)?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

fn checkpoint_path(arg: &Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf, CliError> {
    arg.clone()
        .or_else(|| cfg.checkpoint.clone())
        .ok_or_else(|| CliError::Usage("no checkpoint (use --checkpoint or paths.checkpoint)".into()))
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    let cfg = cli.resolve_config()?;
    let out = cli.out.as_deref();
    match &cli.command {
        Command::Preprocess { input, unlabeled } => {
            let out = out
                .or(cfg.output.as_deref())
                .ok_or_else(|| CliError::Usage("preprocess needs --out".into()))?;
            let n = cmd_preprocess(input, out, *unlabeled)?;
            eprintln!("wrote {n} documents to {}", out.display());
        }
        Command::BuildGraph => {
            let path = cmd_build_graph(&cfg, out)?;
            eprintln!("wrote graph to {}", path.display());
        }
        Command::Train => {
            let r = cmd_train(&cfg, out)?;
            eprintln!(
                "best dev weighted F1 {:.4} at epoch {} of {}; checkpoint {}",
                r.outcome.best_dev_f1,
                r.outcome.best_epoch,
                r.outcome.log.len(),
                r.checkpoint.display()
            );
        }
        Command::Evaluate { checkpoint, split } => {
            let path = checkpoint_path(checkpoint, &cfg)?;
            let report = cmd_evaluate(&cfg, &path, *split)?;
            let labels = load_model(&cfg, &path)?.labels;
            let text = format_report(&report, &labels);
            match out {
                Some(p) => std::fs::write(p, &text).map_err(|e| CliError::io(p, e))?,
                None => print!("{text}"),
            }
        }
        Command::Predict { input, checkpoint } => {
            let path = checkpoint_path(checkpoint, &cfg)?;
            cmd_predict(&cfg, &path, input, out)?;
        }
        Command::Sweep => {
            let rows = cmd_sweep(&cfg, out)?;
            eprint!("{}", sweep_table(&rows));
        }
        Command::Synth => {
            let files = cmd_synth(&cfg, out)?;
            eprintln!("wrote {}", files.labeled.display());
        }
        Command::ShowConfig => print!("{}", cfg.render()),
    }
    Ok(())
}

/// Parses `args` and runs the command; returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
