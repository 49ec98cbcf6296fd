//! Command-line orchestration for kdaudit.
//!
//! Every command is also callable as a function so tests can drive it
//! without spawning processes.

pub mod audit;
pub mod commands;
pub mod config;
pub mod exit;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use kdaudit::load_corpus_set;

use crate::commands::ReportArgs;
use crate::config::{Overrides, RunConfig, Settings};
use crate::exit::{usage, CliResult, EXIT_OK, EXIT_USAGE};

#[derive(Debug, Parser)]
#[command(
    name = "kdaudit",
    version,
    about = "Audit distillation corpora for memorization and hallucination"
)]
pub struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random draw; overrides the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; overrides the config.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Input {
    /// Corpus manifest, used when no config file is given.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check alignment, encoding and sidecars of a corpus set.
    Validate(Input),
    /// Replication, ExMem, OscHal and NatHal for every model role.
    Audit(Input),
    /// Build and evaluate data subgroups.
    Subgroups(Input),
    /// Select a high-quality fine-tuning subset and a random baseline.
    Select(Input),
    /// Merge audit tables and summarize relative changes.
    Report {
        /// `report.json` or `report.plot.csv` files.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        subject: Option<String>,
        #[arg(long)]
        reference: Option<String>,
        #[arg(long = "metric")]
        metrics: Vec<String>,
    },
}

impl Cli {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            workers: self.workers,
            out: self.out.clone(),
        }
    }

    fn run_config(&self, input: &Input) -> CliResult<RunConfig> {
        match (&self.config, &input.manifest) {
            (Some(_), Some(_)) => Err(usage("pass either --config or --manifest, not both")),
            (Some(path), None) => RunConfig::read(path),
            (None, Some(m)) => Ok(RunConfig::for_manifest(m.clone())),
            (None, None) => Err(usage("pass --config or --manifest")),
        }
    }

    fn settings(&self, input: &Input) -> CliResult<Settings> {
        Settings::resolve(self.run_config(input)?, &self.overrides())
    }
}

fn in_pool<T: Send>(workers: usize, f: impl FnOnce() -> CliResult<T> + Send) -> CliResult<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| crate::exit::CliError::Output(format!("thread pool: {e}")))?;
    pool.install(f)
}

/// Execute a parsed command line.
pub fn execute(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Validate(input) => {
            let cfg = cli.run_config(input)?;
            let corpus = load_corpus_set(&cfg.manifest)?;
            let diag = commands::cmd_validate(&corpus);
            let json = serde_json::to_string_pretty(&diag).expect("diagnostics serialize") + "\n";
            if let Some(out) = cli.out.clone().or(cfg.out) {
                std::fs::create_dir_all(&out).map_err(|e| exit::output_error(&out, e))?;
                audit::write_text(&out.join("validate.json"), &json)?;
            }
            print!("{json}");
            Ok(())
        }
        Command::Audit(input) => {
            let s = cli.settings(input)?;
            let corpus = load_corpus_set(&s.config.manifest)?;
            let summary = in_pool(s.workers, || audit::cmd_audit(&s, &corpus))?;
            println!(
                "audited {} records of {} for {} role(s); outputs in {}",
                summary.n_records,
                summary.language_pair,
                summary.roles.len(),
                s.out.display()
            );
            Ok(())
        }
        Command::Subgroups(input) => {
            let s = cli.settings(input)?;
            let corpus = load_corpus_set(&s.config.manifest)?;
            let rows = in_pool(s.workers, || commands::cmd_subgroups(&s, &corpus))?;
            println!("{} subgroup rows written to {}", rows.len(), s.out.display());
            Ok(())
        }
        Command::Select(input) => {
            let s = cli.settings(input)?;
            let corpus = load_corpus_set(&s.config.manifest)?;
            let o = in_pool(s.workers, || commands::cmd_select(&s, &corpus))?;
            println!(
                "selected {} of {} qualifying records (random baseline {} of {}); outputs in {}",
                o.high_quality.n_selected,
                o.high_quality.n_qualifying,
                o.random.n_selected,
                o.random.n_qualifying,
                s.out.display()
            );
            Ok(())
        }
        Command::Report {
            inputs,
            subject,
            reference,
            metrics,
        } => {
            let out = cli.out.clone().ok_or_else(|| usage("report needs --out"))?;
            let args = ReportArgs {
                inputs: inputs.clone(),
                subject: subject.clone(),
                reference: reference.clone(),
                metrics: metrics.clone(),
                out,
            };
            let (_, summaries) = commands::cmd_report(&args)?;
            for s in &summaries {
                println!("{}: {} {:.1} ± {:.1}", s.metric, s.subject, s.mean, s.std);
            }
            Ok(())
        }
    }
}

/// Parse `args`, run, and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
