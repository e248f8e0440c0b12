//! `dpcr`: generate synthetic changelogs, run private continual releases,
//! account their privacy loss, compare hierarchy-derived and direct sliding
//! windows, and run the oracle suite.

mod commands;
mod config;
mod generate;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dpcr::accountant::CompositionStrategy;
use dpcr::changelog::MutationConstraint;

use config::{parse_composition, parse_constraint, Format, ReleaseKind, SimConfig};

/// Failures that map to dedicated exit codes.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Constraint(String),
    Verification(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Constraint(m) => write!(f, "constraint violation: {m}"),
            CliError::Verification(m) => write!(f, "verification failed: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

#[derive(Parser)]
#[command(name = "dpcr", version, about = "Differentially private continual releases over changelogs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic JSONL changelog (or answer log) satisfying the declared constraint.
    Generate {
        #[command(flatten)]
        common: Overrides,
        /// Destination file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Execute the configured release over a changelog and write the results.
    Run {
        #[command(flatten)]
        common: Overrides,
        /// JSONL changelog, or answer log for randomized-response releases.
        #[arg(long, short)]
        input: PathBuf,
    },
    /// Print privacy bounds for the configured parameters; touches no data.
    Account {
        #[command(flatten)]
        common: Overrides,
        /// Branching factors to tabulate.
        #[arg(long, value_delimiter = ',', default_values_t = vec![2u64, 4, 16])]
        branchings: Vec<u64>,
    },
    /// Monte Carlo per-window variance of direct versus hierarchy-derived sliding windows.
    Compare {
        #[command(flatten)]
        common: Overrides,
        #[arg(long, value_delimiter = ',', default_values_t = vec![2u64, 4, 16])]
        branchings: Vec<u64>,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        /// Optional changelog; the variances do not depend on the data.
        #[arg(long, short)]
        input: Option<PathBuf>,
    },
    /// Run the oracle suite and print a report table.
    Verify {
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
        #[arg(long, hide = true, value_enum)]
        inject_fault: Option<Fault>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Fault {
    Cover,
}

/// Command-line values that override the config file.
#[derive(Args, Default)]
struct Overrides {
    /// JSON config file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// `k=<n>`, `b=<ticks>` or alternatives joined by `|`.
    #[arg(long, value_parser = parse_constraint)]
    constraint: Option<MutationConstraint>,
    #[arg(long)]
    entries: Option<usize>,
    #[arg(long)]
    horizon: Option<i64>,
    #[arg(long)]
    mutation_rate: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    answers: Option<Vec<String>>,
    #[arg(long, value_enum)]
    kind: Option<ReleaseKind>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    /// `naive` or `advanced:<slack>`.
    #[arg(long, value_parser = parse_composition)]
    composition: Option<CompositionStrategy>,
    /// Account per entry (local DP).
    #[arg(long)]
    local: bool,
    #[arg(long)]
    first: Option<i64>,
    #[arg(long)]
    interval: Option<i64>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    period: Option<i64>,
    #[arg(long)]
    window: Option<i64>,
    #[arg(long)]
    height: Option<u32>,
    #[arg(long)]
    branching: Option<u64>,
    #[arg(long)]
    start: Option<i64>,
    #[arg(long = "release-horizon")]
    release_horizon: Option<i64>,
    #[arg(long, value_enum)]
    format: Option<Format>,
    /// Output file (stdout when absent).
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// Keep un-noised values in the output (testing only).
    #[arg(long)]
    include_exact: bool,
}

impl Overrides {
    fn resolve(&self) -> Result<SimConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => SimConfig::load(path)?,
            None => SimConfig::default(),
        };
        macro_rules! set {
            ($src:ident => $($dst:tt)+) => {
                if let Some(v) = self.$src.clone() {
                    cfg.$($dst)+ = v;
                }
            };
        }
        if self.seed.is_some() {
            cfg.seed = self.seed;
        }
        if self.constraint.is_some() {
            cfg.generator.constraint = self.constraint.clone();
        }
        if self.answers.is_some() {
            cfg.generator.answers = self.answers.clone();
        }
        if self.output.is_some() {
            cfg.output.path = self.output.clone();
        }
        set!(entries => generator.n_entries);
        set!(horizon => generator.horizon);
        set!(mutation_rate => generator.mutation_rate);
        set!(kind => release.kind);
        set!(epsilon => release.epsilon);
        set!(delta => release.delta);
        set!(composition => release.composition);
        set!(first => release.first);
        set!(interval => release.interval);
        set!(count => release.count);
        set!(period => release.period);
        set!(window => release.window);
        set!(height => release.height);
        set!(branching => release.branching);
        set!(start => release.start);
        set!(release_horizon => release.horizon);
        set!(format => output.format);
        cfg.release.local |= self.local;
        cfg.output.include_exact |= self.include_exact;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Generate { common, out } => commands::generate(&common.resolve()?, &out),
        Command::Run { common, input } => commands::run(&common.resolve()?, &input),
        Command::Account { common, branchings } => commands::account(&common.resolve()?, &branchings),
        Command::Compare {
            common,
            branchings,
            trials,
            input,
        } => commands::compare(&common.resolve()?, &branchings, trials, input.as_deref()),
        Command::Verify {
            trials,
            seed,
            inject_fault,
        } => commands::verify(trials, seed, matches!(inject_fault, Some(Fault::Cover))),
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e
        .downcast_ref::<std::io::Error>()
        .is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe)
    {
        return 0;
    }
    if let Some(c) = e.downcast_ref::<CliError>() {
        return match c {
            CliError::Config(_) => 2,
            CliError::Constraint(_) => 3,
            CliError::Verification(_) => 4,
        };
    }
    match e.downcast_ref::<dpcr::Error>() {
        Some(
            dpcr::Error::InvalidParameter(_)
            | dpcr::Error::InvalidNoise(_)
            | dpcr::Error::InvalidEpsilon(_)
            | dpcr::Error::UnsupportedConstraint(_)
            | dpcr::Error::RangeTooWide { .. }
            | dpcr::Error::RangeOutOfSpan { .. }
            | dpcr::Error::UnknownLabel(_),
        ) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            if code != 0 {
                eprintln!("error: {e:#}");
            }
            ExitCode::from(code)
        }
    }
}
