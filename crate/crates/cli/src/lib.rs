//! Command-line front end: compile proposals, run inference, recompute
//! diagnostics and reproduce the benchmark experiments.

pub mod commands;
pub mod experiments;
pub mod output;
pub mod spec;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::experiments::ExperimentOverrides;
use crate::spec::{Overrides, ProposerKind, RunSpec};

/// Why a command failed. Each kind has its own exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags, config or inputs. Exit code 1.
    Usage(String),
    /// A stage failed while running. Exit code 2.
    Runtime(anyhow::Error),
    /// An experiment finished but missed acceptance criteria. Exit code 3.
    Criteria(Vec<u32>),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Usage(_) => 1,
            Self::Runtime(_) => 2,
            Self::Criteria(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Usage(m) => write!(f, "usage error: {m}"),
            Self::Runtime(e) => write!(f, "runtime failure: {e:#}"),
            Self::Criteria(ids) => write!(f, "acceptance criteria failed: {ids:?}"),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Self::Runtime(e)
    }
}

impl From<blanket::Error> for Failure {
    fn from(e: blanket::Error) -> Self {
        Self::Runtime(e.into())
    }
}

#[derive(Debug, Parser)]
#[command(name = "blanket", version, about = "Compiled Markov-blanket proposals for single-site MH")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct SharedArgs {
    /// Model name: gmm2d, conj-normal, nuisance, blr, nschools or discrete.
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long, value_enum)]
    pub proposer: Option<ProposerKind>,
    /// Master seed; compile, infer and data seeds are derived from it.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub chains: Option<usize>,
    /// Recorded draws per chain.
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long = "burn-in")]
    pub burn_in: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Compiled artifact: written by `compile`, read by `infer`.
    #[arg(long)]
    pub artifact: Option<PathBuf>,
    /// JSON config file, or a manifest from an earlier run. Flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

impl SharedArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            model: self.model.clone(),
            proposer: self.proposer,
            seed: self.seed,
            chains: self.chains,
            samples: self.samples,
            burn_in: self.burn_in,
            out: self.out.clone(),
            artifact: self.artifact.clone(),
            config: self.config.clone(),
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train proposal networks and save the artifact.
    Compile {
        #[command(flatten)]
        shared: SharedArgs,
    },
    /// Run chains and write samples and diagnostics.
    Infer {
        #[command(flatten)]
        shared: SharedArgs,
    },
    /// Recompute metrics.json from the samples.csv in --out.
    Diagnose {
        #[command(flatten)]
        shared: SharedArgs,
    },
    /// Run a benchmark experiment end to end and judge its criteria.
    Experiment {
        /// mode-escape, conj-normal, nuisance, blr or nschools.
        name: String,
        /// Nuisance counts to compare against the baseline without nuisance.
        #[arg(long = "n", value_delimiter = ',')]
        n: Vec<usize>,
        #[command(flatten)]
        shared: SharedArgs,
    },
}

fn experiment(name: &str, n: &[usize], shared: &SharedArgs) -> Result<(), Failure> {
    for (flag, set) in [
        ("--model", shared.model.is_some()),
        ("--proposer", shared.proposer.is_some()),
        ("--artifact", shared.artifact.is_some()),
    ] {
        if set {
            return Err(Failure::Usage(format!(
                "{flag} is fixed by the experiment; set `proposers` or `model_params` in --config instead"
            )));
        }
    }
    let o = ExperimentOverrides {
        seed: shared.seed,
        chains: shared.chains,
        samples: shared.samples,
        burn_in: shared.burn_in,
        config: shared.config.clone(),
        nuisance: n.to_vec(),
    };
    let spec = experiments::resolve(name, &o)?;
    let out = shared.out.clone().unwrap_or_else(|| PathBuf::from("out").join(name));
    let report = experiments::run_experiment(&spec, &out)?;
    for c in &report.criteria {
        println!("{} criterion {} ({}): {}", if c.pass { "PASS" } else { "FAIL" }, c.id, c.name, c.detail);
    }
    let failed: Vec<u32> = report.criteria.iter().filter(|c| !c.pass).map(|c| c.id).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Criteria(failed))
    }
}

pub fn dispatch(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Compile { shared } => commands::cmd_compile(&RunSpec::resolve(&shared.overrides())?),
        Command::Infer { shared } => commands::cmd_infer(&RunSpec::resolve(&shared.overrides())?),
        Command::Diagnose { shared } => {
            commands::cmd_diagnose(&shared.out.clone().unwrap_or_else(|| PathBuf::from("out")))
        }
        Command::Experiment { name, n, shared } => experiment(name, n, shared),
    }
}

/// Parses `args` and runs the command. Returns the process exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("{f}");
            f.exit_code()
        }
    }
}
