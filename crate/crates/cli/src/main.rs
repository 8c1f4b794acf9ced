// `!(x > 0.0)` rejects NaN along with nonpositive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod report;

use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use report::Format;

/// Exact-enumeration experiments on the TAP equations of the SK spin glass.
#[derive(Debug, Parser)]
#[command(name = "sktap", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Replica-symmetric overlap q = E tanh²(√(tq) Z + h).
    FixedPoint(commands::FixedPointArgs),
    /// E t sech⁴ along a temperature grid.
    AtLine(commands::AtLineArgs),
    /// Exact conditional identities, susceptibility and coupling-derivative checks.
    VerifyIdentities(commands::IdentityArgs),
    /// All cavity and TAP residuals of one disorder sample.
    TapResiduals(commands::InstanceArgs),
    /// Disorder-averaged scaling of one experiment over a size grid.
    Scaling(commands::ScalingArgs),
    /// Concentration of the empirical overlap around q.
    Overlap(commands::EnsembleArgs),
    /// n E m_01² against its leading-order prediction.
    MijVariance(commands::EnsembleArgs),
    /// Itô decomposition trace along one coupling path.
    Dynamics(commands::DynamicsArgs),
    /// Resolvent approximation error and spectral margin per sample.
    Spectral(commands::EnsembleArgs),
}

/// Flags shared by every subcommand.
#[derive(Clone, Debug, Args, Serialize)]
pub struct OutputArgs {
    #[arg(long, value_enum, default_value = "json")]
    pub format: Format,
    /// Write the primary output here instead of standard output.
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    #[serde(skip)]
    pub threads: Option<usize>,
}

/// Exit status and message of a failed run.
pub struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: 1,
            message: message.into(),
        }
    }

    /// Classifies a library error; numerical failures report the seed.
    pub fn from_error(err: sk_tap::Error, seed: Option<u64>) -> Self {
        if err.is_numerical() {
            let seed = err.failing_seed().or(seed);
            let at = seed.map_or(String::new(), |s| format!(" (seed {s})"));
            Failure {
                code: 2,
                message: format!("numerical failure{at}: {err}"),
            }
        } else {
            Failure::usage(err.to_string())
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let (output, report) = match cli.command {
        Command::FixedPoint(a) => (a.output.clone(), commands::fixed_point(&a)?),
        Command::AtLine(a) => (a.output.clone(), commands::at_line(&a)?),
        Command::VerifyIdentities(a) => (a.output.clone(), commands::verify_identities(&a)?),
        Command::TapResiduals(a) => (a.output.clone(), commands::tap_residuals(&a)?),
        Command::Scaling(a) => (a.ensemble.output.clone(), commands::scaling(&a)?),
        Command::Overlap(a) => (a.output.clone(), commands::overlap(&a)?),
        Command::MijVariance(a) => (a.output.clone(), commands::mij_variance(&a)?),
        Command::Dynamics(a) => (a.output.clone(), commands::dynamics(&a)?),
        Command::Spectral(a) => (a.output.clone(), commands::spectral(&a)?),
    };
    let text = report.render(output.format);
    match &output.out {
        Some(path) => fs::write(path, text)
            .map_err(|e| Failure::usage(format!("cannot write {}: {e}", path.display()))),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| Failure::usage(format!("cannot write output: {e}"))),
    }
}

fn threads_of(cmd: &Command) -> Option<usize> {
    match cmd {
        Command::FixedPoint(a) => a.output.threads,
        Command::AtLine(a) => a.output.threads,
        Command::VerifyIdentities(a) => a.output.threads,
        Command::TapResiduals(a) => a.output.threads,
        Command::Scaling(a) => a.ensemble.output.threads,
        Command::Overlap(a) | Command::MijVariance(a) | Command::Spectral(a) => a.output.threads,
        Command::Dynamics(a) => a.output.threads,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // help and version go to stdout with status 0, usage errors to stderr
            let _ = err.print();
            return if err.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    if let Some(threads) = threads_of(&cli.command) {
        if threads == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("error: cannot start thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
