use std::io::{ErrorKind, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ntklab_cli::commands::{self, Outcome, Target};
use ntklab_cli::{load, CheckName, CliError};

#[derive(Parser)]
#[command(name = "ntklab", version, about = "NTK decomposition lab: data, training, kernels, checks, calibration")]
struct Cli {
    /// TOML config file; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a config key, e.g. `--set training.learning_rate=1e-3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,

    /// Output directory; defaults to `output_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the dataset file.
    GenData,
    /// Train per `[training]` and write the trace and checkpoints.
    Train,
    /// Compute the kernel decomposition and its statistics.
    Ntk,
    /// Run the check suite; exit 1 if any check fails.
    Check {
        /// Comma-separated subset of check names.
        #[arg(long, value_delimiter = ',', value_parser = parse_check)]
        only: Option<Vec<CheckName>>,
    },
    /// Kernel regression on the kernel components.
    KernelReg,
    /// Temperature scaling and calibration errors.
    Calibrate,
    /// Emit a reproduction table.
    Reproduce {
        #[arg(value_enum)]
        target: Target,
    },
    /// Print the config schema document.
    Schema,
}

fn parse_check(s: &str) -> Result<CheckName, String> {
    CheckName::parse(s).ok_or_else(|| {
        let names: Vec<&str> = CheckName::ALL.iter().map(|c| c.as_str()).collect();
        format!("unknown check `{s}` (expected one of {})", names.join(", "))
    })
}

fn run(cli: Cli) -> Result<Option<Outcome>, CliError> {
    if let Command::Schema = cli.command {
        let text = serde_json::to_string_pretty(&ntklab_cli::schema::schema()).map_err(|e| CliError::Io(e.to_string()))?;
        emit(&[text])?;
        return Ok(None);
    }
    let loaded = load(cli.config.as_deref(), std::env::vars(), &cli.sets)?;
    let out = cli.out.unwrap_or_else(|| loaded.config.output_dir.clone());
    let outcome = match cli.command {
        Command::GenData => commands::gen_data(&loaded, &out)?,
        Command::Train => commands::train_cmd(&loaded, &out)?,
        Command::Ntk => commands::ntk_cmd(&loaded, &out)?,
        Command::Check { only } => commands::check_cmd(&loaded, &out, only.as_deref())?,
        Command::KernelReg => commands::kernel_reg_cmd(&loaded, &out)?,
        Command::Calibrate => commands::calibrate_cmd(&loaded, &out)?,
        Command::Reproduce { target } => commands::reproduce_cmd(&loaded, &out, target)?,
        Command::Schema => unreachable!("handled above"),
    };
    Ok(Some(outcome))
}

/// Writes lines to stdout; a closed pipe ends output quietly.
fn emit(lines: &[String]) -> Result<(), CliError> {
    let mut out = std::io::stdout().lock();
    for line in lines {
        match writeln!(out, "{line}") {
            Ok(()) => {}
            Err(e) if e.kind() == ErrorKind::BrokenPipe => return Ok(()),
            Err(e) => return Err(CliError::Io(format!("stdout: {e}"))),
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(None) => ExitCode::SUCCESS,
        Ok(Some(outcome)) => {
            if let Err(e) = emit(&outcome.lines) {
                eprintln!("ntklab: {e}");
                return ExitCode::from(e.exit_code() as u8);
            }
            if outcome.failed_checks > 0 {
                let e = CliError::ChecksFailed { failed: outcome.failed_checks, total: outcome.total_checks };
                eprintln!("ntklab: {e}");
                return ExitCode::from(e.exit_code() as u8);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("ntklab: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
