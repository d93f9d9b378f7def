//! `nmq`: scenario runner for the non-Markovian cavity control toolkit.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical failure,
//! 4 divergence detected.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use nmq_cli::config::{parse_config_as, ScenarioKind};
use nmq_cli::reproduce::{self, Figure};
use nmq_cli::scenario::{self, resolve_out_dir, Artifacts};
use nmq_cli::CliError;

mod preset;

#[derive(Parser)]
#[command(
    name = "nmq",
    version,
    about = "Simulation and stability analysis for non-Markovian cavity control"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct RunArgs {
    /// Scenario config file.
    #[arg(long)]
    config: PathBuf,
    /// Override the config's random seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; falls back to the config's [output] dir, then
    /// NMQ_OUT, then the working directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Integrate one memory-kernel coefficient trace.
    Kernel(RunArgs),
    /// Undriven mean-value dynamics of one atom-cavity system.
    Single(RunArgs),
    /// Driven mean-value dynamics with field quadratures.
    Driven(RunArgs),
    /// Measurement-feedback models, deterministic or stochastic.
    Feedback(RunArgs),
    /// Coupled-cavity chain with quadrature feedback.
    Lattice(RunArgs),
    /// Stability certificates for a configured scenario.
    Stability(RunArgs),
    /// Compare a mean-value run against the truncated-Fock reference.
    #[command(name = "oracle-check")]
    OracleCheck {
        /// Bundled check (currently `single-excitation`); exclusive with --config.
        preset: Option<String>,
        /// Scenario config file instead of a bundled preset.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the config's random seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rebuild one bundled figure's artifacts.
    Reproduce {
        /// Which study to rebuild.
        figure: Figure,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::Kernel(a) => run_from_config(a, ScenarioKind::Kernel),
        Cmd::Single(a) => run_from_config(a, ScenarioKind::Single),
        Cmd::Driven(a) => run_from_config(a, ScenarioKind::Driven),
        Cmd::Feedback(a) => run_from_config(a, ScenarioKind::Feedback),
        Cmd::Lattice(a) => run_from_config(a, ScenarioKind::Lattice),
        Cmd::Stability(a) => run_from_config(a, ScenarioKind::Stability),
        Cmd::OracleCheck { preset: name, config, seed, out } => {
            let mut cfg = match (name, config) {
                (Some(_), Some(_)) => {
                    return Err(CliError::InvalidInput {
                        detail: "give either a bundled preset or --config, not both".into(),
                    })
                }
                (None, None) => {
                    return Err(CliError::InvalidInput {
                        detail: "oracle-check needs a preset name or --config".into(),
                    })
                }
                (Some(p), None) => preset::oracle_check(&p)?,
                (None, Some(path)) => {
                    let text = read_config(&path)?;
                    parse_config_as(&text, Some(ScenarioKind::OracleCheck))?
                }
            };
            if let Some(s) = seed {
                cfg.mode.seed = s;
            }
            let dir = resolve_out_dir(out.as_deref(), cfg.out_dir.as_deref());
            report(scenario::run(&cfg, &dir)?);
            Ok(())
        }
        Cmd::Reproduce { figure, out } => {
            let dir = resolve_out_dir(out.as_deref(), None);
            report(reproduce::run_figure(figure, &dir)?);
            Ok(())
        }
    }
}

fn read_config(path: &PathBuf) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Io { path: path.clone(), source: e })
}

fn run_from_config(args: RunArgs, kind: ScenarioKind) -> Result<(), CliError> {
    let text = read_config(&args.config)?;
    let mut cfg = parse_config_as(&text, Some(kind))?;
    if let Some(seed) = args.seed {
        cfg.mode.seed = seed;
    }
    let dir = resolve_out_dir(args.out.as_deref(), cfg.out_dir.as_deref());
    report(scenario::run(&cfg, &dir)?);
    Ok(())
}

fn report(artifacts: Artifacts) {
    for note in &artifacts.notes {
        println!("{note}");
    }
    for file in &artifacts.files {
        println!("wrote {}", file.display());
    }
}
