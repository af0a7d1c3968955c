use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gn_tracking::commands::{cmd_compare, cmd_simulate, cmd_solve, cmd_verify};
use gn_tracking::config::ExperimentConfig;
use gn_tracking::Error;

#[derive(Parser)]
#[command(name = "gn-tracking", version, about = "Projected Gauss-Newton solver for ODE tracking problems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for synthetic references and random checks.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the reference input and write y_ref, u_ref and x_ref.
    Simulate(Common),
    /// Run the Gauss-Newton method.
    Solve(Common),
    /// Compare Gauss-Newton with direct steepest descent.
    Compare(Common),
    /// Run derivative, adjoint and solver consistency checks.
    Verify(Common),
}

const EXIT_RUNTIME: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_VERIFY: u8 = 3;

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Data { .. } => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

fn load(common: &Common) -> Result<(gn_tracking::config::Experiment, PathBuf), Error> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed);
    }
    let out = common
        .out
        .clone()
        .or_else(|| cfg.output.dir.clone())
        .unwrap_or_else(|| Path::new("out").join(&cfg.name));
    Ok((cfg.build()?, out))
}

fn run(cli: Cli) -> Result<u8, Error> {
    match cli.command {
        Command::Simulate(c) => {
            let (ex, out) = load(&c)?;
            cmd_simulate(&ex, &out)?;
            println!("reference written to {}", out.display());
        }
        Command::Solve(c) => {
            let (ex, out) = load(&c)?;
            let report = cmd_solve(&ex, &out)?;
            for it in &report.iterates {
                println!("k = {:2}  J = {:.6e}", it.k, it.cost.total);
            }
            println!("termination: {:?}; results in {}", report.termination, out.display());
        }
        Command::Compare(c) => {
            let (ex, out) = load(&c)?;
            let s = cmd_compare(&ex, &out)?;
            let show = |c: Option<usize>| c.map_or("never".to_string(), |k| k.to_string());
            println!("J0 = {:.6e}, threshold {:.6e}", s.j0, s.threshold);
            println!("Gauss-Newton: crosses at {}, final J = {:.6e}", show(s.gn_crossing), s.gn_final);
            println!("steepest descent: crosses at {}, final J = {:.6e}", show(s.gd_crossing), s.gd_final);
        }
        Command::Verify(c) => {
            let (ex, out) = load(&c)?;
            let report = cmd_verify(&ex, &out)?;
            for check in &report.checks {
                println!(
                    "{:<26} {:?}  value {:.3e}  tol {:.1e}",
                    check.name, check.status, check.value, check.tolerance
                );
            }
            if !report.passed {
                eprintln!("verification failed: {}", report.failed().join(", "));
                return Ok(EXIT_VERIFY);
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
