use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use packsweep::cli::{self, CliError};

#[derive(Parser)]
#[command(version, about = "Plan and simulate packed LoRA hyperparameter sweeps")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Plan a job queue for a workload.
    Plan {
        #[arg(long)]
        workload: PathBuf,
        /// CSV profile table replacing the workload's embedded profiles.
        #[arg(long)]
        profiles: Option<PathBuf>,
        #[arg(long)]
        load_factor: Option<f64>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Simulate a planned queue against both baselines.
    Simulate {
        #[arg(long)]
        queue: PathBuf,
        #[arg(long)]
        workload: PathBuf,
        #[arg(long)]
        profiles: Option<PathBuf>,
        #[arg(long)]
        load_factor: Option<f64>,
        /// Report destination; printed to stdout when omitted.
        #[arg(long, short)]
        out: Option<PathBuf>,
        #[arg(long)]
        trace_csv: Option<PathBuf>,
    },
    /// Fit the time model from a profile table (CSV or JSON).
    Calibrate {
        #[arg(long)]
        profiles: PathBuf,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of the packed adapter gradients.
    VerifyKernels {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        packs: usize,
    },
    /// Print a stored run report.
    Report {
        #[arg(long)]
        report: PathBuf,
    },
}

fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Plan {
            workload,
            profiles,
            load_factor,
            out,
        } => {
            let q = cli::cmd_plan(&workload, profiles.as_deref(), load_factor, &out)?;
            println!(
                "planned {} jobs in {} batches, predicted makespan {:.3} s",
                q.jobs().count(),
                q.batches.len(),
                q.predicted_makespan
            );
        }
        Command::Simulate {
            queue,
            workload,
            profiles,
            load_factor,
            out,
            trace_csv,
        } => {
            let r = cli::cmd_simulate(
                &queue,
                &workload,
                profiles.as_deref(),
                load_factor,
                out.as_deref(),
                trace_csv.as_deref(),
            )?;
            if out.is_none() {
                println!(
                    "{}",
                    serde_json::to_string_pretty(&r).expect("report serializes")
                );
            } else {
                print!("{}", cli::render_report(&r));
            }
        }
        Command::Calibrate { profiles, out } => {
            let tm = cli::cmd_calibrate(&profiles, out.as_deref())?;
            if out.is_none() {
                println!(
                    "{}",
                    serde_json::to_string_pretty(&tm).expect("model serializes")
                );
            }
        }
        Command::VerifyKernels { seed, packs } => {
            let r = cli::verify_kernels(seed, packs)?;
            print!("{}", r.render());
            if !r.passed() {
                return Err(CliError::Verification(
                    "gradient check exceeded tolerance".into(),
                ));
            }
        }
        Command::Report { report } => print!("{}", cli::cmd_report(&report)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::init();
    match execute(Args::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
