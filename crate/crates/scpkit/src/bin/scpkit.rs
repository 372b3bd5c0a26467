use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use scpkit::cli::{
    cmd_montecarlo, cmd_solve, cmd_verify, default_out_dir, exit_code_of, Overrides, EXIT_ERROR,
};

#[derive(Parser)]
#[command(
    name = "scpkit",
    about = "Sequential convex programming toolkit",
    version
)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one case from a JSON case file.
    Solve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        eps_rel: Option<f64>,
        #[arg(long)]
        max_iters: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Let the penalty bootstrap relax the keep-out constraints too.
        #[arg(long, default_value_t = false)]
        relax_keepout: bool,
    },
    /// Run a seeded Monte Carlo sweep of randomized benchmark cases.
    Montecarlo {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        eps_rel: Option<f64>,
        #[arg(long)]
        max_iters: Option<usize>,
        #[arg(long, default_value_t = false)]
        relax_keepout: bool,
    },
    /// Run the certification suites (convexify, solver, trajectory, all).
    Verify {
        #[arg(long, default_value = "all")]
        suite: String,
    },
}

fn main() -> ExitCode {
    let args = Args::parse();
    let code = match args.command {
        Command::Solve {
            config,
            out,
            eps_rel,
            max_iters,
            seed: _,
            relax_keepout,
        } => {
            let overrides = Overrides {
                eps_rel,
                max_iters,
                relax_keepout,
            };
            match cmd_solve(&config, &default_out_dir(out), &overrides) {
                Ok(status) => exit_code_of(status),
                Err(e) => {
                    eprintln!("error: {e}");
                    EXIT_ERROR
                }
            }
        }
        Command::Montecarlo {
            config,
            out,
            cases,
            seed,
            eps_rel,
            max_iters,
            relax_keepout,
        } => {
            let overrides = Overrides {
                eps_rel,
                max_iters,
                relax_keepout,
            };
            match cmd_montecarlo(
                config.as_deref(),
                &default_out_dir(out),
                cases,
                seed,
                &overrides,
            ) {
                Ok(()) => 0,
                Err(e) => {
                    eprintln!("error: {e}");
                    EXIT_ERROR
                }
            }
        }
        Command::Verify { suite } => cmd_verify(&suite),
    };
    ExitCode::from(code as u8)
}
