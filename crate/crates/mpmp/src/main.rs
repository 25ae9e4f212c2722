use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod run;

#[derive(Parser, Debug)]
#[command(name = "mpmp", version, about = "Check first- and second-order optimality conditions for control problems on manifolds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug, Clone, Default)]
pub struct Common {
    /// Problem file (TOML). `@name` selects a bundled fixture, e.g. `@warga`.
    #[arg(long)]
    pub problem: Option<String>,
    /// Direction file with a [direction] table.
    #[arg(long)]
    pub direction: Option<String>,
    /// Multiplier file with ell_phi and ell_psi; searched for when absent.
    #[arg(long)]
    pub multiplier: Option<String>,
    /// Override grid_N.
    #[arg(long)]
    pub grid: Option<usize>,
    /// Where to write the JSON report.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated epsilon sweep for verify-needle.
    #[arg(long, value_delimiter = ',')]
    pub eps: Option<Vec<f64>>,
    /// CSV output (trajectory for check-pmp, sweep for verify-needle).
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Verdict tolerance for the second-order tests.
    #[arg(long)]
    pub tol_so: Option<f64>,
    /// Needle cells per reference cell (0 picks about two million in total).
    #[arg(long)]
    pub refine: Option<usize>,
    /// Manifold for geometry-selftest when no problem is given; repeatable.
    #[arg(long)]
    pub manifold: Vec<String>,
    /// Random samples per manifold for geometry-selftest.
    #[arg(long, default_value_t = 500)]
    pub samples: usize,
    #[arg(long, default_value_t = 2024)]
    pub seed: u64,
    /// Run everything on one thread.
    #[arg(long)]
    pub sequential: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Adjoint, Hamiltonian maximization and transversality; finds multipliers when none are given.
    CheckPmp(Common),
    /// Integral second-order condition for a direction.
    CheckSoIntegral(Common),
    /// Quasi-pointwise second-order condition at the direction file's (tau, beta, r).
    CheckSoPointwise(Common),
    /// Needle-variation expansion sweep.
    VerifyNeedle(Common),
    /// Randomized identity checks of the geometry kernel.
    GeometrySelftest(Common),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, args) = match &cli.command {
        Command::CheckPmp(a) => ("check-pmp", a),
        Command::CheckSoIntegral(a) => ("check-so-integral", a),
        Command::CheckSoPointwise(a) => ("check-so-pointwise", a),
        Command::VerifyNeedle(a) => ("verify-needle", a),
        Command::GeometrySelftest(a) => ("geometry-selftest", a),
    };
    match run::run(name, args) {
        Ok(report) => {
            print!("{}", report.summary_table());
            if report.verdict.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(2)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
