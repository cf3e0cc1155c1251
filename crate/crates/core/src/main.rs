use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use tailatlas::cli_io::{run_text, Mode};

/// Ergodic decomposition of skew-product extensions and Lorentz gas ensembles.
#[derive(Parser)]
#[command(name = "tailatlas", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Decompose a Markov base with a finite or lattice fiber.
    Decompose(Args),
    /// Decompose via the depth-k past quotient of a two-sided shift.
    KDecompose(Args),
    /// Simulate a periodic Lorentz gas ensemble.
    Lorentz(Args),
}

#[derive(clap::Args)]
struct Args {
    #[arg(long)]
    config: PathBuf,
    /// Report path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let (mode, args) = match cli.command {
        Command::Decompose(a) => (Mode::Decompose, a),
        Command::KDecompose(a) => (Mode::KDecompose, a),
        Command::Lorentz(a) => (Mode::Lorentz, a),
    };
    let text = match std::fs::read_to_string(&args.config) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {}: {e}", args.config.display());
            return ExitCode::from(1);
        }
    };
    let out = args.out.as_ref().map(|p| p.to_string_lossy().into_owned());
    let (code, text) = run_text(&text, Some(mode), args.seed, out.as_deref());
    if code == 1 {
        eprint!("{text}");
    } else if out.is_none() {
        print!("{text}");
    }
    ExitCode::from(code as u8)
}
