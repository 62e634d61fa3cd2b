use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sltmpc_cli::{run, Command, Exit, Overrides};

/// System level tube MPC experiments.
///
/// Exit status: 0 success, 1 infeasible (or a failed check), 2 invalid
/// configuration, 3 solver or output failure.
#[derive(Parser)]
#[command(name = "sltmpc", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize tubes offline and write tubes.json.
    SynthTubes(Common),
    /// Solve one problem at x0 and write solution.json.
    Solve(Common),
    /// Closed-loop Monte-Carlo runs; writes trajectories.csv and report.json.
    Simulate(Common),
    /// Feasibility grid; writes roa.csv and report.json.
    Roa(Common),
    /// Coverage sweep and costs for several methods; writes report.json.
    Compare(Common),
    /// Empirical tube containment check; writes tubes.json and containment.json.
    Verify(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Disturbance level.
    #[arg(long)]
    theta: Option<f64>,
    /// fir-sltmpc, fir-sltmpc-offline, ct-mpc, rpi-tube or sltmpc-rpi.
    #[arg(long)]
    method: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, args) = match cli.command {
        Cmd::SynthTubes(a) => (Command::SynthTubes, a),
        Cmd::Solve(a) => (Command::Solve, a),
        Cmd::Simulate(a) => (Command::Simulate, a),
        Cmd::Roa(a) => (Command::Roa, a),
        Cmd::Compare(a) => (Command::Compare, a),
        Cmd::Verify(a) => (Command::Verify, a),
    };
    let overrides = Overrides {
        seed: args.seed,
        theta: args.theta,
        method: args.method,
    };
    let exit = match run(command, &args.config, &args.out, &overrides) {
        Ok(outcome) => {
            println!("{}", outcome.summary);
            for f in &outcome.files {
                println!("wrote {}", f.display());
            }
            if outcome.exit != Exit::Ok {
                eprintln!("error: command finished with status {}", outcome.exit as u8);
            }
            outcome.exit
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit()
        }
    };
    ExitCode::from(exit as u8)
}
