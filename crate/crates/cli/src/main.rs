//! `rht` — reference heatmap transfer from the command line.
//!
//! Exit codes: 0 on success, 1 on input errors (bad flags, unreadable or
//! malformed files, shape mismatches), 2 on internal failures (failed
//! self-checks, diverged training).

mod commands;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use commands::{evaluate, fuse, overfit, render, selfcheck, transfer, visualize, CliError};

#[derive(Parser)]
#[command(name = "rht", version, about = "Reference heatmap transfer toolkit")]
pub struct Cli {
    /// Seed for weight initialization and randomized commands.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Emit machine-parseable JSON lines on stdout.
    #[arg(long, global = true)]
    pub json: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Render landmark and boundary heatmaps from a .pts annotation.
    Render(render::RenderArgs),
    /// Run soft and hard transfer on an image pair, writing the
    /// transferred features, the affine parameters and the attention.
    Transfer(transfer::TransferArgs),
    /// Run the full forward pass: transfer plus multi-scale fusion.
    Fuse(fuse::FuseArgs),
    /// Compare predicted and ground-truth .pts directories.
    Evaluate(evaluate::EvaluateArgs),
    /// Run the invariant battery (oracles, identities, gradient checks).
    Selfcheck(selfcheck::SelfcheckArgs),
    /// Convert one channel of an RHM1 map to a normalized PGM image.
    Visualize(visualize::VisualizeArgs),
    /// Train on one synthetic sample and write the loss trace.
    Overfit(overfit::OverfitArgs),
}

fn main() {
    rht_core::parallel::configure_from_env();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => match e.kind() {
            ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                print!("{e}");
                std::process::exit(0);
            }
            _ => {
                eprint!("{e}");
                std::process::exit(1);
            }
        },
    };

    let result = match &cli.command {
        Command::Render(args) => render::run(&cli, args),
        Command::Transfer(args) => transfer::run(&cli, args),
        Command::Fuse(args) => fuse::run(&cli, args),
        Command::Evaluate(args) => evaluate::run(&cli, args),
        Command::Selfcheck(args) => selfcheck::run(&cli, args),
        Command::Visualize(args) => visualize::run(&cli, args),
        Command::Overfit(args) => overfit::run(&cli, args),
    };

    match result {
        Ok(()) => {}
        Err(CliError::Input(message)) => {
            eprintln!("error: {message}");
            std::process::exit(1);
        }
        Err(CliError::Internal(message)) => {
            eprintln!("internal failure: {message}");
            std::process::exit(2);
        }
    }
}
