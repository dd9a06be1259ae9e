mod args;
mod commands;
mod config;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::FitIca(io) => commands::fit_ica(io),
        Command::Train(io) => commands::train(io),
        Command::Eval(io) => commands::eval(io),
        Command::Search(io) => commands::search(io),
        Command::Synth(io) => commands::synth(io),
        Command::CheckGrads(io) => commands::check_grads(io),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
