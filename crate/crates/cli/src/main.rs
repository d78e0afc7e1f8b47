mod args;
mod commands;
mod manifest;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

/// Exit status when training produced non-finite values.
const EXIT_DIVERGED: u8 = 3;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("D2MOE_LOG", "info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Stratify(a) => commands::stratify(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::Theory(a) => commands::theory(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e:#}");
            match e.downcast_ref::<d2moe::Error>() {
                Some(d2moe::Error::Diverged { .. }) => ExitCode::from(EXIT_DIVERGED),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
