mod args;
mod commands;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};
use commands::UsageError;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::InitModel(a) => commands::init_model(a),
        Command::Calibrate(a) => commands::calibrate(a),
        Command::Generate(a) => commands::generate(a),
        Command::Eval(a) => commands::eval(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Report(a) => commands::report(a),
    };
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) if e.downcast_ref::<UsageError>().is_some() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
