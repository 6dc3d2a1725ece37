mod args;
mod commands;

use std::process::ExitCode;

use clap::Parser;
use commands::Status;

const EXIT_VALIDATION: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

fn main() -> ExitCode {
    let cli = match args::Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DYSFLUX_LOG", "info")).init();

    match commands::run(cli.command) {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::Failed) => ExitCode::from(EXIT_VALIDATION),
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            let validation = matches!(
                e.downcast_ref::<dysflux_core::Error>(),
                Some(dysflux_core::Error::Validation(_))
            );
            ExitCode::from(if validation { EXIT_VALIDATION } else { EXIT_RUNTIME })
        }
    }
}

/// The error chain joined with `: `, skipping causes a parent message
/// already quotes.
fn describe(e: &anyhow::Error) -> String {
    let mut msg = e.to_string();
    for cause in e.chain().skip(1) {
        let text = cause.to_string();
        if !msg.contains(&text) {
            msg.push_str(": ");
            msg.push_str(&text);
        }
    }
    msg
}
