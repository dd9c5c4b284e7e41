mod args;
mod commands;
mod config;
mod manifest;

use std::process::ExitCode;

use anyhow::Result;
use clap::{CommandFactory, FromArgMatches};
use qexpand_core::Error;

use args::Cli;

fn threads(requested: Option<usize>) -> Result<usize> {
    let n = match requested {
        Some(n) => n,
        None => match std::env::var("QEXPAND_THREADS") {
            Ok(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("QEXPAND_THREADS must be a positive integer, got `{v}`")))?,
            Err(_) => 0,
        },
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))?;
    Ok(rayon::current_num_threads())
}

fn run() -> Result<()> {
    let argv = config::apply(std::env::args_os().collect())?;
    let matches = match Cli::command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e)
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) =>
        {
            e.print()?;
            return Ok(());
        }
        Err(e) => {
            let msg = e.to_string();
            let line = msg.lines().next().unwrap_or_default().trim_start_matches("error: ");
            return Err(Error::Config(line.to_string()).into());
        }
    };
    let cli = Cli::from_arg_matches(&matches).map_err(|e| Error::Config(e.to_string()))?;
    let threads = threads(cli.command.common().threads)?;
    commands::run(&cli.command, threads)
}

/// Exit code and reason class of a failure.
fn classify(e: &anyhow::Error) -> (u8, &'static str) {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(err) if err.is_config() => (1, "config"),
        Some(err) if err.is_numeric() => (3, "numeric"),
        _ => (2, "data"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, kind) = classify(&e);
            let reason = format!("{e:#}").replace('\n', " ");
            eprintln!("error[{kind}]: {reason}");
            ExitCode::from(code)
        }
    }
}
