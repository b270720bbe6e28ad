mod args;
mod commands;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};
use commands::{CliError, Ctx};
use synthsel::ExecMode;

fn configure_threads(flag: Option<usize>) -> Result<(), CliError> {
    let n = match flag {
        Some(n) => n,
        None => match std::env::var("SYNTHSEL_THREADS") {
            Ok(s) => s
                .trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("SYNTHSEL_THREADS must be a non-negative integer, got '{s}'")))?,
            Err(_) => 0,
        },
    };
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot configure {n} threads: {e}")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads(cli.threads)?;
    let ctx = Ctx {
        mode: if cli.sequential { ExecMode::Sequential } else { ExecMode::Parallel },
    };
    match &cli.command {
        Command::Fit(a) => commands::fit(a, &ctx),
        Command::Select(a) => commands::select(a, &ctx),
        Command::Df(a) => commands::df(a, &ctx),
        Command::Cv(a) => commands::cv(a, &ctx),
        Command::Simulate(a) => commands::simulate(a, &ctx),
        Command::Benchmark(a) => commands::benchmark(a, &ctx),
        Command::Placebo(a) => commands::placebo(a, &ctx),
        Command::Whitetest(a) => commands::whitetest(a, &ctx),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Run(e)) => {
            let report = serde_json::json!({
                "schema_version": synthsel::io::SCHEMA_VERSION,
                "error": {"kind": e.kind(), "message": e.to_string()},
            });
            eprintln!("{report}");
            ExitCode::from(1)
        }
    }
}
