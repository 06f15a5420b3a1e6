mod args;
mod commands;
mod config;

use std::fmt;
use std::process::ExitCode;

use clap::Parser;

use args::Cli;

/// Bad flags, missing input files and similar; exit status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn exit_status(err: &anyhow::Error) -> u8 {
    use copilot_core::Error as E;
    if err.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<E>() {
        Some(E::Config(_) | E::Domain(_)) => 2,
        Some(E::Format(_) | E::Data(_)) => 3,
        _ => 4,
    }
}

/// `key = value` lines, readable back through `--config`.
fn header(cli: &Cli) -> String {
    let mut out = format!("[csa {}]\n", cli.command.name());
    if let serde_json::Value::Object(map) = cli.command.resolved() {
        for (k, v) in map {
            let key = k.replace('_', "-");
            match v {
                serde_json::Value::Null => {}
                serde_json::Value::String(s) => out += &format!("{key} = {s}\n"),
                serde_json::Value::Array(items) if items.iter().all(|i| i.is_number()) => {
                    let joined: Vec<String> = items.iter().map(|i| i.to_string()).collect();
                    out += &format!("{key} = {}\n", joined.join(","));
                }
                serde_json::Value::Array(items) => {
                    for i in items {
                        out += &format!("{key} = {}\n", i.as_str().map(str::to_owned).unwrap_or_else(|| i.to_string()));
                    }
                }
                other => out += &format!("{key} = {other}\n"),
            }
        }
    }
    out
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let argv = match config::merge(std::env::args().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(exit_status(&e));
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            e.print().ok();
            return ExitCode::from(code);
        }
    };
    eprint!("{}", header(&cli));
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_status(&e))
        }
    }
}
