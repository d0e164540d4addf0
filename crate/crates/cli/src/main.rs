mod cli;
mod commands;
mod report;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use cli::{Cli, Command};

fn error_kind(err: &anyhow::Error) -> &'static str {
    use jointscale::Error as E;
    match err.chain().find_map(|e| e.downcast_ref::<E>()) {
        Some(E::InvalidInput(_)) => "invalid_input",
        Some(E::DisconnectedGraph { .. }) => "disconnected_graph",
        Some(E::DegenerateInput(_)) => "degenerate_input",
        Some(E::DegenerateWeights { .. }) => "degenerate_weights",
        Some(E::NumericalFailure(_)) => "numerical_failure",
        Some(E::Parse { .. }) => "parse",
        Some(E::Io { .. }) => "io",
        None => "error",
    }
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(cli.threads as usize).build()?;
    pool.install(|| match &cli.command {
        Command::Embed(a) => commands::embed(a),
        Command::Joint(a) => commands::joint(a),
        Command::Match(a) => commands::match_graphs(a),
        Command::Eval(a) => commands::eval(a),
        Command::Gen(a) => commands::gen(a),
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rendered = e.to_string();
            let first = rendered.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            report::emit_error("usage", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    report::init_logging(cli.log_level.into());
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            report::emit_error(error_kind(&err), &format!("{err:#}"));
            ExitCode::FAILURE
        }
    }
}
