//! `contextd`: one binary for annotation, dataset handling, evaluation,
//! benchmarking and the realtime loop.

mod args;
mod commands;
mod config;
mod error;

use std::io::Write;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use args::{Cli, Command};
use commands::Ctx;
use config::AppConfig;
use error::{CliError, CliResult};

/// Logs go to stderr as one JSON object per line.
fn init_logging(filter: &str) {
    env_logger::Builder::new()
        .parse_filters(filter)
        .format(|buf, record| {
            let ts = std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_millis() as u64)
                .unwrap_or(0);
            let line = serde_json::json!({
                "ts_ms": ts,
                "level": record.level().as_str(),
                "target": record.target(),
                "msg": record.args().to_string(),
            });
            writeln!(buf, "{line}")
        })
        .target(env_logger::Target::Stderr)
        .init();
}

fn dispatch(cli: &Cli) -> CliResult {
    let config = AppConfig::load(cli.config.as_deref(), std::env::vars())?;
    let taxonomy = config.load_taxonomy()?;
    let ctx = Ctx { config, taxonomy };
    match &cli.command {
        Command::Annotate(a) => commands::annotate(&ctx, a),
        Command::Review(a) => commands::review(&ctx, a),
        Command::Import(a) => commands::import(&ctx, a),
        Command::Export(a) => commands::export(&ctx, a),
        Command::Stats(a) => commands::stats_cmd(&ctx, a),
        Command::Split(a) => commands::split_cmd(&ctx, a),
        Command::Shots(a) => commands::shots(&ctx, a),
        Command::Evaluate(a) => commands::evaluate_cmd(&ctx, a),
        Command::Bench(a) => commands::bench(&ctx, a),
        Command::Run(a) => commands::run(&ctx, a),
        Command::Ask(a) => commands::ask(&ctx, a),
        Command::Synth(c) => commands::synth_cmd(&ctx, c),
        Command::Serve(a) => commands::serve(&ctx, a),
        Command::Conformance(a) => commands::conformance_cmd(&ctx, a),
    }
}

fn fail(err: &CliError) -> ExitCode {
    eprintln!("{}", err.to_json_line());
    ExitCode::from(err.category.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
            let _ = e.print();
            return fail(&CliError::usage("no subcommand given"));
        }
        Err(e) => {
            let message = e.render().to_string();
            let head = message.split("\n\n").next().unwrap_or("");
            let summary = head.trim_start_matches("error: ").split_whitespace().collect::<Vec<_>>().join(" ");
            eprint!("{message}");
            return fail(&CliError::usage(summary));
        }
    };
    init_logging(&cli.log);
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}
