//! The `ecohabit` command line.
//!
//! ```text
//! ecohabit simulate --seed 7 --out sim
//! ecohabit ingest --in sim/train.jsonl --store train
//! ecohabit mine --store train --out patterns.jsonl
//! ecohabit rules derive --store train --patterns patterns.jsonl --out rules.jsonl
//! ecohabit ingest --in sim/test.jsonl --store test
//! ecohabit replay --store test --rules rules.jsonl --topology sim/topology.json --out recs.jsonl
//! ecohabit evaluate --recs recs.jsonl --truth sim/truth.jsonl
//! ```
//!
//! Failures print one line, `error: kind=<kind> msg="<message>"`, to stderr.
//! Bad arguments and settings exit with 2, other failures with 1.

mod args;
mod commands;
mod error;
mod settings;

use std::ffi::OsString;

use clap::error::ErrorKind;
use clap::Parser;

pub use args::Cli;
pub use error::CliError;
pub use settings::CLI_KEYS;

use args::Command;
use commands::Ctx;
use settings::Settings;

/// Parses `argv` (program name first), runs the command and returns the
/// exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    0
                }
                _ => {
                    let text = e.render().to_string();
                    let mut lines = text.lines();
                    let first = lines.next().unwrap_or_default().trim_start_matches("error: ");
                    let usage = CliError {
                        kind: "usage",
                        msg: first.to_string(),
                        code: CliError::USAGE,
                    };
                    eprintln!("{}", usage.line());
                    for l in lines {
                        eprintln!("{l}");
                    }
                    CliError::USAGE
                }
            };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.line());
            e.code
        }
    }
}

fn init_logging(filter: &str) -> Result<(), CliError> {
    let filter = tracing_subscriber::EnvFilter::try_new(filter)
        .map_err(|e| CliError::invalid(format!("log filter {filter:?}: {e}")))?;
    // a second init in the same process keeps the first subscriber
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .try_init();
    Ok(())
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let settings = Settings::load(cli.config.as_deref())?;
    let default_log = if matches!(cli.command, Command::Serve(_)) { "info" } else { "warn" };
    let log = cli
        .log
        .clone()
        .or_else(|| settings.get("log").map(str::to_string))
        .unwrap_or_else(|| default_log.to_string());
    init_logging(&log)?;
    let ctx = Ctx {
        settings,
        json: cli.json,
    };
    match &cli.command {
        Command::Ingest(a) => commands::ingest(&ctx, a),
        Command::Mine(a) => commands::mine(&ctx, a),
        Command::Rules(c) => commands::rules(&ctx, c),
        Command::Replay(a) => commands::replay_cmd(&ctx, a),
        Command::Serve(a) => commands::serve(&ctx, a),
        Command::Feedback(c) => commands::feedback(&ctx, c),
        Command::Adapt(a) => commands::adapt(&ctx, a),
        Command::Bench(a) => commands::bench(&ctx, a),
        Command::Simulate(a) => commands::simulate(&ctx, a),
        Command::Evaluate(a) => commands::evaluate_cmd(&ctx, a),
    }
}
