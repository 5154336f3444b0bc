//! Library side of the `trajrec` binary, so the commands can be driven from
//! tests without spawning processes.

pub mod args;
pub mod commands;
pub mod pipeline;
pub mod report;

use anyhow::Result;
use clap::Parser;

use args::{expand_config, Cli, Command};
use report::Provenance;

/// Runs one command line. `argv[0]` is the program name.
pub fn run(argv: &[String]) -> Result<()> {
    let argv = expand_config(argv)?;
    let cli = Cli::try_parse_from(&argv)?;
    let seed = match &cli.command {
        Command::GenData(a) => a.seed,
        Command::Train(a) => a.seed,
        Command::Recover(a) => a.seed,
        Command::Eval(_) => 0,
        Command::Bench(a) => a.seed,
    };
    let prov = Provenance::new(&argv, seed);
    match &cli.command {
        Command::GenData(a) => commands::gen::run(a, &prov),
        Command::Train(a) => commands::train::run(a, &prov),
        Command::Recover(a) => commands::recover::run(a, &prov),
        Command::Eval(a) => commands::eval::run(a, &prov),
        Command::Bench(a) => commands::bench::run(a, &prov),
    }
}

/// Machine-readable category and exit code for a failed command.
pub fn classify(err: &anyhow::Error) -> (&'static str, u8) {
    if let Some(e) = err.downcast_ref::<trajrec_core::Error>() {
        let code = match e.category() {
            "invalid_input" => 3,
            "shape" => 4,
            "duplicate_time" => 5,
            "non_finite" => 6,
            "degenerate" => 7,
            "autodiff" => 8,
            "checkpoint" => 9,
            "io" => 10,
            "json" => 11,
            _ => 1,
        };
        return (e.category(), code);
    }
    if err.downcast_ref::<clap::Error>().is_some() {
        return ("usage", 2);
    }
    if err.downcast_ref::<std::io::Error>().is_some() {
        return ("io", 10);
    }
    if err.downcast_ref::<serde_json::Error>().is_some() {
        return ("json", 11);
    }
    ("error", 1)
}
