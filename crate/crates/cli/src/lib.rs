//! Command-line front end for `cls-core`. Each subcommand is a plain
//! function so it can be driven from tests without spawning a process.

pub mod args;
pub mod commands;
pub mod config;
pub mod error;

pub use args::{Cli, Command};
pub use error::{CliError, CliResult};

/// Runs one parsed command inside a thread pool of the requested size.
pub fn run(cli: &Cli) -> CliResult<()> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be positive".into()));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(CliError::other)?;
    pool.install(|| match &cli.command {
        Command::Train(a) => commands::train(a),
        Command::Infer(a) => commands::infer_cmd(a),
        Command::Warp(a) => commands::warp(a),
        Command::Generate(a) => commands::generate(a),
        Command::Bench(a) => commands::bench(a),
        Command::Synth(a) => commands::synth(a),
    })
}
