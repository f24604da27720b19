//! The `care` command line: `synth`, `rectify`, `verify` and `evaluate`.

pub mod args;
pub mod commands;
pub mod config;
pub mod error;

pub use args::{Cli, Command};
pub use error::CliError;

/// Runs one parsed command.
pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Rectify(a) => commands::rectify(&a),
        Command::Verify(a) => commands::verify(&a).map(|_| ()),
        Command::Evaluate(a) => commands::evaluate(&a),
    }
}
