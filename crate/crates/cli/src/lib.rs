//! Command-line pipeline and annotation service for `creadec`.

pub mod cli;
pub mod commands;
pub mod image;
pub mod service;

use clap::Parser;

pub use cli::{Cli, Command};

/// Parse `argv` (including the program name) and run the subcommand.
pub fn run<I, S>(argv: I) -> anyhow::Result<()>
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let argv: Vec<String> = argv.into_iter().map(Into::into).collect();
    let cli = Cli::try_parse_from(&argv)?;
    match &cli.command {
        Command::TrainVae(a) => commands::train_vae(a, &argv),
        Command::TrainClassifier(a) => commands::train_classifier(a, &argv),
        Command::Profile(a) => commands::profile(a, &argv),
        Command::Generate(a) => commands::generate(a, &argv),
        Command::Metrics(a) => commands::metrics(a, &argv),
        Command::Filter(a) => commands::filter(a, &argv),
        Command::Evaluate(a) => commands::evaluate(a, &argv),
        Command::ServeAnnotation(a) => commands::serve(a, &argv),
        Command::Export(a) => commands::export(a, &argv),
    }
}
