use std::process::ExitCode;

use clap::{Parser, Subcommand};
use npb_hte_cli::{configure_threads, execute, Command, Overrides};

/// Bayesian nonparametric analysis of randomized experiments.
#[derive(Parser)]
#[command(name = "npb-hte", version)]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Expand features into positive-quintile indicators.
    Expand(Overrides),
    /// Unadjusted, regression-adjusted and forest ATE posteriors.
    Ate(Overrides),
    /// Posterior of the treatment-control coefficient difference.
    LinHte(Overrides),
    /// Fit one sample tree (all weights equal to one).
    Tree(Overrides),
    /// Fit a Bayesian forest and summarize effects.
    Forest(Overrides),
    /// Generate a synthetic experiment with known potential outcomes.
    Synth(Overrides),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, overrides) = match cli.command {
        Sub::Expand(o) => (Command::Expand, o),
        Sub::Ate(o) => (Command::Ate, o),
        Sub::LinHte(o) => (Command::LinHte, o),
        Sub::Tree(o) => (Command::Tree, o),
        Sub::Forest(o) => (Command::Forest, o),
        Sub::Synth(o) => (Command::Synth, o),
    };
    let result = configure_threads().and_then(|()| execute(command, &overrides));
    match result {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("npb-hte {}: {e}", command.name());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
