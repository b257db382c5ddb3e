use clap::Parser;
use detgen_cli::commands::{run, Cli};

fn main() -> anyhow::Result<()> {
    run(Cli::parse())
}
