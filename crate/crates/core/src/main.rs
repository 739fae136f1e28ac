use clap::Parser;

use astor::cli::{dispatch, Cli};

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    dispatch(&cli)?;
    Ok(())
}
