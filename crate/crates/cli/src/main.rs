use std::process::ExitCode;

use clap::Parser;

mod commands;

#[derive(Parser)]
#[command(
    name = "edgeclock",
    about = "Causal consistency over partial replication with edge-indexed clocks: \
             analyze topologies, run deterministic simulations, check traces",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: commands::Command,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::execute(cli.command, &mut std::io::stdout().lock()) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(2)
        }
    }
}
