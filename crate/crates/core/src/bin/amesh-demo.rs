use std::process::ExitCode;

use amesh::demo::scenarios::{run_scenario, Scenario};
use amesh::demo::Mode;
use clap::Parser;

/// Runs a scripted conversation against an in-process server and prints
/// its transcript.
#[derive(Parser)]
#[command(version)]
struct Args {
    /// ideal, clarification or grocery
    #[arg(long, default_value = "ideal")]
    scenario: Scenario,
    /// Serve the mock components from workers behind the broker.
    #[arg(long)]
    remote: bool,
}

#[tokio::main]
async fn main() -> ExitCode {
    env_logger::init();
    let args = Args::parse();
    let mode = if args.remote { Mode::Remote } else { Mode::Local };
    println!("# mode {}", mode.as_str());
    match run_scenario(args.scenario, mode).await {
        Ok(transcript) => {
            print!("{}", transcript.render());
            println!("# ok");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::FAILURE
        }
    }
}
