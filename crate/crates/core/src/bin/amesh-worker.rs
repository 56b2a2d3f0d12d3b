use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use amesh::demo::mocks::MockTables;
use amesh::demo::{shipped_tables, MOCK_COMPONENTS};
use amesh::wire::ServiceType;
use amesh::worker::{handler, start_worker, WorkerOptions};
use clap::Parser;

/// Serves one mock service to a broker.
#[derive(Parser)]
#[command(version)]
struct Args {
    #[arg(long, default_value = "tcp://127.0.0.1:5555")]
    endpoint: String,
    /// Service to serve, e.g. ASR or TTS.
    #[arg(long)]
    service: ServiceType,
    /// Worker connections to open.
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long, default_value_t = 2_500)]
    heartbeat_ms: u64,
    /// Extra processing delay per request.
    #[arg(long)]
    delay_us: Option<u64>,
    /// Mock tables to use instead of the built-in ones.
    #[arg(long)]
    tables: Option<PathBuf>,
}

#[tokio::main]
async fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let tables = match &args.tables {
        Some(path) => match std::fs::read_to_string(path).map_err(|e| e.to_string()).and_then(|t| MockTables::parse(&t).map_err(|e| e.to_string())) {
            Ok(t) => t,
            Err(e) => {
                eprintln!("{}: {e}", path.display());
                return ExitCode::FAILURE;
            }
        },
        None => shipped_tables(),
    };
    let Some(behavior) = MOCK_COMPONENTS
        .iter()
        .find(|(_, _, service)| *service == args.service)
        .and_then(|(_, table, _)| tables.get(table))
        .cloned()
    else {
        eprintln!("no mock table for {}", args.service.name());
        return ExitCode::FAILURE;
    };
    let delay = args.delay_us.map(Duration::from_micros).unwrap_or_else(|| behavior.delay());
    let options = WorkerOptions { delay, heartbeat: Duration::from_millis(args.heartbeat_ms), ..Default::default() };
    let serve = handler(move |input| Ok(behavior.respond(&input)));
    let mut workers = Vec::new();
    for _ in 0..args.count.max(1) {
        match start_worker(&args.endpoint, args.service, serve.clone(), options.clone()).await {
            Ok(w) => workers.push(w),
            Err(e) => {
                eprintln!("{}: {e}", args.endpoint);
                return ExitCode::FAILURE;
            }
        }
    }
    log::info!("{} x{} serving {}", args.service.name(), workers.len(), args.endpoint);
    while workers.iter().any(|w| w.is_running()) {
        tokio::time::sleep(Duration::from_millis(200)).await;
    }
    log::warn!("all workers disconnected");
    ExitCode::FAILURE
}
