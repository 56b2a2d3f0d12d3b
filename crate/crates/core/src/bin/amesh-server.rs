use std::path::PathBuf;
use std::process::ExitCode;

use amesh::config::ServerConfig;
use amesh::demo::mocks::MockTables;
use amesh::demo::{rules_by_name, shipped_tables, DemoServer, Mode};
use amesh::orchestrator::ControlProgram;
use clap::Parser;

/// Serves the broker, session manager and demo components on one port.
///
/// Settings are layered: defaults, then --config, then AMESH_* variables,
/// then flags.
#[derive(Parser)]
#[command(version)]
struct Args {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    host: Option<String>,
    #[arg(long)]
    port: Option<u16>,
    #[arg(long)]
    heartbeat_ms: Option<u64>,
    #[arg(long)]
    liveness_factor: Option<u32>,
    #[arg(long)]
    request_timeout_ms: Option<u64>,
    /// Log broker statistics this often (0 = never).
    #[arg(long)]
    stats_every_ms: Option<u64>,
    #[arg(long)]
    session_timeout_ms: Option<u64>,
    #[arg(long)]
    grace_ms: Option<u64>,
    #[arg(long)]
    retention_ms: Option<u64>,
    /// `pipeline`, `grocery` or a path to a rule file.
    #[arg(long, default_value = "pipeline")]
    rules: String,
    /// Mock tables to use instead of the built-in ones.
    #[arg(long)]
    tables: Option<PathBuf>,
    /// Bind the mock components to broker workers (see amesh-worker).
    #[arg(long)]
    remote: bool,
    /// Workers per service to start in-process with --remote; 0 expects
    /// external workers.
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

fn build_config(args: &Args) -> Result<ServerConfig, String> {
    let mut config = ServerConfig::default();
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        config.apply_file(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    }
    config.apply_env(std::env::vars()).map_err(|e| format!("environment: {e}"))?;
    let flags: [(&str, Option<String>); 9] = [
        ("host", args.host.clone()),
        ("port", args.port.map(|v| v.to_string())),
        ("heartbeat_ms", args.heartbeat_ms.map(|v| v.to_string())),
        ("liveness_factor", args.liveness_factor.map(|v| v.to_string())),
        ("request_timeout_ms", args.request_timeout_ms.map(|v| v.to_string())),
        ("stats_every_ms", args.stats_every_ms.map(|v| v.to_string())),
        ("session_timeout_ms", args.session_timeout_ms.map(|v| v.to_string())),
        ("grace_ms", args.grace_ms.map(|v| v.to_string())),
        ("retention_ms", args.retention_ms.map(|v| v.to_string())),
    ];
    for (key, value) in flags {
        if let Some(value) = value {
            config.set(key, &value).map_err(|e| e.to_string())?;
        }
    }
    Ok(config)
}

fn load_rules(source: &str) -> Result<ControlProgram, String> {
    let text = match rules_by_name(source) {
        Some(text) => text.to_owned(),
        None => std::fs::read_to_string(source).map_err(|e| format!("{source}: {e}"))?,
    };
    ControlProgram::rules(&text).map_err(|e| format!("{source}: {e}"))
}

#[tokio::main]
async fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let setup = (|| {
        let config = build_config(&args)?;
        let program = load_rules(&args.rules)?;
        let tables = match &args.tables {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
                MockTables::parse(&text).map_err(|e| format!("{}: {e}", path.display()))?
            }
            None => shipped_tables(),
        };
        Ok::<_, String>((config, program, tables))
    })();
    let (config, program, tables) = match setup {
        Ok(s) => s,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::FAILURE;
        }
    };
    let mode = if args.remote { Mode::Remote } else { Mode::Local };
    let server = match DemoServer::start_with(mode, program, &config, &tables, args.workers).await {
        Ok(s) => s,
        Err(e) => {
            eprintln!("cannot start: {e}");
            return ExitCode::FAILURE;
        }
    };
    log::info!("listening on {} ({} components)", server.endpoint(), mode.as_str());
    // Runs until killed.
    std::future::pending::<()>().await;
    ExitCode::SUCCESS
}
