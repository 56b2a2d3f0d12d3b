use std::io::Write;
use std::process::ExitCode;
use std::time::Duration;

use amesh::bench::{
    collect_overheads, percentile, run_bench, scaling_ratio, BenchConfig, BenchStats, MsgCount, CSV_HEADER,
    MAX_SCALING_RATIO,
};
use amesh::config::ServerConfig;
use amesh::demo::{DemoServer, Mode, PIPELINE_RULES};
use clap::Parser;

/// Drives the conversational pipeline with many concurrent session clients
/// and reports per-message latency.
#[derive(Parser)]
#[command(version)]
struct Args {
    /// Client counts to sweep.
    #[arg(long, value_delimiter = ',', default_values_t = [10usize, 100, 1000])]
    clients: Vec<usize>,
    /// Messages per client (or in total with --total).
    #[arg(long, default_value_t = 100)]
    msgs: usize,
    #[arg(long, default_value_t = 10)]
    reps: usize,
    /// Server to drive; an in-process server is started when omitted.
    #[arg(long)]
    endpoint: Option<String>,
    /// Serve the in-process pipeline from broker workers.
    #[arg(long)]
    remote: bool,
    /// Write per-repetition rows here.
    #[arg(long)]
    csv: Option<std::path::PathBuf>,
    /// `msgs` is per client (default).
    #[arg(long, conflicts_with = "total")]
    per_client: bool,
    /// `msgs` is split across all clients.
    #[arg(long)]
    total: bool,
    /// Allow 10000 clients and more.
    #[arg(long)]
    large: bool,
    #[arg(long, default_value_t = 10_000)]
    timeout_ms: u64,
}

fn summary(s: &BenchStats) -> String {
    format!(
        "clients={} msgs={} ({}) hm={:.2}ms ms/msg={:.4} p50={:.3} p95={:.3} p99={:.3} thr={:.0}/s sent={} replies={} errors={}",
        s.clients,
        s.msgs,
        s.count.as_str(),
        s.harmonic_mean_ms,
        s.ms_per_msg,
        s.p50,
        s.p95,
        s.p99,
        s.throughput,
        s.sent(),
        s.replies(),
        s.errors()
    )
}

#[tokio::main]
async fn main() -> ExitCode {
    env_logger::init();
    let args = Args::parse();
    let count = if args.total { MsgCount::Total } else { MsgCount::PerClient };
    let server = match &args.endpoint {
        Some(_) => None,
        None => {
            let config = ServerConfig { port: 0, ..Default::default() };
            let mode = if args.remote { Mode::Remote } else { Mode::Local };
            match DemoServer::start(mode, PIPELINE_RULES, &config).await {
                Ok(s) => Some(s),
                Err(e) => {
                    eprintln!("cannot start server: {e}");
                    return ExitCode::FAILURE;
                }
            }
        }
    };
    let endpoint = args.endpoint.clone().unwrap_or_else(|| server.as_ref().expect("started").endpoint());

    let mut csv = match &args.csv {
        Some(path) => match std::fs::File::create(path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{CSV_HEADER}");
                Some(f)
            }
            Err(e) => {
                eprintln!("{}: {e}", path.display());
                return ExitCode::FAILURE;
            }
        },
        None => None,
    };

    let mut results = Vec::new();
    let mut overheads = Vec::new();
    for &clients in &args.clients {
        let config = BenchConfig {
            clients,
            msgs: args.msgs,
            reps: args.reps,
            count,
            timeout: Duration::from_millis(args.timeout_ms),
            large: args.large,
            ..Default::default()
        };
        let stats = match run_bench(&endpoint, &config).await {
            Ok(s) => s,
            Err(e) => {
                eprintln!("{clients} clients: {e}");
                return ExitCode::FAILURE;
            }
        };
        println!("{}", summary(&stats));
        if let Some(f) = csv.as_mut() {
            for row in stats.csv_rows() {
                let _ = writeln!(f, "{row}");
            }
        }
        if let Some(s) = &server {
            let ids: Vec<String> = (0..clients).map(|i| format!("s-bench-{i}")).collect();
            overheads.extend(collect_overheads(&s.server, &ids).await);
        }
        results.push(stats);
    }

    if !overheads.is_empty() {
        overheads.sort_by(f64::total_cmp);
        println!(
            "orchestrator overhead: turns={} p50={:.3}ms p99={:.3}ms",
            overheads.len(),
            percentile(&overheads, 50.0).unwrap_or(0.0),
            percentile(&overheads, 99.0).unwrap_or(0.0)
        );
    }
    let mut ok = true;
    if let (Some(first), Some(last)) = (results.first(), results.last()) {
        if results.len() > 1 {
            let ratio = scaling_ratio(first, last);
            let pass = ratio <= MAX_SCALING_RATIO;
            println!(
                "scaling {}→{} clients: ratio {ratio:.2} (limit {MAX_SCALING_RATIO}) {}",
                first.clients,
                last.clients,
                if pass { "ok" } else { "FAIL" }
            );
            ok = pass;
        }
    }
    if let Some(s) = &server {
        s.shutdown().await;
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
