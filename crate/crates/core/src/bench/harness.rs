use std::time::{Duration, Instant};

use serde_json::json;
use thiserror::Error;
use tokio::sync::watch;

use super::stats::{percentile, BenchStats, MsgCount, RepStats, StatsError};
use crate::client::{ClientError, SessionClient};
use crate::server::Server;

/// Key injected per message and the keys that end a round trip.
pub const INPUT_KEY: &str = "MIC_Event";
pub const DONE_KEYS: [&str; 2] = ["TTS_Event", "Error_Event"];

/// Client counts from here on need `large` to be set.
pub const LARGE_CLIENTS: usize = 10_000;

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub clients: usize,
    pub msgs: usize,
    pub reps: usize,
    pub count: MsgCount,
    /// Per round trip.
    pub timeout: Duration,
    /// Connections opened concurrently while ramping up.
    pub connect_batch: usize,
    pub large: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            clients: 10,
            msgs: 100,
            reps: 3,
            count: MsgCount::PerClient,
            timeout: Duration::from_secs(10),
            connect_batch: 128,
            large: false,
        }
    }
}

impl BenchConfig {
    /// Messages client `i` sends.
    pub fn msgs_for(&self, i: usize) -> usize {
        match self.count {
            MsgCount::PerClient => self.msgs,
            MsgCount::Total => self.msgs / self.clients + usize::from(i < self.msgs % self.clients),
        }
    }

    pub fn messages_per_rep(&self) -> u64 {
        (0..self.clients).map(|i| self.msgs_for(i) as u64).sum()
    }
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("clients, msgs and reps must all be positive")]
    EmptyRun,
    #[error("{0} clients needs --large")]
    TooLarge(usize),
    #[error("client {client} could not connect: {source}")]
    ConnectFailure { client: usize, source: ClientError },
    #[error("accounting mismatch: sent {sent}, replies {replies}, errors {errors}")]
    IncompleteRun { sent: u64, replies: u64, errors: u64 },
    #[error(transparent)]
    Stats(#[from] StatsError),
}

/// One repetition, before aggregation.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub total_ms: f64,
    pub round_trips_ms: Vec<f64>,
    pub sent: u64,
    pub replies: u64,
    pub errors: u64,
    pub session_ids: Vec<String>,
}

struct ClientTally {
    latencies_ms: Vec<f64>,
    sent: u64,
    replies: u64,
    errors: u64,
}

async fn drive(mut client: SessionClient, msgs: usize, timeout: Duration, mut go: watch::Receiver<bool>) -> ClientTally {
    let mut tally = ClientTally { latencies_ms: Vec::with_capacity(msgs), sent: 0, replies: 0, errors: 0 };
    if go.wait_for(|ready| *ready).await.is_err() {
        return tally;
    }
    for _ in 0..msgs {
        let started = Instant::now();
        if client.inject(INPUT_KEY, json!({"bytes": "hello"})).is_err() {
            break;
        }
        tally.sent += 1;
        match client.wait_for_any(&DONE_KEYS, timeout).await {
            Ok(event) if event.key() == DONE_KEYS[0] => tally.replies += 1,
            Ok(_) | Err(ClientError::Timeout) => tally.errors += 1,
            Err(_) => {
                tally.errors += 1;
                break;
            }
        }
        tally.latencies_ms.push(started.elapsed().as_secs_f64() * 1e3);
    }
    client.disconnect();
    tally
}

/// Connects every client, then releases them together and times until the
/// last one is done.
pub async fn run_once(endpoint: &str, config: &BenchConfig, rep: usize) -> Result<RunOutcome, BenchError> {
    let (go_tx, go_rx) = watch::channel(false);
    let mut tasks = Vec::with_capacity(config.clients);
    let mut session_ids = Vec::with_capacity(config.clients);
    let connect_timeout = config.timeout.max(Duration::from_secs(5));
    for start in (0..config.clients).step_by(config.connect_batch.max(1)) {
        let end = (start + config.connect_batch.max(1)).min(config.clients);
        let batch = (start..end).map(|i| async move {
            let user = format!("bench-{i}");
            let device = format!("rep{rep}");
            (i, SessionClient::connect(endpoint, &user, &device, connect_timeout).await)
        });
        for (i, connected) in futures::future::join_all(batch).await {
            let client = connected.map_err(|source| BenchError::ConnectFailure { client: i, source })?;
            session_ids.push(client.session_id().to_owned());
            tasks.push(tokio::spawn(drive(client, config.msgs_for(i), config.timeout, go_rx.clone())));
        }
    }
    let started = Instant::now();
    let _ = go_tx.send(true);
    let mut outcome = RunOutcome {
        total_ms: 0.0,
        round_trips_ms: Vec::with_capacity(config.messages_per_rep() as usize),
        sent: 0,
        replies: 0,
        errors: 0,
        session_ids,
    };
    let mut tallies = Vec::with_capacity(tasks.len());
    for task in tasks {
        if let Ok(tally) = task.await {
            tallies.push(tally);
        }
    }
    outcome.total_ms = started.elapsed().as_secs_f64() * 1e3;
    // Merged only once timing is over.
    for tally in tallies {
        outcome.sent += tally.sent;
        outcome.replies += tally.replies;
        outcome.errors += tally.errors;
        outcome.round_trips_ms.extend(tally.latencies_ms);
    }
    Ok(outcome)
}

fn rep_stats(rep: usize, outcome: &RunOutcome) -> RepStats {
    let mut sorted = outcome.round_trips_ms.clone();
    sorted.sort_by(f64::total_cmp);
    let pct = |p| percentile(&sorted, p).unwrap_or(0.0);
    RepStats {
        rep,
        total_ms: outcome.total_ms,
        p50: pct(50.0),
        p95: pct(95.0),
        p99: pct(99.0),
        throughput: if outcome.total_ms > 0.0 { outcome.sent as f64 / (outcome.total_ms / 1e3) } else { 0.0 },
        sent: outcome.sent,
        replies: outcome.replies,
        errors: outcome.errors,
    }
}

pub fn check(config: &BenchConfig) -> Result<(), BenchError> {
    if config.clients == 0 || config.msgs == 0 || config.reps == 0 {
        return Err(BenchError::EmptyRun);
    }
    if config.clients >= LARGE_CLIENTS && !config.large {
        return Err(BenchError::TooLarge(config.clients));
    }
    Ok(())
}

/// Runs `config.reps` repetitions against `endpoint`.
pub async fn run_bench(endpoint: &str, config: &BenchConfig) -> Result<BenchStats, BenchError> {
    check(config)?;
    let mut reps = Vec::with_capacity(config.reps);
    let mut all = Vec::new();
    for rep in 0..config.reps {
        let outcome = run_once(endpoint, config, rep).await?;
        if outcome.sent != outcome.replies + outcome.errors {
            return Err(BenchError::IncompleteRun { sent: outcome.sent, replies: outcome.replies, errors: outcome.errors });
        }
        reps.push(rep_stats(rep, &outcome));
        all.extend(outcome.round_trips_ms);
    }
    Ok(BenchStats::from_reps(config.clients, config.msgs, config.count, config.messages_per_rep(), reps, &mut all)?)
}

/// Per-turn orchestrator overheads, in ms, of the named sessions of an
/// in-process server.
pub async fn collect_overheads(server: &Server, session_ids: &[String]) -> Vec<f64> {
    let mut out = Vec::new();
    for sid in session_ids {
        if let Some(parts) = server.sessions().parts(sid).await {
            out.extend(parts.orchestrator.turn_overheads().await.into_iter().map(|us| f64::from(us) / 1e3));
        }
    }
    out
}

/// Scaling criterion: per-message time at the large point over the small.
pub fn scaling_ratio(small: &BenchStats, large: &BenchStats) -> f64 {
    large.ms_per_msg / small.ms_per_msg
}

pub const MAX_SCALING_RATIO: f64 = 3.0;
