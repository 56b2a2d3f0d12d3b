//! A service worker process: registers with the broker, heartbeats, and
//! answers REQUESTs with a handler. Delay and failure injection make it
//! usable as a mock in tests and benchmarks.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde_json::json;
use tokio::net::TcpStream;
use tokio::sync::mpsc;

use crate::client::ClientError;
use crate::connection::{parse_endpoint, spawn_link};
use crate::value::{self, Value};
use crate::wire::{MessageEnvelope, MsgKind, ServiceType};

pub type Handler = Arc<dyn Fn(&MessageEnvelope, Value) -> Result<Value, String> + Send + Sync>;

/// Which requests fail (counted from 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FailurePattern {
    #[default]
    Never,
    Always,
    FirstN(u64),
    EveryNth(u64),
}

impl FailurePattern {
    pub fn fails(self, n: u64) -> bool {
        match self {
            FailurePattern::Never => false,
            FailurePattern::Always => true,
            FailurePattern::FirstN(k) => n <= k,
            FailurePattern::EveryNth(k) => k > 0 && n % k == 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct WorkerOptions {
    pub delay: Duration,
    pub failures: FailurePattern,
    pub heartbeat: Duration,
    /// Accept requests but never answer them.
    pub silent: bool,
}

impl Default for WorkerOptions {
    fn default() -> Self {
        WorkerOptions {
            delay: Duration::ZERO,
            failures: FailurePattern::Never,
            heartbeat: Duration::from_millis(2_500),
            silent: false,
        }
    }
}

enum Control {
    Kill,
    Freeze,
}

#[derive(Debug, Clone)]
pub struct WorkerHandle {
    service: ServiceType,
    control: mpsc::UnboundedSender<Control>,
    handled: Arc<AtomicU64>,
}

impl WorkerHandle {
    pub fn service(&self) -> ServiceType {
        self.service
    }

    /// Closes the connection, as if the process died.
    pub fn kill(&self) {
        let _ = self.control.send(Control::Kill);
    }

    /// Keeps the socket open but stops heartbeating and answering.
    pub fn freeze(&self) {
        let _ = self.control.send(Control::Freeze);
    }

    /// Requests received so far.
    pub fn handled(&self) -> u64 {
        self.handled.load(Ordering::Relaxed)
    }

    pub fn is_running(&self) -> bool {
        !self.control.is_closed()
    }
}

/// Wraps a plain function as a handler.
pub fn handler<F>(f: F) -> Handler
where
    F: Fn(Value) -> Result<Value, String> + Send + Sync + 'static,
{
    Arc::new(move |_, v| f(v))
}

/// Connects to the broker and serves `service` until killed or
/// disconnected. Returns once WORKER_READY has been queued.
pub async fn start_worker(
    endpoint: &str,
    service: ServiceType,
    handler: Handler,
    options: WorkerOptions,
) -> Result<WorkerHandle, ClientError> {
    let addr = parse_endpoint(endpoint).map_err(ClientError::ConnectFailed)?;
    let stream = TcpStream::connect(&addr).await.map_err(|e| {
        if e.kind() == std::io::ErrorKind::ConnectionRefused {
            ClientError::ConnectionRefused(endpoint.to_owned())
        } else {
            ClientError::ConnectFailed(e.to_string())
        }
    })?;
    let (in_tx, mut in_rx) = mpsc::unbounded_channel();
    let out = spawn_link(stream, in_tx, |r| r);
    let _ = out.send(MessageEnvelope::new(MsgKind::WorkerReady, service, ""));

    let (control, mut control_rx) = mpsc::unbounded_channel();
    let handled = Arc::new(AtomicU64::new(0));
    let counter = handled.clone();
    tokio::spawn(async move {
        let mut beat = tokio::time::interval(options.heartbeat.max(Duration::from_millis(1)));
        beat.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        let mut frozen = false;
        loop {
            tokio::select! {
                ctl = control_rx.recv() => match ctl {
                    None | Some(Control::Kill) => break,
                    Some(Control::Freeze) => frozen = true,
                },
                _ = beat.tick(), if !frozen => {
                    let _ = out.send(MessageEnvelope::heartbeat(service));
                }
                inbound = in_rx.recv() => match inbound {
                    None | Some(Err(_)) => break,
                    Some(Ok(env)) if frozen => drop(env),
                    Some(Ok(env)) => match env.kind {
                        MsgKind::Request => {
                            let n = counter.fetch_add(1, Ordering::Relaxed) + 1;
                            if options.silent {
                                continue;
                            }
                            let reply = answer(&env, n, &handler, options.failures);
                            if options.delay.is_zero() {
                                let _ = out.send(reply);
                            } else {
                                let out = out.clone();
                                let delay = options.delay;
                                tokio::spawn(async move {
                                    tokio::time::sleep(delay).await;
                                    let _ = out.send(reply);
                                });
                            }
                        }
                        MsgKind::Disconnect => break,
                        _ => {}
                    },
                },
            }
        }
    });
    Ok(WorkerHandle { service, control, handled })
}

fn answer(request: &MessageEnvelope, n: u64, handler: &Handler, failures: FailurePattern) -> MessageEnvelope {
    let failure = |message: String| {
        let payload = json!({"code": "ComponentFailed", "message": message, "service": request.service.name()});
        request.reply(MsgKind::Error, value::to_payload(&payload))
    };
    if failures.fails(n) {
        return failure(format!("injected failure on request {n}"));
    }
    let input = if request.payload.is_empty() {
        Ok(Value::Null)
    } else {
        value::from_payload(&request.payload).map_err(|e| e.to_string())
    };
    match input.and_then(|v| handler(request, v)) {
        Ok(out) => request.reply(MsgKind::Reply, value::to_payload(&out)),
        Err(message) => failure(message),
    }
}
