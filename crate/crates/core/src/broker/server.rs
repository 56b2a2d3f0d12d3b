use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::time::Duration;

use tokio::net::TcpListener;
use tokio::sync::{mpsc, oneshot};

use super::state::{error_envelope, Action, BrokerConfig, BrokerState, BrokerStats, ConnId, RouteError};
use crate::clock;
use crate::connection::{spawn_link, LinkError};
use crate::wire::{MessageEnvelope, MsgKind, ServiceType};

/// Traffic the broker hands to the session manager.
#[derive(Debug)]
pub enum DeviceInput {
    Frame { conn: ConnId, envelope: MessageEnvelope },
    Closed { conn: ConnId },
}

/// Instructions from the session manager.
#[derive(Debug)]
pub enum BrokerCommand {
    Bind { conn: ConnId, session: String },
    Unbind { conn: ConnId },
    Send { conn: ConnId, envelope: MessageEnvelope },
    Fanout { session: String, envelope: MessageEnvelope },
    Stats(oneshot::Sender<BrokerSnapshot>),
    Shutdown,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BrokerSnapshot {
    pub stats: BrokerStats,
    pub connections: usize,
    pub clients: usize,
    pub workers: BTreeMap<String, usize>,
}

#[derive(Debug, Clone)]
pub struct BrokerHandle {
    tx: mpsc::UnboundedSender<Event>,
    local_addr: SocketAddr,
}

enum Event {
    Accepted(tokio::net::TcpStream),
    Inbound(ConnId, Result<MessageEnvelope, LinkError>),
    Command(BrokerCommand),
}

pub struct BrokerOptions {
    pub config: BrokerConfig,
    /// Print a one-line summary at this period.
    pub stats_every: Option<Duration>,
}

impl BrokerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn endpoint(&self) -> String {
        format!("tcp://{}", self.local_addr)
    }

    pub fn command(&self, command: BrokerCommand) -> bool {
        self.tx.send(Event::Command(command)).is_ok()
    }

    /// A channel the session manager can write commands into.
    pub fn commands(&self) -> CommandSender {
        CommandSender { tx: self.tx.clone() }
    }

    pub async fn snapshot(&self) -> BrokerSnapshot {
        let (reply, rx) = oneshot::channel();
        if !self.command(BrokerCommand::Stats(reply)) {
            return BrokerSnapshot::default();
        }
        rx.await.unwrap_or_default()
    }

    pub fn shutdown(&self) {
        self.command(BrokerCommand::Shutdown);
    }

    pub fn is_closed(&self) -> bool {
        self.tx.is_closed()
    }
}

#[derive(Debug, Clone)]
pub struct CommandSender {
    tx: mpsc::UnboundedSender<Event>,
}

impl CommandSender {
    pub fn send(&self, command: BrokerCommand) -> bool {
        self.tx.send(Event::Command(command)).is_ok()
    }
}

/// Starts the broker event loop on an already-bound listener. `manager`
/// receives client session traffic; without it such traffic is refused.
pub fn start_broker(
    listener: TcpListener,
    options: BrokerOptions,
    manager: Option<mpsc::UnboundedSender<DeviceInput>>,
) -> std::io::Result<BrokerHandle> {
    let local_addr = listener.local_addr()?;
    let (tx, rx) = mpsc::unbounded_channel();
    let accept_tx = tx.clone();
    let accept = tokio::spawn(async move {
        loop {
            match listener.accept().await {
                Ok((stream, _)) => {
                    if accept_tx.send(Event::Accepted(stream)).is_err() {
                        break;
                    }
                }
                Err(e) => {
                    log::warn!("accept failed: {e}");
                    tokio::time::sleep(Duration::from_millis(50)).await;
                }
            }
        }
    });
    let looper = EventLoop {
        state: BrokerState::new(options.config),
        links: HashMap::new(),
        next_conn: 1,
        manager,
        self_tx: tx.downgrade(),
        stats_every: options.stats_every,
    };
    tokio::spawn(async move {
        looper.run(rx).await;
        accept.abort();
    });
    Ok(BrokerHandle { tx, local_addr })
}

struct EventLoop {
    state: BrokerState,
    links: HashMap<ConnId, mpsc::UnboundedSender<MessageEnvelope>>,
    next_conn: ConnId,
    manager: Option<mpsc::UnboundedSender<DeviceInput>>,
    self_tx: mpsc::WeakUnboundedSender<Event>,
    stats_every: Option<Duration>,
}

impl EventLoop {
    async fn run(mut self, mut rx: mpsc::UnboundedReceiver<Event>) {
        let config = self.state.config().clone();
        let mut liveness = tokio::time::interval(Duration::from_micros(config.heartbeat_interval_us.max(1_000)));
        let expiry_period = Duration::from_micros((config.request_timeout_us / 10).clamp(10_000, 250_000));
        let mut expiry = tokio::time::interval(expiry_period);
        let mut report = tokio::time::interval(self.stats_every.unwrap_or(Duration::from_secs(3600)));
        for timer in [&mut liveness, &mut expiry, &mut report] {
            timer.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        }
        let mut last_routed = 0u64;
        loop {
            tokio::select! {
                event = rx.recv() => match event {
                    None | Some(Event::Command(BrokerCommand::Shutdown)) => break,
                    Some(event) => self.handle(event),
                },
                _ = liveness.tick() => {
                    let now = clock::now_us();
                    let (transitions, actions) = self.state.heartbeat_sweep(now);
                    for t in &transitions {
                        log::info!("worker {} ({}) {:?} -> {:?}", t.worker_id, t.service, t.from, t.to);
                    }
                    self.perform(actions);
                    for worker in self.state.worker_ids() {
                        self.send(worker, MessageEnvelope::heartbeat(ServiceType::Control));
                    }
                }
                _ = expiry.tick() => {
                    let actions = self.state.expire(clock::now_us());
                    self.perform(actions);
                }
                _ = report.tick(), if self.stats_every.is_some() => {
                    let snap = self.snapshot();
                    let period = self.stats_every.unwrap_or_default().as_secs_f64().max(1e-3);
                    let rate = (snap.stats.requests_routed - last_routed) as f64 / period;
                    last_routed = snap.stats.requests_routed;
                    let workers: Vec<String> = snap.workers.iter().map(|(s, n)| format!("{s}:{n}")).collect();
                    println!(
                        "clients={} workers={} routed/s={rate:.0} drops={} pending={}",
                        snap.clients,
                        if workers.is_empty() { "-".to_owned() } else { workers.join(",") },
                        snap.stats.dropped,
                        snap.stats.pending,
                    );
                }
            }
        }
        for tx in self.links.values() {
            let _ = tx.send(MessageEnvelope::new(MsgKind::Disconnect, ServiceType::Control, ""));
        }
    }

    fn snapshot(&self) -> BrokerSnapshot {
        let workers = self.state.worker_ids();
        BrokerSnapshot {
            stats: self.state.stats(),
            connections: self.links.len(),
            clients: self.links.len().saturating_sub(workers.len()),
            workers: self.state.workers_per_service(),
        }
    }

    fn handle(&mut self, event: Event) {
        match event {
            Event::Accepted(stream) => {
                let conn = self.next_conn;
                self.next_conn += 1;
                let Some(self_tx) = self.self_tx.upgrade() else { return };
                let out = spawn_link(stream, self_tx, move |r| Event::Inbound(conn, r));
                self.links.insert(conn, out);
            }
            Event::Inbound(conn, Ok(envelope)) => self.on_frame(conn, envelope),
            Event::Inbound(conn, Err(e)) => {
                log::debug!("connection {conn} ended: {e}");
                self.on_closed(conn);
            }
            Event::Command(command) => self.on_command(command),
        }
    }

    fn on_closed(&mut self, conn: ConnId) {
        if self.links.remove(&conn).is_none() {
            return;
        }
        let was_worker = self.state.is_worker(conn);
        let actions = self.state.connection_closed(conn, clock::now_us());
        self.perform(actions);
        if !was_worker {
            if let Some(manager) = &self.manager {
                let _ = manager.send(DeviceInput::Closed { conn });
            }
        }
    }

    fn on_frame(&mut self, conn: ConnId, envelope: MessageEnvelope) {
        let now = clock::now_us();
        let is_worker = self.state.is_worker(conn);
        match envelope.kind {
            MsgKind::WorkerReady => {
                if self.state.register_worker(conn, envelope.service, now).is_err() {
                    log::debug!("worker {conn} re-registered {}", envelope.service);
                }
            }
            MsgKind::Heartbeat => self.state.heartbeat(conn, now),
            MsgKind::Reply | MsgKind::Error | MsgKind::SessionEvent if is_worker => {
                let actions = self.state.route_reply(conn, envelope, now);
                self.perform(actions);
            }
            MsgKind::Disconnect if is_worker => self.on_closed(conn),
            MsgKind::Request if envelope.service != ServiceType::Control => {
                if envelope.session_id.is_empty() {
                    let err = error_envelope(&envelope, RouteError::UnknownSession, "request without session");
                    self.send(conn, err);
                    return;
                }
                let actions = self.state.route_request(conn, envelope, now);
                self.perform(actions);
            }
            MsgKind::Connect | MsgKind::Disconnect | MsgKind::SessionEvent | MsgKind::Request => {
                match &self.manager {
                    Some(manager) => {
                        let _ = manager.send(DeviceInput::Frame { conn, envelope });
                    }
                    None if envelope.kind == MsgKind::Request || envelope.kind == MsgKind::Connect => {
                        let err = error_envelope(&envelope, RouteError::UnknownSession, "no session manager");
                        self.send(conn, err);
                    }
                    None => {}
                }
            }
            MsgKind::Reply | MsgKind::Error | MsgKind::ConnectAck => {
                log::debug!("dropping {:?} from non-worker {conn}", envelope.kind);
            }
        }
    }

    fn on_command(&mut self, command: BrokerCommand) {
        match command {
            BrokerCommand::Bind { conn, session } => {
                if self.links.contains_key(&conn) {
                    self.state.bind(conn, &session);
                }
            }
            BrokerCommand::Unbind { conn } => self.state.unbind(conn),
            BrokerCommand::Send { conn, envelope } => self.send(conn, envelope),
            BrokerCommand::Fanout { session, envelope } => {
                let actions = self.state.fan_out(&session, envelope, false);
                self.perform(actions);
            }
            BrokerCommand::Stats(reply) => {
                let _ = reply.send(self.snapshot());
            }
            BrokerCommand::Shutdown => {}
        }
    }

    fn send(&mut self, conn: ConnId, envelope: MessageEnvelope) {
        if let Some(tx) = self.links.get(&conn) {
            if tx.send(envelope).is_err() {
                self.links.remove(&conn);
            }
        }
    }

    fn perform(&mut self, actions: Vec<Action>) {
        for action in actions {
            match action {
                Action::Send(conn, envelope) => self.send(conn, envelope),
                Action::Close(conn) => {
                    // Dropping the writer closes the socket.
                    self.links.remove(&conn);
                }
            }
        }
    }
}
