use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;
use std::time::Duration;

use serde_json::json;
use thiserror::Error;
use tokio::sync::{mpsc, oneshot};
use tokio::task::JoinHandle;

use super::table::{SessionError, SessionStatus, SessionTable, SessionTimeouts, SessionTransition};
use crate::blackboard::{channel_sink, Blackboard, BlackboardEvent, BlackboardHandle, EventKind, EXTERNAL_SOURCE};
use crate::broker::{BrokerCommand, CommandSender, ConnId, DeviceInput};
use crate::clock;
use crate::orchestrator::{Orchestrator, OrchestratorConfig, OrchestratorHandle};
use crate::registry::{ComponentInfo, ExecContext, RegistryHandle, Resource};
use crate::value::{self, Value};
use crate::wire::{MessageEnvelope, MsgKind, ServiceType};

/// Source recorded for posts made by the session manager itself.
pub const MANAGER_SOURCE: &str = "session-manager";
/// Locator name under which the manager publishes a (weak) handle to itself.
pub const MANAGER_RESOURCE: &str = "session-manager";
pub const RELAY_REQUEST_KEY: &str = "XSession_Request";
pub const RELAY_REPLY_KEY: &str = "XSession_Reply";
/// Device ids handed to in-process devices start here, well above anything
/// the broker assigns.
pub const LOCAL_DEVICE_BASE: ConnId = 1 << 48;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RelayError {
    #[error("no session offers capability `{0}`")]
    UnknownCapability(String),
    #[error("target session `{0}` is unavailable")]
    TargetUnavailable(String),
    #[error("relay timed out")]
    Timeout,
    #[error("invalid relay: {0}")]
    Invalid(String),
}

impl RelayError {
    pub fn code(&self) -> &'static str {
        match self {
            RelayError::UnknownCapability(_) => "UnknownCapability",
            RelayError::TargetUnavailable(_) => "TargetUnavailable",
            RelayError::Timeout => "Timeout",
            RelayError::Invalid(_) => "InvalidRelay",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelayOutcome {
    pub request_id: u64,
    pub target: String,
    pub payload: Value,
}

#[derive(Debug, Clone)]
pub struct SessionManagerConfig {
    pub timeouts: SessionTimeouts,
    /// Period of the idle sweep; `None` disables it.
    pub sweep_every: Option<Duration>,
    pub relay_timeout: Duration,
    pub history_capacity: usize,
    pub orchestrator: OrchestratorConfig,
    /// Blackboard keys pushed to every device bound to the session.
    pub outbound_keys: Vec<String>,
}

impl Default for SessionManagerConfig {
    fn default() -> Self {
        SessionManagerConfig {
            timeouts: SessionTimeouts::default(),
            sweep_every: Some(Duration::from_secs(1)),
            relay_timeout: Duration::from_secs(5),
            history_capacity: 1024,
            orchestrator: OrchestratorConfig::default(),
            outbound_keys: ["TTS_Event", "NLG_Event", "Error_Event", RELAY_REPLY_KEY, "Grocery_Decision", "WEATHER_Event"]
                .map(String::from)
                .to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionInfo {
    pub session_id: String,
    pub user_key: String,
    pub status: SessionStatus,
    pub devices: Vec<ConnId>,
    pub capabilities: Vec<String>,
    pub created: bool,
}

impl SessionInfo {
    pub fn to_value(&self) -> Value {
        json!({
            "session_id": self.session_id,
            "user_key": self.user_key,
            "status": self.status.as_str(),
            "devices": self.devices,
            "capabilities": self.capabilities,
            "created": self.created,
        })
    }
}

/// Live handles of one session.
#[derive(Debug, Clone)]
pub struct SessionParts {
    pub blackboard: BlackboardHandle,
    pub orchestrator: OrchestratorHandle,
}

enum Responder {
    Local(oneshot::Sender<Result<RelayOutcome, RelayError>>),
    Device { conn: ConnId, request: MessageEnvelope },
}

enum Msg {
    AttachBroker(CommandSender),
    Open {
        user_key: String,
        device: ConnId,
        capabilities: Option<Vec<String>>,
        reply: oneshot::Sender<Result<SessionInfo, SessionError>>,
    },
    DeviceLeft(ConnId),
    Close { session: String, reply: oneshot::Sender<Result<(), SessionError>> },
    Inject { session: String, key: String, value: Value, reply: oneshot::Sender<Result<u64, SessionError>> },
    Parts { session: String, reply: oneshot::Sender<Option<SessionParts>> },
    Info { session: String, reply: oneshot::Sender<Option<SessionInfo>> },
    List(oneshot::Sender<Vec<SessionInfo>>),
    Sweep { now_us: u64, reply: oneshot::Sender<Vec<SessionTransition>> },
    Transitions(oneshot::Sender<Vec<SessionTransition>>),
    Relay { from: String, to: Option<String>, capability: String, payload: Value, responder: Responder },
    RelayReply(BlackboardEvent),
    RelayExpired(u64),
    Shutdown,
}

#[derive(Debug, Clone)]
pub struct SessionManagerHandle {
    tx: mpsc::UnboundedSender<Msg>,
    devices: mpsc::UnboundedSender<DeviceInput>,
}

/// A handle that does not keep the manager alive.
#[derive(Debug, Clone)]
pub struct WeakSessionManager {
    tx: mpsc::WeakUnboundedSender<Msg>,
    devices: mpsc::WeakUnboundedSender<DeviceInput>,
}

impl WeakSessionManager {
    pub fn upgrade(&self) -> Option<SessionManagerHandle> {
        Some(SessionManagerHandle { tx: self.tx.upgrade()?, devices: self.devices.upgrade()? })
    }
}

pub struct SessionManager;

impl SessionManager {
    /// Starts the manager and publishes a weak handle to it in the
    /// registry's locator as [`MANAGER_RESOURCE`].
    pub fn spawn(config: SessionManagerConfig, registry: RegistryHandle) -> SessionManagerHandle {
        let (tx, rx) = mpsc::unbounded_channel();
        let (devices, devices_rx) = mpsc::unbounded_channel();
        let handle = SessionManagerHandle { tx, devices };
        let actor = Actor {
            table: SessionTable::new(config.timeouts),
            config,
            registry: registry.clone(),
            broker: None,
            live: HashMap::new(),
            relays: HashMap::new(),
            next_relay: 1,
            self_tx: handle.tx.downgrade(),
            components_cache: BTreeSet::new(),
        };
        let weak = handle.downgrade();
        tokio::spawn(async move {
            registry.provide(MANAGER_RESOURCE, Resource::Service(Arc::new(weak))).await;
            actor.run(rx, devices_rx).await;
        });
        handle
    }
}

impl SessionManagerHandle {
    pub fn downgrade(&self) -> WeakSessionManager {
        WeakSessionManager { tx: self.tx.downgrade(), devices: self.devices.downgrade() }
    }

    /// Channel the broker feeds with client traffic.
    pub fn device_sender(&self) -> mpsc::UnboundedSender<DeviceInput> {
        self.devices.clone()
    }

    /// Lets the manager answer devices and fan out events through the broker.
    pub fn attach_broker(&self, commands: CommandSender) {
        let _ = self.tx.send(Msg::AttachBroker(commands));
    }

    async fn ask<T>(&self, make: impl FnOnce(oneshot::Sender<T>) -> Msg) -> Option<T> {
        let (reply, rx) = oneshot::channel();
        self.tx.send(make(reply)).ok()?;
        rx.await.ok()
    }

    /// Binds `device` to the user's session, creating it when needed.
    /// `capabilities: None` advertises every registered component.
    pub async fn open_session(
        &self,
        user_key: &str,
        device: ConnId,
        capabilities: Option<Vec<String>>,
    ) -> Result<SessionInfo, SessionError> {
        self.ask(|reply| Msg::Open { user_key: user_key.to_owned(), device, capabilities, reply })
            .await
            .unwrap_or(Err(SessionError::ManagerStopped))
    }

    pub fn device_left(&self, device: ConnId) {
        let _ = self.tx.send(Msg::DeviceLeft(device));
    }

    pub async fn close_session(&self, session_id: &str) -> Result<(), SessionError> {
        self.ask(|reply| Msg::Close { session: session_id.to_owned(), reply })
            .await
            .unwrap_or(Err(SessionError::ManagerStopped))
    }

    /// Posts an external event into a session; counts as activity.
    pub async fn route_inbound(&self, session_id: &str, key: &str, value: Value) -> Result<u64, SessionError> {
        self.ask(|reply| Msg::Inject { session: session_id.to_owned(), key: key.to_owned(), value, reply })
            .await
            .unwrap_or(Err(SessionError::ManagerStopped))
    }

    pub async fn parts(&self, session_id: &str) -> Option<SessionParts> {
        self.ask(|reply| Msg::Parts { session: session_id.to_owned(), reply }).await.flatten()
    }

    pub async fn info(&self, session_id: &str) -> Option<SessionInfo> {
        self.ask(|reply| Msg::Info { session: session_id.to_owned(), reply }).await.flatten()
    }

    pub async fn sessions(&self) -> Vec<SessionInfo> {
        self.ask(Msg::List).await.unwrap_or_default()
    }

    /// Runs an idle sweep as of `now_us`.
    pub async fn sweep_at(&self, now_us: u64) -> Vec<SessionTransition> {
        self.ask(|reply| Msg::Sweep { now_us, reply }).await.unwrap_or_default()
    }

    pub async fn transitions(&self) -> Vec<SessionTransition> {
        self.ask(Msg::Transitions).await.unwrap_or_default()
    }

    /// Asks another session for `capability`. With `to: None` the first
    /// session (by id) that offers it is chosen.
    pub async fn relay_cross_session(
        &self,
        from: &str,
        to: Option<&str>,
        capability: &str,
        payload: Value,
    ) -> Result<RelayOutcome, RelayError> {
        let (reply, rx) = oneshot::channel();
        let msg = Msg::Relay {
            from: from.to_owned(),
            to: to.map(str::to_owned),
            capability: capability.to_owned(),
            payload,
            responder: Responder::Local(reply),
        };
        if self.tx.send(msg).is_err() {
            return Err(RelayError::TargetUnavailable("session manager stopped".into()));
        }
        rx.await.unwrap_or(Err(RelayError::TargetUnavailable("session manager stopped".into())))
    }

    pub fn shutdown(&self) {
        let _ = self.tx.send(Msg::Shutdown);
    }

    pub fn is_closed(&self) -> bool {
        self.tx.is_closed()
    }
}

struct Live {
    parts: SessionParts,
    /// Capabilities declared per device. Empty map: nothing declared.
    declared: HashMap<ConnId, Vec<String>>,
    forwarders: Vec<JoinHandle<()>>,
}

struct PendingRelay {
    from: String,
    to: String,
    responder: Responder,
}

struct Actor {
    config: SessionManagerConfig,
    table: SessionTable,
    registry: RegistryHandle,
    broker: Option<CommandSender>,
    live: HashMap<String, Live>,
    relays: HashMap<u64, PendingRelay>,
    next_relay: u64,
    self_tx: mpsc::WeakUnboundedSender<Msg>,
    /// Registered component ids as of the most recent session start.
    components_cache: BTreeSet<String>,
}

/// Key under which a bare device payload is posted.
pub fn inbound_key(service: ServiceType) -> String {
    match service {
        ServiceType::Asr => "MIC_Event".to_owned(),
        other => format!("{}_Event", other.name()),
    }
}

/// Service tag used for a session event carrying `key`.
pub fn service_for_key(key: &str) -> ServiceType {
    key.split('_').next().and_then(|prefix| prefix.parse().ok()).unwrap_or(ServiceType::Control)
}

fn error_reply(request: &MessageEnvelope, code: &str, message: &str) -> MessageEnvelope {
    let payload = json!({"code": code, "message": message, "service": request.service.name()});
    request.reply(MsgKind::Error, value::to_payload(&payload))
}

fn session_error_code(e: &SessionError) -> &'static str {
    match e {
        SessionError::DeviceAlreadyBound { .. } => "DeviceAlreadyBound",
        SessionError::UnknownSession(_) => "UnknownSession",
        SessionError::InvalidUserKey(_) => "InvalidRequest",
        SessionError::ManagerStopped => "Unavailable",
    }
}

impl Actor {
    async fn run(mut self, mut rx: mpsc::UnboundedReceiver<Msg>, mut devices: mpsc::UnboundedReceiver<DeviceInput>) {
        let mut sweep = tokio::time::interval(self.config.sweep_every.unwrap_or(Duration::from_secs(3600)));
        sweep.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        loop {
            tokio::select! {
                msg = rx.recv() => match msg {
                    None | Some(Msg::Shutdown) => break,
                    Some(msg) => self.handle(msg).await,
                },
                Some(input) = devices.recv() => self.on_device(input).await,
                _ = sweep.tick(), if self.config.sweep_every.is_some() => {
                    self.sweep(clock::now_us());
                }
            }
        }
        let ids: Vec<String> = self.live.keys().cloned().collect();
        for id in ids {
            self.teardown(&id, &[]);
        }
    }

    async fn handle(&mut self, msg: Msg) {
        match msg {
            Msg::AttachBroker(commands) => self.broker = Some(commands),
            Msg::Open { user_key, device, capabilities, reply } => {
                let result = self.open(&user_key, device, capabilities).await;
                let _ = reply.send(result);
            }
            Msg::DeviceLeft(device) => self.device_left(device),
            Msg::Close { session, reply } => {
                let _ = reply.send(self.close(&session));
            }
            Msg::Inject { session, key, value, reply } => match self.inject_parts(&session) {
                Ok(parts) => {
                    tokio::spawn(async move {
                        let seq = parts
                            .blackboard
                            .post(&key, value, EXTERNAL_SOURCE)
                            .await
                            .map_err(|_| SessionError::UnknownSession(session));
                        let _ = reply.send(seq);
                    });
                }
                Err(e) => {
                    let _ = reply.send(Err(e));
                }
            },
            Msg::Parts { session, reply } => {
                let _ = reply.send(self.live.get(&session).map(|l| l.parts.clone()));
            }
            Msg::Info { session, reply } => {
                let _ = reply.send(self.info(&session, false));
            }
            Msg::List(reply) => {
                let mut ids: Vec<&String> = self.live.keys().collect();
                ids.sort();
                let _ = reply.send(ids.into_iter().filter_map(|id| self.info(id, false)).collect());
            }
            Msg::Sweep { now_us, reply } => {
                let _ = reply.send(self.sweep(now_us));
            }
            Msg::Transitions(reply) => {
                let _ = reply.send(self.table.log().to_vec());
            }
            Msg::Relay { from, to, capability, payload, responder } => {
                self.relay(from, to, capability, payload, responder);
            }
            Msg::RelayReply(event) => self.on_relay_reply(event),
            Msg::RelayExpired(id) => {
                if let Some(pending) = self.relays.remove(&id) {
                    self.respond(pending.responder, Err(RelayError::Timeout));
                }
            }
            Msg::Shutdown => {}
        }
    }

    fn send(&self, conn: ConnId, envelope: MessageEnvelope) {
        if let Some(broker) = &self.broker {
            broker.send(BrokerCommand::Send { conn, envelope });
        }
    }

    fn info(&self, session_id: &str, created: bool) -> Option<SessionInfo> {
        let record = self.table.get(session_id)?;
        let live = self.live.get(session_id)?;
        Some(SessionInfo {
            session_id: record.session_id.clone(),
            user_key: record.user_key.clone(),
            status: record.status,
            devices: record.devices.iter().copied().collect(),
            capabilities: live.declared.values().flatten().cloned().collect::<BTreeSet<_>>().into_iter().collect(),
            created,
        })
    }

    async fn open(
        &mut self,
        user_key: &str,
        device: ConnId,
        capabilities: Option<Vec<String>>,
    ) -> Result<SessionInfo, SessionError> {
        let opened = self.table.open(user_key, device, clock::now_us())?;
        let session_id = opened.record.session_id.clone();
        if opened.created {
            let components = self.registry.list().await;
            self.components_cache = components.iter().map(|c| c.component_id.clone()).collect();
            let live = self.start_session(&session_id, &components);
            self.live.insert(session_id.clone(), live);
        }
        if let Some(caps) = capabilities {
            if let Some(live) = self.live.get_mut(&session_id) {
                live.declared.insert(device, caps);
            }
        }
        if let Some(broker) = &self.broker {
            broker.send(BrokerCommand::Bind { conn: device, session: session_id.clone() });
        }
        Ok(self.info(&session_id, opened.created).expect("opened session is live"))
    }

    fn start_session(&self, session_id: &str, components: &[ComponentInfo]) -> Live {
        self.registry.open_session(session_id);
        let blackboard = Blackboard::spawn(session_id, self.config.history_capacity);
        let orchestrator =
            Orchestrator::spawn(session_id, blackboard.clone(), self.registry.clone(), self.config.orchestrator.clone());
        let _ = blackboard.add_member(MANAGER_SOURCE);

        if let Some(broker) = self.broker.clone() {
            let session = session_id.to_owned();
            let sink = Box::new(move |event: BlackboardEvent| {
                let envelope = MessageEnvelope::new(MsgKind::SessionEvent, service_for_key(event.key()), &*session)
                    .with_payload(value::to_payload(&event.to_value()));
                broker.send(BrokerCommand::Fanout { session: session.clone(), envelope })
            });
            let _ = blackboard.subscribe_nowait(MANAGER_SOURCE, self.config.outbound_keys.iter().cloned(), sink);
        }
        let weak = self.self_tx.clone();
        let relay_sink = Box::new(move |event: BlackboardEvent| match weak.upgrade() {
            Some(tx) => tx.send(Msg::RelayReply(event)).is_ok(),
            None => false,
        });
        let _ = blackboard.subscribe_nowait(MANAGER_SOURCE, [RELAY_REPLY_KEY], relay_sink);

        let mut forwarders = Vec::new();
        for info in components.iter().filter(|c| !c.subscriptions.is_empty()) {
            let _ = blackboard.add_member(&info.component_id);
            let (tx, mut rx) = mpsc::unbounded_channel();
            let _ = blackboard.subscribe_nowait(&info.component_id, info.subscriptions.iter().cloned(), channel_sink(tx, |e| e));
            let registry = self.registry.clone();
            let component = info.component_id.clone();
            let session = session_id.to_owned();
            let poster = orchestrator.poster();
            forwarders.push(tokio::spawn(async move {
                let mut target = None;
                while let Some(event) = rx.recv().await {
                    if target.is_none() {
                        target = registry.resolve(&component, &session).await.ok();
                    }
                    let Some(instance) = &target else { continue };
                    let ctx = ExecContext::new(&session).with_poster(poster.clone());
                    if !instance.deliver_event(event, ctx) {
                        target = None;
                    }
                }
            }));
        }
        Live { parts: SessionParts { blackboard, orchestrator }, declared: HashMap::new(), forwarders }
    }

    fn device_left(&mut self, device: ConnId) {
        if let Some(session) = self.table.unbind_device(device) {
            if let Some(live) = self.live.get_mut(&session) {
                live.declared.remove(&device);
            }
        }
        if let Some(broker) = &self.broker {
            broker.send(BrokerCommand::Unbind { conn: device });
        }
    }

    fn close(&mut self, session_id: &str) -> Result<(), SessionError> {
        let (devices, _) = self.table.close(session_id, clock::now_us())?;
        self.teardown(session_id, &devices);
        Ok(())
    }

    fn teardown(&mut self, session_id: &str, devices: &[ConnId]) {
        if let Some(live) = self.live.remove(session_id) {
            for f in &live.forwarders {
                f.abort();
            }
            live.parts.orchestrator.close();
            live.parts.blackboard.close();
            let registry = self.registry.clone();
            let session = session_id.to_owned();
            tokio::spawn(async move {
                registry.release_session(&session).await;
            });
        }
        for &conn in devices {
            let payload = json!({"session_id": session_id, "reason": "session closed"});
            self.send(
                conn,
                MessageEnvelope::new(MsgKind::Disconnect, ServiceType::Control, session_id)
                    .with_payload(value::to_payload(&payload)),
            );
            if let Some(broker) = &self.broker {
                broker.send(BrokerCommand::Unbind { conn });
            }
        }
        let orphaned: Vec<u64> = self
            .relays
            .iter()
            .filter(|(_, p)| p.from == session_id || p.to == session_id)
            .map(|(id, _)| *id)
            .collect();
        for id in orphaned {
            if let Some(pending) = self.relays.remove(&id) {
                let target = pending.to.clone();
                self.respond(pending.responder, Err(RelayError::TargetUnavailable(target)));
            }
        }
    }

    fn sweep(&mut self, now_us: u64) -> Vec<SessionTransition> {
        let devices: HashMap<String, Vec<ConnId>> = self
            .table
            .records()
            .map(|r| (r.session_id.clone(), r.devices.iter().copied().collect()))
            .collect();
        let transitions = self.table.sweep(now_us);
        for t in transitions.iter().filter(|t| t.to == SessionStatus::Closed) {
            let bound = devices.get(&t.session_id).cloned().unwrap_or_default();
            self.teardown(&t.session_id, &bound);
        }
        transitions
    }

    /// Marks activity and returns the session's handles.
    fn inject_parts(&mut self, session_id: &str) -> Result<SessionParts, SessionError> {
        self.table.touch(session_id, clock::now_us())?;
        self.live
            .get(session_id)
            .map(|l| l.parts.clone())
            .ok_or_else(|| SessionError::UnknownSession(session_id.to_owned()))
    }

    fn offers(&self, session_id: &str, capability: &str, components: &BTreeSet<String>) -> bool {
        match self.live.get(session_id) {
            Some(live) if live.declared.is_empty() => components.contains(capability),
            Some(live) => live.declared.values().flatten().any(|c| c == capability),
            None => false,
        }
    }

    fn relay(&mut self, from: String, to: Option<String>, capability: String, payload: Value, responder: Responder) {
        let components = self.components_cache.clone();
        let target = if !self.live.contains_key(&from) {
            Err(RelayError::Invalid(format!("unknown requesting session `{from}`")))
        } else {
            match to {
                Some(to) if to == from => Err(RelayError::Invalid("a session cannot relay to itself".into())),
                Some(to) if !self.live.contains_key(&to) => Err(RelayError::TargetUnavailable(to)),
                Some(to) if !self.offers(&to, &capability, &components) => {
                    Err(RelayError::UnknownCapability(capability.clone()))
                }
                Some(to) => Ok(to),
                None => {
                    let mut ids: Vec<&String> = self.live.keys().filter(|id| **id != from).collect();
                    ids.sort();
                    ids.into_iter()
                        .find(|id| self.offers(id, &capability, &components))
                        .cloned()
                        .ok_or_else(|| RelayError::UnknownCapability(capability.clone()))
                }
            }
        };
        let target = match target {
            Ok(t) => t,
            Err(e) => return self.respond(responder, Err(e)),
        };
        let request_id = self.next_relay;
        self.next_relay += 1;
        let request = json!({
            "request_id": request_id,
            "from_session": from,
            "capability": capability,
            "payload": payload,
        });
        let board = &self.live[&target].parts.blackboard;
        if board.post_nowait(RELAY_REQUEST_KEY, request, MANAGER_SOURCE).is_err() {
            return self.respond(responder, Err(RelayError::TargetUnavailable(target)));
        }
        self.relays.insert(request_id, PendingRelay { from, to: target, responder });
        let weak = self.self_tx.clone();
        let timeout = self.config.relay_timeout;
        tokio::spawn(async move {
            tokio::time::sleep(timeout).await;
            if let Some(tx) = weak.upgrade() {
                let _ = tx.send(Msg::RelayExpired(request_id));
            }
        });
    }

    fn on_relay_reply(&mut self, event: BlackboardEvent) {
        if event.kind != EventKind::Posted {
            return;
        }
        let value = &event.entry.value;
        let Some(id) = value.get("request_id").and_then(Value::as_u64) else { return };
        let matches = self.relays.get(&id).is_some_and(|p| p.to == *event.session_id);
        if !matches {
            return;
        }
        let pending = self.relays.remove(&id).expect("checked above");
        let payload = value.get("payload").cloned().unwrap_or_else(|| value.clone());
        self.respond(pending.responder, Ok(RelayOutcome { request_id: id, target: pending.to, payload }));
    }

    fn respond(&self, responder: Responder, result: Result<RelayOutcome, RelayError>) {
        match responder {
            Responder::Local(tx) => {
                let _ = tx.send(result);
            }
            Responder::Device { conn, request } => {
                let envelope = match result {
                    Ok(out) => request.reply(
                        MsgKind::Reply,
                        value::to_payload(&json!({
                            "request_id": out.request_id,
                            "from_session": out.target,
                            "payload": out.payload,
                        })),
                    ),
                    Err(e) => error_reply(&request, e.code(), &e.to_string()),
                };
                self.send(conn, envelope);
            }
        }
    }

    async fn on_device(&mut self, input: DeviceInput) {
        match input {
            DeviceInput::Closed { conn } => self.device_left(conn),
            DeviceInput::Frame { conn, envelope } => match envelope.kind {
                MsgKind::Connect => self.on_connect(conn, envelope).await,
                MsgKind::Disconnect => self.device_left(conn),
                MsgKind::SessionEvent => self.on_session_event(conn, envelope),
                MsgKind::Request => self.on_control(conn, envelope),
                other => log::debug!("ignoring {other:?} from device {conn}"),
            },
        }
    }

    async fn on_connect(&mut self, conn: ConnId, envelope: MessageEnvelope) {
        let body = value::from_payload(&envelope.payload).unwrap_or(Value::Null);
        let Some(user_key) = body.get("user_key").and_then(Value::as_str).map(str::to_owned) else {
            return self.send(conn, error_reply(&envelope, "InvalidRequest", "CONNECT requires user_key"));
        };
        let capabilities = body.get("capabilities").and_then(Value::as_array).map(|caps| {
            caps.iter().filter_map(Value::as_str).map(str::to_owned).collect::<Vec<_>>()
        });
        match self.open(&user_key, conn, capabilities).await {
            Ok(info) => {
                let mut ack = envelope.reply(MsgKind::ConnectAck, value::to_payload(&info.to_value()));
                ack.session_id = info.session_id;
                self.send(conn, ack);
            }
            Err(e) => self.send(conn, error_reply(&envelope, session_error_code(&e), &e.to_string())),
        }
    }

    /// The session a device frame addresses: its own session id if given,
    /// otherwise the session the device is bound to.
    fn addressed_session(&self, conn: ConnId, envelope: &MessageEnvelope) -> Result<String, (String, &'static str)> {
        let bound = self.table.session_of_device(conn);
        let session = if envelope.session_id.is_empty() {
            bound.ok_or_else(|| ("device has no session".to_owned(), "UnknownSession"))?.to_owned()
        } else {
            envelope.session_id.clone()
        };
        match bound {
            Some(b) if b != session => Err((format!("device is bound to `{b}`"), "DeviceAlreadyBound")),
            _ if !self.live.contains_key(&session) => Err((format!("unknown session `{session}`"), "UnknownSession")),
            _ => Ok(session),
        }
    }

    fn on_session_event(&mut self, conn: ConnId, envelope: MessageEnvelope) {
        let session = match self.addressed_session(conn, &envelope) {
            Ok(s) => s,
            Err((msg, code)) => return self.send(conn, error_reply(&envelope, code, &msg)),
        };
        let body = if envelope.payload.is_empty() {
            Value::Null
        } else {
            match value::from_payload(&envelope.payload) {
                Ok(v) => v,
                Err(e) => return self.send(conn, error_reply(&envelope, "InvalidRequest", &e.to_string())),
            }
        };
        let (key, data) = match body.get("event").and_then(Value::as_str) {
            Some(key) => (key.to_owned(), body.get("data").cloned().unwrap_or(Value::Null)),
            None => (inbound_key(envelope.service), body),
        };
        match self.inject_parts(&session) {
            Ok(parts) => {
                let _ = parts.blackboard.post_nowait(&key, data, EXTERNAL_SOURCE);
            }
            Err(e) => self.send(conn, error_reply(&envelope, session_error_code(&e), &e.to_string())),
        }
    }

    fn on_control(&mut self, conn: ConnId, envelope: MessageEnvelope) {
        let args = value::from_payload(&envelope.payload).unwrap_or(Value::Null);
        let verb = args.get("verb").and_then(Value::as_str).unwrap_or("").to_owned();
        let session = match self.addressed_session(conn, &envelope) {
            Ok(s) => s,
            Err((msg, code)) => return self.send(conn, error_reply(&envelope, code, &msg)),
        };
        let parts = match self.inject_parts(&session) {
            Ok(p) => p,
            Err(e) => return self.send(conn, error_reply(&envelope, session_error_code(&e), &e.to_string())),
        };
        let broker = self.broker.clone();
        let reply_with = move |request: MessageEnvelope, result: Result<Value, (&'static str, String)>| {
            let envelope = match result {
                Ok(v) => request.reply(MsgKind::Reply, value::to_payload(&v)),
                Err((code, msg)) => error_reply(&request, code, &msg),
            };
            if let Some(b) = &broker {
                b.send(BrokerCommand::Send { conn, envelope });
            }
        };
        let str_arg = |name: &str| args.get(name).and_then(Value::as_str).map(str::to_owned);
        match verb.as_str() {
            "post" => {
                let Some(key) = str_arg("key") else {
                    return reply_with(envelope, Err(("InvalidRequest", "post requires key".into())));
                };
                let v = args.get("value").cloned().unwrap_or(Value::Null);
                tokio::spawn(async move {
                    let r = parts.blackboard.post(&key, v, EXTERNAL_SOURCE).await;
                    reply_with(envelope, r.map(|seq| json!({"seq": seq})).map_err(|e| ("UnknownSession", e.to_string())));
                });
            }
            "get" => {
                let Some(key) = str_arg("key") else {
                    return reply_with(envelope, Err(("InvalidRequest", "get requires key".into())));
                };
                tokio::spawn(async move {
                    let r = parts.blackboard.entry(&key).await;
                    let r = r.map(|e| match e {
                        Some(e) => json!({"key": key, "found": true, "value": e.value, "source": e.source, "seq": e.seq}),
                        None => json!({"key": key, "found": false, "value": null}),
                    });
                    reply_with(envelope, r.map_err(|e| ("UnknownSession", e.to_string())));
                });
            }
            "snapshot" => {
                tokio::spawn(async move {
                    let r = parts.blackboard.snapshot().await.map(|entries| {
                        let entries: Vec<Value> = entries
                            .into_iter()
                            .map(|e| json!({"key": e.key, "value": e.value, "source": e.source, "seq": e.seq}))
                            .collect();
                        json!({ "entries": entries })
                    });
                    reply_with(envelope, r.map_err(|e| ("UnknownSession", e.to_string())));
                });
            }
            "history" => {
                tokio::spawn(async move {
                    let r = parts.blackboard.history().await.map(|(events, total)| {
                        let events: Vec<Value> = events.iter().map(BlackboardEvent::to_value).collect();
                        json!({"events": events, "total": total})
                    });
                    reply_with(envelope, r.map_err(|e| ("UnknownSession", e.to_string())));
                });
            }
            "firings" => {
                tokio::spawn(async move {
                    let records = parts.orchestrator.firings().await;
                    let sequence: Vec<&str> = records.iter().map(|r| r.family()).collect();
                    let values: Vec<Value> = records.iter().map(|r| r.to_value()).collect();
                    reply_with(envelope, Ok(json!({"sequence": sequence, "records": values})));
                });
            }
            "status" => {
                let info = self.info(&session, false).map(|i| i.to_value()).unwrap_or(Value::Null);
                reply_with(envelope, Ok(info));
            }
            "close" => {
                reply_with(envelope, Ok(json!({"closed": true, "session_id": session})));
                let _ = self.close(&session);
            }
            "relay" => {
                let Some(capability) = str_arg("capability") else {
                    return reply_with(envelope, Err(("InvalidRequest", "relay requires capability".into())));
                };
                let to = str_arg("target");
                let payload = args.get("payload").cloned().unwrap_or(Value::Null);
                self.relay(session, to, capability, payload, Responder::Device { conn, request: envelope });
            }
            other => reply_with(envelope, Err(("UnknownVerb", format!("unknown control verb `{other}`")))),
        }
    }
}
