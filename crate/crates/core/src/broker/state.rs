//! Broker decision state: service directory, pending-request table, circuit
//! breakers and session bindings. Pure: every input returns the frames to
//! send, and time is passed in.

use std::collections::{BTreeMap, HashMap, HashSet};

use crate::value::{self, json};
use crate::wire::{MessageEnvelope, MsgKind, ServiceType};

pub type ConnId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WorkerState {
    Ready,
    Busy,
    Suspect,
    Dead,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceRecord {
    pub worker_id: ConnId,
    pub service: ServiceType,
    pub last_heartbeat_us: u64,
    pub state: WorkerState,
    pub in_flight: u32,
    pub handled: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CircuitPhase {
    Closed,
    Open,
    HalfOpen,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CircuitState {
    pub service: ServiceType,
    pub state: CircuitPhase,
    pub consecutive_failures: u32,
    pub opened_at_us: u64,
    probe_in_flight: bool,
}

impl CircuitState {
    fn new(service: ServiceType) -> Self {
        CircuitState { service, state: CircuitPhase::Closed, consecutive_failures: 0, opened_at_us: 0, probe_in_flight: false }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BrokerConfig {
    pub heartbeat_interval_us: u64,
    pub liveness_factor: u32,
    pub request_timeout_us: u64,
    pub failure_threshold: u32,
    pub cooldown_us: u64,
    /// Requests a worker may hold before it is considered BUSY; `None`
    /// means unlimited.
    pub max_in_flight: Option<u32>,
    /// How many times a request may be handed to a replacement worker when
    /// its worker is lost.
    pub max_redispatch: u32,
}

impl Default for BrokerConfig {
    fn default() -> Self {
        BrokerConfig {
            heartbeat_interval_us: 2_500_000,
            liveness_factor: 3,
            request_timeout_us: 30_000_000,
            failure_threshold: 5,
            cooldown_us: 10_000_000,
            max_in_flight: None,
            max_redispatch: 1,
        }
    }
}

/// Error codes carried in ERROR envelope payloads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RouteError {
    NoWorkerAvailable,
    CircuitOpen,
    Timeout,
    WorkerLost,
    DuplicateRequest,
    UnknownSession,
}

impl RouteError {
    pub fn code(self) -> &'static str {
        match self {
            RouteError::NoWorkerAvailable => "NoWorkerAvailable",
            RouteError::CircuitOpen => "CircuitOpen",
            RouteError::Timeout => "Timeout",
            RouteError::WorkerLost => "WorkerLost",
            RouteError::DuplicateRequest => "DuplicateRequest",
            RouteError::UnknownSession => "UnknownSession",
        }
    }
}

pub fn error_envelope(request: &MessageEnvelope, error: RouteError, message: &str) -> MessageEnvelope {
    let payload = json!({"code": error.code(), "message": message, "service": request.service.name()});
    request.reply(MsgKind::Error, value::to_payload(&payload))
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Send(ConnId, MessageEnvelope),
    Close(ConnId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct PendingKey {
    worker: ConnId,
    service: ServiceType,
    request_id: u64,
    session: u64,
}

#[derive(Debug, Clone)]
struct Pending {
    client: ConnId,
    request: MessageEnvelope,
    deadline_us: u64,
    dispatches: u32,
    probe: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BrokerStats {
    pub requests_routed: u64,
    pub replies_delivered: u64,
    pub unsolicited_delivered: u64,
    pub dropped: u64,
    pub no_worker: u64,
    pub circuit_rejections: u64,
    pub timeouts: u64,
    pub redispatched: u64,
    pub workers_lost: u64,
    pub pending: usize,
}

#[derive(Debug, Default)]
pub struct BrokerState {
    config: BrokerConfig,
    workers: HashMap<(ConnId, ServiceType), ServiceRecord>,
    rotation: HashMap<ServiceType, (Vec<ConnId>, usize)>,
    circuits: HashMap<ServiceType, CircuitState>,
    pending: HashMap<PendingKey, Pending>,
    session_ids: HashMap<String, u64>,
    bindings: HashMap<String, Vec<ConnId>>,
    bound: HashMap<ConnId, String>,
    stats: BrokerStats,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transition {
    pub worker_id: ConnId,
    pub service: ServiceType,
    pub from: WorkerState,
    pub to: WorkerState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DuplicateRegistration;

impl BrokerState {
    pub fn new(config: BrokerConfig) -> Self {
        BrokerState { config, ..Default::default() }
    }

    pub fn config(&self) -> &BrokerConfig {
        &self.config
    }

    fn session_key(&mut self, session: &str) -> u64 {
        let next = self.session_ids.len() as u64 + 1;
        *self.session_ids.entry(session.to_owned()).or_insert(next)
    }

    pub fn is_worker(&self, conn: ConnId) -> bool {
        self.workers.keys().any(|(c, _)| *c == conn)
    }

    /// Adds or refreshes a directory record. A repeated registration is
    /// acknowledged idempotently but reported as a duplicate.
    pub fn register_worker(&mut self, conn: ConnId, service: ServiceType, now_us: u64) -> Result<(), DuplicateRegistration> {
        if let Some(record) = self.workers.get_mut(&(conn, service)) {
            record.last_heartbeat_us = record.last_heartbeat_us.max(now_us);
            if record.state == WorkerState::Suspect {
                record.state = WorkerState::Ready;
            }
            return Err(DuplicateRegistration);
        }
        self.workers.insert(
            (conn, service),
            ServiceRecord {
                worker_id: conn,
                service,
                last_heartbeat_us: now_us,
                state: WorkerState::Ready,
                in_flight: 0,
                handled: 0,
            },
        );
        self.rotation.entry(service).or_default().0.push(conn);
        Ok(())
    }

    /// Any frame from a worker counts as a sign of life.
    pub fn heartbeat(&mut self, conn: ConnId, now_us: u64) {
        for ((c, _), record) in self.workers.iter_mut() {
            if *c == conn && record.state != WorkerState::Dead {
                record.last_heartbeat_us = record.last_heartbeat_us.max(now_us);
                if record.state == WorkerState::Suspect {
                    record.state = if self.config.max_in_flight.is_some_and(|m| record.in_flight >= m) {
                        WorkerState::Busy
                    } else {
                        WorkerState::Ready
                    };
                }
            }
        }
    }

    pub fn workers(&self, service: ServiceType) -> Vec<&ServiceRecord> {
        let mut records: Vec<_> = self.workers.values().filter(|r| r.service == service).collect();
        records.sort_by_key(|r| r.worker_id);
        records
    }

    pub fn worker(&self, conn: ConnId, service: ServiceType) -> Option<&ServiceRecord> {
        self.workers.get(&(conn, service))
    }

    pub fn workers_per_service(&self) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for record in self.workers.values().filter(|r| r.state != WorkerState::Dead) {
            *counts.entry(record.service.name().to_owned()).or_insert(0) += 1;
        }
        counts
    }

    pub fn circuit(&self, service: ServiceType) -> CircuitState {
        self.circuits.get(&service).cloned().unwrap_or_else(|| CircuitState::new(service))
    }

    pub fn stats(&self) -> BrokerStats {
        BrokerStats { pending: self.pending.len(), ..self.stats.clone() }
    }

    /// Next eligible worker in rotation.
    fn pick_worker(&mut self, service: ServiceType) -> Option<ConnId> {
        let (order, cursor) = self.rotation.get_mut(&service)?;
        for step in 0..order.len() {
            let idx = (*cursor + step) % order.len();
            let conn = order[idx];
            let eligible = self
                .workers
                .get(&(conn, service))
                .is_some_and(|r| matches!(r.state, WorkerState::Ready | WorkerState::Suspect));
            if eligible {
                *cursor = (idx + 1) % order.len();
                return Some(conn);
            }
        }
        None
    }

    /// Gate before dispatch. Returns whether the attempt is a half-open probe.
    fn circuit_admit(&mut self, service: ServiceType, now_us: u64) -> Result<bool, ()> {
        let cooldown = self.config.cooldown_us;
        let circuit = self.circuits.entry(service).or_insert_with(|| CircuitState::new(service));
        match circuit.state {
            CircuitPhase::Closed => Ok(false),
            CircuitPhase::Open if now_us.saturating_sub(circuit.opened_at_us) >= cooldown => {
                circuit.state = CircuitPhase::HalfOpen;
                circuit.probe_in_flight = true;
                Ok(true)
            }
            CircuitPhase::Open => Err(()),
            CircuitPhase::HalfOpen if circuit.probe_in_flight => Err(()),
            CircuitPhase::HalfOpen => {
                circuit.probe_in_flight = true;
                Ok(true)
            }
        }
    }

    /// Feeds one request outcome into the service's circuit breaker.
    pub fn record_outcome(&mut self, service: ServiceType, success: bool, now_us: u64) -> CircuitState {
        let threshold = self.config.failure_threshold.max(1);
        let circuit = self.circuits.entry(service).or_insert_with(|| CircuitState::new(service));
        match (circuit.state, success) {
            (CircuitPhase::Closed, true) => circuit.consecutive_failures = 0,
            (CircuitPhase::Closed, false) => {
                circuit.consecutive_failures += 1;
                if circuit.consecutive_failures >= threshold {
                    circuit.state = CircuitPhase::Open;
                    circuit.opened_at_us = now_us;
                }
            }
            (CircuitPhase::HalfOpen, true) => {
                circuit.state = CircuitPhase::Closed;
                circuit.consecutive_failures = 0;
                circuit.probe_in_flight = false;
            }
            (CircuitPhase::HalfOpen, false) => {
                circuit.state = CircuitPhase::Open;
                circuit.opened_at_us = now_us;
                circuit.consecutive_failures = circuit.consecutive_failures.max(threshold - 1) + 1;
                circuit.probe_in_flight = false;
            }
            // Late outcomes of requests admitted before the circuit opened.
            (CircuitPhase::Open, true) => {}
            (CircuitPhase::Open, false) => circuit.consecutive_failures += 1,
        }
        circuit.clone()
    }

    fn release_probe(&mut self, service: ServiceType) {
        if let Some(c) = self.circuits.get_mut(&service) {
            c.probe_in_flight = false;
        }
    }

    /// Forwards a client REQUEST to a worker, or answers it with an ERROR.
    pub fn route_request(&mut self, client: ConnId, request: MessageEnvelope, now_us: u64) -> Vec<Action> {
        self.dispatch(client, request, now_us, 0, None)
    }

    fn dispatch(
        &mut self,
        client: ConnId,
        request: MessageEnvelope,
        now_us: u64,
        previous: u32,
        deadline_us: Option<u64>,
    ) -> Vec<Action> {
        let service = request.service;
        let probe = match self.circuit_admit(service, now_us) {
            Ok(probe) => probe,
            Err(()) => {
                self.stats.circuit_rejections += 1;
                let err = error_envelope(&request, RouteError::CircuitOpen, "circuit open");
                return vec![Action::Send(client, err)];
            }
        };
        let Some(worker) = self.pick_worker(service) else {
            if probe {
                self.release_probe(service);
                // Without a probe the circuit would stay half-open forever.
                if let Some(c) = self.circuits.get_mut(&service) {
                    c.state = CircuitPhase::Open;
                    c.opened_at_us = now_us;
                }
            }
            self.stats.no_worker += 1;
            let err = error_envelope(&request, RouteError::NoWorkerAvailable, service.name());
            return vec![Action::Send(client, err)];
        };
        let key = PendingKey {
            worker,
            service,
            request_id: request.request_id,
            session: self.session_key(&request.session_id),
        };
        if self.pending.contains_key(&key) {
            if probe {
                self.release_probe(service);
            }
            let err = error_envelope(&request, RouteError::DuplicateRequest, "request id already pending");
            return vec![Action::Send(client, err)];
        }
        let max_in_flight = self.config.max_in_flight;
        if let Some(record) = self.workers.get_mut(&(worker, service)) {
            record.in_flight += 1;
            if max_in_flight.is_some_and(|m| record.in_flight >= m) && record.state == WorkerState::Ready {
                record.state = WorkerState::Busy;
            }
        }
        self.stats.requests_routed += 1;
        let forwarded = request.clone();
        self.pending.insert(
            key,
            Pending {
                client,
                request,
                deadline_us: deadline_us.unwrap_or(now_us + self.config.request_timeout_us),
                dispatches: previous + 1,
                probe,
            },
        );
        vec![Action::Send(worker, forwarded)]
    }

    fn settle_worker(&mut self, worker: ConnId, service: ServiceType) {
        if let Some(record) = self.workers.get_mut(&(worker, service)) {
            record.in_flight = record.in_flight.saturating_sub(1);
            record.handled += 1;
            if record.state == WorkerState::Busy && !self.config.max_in_flight.is_some_and(|m| record.in_flight >= m) {
                record.state = WorkerState::Ready;
            }
        }
    }

    /// Handles REPLY, ERROR and SESSION_EVENT frames arriving from a worker.
    pub fn route_reply(&mut self, worker: ConnId, reply: MessageEnvelope, now_us: u64) -> Vec<Action> {
        self.heartbeat(worker, now_us);
        let unsolicited = reply.request_id == 0 || reply.kind == MsgKind::SessionEvent;
        if unsolicited {
            let session = reply.session_id.clone();
            return self.fan_out(&session, reply, true);
        }
        let session = match self.session_ids.get(&reply.session_id) {
            Some(s) => *s,
            None => {
                self.stats.dropped += 1;
                return Vec::new();
            }
        };
        let key = PendingKey { worker, service: reply.service, request_id: reply.request_id, session };
        let Some(pending) = self.pending.remove(&key) else {
            self.stats.dropped += 1;
            return Vec::new();
        };
        self.settle_worker(worker, reply.service);
        let success = reply.kind != MsgKind::Error;
        if pending.probe && !success {
            self.release_probe(reply.service);
        }
        self.record_outcome(reply.service, success, now_us);
        self.stats.replies_delivered += 1;
        vec![Action::Send(pending.client, reply)]
    }

    /// Delivers `envelope` to every connection bound to `session`.
    pub fn fan_out(&mut self, session: &str, envelope: MessageEnvelope, count_drop: bool) -> Vec<Action> {
        match self.bindings.get(session) {
            Some(conns) if !conns.is_empty() => {
                self.stats.unsolicited_delivered += conns.len() as u64;
                conns.iter().map(|c| Action::Send(*c, envelope.clone())).collect()
            }
            _ => {
                if count_drop {
                    self.stats.dropped += 1;
                }
                Vec::new()
            }
        }
    }

    pub fn bind(&mut self, conn: ConnId, session: &str) {
        self.unbind(conn);
        self.bindings.entry(session.to_owned()).or_default().push(conn);
        self.bound.insert(conn, session.to_owned());
    }

    pub fn unbind(&mut self, conn: ConnId) {
        if let Some(session) = self.bound.remove(&conn) {
            if let Some(conns) = self.bindings.get_mut(&session) {
                conns.retain(|c| *c != conn);
                if conns.is_empty() {
                    self.bindings.remove(&session);
                }
            }
        }
    }

    pub fn bound_session(&self, conn: ConnId) -> Option<&str> {
        self.bound.get(&conn).map(String::as_str)
    }

    pub fn bound_devices(&self, session: &str) -> &[ConnId] {
        self.bindings.get(session).map_or(&[], Vec::as_slice)
    }

    /// Forgets a closed connection. Requests held by a lost worker are
    /// dispatched again, up to the redispatch limit.
    pub fn connection_closed(&mut self, conn: ConnId, now_us: u64) -> Vec<Action> {
        self.unbind(conn);
        let was_worker = self.is_worker(conn);
        self.workers.retain(|(c, _), _| *c != conn);
        for (order, cursor) in self.rotation.values_mut() {
            if let Some(pos) = order.iter().position(|c| *c == conn) {
                order.remove(pos);
                if *cursor > pos {
                    *cursor -= 1;
                }
                if *cursor >= order.len() {
                    *cursor = 0;
                }
            }
        }
        if was_worker {
            self.stats.workers_lost += 1;
            self.reassign(conn, now_us)
        } else {
            // Replies for this client have nowhere to go.
            self.pending.retain(|_, p| p.client != conn);
            Vec::new()
        }
    }

    fn reassign(&mut self, worker: ConnId, now_us: u64) -> Vec<Action> {
        let orphaned: Vec<PendingKey> = self.pending.keys().filter(|k| k.worker == worker).copied().collect();
        let mut orphaned: Vec<(PendingKey, Pending)> =
            orphaned.into_iter().filter_map(|k| self.pending.remove(&k).map(|p| (k, p))).collect();
        // Deterministic order: oldest deadline first.
        orphaned.sort_by_key(|(k, p)| (p.deadline_us, k.request_id));
        let mut actions = Vec::new();
        for (_, pending) in orphaned {
            if pending.probe {
                self.release_probe(pending.request.service);
            }
            if pending.dispatches <= self.config.max_redispatch {
                self.stats.redispatched += 1;
                actions.extend(self.dispatch(
                    pending.client,
                    pending.request,
                    now_us,
                    pending.dispatches,
                    Some(pending.deadline_us),
                ));
            } else {
                self.record_outcome(pending.request.service, false, now_us);
                let err = error_envelope(&pending.request, RouteError::WorkerLost, "worker lost");
                actions.push(Action::Send(pending.client, err));
            }
        }
        actions
    }

    /// Advances silent workers one liveness step. DEAD workers are removed
    /// and their requests reassigned.
    pub fn heartbeat_sweep(&mut self, now_us: u64) -> (Vec<Transition>, Vec<Action>) {
        let limit = self.config.heartbeat_interval_us * self.config.liveness_factor as u64;
        let mut transitions = Vec::new();
        for record in self.workers.values_mut() {
            if now_us.saturating_sub(record.last_heartbeat_us) <= limit {
                continue;
            }
            let to = match record.state {
                WorkerState::Ready | WorkerState::Busy => WorkerState::Suspect,
                WorkerState::Suspect => WorkerState::Dead,
                WorkerState::Dead => continue,
            };
            transitions.push(Transition { worker_id: record.worker_id, service: record.service, from: record.state, to });
            record.state = to;
        }
        transitions.sort_by_key(|t| (t.worker_id, t.service.code()));
        let dead: HashSet<ConnId> =
            transitions.iter().filter(|t| t.to == WorkerState::Dead).map(|t| t.worker_id).collect();
        let mut actions = Vec::new();
        let mut dead: Vec<_> = dead.into_iter().collect();
        dead.sort_unstable();
        for conn in dead {
            actions.extend(self.connection_closed(conn, now_us));
            actions.push(Action::Close(conn));
        }
        (transitions, actions)
    }

    /// Answers every request whose deadline has passed with a Timeout ERROR.
    pub fn expire(&mut self, now_us: u64) -> Vec<Action> {
        let expired: Vec<PendingKey> =
            self.pending.iter().filter(|(_, p)| p.deadline_us <= now_us).map(|(k, _)| *k).collect();
        let mut expired: Vec<(PendingKey, Pending)> =
            expired.into_iter().filter_map(|k| self.pending.remove(&k).map(|p| (k, p))).collect();
        expired.sort_by_key(|(k, p)| (p.deadline_us, k.request_id));
        let mut actions = Vec::new();
        for (key, pending) in expired {
            self.settle_worker(key.worker, key.service);
            if pending.probe {
                self.release_probe(key.service);
            }
            self.record_outcome(key.service, false, now_us);
            self.stats.timeouts += 1;
            let err = error_envelope(&pending.request, RouteError::Timeout, "request timed out");
            actions.push(Action::Send(pending.client, err));
        }
        actions
    }

    pub fn worker_ids(&self) -> Vec<ConnId> {
        let mut ids: Vec<ConnId> = self.workers.keys().map(|(c, _)| *c).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }
}
