//! Client side of the broker protocol: a correlating request/reply link
//! ([`BrokerClient`]) and a session-bound device client ([`SessionClient`]).

use std::future::Future;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use serde_json::json;
use thiserror::Error;
use tokio::net::TcpStream;
use tokio::sync::{mpsc, oneshot};

use crate::blackboard::BlackboardEvent;
use crate::clock;
use crate::connection::{parse_endpoint, spawn_link, LinkError};
use crate::registry::PendingReplies;
use crate::value::{self, Value};
use crate::wire::{MessageEnvelope, MsgKind, ServiceType};

pub const CLIENT_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClientError {
    #[error("connection refused by {0}")]
    ConnectionRefused(String),
    #[error("connect failed: {0}")]
    ConnectFailed(String),
    #[error("disconnected: {0}")]
    Disconnected(String),
    #[error("timed out")]
    Timeout,
    #[error("remote error: {0}")]
    Remote(String),
    #[error("protocol error: {0}")]
    Protocol(String),
}

#[derive(Debug, Clone)]
pub enum ClientEvent {
    /// An envelope that did not answer a pending request.
    Envelope(MessageEnvelope),
    Disconnected(String),
}

type ReplyTx = oneshot::Sender<Result<MessageEnvelope, ClientError>>;

enum Cmd {
    Request { envelope: MessageEnvelope, deadline_us: u64, reply: ReplyTx },
    Send(MessageEnvelope),
    Close,
}

/// A connection to the broker. Requests get increasing request ids and are
/// matched to their replies; all other inbound traffic goes to the event
/// channel.
#[derive(Debug, Clone)]
pub struct BrokerClient {
    tx: mpsc::UnboundedSender<Cmd>,
}

impl BrokerClient {
    /// Starts connecting in the background. Requests issued before the
    /// connection is up are queued; if it cannot be established they fail.
    pub fn spawn(endpoint: &str) -> Self {
        Self::spawn_inner(endpoint, None, None)
    }

    pub fn spawn_with_events(endpoint: &str) -> (Self, mpsc::UnboundedReceiver<ClientEvent>) {
        let (events_tx, events_rx) = mpsc::unbounded_channel();
        (Self::spawn_inner(endpoint, Some(events_tx), None), events_rx)
    }

    /// Connects and waits until the TCP link is established.
    pub async fn connect(endpoint: &str) -> Result<(Self, mpsc::UnboundedReceiver<ClientEvent>), ClientError> {
        let (events_tx, events_rx) = mpsc::unbounded_channel();
        let (ready_tx, ready_rx) = oneshot::channel();
        let client = Self::spawn_inner(endpoint, Some(events_tx), Some(ready_tx));
        match ready_rx.await {
            Ok(Ok(())) => Ok((client, events_rx)),
            Ok(Err(e)) => Err(e),
            Err(_) => Err(ClientError::ConnectFailed("client task ended".into())),
        }
    }

    fn spawn_inner(
        endpoint: &str,
        events: Option<mpsc::UnboundedSender<ClientEvent>>,
        ready: Option<oneshot::Sender<Result<(), ClientError>>>,
    ) -> Self {
        let (tx, rx) = mpsc::unbounded_channel();
        tokio::spawn(run(endpoint.to_owned(), rx, events, ready));
        BrokerClient { tx }
    }

    pub fn is_closed(&self) -> bool {
        self.tx.is_closed()
    }

    /// Sends a correlated request; `request_id` is assigned by the link.
    pub fn request(
        &self,
        envelope: MessageEnvelope,
        timeout: Duration,
    ) -> impl Future<Output = Result<MessageEnvelope, ClientError>> + Send + 'static {
        let (reply, rx) = oneshot::channel();
        let deadline_us = clock::now_us() + timeout.as_micros() as u64;
        let sent = self.tx.send(Cmd::Request { envelope, deadline_us, reply }).is_ok();
        async move {
            if !sent {
                return Err(ClientError::Disconnected("client closed".into()));
            }
            match tokio::time::timeout(timeout, rx).await {
                Ok(Ok(result)) => result,
                Ok(Err(_)) => Err(ClientError::Disconnected("client task ended".into())),
                Err(_) => Err(ClientError::Timeout),
            }
        }
    }

    /// Sends without correlation.
    pub fn send(&self, envelope: MessageEnvelope) -> Result<(), ClientError> {
        self.tx
            .send(Cmd::Send(envelope))
            .map_err(|_| ClientError::Disconnected("client closed".into()))
    }

    pub fn close(&self) {
        let _ = self.tx.send(Cmd::Close);
    }
}

/// Each link gets its own id range so that two links of one process never
/// use the same request id for the same session and worker.
fn next_id_base() -> u64 {
    static LINKS: AtomicU64 = AtomicU64::new(1);
    LINKS.fetch_add(1, Ordering::Relaxed) << 32
}

fn connect_error(endpoint: &str, e: &std::io::Error) -> ClientError {
    if e.kind() == std::io::ErrorKind::ConnectionRefused {
        ClientError::ConnectionRefused(endpoint.to_owned())
    } else {
        ClientError::ConnectFailed(e.to_string())
    }
}

async fn run(
    endpoint: String,
    mut cmds: mpsc::UnboundedReceiver<Cmd>,
    events: Option<mpsc::UnboundedSender<ClientEvent>>,
    ready: Option<oneshot::Sender<Result<(), ClientError>>>,
) {
    let connected = match parse_endpoint(&endpoint) {
        Ok(addr) => TcpStream::connect(&addr).await.map_err(|e| connect_error(&endpoint, &e)),
        Err(e) => Err(ClientError::ConnectFailed(e)),
    };
    let stream = match connected {
        Ok(stream) => {
            if let Some(ready) = ready {
                let _ = ready.send(Ok(()));
            }
            stream
        }
        Err(e) => {
            if let Some(ready) = ready {
                let _ = ready.send(Err(e.clone()));
            }
            fail_remaining(&mut cmds, &e);
            return;
        }
    };

    let (in_tx, mut inbound) = mpsc::unbounded_channel::<Result<MessageEnvelope, LinkError>>();
    let out = spawn_link(stream, in_tx, |r| r);
    let mut pending: PendingReplies<ReplyTx> = PendingReplies::starting_at(next_id_base());
    let mut purge = tokio::time::interval(Duration::from_millis(250));
    purge.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);

    let reason = loop {
        tokio::select! {
            cmd = cmds.recv() => match cmd {
                None | Some(Cmd::Close) => break "closed by owner".to_owned(),
                Some(Cmd::Request { mut envelope, deadline_us, reply }) => {
                    envelope.request_id = pending.begin(reply, deadline_us);
                    if out.send(envelope).is_err() {
                        break "writer ended".to_owned();
                    }
                }
                Some(Cmd::Send(envelope)) => {
                    if out.send(envelope).is_err() {
                        break "writer ended".to_owned();
                    }
                }
            },
            frame = inbound.recv() => match frame {
                Some(Ok(envelope)) => {
                    let correlated = matches!(envelope.kind, MsgKind::Reply | MsgKind::Error | MsgKind::ConnectAck)
                        && envelope.request_id != 0;
                    if correlated {
                        if let Some(waiter) = pending.take(envelope.request_id) {
                            let _ = waiter.send(Ok(envelope));
                            continue;
                        }
                        if envelope.kind != MsgKind::Error {
                            // Late reply for a request that already timed out.
                            continue;
                        }
                    }
                    if let Some(events) = &events {
                        let _ = events.send(ClientEvent::Envelope(envelope));
                    }
                }
                Some(Err(e)) => break e.to_string(),
                None => break "reader ended".to_owned(),
            },
            _ = purge.tick() => {
                for (_, waiter) in pending.expire(clock::now_us()) {
                    let _ = waiter.send(Err(ClientError::Timeout));
                }
                pending.retain(|w| !w.is_closed());
            }
        }
    };

    let err = ClientError::Disconnected(reason.clone());
    for waiter in pending.drain() {
        let _ = waiter.send(Err(err.clone()));
    }
    if let Some(events) = &events {
        let _ = events.send(ClientEvent::Disconnected(reason));
    }
    fail_remaining(&mut cmds, &err);
}

fn fail_remaining(cmds: &mut mpsc::UnboundedReceiver<Cmd>, err: &ClientError) {
    cmds.close();
    while let Ok(cmd) = cmds.try_recv() {
        if let Cmd::Request { reply, .. } = cmd {
            let _ = reply.send(Err(err.clone()));
        }
    }
}

/// A device bound to a session.
pub struct SessionClient {
    client: BrokerClient,
    events: mpsc::UnboundedReceiver<ClientEvent>,
    session_id: String,
    pub user_key: String,
    pub device_name: String,
    timeout: Duration,
}

impl SessionClient {
    pub async fn connect(
        endpoint: &str,
        user_key: &str,
        device_name: &str,
        timeout: Duration,
    ) -> Result<Self, ClientError> {
        Self::connect_with(endpoint, user_key, device_name, None, timeout).await
    }

    /// `capabilities` lists component ids this device makes available to
    /// other sessions; `None` leaves the session's view unchanged.
    pub async fn connect_with(
        endpoint: &str,
        user_key: &str,
        device_name: &str,
        capabilities: Option<&[&str]>,
        timeout: Duration,
    ) -> Result<Self, ClientError> {
        let (client, events) = BrokerClient::connect(endpoint).await?;
        let mut payload = json!({
            "user_key": user_key,
            "device_name": device_name,
            "client_version": CLIENT_VERSION,
        });
        if let Some(caps) = capabilities {
            payload["capabilities"] = json!(caps);
        }
        let connect = MessageEnvelope::new(MsgKind::Connect, ServiceType::Control, "")
            .with_payload(value::to_payload(&payload));
        let ack = client.request(connect, timeout).await?;
        if ack.kind != MsgKind::ConnectAck {
            return Err(remote_error(&ack));
        }
        Ok(SessionClient {
            client,
            events,
            session_id: ack.session_id,
            user_key: user_key.to_owned(),
            device_name: device_name.to_owned(),
            timeout,
        })
    }

    pub fn session_id(&self) -> &str {
        &self.session_id
    }

    /// Posts `value` under `key` on this session's blackboard.
    pub fn inject(&self, key: &str, value: Value) -> Result<(), ClientError> {
        let payload = json!({ "event": key, "data": value });
        self.client.send(
            MessageEnvelope::new(MsgKind::SessionEvent, ServiceType::Control, &*self.session_id)
                .with_payload(value::to_payload(&payload)),
        )
    }

    /// Issues a CONTROL verb and returns the reply payload.
    pub async fn control(&self, verb: &str, mut args: Value) -> Result<Value, ClientError> {
        if !args.is_object() {
            args = json!({});
        }
        args["verb"] = json!(verb);
        let request = MessageEnvelope::new(MsgKind::Request, ServiceType::Control, &*self.session_id)
            .with_payload(value::to_payload(&args));
        let reply = self.client.request(request, self.timeout).await?;
        match reply.kind {
            MsgKind::Reply => value::from_payload(&reply.payload).map_err(|e| ClientError::Protocol(e.to_string())),
            _ => Err(remote_error(&reply)),
        }
    }

    /// Direct request to a service worker, bypassing the session's orchestrator.
    pub async fn request(&self, service: ServiceType, payload: Value) -> Result<Value, ClientError> {
        let request = MessageEnvelope::new(MsgKind::Request, service, &*self.session_id)
            .with_payload(value::to_payload(&payload));
        let reply = self.client.request(request, self.timeout).await?;
        match reply.kind {
            MsgKind::Reply => value::from_payload(&reply.payload).map_err(|e| ClientError::Protocol(e.to_string())),
            _ => Err(remote_error(&reply)),
        }
    }

    pub async fn next_event(&mut self, timeout: Duration) -> Option<ClientEvent> {
        tokio::time::timeout(timeout, self.events.recv()).await.ok().flatten()
    }

    /// Waits for a pushed blackboard event with one of `keys`. Other pushed
    /// events are skipped.
    pub async fn wait_for_any(&mut self, keys: &[&str], timeout: Duration) -> Result<BlackboardEvent, ClientError> {
        let deadline = tokio::time::Instant::now() + timeout;
        loop {
            let left = deadline.saturating_duration_since(tokio::time::Instant::now());
            match tokio::time::timeout(left, self.events.recv()).await {
                Err(_) => return Err(ClientError::Timeout),
                Ok(None) => return Err(ClientError::Disconnected("event channel closed".into())),
                Ok(Some(ClientEvent::Disconnected(reason))) => return Err(ClientError::Disconnected(reason)),
                Ok(Some(ClientEvent::Envelope(env))) => match env.kind {
                    MsgKind::SessionEvent => {
                        let Ok(payload) = value::from_payload(&env.payload) else { continue };
                        if let Some(event) = BlackboardEvent::from_value(&env.session_id, &payload) {
                            if keys.contains(&event.key()) {
                                return Ok(event);
                            }
                        }
                    }
                    MsgKind::Disconnect => return Err(ClientError::Disconnected("session closed".into())),
                    MsgKind::Error => return Err(remote_error(&env)),
                    _ => {}
                },
            }
        }
    }

    pub async fn wait_for(&mut self, key: &str, timeout: Duration) -> Result<BlackboardEvent, ClientError> {
        self.wait_for_any(&[key], timeout).await
    }

    pub fn disconnect(&self) {
        let _ = self.client.send(MessageEnvelope::new(MsgKind::Disconnect, ServiceType::Control, &*self.session_id));
        self.client.close();
    }

    pub fn broker(&self) -> &BrokerClient {
        &self.client
    }
}

fn remote_error(envelope: &MessageEnvelope) -> ClientError {
    ClientError::Remote(crate::registry::error_message(envelope))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[tokio::test]
    async fn refused_connection_is_reported() {
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let port = listener.local_addr().unwrap().port();
        drop(listener);
        let err = BrokerClient::connect(&format!("tcp://127.0.0.1:{port}")).await.unwrap_err();
        assert!(matches!(err, ClientError::ConnectionRefused(_)), "{err:?}");
    }

    #[tokio::test]
    async fn requests_on_a_failed_link_error_out() {
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let port = listener.local_addr().unwrap().port();
        drop(listener);
        let client = BrokerClient::spawn(&format!("tcp://127.0.0.1:{port}"));
        let env = MessageEnvelope::new(MsgKind::Request, ServiceType::Asr, "s1");
        let err = client.request(env, Duration::from_secs(5)).await.unwrap_err();
        assert!(matches!(err, ClientError::ConnectionRefused(_) | ClientError::Disconnected(_)));
    }
}
