use std::collections::HashMap;
use std::time::Duration;

use super::{Component, ExecContext, ExecError, Execution};
use crate::client::{BrokerClient, ClientError};
use crate::value::{self, Value};
use crate::wire::{MessageEnvelope, MsgKind, ServiceType};

/// Correlation table for requests awaiting a reply from the broker.
#[derive(Debug)]
pub struct PendingReplies<T> {
    next_id: u64,
    pending: HashMap<u64, (T, u64)>,
    dropped: u64,
}

#[derive(Debug)]
pub enum ReplyOutcome<T> {
    Completed(T, Result<Value, ExecError>),
    /// No pending request matched: expired, already answered, or never sent.
    Dropped,
}

impl<T> Default for PendingReplies<T> {
    fn default() -> Self {
        PendingReplies { next_id: 1, pending: HashMap::new(), dropped: 0 }
    }
}

impl<T> PendingReplies<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// A table whose first id is `first` (0 is bumped to 1).
    pub fn starting_at(first: u64) -> Self {
        PendingReplies { next_id: first.max(1), ..Self::default() }
    }

    /// Allocates the next request id (strictly increasing, never 0).
    pub fn begin(&mut self, waiter: T, deadline_us: u64) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        self.pending.insert(id, (waiter, deadline_us));
        id
    }

    pub fn take(&mut self, request_id: u64) -> Option<T> {
        match self.pending.remove(&request_id) {
            Some((waiter, _)) => Some(waiter),
            None => {
                self.dropped += 1;
                None
            }
        }
    }

    /// Matches a REPLY or ERROR envelope against the table.
    pub fn process(&mut self, reply: &MessageEnvelope) -> ReplyOutcome<T> {
        if reply.request_id == 0 {
            self.dropped += 1;
            return ReplyOutcome::Dropped;
        }
        let Some(waiter) = self.take(reply.request_id) else {
            return ReplyOutcome::Dropped;
        };
        ReplyOutcome::Completed(waiter, reply_result(reply))
    }

    /// Removes every entry whose deadline has passed.
    pub fn expire(&mut self, now_us: u64) -> Vec<(u64, T)> {
        let expired: Vec<u64> = self
            .pending
            .iter()
            .filter(|(_, (_, deadline))| *deadline <= now_us)
            .map(|(id, _)| *id)
            .collect();
        expired
            .into_iter()
            .filter_map(|id| self.pending.remove(&id).map(|(w, _)| (id, w)))
            .collect()
    }

    pub fn retain(&mut self, mut keep: impl FnMut(&T) -> bool) {
        self.pending.retain(|_, (w, _)| keep(w));
    }

    pub fn drain(&mut self) -> Vec<T> {
        self.pending.drain().map(|(_, (w, _))| w).collect()
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }
}

/// Interprets a correlated reply: REPLY carries the output, ERROR a failure.
pub fn reply_result(reply: &MessageEnvelope) -> Result<Value, ExecError> {
    match reply.kind {
        MsgKind::Reply | MsgKind::ConnectAck => value::from_payload(&reply.payload)
            .map_err(|e| ExecError::RemoteError(format!("undecodable reply payload: {e}"))),
        MsgKind::Error => Err(ExecError::RemoteError(error_message(reply))),
        other => Err(ExecError::RemoteError(format!("unexpected {other:?} in reply position"))),
    }
}

pub(crate) fn error_message(envelope: &MessageEnvelope) -> String {
    match value::from_payload(&envelope.payload) {
        Ok(v) => match (v.get("code").and_then(Value::as_str), v.get("message").and_then(Value::as_str)) {
            (Some(code), Some(msg)) => format!("{code}: {msg}"),
            (Some(code), None) => code.to_owned(),
            _ => v.to_string(),
        },
        Err(_) => String::from_utf8_lossy(&envelope.payload).into_owned(),
    }
}

/// Proxy for a component served by a remote worker behind the broker.
pub struct ExternalComponent {
    service: ServiceType,
    endpoint: String,
    timeout: Duration,
    client: Option<BrokerClient>,
}

impl ExternalComponent {
    pub fn new(service: ServiceType, endpoint: &str, timeout: Duration) -> Self {
        ExternalComponent { service, endpoint: endpoint.to_owned(), timeout, client: None }
    }

    fn client(&mut self) -> &BrokerClient {
        let stale = self.client.as_ref().map_or(true, BrokerClient::is_closed);
        if stale {
            self.client = Some(BrokerClient::spawn(&self.endpoint));
        }
        self.client.as_ref().expect("client just ensured")
    }
}

impl Component for ExternalComponent {
    fn execute(&mut self, input: Value, ctx: &ExecContext) -> Execution {
        let envelope = MessageEnvelope::new(MsgKind::Request, self.service, &*ctx.session_id)
            .with_payload(value::to_payload(&input));
        let timeout = self.timeout;
        let pending = self.client().request(envelope, timeout);
        Execution::Deferred(Box::pin(async move {
            match pending.await {
                Ok(reply) => reply_result(&reply),
                Err(ClientError::Timeout) => Err(ExecError::Timeout),
                Err(e) => Err(ExecError::RemoteError(e.to_string())),
            }
        }))
    }

    fn shutdown(&mut self) {
        if let Some(client) = self.client.take() {
            client.close();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::value::json;

    fn reply(kind: MsgKind, id: u64, payload: Value) -> MessageEnvelope {
        MessageEnvelope::new(kind, ServiceType::Asr, "s1")
            .with_request_id(id)
            .with_payload(value::to_payload(&payload))
    }

    #[test]
    fn ids_strictly_increase() {
        let mut p = PendingReplies::new();
        let a = p.begin((), 10);
        let b = p.begin((), 10);
        assert!(a >= 1 && b > a);
    }

    #[test]
    fn reply_completes_matching_request() {
        let mut p = PendingReplies::new();
        let id = p.begin("w", u64::MAX);
        match p.process(&reply(MsgKind::Reply, id, json!({"utterance": "hi"}))) {
            ReplyOutcome::Completed(w, Ok(v)) => {
                assert_eq!(w, "w");
                assert_eq!(v, json!({"utterance": "hi"}));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(p.is_empty());
    }

    #[test]
    fn error_envelope_is_a_failure() {
        let mut p = PendingReplies::new();
        let id = p.begin((), u64::MAX);
        let outcome = p.process(&reply(MsgKind::Error, id, json!({"code": "NoWorkerAvailable", "message": "ASR"})));
        match outcome {
            ReplyOutcome::Completed((), Err(ExecError::RemoteError(msg))) => {
                assert_eq!(msg, "NoWorkerAvailable: ASR")
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn expired_or_unknown_replies_are_dropped() {
        let mut p = PendingReplies::new();
        let id = p.begin((), 100);
        assert_eq!(p.expire(50).len(), 0);
        assert_eq!(p.expire(100).len(), 1);
        assert!(matches!(p.process(&reply(MsgKind::Reply, id, json!(1))), ReplyOutcome::Dropped));
        assert!(matches!(p.process(&reply(MsgKind::Reply, 999, json!(1))), ReplyOutcome::Dropped));
        assert_eq!(p.dropped(), 2);
    }
}
