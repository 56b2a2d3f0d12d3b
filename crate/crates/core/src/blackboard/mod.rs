//! Per-session working memory with keyed entries and change notifications.
//!
//! [`BlackboardState`] holds the data and subscription bookkeeping and is
//! driven synchronously; [`Blackboard`] wraps it in a task that owns it and
//! takes requests over a channel.

mod actor;

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt;
use std::sync::Arc;

use serde_json::json;
use thiserror::Error;

use crate::value::Value;

pub use actor::{channel_sink, Blackboard, BlackboardHandle, EventSink, SubscriptionHandle};

/// Source recorded for posts that arrive from outside the session's components.
pub const EXTERNAL_SOURCE: &str = "external";

#[derive(Debug, Clone, PartialEq)]
pub struct BlackboardEntry {
    pub key: String,
    pub value: Value,
    pub source: String,
    pub seq: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EventKind {
    Posted,
    Removed,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Posted => "POSTED",
            EventKind::Removed => "REMOVED",
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlackboardEvent {
    pub kind: EventKind,
    pub entry: BlackboardEntry,
    pub session_id: Arc<str>,
}

impl BlackboardEvent {
    pub fn key(&self) -> &str {
        &self.entry.key
    }

    pub fn seq(&self) -> u64 {
        self.entry.seq
    }

    pub fn is_external(&self) -> bool {
        self.entry.source == EXTERNAL_SOURCE
    }

    /// Payload of a SESSION_EVENT envelope announcing this event.
    pub fn to_value(&self) -> Value {
        json!({
            "kind": self.kind.as_str(),
            "key": self.entry.key,
            "seq": self.entry.seq,
            "source": self.entry.source,
            "value": self.entry.value,
        })
    }

    pub fn from_value(session_id: &str, value: &Value) -> Option<Self> {
        let kind = match value.get("kind")?.as_str()? {
            "POSTED" => EventKind::Posted,
            "REMOVED" => EventKind::Removed,
            _ => return None,
        };
        Some(BlackboardEvent {
            kind,
            entry: BlackboardEntry {
                key: value.get("key")?.as_str()?.to_owned(),
                value: value.get("value").cloned().unwrap_or(Value::Null),
                source: value.get("source").and_then(Value::as_str).unwrap_or(EXTERNAL_SOURCE).to_owned(),
                seq: value.get("seq")?.as_u64()?,
            },
            session_id: Arc::from(session_id),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BlackboardError {
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("component `{0}` is not registered in session")]
    UnknownComponent(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SubscriptionId(pub u64);

#[derive(Debug)]
struct Subscription {
    id: SubscriptionId,
    component_id: String,
    keys: HashSet<String>,
}

/// Result of a mutation: the event plus the subscriptions it must reach.
/// The orchestrator always receives it in addition to these.
#[derive(Debug)]
pub struct Mutation {
    pub event: BlackboardEvent,
    pub targets: Vec<SubscriptionId>,
}

#[derive(Debug)]
pub struct BlackboardState {
    session_id: Arc<str>,
    entries: HashMap<String, BlackboardEntry>,
    last_seq: u64,
    next_subscription: u64,
    subscriptions: Vec<Subscription>,
    members: HashSet<String>,
    history: VecDeque<BlackboardEvent>,
    history_capacity: usize,
    total_events: u64,
}

impl BlackboardState {
    pub fn new(session_id: &str, history_capacity: usize) -> Self {
        BlackboardState {
            session_id: Arc::from(session_id),
            entries: HashMap::new(),
            last_seq: 0,
            next_subscription: 1,
            subscriptions: Vec::new(),
            members: HashSet::new(),
            history: VecDeque::new(),
            history_capacity,
            total_events: 0,
        }
    }

    pub fn session_id(&self) -> &str {
        &self.session_id
    }

    pub fn add_member(&mut self, component_id: impl Into<String>) {
        self.members.insert(component_id.into());
    }

    pub fn is_member(&self, component_id: &str) -> bool {
        self.members.contains(component_id)
    }

    pub fn post(&mut self, key: &str, value: Value, source: &str) -> Mutation {
        self.last_seq += 1;
        let entry = BlackboardEntry {
            key: key.to_owned(),
            value,
            source: source.to_owned(),
            seq: self.last_seq,
        };
        self.entries.insert(entry.key.clone(), entry.clone());
        self.emit(EventKind::Posted, entry)
    }

    /// Removal consumes a sequence number so that seq stays unique per event.
    pub fn remove(&mut self, key: &str) -> Option<Mutation> {
        let mut entry = self.entries.remove(key)?;
        self.last_seq += 1;
        entry.seq = self.last_seq;
        Some(self.emit(EventKind::Removed, entry))
    }

    pub fn get(&self, key: &str) -> Option<&BlackboardEntry> {
        self.entries.get(key)
    }

    pub fn subscribe<I, S>(&mut self, component_id: &str, keys: I) -> Result<SubscriptionId, BlackboardError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        if !self.members.contains(component_id) {
            return Err(BlackboardError::UnknownComponent(component_id.to_owned()));
        }
        let id = SubscriptionId(self.next_subscription);
        self.next_subscription += 1;
        self.subscriptions.push(Subscription {
            id,
            component_id: component_id.to_owned(),
            keys: keys.into_iter().map(Into::into).collect(),
        });
        Ok(id)
    }

    pub fn unsubscribe(&mut self, id: SubscriptionId) -> bool {
        let before = self.subscriptions.len();
        self.subscriptions.retain(|s| s.id != id);
        before != self.subscriptions.len()
    }

    pub fn subscriber_of(&self, id: SubscriptionId) -> Option<&str> {
        self.subscriptions.iter().find(|s| s.id == id).map(|s| s.component_id.as_str())
    }

    pub fn snapshot(&self) -> Vec<BlackboardEntry> {
        let mut entries: Vec<_> = self.entries.values().cloned().collect();
        entries.sort_by(|a, b| a.key.cmp(&b.key));
        entries
    }

    pub fn history(&self) -> impl Iterator<Item = &BlackboardEvent> {
        self.history.iter()
    }

    pub fn total_events(&self) -> u64 {
        self.total_events
    }

    pub fn last_seq(&self) -> u64 {
        self.last_seq
    }

    fn emit(&mut self, kind: EventKind, entry: BlackboardEntry) -> Mutation {
        let targets = self
            .subscriptions
            .iter()
            .filter(|s| s.keys.contains(&entry.key))
            .map(|s| s.id)
            .collect();
        let event = BlackboardEvent { kind, entry, session_id: self.session_id.clone() };
        self.total_events += 1;
        if self.history_capacity > 0 {
            if self.history.len() == self.history_capacity {
                self.history.pop_front();
            }
            self.history.push_back(event.clone());
        }
        Mutation { event, targets }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::value::json;

    fn board() -> BlackboardState {
        let mut bb = BlackboardState::new("s1", 64);
        bb.add_member("NLU");
        bb.add_member("A");
        bb.add_member("B");
        bb
    }

    #[test]
    fn subscriber_receives_posted_event() {
        let mut bb = board();
        let sub = bb.subscribe("NLU", ["ASR_Event"]).unwrap();
        let m = bb.post("ASR_Event", json!({"utterance": "hi"}), "ASR");
        assert_eq!(m.targets, vec![sub]);
        assert_eq!(m.event.kind, EventKind::Posted);
        assert_eq!(m.event.entry.value, json!({"utterance": "hi"}));
    }

    #[test]
    fn post_without_subscribers_has_no_targets() {
        let mut bb = board();
        let m = bb.post("X", json!(1), EXTERNAL_SOURCE);
        assert!(m.targets.is_empty());
        assert_eq!(bb.total_events(), 1);
    }

    #[test]
    fn overwrite_bumps_seq() {
        let mut bb = board();
        let a = bb.post("k", json!(1), "A").event.seq();
        let b = bb.post("k", json!(2), "A").event.seq();
        assert!(b > a);
        assert_eq!(bb.get("k").unwrap().value, json!(2));
    }

    #[test]
    fn get_remove_semantics() {
        let mut bb = board();
        assert!(bb.get("k").is_none());
        bb.post("k", json!("v"), "A");
        assert_eq!(bb.get("k").unwrap().value, json!("v"));
        assert!(bb.remove("absent").is_none());
        let removed = bb.remove("k").unwrap();
        assert_eq!(removed.event.kind, EventKind::Removed);
        assert!(bb.get("k").is_none());
    }

    #[test]
    fn seq_never_reused_after_remove() {
        let mut bb = board();
        let first = bb.post("k", json!(1), "A").event.seq();
        let removed = bb.remove("k").unwrap().event.seq();
        let again = bb.post("k", json!(1), "A").event.seq();
        assert!(first < removed && removed < again);
    }

    #[test]
    fn multiple_subscribers_and_keys() {
        let mut bb = board();
        let a = bb.subscribe("A", ["X", "Y"]).unwrap();
        let b = bb.subscribe("B", ["X"]).unwrap();
        assert_eq!(bb.post("X", json!(1), "ext").targets, vec![a, b]);
        assert_eq!(bb.post("Y", json!(1), "ext").targets, vec![a]);
    }

    #[test]
    fn subscribe_requires_membership() {
        let mut bb = board();
        assert_eq!(
            bb.subscribe("ghost", ["X"]).unwrap_err(),
            BlackboardError::UnknownComponent("ghost".into())
        );
    }

    #[test]
    fn history_is_capped() {
        let mut bb = BlackboardState::new("s", 2);
        for i in 0..5 {
            bb.post("k", json!(i), "A");
        }
        let seqs: Vec<u64> = bb.history().map(BlackboardEvent::seq).collect();
        assert_eq!(seqs, vec![4, 5]);
        assert_eq!(bb.total_events(), 5);
    }

    #[test]
    fn event_wire_value_round_trips() {
        let mut bb = board();
        let event = bb.post("NLU_Event", json!({"intent": "greet"}), "NLU").event;
        let back = BlackboardEvent::from_value("s1", &event.to_value()).unwrap();
        assert_eq!(back, event);
    }
}
