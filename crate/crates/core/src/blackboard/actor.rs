use std::collections::HashMap;
use std::sync::Arc;

use tokio::sync::{mpsc, oneshot};

use super::{BlackboardEntry, BlackboardError, BlackboardEvent, BlackboardState, Mutation, SubscriptionId};
use crate::value::Value;

/// Receives copies of blackboard events. Returning `false` means the
/// receiver is gone and the subscription can be dropped.
pub type EventSink = Box<dyn Fn(BlackboardEvent) -> bool + Send>;

enum Command {
    Post { key: String, value: Value, source: String, reply: Option<oneshot::Sender<u64>> },
    Get { key: String, reply: oneshot::Sender<Option<BlackboardEntry>> },
    Remove { key: String, reply: Option<oneshot::Sender<bool>> },
    Subscribe {
        component_id: String,
        keys: Vec<String>,
        sink: EventSink,
        reply: oneshot::Sender<Result<SubscriptionId, BlackboardError>>,
    },
    Unsubscribe(SubscriptionId),
    AddMember(String),
    SetOrchestrator(EventSink),
    Snapshot(oneshot::Sender<Vec<BlackboardEntry>>),
    History(oneshot::Sender<(Vec<BlackboardEvent>, u64)>),
    Close,
}

/// Spawns blackboard owner tasks.
pub struct Blackboard;

impl Blackboard {
    pub fn spawn(session_id: &str, history_capacity: usize) -> BlackboardHandle {
        let (tx, rx) = mpsc::unbounded_channel();
        let state = BlackboardState::new(session_id, history_capacity);
        tokio::spawn(run(state, rx));
        BlackboardHandle { session_id: Arc::from(session_id), tx }
    }
}

async fn run(mut state: BlackboardState, mut rx: mpsc::UnboundedReceiver<Command>) {
    let mut sinks: HashMap<SubscriptionId, EventSink> = HashMap::new();
    let mut orchestrator: Option<EventSink> = None;
    while let Some(cmd) = rx.recv().await {
        match cmd {
            Command::Post { key, value, source, reply } => {
                let mutation = state.post(&key, value, &source);
                let seq = mutation.event.seq();
                deliver(&mut state, &mut sinks, &mut orchestrator, mutation);
                if let Some(reply) = reply {
                    let _ = reply.send(seq);
                }
            }
            Command::Get { key, reply } => {
                let _ = reply.send(state.get(&key).cloned());
            }
            Command::Remove { key, reply } => {
                let removed = match state.remove(&key) {
                    Some(mutation) => {
                        deliver(&mut state, &mut sinks, &mut orchestrator, mutation);
                        true
                    }
                    None => false,
                };
                if let Some(reply) = reply {
                    let _ = reply.send(removed);
                }
            }
            Command::Subscribe { component_id, keys, sink, reply } => {
                let result = state.subscribe(&component_id, keys);
                if let Ok(id) = result {
                    sinks.insert(id, sink);
                }
                let _ = reply.send(result);
            }
            Command::Unsubscribe(id) => {
                state.unsubscribe(id);
                sinks.remove(&id);
            }
            Command::AddMember(id) => state.add_member(id),
            Command::SetOrchestrator(sink) => orchestrator = Some(sink),
            Command::Snapshot(reply) => {
                let _ = reply.send(state.snapshot());
            }
            Command::History(reply) => {
                let _ = reply.send((state.history().cloned().collect(), state.total_events()));
            }
            Command::Close => break,
        }
    }
}

fn deliver(
    state: &mut BlackboardState,
    sinks: &mut HashMap<SubscriptionId, EventSink>,
    orchestrator: &mut Option<EventSink>,
    mutation: Mutation,
) {
    if let Some(sink) = orchestrator.as_ref() {
        if !sink(mutation.event.clone()) {
            *orchestrator = None;
        }
    }
    for id in mutation.targets {
        let alive = match sinks.get(&id) {
            Some(sink) => sink(mutation.event.clone()),
            None => continue,
        };
        if !alive {
            sinks.remove(&id);
            state.unsubscribe(id);
        }
    }
}

#[derive(Debug, Clone)]
pub struct BlackboardHandle {
    session_id: Arc<str>,
    tx: mpsc::UnboundedSender<Command>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubscriptionHandle {
    pub id: SubscriptionId,
}

impl BlackboardHandle {
    pub fn session_id(&self) -> &str {
        &self.session_id
    }

    pub fn is_closed(&self) -> bool {
        self.tx.is_closed()
    }

    fn send(&self, cmd: Command) -> Result<(), BlackboardError> {
        self.tx
            .send(cmd)
            .map_err(|_| BlackboardError::UnknownSession(self.session_id.to_string()))
    }

    async fn await_reply<T>(&self, rx: oneshot::Receiver<T>) -> Result<T, BlackboardError> {
        rx.await.map_err(|_| BlackboardError::UnknownSession(self.session_id.to_string()))
    }

    /// Posts and waits for the assigned sequence number. Subscribers are
    /// notified asynchronously; the call does not wait for them.
    pub async fn post(&self, key: &str, value: Value, source: &str) -> Result<u64, BlackboardError> {
        let (reply, rx) = oneshot::channel();
        self.send(Command::Post {
            key: key.to_owned(),
            value,
            source: source.to_owned(),
            reply: Some(reply),
        })?;
        self.await_reply(rx).await
    }

    pub fn post_nowait(&self, key: &str, value: Value, source: &str) -> Result<(), BlackboardError> {
        self.send(Command::Post { key: key.to_owned(), value, source: source.to_owned(), reply: None })
    }

    pub async fn get(&self, key: &str) -> Result<Option<Value>, BlackboardError> {
        Ok(self.entry(key).await?.map(|e| e.value))
    }

    pub async fn entry(&self, key: &str) -> Result<Option<BlackboardEntry>, BlackboardError> {
        let (reply, rx) = oneshot::channel();
        self.send(Command::Get { key: key.to_owned(), reply })?;
        self.await_reply(rx).await
    }

    pub async fn remove(&self, key: &str) -> Result<bool, BlackboardError> {
        let (reply, rx) = oneshot::channel();
        self.send(Command::Remove { key: key.to_owned(), reply: Some(reply) })?;
        self.await_reply(rx).await
    }

    pub async fn subscribe<I, S>(
        &self,
        component_id: &str,
        keys: I,
        sink: EventSink,
    ) -> Result<SubscriptionHandle, BlackboardError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let (reply, rx) = oneshot::channel();
        self.send(Command::Subscribe {
            component_id: component_id.to_owned(),
            keys: keys.into_iter().map(Into::into).collect(),
            sink,
            reply,
        })?;
        let id = self.await_reply(rx).await??;
        Ok(SubscriptionHandle { id })
    }

    /// Enqueues a subscription without waiting for confirmation. Anything the
    /// caller sends afterwards is ordered after it.
    pub fn subscribe_nowait<I, S>(&self, component_id: &str, keys: I, sink: EventSink) -> Result<(), BlackboardError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let (reply, _rx) = oneshot::channel();
        self.send(Command::Subscribe {
            component_id: component_id.to_owned(),
            keys: keys.into_iter().map(Into::into).collect(),
            sink,
            reply,
        })
    }

    pub fn unsubscribe(&self, handle: SubscriptionHandle) {
        let _ = self.send(Command::Unsubscribe(handle.id));
    }

    pub fn add_member(&self, component_id: &str) -> Result<(), BlackboardError> {
        self.send(Command::AddMember(component_id.to_owned()))
    }

    pub fn set_orchestrator(&self, sink: EventSink) -> Result<(), BlackboardError> {
        self.send(Command::SetOrchestrator(sink))
    }

    pub async fn snapshot(&self) -> Result<Vec<BlackboardEntry>, BlackboardError> {
        let (reply, rx) = oneshot::channel();
        self.send(Command::Snapshot(reply))?;
        self.await_reply(rx).await
    }

    /// Retained mutation history and the total number of mutations so far.
    pub async fn history(&self) -> Result<(Vec<BlackboardEvent>, u64), BlackboardError> {
        let (reply, rx) = oneshot::channel();
        self.send(Command::History(reply))?;
        self.await_reply(rx).await
    }

    pub fn close(&self) {
        let _ = self.tx.send(Command::Close);
    }
}

/// Sink that forwards into an unbounded channel.
pub fn channel_sink<T, F>(tx: mpsc::UnboundedSender<T>, wrap: F) -> EventSink
where
    T: Send + 'static,
    F: Fn(BlackboardEvent) -> T + Send + 'static,
{
    Box::new(move |event| tx.send(wrap(event)).is_ok())
}
