use std::future::Future;
use std::pin::Pin;
use std::sync::Arc;
use std::task::{Context, Poll};

use tokio::sync::{mpsc, oneshot};

use super::{Component, ExecContext, ExecError, Execution};
use crate::blackboard::BlackboardEvent;
use crate::value::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct InstanceId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lifecycle {
    Created,
    Started,
    ShutDown,
}

pub(crate) enum WorkItem {
    Execute { input: Value, ctx: ExecContext, reply: oneshot::Sender<Result<Value, ExecError>> },
    Event { event: BlackboardEvent, ctx: ExecContext },
    Lifecycle(oneshot::Sender<Lifecycle>),
    Shutdown,
}

/// Address of a live component instance. Cloning it does not clone the
/// instance; equality of `instance_id` is instance identity.
#[derive(Debug, Clone)]
pub struct ComponentRef {
    pub component_id: Arc<str>,
    pub instance_id: InstanceId,
    /// Position inside a pool, zero otherwise.
    pub member: usize,
    pub output_key: Arc<str>,
    pub output_field: Option<Arc<str>>,
    pub remote: bool,
    /// Pool members are handed out in rotation and must not be cached.
    pub pooled: bool,
    tx: mpsc::UnboundedSender<WorkItem>,
}

impl PartialEq for ComponentRef {
    fn eq(&self, other: &Self) -> bool {
        self.instance_id == other.instance_id
    }
}

impl ComponentRef {
    /// Queues an execution. The returned completion resolves when the
    /// component produces its output; queuing itself never waits.
    pub fn execute(&self, input: Value, mut ctx: ExecContext) -> Completion {
        let (reply, rx) = oneshot::channel();
        ctx.component_id = self.component_id.clone();
        match self.tx.send(WorkItem::Execute { input, ctx, reply }) {
            Ok(()) => Completion::pending(rx),
            Err(_) => Completion::ready(Err(self.shut_down_error())),
        }
    }

    pub fn deliver_event(&self, event: BlackboardEvent, mut ctx: ExecContext) -> bool {
        ctx.component_id = self.component_id.clone();
        self.tx.send(WorkItem::Event { event, ctx }).is_ok()
    }

    pub async fn lifecycle(&self) -> Lifecycle {
        let (reply, rx) = oneshot::channel();
        if self.tx.send(WorkItem::Lifecycle(reply)).is_err() {
            return Lifecycle::ShutDown;
        }
        rx.await.unwrap_or(Lifecycle::ShutDown)
    }

    pub fn shutdown(&self) {
        let _ = self.tx.send(WorkItem::Shutdown);
    }

    pub fn is_alive(&self) -> bool {
        !self.tx.is_closed()
    }

    /// Wraps an output the way it is posted to the blackboard.
    pub fn shape_output(&self, output: Value) -> Value {
        match &self.output_field {
            Some(field) => {
                let mut map = serde_json::Map::new();
                map.insert(field.to_string(), output);
                Value::Object(map)
            }
            None => output,
        }
    }

    fn shut_down_error(&self) -> ExecError {
        ExecError::ComponentFailed(format!("component `{}` is shut down", self.component_id))
    }
}

pub(crate) struct InstanceSpec {
    pub component_id: Arc<str>,
    pub instance_id: InstanceId,
    pub member: usize,
    pub output_key: Arc<str>,
    pub output_field: Option<Arc<str>>,
    pub remote: bool,
    pub pooled: bool,
}

pub(crate) fn spawn_instance(spec: InstanceSpec, component: Box<dyn Component>) -> ComponentRef {
    let (tx, rx) = mpsc::unbounded_channel();
    tokio::spawn(run(component, rx));
    ComponentRef {
        component_id: spec.component_id,
        instance_id: spec.instance_id,
        member: spec.member,
        output_key: spec.output_key,
        output_field: spec.output_field,
        remote: spec.remote,
        pooled: spec.pooled,
        tx,
    }
}

async fn run(mut component: Box<dyn Component>, mut rx: mpsc::UnboundedReceiver<WorkItem>) {
    component.start();
    let lifecycle = Lifecycle::Started;
    while let Some(item) = rx.recv().await {
        match item {
            WorkItem::Execute { input, ctx, reply } => match component.execute(input, &ctx) {
                Execution::Ready(result) => {
                    let _ = reply.send(result);
                }
                Execution::Deferred(fut) => {
                    tokio::spawn(async move {
                        let _ = reply.send(fut.await);
                    });
                }
            },
            WorkItem::Event { event, ctx } => component.on_event(&event, &ctx),
            WorkItem::Lifecycle(reply) => {
                let _ = reply.send(lifecycle);
            }
            WorkItem::Shutdown => break,
        }
    }
    component.shutdown();
    rx.close();
    // Anything still queued is answered rather than silently dropped.
    while let Ok(item) = rx.try_recv() {
        match item {
            WorkItem::Execute { reply, ctx, .. } => {
                let _ = reply.send(Err(ExecError::ComponentFailed(format!(
                    "component `{}` is shut down",
                    ctx.component_id
                ))));
            }
            WorkItem::Lifecycle(reply) => {
                let _ = reply.send(Lifecycle::ShutDown);
            }
            _ => {}
        }
    }
}

/// Completion token for an execution.
pub struct Completion {
    state: CompletionState,
}

enum CompletionState {
    Ready(Option<Result<Value, ExecError>>),
    Pending(oneshot::Receiver<Result<Value, ExecError>>),
}

impl Completion {
    pub fn ready(result: Result<Value, ExecError>) -> Self {
        Completion { state: CompletionState::Ready(Some(result)) }
    }

    pub(crate) fn pending(rx: oneshot::Receiver<Result<Value, ExecError>>) -> Self {
        Completion { state: CompletionState::Pending(rx) }
    }
}

impl Future for Completion {
    type Output = Result<Value, ExecError>;

    fn poll(self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<Self::Output> {
        match &mut self.get_mut().state {
            CompletionState::Ready(result) => {
                Poll::Ready(result.take().expect("completion polled after it finished"))
            }
            CompletionState::Pending(rx) => Pin::new(rx).poll(cx).map(|r| {
                r.unwrap_or_else(|_| Err(ExecError::ComponentFailed("instance dropped the request".into())))
            }),
        }
    }
}
