//! Pluggable components: registration, lifecycle and instantiation with
//! stateful, stateless and pooled semantics, plus resource location and
//! proxies for components that live behind the broker.

mod actor;
mod external;
mod instance;
mod locator;

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use futures::future::BoxFuture;
use thiserror::Error;

use crate::blackboard::BlackboardEvent;
use crate::value::Value;
use crate::wire::ServiceType;

pub use actor::{ComponentInfo, Registry, RegistryHandle, DEFAULT_REMOTE_TIMEOUT};
pub(crate) use external::error_message;
pub use external::{ExternalComponent, PendingReplies, ReplyOutcome};
pub use instance::{Completion, ComponentRef, InstanceId, Lifecycle};
pub use locator::{Resource, ResourceLocator};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StateType {
    /// One instance per session.
    Stateful,
    /// One instance for the whole process.
    Stateless,
    /// A fixed set of stateless members served in rotation.
    Pool(usize),
}

/// Builds a component instance. Called lazily on first resolve.
pub type Factory = Arc<dyn Fn(&FactoryContext<'_>) -> Box<dyn Component> + Send + Sync>;

pub struct FactoryContext<'a> {
    pub component_id: &'a str,
    pub session_id: Option<&'a str>,
    pub member: usize,
    pub locator: &'a ResourceLocator,
}

#[derive(Clone)]
pub enum Binding {
    Local(Factory),
    Remote { service: ServiceType, endpoint: String },
}

impl fmt::Debug for Binding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Binding::Local(_) => f.write_str("Local(..)"),
            Binding::Remote { service, endpoint } => {
                write!(f, "Remote({service} @ {endpoint})")
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct ComponentDescriptor {
    pub component_id: String,
    pub state_type: StateType,
    pub subscriptions: BTreeSet<String>,
    pub binding: Binding,
    /// Blackboard key under which execution results are posted.
    pub output_key: String,
    /// When set, results are posted as `{field: output}`.
    pub output_field: Option<String>,
}

impl ComponentDescriptor {
    pub fn local<F>(component_id: &str, state_type: StateType, factory: F) -> Self
    where
        F: Fn(&FactoryContext<'_>) -> Box<dyn Component> + Send + Sync + 'static,
    {
        Self::with_binding(component_id, state_type, Binding::Local(Arc::new(factory)))
    }

    pub fn remote(component_id: &str, state_type: StateType, service: ServiceType, endpoint: &str) -> Self {
        Self::with_binding(
            component_id,
            state_type,
            Binding::Remote { service, endpoint: endpoint.to_owned() },
        )
    }

    pub fn with_binding(component_id: &str, state_type: StateType, binding: Binding) -> Self {
        ComponentDescriptor {
            component_id: component_id.to_owned(),
            state_type,
            subscriptions: BTreeSet::new(),
            binding,
            output_key: format!("{component_id}_Event"),
            output_field: None,
        }
    }

    pub fn subscribe_to<I, S>(mut self, keys: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.subscriptions.extend(keys.into_iter().map(Into::into));
        self
    }

    pub fn output(mut self, key: &str, field: Option<&str>) -> Self {
        self.output_key = key.to_owned();
        self.output_field = field.map(str::to_owned);
        self
    }

    pub fn is_remote(&self) -> bool {
        matches!(self.binding, Binding::Remote { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegistryError {
    #[error("component `{0}` is already registered")]
    DuplicateComponentId(String),
    #[error("unknown component `{0}`")]
    UnknownComponent(String),
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("invalid descriptor: {0}")]
    InvalidDescriptor(String),
    #[error("registry is shut down")]
    Closed,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExecError {
    #[error("component failed: {0}")]
    ComponentFailed(String),
    #[error("remote error: {0}")]
    RemoteError(String),
    #[error("timed out")]
    Timeout,
    #[error(transparent)]
    Registry(#[from] RegistryError),
}

/// A request from a component to write to its session's blackboard. Such
/// posts pass through the session orchestrator's arbitration.
#[derive(Debug, Clone, PartialEq)]
pub struct PostRequest {
    pub component_id: String,
    pub key: String,
    pub value: Value,
}

#[derive(Clone)]
pub struct Poster(Arc<dyn Fn(PostRequest) -> bool + Send + Sync>);

impl Poster {
    pub fn new<F>(f: F) -> Self
    where
        F: Fn(PostRequest) -> bool + Send + Sync + 'static,
    {
        Poster(Arc::new(f))
    }

    pub fn send(&self, request: PostRequest) -> bool {
        (self.0)(request)
    }
}

impl fmt::Debug for Poster {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Poster")
    }
}

/// Per-call context handed to a component.
#[derive(Debug, Clone)]
pub struct ExecContext {
    pub session_id: Arc<str>,
    pub component_id: Arc<str>,
    pub poster: Option<Poster>,
}

impl ExecContext {
    pub fn new(session_id: &str) -> Self {
        ExecContext { session_id: Arc::from(session_id), component_id: Arc::from(""), poster: None }
    }

    pub fn with_poster(mut self, poster: Poster) -> Self {
        self.poster = Some(poster);
        self
    }

    /// Asks the orchestrator to post on this component's behalf. Returns
    /// false when there is no orchestrator to ask.
    pub fn post(&self, key: &str, value: Value) -> bool {
        match &self.poster {
            Some(poster) => poster.send(PostRequest {
                component_id: self.component_id.to_string(),
                key: key.to_owned(),
                value,
            }),
            None => false,
        }
    }
}

pub enum Execution {
    Ready(Result<Value, ExecError>),
    /// Completes later without holding up the component's inbox.
    Deferred(BoxFuture<'static, Result<Value, ExecError>>),
}

impl From<Result<Value, ExecError>> for Execution {
    fn from(result: Result<Value, ExecError>) -> Self {
        Execution::Ready(result)
    }
}

pub trait Component: Send + 'static {
    fn start(&mut self) {}

    fn execute(&mut self, input: Value, ctx: &ExecContext) -> Execution;

    fn on_event(&mut self, _event: &BlackboardEvent, _ctx: &ExecContext) {}

    fn shutdown(&mut self) {}
}

impl<F> Component for F
where
    F: FnMut(Value) -> Result<Value, ExecError> + Send + 'static,
{
    fn execute(&mut self, input: Value, _ctx: &ExecContext) -> Execution {
        Execution::Ready(self(input))
    }
}
