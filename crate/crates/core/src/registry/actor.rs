use std::collections::{BTreeSet, HashMap, HashSet};
use std::sync::Arc;
use std::time::Duration;

use tokio::sync::{mpsc, oneshot};

use super::external::ExternalComponent;
use super::instance::{spawn_instance, ComponentRef, InstanceId, InstanceSpec};
use super::locator::{Resource, ResourceLocator};
use super::{Binding, Component, ComponentDescriptor, FactoryContext, RegistryError, StateType};

pub const DEFAULT_REMOTE_TIMEOUT: Duration = Duration::from_secs(30);

/// Summary of a registered component, safe to hand out.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComponentInfo {
    pub component_id: String,
    pub state_type: StateType,
    pub subscriptions: BTreeSet<String>,
    pub output_key: String,
    pub remote: bool,
}

impl From<&ComponentDescriptor> for ComponentInfo {
    fn from(d: &ComponentDescriptor) -> Self {
        ComponentInfo {
            component_id: d.component_id.clone(),
            state_type: d.state_type,
            subscriptions: d.subscriptions.clone(),
            output_key: d.output_key.clone(),
            remote: d.is_remote(),
        }
    }
}

type Reply<T> = oneshot::Sender<T>;

enum Cmd {
    Register(ComponentDescriptor, Reply<Result<(), RegistryError>>),
    Resolve { component_id: String, session_id: String, reply: Reply<Result<ComponentRef, RegistryError>> },
    OpenSession(String),
    ReleaseSession(String, Reply<usize>),
    Provide(String, Resource, Reply<Option<Resource>>),
    Locate(String, Reply<Option<Resource>>),
    List(Reply<Vec<ComponentInfo>>),
    InstanceCount(Reply<usize>),
    Shutdown(Reply<()>),
}

/// Owner of the component tables. All access goes through [`RegistryHandle`].
pub struct Registry {
    remote_timeout: Duration,
    order: Vec<String>,
    descriptors: HashMap<String, ComponentDescriptor>,
    sessions: HashSet<String>,
    locator: ResourceLocator,
    singletons: HashMap<String, ComponentRef>,
    per_session: HashMap<(String, String), ComponentRef>,
    pools: HashMap<String, (Vec<ComponentRef>, usize)>,
    next_instance: u64,
}

#[derive(Debug, Clone)]
pub struct RegistryHandle {
    tx: mpsc::UnboundedSender<Cmd>,
}

impl Registry {
    pub fn spawn() -> RegistryHandle {
        Self::spawn_with_timeout(DEFAULT_REMOTE_TIMEOUT)
    }

    /// `remote_timeout` bounds every REMOTE execute.
    pub fn spawn_with_timeout(remote_timeout: Duration) -> RegistryHandle {
        let (tx, rx) = mpsc::unbounded_channel();
        let registry = Registry {
            remote_timeout,
            order: Vec::new(),
            descriptors: HashMap::new(),
            sessions: HashSet::new(),
            locator: ResourceLocator::new(),
            singletons: HashMap::new(),
            per_session: HashMap::new(),
            pools: HashMap::new(),
            next_instance: 1,
        };
        tokio::spawn(registry.run(rx));
        RegistryHandle { tx }
    }

    async fn run(mut self, mut rx: mpsc::UnboundedReceiver<Cmd>) {
        while let Some(cmd) = rx.recv().await {
            match cmd {
                Cmd::Register(desc, reply) => {
                    let _ = reply.send(self.register(desc));
                }
                Cmd::Resolve { component_id, session_id, reply } => {
                    let _ = reply.send(self.resolve(&component_id, &session_id));
                }
                Cmd::OpenSession(session) => {
                    self.sessions.insert(session);
                }
                Cmd::ReleaseSession(session, reply) => {
                    let _ = reply.send(self.release_session(&session));
                }
                Cmd::Provide(name, resource, reply) => {
                    let _ = reply.send(self.locator.provide(&name, resource));
                }
                Cmd::Locate(name, reply) => {
                    let _ = reply.send(self.locator.get(&name).cloned());
                }
                Cmd::List(reply) => {
                    let infos = self.order.iter().map(|id| ComponentInfo::from(&self.descriptors[id])).collect();
                    let _ = reply.send(infos);
                }
                Cmd::InstanceCount(reply) => {
                    let pooled: usize = self.pools.values().map(|(members, _)| members.len()).sum();
                    let _ = reply.send(self.singletons.len() + self.per_session.len() + pooled);
                }
                Cmd::Shutdown(reply) => {
                    self.shutdown_all();
                    let _ = reply.send(());
                    return;
                }
            }
        }
        self.shutdown_all();
    }

    fn register(&mut self, desc: ComponentDescriptor) -> Result<(), RegistryError> {
        if desc.component_id.is_empty() {
            return Err(RegistryError::InvalidDescriptor("empty component id".into()));
        }
        if desc.state_type == StateType::Pool(0) {
            return Err(RegistryError::InvalidDescriptor(format!("pool `{}` has size 0", desc.component_id)));
        }
        if desc.output_key.is_empty() {
            return Err(RegistryError::InvalidDescriptor(format!("`{}` has an empty output key", desc.component_id)));
        }
        if self.descriptors.contains_key(&desc.component_id) {
            return Err(RegistryError::DuplicateComponentId(desc.component_id));
        }
        self.order.push(desc.component_id.clone());
        self.descriptors.insert(desc.component_id.clone(), desc);
        Ok(())
    }

    fn resolve(&mut self, component_id: &str, session_id: &str) -> Result<ComponentRef, RegistryError> {
        let desc = self
            .descriptors
            .get(component_id)
            .ok_or_else(|| RegistryError::UnknownComponent(component_id.to_owned()))?;
        match desc.state_type {
            StateType::Stateless => {
                if let Some(existing) = self.singletons.get(component_id) {
                    return Ok(existing.clone());
                }
                let instance = self.instantiate(component_id, None, 0);
                self.singletons.insert(component_id.to_owned(), instance.clone());
                Ok(instance)
            }
            StateType::Stateful => {
                if !self.sessions.contains(session_id) {
                    return Err(RegistryError::UnknownSession(session_id.to_owned()));
                }
                let key = (component_id.to_owned(), session_id.to_owned());
                if let Some(existing) = self.per_session.get(&key) {
                    return Ok(existing.clone());
                }
                let instance = self.instantiate(component_id, Some(session_id), 0);
                self.per_session.insert(key, instance.clone());
                Ok(instance)
            }
            StateType::Pool(size) => {
                if !self.pools.contains_key(component_id) {
                    let members = (0..size).map(|m| self.instantiate(component_id, None, m)).collect();
                    self.pools.insert(component_id.to_owned(), (members, 0));
                }
                let (members, next) = self.pools.get_mut(component_id).expect("pool just ensured");
                let chosen = members[*next].clone();
                *next = (*next + 1) % members.len();
                Ok(chosen)
            }
        }
    }

    fn instantiate(&mut self, component_id: &str, session_id: Option<&str>, member: usize) -> ComponentRef {
        let desc = &self.descriptors[component_id];
        let component: Box<dyn Component> = match &desc.binding {
            Binding::Local(factory) => factory(&FactoryContext {
                component_id,
                session_id,
                member,
                locator: &self.locator,
            }),
            Binding::Remote { service, endpoint } => {
                Box::new(ExternalComponent::new(*service, endpoint, self.remote_timeout))
            }
        };
        let spec = InstanceSpec {
            component_id: Arc::from(component_id),
            instance_id: InstanceId(self.next_instance),
            member,
            output_key: Arc::from(desc.output_key.as_str()),
            output_field: desc.output_field.as_deref().map(Arc::from),
            remote: desc.is_remote(),
            pooled: matches!(desc.state_type, StateType::Pool(_)),
        };
        self.next_instance += 1;
        spawn_instance(spec, component)
    }

    fn release_session(&mut self, session_id: &str) -> usize {
        self.sessions.remove(session_id);
        let keys: Vec<_> = self.per_session.keys().filter(|(_, s)| s == session_id).cloned().collect();
        for key in &keys {
            if let Some(instance) = self.per_session.remove(key) {
                instance.shutdown();
            }
        }
        keys.len()
    }

    fn shutdown_all(&mut self) {
        for instance in self.singletons.values().chain(self.per_session.values()) {
            instance.shutdown();
        }
        for (members, _) in self.pools.values() {
            members.iter().for_each(ComponentRef::shutdown);
        }
        self.singletons.clear();
        self.per_session.clear();
        self.pools.clear();
    }
}

impl RegistryHandle {
    async fn ask<T>(&self, make: impl FnOnce(Reply<T>) -> Cmd) -> Result<T, RegistryError> {
        let (reply, rx) = oneshot::channel();
        self.tx.send(make(reply)).map_err(|_| RegistryError::Closed)?;
        rx.await.map_err(|_| RegistryError::Closed)
    }

    pub async fn register(&self, descriptor: ComponentDescriptor) -> Result<(), RegistryError> {
        self.ask(|r| Cmd::Register(descriptor, r)).await?
    }

    /// Returns the instance mandated by the component's state type, starting
    /// it on first use. `session_id` is ignored for non-stateful components.
    pub async fn resolve(&self, component_id: &str, session_id: &str) -> Result<ComponentRef, RegistryError> {
        self.ask(|reply| Cmd::Resolve {
            component_id: component_id.to_owned(),
            session_id: session_id.to_owned(),
            reply,
        })
        .await?
    }

    pub fn open_session(&self, session_id: &str) {
        let _ = self.tx.send(Cmd::OpenSession(session_id.to_owned()));
    }

    /// Shuts down the session's stateful instances; returns how many.
    pub async fn release_session(&self, session_id: &str) -> usize {
        self.ask(|r| Cmd::ReleaseSession(session_id.to_owned(), r)).await.unwrap_or(0)
    }

    pub async fn provide(&self, name: &str, resource: Resource) -> Option<Resource> {
        self.ask(|r| Cmd::Provide(name.to_owned(), resource, r)).await.ok().flatten()
    }

    pub async fn locate(&self, name: &str) -> Option<Resource> {
        self.ask(|r| Cmd::Locate(name.to_owned(), r)).await.ok().flatten()
    }

    /// Registered components in registration order.
    pub async fn list(&self) -> Vec<ComponentInfo> {
        self.ask(Cmd::List).await.unwrap_or_default()
    }

    pub async fn describe(&self, component_id: &str) -> Option<ComponentInfo> {
        self.list().await.into_iter().find(|c| c.component_id == component_id)
    }

    pub async fn instance_count(&self) -> usize {
        self.ask(Cmd::InstanceCount).await.unwrap_or(0)
    }

    pub async fn shutdown(&self) {
        let _ = self.ask(Cmd::Shutdown).await;
    }

    pub fn is_closed(&self) -> bool {
        self.tx.is_closed()
    }
}
