//! The conversational pipeline demo: mock services, the shipped rule files
//! and scripted scenarios.

pub mod mocks;
pub mod scenarios;

use std::time::Duration;

use futures::FutureExt;
use serde_json::json;
use tokio::net::TcpListener;

use crate::client::ClientError;
use crate::config::ServerConfig;
use crate::orchestrator::{ControlProgram, OrchestratorConfig, RuleError};
use crate::registry::{
    Component, ComponentDescriptor, ExecContext, ExecError, Execution, Registry, RegistryError, RegistryHandle,
    Resource, StateType,
};
use crate::server::Server;
use crate::session::{xsession_descriptor, SessionManagerConfig};
use crate::value::Value;
use crate::wire::ServiceType;
use crate::worker::{start_worker, WorkerHandle, WorkerOptions};
use mocks::{decide_grocery, MockBehavior, MockTables};

pub const PIPELINE_RULES: &str = include_str!("../../scenarios/pipeline.rules");
pub const GROCERY_RULES: &str = include_str!("../../scenarios/grocery.rules");
pub const MOCK_TABLES: &str = include_str!("../../scenarios/mocks.conf");

/// The seven conversational stages, in pipeline order.
pub const PIPELINE: [(&str, ServiceType); 7] = [
    ("ASR", ServiceType::Asr),
    ("NLU", ServiceType::Nlu),
    ("DM", ServiceType::Dm),
    ("NLG", ServiceType::Nlg),
    ("TTS", ServiceType::Tts),
    ("QA", ServiceType::Qa),
    ("CCS", ServiceType::Ccs),
];

/// Component id, mock table and service of every table-driven component.
pub const MOCK_COMPONENTS: [(&str, &str, ServiceType); 9] = [
    ("ASR", "ASR", ServiceType::Asr),
    ("NLU", "NLU", ServiceType::Nlu),
    ("DM", "DM", ServiceType::Dm),
    ("NLG", "NLG", ServiceType::Nlg),
    ("TTS", "TTS", ServiceType::Tts),
    ("QA", "QA", ServiceType::Qa),
    ("CCS", "CCS", ServiceType::Ccs),
    ("location", "LOCATION", ServiceType::Location),
    ("WEATHER", "WEATHER", ServiceType::Weather),
];

pub const SHOPPING_LISTS: &str = "shopping-lists";

/// Where the mock services run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Local,
    /// Behind the broker, served by worker connections.
    Remote,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Local => "local",
            Mode::Remote => "remote",
        }
    }
}

pub fn shipped_tables() -> MockTables {
    MockTables::parse(MOCK_TABLES).expect("shipped mock tables parse")
}

pub fn rules_by_name(name: &str) -> Option<&'static str> {
    match name {
        "pipeline" => Some(PIPELINE_RULES),
        "grocery" => Some(GROCERY_RULES),
        _ => None,
    }
}

struct MockComponent(MockBehavior);

impl Component for MockComponent {
    fn execute(&mut self, input: Value, _ctx: &ExecContext) -> Execution {
        let out = self.0.respond(&input);
        if self.0.delay_us == 0 {
            Execution::Ready(Ok(out))
        } else {
            let delay = self.0.delay();
            Execution::Deferred(
                async move {
                    tokio::time::sleep(delay).await;
                    Ok(out)
                }
                .boxed(),
            )
        }
    }
}

/// Serves the shopping list of the user named in the input from the
/// `shopping-lists` store, counting what it served for this session.
struct ShoppingList {
    lists: Value,
    served: u64,
}

impl Component for ShoppingList {
    fn execute(&mut self, input: Value, _ctx: &ExecContext) -> Execution {
        let Some(user) = input.get("user").and_then(Value::as_str) else {
            return Execution::Ready(Err(ExecError::ComponentFailed("missing user".into())));
        };
        self.served += 1;
        let items = self.lists.get(user).cloned().unwrap_or_else(|| json!([]));
        Execution::Ready(Ok(json!({"user": user, "items": items, "served": self.served})))
    }
}

fn output_of(component_id: &str) -> (&'static str, Option<&'static str>) {
    match component_id {
        "NLU" => ("NLU_Event", Some("user_intent")),
        "location" => ("LOCATION_Event", None),
        _ => ("", None),
    }
}

/// Descriptors for the demo components. In remote mode the table-driven
/// ones are bound to `endpoint`.
pub fn descriptors(tables: &MockTables, mode: Mode, endpoint: &str) -> Vec<ComponentDescriptor> {
    let mut out = Vec::new();
    for (id, table, service) in MOCK_COMPONENTS {
        let Some(behavior) = tables.get(table).cloned() else { continue };
        let desc = match mode {
            Mode::Local => ComponentDescriptor::local(id, StateType::Stateless, move |_| {
                Box::new(MockComponent(behavior.clone()))
            }),
            Mode::Remote => ComponentDescriptor::remote(id, StateType::Stateless, service, endpoint),
        };
        let desc = match output_of(id) {
            ("", _) => desc,
            (key, field) => desc.output(key, field),
        };
        out.push(desc);
    }
    out.push(
        ComponentDescriptor::local("shopping-list", StateType::Stateful, |ctx| {
            let lists = ctx.locator.store(SHOPPING_LISTS).cloned().unwrap_or(Value::Null);
            Box::new(ShoppingList { lists, served: 0 })
        })
        .output("Shopping_List", None),
    );
    out.push(
        ComponentDescriptor::local("grocery", StateType::Stateless, |_| {
            Box::new(|input: Value| decide_grocery(&input).map_err(ExecError::ComponentFailed))
        })
        .output("Grocery_Decision", None),
    );
    out.push(xsession_descriptor());
    out
}

pub async fn register_demo(
    registry: &RegistryHandle,
    tables: &MockTables,
    mode: Mode,
    endpoint: &str,
) -> Result<(), RegistryError> {
    for (name, store) in &tables.stores {
        registry.provide(name, Resource::Store(store.clone())).await;
    }
    for desc in descriptors(tables, mode, endpoint) {
        registry.register(desc).await?;
    }
    Ok(())
}

/// Starts `per_service` workers for every table-driven component.
pub async fn start_mock_workers(
    endpoint: &str,
    tables: &MockTables,
    per_service: usize,
    heartbeat: Duration,
) -> Result<Vec<WorkerHandle>, ClientError> {
    let mut workers = Vec::new();
    for (_, table, service) in MOCK_COMPONENTS {
        let Some(behavior) = tables.get(table).cloned() else { continue };
        let options = WorkerOptions { delay: behavior.delay(), heartbeat, ..Default::default() };
        let handler = crate::worker::handler(move |input| Ok(behavior.respond(&input)));
        for _ in 0..per_service {
            workers.push(start_worker(endpoint, service, handler.clone(), options.clone()).await?);
        }
    }
    Ok(workers)
}

#[derive(Debug, thiserror::Error)]
pub enum DemoError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Rules(#[from] RuleError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("workers did not register in time")]
    WorkersNotReady,
}

/// A running demo server plus, in remote mode, its workers.
pub struct DemoServer {
    pub server: Server,
    pub workers: Vec<WorkerHandle>,
    pub mode: Mode,
}

impl DemoServer {
    /// Binds `config.bind_addr()`, registers the demo components and loads
    /// `rules` into every session.
    pub async fn start(mode: Mode, rules: &str, config: &ServerConfig) -> Result<DemoServer, DemoError> {
        Self::start_with(mode, ControlProgram::rules(rules)?, config, &shipped_tables(), 1).await
    }

    pub async fn start_with(
        mode: Mode,
        program: ControlProgram,
        config: &ServerConfig,
        tables: &MockTables,
        workers_per_service: usize,
    ) -> Result<DemoServer, DemoError> {
        let listener = TcpListener::bind(config.bind_addr()).await?;
        let endpoint = format!("tcp://{}", listener.local_addr()?);
        let registry = Registry::spawn_with_timeout(Duration::from_millis(config.request_timeout_ms));
        register_demo(&registry, tables, mode, &endpoint).await?;
        let sessions = SessionManagerConfig {
            orchestrator: OrchestratorConfig { program, ..Default::default() },
            ..Default::default()
        };
        let server = Server::on_listener(listener, config, registry, sessions)?;
        let mut workers = Vec::new();
        if mode == Mode::Remote {
            let heartbeat = Duration::from_millis(config.heartbeat_ms);
            workers = start_mock_workers(&endpoint, tables, workers_per_service, heartbeat).await?;
            let expected = workers.len();
            let mut ready = false;
            for _ in 0..500 {
                let snap = server.snapshot().await;
                if snap.workers.values().sum::<usize>() >= expected {
                    ready = true;
                    break;
                }
                tokio::time::sleep(Duration::from_millis(5)).await;
            }
            if !ready {
                return Err(DemoError::WorkersNotReady);
            }
        }
        Ok(DemoServer { server, workers, mode })
    }

    pub fn endpoint(&self) -> String {
        self.server.endpoint()
    }

    pub async fn shutdown(&self) {
        for w in &self.workers {
            w.kill();
        }
        self.server.shutdown().await;
    }
}
