use std::collections::HashMap;
use std::sync::Arc;
use std::time::Instant;

use futures::future::BoxFuture;
use futures::stream::{FuturesUnordered, StreamExt};
use tokio::sync::{mpsc, oneshot};

use super::{
    ControlProgram, Directive, EvaluationFailure, FiringRecord, OrchestratorCore, OrchestratorStats,
    DEFAULT_FIRING_CAPACITY, ERROR_KEY, ORCHESTRATOR_SOURCE,
};
use crate::blackboard::{channel_sink, BlackboardEvent, BlackboardHandle};
use crate::clock;
use crate::registry::{ComponentRef, ExecContext, ExecError, Poster, PostRequest, RegistryHandle};
use crate::value::{json, Value};

#[derive(Debug, Clone)]
pub struct OrchestratorConfig {
    pub program: ControlProgram,
    pub firing_capacity: usize,
}

impl Default for OrchestratorConfig {
    fn default() -> Self {
        OrchestratorConfig { program: ControlProgram::Idle, firing_capacity: DEFAULT_FIRING_CAPACITY }
    }
}

enum Msg {
    Event(BlackboardEvent),
    Post(PostRequest),
    SetProgram(ControlProgram),
    Firings(oneshot::Sender<Vec<FiringRecord>>),
    Failures(oneshot::Sender<Vec<EvaluationFailure>>),
    Stats(oneshot::Sender<OrchestratorStats>),
    TurnOverheads(oneshot::Sender<Vec<u32>>),
    Close,
}

type InFlight = BoxFuture<'static, (String, Option<ComponentRef>, Result<Value, ExecError>)>;

/// Spawns a session's orchestrator task.
pub struct Orchestrator;

#[derive(Debug, Clone)]
pub struct OrchestratorHandle {
    session_id: Arc<str>,
    tx: mpsc::UnboundedSender<Msg>,
}

impl Orchestrator {
    /// Attaches to `blackboard` as its omniscient observer and starts
    /// running `config.program`.
    pub fn spawn(
        session_id: &str,
        blackboard: BlackboardHandle,
        registry: RegistryHandle,
        config: OrchestratorConfig,
    ) -> OrchestratorHandle {
        let (tx, rx) = mpsc::unbounded_channel();
        let _ = blackboard.set_orchestrator(channel_sink(tx.clone(), Msg::Event));
        let core = OrchestratorCore::new(session_id, config.program, config.firing_capacity);
        let poster_tx = tx.clone();
        let poster = Poster::new(move |req| poster_tx.send(Msg::Post(req)).is_ok());
        let runner = Runner {
            core,
            session_id: Arc::from(session_id),
            blackboard,
            registry,
            poster,
            cache: HashMap::new(),
            in_flight: FuturesUnordered::new(),
        };
        tokio::spawn(runner.run(rx));
        OrchestratorHandle { session_id: Arc::from(session_id), tx }
    }
}

struct Runner {
    core: OrchestratorCore,
    session_id: Arc<str>,
    blackboard: BlackboardHandle,
    registry: RegistryHandle,
    poster: Poster,
    cache: HashMap<String, ComponentRef>,
    in_flight: FuturesUnordered<InFlight>,
}

impl Runner {
    async fn run(mut self, mut rx: mpsc::UnboundedReceiver<Msg>) {
        loop {
            tokio::select! {
                // Messages first: a component's own posts are queued before
                // its completion and must be arbitrated while it is active.
                biased;
                msg = rx.recv() => match msg {
                    None | Some(Msg::Close) => break,
                    Some(msg) => self.handle(msg),
                },
                Some((component, instance, result)) = self.in_flight.next(), if !self.in_flight.is_empty() => {
                    self.complete(component, instance, result);
                }
            }
        }
    }

    fn handle(&mut self, msg: Msg) {
        match msg {
            Msg::Event(event) => {
                let started = Instant::now();
                let before = self.core.stats().firings;
                let directives = self.core.on_event(&event, clock::now_us());
                self.dispatch(directives);
                let new_records = (self.core.stats().firings - before) as usize;
                self.core.add_overhead(new_records, started.elapsed().as_micros() as u64);
            }
            Msg::Post(req) => {
                if self.core.arbitrate(&req.component_id, &req.key) {
                    let _ = self.blackboard.post_nowait(&req.key, req.value, &req.component_id);
                } else {
                    log::debug!("session {}: denied post of {} by {}", self.session_id, req.key, req.component_id);
                }
            }
            Msg::SetProgram(program) => self.core.set_program(program),
            Msg::Firings(reply) => {
                let _ = reply.send(self.core.firings().cloned().collect());
            }
            Msg::Failures(reply) => {
                let _ = reply.send(self.core.failures().cloned().collect());
            }
            Msg::Stats(reply) => {
                let _ = reply.send(self.core.stats());
            }
            Msg::TurnOverheads(reply) => {
                let _ = reply.send(self.core.turn_overheads());
            }
            Msg::Close => {}
        }
    }

    fn dispatch(&mut self, directives: Vec<Directive>) {
        for directive in directives {
            match directive {
                Directive::Post { key, value } => {
                    let _ = self.blackboard.post_nowait(&key, value, ORCHESTRATOR_SOURCE);
                }
                Directive::Execute { component, input } => self.execute(component, input),
            }
        }
    }

    fn execute(&mut self, component: String, input: Value) {
        let ctx = ExecContext::new(&self.session_id).with_poster(self.poster.clone());
        let fut: InFlight = match self.cache.get(&component) {
            Some(instance) => {
                let instance = instance.clone();
                let completion = instance.execute(input, ctx);
                Box::pin(async move { (component, Some(instance), completion.await) })
            }
            None => {
                let registry = self.registry.clone();
                let session = self.session_id.clone();
                Box::pin(async move {
                    match registry.resolve(&component, &session).await {
                        Ok(instance) => {
                            let result = instance.execute(input, ctx).await;
                            (component, Some(instance), result)
                        }
                        Err(e) => (component, None, Err(ExecError::Registry(e))),
                    }
                })
            }
        };
        self.in_flight.push(fut);
    }

    fn complete(&mut self, component: String, instance: Option<ComponentRef>, result: Result<Value, ExecError>) {
        let started = Instant::now();
        self.core.finish_execution(&component, result.is_err());
        if let Some(instance) = &instance {
            if instance.pooled || !instance.is_alive() {
                self.cache.remove(&component);
            } else {
                self.cache.entry(component.clone()).or_insert_with(|| instance.clone());
            }
        }
        match (result, instance) {
            (Ok(output), Some(instance)) => {
                let posted = instance.shape_output(output);
                let _ = self.blackboard.post_nowait(&instance.output_key, posted.clone(), &component);
                let before = self.core.stats().firings;
                let directives = self.core.on_completion(&component, &posted, clock::now_us());
                self.dispatch(directives);
                let new_records = (self.core.stats().firings - before) as usize;
                self.core.add_overhead(new_records, started.elapsed().as_micros() as u64);
            }
            (Ok(_), None) => {}
            (Err(error), _) => {
                log::debug!("session {}: {component} failed: {error}", self.session_id);
                let report = json!({"component": component, "error": error.to_string()});
                let _ = self.blackboard.post_nowait(ERROR_KEY, report, ORCHESTRATOR_SOURCE);
            }
        }
    }
}

impl OrchestratorHandle {
    pub fn session_id(&self) -> &str {
        &self.session_id
    }

    async fn ask<T>(&self, make: impl FnOnce(oneshot::Sender<T>) -> Msg) -> Option<T> {
        let (reply, rx) = oneshot::channel();
        self.tx.send(make(reply)).ok()?;
        rx.await.ok()
    }

    /// Replaces the running control program.
    pub fn set_program(&self, program: ControlProgram) -> bool {
        self.tx.send(Msg::SetProgram(program)).is_ok()
    }

    pub async fn firings(&self) -> Vec<FiringRecord> {
        self.ask(Msg::Firings).await.unwrap_or_default()
    }

    /// Rule families in firing order, e.g. `["01", "02", "03"]`.
    pub async fn firing_sequence(&self) -> Vec<String> {
        self.firings().await.iter().map(|r| r.family().to_owned()).collect()
    }

    pub async fn failures(&self) -> Vec<EvaluationFailure> {
        self.ask(Msg::Failures).await.unwrap_or_default()
    }

    pub async fn stats(&self) -> OrchestratorStats {
        self.ask(Msg::Stats).await.unwrap_or_default()
    }

    pub async fn turn_overheads(&self) -> Vec<u32> {
        self.ask(Msg::TurnOverheads).await.unwrap_or_default()
    }

    /// Poster that routes component posts through this orchestrator's
    /// arbitration, for components driven from outside a firing.
    pub fn poster(&self) -> Poster {
        let tx = self.tx.clone();
        Poster::new(move |req| tx.send(Msg::Post(req)).is_ok())
    }

    pub fn close(&self) {
        let _ = self.tx.send(Msg::Close);
    }

    pub fn is_closed(&self) -> bool {
        self.tx.is_closed()
    }
}

#[cfg(test)]
mod tests {
    use std::time::Duration;

    use super::*;
    use crate::blackboard::{Blackboard, EXTERNAL_SOURCE};
    use crate::registry::{Component, ComponentDescriptor, Execution, Registry, StateType};

    fn echo(id: &str) -> ComponentDescriptor {
        ComponentDescriptor::local(id, StateType::Stateless, |_| {
            Box::new(|input: Value| -> Result<Value, ExecError> { Ok(json!({ "echo": input })) })
        })
    }

    struct Chatty;

    impl Component for Chatty {
        fn execute(&mut self, _input: Value, ctx: &ExecContext) -> Execution {
            ctx.post("Side_Event", json!("during"));
            Execution::Ready(Ok(json!("done")))
        }
    }

    async fn wait_for_key(bb: &BlackboardHandle, key: &str) -> Value {
        for _ in 0..200 {
            if let Ok(Some(v)) = bb.get(key).await {
                return v;
            }
            tokio::time::sleep(Duration::from_millis(5)).await;
        }
        panic!("{key} never appeared");
    }

    #[tokio::test]
    async fn rules_drive_components_and_outputs_are_posted() {
        let registry = Registry::spawn();
        registry.register(echo("ASR")).await.unwrap();
        let bb = Blackboard::spawn("s1", 64);
        let program = ControlProgram::rules("RULE 01\nIF event == MIC_Event\nTHEN EXECUTE ASR WITH MIC_Event.bytes\n").unwrap();
        let orch = Orchestrator::spawn("s1", bb.clone(), registry, OrchestratorConfig { program, ..Default::default() });
        bb.post("MIC_Event", json!({"bytes": "hi"}), EXTERNAL_SOURCE).await.unwrap();
        assert_eq!(wait_for_key(&bb, "ASR_Event").await, json!({"echo": "hi"}));
        assert_eq!(bb.entry("ASR_Event").await.unwrap().unwrap().source, "ASR");
        assert_eq!(orch.firing_sequence().await, ["01"]);
    }

    #[tokio::test]
    async fn failures_become_error_events() {
        let registry = Registry::spawn();
        let bb = Blackboard::spawn("s1", 64);
        let program = ControlProgram::rules("RULE 01\nIF event == Go\nTHEN EXECUTE Missing\n").unwrap();
        Orchestrator::spawn("s1", bb.clone(), registry, OrchestratorConfig { program, ..Default::default() });
        bb.post("Go", json!(1), EXTERNAL_SOURCE).await.unwrap();
        let report = wait_for_key(&bb, ERROR_KEY).await;
        assert_eq!(report["component"], json!("Missing"));
    }

    #[tokio::test]
    async fn active_components_may_post_idle_ones_may_not() {
        let registry = Registry::spawn();
        registry
            .register(ComponentDescriptor::local("CHATTY", StateType::Stateless, |_| Box::new(Chatty)))
            .await
            .unwrap();
        let bb = Blackboard::spawn("s1", 64);
        let program = ControlProgram::rules("RULE 01\nIF event == Go\nTHEN EXECUTE CHATTY\n").unwrap();
        let orch = Orchestrator::spawn("s1", bb.clone(), registry, OrchestratorConfig { program, ..Default::default() });
        bb.post("Go", json!(1), EXTERNAL_SOURCE).await.unwrap();
        assert_eq!(wait_for_key(&bb, "Side_Event").await, json!("during"));
        wait_for_key(&bb, "CHATTY_Event").await;

        let poster = orch.poster();
        poster.send(PostRequest { component_id: "CHATTY".into(), key: "Late".into(), value: json!(1) });
        let stats = orch.stats().await;
        assert_eq!((stats.posts_allowed, stats.posts_denied), (1, 1));
        assert_eq!(bb.get("Late").await.unwrap(), None);
    }
}
