//! Per-session process orchestration. [`OrchestratorCore`] is the pure
//! decision logic; [`Orchestrator`] runs it as the session's own task.

mod actor;
pub mod rules;
pub mod workflow;

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::sync::Arc;

use crate::blackboard::{BlackboardEvent, EventKind};
use crate::value::{json, Value};

pub use actor::{Orchestrator, OrchestratorConfig, OrchestratorHandle};
pub use rules::{family_of, RuleError, RuleSet};
pub use workflow::{WorkflowError, WorkflowGraph};

pub const ORCHESTRATOR_SOURCE: &str = "orchestrator";
pub const ERROR_KEY: &str = "Error_Event";

#[derive(Debug, Clone, Default, PartialEq)]
pub enum ControlProgram {
    #[default]
    Idle,
    Rules(RuleSet),
    Workflow(WorkflowGraph),
}

impl ControlProgram {
    pub fn rules(text: &str) -> Result<Self, RuleError> {
        RuleSet::parse(text).map(ControlProgram::Rules)
    }

    pub fn workflow(text: &str) -> Result<Self, WorkflowError> {
        WorkflowGraph::parse(text).map(ControlProgram::Workflow)
    }

    fn allow(&self) -> Option<&BTreeSet<String>> {
        match self {
            ControlProgram::Idle => None,
            ControlProgram::Rules(r) => Some(&r.allow),
            ControlProgram::Workflow(w) => Some(&w.allow),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FiringRecord {
    pub session_id: Arc<str>,
    pub trigger_seq: u64,
    pub trigger_key: String,
    /// Rule name, or `ENTRY:<key>-><node>` / `<from>-><to>` for workflows.
    pub name: String,
    pub actions: Vec<String>,
    pub timestamp_us: u64,
    /// Time spent deciding and dispatching, excluding component execution.
    pub overhead_us: u32,
}

impl FiringRecord {
    pub fn family(&self) -> &str {
        rules::family_of(&self.name)
    }

    pub fn to_value(&self) -> Value {
        json!({
            "seq": self.trigger_seq,
            "trigger": self.trigger_key,
            "rule": self.name,
            "actions": self.actions,
            "overhead_us": self.overhead_us,
        })
    }
}

/// A rule or guard that could not be evaluated.
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationFailure {
    pub trigger_seq: u64,
    pub name: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Directive {
    Execute { component: String, input: Value },
    Post { key: String, value: Value },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OrchestratorStats {
    pub events_seen: u64,
    pub firings: u64,
    pub evaluation_failures: u64,
    pub executions_started: u64,
    pub executions_failed: u64,
    pub posts_allowed: u64,
    pub posts_denied: u64,
    pub in_flight: u64,
}

struct Scope<'a> {
    event: Option<&'a BlackboardEvent>,
    replica: &'a HashMap<String, Value>,
    output: Option<&'a Value>,
}

impl rules::Scope for Scope<'_> {
    fn event(&self) -> Option<&BlackboardEvent> {
        self.event
    }

    fn lookup(&self, root: &str) -> Option<&Value> {
        match root {
            "event" => self.event.map(|e| &e.entry.value),
            "output" => self.output,
            key => self.replica.get(key),
        }
    }
}

pub const DEFAULT_FIRING_CAPACITY: usize = 4096;
const TURN_SAMPLE_CAPACITY: usize = 1 << 20;

pub struct OrchestratorCore {
    session_id: Arc<str>,
    program: ControlProgram,
    replica: HashMap<String, Value>,
    active: HashMap<String, u32>,
    firings: VecDeque<FiringRecord>,
    firing_capacity: usize,
    failures: VecDeque<EvaluationFailure>,
    last_seq: u64,
    stats: OrchestratorStats,
    turn_open: bool,
    turn_overhead_us: u64,
    turn_samples: Vec<u32>,
}

impl OrchestratorCore {
    pub fn new(session_id: &str, program: ControlProgram, firing_capacity: usize) -> Self {
        OrchestratorCore {
            session_id: Arc::from(session_id),
            program,
            replica: HashMap::new(),
            active: HashMap::new(),
            firings: VecDeque::new(),
            firing_capacity: firing_capacity.max(1),
            failures: VecDeque::new(),
            last_seq: 0,
            stats: OrchestratorStats::default(),
            turn_open: false,
            turn_overhead_us: 0,
            turn_samples: Vec::new(),
        }
    }

    pub fn set_program(&mut self, program: ControlProgram) {
        self.program = program;
    }

    pub fn program(&self) -> &ControlProgram {
        &self.program
    }

    /// Evaluates the control program against one blackboard event. Each
    /// event is evaluated once; rules do not re-fire on their own posts
    /// until those arrive as new events.
    pub fn on_event(&mut self, event: &BlackboardEvent, now_us: u64) -> Vec<Directive> {
        self.stats.events_seen += 1;
        self.last_seq = event.seq();
        match event.kind {
            EventKind::Posted => {
                self.replica.insert(event.entry.key.clone(), event.entry.value.clone());
            }
            EventKind::Removed => {
                self.replica.remove(&event.entry.key);
            }
        }
        if event.is_external() {
            self.close_turn();
            self.turn_open = true;
        }

        let mut directives = Vec::new();
        let mut records = Vec::new();
        let mut failures = Vec::new();
        let scope = Scope { event: Some(event), replica: &self.replica, output: None };
        match &self.program {
            ControlProgram::Idle => {}
            ControlProgram::Rules(set) => {
                for rule in &set.rules {
                    match rules::eval_all(&rule.condition, &scope) {
                        Ok(true) => {
                            for action in &rule.actions {
                                directives.push(match action {
                                    rules::Action::Execute { component, arg } => {
                                        Directive::Execute { component: component.clone(), input: arg.eval(&scope) }
                                    }
                                    rules::Action::Post { key, value } => {
                                        Directive::Post { key: key.clone(), value: value.eval(&scope) }
                                    }
                                });
                            }
                            records.push((rule.name.clone(), rule.actions.iter().map(ToString::to_string).collect()));
                        }
                        Ok(false) => {}
                        Err(e) => failures.push((rule.name.clone(), e.0)),
                    }
                }
            }
            ControlProgram::Workflow(graph) => {
                if event.kind == EventKind::Posted {
                    for node in graph.entry_nodes(event.key()) {
                        directives.push(Directive::Execute {
                            component: node.to_owned(),
                            input: event.entry.value.clone(),
                        });
                        records.push((format!("ENTRY:{}->{node}", event.key()), vec![format!("EXECUTE {node}")]));
                    }
                }
            }
        }
        self.commit(event.seq(), event.key(), records, failures, now_us);
        self.note_executions(&directives);
        directives
    }

    /// Reacts to a finished execution. Only workflows route on completions;
    /// guards see the blackboard replica plus the posted `output`.
    pub fn on_completion(&mut self, component: &str, output: &Value, now_us: u64) -> Vec<Directive> {
        let ControlProgram::Workflow(graph) = &self.program else {
            return Vec::new();
        };
        let scope = Scope { event: None, replica: &self.replica, output: Some(output) };
        let mut directives = Vec::new();
        let mut records = Vec::new();
        let mut failures = Vec::new();
        for edge in graph.outgoing(component) {
            match rules::eval_all(&edge.guard, &scope) {
                Ok(true) => {
                    directives.push(Directive::Execute { component: edge.to.clone(), input: output.clone() });
                    records.push((edge.id(), vec![format!("EXECUTE {}", edge.to)]));
                }
                Ok(false) => {}
                Err(e) => failures.push((edge.id(), e.0)),
            }
        }
        let seq = self.last_seq;
        self.commit(seq, component, records, failures, now_us);
        self.note_executions(&directives);
        directives
    }

    fn commit(
        &mut self,
        seq: u64,
        key: &str,
        records: Vec<(String, Vec<String>)>,
        failures: Vec<(String, String)>,
        now_us: u64,
    ) {
        for (name, actions) in records {
            self.stats.firings += 1;
            if self.firings.len() == self.firing_capacity {
                self.firings.pop_front();
            }
            self.firings.push_back(FiringRecord {
                session_id: self.session_id.clone(),
                trigger_seq: seq,
                trigger_key: key.to_owned(),
                name,
                actions,
                timestamp_us: now_us,
                overhead_us: 0,
            });
        }
        for (name, message) in failures {
            log::debug!("session {}: `{name}` skipped: {message}", self.session_id);
            self.stats.evaluation_failures += 1;
            if self.failures.len() == self.firing_capacity {
                self.failures.pop_front();
            }
            self.failures.push_back(EvaluationFailure { trigger_seq: seq, name, message });
        }
    }

    fn note_executions(&mut self, directives: &[Directive]) {
        for d in directives {
            if let Directive::Execute { component, .. } = d {
                *self.active.entry(component.clone()).or_default() += 1;
                self.stats.executions_started += 1;
                self.stats.in_flight += 1;
            }
        }
    }

    /// Ends one activation of `component`.
    pub fn finish_execution(&mut self, component: &str, failed: bool) {
        if let Some(n) = self.active.get_mut(component) {
            *n -= 1;
            if *n == 0 {
                self.active.remove(component);
            }
        }
        self.stats.in_flight = self.stats.in_flight.saturating_sub(1);
        if failed {
            self.stats.executions_failed += 1;
        }
    }

    /// Stamps the decision time onto the last `records` firings and adds it
    /// to the running turn.
    pub fn add_overhead(&mut self, records: usize, overhead_us: u64) {
        let us = overhead_us.min(u32::MAX as u64) as u32;
        for record in self.firings.iter_mut().rev().take(records) {
            record.overhead_us = us;
        }
        if self.turn_open {
            self.turn_overhead_us += overhead_us;
        }
    }

    fn close_turn(&mut self) {
        if self.turn_open && self.turn_samples.len() < TURN_SAMPLE_CAPACITY {
            self.turn_samples.push(self.turn_overhead_us.min(u32::MAX as u64) as u32);
        }
        self.turn_overhead_us = 0;
        self.turn_open = false;
    }

    /// Allows a component post iff the component is executing on behalf of
    /// a firing or is whitelisted by the control program.
    pub fn arbitrate(&mut self, component: &str, _key: &str) -> bool {
        let allowed = self.active.contains_key(component)
            || self.program.allow().is_some_and(|allow| allow.contains(component));
        if allowed {
            self.stats.posts_allowed += 1;
        } else {
            self.stats.posts_denied += 1;
        }
        allowed
    }

    pub fn is_active(&self, component: &str) -> bool {
        self.active.contains_key(component)
    }

    pub fn firings(&self) -> impl Iterator<Item = &FiringRecord> {
        self.firings.iter()
    }

    pub fn failures(&self) -> impl Iterator<Item = &EvaluationFailure> {
        self.failures.iter()
    }

    pub fn stats(&self) -> OrchestratorStats {
        self.stats.clone()
    }

    /// Per-turn decision overhead in microseconds. A turn starts at an
    /// external event and lasts until the next one.
    pub fn turn_overheads(&self) -> Vec<u32> {
        let mut samples = self.turn_samples.clone();
        if self.turn_open {
            samples.push(self.turn_overhead_us.min(u32::MAX as u64) as u32);
        }
        samples
    }

    pub fn replica(&self) -> &HashMap<String, Value> {
        &self.replica
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blackboard::{BlackboardEntry, EXTERNAL_SOURCE};

    fn posted(seq: u64, key: &str, value: Value, source: &str) -> BlackboardEvent {
        BlackboardEvent {
            kind: EventKind::Posted,
            entry: BlackboardEntry { key: key.into(), value, source: source.into(), seq },
            session_id: Arc::from("s1"),
        }
    }

    fn rules(text: &str) -> OrchestratorCore {
        OrchestratorCore::new("s1", ControlProgram::rules(text).unwrap(), 64)
    }

    #[test]
    fn empty_rule_set_never_fires() {
        let mut core = rules("");
        assert!(core.on_event(&posted(1, "MIC_Event", json!({}), EXTERNAL_SOURCE), 0).is_empty());
        assert_eq!(core.firings().count(), 0);
    }

    #[test]
    fn matching_rule_emits_execute_with_projection() {
        let mut core = rules("RULE 01\nIF event == MIC_Event\nTHEN EXECUTE ASR WITH MIC_Event.bytes\n");
        let d = core.on_event(&posted(1, "MIC_Event", json!({"bytes": "hello"}), EXTERNAL_SOURCE), 5);
        assert_eq!(d, vec![Directive::Execute { component: "ASR".into(), input: json!("hello") }]);
        let rec = core.firings().next().unwrap();
        assert_eq!((rec.name.as_str(), rec.trigger_seq, rec.timestamp_us), ("01", 1, 5));
        assert!(core.is_active("ASR"));
    }

    #[test]
    fn failing_rule_is_skipped_and_recorded() {
        let mut core = rules(
            "RULE bad PRIORITY 2\nIF event == X AND X.v > 1\nTHEN POST A 1\nRULE good PRIORITY 1\nIF event == X\nTHEN POST B 2\n",
        );
        let d = core.on_event(&posted(1, "X", json!({"v": "str"}), "c"), 0);
        assert_eq!(d, vec![Directive::Post { key: "B".into(), value: json!(2) }]);
        let failure = core.failures().next().unwrap();
        assert_eq!(failure.name, "bad");
        assert_eq!(core.stats().evaluation_failures, 1);
    }

    #[test]
    fn arbitration_follows_activation_and_whitelist() {
        let mut core = rules("ALLOW LOGGER\nRULE 01\nIF event == MIC_Event\nTHEN EXECUTE DM\n");
        assert!(!core.arbitrate("DM", "DM_Event"));
        core.on_event(&posted(1, "MIC_Event", json!({}), EXTERNAL_SOURCE), 0);
        assert!(core.arbitrate("DM", "DM_Event"));
        core.finish_execution("DM", false);
        assert!(!core.arbitrate("DM", "DM_Event"));
        assert!(core.arbitrate("LOGGER", "Log"));
        let stats = core.stats();
        assert_eq!((stats.posts_allowed, stats.posts_denied), (2, 2));
    }

    #[test]
    fn replica_tracks_removals() {
        let mut core = rules("RULE gone\nIF removed == K\nTHEN POST Gone true\n");
        core.on_event(&posted(1, "K", json!(1), "c"), 0);
        assert_eq!(core.replica().get("K"), Some(&json!(1)));
        let mut removal = posted(2, "K", json!(1), "c");
        removal.kind = EventKind::Removed;
        let d = core.on_event(&removal, 0);
        assert_eq!(d, vec![Directive::Post { key: "Gone".into(), value: json!(true) }]);
        assert!(core.replica().get("K").is_none());
    }

    #[test]
    fn workflow_chain_and_guards() {
        let program = ControlProgram::workflow(
            "NODE ASR\nNODE NLU\nNODE DM\nENTRY MIC_Event -> ASR\nEDGE ASR -> NLU\nEDGE NLU -> DM WHEN output.confidence > 0.7\n",
        )
        .unwrap();
        let mut core = OrchestratorCore::new("s1", program, 64);
        let d = core.on_event(&posted(1, "MIC_Event", json!({"bytes": "hi"}), EXTERNAL_SOURCE), 0);
        assert_eq!(d, vec![Directive::Execute { component: "ASR".into(), input: json!({"bytes": "hi"}) }]);
        core.finish_execution("ASR", false);
        let d = core.on_completion("ASR", &json!({"utterance": "hi"}), 0);
        assert_eq!(d, vec![Directive::Execute { component: "NLU".into(), input: json!({"utterance": "hi"}) }]);
        assert!(core.on_completion("NLU", &json!({"confidence": 0.5}), 0).is_empty());
        assert_eq!(core.on_completion("NLU", &json!({"confidence": 0.9}), 0).len(), 1);
    }

    #[test]
    fn diamond_fires_join_once_per_incoming_edge() {
        let program = ControlProgram::workflow(
            "NODE A\nNODE B\nNODE C\nNODE D\nENTRY Go -> A\nEDGE A -> B\nEDGE A -> C\nEDGE B -> D\nEDGE C -> D\n",
        )
        .unwrap();
        let mut core = OrchestratorCore::new("s1", program, 64);
        core.on_event(&posted(1, "Go", json!(null), EXTERNAL_SOURCE), 0);
        let fan_out = core.on_completion("A", &json!(1), 0);
        assert_eq!(fan_out.len(), 2);
        let d_runs = core.on_completion("B", &json!(2), 0).len() + core.on_completion("C", &json!(3), 0).len();
        assert_eq!(d_runs, 2);
    }

    #[test]
    fn turns_accumulate_between_external_events() {
        let mut core = rules("RULE r\nIF true\nTHEN POST A 1\n");
        core.on_event(&posted(1, "MIC_Event", json!(1), EXTERNAL_SOURCE), 0);
        core.add_overhead(1, 10);
        core.on_event(&posted(2, "A", json!(1), ORCHESTRATOR_SOURCE), 0);
        core.add_overhead(1, 5);
        core.on_event(&posted(3, "MIC_Event", json!(1), EXTERNAL_SOURCE), 0);
        core.add_overhead(1, 7);
        assert_eq!(core.turn_overheads(), vec![15, 7]);
        assert_eq!(core.firings().last().unwrap().overhead_us, 7);
    }
}
