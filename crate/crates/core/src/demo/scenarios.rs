//! Scripted scenarios and their transcripts.
//!
//! Script lines:
//!
//! ```text
//! RULES <pipeline|grocery>
//! CONNECT <user> <device> [cap,cap,...]
//! INJECT <target> <key> <json>
//! AWAIT <target> <key> [<path>=<json>]
//! EXPECT_FIRINGS <user> <family>...
//! EXPECT_ENTRY <user> <key> <json> | <path>=<json>
//! ```
//!
//! A target is `user` (that user's first device) or `user/device`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Duration;

use thiserror::Error;

use super::{rules_by_name, DemoError, DemoServer, Mode};
use crate::blackboard::BlackboardEvent;
use crate::client::{ClientEvent, SessionClient};
use crate::config::ServerConfig;
use crate::value::{self, Value};
use crate::wire::MsgKind;

pub const IDEAL_SCRIPT: &str = include_str!("../../scenarios/ideal.script");
pub const CLARIFICATION_SCRIPT: &str = include_str!("../../scenarios/clarification.script");
pub const GROCERY_SCRIPT: &str = include_str!("../../scenarios/grocery.script");

const STEP_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    Ideal,
    Clarification,
    Grocery,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::Ideal, Scenario::Clarification, Scenario::Grocery];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Ideal => "IDEAL",
            Scenario::Clarification => "CLARIFICATION",
            Scenario::Grocery => "GROCERY",
        }
    }

    pub fn script(self) -> &'static str {
        match self {
            Scenario::Ideal => IDEAL_SCRIPT,
            Scenario::Clarification => CLARIFICATION_SCRIPT,
            Scenario::Grocery => GROCERY_SCRIPT,
        }
    }
}

impl FromStr for Scenario {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown scenario `{s}` (ideal, clarification, grocery)"))
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("script line {line}: {message}")]
    Script { line: usize, message: String },
    #[error("scenario diverged at line {line}: {message}")]
    AssertionFailed { line: usize, message: String },
    #[error(transparent)]
    Setup(#[from] DemoError),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Step {
    Connect { user: String, device: String, capabilities: Option<Vec<String>> },
    Inject { target: String, key: String, value: Value },
    Await { target: String, key: String, condition: Option<(Vec<String>, Value)> },
    ExpectFirings { user: String, families: Vec<String> },
    ExpectEntry { user: String, key: String, path: Vec<String>, value: Value },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Script {
    pub rules: String,
    pub steps: Vec<(usize, Step)>,
}

fn word(s: &str) -> (&str, &str) {
    match s.split_once(char::is_whitespace) {
        Some((w, rest)) => (w, rest.trim_start()),
        None => (s, ""),
    }
}

/// `path=json` when the text starts with an identifier followed by `=`.
fn condition(text: &str) -> Result<Option<(Vec<String>, Value)>, String> {
    let text = text.trim();
    if let Some((path, json)) = text.split_once('=') {
        let is_path = !path.is_empty() && path.chars().all(|c| c.is_alphanumeric() || c == '_' || c == '.');
        if is_path {
            let v = serde_json::from_str(json.trim()).map_err(|e| format!("bad JSON `{json}`: {e}"))?;
            return Ok(Some((path.split('.').map(str::to_owned).collect(), v)));
        }
    }
    Ok(None)
}

impl Script {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let mut rules = None;
        let mut steps = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let line_no = idx + 1;
            let err = |message: String| ScenarioError::Script { line: line_no, message };
            let (head, rest) = word(line);
            let step = match head {
                "RULES" => {
                    rules = Some(rest.to_owned());
                    continue;
                }
                "CONNECT" => {
                    let (user, rest) = word(rest);
                    let (device, caps) = word(rest);
                    if user.is_empty() || device.is_empty() {
                        return Err(err("CONNECT <user> <device> [caps]".into()));
                    }
                    let capabilities =
                        (!caps.is_empty()).then(|| caps.split(',').map(|c| c.trim().to_owned()).collect());
                    Step::Connect { user: user.into(), device: device.into(), capabilities }
                }
                "INJECT" => {
                    let (target, rest) = word(rest);
                    let (key, json) = word(rest);
                    let value = serde_json::from_str(json).map_err(|e| err(format!("bad JSON: {e}")))?;
                    Step::Inject { target: target.into(), key: key.into(), value }
                }
                "AWAIT" => {
                    let (target, rest) = word(rest);
                    let (key, cond) = word(rest);
                    let condition = condition(cond).map_err(err)?;
                    if !cond.is_empty() && condition.is_none() {
                        return Err(err(format!("bad AWAIT condition `{cond}`")));
                    }
                    Step::Await { target: target.into(), key: key.into(), condition }
                }
                "EXPECT_FIRINGS" => {
                    let (user, rest) = word(rest);
                    Step::ExpectFirings {
                        user: user.into(),
                        families: rest.split_whitespace().map(str::to_owned).collect(),
                    }
                }
                "EXPECT_ENTRY" => {
                    let (user, rest) = word(rest);
                    let (key, rest) = word(rest);
                    let (path, value) = match condition(rest).map_err(err)? {
                        Some(c) => c,
                        None => {
                            let v = serde_json::from_str(rest).map_err(|e| err(format!("bad JSON: {e}")))?;
                            (Vec::new(), v)
                        }
                    };
                    Step::ExpectEntry { user: user.into(), key: key.into(), path, value }
                }
                other => return Err(err(format!("unknown directive `{other}`"))),
            };
            steps.push((line_no, step));
        }
        let rules = rules.ok_or(ScenarioError::Script { line: 0, message: "missing RULES line".into() })?;
        Ok(Script { rules, steps })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FiringLine {
    pub name: String,
    pub trigger_key: String,
    pub trigger_seq: u64,
    pub actions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionTranscript {
    pub session_id: String,
    pub firings: Vec<FiringLine>,
    /// `(seq, kind, key, source, value)` in mutation order.
    pub history: Vec<(u64, String, String, String, Value)>,
    /// Final entries by key: `(value, source)`.
    pub board: BTreeMap<String, (Value, String)>,
}

impl SessionTranscript {
    pub fn families(&self) -> Vec<String> {
        self.firings.iter().map(|f| crate::orchestrator::family_of(&f.name).to_owned()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transcript {
    pub scenario: String,
    pub sessions: Vec<SessionTranscript>,
}

impl Transcript {
    pub fn session(&self, session_id: &str) -> Option<&SessionTranscript> {
        self.sessions.iter().find(|s| s.session_id == session_id)
    }

    /// Text form without timestamps; equal runs render identically.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "scenario {}", self.scenario);
        for s in &self.sessions {
            let _ = writeln!(out, "session {}", s.session_id);
            let _ = writeln!(out, "  sequence [{}]", s.families().join(", "));
            for f in &s.firings {
                let _ = writeln!(out, "  fire {} on {}#{} -> {}", f.name, f.trigger_key, f.trigger_seq, f.actions.join("; "));
            }
            for (seq, kind, key, source, v) in &s.history {
                let _ = writeln!(out, "  #{seq} {kind} {key} by {source}: {}", value::canonical_text(v));
            }
            for (key, (v, source)) in &s.board {
                let _ = writeln!(out, "  final {key} = {} ({source})", value::canonical_text(v));
            }
        }
        out
    }
}

struct Runner {
    demo: DemoServer,
    devices: Vec<(String, String, SessionClient)>,
}

impl Runner {
    fn device(&mut self, target: &str) -> Option<&mut SessionClient> {
        let (user, device) = match target.split_once('/') {
            Some((u, d)) => (u, Some(d)),
            None => (target, None),
        };
        self.devices
            .iter_mut()
            .find(|(u, d, _)| u == user && device.map_or(true, |want| want == d))
            .map(|(_, _, c)| c)
    }

    fn session_of(&self, user: &str) -> Option<String> {
        self.devices.iter().find(|(u, _, _)| u == user).map(|(_, _, c)| c.session_id().to_owned())
    }

    async fn transcript(&self, scenario: &str) -> Transcript {
        let mut sessions = Vec::new();
        for info in self.demo.server.sessions().sessions().await {
            let Some(parts) = self.demo.server.sessions().parts(&info.session_id).await else { continue };
            let firings = parts
                .orchestrator
                .firings()
                .await
                .into_iter()
                .map(|r| FiringLine {
                    name: r.name,
                    trigger_key: r.trigger_key,
                    trigger_seq: r.trigger_seq,
                    actions: r.actions,
                })
                .collect();
            let (events, _) = parts.blackboard.history().await.unwrap_or_default();
            let history = events
                .into_iter()
                .map(|e| (e.entry.seq, e.kind.as_str().to_owned(), e.entry.key, e.entry.source, e.entry.value))
                .collect();
            let board = parts
                .blackboard
                .snapshot()
                .await
                .unwrap_or_default()
                .into_iter()
                .map(|e| (e.key, (e.value, e.source)))
                .collect();
            sessions.push(SessionTranscript { session_id: info.session_id, firings, history, board });
        }
        Transcript { scenario: scenario.to_owned(), sessions }
    }
}

fn matches(event: &BlackboardEvent, key: &str, condition: &Option<(Vec<String>, Value)>) -> bool {
    event.key() == key
        && condition.as_ref().map_or(true, |(path, want)| {
            value::project(&event.entry.value, path).unwrap_or(&Value::Null) == want
        })
}

async fn await_event(
    client: &mut SessionClient,
    key: &str,
    condition: &Option<(Vec<String>, Value)>,
) -> Result<BlackboardEvent, String> {
    let deadline = tokio::time::Instant::now() + STEP_TIMEOUT;
    loop {
        let left = deadline.saturating_duration_since(tokio::time::Instant::now());
        match client.next_event(left).await {
            None => return Err(format!("timed out waiting for {key}")),
            Some(ClientEvent::Disconnected(reason)) => return Err(format!("disconnected: {reason}")),
            Some(ClientEvent::Envelope(env)) if env.kind == MsgKind::SessionEvent => {
                let Ok(payload) = value::from_payload(&env.payload) else { continue };
                if let Some(event) = BlackboardEvent::from_value(&env.session_id, &payload) {
                    if matches(&event, key, condition) {
                        return Ok(event);
                    }
                }
            }
            Some(ClientEvent::Envelope(env)) if env.kind == MsgKind::Disconnect => {
                return Err("session closed".into());
            }
            Some(_) => {}
        }
    }
}

/// Runs a script against a fresh demo server and returns the transcript.
pub async fn run_script(name: &str, script: &Script, mode: Mode) -> Result<Transcript, ScenarioError> {
    let rules = rules_by_name(&script.rules)
        .ok_or_else(|| ScenarioError::Script { line: 0, message: format!("unknown rules `{}`", script.rules) })?;
    let config = ServerConfig { port: 0, request_timeout_ms: 5_000, ..Default::default() };
    let demo = DemoServer::start(mode, rules, &config).await?;
    let mut runner = Runner { demo, devices: Vec::new() };
    let result = execute(&mut runner, script).await;
    let transcript = runner.transcript(name).await;
    for (_, _, client) in &runner.devices {
        client.disconnect();
    }
    runner.demo.shutdown().await;
    result.map(|()| transcript)
}

async fn execute(runner: &mut Runner, script: &Script) -> Result<(), ScenarioError> {
    let endpoint = runner.demo.endpoint();
    for (line, step) in &script.steps {
        let line = *line;
        let fail = |message: String| ScenarioError::AssertionFailed { line, message };
        match step {
            Step::Connect { user, device, capabilities } => {
                let caps: Option<Vec<&str>> = capabilities.as_ref().map(|c| c.iter().map(String::as_str).collect());
                let client = SessionClient::connect_with(&endpoint, user, device, caps.as_deref(), STEP_TIMEOUT)
                    .await
                    .map_err(|e| fail(format!("connect {user}/{device}: {e}")))?;
                runner.devices.push((user.clone(), device.clone(), client));
            }
            Step::Inject { target, key, value } => {
                let client = runner.device(target).ok_or_else(|| fail(format!("no device `{target}`")))?;
                client.inject(key, value.clone()).map_err(|e| fail(e.to_string()))?;
            }
            Step::Await { target, key, condition } => {
                let client = runner.device(target).ok_or_else(|| fail(format!("no device `{target}`")))?;
                await_event(client, key, condition).await.map_err(fail)?;
            }
            Step::ExpectFirings { user, families } => {
                let session = runner.session_of(user).ok_or_else(|| fail(format!("no session for `{user}`")))?;
                let parts = runner.demo.server.sessions().parts(&session).await.ok_or_else(|| fail("session gone".into()))?;
                let actual = parts.orchestrator.firing_sequence().await;
                if let Some(i) = (0..families.len().max(actual.len())).find(|&i| families.get(i) != actual.get(i)) {
                    return Err(fail(format!(
                        "{session} firing {}: expected {:?}, got {:?} (full sequence [{}])",
                        i + 1,
                        families.get(i),
                        actual.get(i),
                        actual.join(", ")
                    )));
                }
            }
            Step::ExpectEntry { user, key, path, value } => {
                let session = runner.session_of(user).ok_or_else(|| fail(format!("no session for `{user}`")))?;
                let parts = runner.demo.server.sessions().parts(&session).await.ok_or_else(|| fail("session gone".into()))?;
                let entry = parts.blackboard.get(key).await.map_err(|e| fail(e.to_string()))?;
                let Some(entry) = entry else {
                    return Err(fail(format!("{session} has no `{key}` entry")));
                };
                let got = value::project(&entry, path).cloned().unwrap_or(Value::Null);
                if got != *value {
                    return Err(fail(format!("{session} `{key}`: expected {value}, got {got}")));
                }
            }
        }
    }
    Ok(())
}

pub async fn run_scenario(scenario: Scenario, mode: Mode) -> Result<Transcript, ScenarioError> {
    let script = Script::parse(scenario.script())?;
    run_script(scenario.name(), &script, mode).await
}
