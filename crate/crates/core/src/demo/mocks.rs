//! Table-driven mock services.

use std::collections::BTreeMap;
use std::time::Duration;

use serde_json::json;
use thiserror::Error;

use crate::value::{self, Value};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("mock table line {line}: {message}")]
pub struct MockParseError {
    pub line: usize,
    pub message: String,
}

/// Same input, same output.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MockBehavior {
    pub name: String,
    pub key_field: Option<String>,
    pub table: BTreeMap<String, Value>,
    pub wrap: Option<String>,
    pub echo: Option<String>,
    pub default: Option<Value>,
    pub delay_us: u64,
}

fn normalize(text: &str) -> String {
    text.trim().to_lowercase()
}

impl MockBehavior {
    /// The text an input is matched on.
    pub fn input_text(&self, input: &Value) -> String {
        let subject = match &self.key_field {
            Some(field) => input.get(field).unwrap_or(&Value::Null),
            None => input,
        };
        match value::as_text(subject) {
            Some(s) => s.to_owned(),
            None => value::canonical_text(subject),
        }
    }

    pub fn respond(&self, input: &Value) -> Value {
        let text = self.input_text(input);
        if let Some(hit) = self.table.get(&normalize(&text)) {
            return hit.clone();
        }
        if self.echo.is_some() || self.wrap.is_some() {
            let mut out = Value::String(format!("{}{}", self.echo.as_deref().unwrap_or(""), text));
            if let Some(field) = &self.wrap {
                out = json!({ field.as_str(): out });
            }
            return out;
        }
        self.default.clone().unwrap_or(Value::Null)
    }

    pub fn delay(&self) -> Duration {
        Duration::from_micros(self.delay_us)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MockTables {
    pub mocks: BTreeMap<String, MockBehavior>,
    pub stores: BTreeMap<String, Value>,
}

impl MockTables {
    pub fn parse(text: &str) -> Result<Self, MockParseError> {
        let mut tables = MockTables::default();
        let mut current: Option<MockBehavior> = None;
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| MockParseError { line: idx + 1, message };
            let json = |s: &str| serde_json::from_str::<Value>(s.trim()).map_err(|e| err(format!("bad JSON: {e}")));
            let (head, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
            let rest = rest.trim();
            if head == "MOCK" {
                if let Some(done) = current.take() {
                    tables.mocks.insert(done.name.clone(), done);
                }
                if rest.is_empty() {
                    return Err(err("MOCK needs a name".into()));
                }
                current = Some(MockBehavior { name: rest.to_owned(), ..Default::default() });
                continue;
            }
            if head == "STORE" {
                let (name, body) = rest.split_once(char::is_whitespace).ok_or_else(|| err("STORE <name> <json>".into()))?;
                tables.stores.insert(name.to_owned(), json(body)?);
                continue;
            }
            let mock = current.as_mut().ok_or_else(|| err(format!("`{head}` outside a MOCK block")))?;
            match head {
                "KEY" => mock.key_field = Some(rest.to_owned()),
                "WRAP" => mock.wrap = Some(rest.to_owned()),
                "ECHO" => match json(rest)? {
                    Value::String(prefix) => mock.echo = Some(prefix),
                    _ => return Err(err("ECHO takes a string".into())),
                },
                "DELAY_US" => mock.delay_us = rest.parse().map_err(|_| err(format!("bad delay `{rest}`")))?,
                _ if line.starts_with("DEFAULT") => {
                    let (_, out) = line.split_once("=>").ok_or_else(|| err("DEFAULT => <json>".into()))?;
                    mock.default = Some(json(out)?);
                }
                _ if line.starts_with('"') => {
                    let (input, out) = line.split_once("=>").ok_or_else(|| err("\"input\" => <json>".into()))?;
                    let Value::String(input) = json(input)? else { unreachable!("starts with a quote") };
                    mock.table.insert(normalize(&input), json(out)?);
                }
                other => return Err(err(format!("unknown directive `{other}`"))),
            }
        }
        if let Some(done) = current.take() {
            tables.mocks.insert(done.name.clone(), done);
        }
        Ok(tables)
    }

    pub fn get(&self, name: &str) -> Option<&MockBehavior> {
        self.mocks.get(name)
    }
}

/// Picks the candidate nearest to the store; ties go to the smaller user key.
/// Input `{store: {x,y}, candidates: [{user,x,y}, ...]}`.
pub fn decide_grocery(input: &Value) -> Result<Value, String> {
    let coord = |v: &Value, axis: &str| v.get(axis).and_then(Value::as_f64).ok_or_else(|| format!("missing `{axis}`"));
    let store = input.get("store").ok_or("missing store")?;
    let (sx, sy) = (coord(store, "x")?, coord(store, "y")?);
    let candidates = input.get("candidates").and_then(Value::as_array).ok_or("missing candidates")?;
    let mut distances = BTreeMap::new();
    for c in candidates {
        let user = c.get("user").and_then(Value::as_str).ok_or("candidate without user")?;
        let d = (coord(c, "x")? - sx).hypot(coord(c, "y")? - sy);
        distances.insert(user.to_owned(), d);
    }
    let (assignee, _) = distances
        .iter()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .ok_or("no candidates")?;
    Ok(json!({ "assignee": assignee, "distances": distances }))
}

#[cfg(test)]
mod tests {
    use super::*;

    const SHIPPED: &str = include_str!("../../scenarios/mocks.conf");

    #[test]
    fn shipped_nlu_table() {
        let t = MockTables::parse(SHIPPED).unwrap();
        let nlu = t.get("NLU").unwrap();
        assert_eq!(nlu.respond(&json!("hello")), json!({"intent": "greet", "confidence": 0.95}));
        assert_eq!(nlu.respond(&json!("zxqv")), json!({"intent": null, "confidence": 0.0}));
        assert_eq!(t.get("QA").unwrap().respond(&json!("unanswerable")), Value::Null);
        assert_eq!(t.get("TTS").unwrap().respond(&json!("Hi")), json!("spoken:Hi"));
        assert_eq!(t.get("ASR").unwrap().respond(&json!("hello")), json!({"utterance": "hello"}));
    }

    #[test]
    fn keyed_lookup() {
        let t = MockTables::parse(SHIPPED).unwrap();
        let dm = t.get("DM").unwrap();
        assert_eq!(dm.respond(&json!({"intent": "greet", "confidence": 0.95})), json!({"system_intent": "greet_back"}));
        assert_eq!(t.get("LOCATION").unwrap().respond(&json!({"user": "nobody"})), Value::Null);
    }

    #[test]
    fn mocks_are_deterministic() {
        let t = MockTables::parse(SHIPPED).unwrap();
        for mock in t.mocks.values() {
            for input in [json!("hello"), json!({"user": "bob"}), json!(null), json!("??")] {
                assert_eq!(mock.respond(&input), mock.respond(&input));
            }
        }
    }

    #[test]
    fn parse_errors_name_the_line() {
        let e = MockTables::parse("MOCK A\nWHAT 1\n").unwrap_err();
        assert_eq!(e.line, 2);
        assert!(MockTables::parse("\"x\" => 1").is_err());
    }

    #[test]
    fn nearest_candidate_wins() {
        let input = json!({
            "store": {"x": 0.0, "y": 0.0},
            "candidates": [{"user": "alice", "x": 3.0, "y": 4.0}, {"user": "bob", "x": 1.0, "y": 1.0}],
        });
        let out = decide_grocery(&input).unwrap();
        assert_eq!(out["assignee"], json!("bob"));
        assert_eq!(out["distances"]["alice"], json!(5.0));
    }
}
