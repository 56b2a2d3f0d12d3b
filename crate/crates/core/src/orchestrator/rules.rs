//! Rule language: predicates, value expressions and the line-oriented rule
//! file format.
//!
//! ```text
//! # comment
//! ALLOW <component>
//! RULE <name> PRIORITY <int>
//! IF <predicate> [AND <predicate>]...
//! THEN <action>[; <action>]...
//! ```

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashSet};
use std::fmt;

use thiserror::Error;

use crate::blackboard::{BlackboardEvent, EventKind};
use crate::value::{project, Map, Value};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RuleError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate rule name `{0}`")]
    DuplicateRuleName(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{0}")]
pub struct EvalError(pub String);

/// `Root.field.path`. Roots are blackboard keys, `event` (the triggering
/// event's value) or `output` (a completed node's output).
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    pub root: String,
    pub fields: Vec<String>,
}

impl fmt::Display for Path {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.root)?;
        for field in &self.fields {
            write!(f, ".{field}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmpOp {
    Eq,
    Ne,
    Gt,
    Lt,
    Ge,
    Le,
}

impl CmpOp {
    fn parse(token: &str) -> Option<Self> {
        Some(match token {
            "==" | "=" => CmpOp::Eq,
            "!=" | "≠" => CmpOp::Ne,
            ">" => CmpOp::Gt,
            "<" => CmpOp::Lt,
            ">=" | "≥" => CmpOp::Ge,
            "<=" | "≤" => CmpOp::Le,
            _ => return None,
        })
    }

    fn symbol(self) -> &'static str {
        match self {
            CmpOp::Eq => "==",
            CmpOp::Ne => "!=",
            CmpOp::Gt => ">",
            CmpOp::Lt => "<",
            CmpOp::Ge => ">=",
            CmpOp::Le => "<=",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Predicate {
    True,
    /// The triggering event is a POSTED event for this key.
    EventIs(String),
    /// The triggering event is a REMOVED event for this key.
    RemovedIs(String),
    Compare { path: Path, op: CmpOp, rhs: Expr },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Literal(Value),
    Project(Path),
    Object(Vec<(String, Expr)>),
    Array(Vec<Expr>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Execute { component: String, arg: Expr },
    Post { key: String, value: Expr },
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Execute { component, .. } => write!(f, "EXECUTE {component}"),
            Action::Post { key, .. } => write!(f, "POST {key}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rule {
    pub name: String,
    pub priority: i64,
    pub condition: Vec<Predicate>,
    pub actions: Vec<Action>,
}

impl Rule {
    /// Rules named `03:confident` and `03:clarify` belong to family `03`.
    pub fn family(&self) -> &str {
        family_of(&self.name)
    }
}

pub fn family_of(name: &str) -> &str {
    name.split_once(':').map_or(name, |(family, _)| family)
}

/// What a predicate or expression can read.
pub trait Scope {
    fn event(&self) -> Option<&BlackboardEvent>;
    fn lookup(&self, root: &str) -> Option<&Value>;
}

impl Path {
    pub fn resolve<'a>(&self, scope: &'a impl Scope) -> Option<&'a Value> {
        let base = scope.lookup(&self.root)?;
        project(base, &self.fields)
    }
}

impl Expr {
    pub fn eval(&self, scope: &impl Scope) -> Value {
        match self {
            Expr::Literal(v) => v.clone(),
            Expr::Project(path) => path.resolve(scope).cloned().unwrap_or(Value::Null),
            Expr::Object(fields) => {
                let mut map = Map::new();
                for (k, e) in fields {
                    map.insert(k.clone(), e.eval(scope));
                }
                Value::Object(map)
            }
            Expr::Array(items) => Value::Array(items.iter().map(|e| e.eval(scope)).collect()),
        }
    }
}

fn values_equal(a: &Value, b: &Value) -> bool {
    match (a.as_f64(), b.as_f64()) {
        (Some(x), Some(y)) if a.is_number() && b.is_number() => x == y,
        _ => a == b,
    }
}

impl Predicate {
    pub fn eval(&self, scope: &impl Scope) -> Result<bool, EvalError> {
        match self {
            Predicate::True => Ok(true),
            Predicate::EventIs(key) => {
                Ok(scope.event().is_some_and(|e| e.kind == EventKind::Posted && e.key() == key))
            }
            Predicate::RemovedIs(key) => {
                Ok(scope.event().is_some_and(|e| e.kind == EventKind::Removed && e.key() == key))
            }
            Predicate::Compare { path, op, rhs } => {
                let lhs = path.resolve(scope).cloned().unwrap_or(Value::Null);
                let rhs = rhs.eval(scope);
                match op {
                    CmpOp::Eq => Ok(values_equal(&lhs, &rhs)),
                    CmpOp::Ne => Ok(!values_equal(&lhs, &rhs)),
                    _ => {
                        let (Some(x), Some(y)) = (lhs.as_f64(), rhs.as_f64()) else {
                            return Err(EvalError(format!(
                                "`{path} {} {rhs}`: ordering needs two numbers, got {lhs}",
                                op.symbol()
                            )));
                        };
                        let ord = x.partial_cmp(&y).unwrap_or(Ordering::Equal);
                        Ok(match op {
                            CmpOp::Gt => ord == Ordering::Greater,
                            CmpOp::Lt => ord == Ordering::Less,
                            CmpOp::Ge => ord != Ordering::Less,
                            CmpOp::Le => ord != Ordering::Greater,
                            CmpOp::Eq | CmpOp::Ne => unreachable!(),
                        })
                    }
                }
            }
        }
    }
}

/// Evaluates a conjunction left to right, stopping at the first false term.
pub fn eval_all(condition: &[Predicate], scope: &impl Scope) -> Result<bool, EvalError> {
    for predicate in condition {
        if !predicate.eval(scope)? {
            return Ok(false);
        }
    }
    Ok(true)
}

/// A parsed rule file. Rules are kept in firing order: priority descending,
/// then declaration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RuleSet {
    pub rules: Vec<Rule>,
    pub allow: BTreeSet<String>,
}

impl RuleSet {
    pub fn new(rules: Vec<Rule>, allow: BTreeSet<String>) -> Result<Self, RuleError> {
        let mut seen = HashSet::new();
        for rule in &rules {
            if !seen.insert(rule.name.as_str()) {
                return Err(RuleError::DuplicateRuleName(rule.name.clone()));
            }
        }
        let mut rules = rules;
        // Stable sort keeps declaration order among equal priorities.
        rules.sort_by(|a, b| b.priority.cmp(&a.priority));
        Ok(RuleSet { rules, allow })
    }

    pub fn parse(text: &str) -> Result<Self, RuleError> {
        let mut rules = Vec::new();
        let mut allow = BTreeSet::new();
        let mut current: Option<(usize, Rule)> = None;

        let finish = |current: Option<(usize, Rule)>, rules: &mut Vec<Rule>| -> Result<(), RuleError> {
            if let Some((line, rule)) = current {
                if rule.actions.is_empty() {
                    return Err(RuleError::Parse { line, message: format!("rule `{}` has no THEN", rule.name) });
                }
                rules.push(rule);
            }
            Ok(())
        };

        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| RuleError::Parse { line: line_no, message };
            let (head, rest) = split_word(line);
            match head {
                "ALLOW" => {
                    if rest.is_empty() {
                        return Err(err("ALLOW needs a component id".into()));
                    }
                    allow.extend(rest.split_whitespace().map(str::to_owned));
                }
                "RULE" => {
                    finish(current.take(), &mut rules)?;
                    let words: Vec<&str> = rest.split_whitespace().collect();
                    let (name, priority) = match words.as_slice() {
                        [name] => (*name, 0),
                        [name, "PRIORITY", p] => {
                            (*name, p.parse::<i64>().map_err(|_| err(format!("bad priority `{p}`")))?)
                        }
                        _ => return Err(err("expected `RULE <name> PRIORITY <int>`".into())),
                    };
                    current = Some((
                        line_no,
                        Rule { name: name.to_owned(), priority, condition: Vec::new(), actions: Vec::new() },
                    ));
                }
                "IF" | "AND" => {
                    let Some((_, rule)) = current.as_mut() else {
                        return Err(err(format!("{head} outside a RULE")));
                    };
                    if head == "IF" && !rule.condition.is_empty() {
                        return Err(err("second IF in one rule".into()));
                    }
                    rule.condition.extend(parse_condition(rest).map_err(err)?);
                }
                "THEN" => {
                    let Some((_, rule)) = current.as_mut() else {
                        return Err(err("THEN outside a RULE".into()));
                    };
                    rule.actions.extend(parse_actions(rest).map_err(err)?);
                }
                other => return Err(err(format!("unknown directive `{other}`"))),
            }
        }
        finish(current.take(), &mut rules)?;
        Self::new(rules, allow)
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }
}

fn split_word(s: &str) -> (&str, &str) {
    match s.find(char::is_whitespace) {
        Some(i) => (&s[..i], s[i..].trim_start()),
        None => (s, ""),
    }
}

/// Splits on `sep` outside string literals and brackets.
fn split_top_level<'a>(s: &'a str, sep: &str) -> Vec<&'a str> {
    let bytes = s.as_bytes();
    let mut parts = Vec::new();
    let mut depth = 0i32;
    let mut in_str = false;
    let mut escaped = false;
    let mut start = 0;
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if in_str {
            if escaped {
                escaped = false;
            } else if c == b'\\' {
                escaped = true;
            } else if c == b'"' {
                in_str = false;
            }
            i += 1;
            continue;
        }
        match c {
            b'"' => in_str = true,
            b'{' | b'[' => depth += 1,
            b'}' | b']' => depth -= 1,
            _ if depth == 0 && s[i..].starts_with(sep) => {
                let is_word = sep.chars().all(char::is_alphabetic);
                let bounded = !is_word
                    || ((i == 0 || bytes[i - 1].is_ascii_whitespace())
                        && bytes.get(i + sep.len()).map_or(true, u8::is_ascii_whitespace));
                if bounded {
                    parts.push(&s[start..i]);
                    i += sep.len();
                    start = i;
                    continue;
                }
            }
            _ => {}
        }
        i += 1;
    }
    parts.push(&s[start..]);
    parts
}

pub fn parse_condition(text: &str) -> Result<Vec<Predicate>, String> {
    split_top_level(text, "AND").into_iter().map(|p| parse_predicate(p.trim())).collect()
}

pub fn parse_predicate(text: &str) -> Result<Predicate, String> {
    if text.is_empty() {
        return Err("empty predicate".into());
    }
    if text == "true" {
        return Ok(Predicate::True);
    }
    let (lhs, rest) = split_word(text);
    let (op_token, rhs) = split_word(rest);
    let op = CmpOp::parse(op_token).ok_or_else(|| format!("unknown operator `{op_token}` in `{text}`"))?;
    if rhs.is_empty() {
        return Err(format!("missing right-hand side in `{text}`"));
    }
    if lhs == "event" || lhs == "removed" {
        if op != CmpOp::Eq || !is_ident(rhs) {
            return Err(format!("expected `{lhs} == <Key>`"));
        }
        return Ok(if lhs == "event" {
            Predicate::EventIs(rhs.to_owned())
        } else {
            Predicate::RemovedIs(rhs.to_owned())
        });
    }
    let path = parse_path(lhs)?;
    let rhs = parse_expr(rhs)?;
    Ok(Predicate::Compare { path, op, rhs })
}

pub fn parse_actions(text: &str) -> Result<Vec<Action>, String> {
    split_top_level(text, ";")
        .into_iter()
        .map(str::trim)
        .filter(|a| !a.is_empty())
        .map(parse_action)
        .collect()
}

fn parse_action(text: &str) -> Result<Action, String> {
    let (verb, rest) = split_word(text);
    match verb {
        "EXECUTE" => {
            let (component, rest) = split_word(rest);
            if !is_ident(component) {
                return Err(format!("bad component id `{component}`"));
            }
            let arg = match split_word(rest) {
                ("", _) => Expr::Literal(Value::Null),
                ("WITH", expr) => parse_expr(expr)?,
                (other, _) => return Err(format!("expected WITH, found `{other}`")),
            };
            Ok(Action::Execute { component: component.to_owned(), arg })
        }
        "POST" => {
            let (key, expr) = split_word(rest);
            if !is_ident(key) {
                return Err(format!("bad key `{key}`"));
            }
            if expr.is_empty() {
                return Err(format!("POST {key} needs a value"));
            }
            Ok(Action::Post { key: key.to_owned(), value: parse_expr(expr)? })
        }
        other => Err(format!("unknown action `{other}`")),
    }
}

fn is_ident(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_alphanumeric() || c == '_' || c == '-')
}

fn parse_path(text: &str) -> Result<Path, String> {
    let mut parts = text.split('.');
    let root = parts.next().unwrap_or_default();
    if !is_ident(root) {
        return Err(format!("bad path `{text}`"));
    }
    let fields: Vec<String> = parts.map(str::to_owned).collect();
    if fields.iter().any(|f| !is_ident(f)) {
        return Err(format!("bad path `{text}`"));
    }
    Ok(Path { root: root.to_owned(), fields })
}

/// Parses a JSON literal, a `Key.path` projection, or an object/array
/// template whose members may themselves be projections.
pub fn parse_expr(text: &str) -> Result<Expr, String> {
    let mut p = ExprParser { s: text, pos: 0 };
    let expr = p.expr()?;
    p.skip_ws();
    if p.pos != text.len() {
        return Err(format!("trailing input in `{text}`"));
    }
    Ok(expr)
}

struct ExprParser<'a> {
    s: &'a str,
    pos: usize,
}

impl<'a> ExprParser<'a> {
    fn rest(&self) -> &'a str {
        &self.s[self.pos..]
    }

    fn skip_ws(&mut self) {
        let trimmed = self.rest().trim_start();
        self.pos = self.s.len() - trimmed.len();
    }

    fn eat(&mut self, c: char) -> bool {
        self.skip_ws();
        if self.rest().starts_with(c) {
            self.pos += c.len_utf8();
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Result<Expr, String> {
        self.skip_ws();
        let Some(c) = self.rest().chars().next() else {
            return Err("expected an expression".into());
        };
        match c {
            '{' => {
                self.pos += 1;
                let mut fields = Vec::new();
                if !self.eat('}') {
                    loop {
                        self.skip_ws();
                        let key = match self.string()? {
                            Value::String(k) => k,
                            _ => unreachable!(),
                        };
                        if !self.eat(':') {
                            return Err("expected `:` in object".into());
                        }
                        fields.push((key, self.expr()?));
                        if self.eat('}') {
                            break;
                        }
                        if !self.eat(',') {
                            return Err("expected `,` or `}` in object".into());
                        }
                    }
                }
                Ok(fold_object(fields))
            }
            '[' => {
                self.pos += 1;
                let mut items = Vec::new();
                if !self.eat(']') {
                    loop {
                        items.push(self.expr()?);
                        if self.eat(']') {
                            break;
                        }
                        if !self.eat(',') {
                            return Err("expected `,` or `]` in array".into());
                        }
                    }
                }
                Ok(fold_array(items))
            }
            '"' => Ok(Expr::Literal(self.string()?)),
            _ => {
                let end = self
                    .rest()
                    .find(|c: char| c.is_whitespace() || matches!(c, ',' | '}' | ']' | ':'))
                    .map_or(self.s.len(), |i| self.pos + i);
                let word = &self.s[self.pos..end];
                self.pos = end;
                match word {
                    "null" => Ok(Expr::Literal(Value::Null)),
                    "true" => Ok(Expr::Literal(Value::Bool(true))),
                    "false" => Ok(Expr::Literal(Value::Bool(false))),
                    _ if word.starts_with(|c: char| c == '-' || c.is_ascii_digit()) => serde_json::from_str(word)
                        .map(Expr::Literal)
                        .map_err(|_| format!("bad number `{word}`")),
                    _ => parse_path(word).map(Expr::Project),
                }
            }
        }
    }

    fn string(&mut self) -> Result<Value, String> {
        let rest = self.rest();
        if !rest.starts_with('"') {
            return Err(format!("expected a string at `{rest}`"));
        }
        let bytes = rest.as_bytes();
        let mut i = 1;
        let mut escaped = false;
        while i < bytes.len() {
            match bytes[i] {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => {
                    let literal = &rest[..=i];
                    self.pos += i + 1;
                    return serde_json::from_str(literal).map_err(|e| format!("bad string {literal}: {e}"));
                }
                _ => {}
            }
            i += 1;
        }
        Err("unterminated string".into())
    }
}

fn fold_object(fields: Vec<(String, Expr)>) -> Expr {
    if fields.iter().all(|(_, e)| matches!(e, Expr::Literal(_))) {
        let map = fields
            .into_iter()
            .map(|(k, e)| match e {
                Expr::Literal(v) => (k, v),
                _ => unreachable!(),
            })
            .collect();
        Expr::Literal(Value::Object(map))
    } else {
        Expr::Object(fields)
    }
}

fn fold_array(items: Vec<Expr>) -> Expr {
    if items.iter().all(|e| matches!(e, Expr::Literal(_))) {
        Expr::Literal(Value::Array(
            items
                .into_iter()
                .map(|e| match e {
                    Expr::Literal(v) => v,
                    _ => unreachable!(),
                })
                .collect(),
        ))
    } else {
        Expr::Array(items)
    }
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;
    use std::sync::Arc;

    use super::*;
    use crate::blackboard::BlackboardEntry;
    use crate::value::json;

    struct TestScope {
        event: Option<BlackboardEvent>,
        board: HashMap<String, Value>,
    }

    impl Scope for TestScope {
        fn event(&self) -> Option<&BlackboardEvent> {
            self.event.as_ref()
        }
        fn lookup(&self, root: &str) -> Option<&Value> {
            if root == "event" {
                return self.event.as_ref().map(|e| &e.entry.value);
            }
            self.board.get(root)
        }
    }

    fn scope(key: &str, value: Value) -> TestScope {
        let event = BlackboardEvent {
            kind: EventKind::Posted,
            entry: BlackboardEntry { key: key.into(), value: value.clone(), source: "x".into(), seq: 1 },
            session_id: Arc::from("s"),
        };
        TestScope { event: Some(event), board: HashMap::from([(key.to_owned(), value)]) }
    }

    #[test]
    fn parses_a_rule_file() {
        let text = r#"
            # comment
            ALLOW NLG
            RULE 01 PRIORITY 10
            IF event == MIC_Event
            THEN EXECUTE ASR WITH MIC_Event.bytes
            RULE 03:clarify PRIORITY 10
            IF event == NLU_Event AND NLU_Event.user_intent.confidence <= 0.7
            THEN POST Dialog_State {"asked": true}; POST NLG_Event {"utterance": "say again; please"}
        "#;
        let set = RuleSet::parse(text).unwrap();
        assert_eq!(set.rules.len(), 2);
        assert!(set.allow.contains("NLG"));
        let r3 = &set.rules[1];
        assert_eq!(r3.family(), "03");
        assert_eq!(r3.condition.len(), 2);
        assert_eq!(r3.actions.len(), 2);
        assert_eq!(
            r3.actions[1],
            Action::Post { key: "NLG_Event".into(), value: Expr::Literal(json!({"utterance": "say again; please"})) }
        );
    }

    #[test]
    fn priority_then_declaration_order() {
        let text = "RULE a PRIORITY 1\nIF true\nTHEN POST A 1\nRULE b PRIORITY 5\nIF true\nTHEN POST B 1\nRULE c PRIORITY 1\nIF true\nTHEN POST C 1\n";
        let names: Vec<_> = RuleSet::parse(text).unwrap().rules.iter().map(|r| r.name.clone()).collect();
        assert_eq!(names, ["b", "a", "c"]);
    }

    #[test]
    fn duplicate_names_rejected() {
        let text = "RULE a\nIF true\nTHEN POST A 1\nRULE a\nIF true\nTHEN POST A 2\n";
        assert_eq!(RuleSet::parse(text), Err(RuleError::DuplicateRuleName("a".into())));
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        match RuleSet::parse("RULE a\nIF x ~ 3\nTHEN POST A 1") {
            Err(RuleError::Parse { line: 2, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        assert!(RuleSet::parse("RULE a\nIF true\n").is_err());
        assert!(RuleSet::parse("THEN POST A 1").is_err());
    }

    #[test]
    fn comparisons() {
        let s = scope("NLU_Event", json!({"user_intent": {"confidence": 0.9}}));
        let p = parse_predicate("NLU_Event.user_intent.confidence > 0.7").unwrap();
        assert!(p.eval(&s).unwrap());
        let p = parse_predicate("NLU_Event.user_intent.confidence <= 0.7").unwrap();
        assert!(!p.eval(&s).unwrap());
        let p = parse_predicate("Missing.flag != true").unwrap();
        assert!(p.eval(&s).unwrap());
        let p = parse_predicate("Missing.flag == null").unwrap();
        assert!(p.eval(&s).unwrap());
        let p = parse_predicate("NLU_Event.user_intent.confidence == 0.9").unwrap();
        assert!(p.eval(&s).unwrap());
    }

    #[test]
    fn ordering_on_non_numbers_is_an_error() {
        let s = scope("X", json!({"a": "text"}));
        assert!(parse_predicate("X.a > 1").unwrap().eval(&s).is_err());
        assert!(parse_predicate("X.missing < 1").unwrap().eval(&s).is_err());
    }

    #[test]
    fn integer_and_float_compare_equal() {
        let s = scope("X", json!({"n": 1}));
        assert!(parse_predicate("X.n == 1.0").unwrap().eval(&s).unwrap());
    }

    #[test]
    fn event_predicates_match_kind_and_key() {
        let s = scope("MIC_Event", json!({}));
        assert!(Predicate::EventIs("MIC_Event".into()).eval(&s).unwrap());
        assert!(!Predicate::EventIs("ASR_Event".into()).eval(&s).unwrap());
        assert!(!Predicate::RemovedIs("MIC_Event".into()).eval(&s).unwrap());
    }

    #[test]
    fn conjunction_short_circuits() {
        let s = scope("MIC_Event", json!({}));
        let cond = parse_condition("event == NLU_Event AND NLU_Event.c > 0.7").unwrap();
        assert_eq!(eval_all(&cond, &s), Ok(false));
    }

    #[test]
    fn templates_project_into_place() {
        let s = scope("ASR_Event", json!({"utterance": "hi"}));
        let e = parse_expr(r#"{"text": ASR_Event.utterance, "list": [1, event.utterance], "n": null}"#).unwrap();
        assert_eq!(e.eval(&s), json!({"text": "hi", "list": [1, "hi"], "n": null}));
        assert_eq!(parse_expr("ASR_Event.nope").unwrap().eval(&s), Value::Null);
        assert_eq!(parse_expr("-2.5").unwrap(), Expr::Literal(json!(-2.5)));
        assert!(parse_expr("{\"a\" 1}").is_err());
        assert!(parse_expr("\"open").is_err());
    }

    #[test]
    fn and_inside_strings_is_not_a_separator() {
        let cond = parse_condition(r#"X.a == "salt AND pepper" AND X.b == 1"#).unwrap();
        assert_eq!(cond.len(), 2);
        let s = scope("X", json!({"a": "salt AND pepper", "b": 1}));
        assert_eq!(eval_all(&cond, &s), Ok(true));
    }
}
