//! Workflow graphs: nodes are components, edges are guarded triggers.
//!
//! ```text
//! NODE <component>
//! EDGE <from> -> <to> [WHEN <predicate> [AND <predicate>]...]
//! ENTRY <EventKey> -> <node>
//! ```
//!
//! Joins are OR-joins: a node runs once per satisfied incoming edge.

use std::collections::BTreeSet;

use thiserror::Error;

use super::rules::{parse_condition, Predicate};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WorkflowError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unknown node `{0}`")]
    UnknownNode(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub from: String,
    pub to: String,
    pub guard: Vec<Predicate>,
}

impl Edge {
    pub fn id(&self) -> String {
        format!("{}->{}", self.from, self.to)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WorkflowGraph {
    pub nodes: BTreeSet<String>,
    pub edges: Vec<Edge>,
    pub entries: Vec<(String, String)>,
    pub allow: BTreeSet<String>,
}

impl WorkflowGraph {
    pub fn parse(text: &str) -> Result<Self, WorkflowError> {
        let mut graph = WorkflowGraph::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| WorkflowError::Parse { line: idx + 1, message };
            let (head, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
            let rest = rest.trim();
            match head {
                "NODE" => {
                    if rest.is_empty() || rest.contains(char::is_whitespace) {
                        return Err(err("expected `NODE <id>`".into()));
                    }
                    graph.nodes.insert(rest.to_owned());
                }
                "ALLOW" => graph.allow.extend(rest.split_whitespace().map(str::to_owned)),
                "EDGE" => {
                    let (arrow, guard) = match rest.split_once(" WHEN ") {
                        Some((a, g)) => (a, Some(g)),
                        None => (rest, None),
                    };
                    let (from, to) = split_arrow(arrow).ok_or_else(|| err("expected `EDGE a -> b`".into()))?;
                    let guard = match guard {
                        Some(g) => parse_condition(g.trim()).map_err(err)?,
                        None => vec![Predicate::True],
                    };
                    graph.edges.push(Edge { from, to, guard });
                }
                "ENTRY" => {
                    let (key, node) = split_arrow(rest).ok_or_else(|| err("expected `ENTRY Key -> node`".into()))?;
                    graph.entries.push((key, node));
                }
                other => return Err(err(format!("unknown directive `{other}`"))),
            }
        }
        graph.validate()?;
        Ok(graph)
    }

    /// Every edge and entry must reference a declared node.
    pub fn validate(&self) -> Result<(), WorkflowError> {
        let referenced = self
            .edges
            .iter()
            .flat_map(|e| [&e.from, &e.to])
            .chain(self.entries.iter().map(|(_, n)| n));
        for node in referenced {
            if !self.nodes.contains(node) {
                return Err(WorkflowError::UnknownNode(node.clone()));
            }
        }
        Ok(())
    }

    pub fn entry_nodes<'a>(&'a self, key: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.entries.iter().filter(move |(k, _)| k == key).map(|(_, n)| n.as_str())
    }

    pub fn outgoing<'a>(&'a self, node: &'a str) -> impl Iterator<Item = &'a Edge> + 'a {
        self.edges.iter().filter(move |e| e.from == node)
    }
}

fn split_arrow(text: &str) -> Option<(String, String)> {
    let (a, b) = text.split_once("->")?;
    let (a, b) = (a.trim(), b.trim());
    if a.is_empty() || b.is_empty() || a.contains(char::is_whitespace) || b.contains(char::is_whitespace) {
        return None;
    }
    Some((a.to_owned(), b.to_owned()))
}
