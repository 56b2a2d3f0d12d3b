//! Middleware for multi-device personal assistants: a service broker, per-session
//! blackboards with rule and workflow orchestration, pluggable components and a
//! session manager, plus mock services and a latency benchmark.

pub mod bench;
pub mod blackboard;
pub mod broker;
pub mod client;
pub mod clock;
pub mod config;
pub mod demo;
pub mod connection;
pub mod orchestrator;
pub mod registry;
pub mod server;
pub mod session;
pub mod value;
pub mod wire;
pub mod worker;
