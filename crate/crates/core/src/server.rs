//! The server process: broker, component registry and session manager
//! wired together on one listener.

use std::time::Duration;

use tokio::net::TcpListener;

use crate::broker::{start_broker, BrokerHandle, BrokerOptions, BrokerSnapshot};
use crate::config::ServerConfig;
use crate::registry::RegistryHandle;
use crate::session::{SessionManager, SessionManagerConfig, SessionManagerHandle, SessionTimeouts};

impl ServerConfig {
    pub fn session_timeouts(&self) -> SessionTimeouts {
        SessionTimeouts {
            inactivity_us: self.session_timeout_ms * 1_000,
            grace_us: self.grace_ms * 1_000,
            retention_us: self.retention_ms * 1_000,
        }
    }

    /// Session settings from this config layered over `base`.
    pub fn session_manager(&self, base: SessionManagerConfig) -> SessionManagerConfig {
        let shortest = self.session_timeout_ms.min(self.grace_ms).min(self.retention_ms).max(4);
        SessionManagerConfig {
            timeouts: self.session_timeouts(),
            relay_timeout: Duration::from_millis(self.relay_timeout_ms),
            sweep_every: Some(Duration::from_millis((shortest / 4).clamp(1, 1_000))),
            ..base
        }
    }
}

pub struct Server {
    broker: BrokerHandle,
    manager: SessionManagerHandle,
    registry: RegistryHandle,
}

impl Server {
    /// Binds `config.bind_addr()` (port 0 picks a free port) and starts
    /// serving. Components should already be registered in `registry`.
    pub async fn start(
        config: &ServerConfig,
        registry: RegistryHandle,
        sessions: SessionManagerConfig,
    ) -> std::io::Result<Server> {
        let listener = TcpListener::bind(config.bind_addr()).await?;
        Self::on_listener(listener, config, registry, sessions)
    }

    pub fn on_listener(
        listener: TcpListener,
        config: &ServerConfig,
        registry: RegistryHandle,
        sessions: SessionManagerConfig,
    ) -> std::io::Result<Server> {
        let manager = SessionManager::spawn(config.session_manager(sessions), registry.clone());
        let options = BrokerOptions { config: config.broker(), stats_every: config.stats_every() };
        let broker = start_broker(listener, options, Some(manager.device_sender()))?;
        manager.attach_broker(broker.commands());
        Ok(Server { broker, manager, registry })
    }

    pub fn endpoint(&self) -> String {
        self.broker.endpoint()
    }

    pub fn broker(&self) -> &BrokerHandle {
        &self.broker
    }

    pub fn sessions(&self) -> &SessionManagerHandle {
        &self.manager
    }

    pub fn registry(&self) -> &RegistryHandle {
        &self.registry
    }

    pub async fn snapshot(&self) -> BrokerSnapshot {
        self.broker.snapshot().await
    }

    pub async fn shutdown(&self) {
        self.manager.shutdown();
        self.broker.shutdown();
        self.registry.shutdown().await;
    }
}
