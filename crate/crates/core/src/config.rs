//! Server settings. Sources are layered: built-in defaults, then a
//! `key = value` file, then `AMESH_*` environment variables, then flags.

use std::time::Duration;

use thiserror::Error;

use crate::broker::BrokerConfig;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServerConfig {
    pub host: String,
    pub port: u16,
    pub heartbeat_ms: u64,
    pub liveness_factor: u32,
    pub request_timeout_ms: u64,
    pub stats_every_ms: u64,
    pub session_timeout_ms: u64,
    pub grace_ms: u64,
    pub retention_ms: u64,
    pub relay_timeout_ms: u64,
    pub failure_threshold: u32,
    pub cooldown_ms: u64,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            host: "127.0.0.1".into(),
            port: 5555,
            heartbeat_ms: 2_500,
            liveness_factor: 3,
            request_timeout_ms: 30_000,
            stats_every_ms: 0,
            session_timeout_ms: 5 * 60_000,
            grace_ms: 10 * 60_000,
            retention_ms: 60 * 60_000,
            relay_timeout_ms: 5_000,
            failure_threshold: 5,
            cooldown_ms: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown setting `{0}`")]
    UnknownKey(String),
    #[error("bad value `{value}` for `{key}`")]
    BadValue { key: String, value: String },
}

pub const KEYS: [&str; 12] = [
    "host",
    "port",
    "heartbeat_ms",
    "liveness_factor",
    "request_timeout_ms",
    "stats_every_ms",
    "session_timeout_ms",
    "grace_ms",
    "retention_ms",
    "relay_timeout_ms",
    "failure_threshold",
    "cooldown_ms",
];

impl ServerConfig {
    /// Applies one setting. Keys accept `-` in place of `_`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let key = key.trim().to_ascii_lowercase().replace('-', "_");
        let value = value.trim();
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
            value.parse().map_err(|_| ConfigError::BadValue { key: key.to_owned(), value: value.to_owned() })
        }
        match key.as_str() {
            "host" => self.host = value.to_owned(),
            "port" => self.port = num(&key, value)?,
            "heartbeat_ms" => self.heartbeat_ms = num(&key, value)?,
            "liveness_factor" => self.liveness_factor = num(&key, value)?,
            "request_timeout_ms" => self.request_timeout_ms = num(&key, value)?,
            "stats_every_ms" => self.stats_every_ms = num(&key, value)?,
            "session_timeout_ms" => self.session_timeout_ms = num(&key, value)?,
            "grace_ms" => self.grace_ms = num(&key, value)?,
            "retention_ms" => self.retention_ms = num(&key, value)?,
            "relay_timeout_ms" => self.relay_timeout_ms = num(&key, value)?,
            "failure_threshold" => self.failure_threshold = num(&key, value)?,
            "cooldown_ms" => self.cooldown_ms = num(&key, value)?,
            _ => return Err(ConfigError::UnknownKey(key)),
        }
        Ok(())
    }

    pub fn apply_file(&mut self, text: &str) -> Result<(), ConfigError> {
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::Syntax { line: idx + 1 })?;
            self.set(key, value)?;
        }
        Ok(())
    }

    /// Reads `AMESH_PORT`, `AMESH_HEARTBEAT_MS`, ... from `vars`.
    pub fn apply_env<I, K, V>(&mut self, vars: I) -> Result<(), ConfigError>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        for (name, value) in vars {
            let Some(key) = name.as_ref().strip_prefix("AMESH_") else { continue };
            let key = key.to_ascii_lowercase();
            if KEYS.contains(&key.as_str()) {
                self.set(&key, value.as_ref())?;
            }
        }
        Ok(())
    }

    pub fn broker(&self) -> BrokerConfig {
        BrokerConfig {
            heartbeat_interval_us: self.heartbeat_ms * 1_000,
            liveness_factor: self.liveness_factor,
            request_timeout_us: self.request_timeout_ms * 1_000,
            failure_threshold: self.failure_threshold,
            cooldown_us: self.cooldown_ms * 1_000,
            ..BrokerConfig::default()
        }
    }

    pub fn stats_every(&self) -> Option<Duration> {
        (self.stats_every_ms > 0).then(|| Duration::from_millis(self.stats_every_ms))
    }

    pub fn bind_addr(&self) -> String {
        format!("{}:{}", self.host, self.port)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layers_apply_in_order() {
        let mut cfg = ServerConfig::default();
        cfg.apply_file("# base\nport = 6000\nheartbeat-ms = 100 # trailing\n").unwrap();
        assert_eq!((cfg.port, cfg.heartbeat_ms), (6000, 100));
        cfg.apply_env([("AMESH_PORT", "7000"), ("PATH", "/bin"), ("AMESH_UNRELATED", "x")]).unwrap();
        assert_eq!(cfg.port, 7000);
        cfg.set("port", "8000").unwrap();
        assert_eq!(cfg.port, 8000);
        assert_eq!(cfg.heartbeat_ms, 100);
    }

    #[test]
    fn bad_input_is_reported() {
        let mut cfg = ServerConfig::default();
        assert_eq!(cfg.apply_file("port 5"), Err(ConfigError::Syntax { line: 1 }));
        assert!(matches!(cfg.apply_file("nope = 1"), Err(ConfigError::UnknownKey(_))));
        assert!(matches!(cfg.set("port", "99999"), Err(ConfigError::BadValue { .. })));
    }

    #[test]
    fn broker_settings_convert_to_micros() {
        let cfg = ServerConfig { heartbeat_ms: 10, request_timeout_ms: 20, ..Default::default() };
        let b = cfg.broker();
        assert_eq!((b.heartbeat_interval_us, b.request_timeout_us, b.failure_threshold), (10_000, 20_000, 5));
    }
}
