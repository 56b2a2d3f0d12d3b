//! Session bookkeeping without I/O: user and device bindings, activity
//! clocks and the ACTIVE / PAUSED / DISCONNECTED / CLOSED lifecycle.

use std::collections::{BTreeSet, HashMap};

use thiserror::Error;

use crate::broker::ConnId;
use crate::wire::MAX_SESSION_ID_LEN;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SessionStatus {
    Active,
    Paused,
    Disconnected,
    Closed,
}

impl SessionStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            SessionStatus::Active => "ACTIVE",
            SessionStatus::Paused => "PAUSED",
            SessionStatus::Disconnected => "DISCONNECTED",
            SessionStatus::Closed => "CLOSED",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransitionCause {
    Idle,
    Activity,
    Reconnect,
    Retention,
    /// An explicit close walks the session down the chain in one step.
    Close,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionTransition {
    pub session_id: String,
    pub from: SessionStatus,
    pub to: SessionStatus,
    pub cause: TransitionCause,
    pub at_us: u64,
}

/// The only transitions a session may take.
pub fn is_allowed(from: SessionStatus, to: SessionStatus) -> bool {
    use SessionStatus::*;
    matches!(
        (from, to),
        (Active, Paused) | (Paused, Active) | (Paused, Disconnected) | (Disconnected, Active) | (Disconnected, Closed)
    )
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionRecord {
    pub session_id: String,
    pub user_key: String,
    pub status: SessionStatus,
    pub devices: BTreeSet<ConnId>,
    pub last_activity_us: u64,
    pub created_us: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SessionTimeouts {
    pub inactivity_us: u64,
    pub grace_us: u64,
    pub retention_us: u64,
}

impl Default for SessionTimeouts {
    fn default() -> Self {
        SessionTimeouts {
            inactivity_us: 5 * 60 * 1_000_000,
            grace_us: 10 * 60 * 1_000_000,
            retention_us: 60 * 60 * 1_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SessionError {
    #[error("device {device} is already bound to session `{session}`")]
    DeviceAlreadyBound { device: ConnId, session: String },
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("invalid user key: {0}")]
    InvalidUserKey(String),
    #[error("session manager stopped")]
    ManagerStopped,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Opened {
    pub record: SessionRecord,
    pub created: bool,
    pub transition: Option<SessionTransition>,
}

#[derive(Debug, Default)]
pub struct SessionTable {
    timeouts: SessionTimeouts,
    records: HashMap<String, SessionRecord>,
    by_user: HashMap<String, String>,
    by_device: HashMap<ConnId, String>,
    generations: HashMap<String, u32>,
    log: Vec<SessionTransition>,
    log_capacity: usize,
    closed: u64,
}

impl SessionTable {
    pub fn new(timeouts: SessionTimeouts) -> Self {
        SessionTable { timeouts, log_capacity: 100_000, ..Default::default() }
    }

    pub fn timeouts(&self) -> SessionTimeouts {
        self.timeouts
    }

    /// Binds `device` to the user's session, creating the session if the
    /// user has none that is still open.
    pub fn open(&mut self, user_key: &str, device: ConnId, now_us: u64) -> Result<Opened, SessionError> {
        if user_key.is_empty() {
            return Err(SessionError::InvalidUserKey("empty".into()));
        }
        if let Some(bound) = self.by_device.get(&device) {
            if self.by_user.get(user_key) != Some(bound) {
                return Err(SessionError::DeviceAlreadyBound { device, session: bound.clone() });
            }
        }
        if let Some(session_id) = self.by_user.get(user_key).cloned() {
            let transition = self.touch(&session_id, now_us)?;
            let record = self.records.get_mut(&session_id).expect("indexed session exists");
            record.devices.insert(device);
            self.by_device.insert(device, session_id);
            return Ok(Opened { record: record.clone(), created: false, transition });
        }

        let generation = self.generations.entry(user_key.to_owned()).or_insert(0);
        *generation += 1;
        let session_id = if *generation == 1 { format!("s-{user_key}") } else { format!("s-{user_key}-{generation}") };
        if session_id.len() > MAX_SESSION_ID_LEN {
            return Err(SessionError::InvalidUserKey(format!("longer than {} bytes", MAX_SESSION_ID_LEN - 8)));
        }
        let record = SessionRecord {
            session_id: session_id.clone(),
            user_key: user_key.to_owned(),
            status: SessionStatus::Active,
            devices: BTreeSet::from([device]),
            last_activity_us: now_us,
            created_us: now_us,
        };
        self.by_user.insert(user_key.to_owned(), session_id.clone());
        self.by_device.insert(device, session_id.clone());
        self.records.insert(session_id, record.clone());
        Ok(Opened { record, created: true, transition: None })
    }

    /// Records activity. A PAUSED or DISCONNECTED session becomes ACTIVE.
    pub fn touch(&mut self, session_id: &str, now_us: u64) -> Result<Option<SessionTransition>, SessionError> {
        let record = self
            .records
            .get_mut(session_id)
            .ok_or_else(|| SessionError::UnknownSession(session_id.to_owned()))?;
        record.last_activity_us = record.last_activity_us.max(now_us);
        let cause = match record.status {
            SessionStatus::Active => return Ok(None),
            SessionStatus::Paused => TransitionCause::Activity,
            SessionStatus::Disconnected => TransitionCause::Reconnect,
            SessionStatus::Closed => return Err(SessionError::UnknownSession(session_id.to_owned())),
        };
        let t = SessionTransition {
            session_id: session_id.to_owned(),
            from: record.status,
            to: SessionStatus::Active,
            cause,
            at_us: now_us,
        };
        record.status = SessionStatus::Active;
        self.push_log(t.clone());
        Ok(Some(t))
    }

    /// Forgets a device; its session stays open.
    pub fn unbind_device(&mut self, device: ConnId) -> Option<String> {
        let session_id = self.by_device.remove(&device)?;
        if let Some(record) = self.records.get_mut(&session_id) {
            record.devices.remove(&device);
        }
        Some(session_id)
    }

    /// Moves idle sessions down the lifecycle. A long-idle session may take
    /// several steps in one sweep. Returns the transitions in order.
    pub fn sweep(&mut self, now_us: u64) -> Vec<SessionTransition> {
        let t = self.timeouts;
        let mut ids: Vec<&String> = self.records.keys().collect();
        ids.sort();
        let ids: Vec<String> = ids.into_iter().cloned().collect();
        let mut out = Vec::new();
        for id in ids {
            loop {
                let record = &self.records[&id];
                let idle = now_us.saturating_sub(record.last_activity_us);
                let next = match record.status {
                    SessionStatus::Active if idle > t.inactivity_us => (SessionStatus::Paused, TransitionCause::Idle),
                    SessionStatus::Paused if idle > t.inactivity_us + t.grace_us => {
                        (SessionStatus::Disconnected, TransitionCause::Idle)
                    }
                    SessionStatus::Disconnected if idle > t.inactivity_us + t.grace_us + t.retention_us => {
                        (SessionStatus::Closed, TransitionCause::Retention)
                    }
                    _ => break,
                };
                out.push(self.step(&id, next.0, next.1, now_us));
                if next.0 == SessionStatus::Closed {
                    break;
                }
            }
        }
        out
    }

    fn step(&mut self, session_id: &str, to: SessionStatus, cause: TransitionCause, now_us: u64) -> SessionTransition {
        let record = self.records.get_mut(session_id).expect("stepping a known session");
        let t = SessionTransition { session_id: session_id.to_owned(), from: record.status, to, cause, at_us: now_us };
        record.status = to;
        if to == SessionStatus::Closed {
            self.finalize(session_id);
        }
        self.push_log(t.clone());
        t
    }

    fn finalize(&mut self, session_id: &str) {
        if let Some(record) = self.records.remove(session_id) {
            for device in &record.devices {
                self.by_device.remove(device);
            }
            if self.by_user.get(&record.user_key).map(String::as_str) == Some(session_id) {
                self.by_user.remove(&record.user_key);
            }
            self.closed += 1;
        }
    }

    /// Closes a session now, walking it through the remaining states.
    /// Returns the devices that were bound and the transitions taken.
    pub fn close(&mut self, session_id: &str, now_us: u64) -> Result<(Vec<ConnId>, Vec<SessionTransition>), SessionError> {
        let record = self
            .records
            .get(session_id)
            .ok_or_else(|| SessionError::UnknownSession(session_id.to_owned()))?;
        let devices: Vec<ConnId> = record.devices.iter().copied().collect();
        let path: &[SessionStatus] = match record.status {
            SessionStatus::Active => &[SessionStatus::Paused, SessionStatus::Disconnected, SessionStatus::Closed],
            SessionStatus::Paused => &[SessionStatus::Disconnected, SessionStatus::Closed],
            SessionStatus::Disconnected => &[SessionStatus::Closed],
            SessionStatus::Closed => return Err(SessionError::UnknownSession(session_id.to_owned())),
        };
        let transitions = path.iter().map(|to| self.step(session_id, *to, TransitionCause::Close, now_us)).collect();
        Ok((devices, transitions))
    }

    fn push_log(&mut self, t: SessionTransition) {
        if self.log.len() >= self.log_capacity {
            self.log.drain(..self.log_capacity / 2);
        }
        self.log.push(t);
    }

    pub fn get(&self, session_id: &str) -> Option<&SessionRecord> {
        self.records.get(session_id)
    }

    pub fn session_of_device(&self, device: ConnId) -> Option<&str> {
        self.by_device.get(&device).map(String::as_str)
    }

    pub fn session_of_user(&self, user_key: &str) -> Option<&str> {
        self.by_user.get(user_key).map(String::as_str)
    }

    pub fn records(&self) -> impl Iterator<Item = &SessionRecord> {
        self.records.values()
    }

    pub fn log(&self) -> &[SessionTransition] {
        &self.log
    }

    pub fn live_count(&self) -> usize {
        self.records.len()
    }

    pub fn closed_count(&self) -> u64 {
        self.closed
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MS: u64 = 1_000;

    fn table() -> SessionTable {
        SessionTable::new(SessionTimeouts { inactivity_us: 100 * MS, grace_us: 200 * MS, retention_us: 300 * MS })
    }

    #[test]
    fn devices_of_one_user_share_a_session() {
        let mut t = table();
        let phone = t.open("bob", 1, 0).unwrap();
        assert!(phone.created);
        assert_eq!(phone.record.session_id, "s-bob");
        let tablet = t.open("bob", 2, 0).unwrap();
        assert!(!tablet.created);
        assert_eq!(tablet.record.devices, BTreeSet::from([1, 2]));
        assert_eq!(t.open("alice", 3, 0).unwrap().record.session_id, "s-alice");
        assert_eq!(
            t.open("alice", 1, 0),
            Err(SessionError::DeviceAlreadyBound { device: 1, session: "s-bob".into() })
        );
    }

    #[test]
    fn idle_thresholds_are_strict_and_cascade() {
        let mut t = table();
        t.open("bob", 1, 0).unwrap();
        assert!(t.sweep(100 * MS).is_empty());
        let steps = t.sweep(100 * MS + 1);
        assert_eq!(steps[0].to, SessionStatus::Paused);
        let all = t.sweep(10_000 * MS);
        let path: Vec<_> = all.iter().map(|s| s.to).collect();
        assert_eq!(path, [SessionStatus::Disconnected, SessionStatus::Closed]);
        assert!(t.get("s-bob").is_none());
        assert!(t.log().iter().all(|s| is_allowed(s.from, s.to)));
    }

    #[test]
    fn activity_reactivates() {
        let mut t = table();
        t.open("bob", 1, 0).unwrap();
        t.sweep(101 * MS);
        let back = t.touch("s-bob", 150 * MS).unwrap().unwrap();
        assert_eq!((back.from, back.to, back.cause), (SessionStatus::Paused, SessionStatus::Active, TransitionCause::Activity));
        assert!(t.sweep(160 * MS).is_empty());
    }

    #[test]
    fn close_is_terminal_and_reopen_is_fresh() {
        let mut t = table();
        t.open("bob", 1, 0).unwrap();
        t.open("bob", 2, 0).unwrap();
        let (devices, path) = t.close("s-bob", 5).unwrap();
        assert_eq!(devices, [1, 2]);
        assert_eq!(path.last().unwrap().to, SessionStatus::Closed);
        assert!(path.iter().all(|s| is_allowed(s.from, s.to)));
        assert_eq!(t.close("s-bob", 6), Err(SessionError::UnknownSession("s-bob".into())));
        let again = t.open("bob", 1, 7).unwrap();
        assert!(again.created);
        assert_eq!(again.record.session_id, "s-bob-2");
    }

    #[test]
    fn unbinding_a_device_keeps_the_session() {
        let mut t = table();
        t.open("bob", 1, 0).unwrap();
        assert_eq!(t.unbind_device(1).as_deref(), Some("s-bob"));
        assert!(t.get("s-bob").unwrap().devices.is_empty());
        assert_eq!(t.get("s-bob").unwrap().status, SessionStatus::Active);
    }
}
