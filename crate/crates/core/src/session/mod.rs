//! Sessions: one per user, shared by all of that user's devices. Each
//! session owns a blackboard and an orchestrator.

mod manager;
mod table;
mod xsession;

pub use manager::{
    inbound_key, service_for_key, RelayError, RelayOutcome, SessionInfo, SessionManager, SessionManagerConfig,
    SessionManagerHandle, SessionParts, WeakSessionManager, LOCAL_DEVICE_BASE, MANAGER_RESOURCE, MANAGER_SOURCE,
    RELAY_REPLY_KEY, RELAY_REQUEST_KEY,
};
pub use table::{
    is_allowed, Opened, SessionError, SessionRecord, SessionStatus, SessionTable, SessionTimeouts, SessionTransition,
    TransitionCause,
};
pub use xsession::{xsession_descriptor, XSESSION_COMPONENT};
