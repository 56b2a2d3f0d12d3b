//! A component that lets a session's rules ask another session for a
//! capability through the session manager.

use futures::FutureExt;
use serde_json::json;

use super::manager::{WeakSessionManager, MANAGER_RESOURCE, RELAY_REPLY_KEY};
use crate::registry::{Component, ComponentDescriptor, ExecContext, ExecError, Execution, StateType};
use crate::value::Value;

pub const XSESSION_COMPONENT: &str = "xsession";

struct XSession {
    manager: Option<WeakSessionManager>,
}

impl Component for XSession {
    /// Input: `{capability, payload, target?}`. Output:
    /// `{capability, from_session, request_id, payload}`.
    fn execute(&mut self, input: Value, ctx: &ExecContext) -> Execution {
        let Some(manager) = self.manager.as_ref().and_then(WeakSessionManager::upgrade) else {
            return Execution::Ready(Err(ExecError::ComponentFailed("no session manager".into())));
        };
        let Some(capability) = input.get("capability").and_then(Value::as_str).map(str::to_owned) else {
            return Execution::Ready(Err(ExecError::ComponentFailed("missing capability".into())));
        };
        let target = input.get("target").and_then(Value::as_str).map(str::to_owned);
        let payload = input.get("payload").cloned().unwrap_or(Value::Null);
        let from = ctx.session_id.to_string();
        Execution::Deferred(
            async move {
                let out = manager
                    .relay_cross_session(&from, target.as_deref(), &capability, payload)
                    .await
                    .map_err(|e| ExecError::ComponentFailed(format!("{}: {e}", e.code())))?;
                Ok(json!({
                    "capability": capability,
                    "from_session": out.target,
                    "request_id": out.request_id,
                    "payload": out.payload,
                }))
            }
            .boxed(),
        )
    }
}

/// Descriptor of the relay component. Its results land under the relay
/// reply key of the requesting session.
pub fn xsession_descriptor() -> ComponentDescriptor {
    ComponentDescriptor::local(XSESSION_COMPONENT, StateType::Stateless, |ctx| {
        let manager = ctx.locator.service::<WeakSessionManager>(MANAGER_RESOURCE).map(|m| (*m).clone());
        Box::new(XSession { manager })
    })
    .output(RELAY_REPLY_KEY, None)
}
