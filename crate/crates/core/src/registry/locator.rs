use std::any::Any;
use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use crate::value::Value;

/// Something a component factory can pull in by name.
#[derive(Clone)]
pub enum Resource {
    Component(String),
    Endpoint(String),
    Store(Value),
    Service(Arc<dyn Any + Send + Sync>),
}

impl fmt::Debug for Resource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Resource::Component(id) => write!(f, "Component({id})"),
            Resource::Endpoint(ep) => write!(f, "Endpoint({ep})"),
            Resource::Store(v) => write!(f, "Store({v})"),
            Resource::Service(_) => f.write_str("Service(..)"),
        }
    }
}

impl Resource {
    pub fn same_as(&self, other: &Resource) -> bool {
        match (self, other) {
            (Resource::Component(a), Resource::Component(b)) => a == b,
            (Resource::Endpoint(a), Resource::Endpoint(b)) => a == b,
            (Resource::Store(a), Resource::Store(b)) => a == b,
            (Resource::Service(a), Resource::Service(b)) => Arc::ptr_eq(a, b),
            _ => false,
        }
    }
}

/// Named references to components, endpoints, data stores and service
/// handles. Owned by the registry; factories read it at instance creation.
#[derive(Debug, Default, Clone)]
pub struct ResourceLocator {
    entries: HashMap<String, Resource>,
}

impl ResourceLocator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Replaces and returns any previous resource under `name`.
    pub fn provide(&mut self, name: &str, resource: Resource) -> Option<Resource> {
        self.entries.insert(name.to_owned(), resource)
    }

    pub fn get(&self, name: &str) -> Option<&Resource> {
        self.entries.get(name)
    }

    pub fn store(&self, name: &str) -> Option<&Value> {
        match self.entries.get(name)? {
            Resource::Store(v) => Some(v),
            _ => None,
        }
    }

    pub fn endpoint(&self, name: &str) -> Option<&str> {
        match self.entries.get(name)? {
            Resource::Endpoint(ep) => Some(ep),
            _ => None,
        }
    }

    pub fn service<T: Any + Send + Sync>(&self, name: &str) -> Option<Arc<T>> {
        match self.entries.get(name)? {
            Resource::Service(handle) => handle.clone().downcast::<T>().ok(),
            _ => None,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::value::json;

    #[test]
    fn lookup_is_stable_until_replaced() {
        let mut loc = ResourceLocator::new();
        loc.provide("kb", Resource::Store(json!({"v": 1})));
        let first = loc.get("kb").cloned().unwrap();
        assert!(loc.get("kb").unwrap().same_as(&first));
        assert!(loc.provide("kb", Resource::Store(json!({"v": 2}))).is_some());
        assert!(!loc.get("kb").unwrap().same_as(&first));
    }

    #[test]
    fn typed_service_lookup() {
        let mut loc = ResourceLocator::new();
        loc.provide("answer", Resource::Service(Arc::new(42u32)));
        assert_eq!(*loc.service::<u32>("answer").unwrap(), 42);
        assert!(loc.service::<String>("answer").is_none());
        assert!(loc.service::<u32>("missing").is_none());
        loc.provide("ep", Resource::Endpoint("tcp://127.0.0.1:5555".into()));
        assert_eq!(loc.endpoint("ep"), Some("tcp://127.0.0.1:5555"));
        assert_eq!(loc.store("ep"), None);
    }
}
