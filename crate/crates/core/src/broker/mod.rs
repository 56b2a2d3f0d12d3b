//! Service-oriented reliable-queuing broker: a service directory with
//! heartbeat liveness, round-robin dispatch, request/reply correlation,
//! circuit breaking and fan-out of unsolicited worker traffic.

mod server;
pub mod state;

pub use server::{start_broker, BrokerCommand, BrokerHandle, BrokerOptions, BrokerSnapshot, CommandSender, DeviceInput};
pub use state::{
    BrokerConfig, BrokerState, BrokerStats, CircuitPhase, CircuitState, ConnId, RouteError, ServiceRecord, Transition,
    WorkerState,
};
