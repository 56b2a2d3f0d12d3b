use std::time::Duration;

use amesh::client::SessionClient;
use amesh::config::ServerConfig;
use amesh::orchestrator::{ControlProgram, OrchestratorConfig};
use amesh::registry::{ComponentDescriptor, Registry, StateType};
use amesh::server::Server;
use amesh::session::SessionManagerConfig;
use amesh::value::{json, Value};
use amesh::wire::ServiceType;
use amesh::worker::{handler, start_worker, WorkerOptions};

const T: Duration = Duration::from_secs(5);

async fn server(rules: &str) -> Server {
    let registry = Registry::spawn();
    registry
        .register(ComponentDescriptor::local("TTS", StateType::Stateless, |_| {
            Box::new(|v: Value| Ok(json!(format!("spoken:{}", v.as_str().unwrap_or("")))))
        }))
        .await
        .unwrap();
    let sessions = SessionManagerConfig {
        orchestrator: OrchestratorConfig { program: ControlProgram::rules(rules).unwrap(), ..Default::default() },
        ..Default::default()
    };
    let config = ServerConfig { port: 0, ..Default::default() };
    Server::start(&config, registry, sessions).await.unwrap()
}

#[tokio::test]
async fn device_event_reaches_component_and_output_is_pushed_back() {
    let server = server("RULE speak\nIF event == MIC_Event\nTHEN EXECUTE TTS WITH MIC_Event\n").await;
    let mut phone = SessionClient::connect(&server.endpoint(), "bob", "phone", T).await.unwrap();
    assert_eq!(phone.session_id(), "s-bob");
    phone.inject("MIC_Event", json!("hello")).unwrap();
    let event = phone.wait_for("TTS_Event", T).await.unwrap();
    assert_eq!(event.entry.value, json!("spoken:hello"));
    assert_eq!(event.entry.source, "TTS");

    let firings = phone.control("firings", Value::Null).await.unwrap();
    assert_eq!(firings["sequence"], json!(["speak"]));
    let got = phone.control("get", json!({"key": "MIC_Event"})).await.unwrap();
    assert_eq!(got["value"], json!("hello"));
    assert_eq!(got["source"], json!("external"));
    server.shutdown().await;
}

#[tokio::test]
async fn both_devices_of_a_user_see_session_output() {
    let server = server("RULE speak\nIF event == MIC_Event\nTHEN EXECUTE TTS WITH MIC_Event\n").await;
    let phone = SessionClient::connect(&server.endpoint(), "bob", "phone", T).await.unwrap();
    let mut tablet = SessionClient::connect(&server.endpoint(), "bob", "tablet", T).await.unwrap();
    let mut alice = SessionClient::connect(&server.endpoint(), "alice", "phone", T).await.unwrap();
    assert_eq!(tablet.session_id(), phone.session_id());
    phone.inject("MIC_Event", json!("hi")).unwrap();
    assert_eq!(tablet.wait_for("TTS_Event", T).await.unwrap().entry.value, json!("spoken:hi"));
    assert!(alice.wait_for("TTS_Event", Duration::from_millis(200)).await.is_err());
    server.shutdown().await;
}

#[tokio::test]
async fn direct_requests_are_routed_to_workers() {
    let server = server("").await;
    let _asr = start_worker(
        &server.endpoint(),
        ServiceType::Asr,
        handler(|v| Ok(json!({"text": v["audio"]}))),
        WorkerOptions::default(),
    )
    .await
    .unwrap();
    let phone = SessionClient::connect(&server.endpoint(), "bob", "phone", T).await.unwrap();
    let mut reply = Err(amesh::client::ClientError::Timeout);
    for _ in 0..50 {
        reply = phone.request(ServiceType::Asr, json!({"audio": "hello"})).await;
        if reply.is_ok() {
            break;
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    assert_eq!(reply.unwrap(), json!({"text": "hello"}));
    let snap = server.snapshot().await;
    assert_eq!(snap.workers.get("ASR"), Some(&1));
    server.shutdown().await;
}

#[tokio::test]
async fn control_close_disconnects_the_devices() {
    let server = server("").await;
    let phone = SessionClient::connect(&server.endpoint(), "bob", "phone", T).await.unwrap();
    let mut tablet = SessionClient::connect(&server.endpoint(), "bob", "tablet", T).await.unwrap();
    let closed = phone.control("close", Value::Null).await.unwrap();
    assert_eq!(closed["closed"], json!(true));
    let err = tablet.wait_for("anything", T).await.unwrap_err();
    assert!(matches!(err, amesh::client::ClientError::Disconnected(_)), "{err:?}");
    assert!(server.sessions().info("s-bob").await.is_none());
    server.shutdown().await;
}
