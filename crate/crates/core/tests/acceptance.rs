//! End-to-end acceptance checks. Runs without the libtest harness so every
//! criterion prints exactly one PASS/FAIL line; exits non-zero on any FAIL.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use amesh::bench::{collect_overheads, percentile, run_bench, run_once, BenchConfig, MsgCount};
use amesh::broker::{BrokerConfig, BrokerState, CircuitPhase};
use amesh::client::{ClientError, SessionClient};
use amesh::config::ServerConfig;
use amesh::demo::scenarios::{run_scenario, Scenario};
use amesh::demo::{DemoServer, Mode, PIPELINE_RULES};
use amesh::orchestrator::{ControlProgram, OrchestratorConfig};
use amesh::registry::{Component, ComponentDescriptor, ExecContext, Execution, Registry, StateType};
use amesh::server::Server;
use amesh::session::{is_allowed, SessionManagerConfig, SessionStatus, SessionTable, SessionTimeouts};
use amesh::value::{json, Value};
use amesh::wire::{self, FrameReader, MessageEnvelope, MsgKind, ServiceType};
use amesh::worker::{handler, start_worker, FailurePattern, WorkerOptions};
use bytes::Bytes;
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---- wire ------------------------------------------------------------------

fn envelope_strategy() -> impl Strategy<Value = MessageEnvelope> {
    (
        prop::sample::select(MsgKind::ALL.to_vec()),
        prop::sample::select(ServiceType::ALL.to_vec()),
        "\\PC{0,60}",
        any::<u64>(),
        any::<u64>(),
        prop::collection::vec(any::<u8>(), 0..512),
    )
        .prop_map(|(kind, service, session_id, request_id, timestamp_us, payload)| MessageEnvelope {
            kind,
            session_id,
            service,
            request_id,
            timestamp_us,
            payload: Bytes::from(payload),
        })
}

fn wire_round_trip() -> Outcome {
    let started = Instant::now();
    let mut runner = TestRunner::new(PropConfig { cases: 10_000, failure_persistence: None, ..PropConfig::default() });
    runner
        .run(&envelope_strategy(), |env| {
            let bytes = wire::encode(&env).unwrap();
            prop_assert_eq!(bytes.len(), env.encoded_len());
            prop_assert_eq!(&wire::decode_exact(&bytes).unwrap(), &env);
            Ok(())
        })
        .map_err(|e| format!("round trip: {e}"))?;

    // Random byte strings, half of them starting with a valid header prefix.
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let valid = wire::encode(&MessageEnvelope::new(MsgKind::Request, ServiceType::Asr, "s-x").with_payload(&b"{}"[..]))
        .unwrap();
    let mut decoded = 0u32;
    for i in 0..100_000u32 {
        let len = rng.gen_range(0..96);
        let mut buf = vec![0u8; len];
        rng.fill_bytes(&mut buf);
        if i % 2 == 0 {
            let keep = rng.gen_range(0..=valid.len()).min(buf.len());
            buf[..keep].copy_from_slice(&valid[..keep]);
        }
        if wire::decode(&buf).is_ok() {
            decoded += 1;
        }
        let mut reader = FrameReader::new(1 << 16);
        reader.extend(&buf);
        for _ in 0..4 {
            match reader.next_frame() {
                Ok(Some(_)) => continue,
                _ => break,
            }
        }
    }
    let elapsed = started.elapsed();
    ensure(elapsed < Duration::from_secs(30), || format!("took {elapsed:?}"))?;
    Ok(format!("10000 round trips, 100000 fuzz inputs ({decoded} decoded) in {:.1}s", elapsed.as_secs_f64()))
}

// ---- rule sequences -----------------------------------------------------------

async fn listing_sequences() -> Outcome {
    let ideal = run_scenario(Scenario::Ideal, Mode::Local).await.map_err(|e| e.to_string())?;
    let clar = run_scenario(Scenario::Clarification, Mode::Local).await.map_err(|e| e.to_string())?;
    let got_ideal = ideal.session("s-demo").ok_or("no s-demo")?.families();
    let got_clar = clar.session("s-demo").ok_or("no s-demo")?.families();
    ensure(got_ideal == ["01", "02", "03", "04", "05"], || format!("ideal {got_ideal:?}"))?;
    ensure(got_clar == ["01", "02", "03", "05", "01", "02", "03", "06", "07"], || format!("clarification {got_clar:?}"))?;
    Ok(format!("ideal {got_ideal:?}, clarification {got_clar:?}"))
}

// ---- grocery ---------------------------------------------------------------

async fn grocery_integration() -> Outcome {
    let mut first: Option<String> = None;
    for run in 0..100 {
        let t = run_scenario(Scenario::Grocery, Mode::Local).await.map_err(|e| format!("run {run}: {e}"))?;
        for sid in ["s-alice", "s-bob"] {
            let s = t.session(sid).ok_or_else(|| format!("run {run}: no {sid}"))?;
            ensure(s.board.contains_key("Grocery_Decision"), || format!("run {run}: {sid} has no decision"))?;
        }
        let bob = t.session("s-bob").unwrap();
        ensure(bob.board.contains_key("Shared_List"), || format!("run {run}: list not shared"))?;
        let render = t.render();
        match &first {
            None => first = Some(render),
            Some(f) => ensure(*f == render, || format!("run {run} differs from run 0"))?,
        }
    }
    Ok("decision on both boards, 100 identical transcripts".into())
}

// ---- component state -----------------------------------------------------------

struct Counter {
    member: usize,
    calls: u64,
}

impl Component for Counter {
    fn execute(&mut self, _input: Value, _ctx: &ExecContext) -> Execution {
        self.calls += 1;
        Execution::Ready(Ok(json!({"member": self.member, "calls": self.calls})))
    }
}

fn counter(id: &str, state: StateType) -> ComponentDescriptor {
    ComponentDescriptor::local(id, state, |ctx| Box::new(Counter { member: ctx.member, calls: 0 }))
}

async fn state_semantics() -> Outcome {
    let reg = Registry::spawn();
    reg.register(counter("STATELESS", StateType::Stateless)).await.map_err(|e| e.to_string())?;
    reg.register(counter("STATEFUL", StateType::Stateful)).await.map_err(|e| e.to_string())?;
    let sessions: Vec<String> = (0..100).map(|i| format!("s-{i}")).collect();
    let mut stateless = BTreeSet::new();
    let mut stateful = BTreeSet::new();
    for sid in &sessions {
        reg.open_session(sid);
        stateless.insert(reg.resolve("STATELESS", sid).await.map_err(|e| e.to_string())?.instance_id);
        let a = reg.resolve("STATEFUL", sid).await.map_err(|e| e.to_string())?;
        let b = reg.resolve("STATEFUL", sid).await.map_err(|e| e.to_string())?;
        ensure(a == b, || format!("{sid}: stateful instance changed"))?;
        a.execute(json!(null), ExecContext::new(sid)).await.map_err(|e| e.to_string())?;
        let out = b.execute(json!(null), ExecContext::new(sid)).await.map_err(|e| e.to_string())?;
        ensure(out["calls"] == json!(2), || format!("{sid}: state leaked, {out}"))?;
        stateful.insert(a.instance_id);
    }
    ensure(stateless.len() == 1, || format!("{} stateless instances", stateless.len()))?;
    ensure(stateful.len() == 100, || format!("{} stateful instances", stateful.len()))?;

    let m = 20;
    for k in [2usize, 3, 5] {
        let id = format!("POOL{k}");
        reg.register(counter(&id, StateType::Pool(k))).await.map_err(|e| e.to_string())?;
        let mut per_member: BTreeMap<u64, usize> = BTreeMap::new();
        for i in 0..m * k {
            let r = reg.resolve(&id, &sessions[i % sessions.len()]).await.map_err(|e| e.to_string())?;
            let out = r.execute(json!(null), ExecContext::new(&sessions[0])).await.map_err(|e| e.to_string())?;
            *per_member.entry(out["member"].as_u64().unwrap_or(u64::MAX)).or_default() += 1;
        }
        ensure(per_member.len() == k && per_member.values().all(|c| *c == m), || format!("pool {k}: {per_member:?}"))?;
    }
    reg.shutdown().await;
    Ok("1 stateless instance, 100 stateful instances, pools 2/3/5 at exactly 20 each".into())
}

// ---- location transparency ----------------------------------------------------

async fn location_transparency() -> Outcome {
    let local = run_scenario(Scenario::Ideal, Mode::Local).await.map_err(|e| e.to_string())?;
    let remote = run_scenario(Scenario::Ideal, Mode::Remote).await.map_err(|e| e.to_string())?;
    let (l, r) = (local.session("s-demo").unwrap(), remote.session("s-demo").unwrap());
    ensure(l.families() == r.families(), || format!("{:?} vs {:?}", l.families(), r.families()))?;
    let values = |s: &amesh::demo::scenarios::SessionTranscript| {
        s.board.iter().map(|(k, (v, _))| (k.clone(), v.clone())).collect::<BTreeMap<_, _>>()
    };
    ensure(values(l) == values(r), || "final blackboards differ".into())?;
    ensure(local.render() == remote.render(), || "transcripts differ".into())?;
    Ok(format!("{} keys, firings {:?} in both modes", l.board.len(), l.families()))
}

// ---- latency ----------------------------------------------------------------

async fn latency() -> Vec<(&'static str, Outcome)> {
    let started = Instant::now();
    let config = ServerConfig { port: 0, ..Default::default() };
    let server = match DemoServer::start(Mode::Local, PIPELINE_RULES, &config).await {
        Ok(s) => s,
        Err(e) => return vec![("latency", Err(format!("server: {e}")))],
    };
    let endpoint = server.endpoint();
    let small = BenchConfig { clients: 10, msgs: 1_000, reps: 10, ..Default::default() };
    let large = BenchConfig { clients: 1_000, msgs: 10, reps: 10, ..Default::default() };
    let mut out = Vec::new();

    let (a, b) = match (run_bench(&endpoint, &small).await, run_bench(&endpoint, &large).await) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => return vec![("latency", Err(e.to_string()))],
    };
    out.push((
        "latency-a",
        ensure(a.ms_per_msg <= 0.1, || format!("{:.4} ms/msg", a.ms_per_msg))
            .map(|_| format!("10 clients x 1000 msgs: {:.4} ms/msg (limit 0.1), p99 {:.3} ms", a.ms_per_msg, a.p99)),
    ));
    let ratio = b.ms_per_msg / a.ms_per_msg;
    out.push((
        "latency-b",
        ensure(ratio <= 3.0, || format!("ratio {ratio:.2}")).map(|_| {
            format!("1000 clients x 10 msgs: {:.4} ms/msg, ratio {ratio:.2} to 10 clients (limit 3.0)", b.ms_per_msg)
        }),
    ));

    let ids: Vec<String> = (0..large.clients).map(|i| format!("s-bench-{i}")).collect();
    let mut overheads = collect_overheads(&server.server, &ids).await;
    overheads.sort_by(f64::total_cmp);
    let p99 = percentile(&overheads, 99.0);
    out.push((
        "latency-c",
        match p99 {
            None => Err("no turns recorded".into()),
            Some(p) => ensure(p <= 100.0, || format!("p99 {p:.3} ms")).map(|_| {
                format!("orchestration overhead p99 {p:.3} ms over {} turns (limit 100)", overheads.len())
            }),
        },
    ));
    server.shutdown().await;
    let elapsed = started.elapsed();
    if elapsed > Duration::from_secs(600) {
        out.push(("latency-runtime", Err(format!("benchmark took {elapsed:?}"))));
    }
    out
}

// ---- resilience ---------------------------------------------------------------

async fn kill_one_asr_worker() -> Outcome {
    let config = ServerConfig { port: 0, request_timeout_ms: 3_000, heartbeat_ms: 200, ..Default::default() };
    let program = ControlProgram::rules(PIPELINE_RULES).map_err(|e| e.to_string())?;
    let server = DemoServer::start_with(Mode::Remote, program, &config, &amesh::demo::shipped_tables(), 2)
        .await
        .map_err(|e| e.to_string())?;
    let asr: Vec<usize> =
        server.workers.iter().enumerate().filter(|(_, w)| w.service() == ServiceType::Asr).map(|(i, _)| i).collect();
    ensure(asr.len() == 2, || format!("{} ASR workers", asr.len()))?;
    let bench = BenchConfig {
        clients: 20,
        msgs: 100,
        reps: 1,
        count: MsgCount::PerClient,
        timeout: Duration::from_secs(10),
        ..Default::default()
    };
    let endpoint = server.endpoint();
    let run = tokio::spawn(async move { run_once(&endpoint, &bench, 0).await });
    let victim = &server.workers[asr[0]];
    let deadline = Instant::now() + Duration::from_secs(20);
    while victim.handled() < 100 && Instant::now() < deadline {
        tokio::time::sleep(Duration::from_millis(2)).await;
    }
    let killed_at = victim.handled();
    victim.kill();
    let outcome = run.await.map_err(|e| e.to_string())?.map_err(|e| e.to_string())?;
    let survivor = server.workers[asr[1]].handled();
    server.shutdown().await;
    ensure(killed_at >= 100, || "benchmark never reached the victim".into())?;
    ensure(outcome.sent == 2_000, || format!("sent {}", outcome.sent))?;
    ensure(outcome.sent == outcome.replies + outcome.errors, || {
        format!("sent {} != replies {} + errors {}", outcome.sent, outcome.replies, outcome.errors)
    })?;
    ensure(survivor > 0, || "survivor served nothing".into())?;
    Ok(format!(
        "killed ASR worker after {killed_at} requests; sent {} = replies {} + errors {}",
        outcome.sent, outcome.replies, outcome.errors
    ))
}

async fn circuit_breaker() -> Outcome {
    // Pure breaker state first: exactly the fifth consecutive failure opens it.
    let cfg = BrokerConfig::default();
    let cooldown = cfg.cooldown_us;
    let mut state = BrokerState::new(cfg);
    for i in 1..=4 {
        let c = state.record_outcome(ServiceType::Asr, false, i);
        ensure(c.state == CircuitPhase::Closed, || format!("open after {i} failures"))?;
    }
    ensure(state.record_outcome(ServiceType::Asr, false, 5).state == CircuitPhase::Open, || "closed after 5".into())?;

    // Then over the wire against an always-failing worker.
    let config = ServerConfig { port: 0, cooldown_ms: (cooldown / 1_000).min(300), ..Default::default() };
    let server = Server::start(&config, Registry::spawn(), SessionManagerConfig::default()).await.map_err(|e| e.to_string())?;
    let options = WorkerOptions { failures: FailurePattern::Always, ..Default::default() };
    let worker = start_worker(&server.endpoint(), ServiceType::Asr, handler(|v| Ok(v)), options)
        .await
        .map_err(|e| e.to_string())?;
    for _ in 0..200 {
        if server.snapshot().await.workers.values().sum::<usize>() == 1 {
            break;
        }
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
    let client = SessionClient::connect(&server.endpoint(), "cb", "phone", Duration::from_secs(5))
        .await
        .map_err(|e| e.to_string())?;
    let code = |r: Result<Value, ClientError>| match r {
        Err(ClientError::Remote(m)) => m.split(':').next().unwrap_or("").to_owned(),
        other => format!("{other:?}"),
    };
    let mut codes = Vec::new();
    for _ in 0..6 {
        codes.push(code(client.request(ServiceType::Asr, json!("x")).await));
    }
    let handled_while_open = worker.handled();
    let expected: Vec<&str> = [["ComponentFailed"; 5].as_slice(), &["CircuitOpen"]].concat();
    tokio::time::sleep(Duration::from_millis(config.cooldown_ms + 50)).await;
    let probe = code(client.request(ServiceType::Asr, json!("x")).await);
    let probed = worker.handled();
    server.shutdown().await;
    ensure(codes == expected, || format!("codes {codes:?}"))?;
    ensure(handled_while_open == 5, || format!("worker saw {handled_while_open} while open"))?;
    ensure(probe == "ComponentFailed" && probed == 6, || format!("probe {probe}, worker saw {probed}"))?;
    Ok("opens on the 5th consecutive failure; one probe admitted after cool-down".into())
}

// ---- sessions -----------------------------------------------------------------

fn session_fsm_fuzz() -> Outcome {
    let timeouts = SessionTimeouts { inactivity_us: 1_000, grace_us: 2_000, retention_us: 4_000 };
    let mut table = SessionTable::new(timeouts);
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let users: Vec<String> = (0..100).map(|i| format!("u{i}")).collect();
    let mut now = 0u64;
    let mut next_device = 1u64;
    let mut transitions = 0usize;
    let mut last_status: HashMap<String, SessionStatus> = HashMap::new();
    for step in 0..50_000 {
        let before: HashMap<String, u64> = table.records().map(|r| (r.session_id.clone(), r.last_activity_us)).collect();
        let user = &users[rng.gen_range(0..users.len())];
        let mut target: Option<String> = None;
        let log_len = table.log().len();
        match rng.gen_range(0..100) {
            0..=14 => {
                let device = next_device;
                next_device += 1;
                if let Ok(o) = table.open(user, device, now) {
                    target = Some(o.record.session_id.clone());
                }
            }
            15..=54 => {
                if let Some(sid) = table.session_of_user(user).map(str::to_owned) {
                    table.touch(&sid, now).map_err(|e| format!("step {step}: {e}"))?;
                    target = Some(sid);
                }
            }
            55..=59 => {
                if let Some(sid) = table.session_of_user(user).map(str::to_owned) {
                    table.close(&sid, now).map_err(|e| format!("step {step}: {e}"))?;
                    target = Some(sid);
                }
            }
            60..=64 => {
                let device = rng.gen_range(1..next_device);
                target = table.unbind_device(device);
            }
            _ => {
                now += match rng.gen_range(0..10) {
                    0 => rng.gen_range(0..20_000),
                    _ => rng.gen_range(0..300),
                };
                table.sweep(now);
            }
        }
        // Only the addressed session's activity clock may move.
        for r in table.records() {
            if target.as_deref() != Some(&r.session_id) {
                if let Some(t) = before.get(&r.session_id) {
                    ensure(*t == r.last_activity_us, || format!("step {step}: {} touched by another session", r.session_id))?;
                }
            }
        }
        for t in &table.log()[log_len.min(table.log().len())..] {
            transitions += 1;
            ensure(is_allowed(t.from, t.to), || format!("step {step}: {:?} -> {:?}", t.from, t.to))?;
            let prev = last_status.get(&t.session_id).copied().unwrap_or(SessionStatus::Active);
            ensure(prev == t.from, || format!("step {step}: {} jumped from {prev:?}, logged {:?}", t.session_id, t.from))?;
            last_status.insert(t.session_id.clone(), t.to);
        }
        // Idle-time oracle: time only moves inside sweeps, so every live
        // session sits exactly where its idle time puts it.
        for r in table.records() {
            let idle = now.saturating_sub(r.last_activity_us);
            let t = timeouts;
            let expected = if idle > t.inactivity_us + t.grace_us + t.retention_us {
                SessionStatus::Closed
            } else if idle > t.inactivity_us + t.grace_us {
                SessionStatus::Disconnected
            } else if idle > t.inactivity_us {
                SessionStatus::Paused
            } else {
                SessionStatus::Active
            };
            ensure(r.status == expected, || {
                format!("step {step}: {} is {:?} after {idle} us idle, expected {expected:?}", r.session_id, r.status)
            })?;
        }
    }
    Ok(format!("100 users, 50000 steps, {transitions} transitions, all allowed and contiguous"))
}

struct Tagger;

impl Component for Tagger {
    fn execute(&mut self, input: Value, ctx: &ExecContext) -> Execution {
        Execution::Ready(Ok(json!({"input": input, "seen_by": &*ctx.session_id})))
    }
}

async fn cross_session_isolation() -> Outcome {
    let registry = Registry::spawn();
    registry
        .register(ComponentDescriptor::local("TAG", StateType::Stateful, |_| Box::new(Tagger)))
        .await
        .map_err(|e| e.to_string())?;
    let rules = "RULE tag\nIF event == MIC_Event\nTHEN EXECUTE TAG WITH MIC_Event\n";
    let sessions = SessionManagerConfig {
        orchestrator: OrchestratorConfig { program: ControlProgram::rules(rules).unwrap(), ..Default::default() },
        outbound_keys: vec!["TAG_Event".into()],
        ..Default::default()
    };
    let config = ServerConfig { port: 0, ..Default::default() };
    let server = Server::start(&config, registry, sessions).await.map_err(|e| e.to_string())?;
    let mut clients = Vec::new();
    for i in 0..100 {
        let c = SessionClient::connect(&server.endpoint(), &format!("iso{i}"), "d", Duration::from_secs(5))
            .await
            .map_err(|e| e.to_string())?;
        clients.push(c);
    }
    for round in 0..5 {
        for c in &clients {
            c.inject("MIC_Event", json!(format!("{}#{round}", c.session_id()))).map_err(|e| e.to_string())?;
        }
    }
    for c in clients.iter_mut() {
        let sid = c.session_id().to_owned();
        for round in 0..5 {
            let ev = c.wait_for("TAG_Event", Duration::from_secs(10)).await.map_err(|e| format!("{sid}: {e}"))?;
            let v = &ev.entry.value;
            ensure(v["seen_by"] == json!(sid) && v["input"] == json!(format!("{sid}#{round}")), || {
                format!("{sid} received {v}")
            })?;
        }
    }
    for c in &clients {
        let sid = c.session_id();
        let parts = server.sessions().parts(sid).await.ok_or_else(|| format!("{sid} gone"))?;
        let (history, _) = parts.blackboard.history().await.map_err(|e| e.to_string())?;
        for ev in history {
            let foreign = match ev.key() {
                "MIC_Event" => ev.entry.value.as_str().is_some_and(|s| !s.starts_with(&format!("{sid}#"))),
                "TAG_Event" => ev.entry.value["seen_by"] != json!(sid),
                _ => false,
            };
            ensure(!foreign, || format!("{sid} board holds {}", ev.entry.value))?;
        }
    }
    server.shutdown().await;
    Ok("100 live sessions x 5 events, no foreign event seen or stored".into())
}

// ---- driver -----------------------------------------------------------------

fn main() -> ExitCode {
    // Optional substring filters, as with libtest.
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |name: &str| filters.is_empty() || filters.iter().any(|f| name.contains(f.as_str()));
    let rt = tokio::runtime::Runtime::new().expect("runtime");
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut run = |name: &'static str, out: Outcome| {
        match &out {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(why) => println!("FAIL {name}: {why}"),
        }
        results.push((name, out));
    };
    if wanted("wire-round-trip") {
        run("wire-round-trip", wire_round_trip());
    }
    if wanted("rule-sequences") {
        run("rule-sequences", rt.block_on(listing_sequences()));
    }
    if wanted("grocery-integration") {
        run("grocery-integration", rt.block_on(grocery_integration()));
    }
    if wanted("component-state") {
        run("component-state", rt.block_on(state_semantics()));
    }
    if wanted("location-transparency") {
        run("location-transparency", rt.block_on(location_transparency()));
    }
    if wanted("latency") {
        for (name, out) in rt.block_on(latency()) {
            run(name, out);
        }
    }
    if wanted("resilience-worker-loss") {
        run("resilience-worker-loss", rt.block_on(kill_one_asr_worker()));
    }
    if wanted("resilience-circuit-breaker") {
        run("resilience-circuit-breaker", rt.block_on(circuit_breaker()));
    }
    if wanted("session-fsm") {
        run("session-fsm", session_fsm_fuzz());
    }
    if wanted("session-isolation") {
        run("session-isolation", rt.block_on(cross_session_isolation()));
    }
    let failed = results.iter().filter(|(_, r)| r.is_err()).count();
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
