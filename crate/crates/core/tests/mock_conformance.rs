use std::sync::Arc;
use std::time::Instant;

use econlab::agents::{remote_llm_agent, Agent, AgentError};
use econlab::llm_client::mock::{completion_body, MockChatServer, MockReply};
use econlab::llm_client::{ChatClient, ClientError, ModelConfig};
use econlab::prompts::format_response;
use econlab::runner::{run_experiment, RunOptions};
use econlab::session::SessionMeta;
use econlab::social_learning::run_urn_session;
use econlab::storage::{read_transcripts, write_transcripts, AgentSpec, ExperimentConfig};
use econlab::types::Experiment;

fn config(server: &MockChatServer, temperature: f64) -> ModelConfig {
    let mut c = ModelConfig::new(server.base_url(), "mock-model");
    c.temperature = temperature;
    c.backoff_base_ms = 20;
    c.request_timeout_ms = 5_000;
    c.api_key_env = "ECONLAB_TEST_KEY_UNSET".into();
    c
}

fn client(server: &MockChatServer, temperature: f64) -> Arc<ChatClient> {
    Arc::new(ChatClient::new(config(server, temperature)).unwrap())
}

fn turns(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

fn queue_urn_replies(server: &MockChatServer) {
    for position in 1..=4 {
        for target in (1..position).rev() {
            server.push(MockReply::content(format_response("r", if target % 2 == 0 { "Yes" } else { "No" })));
        }
        server.push(MockReply::content(format_response("r", "A")));
    }
}

#[test]
fn request_carries_configured_temperature() {
    for t in [0.0, 0.3] {
        let server = MockChatServer::start().unwrap();
        server.push(MockReply::content("ok"));
        let reply = client(&server, t).chat("sys", &turns(&["hi"]), &[]).unwrap();
        assert_eq!(reply, "ok");
        let body = &server.request_json()[0];
        assert_eq!(body["temperature"].as_f64(), Some(t));
        assert_eq!(body["model"], "mock-model");
    }
}

#[test]
fn conversation_order_is_system_then_alternating_turns() {
    let server = MockChatServer::start().unwrap();
    queue_urn_replies(&server);
    let mut agents: Vec<Box<dyn Agent>> = (0..4)
        .map(|i| Box::new(remote_llm_agent(format!("p{i}"), client(&server, 0.0))) as Box<dyn Agent>)
        .collect();
    let meta = SessionMeta::new("s", 1, "2024-01-01T00:00:00Z".parse().unwrap());
    let out = run_urn_session(&mut agents, 0, &meta).unwrap();
    assert!(out.record.is_valid());
    // position p answers p - 1 link prompts before guessing
    let bodies = server.request_json();
    assert_eq!(bodies.len(), out.record.events.len());
    for body in &bodies {
        let roles: Vec<&str> = body["messages"]
            .as_array()
            .unwrap()
            .iter()
            .map(|m| m["role"].as_str().unwrap())
            .collect();
        assert_eq!(roles[0], "system");
        assert_eq!(roles.last(), Some(&"user"));
        for (i, r) in roles[1..].iter().enumerate() {
            assert_eq!(*r, if i % 2 == 0 { "user" } else { "assistant" });
        }
    }
    let longest = bodies.iter().map(|b| b["messages"].as_array().unwrap().len()).max().unwrap();
    assert!(longest >= 5, "multi-turn conversations expected, got {longest} messages");
}

#[test]
fn retries_429_with_backoff() {
    let server = MockChatServer::start().unwrap();
    server
        .push(MockReply::status(429, "slow down"))
        .push(MockReply::status(429, "slow down"))
        .push(MockReply::content("fine"));
    let c = client(&server, 0.0);
    let t0 = Instant::now();
    assert_eq!(c.chat("s", &turns(&["u"]), &[]).unwrap(), "fine");
    // two waits of at least half the nominal 20 ms and 40 ms
    assert!(t0.elapsed().as_millis() >= 30);
    assert_eq!(server.requests().len(), 3);
    let attempts: Vec<u32> = c.transcript().iter().map(|e| e.attempt).collect();
    assert_eq!(attempts, vec![1, 2, 3]);
    let hashes: Vec<String> = c.transcript().iter().map(|e| e.request_body_hash.clone()).collect();
    assert!(hashes.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn exhausted_retries_surface_as_backend_error() {
    let server = MockChatServer::start().unwrap();
    server.set_fallback(MockReply::status(429, "busy"));
    let mut cfg = config(&server, 0.0);
    cfg.max_retries = 2;
    let c = Arc::new(ChatClient::new(cfg).unwrap());
    assert!(matches!(
        c.chat("s", &turns(&["u"]), &[]),
        Err(ClientError::RateLimitedExhausted { attempts: 3 })
    ));

    let mut agent = remote_llm_agent("b", c);
    let ctx = econlab::prompts::ExperimentContext::UrnGuess {
        position: 1,
        draw: econlab::types::Urn::A,
        visible: vec![],
        links_formed: 0,
        link_cost: 0,
    };
    let bundle = econlab::prompts::build_prompt(&ctx, &econlab::prompts::default_options(&ctx)).unwrap();
    assert!(matches!(agent.decide(&bundle, &ctx), Err(AgentError::Backend { .. })));
    assert_eq!(agent.turns(), 0);
}

#[test]
fn non_retryable_status_fails_at_once() {
    let server = MockChatServer::start().unwrap();
    server.push(MockReply::status(400, "bad request"));
    let c = client(&server, 0.0);
    assert!(matches!(
        c.chat("s", &turns(&["u"]), &[]),
        Err(ClientError::HttpStatus { status: 400, attempts: 1, .. })
    ));
    assert_eq!(server.requests().len(), 1);
}

#[test]
fn in_flight_requests_are_capped() {
    let server = MockChatServer::start().unwrap();
    server.set_fallback(MockReply::content("x"));
    server.set_delay_ms(40);
    let mut cfg = config(&server, 0.0);
    cfg.max_in_flight = 2;
    let c = Arc::new(ChatClient::new(cfg).unwrap());
    std::thread::scope(|s| {
        for _ in 0..8 {
            let c = Arc::clone(&c);
            s.spawn(move || c.chat("s", &turns(&["u"]), &[]).unwrap());
        }
    });
    assert_eq!(server.requests().len(), 8);
    assert!(server.peak_concurrency() <= 2, "peak {}", server.peak_concurrency());
    assert!(server.peak_concurrency() >= 1);
}

#[test]
fn malformed_body_is_reported() {
    let server = MockChatServer::start().unwrap();
    server.push(MockReply::status(200, "{\"choices\": []}"));
    server.push(MockReply::status(200, "not json"));
    let c = client(&server, 0.0);
    for _ in 0..2 {
        assert!(matches!(
            c.chat("s", &turns(&["u"]), &[]),
            Err(ClientError::MalformedResponse { .. })
        ));
    }
}

#[test]
fn api_key_goes_only_into_the_auth_header() {
    let server = MockChatServer::start().unwrap();
    server.push(MockReply::content("ok"));
    server.push(MockReply::status(500, "boom"));
    let var = "ECONLAB_TEST_KEY_CONFORMANCE";
    let secret = "sk-test-not-a-real-key-1234";
    std::env::set_var(var, secret);
    let mut cfg = config(&server, 0.0);
    cfg.api_key_env = var.into();
    cfg.max_retries = 0;
    let c = ChatClient::new(cfg).unwrap();
    c.chat("s", &turns(&["u"]), &[]).unwrap();
    let err = c.chat("s", &turns(&["u"]), &[]).unwrap_err();
    assert_eq!(server.auth_headers()[0].as_deref(), Some(format!("Bearer {secret}").as_str()));
    assert!(server.requests().iter().all(|b| !b.contains(secret)));
    assert!(!format!("{err} {err:?} {c:?}").contains(secret));
    let transcript = serde_json::to_string(&c.transcript().iter().map(|e| &e.response_body).collect::<Vec<_>>()).unwrap();
    assert!(!transcript.contains(secret));
}

#[test]
fn transcripts_round_trip_byte_identically() {
    let server = MockChatServer::start().unwrap();
    server.set_fallback(MockReply::content(format_response(
        "Unicode \u{201c}quotes\u{201d}, tabs\tand\nnewlines",
        "B1",
    )));
    let mut cfg = ExperimentConfig::new(
        Experiment::SocialPreference,
        AgentSpec::Remote {
            model: config(&server, 0.3),
        },
        1,
        5,
    );
    cfg.condition.games = Some(vec!["Dict 1".into(), "Resp 13a".into()]);
    cfg.created_at = Some("2024-01-01T00:00:00Z".parse().unwrap());
    let out = run_experiment(&cfg, &RunOptions { parallel: 3, progress: None }).unwrap();
    assert_eq!(out.records.len(), 6);
    assert!(out.records.iter().all(|r| r.is_valid()));

    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    write_transcripts(&out.records, &a).unwrap();
    let back = read_transcripts(&a).unwrap();
    assert_eq!(back, out.records);
    write_transcripts(&back, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert!(server.request_json().iter().all(|b| b["temperature"].as_f64() == Some(0.3)));
}

#[test]
fn completion_body_is_openai_shaped() {
    let v: serde_json::Value = serde_json::from_str(&completion_body("hey")).unwrap();
    assert_eq!(v["choices"][0]["message"]["content"], "hey");
}
