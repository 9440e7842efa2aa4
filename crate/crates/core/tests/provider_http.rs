//! HTTP provider against a local stub chat-completion server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use quadnav_core::grounding::Grounder;
use quadnav_core::llm_provider::{HttpProvider, Provider, ProviderConfig, ProviderError};
use quadnav_core::plan_schema::ActionCommand;
use quadnav_core::prompting::{build_prompt, default_template};
use quadnav_core::waypoint_world::{load_world, WaypointWorld};
use serde_json::{json, Value};

struct Reply {
    status: u16,
    body: String,
    delay: Duration,
}

#[derive(Debug, Clone)]
struct Seen {
    headers: Vec<String>,
    body: String,
}

/// Serves scripted replies in order (the last one repeats) and records
/// every request.
struct Stub {
    url: String,
    seen: Arc<Mutex<Vec<Seen>>>,
}

impl Stub {
    fn start(replies: Vec<Reply>) -> Stub {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
        let seen = Arc::new(Mutex::new(Vec::new()));
        let log = seen.clone();
        thread::spawn(move || {
            for (n, stream) in listener.incoming().enumerate() {
                let Ok(stream) = stream else { break };
                let reply = &replies[n.min(replies.len() - 1)];
                if let Some(request) = read_request(&stream) {
                    log.lock().unwrap().push(request);
                }
                thread::sleep(reply.delay);
                let _ = write_reply(stream, reply);
            }
        });
        Stub { url, seen }
    }

    fn requests(&self) -> Vec<Seen> {
        self.seen.lock().unwrap().clone()
    }
}

fn read_request(stream: &TcpStream) -> Option<Seen> {
    let mut reader = BufReader::new(stream);
    let mut headers = Vec::new();
    let mut length = 0;
    loop {
        let mut line = String::new();
        reader.read_line(&mut line).ok()?;
        let line = line.trim_end().to_owned();
        if line.is_empty() {
            break;
        }
        if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
            length = v.trim().parse().ok()?;
        }
        headers.push(line);
    }
    let mut body = vec![0; length];
    reader.read_exact(&mut body).ok()?;
    Some(Seen { headers, body: String::from_utf8(body).ok()? })
}

fn write_reply(mut stream: TcpStream, reply: &Reply) -> std::io::Result<()> {
    write!(
        stream,
        "HTTP/1.1 {} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
        reply.status,
        reply.body.len(),
        reply.body
    )
}

fn chat(content: &str) -> Reply {
    Reply { status: 200, body: json!({"choices":[{"message":{"role":"assistant","content":content}}]}).to_string(), delay: Duration::ZERO }
}

fn status(code: u16) -> Reply {
    Reply { status: code, body: r#"{"error":"nope"}"#.into(), delay: Duration::ZERO }
}

fn config(url: &str) -> ProviderConfig {
    let mut config = ProviderConfig::new(url, "test-model");
    config.max_retries = 2;
    config.timeout_secs = 2.0;
    config.backoff_base_secs = 0.01;
    config
}

fn world() -> Arc<WaypointWorld> {
    Arc::new(load_world(concat!(env!("CARGO_MANIFEST_DIR"), "/../../fixtures/maps/tower2_floor9.json")).unwrap())
}

fn bundle() -> quadnav_core::prompting::PromptBundle {
    let world = world();
    build_prompt(&default_template(&world).unwrap(), &world, "Pergi ke pantry.").unwrap()
}

#[test]
fn retries_server_errors_then_gives_up() {
    let stub = Stub::start(vec![status(503)]);
    let provider = HttpProvider::new(config(&stub.url)).unwrap();
    let err = provider.complete(&bundle()).unwrap_err();
    match &err {
        ProviderError::RetriesExhausted { attempts, last } => {
            assert_eq!(*attempts, 3);
            assert!(matches!(**last, ProviderError::Status { status: 503, .. }));
        }
        other => panic!("unexpected {other:?}"),
    }
    assert!(err.is_unavailable());
    assert_eq!(stub.requests().len(), 3);
}

#[test]
fn recovers_after_a_transient_failure() {
    let stub = Stub::start(vec![status(429), chat("{\"actions\":[]}")]);
    let provider = HttpProvider::new(config(&stub.url)).unwrap();
    let result = provider.complete(&bundle()).unwrap();
    assert_eq!(result.attempts, 2);
    assert_eq!(result.text, "{\"actions\":[]}");
}

#[test]
fn client_errors_are_not_retried() {
    let stub = Stub::start(vec![status(401)]);
    let provider = HttpProvider::new(config(&stub.url)).unwrap();
    let err = provider.complete(&bundle()).unwrap_err();
    assert!(matches!(err, ProviderError::Status { status: 401, .. }));
    assert!(!err.is_unavailable());
    assert_eq!(stub.requests().len(), 1);
}

#[test]
fn unreachable_endpoint_is_unavailable() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let provider = HttpProvider::new(config(&format!("http://127.0.0.1:{port}/v1/chat/completions"))).unwrap();
    let err = provider.complete(&bundle()).unwrap_err();
    assert!(matches!(&err, ProviderError::RetriesExhausted { attempts: 3, last } if matches!(**last, ProviderError::Transport(_))), "{err:?}");
    assert!(err.is_unavailable());
}

#[test]
fn slow_server_times_out() {
    let stub = Stub::start(vec![Reply { delay: Duration::from_millis(600), ..chat("late") }]);
    let mut cfg = config(&stub.url);
    cfg.timeout_secs = 0.2;
    cfg.max_retries = 0;
    let err = HttpProvider::new(cfg).unwrap().complete(&bundle()).unwrap_err();
    assert!(matches!(&err, ProviderError::RetriesExhausted { attempts: 1, last } if **last == ProviderError::Timeout), "{err:?}");
}

#[test]
fn model_text_passes_through_byte_for_byte() {
    let text = "  Tentu!\n```json\n{\"actions\": [ {\"command\":\"goto\", \"parameters\": {\"waypoint\":\"ruang_pantry\"}} ]}\n```\n\u{1F916} ";
    let stub = Stub::start(vec![chat(text)]);
    let result = HttpProvider::new(config(&stub.url)).unwrap().complete(&bundle()).unwrap();
    assert_eq!(result.text.as_bytes(), text.as_bytes());
}

#[test]
fn request_carries_prompt_model_and_key() {
    let stub = Stub::start(vec![chat("{}")]);
    let mut cfg = config(&stub.url);
    cfg.api_key = Some("sekret-123".into());
    cfg.temperature = 0.2;
    let provider = HttpProvider::new(cfg.clone()).unwrap();
    let b = bundle();
    provider.complete(&b).unwrap();
    let seen = &stub.requests()[0];
    let body: Value = serde_json::from_str(&seen.body).unwrap();
    assert_eq!(body["model"], "test-model");
    assert_eq!(body["temperature"], 0.2);
    assert_eq!(body["messages"][0]["role"], "system");
    assert_eq!(body["messages"][0]["content"], b.system_text.as_str());
    assert_eq!(body["messages"][1]["content"], "Pergi ke pantry.");
    assert!(seen.headers.iter().any(|h| h.eq_ignore_ascii_case("authorization: Bearer sekret-123")));
    assert!(!format!("{cfg:?}").contains("sekret"));
}

#[test]
fn prose_wrapped_json_grounds_through_the_pipeline() {
    let stub = Stub::start(vec![chat(
        "Baik, ini rencananya: {\"response\": {\"actions\": [{\"command\": \"goto\", \"parameters\": {\"waypoint\": \"ruang_pantry\"}}]}} Terima kasih.",
    )]);
    let world = world();
    let template = Arc::new(default_template(&world).unwrap());
    let grounder = Grounder::new(world, template, Arc::new(HttpProvider::new(config(&stub.url)).unwrap()));
    let outcome = grounder.ground("Pergi ke pantry.");
    assert_eq!(outcome.plan.unwrap().actions, vec![ActionCommand::goto("ruang_pantry")]);
    assert_eq!(outcome.provider_attempts, 1);
    assert_eq!(outcome.provider_id, "http:test-model");
}

#[test]
fn malformed_reply_is_a_bad_response() {
    let stub = Stub::start(vec![Reply { status: 200, body: "{\"id\":1}".into(), delay: Duration::ZERO }]);
    let err = HttpProvider::new(config(&stub.url)).unwrap().complete(&bundle()).unwrap_err();
    assert!(matches!(err, ProviderError::BadResponse(_)));
}
