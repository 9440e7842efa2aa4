//! The `quadnav` binary: verbs, output formats and exit codes.

use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use serde_json::{json, Value};

const FIXTURES: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../fixtures");
const SINGLE_ROOM: &str = "Saya ingin mengambil barang di lemari lab, kemudian ingin menyoldernya.";

fn quadnav(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_quadnav")).arg("--fixtures").arg(FIXTURES).args(args).output().unwrap()
}

fn stderr_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stderr).unwrap_or_else(|_| panic!("stderr is not JSON: {}", String::from_utf8_lossy(&out.stderr)))
}

#[test]
fn ground_mock_prints_the_single_room_plan() {
    let out = quadnav(&["ground", "--mock", SINGLE_ROOM]);
    assert_eq!(out.status.code(), Some(0));
    let plan: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(
        plan,
        json!({"actions": [
            {"command": "goto", "parameters": {"waypoint": "depan_lemari"}},
            {"command": "goto", "parameters": {"waypoint": "depan_meja_solder"}},
        ]})
    );
}

#[test]
fn ground_outcome_flag_prints_the_audit_record() {
    let out = quadnav(&["ground", "--mock", "--outcome", SINGLE_ROOM]);
    assert_eq!(out.status.code(), Some(0));
    let outcome: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(outcome["instruction"], SINGLE_ROOM);
    assert_eq!(outcome["provider_id"], "mock");
    assert!(outcome["template_hash"].as_str().is_some_and(|h| !h.is_empty()));
    assert!(outcome["raw_output"].as_str().unwrap().contains("depan_lemari"));
}

#[test]
fn rejected_instruction_exits_one_with_json_error() {
    let out = quadnav(&["ground", "--mock", "Tolong nyanyikan sebuah lagu."]);
    assert_eq!(out.status.code(), Some(1));
    assert!(out.stdout.is_empty());
    let err = stderr_json(&out);
    assert_eq!(err["error_kind"], "plan_rejected");
    assert_eq!(err["stage"], "validate");
    assert_eq!(err["defects"][0]["kind"], "empty_plan");
}

#[test]
fn unreachable_provider_exits_one() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let endpoint = format!("http://127.0.0.1:{port}/v1/chat/completions");
    let out = quadnav(&["ground", "--endpoint", &endpoint, "--model", "m", "--retries", "0", "--timeout", "1", SINGLE_ROOM]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr_json(&out);
    assert_eq!(err["error_kind"], "provider_error");
    assert_eq!(err["stage"], "provider");
}

#[test]
fn usage_errors_exit_two() {
    for args in [&["ground"][..], &["ground", SINGLE_ROOM], &["replay"], &["frobnicate"], &["serve", "--pace", "fast"]] {
        let out = quadnav(args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"), "{args:?}");
    }
    assert_eq!(quadnav(&["--help"]).status.code(), Some(0));
}

#[test]
fn map_check_accepts_the_fixture() {
    let out = quadnav(&["map-check", &format!("{FIXTURES}/maps/tower2_floor9.json")]);
    assert_eq!(out.status.code(), Some(0));
    let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["waypoints"], 14);
    assert_eq!(summary["zones"], 9);
}

#[test]
fn map_check_reports_broken_maps() {
    let dir = tempfile::tempdir().unwrap();
    let mut doc: Value = serde_json::from_str(&std::fs::read_to_string(format!("{FIXTURES}/maps/tower2_floor9.json")).unwrap()).unwrap();
    doc["home"] = json!("nowhere");
    let path = dir.path().join("broken.json");
    std::fs::write(&path, doc.to_string()).unwrap();
    let out = quadnav(&["map-check", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error_kind"], "map_invalid");

    std::fs::write(&path, "{\"format\":").unwrap();
    let out = quadnav(&["map-check", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_json(&out)["detail"].as_str().unwrap().contains("line 1"));
}

#[test]
fn replay_prints_the_category_table() {
    let out = quadnav(&["replay", "paper_replica"]);
    assert_eq!(out.status.code(), Some(0));
    let report = String::from_utf8(out.stdout).unwrap();
    for column in ["Scenario Category", "Avg. Duration(s)", "Success Rate(%)", "Total Attempts"] {
        assert!(report.contains(column), "{column}");
    }
    assert!(report.contains("| Short Dist. (Multi-Room)  |            33.60 |              96 |             25 |"), "{report}");
}

#[test]
fn empty_suite_gives_an_empty_report() {
    let dir = tempfile::tempdir().unwrap();
    let suite = dir.path().join("empty.json");
    std::fs::write(&suite, r#"{"name": "empty", "trials": []}"#).unwrap();
    let out_dir = dir.path().join("out");
    let out = quadnav(&["replay", suite.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(out_dir.join("summary.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1, "header only: {csv}");
    assert!(std::fs::read_to_string(out_dir.join("records.jsonl")).unwrap().is_empty());
}

#[test]
fn invalid_suite_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let suite = dir.path().join("untagged.json");
    std::fs::write(&suite, r#"{"name": "x", "trials": [{"instruction": "a", "scenario_tag": "untagged", "seed": 1}]}"#).unwrap();
    let out = quadnav(&["replay", suite.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error_kind"], "suite_invalid");
    let out = quadnav(&["replay", "no_such_suite"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn recorded_outputs_replay_to_the_same_records() {
    let dir = tempfile::tempdir().unwrap();
    let (live, replayed) = (dir.path().join("live"), dir.path().join("replayed"));
    assert!(quadnav(&["replay", "paper_replica", "--out", live.to_str().unwrap()]).status.success());
    let log = live.join("outcomes.jsonl");
    let out = quadnav(&["replay", "paper_replica", "--recorded", log.to_str().unwrap(), "--parallel", "--out", replayed.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for file in ["records.jsonl", "summary.csv", "report.txt"] {
        assert_eq!(std::fs::read(live.join(file)).unwrap(), std::fs::read(replayed.join(file)).unwrap(), "{file}");
    }
}

fn http_get(addr: &str, path: &str) -> Option<String> {
    let mut stream = TcpStream::connect(addr).ok()?;
    write!(stream, "GET {path} HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n").ok()?;
    let mut text = String::new();
    stream.read_to_string(&mut text).ok()?;
    Some(text)
}

#[test]
fn serve_answers_health_checks() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let addr = format!("127.0.0.1:{port}");
    let mut child = Command::new(env!("CARGO_BIN_EXE_quadnav"))
        .args(["--fixtures", FIXTURES, "serve", "--mock", "--pace", "0", "--listen", &addr])
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let deadline = Instant::now() + Duration::from_secs(20);
    let reply = loop {
        if let Some(reply) = http_get(&addr, "/v1/healthz") {
            break reply;
        }
        assert!(Instant::now() < deadline, "gateway never came up");
        std::thread::sleep(Duration::from_millis(50));
    };
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(reply.starts_with("HTTP/1.1 200"), "{reply}");
    assert!(reply.contains("\"status\":\"ok\""), "{reply}");
}

#[test]
fn serve_rejects_a_bad_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("service.toml");
    std::fs::write(&config, "map_path = \"missing.json\"\n").unwrap();
    let out = quadnav(&["serve", "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error_kind"], "serve_failed");
}
