use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_trustgate"))
}

fn smoke_config() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml")
}

#[test]
fn simulate_writes_outputs() {
    let out = tempfile::tempdir().unwrap();
    let status = bin()
        .args(["simulate", "--config"])
        .arg(smoke_config())
        .arg("--out")
        .arg(out.path())
        .args(["--seeds", "1", "--sequential"])
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    for file in [
        "aggregate.json",
        "steps_gateway_0.csv",
        "steps_independent_0.csv",
        "probe_drift.csv",
        "probe_heldout.csv",
        "series_policy_mix.csv",
        "series_queries.csv",
    ] {
        assert!(out.path().join(file).exists(), "missing {file}");
    }
    let stdout: serde_json::Value = serde_json::from_slice(&status.stdout).unwrap();
    let written: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.path().join("aggregate.json")).unwrap()).unwrap();
    assert_eq!(stdout, written);
}

#[test]
fn calibrate_oracle_prints_report() {
    let output = bin().args(["calibrate-oracle", "--config"]).arg(smoke_config()).output().unwrap();
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let report: serde_json::Value = serde_json::from_slice(&output.stdout).unwrap();
    assert!(report["approve_rate"]["mean"].as_f64().unwrap() > 0.0);
    assert!(report["targets"].is_object());
}

#[test]
fn show_config_round_trips() {
    let output = bin().args(["show-config", "--seeds", "3"]).output().unwrap();
    assert!(output.status.success());
    let text = String::from_utf8(output.stdout).unwrap();
    let config = trustgate_core::config::RunConfig::from_toml_str(&text).unwrap();
    assert_eq!(config.seeds, vec![0, 1, 2]);
    assert_eq!(config.ablation.seeds, vec![0, 1, 2]);
}

#[test]
fn bad_config_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "n_steps = 0\n").unwrap();
    let output = bin().args(["simulate", "--config"]).arg(&path).arg("--out").arg(dir.path()).output().unwrap();
    assert!(!output.status.success());
    assert!(!String::from_utf8_lossy(&output.stderr).is_empty());
}

fn get(port: u16, path: &str) -> Option<String> {
    let mut stream = TcpStream::connect(("127.0.0.1", port)).ok()?;
    write!(stream, "GET {path} HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n").ok()?;
    let mut response = String::new();
    stream.read_to_string(&mut response).ok()?;
    Some(response)
}

#[test]
fn serve_answers_health_and_persists_state() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let state = tempfile::tempdir().unwrap();
    let mut child = bin()
        .args(["serve", "--port", &port.to_string(), "--state-dir"])
        .arg(state.path())
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let deadline = Instant::now() + Duration::from_secs(20);
    let health = loop {
        if let Some(r) = get(port, "/v1/health") {
            break r;
        }
        assert!(Instant::now() < deadline, "server did not start");
        std::thread::sleep(Duration::from_millis(100));
    };
    let state_view = get(port, "/v1/state").unwrap();
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(health.starts_with("HTTP/1.1 200"), "{health}");
    assert!(health.contains("\"status\":\"ok\""));
    assert!(state_view.contains("\"schema_version\":\"v1\""));
    assert!(state.path().join("events.jsonl").exists());
}
