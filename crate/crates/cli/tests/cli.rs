use std::path::Path;
use std::process::{Command, Output};
use std::sync::Arc;

use serde_json::{json, Value};
use tmem_core::engine::Engine;
use tmem_testkit::fixtures::{provider_script_path, scripted_settings, trajectory_path, FIXED_CLOCK_SECS, FIXTURES};
use tmem_testkit::service::Client;

fn tmem(store: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tmem"))
        .args(args)
        .arg("--store")
        .arg(store)
        .env_remove("TMEM_STORE")
        .env("TMEM_PROVIDER", "scripted")
        .env("TMEM_SCRIPT", provider_script_path())
        .env("TMEM_FIXED_CLOCK", FIXED_CLOCK_SECS.to_string())
        .output()
        .expect("tmem runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "exit {:?}\nstdout {}\nstderr {}", o.status.code(), stdout(&o), String::from_utf8_lossy(&o.stderr));
    o
}

/// Ingests and extracts every fixture, in the order the scripted replies were recorded.
fn loaded_store() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let files: Vec<String> = FIXTURES.iter().map(|s| trajectory_path(s).display().to_string()).collect();
    let mut args = vec!["ingest", "--extract", "both", "--json"];
    args.extend(files.iter().map(String::as_str));
    let out = ok(tmem(dir.path(), &args));
    let lines: Vec<Value> = stdout(&out).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2 * FIXTURES.len());
    assert_eq!(lines[0]["id"], "clean-checkout");
    assert_eq!(lines[1]["trajectory_id"], "clean-checkout");
    dir
}

fn service(store: &Path) -> Client {
    Client::new(Arc::new(Engine::open(scripted_settings(store)).unwrap()))
}

#[test]
fn render_matches_service_rendered_field() {
    let dir = loaded_store();
    ok(tmem(dir.path(), &["consolidate"]));
    let task = "Check out the items in my Amazon cart";
    let out = ok(tmem(dir.path(), &["retrieve", "--task", task, "--tau", "0.6", "--k", "5", "--render"]));
    let rendered = stdout(&out);
    assert!(rendered.starts_with("[PRIORITY: "), "{rendered}");
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());

    let json_out = stdout(&ok(tmem(dir.path(), &["retrieve", "--task", task, "--tau", "0.6", "--k", "5", "--json"])));
    let client = service(dir.path());
    let (status, body) = client.post("/v1/retrieve", &json!({"task_description": task, "tau": 0.6, "k": 5}));
    assert!(status.is_success());
    assert_eq!(body["rendered"].as_str().unwrap(), rendered);
    assert_eq!(serde_json::from_str::<Value>(&json_out).unwrap(), body);
}

#[test]
fn json_outputs_match_service_shapes() {
    let dir = loaded_store();
    let stats: Value = serde_json::from_str(&stdout(&ok(tmem(dir.path(), &["stats", "--json"])))).unwrap();
    let export = stdout(&ok(tmem(dir.path(), &["export", "--format", "jsonl"])));
    let exported: Vec<Value> = export.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let id = exported[0]["id"].as_str().unwrap().to_owned();
    let shown: Value = serde_json::from_str(&stdout(&ok(tmem(dir.path(), &["show", &id, "--json"])))).unwrap();

    let client = service(dir.path());
    assert_eq!(client.get("/v1/stats").1, stats);
    assert_eq!(client.get("/v1/tips").1, Value::Array(exported));
    assert_eq!(client.get(&format!("/v1/tips/{id}")).1, shown);
}

#[test]
fn consolidate_defaults_to_085_and_reports() {
    let dir = loaded_store();
    let out = stdout(&ok(tmem(dir.path(), &["consolidate"])));
    assert!(out.contains("threshold   0.85"), "{out}");
    assert!(out.contains("tips        61 -> 26"), "{out}");
    let again: Value = serde_json::from_str(&stdout(&ok(tmem(dir.path(), &["consolidate", "--json"])))).unwrap();
    assert_eq!(again["clusters"], json!([]));
    assert_eq!(again["revision_before"], again["revision_after"]);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(tmem(dir.path(), &["ingest", "missing.json"]).status.code(), Some(2));
    assert_eq!(tmem(dir.path(), &["show", "no-such-tip"]).status.code(), Some(1));
    assert_eq!(tmem(dir.path(), &["retrieve", "--task", "x", "--k", "0"]).status.code(), Some(1));
    assert_eq!(tmem(dir.path(), &["consolidate", "--threshold", "1.5"]).status.code(), Some(1));
    assert_eq!(tmem(dir.path(), &["frobnicate"]).status.code(), Some(1));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"id\": \"x\"}").unwrap();
    assert_eq!(tmem(dir.path(), &["ingest", bad.to_str().unwrap()]).status.code(), Some(1));

    let clean = trajectory_path("clean_checkout");
    ok(tmem(dir.path(), &["ingest", clean.to_str().unwrap()]));
    assert_eq!(tmem(dir.path(), &["ingest", clean.to_str().unwrap()]).status.code(), Some(1));

    let other = tempfile::tempdir().unwrap();
    let gateway = Command::new(env!("CARGO_BIN_EXE_tmem"))
        .args(["ingest", "--extract", "task", clean.to_str().unwrap(), "--store"])
        .arg(other.path())
        .env("TMEM_PROVIDER", "none")
        .output()
        .unwrap();
    assert_eq!(gateway.status.code(), Some(3), "{}", String::from_utf8_lossy(&gateway.stderr));

    let locked = Engine::open(scripted_settings(dir.path())).unwrap();
    assert_eq!(tmem(dir.path(), &["stats"]).status.code(), Some(2));
    drop(locked);
}

#[test]
fn config_file_sets_store_and_threshold() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tmem.toml");
    std::fs::write(&cfg, format!("store = {:?}\nthreshold = 0.9\n", dir.path().join("s").display().to_string())).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_tmem"))
        .args(["consolidate", "--config"])
        .arg(&cfg)
        .env_remove("TMEM_STORE")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("threshold   0.9"));
    assert!(dir.path().join("s").join("meta.json").exists());
}
