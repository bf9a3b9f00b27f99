use std::sync::mpsc;
use std::sync::Arc;
use std::time::Duration;

use axum::http::StatusCode;
use parking_lot::Mutex;
use serde_json::{json, Value};
use tmem_core::api::{RetrieveRequest, TipsQuery};
use tmem_core::llm::{ChatProvider, ProviderError, Role};
use tmem_core::retrieval::{render_guidelines, RetrievalResult};
use tmem_core::store::Store;
use tmem_service::response_schemas;
use tmem_testkit::fixtures::{book_engine, engine_with, trajectory, FIXED_CLOCK_SECS};
use tmem_testkit::service::{loaded_engine, service_equivalence, Client};
use tmem_testkit::ScriptBook;

fn fixture(stem: &str) -> Value {
    serde_json::to_value(trajectory(stem)).unwrap()
}

fn assert_schema(name: &str, value: &Value) {
    let schemas = response_schemas();
    let validator = jsonschema::validator_for(&schemas[name]).unwrap();
    let errors: Vec<String> = validator.iter_errors(value).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{name}: {errors:?}\n{value}");
}

#[test]
fn ingest_created_then_duplicate_conflict() {
    let client = Client::new(Arc::new(book_engine()));
    let (status, body) = client.post("/v1/trajectories", &fixture("clean_checkout"));
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(body["id"], "clean-checkout");
    assert_schema("ingest_response", &body);
    let (status, body) = client.post("/v1/trajectories", &fixture("clean_checkout"));
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["kind"], "conflict");
    assert_schema("error", &body);
}

#[test]
fn malformed_or_invalid_trajectories_are_400() {
    let client = Client::new(Arc::new(book_engine()));
    let mut empty = fixture("clean_checkout");
    empty["steps"] = json!([]);
    for body in [json!({"nope": 1}), empty] {
        let (status, err) = client.post("/v1/trajectories", &body);
        assert_eq!(status, StatusCode::BAD_REQUEST, "{err}");
        assert_eq!(err["kind"], "validation");
    }
    let (status, _) = client.post("/v1/trajectories?extract=everything", &fixture("clean_checkout"));
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[test]
fn extraction_job_matches_library_call() {
    let client = Client::new(Arc::new(book_engine()));
    let (status, body) = client.post("/v1/trajectories?extract=both", &fixture("payment_recovery"));
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(body["job_id"], "job-000001");
    let job = client.wait_job("job-000001", Duration::from_secs(30));
    assert_eq!(job["state"], "done", "{job}");
    assert_schema("job", &job);

    let lib = book_engine();
    let id = lib.ingest(trajectory("payment_recovery")).unwrap().id;
    let summary = lib.extract(&id, tmem_core::api::ExtractMode::Both).unwrap();
    assert_eq!(job["summary"], serde_json::to_value(&summary).unwrap());
    assert_eq!(job["summary"]["tip_ids"].as_array().unwrap().len(), summary.task_tips + summary.subtask_tips);

    let (status, _) = client.get("/v1/jobs/job-000099");
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[test]
fn retrieve_applies_defaults_and_renders_tips() {
    let engine = Arc::new(loaded_engine());
    let client = Client::new(Arc::clone(&engine));
    let task = "Check out the items in my Amazon cart";
    let (status, body) = client.post("/v1/retrieve", &json!({ "task_description": task }));
    assert_eq!(status, StatusCode::OK);
    assert_schema("retrieve_response", &body);
    let explicit = RetrieveRequest { task_description: task.into(), strategy: None, tau: Some(0.6), k: Some(5), granularities: None };
    let want = engine.retrieve(&explicit).unwrap();
    assert_eq!(body, serde_json::to_value(&want).unwrap());
    assert!(!want.result.tips.is_empty());

    let result: RetrievalResult = serde_json::from_value(body.clone()).unwrap();
    assert_eq!(body["rendered"].as_str().unwrap(), render_guidelines(&result));
}

#[test]
fn retrieve_rejects_bad_parameters_with_422() {
    let client = Client::new(Arc::new(book_engine()));
    for body in [
        json!({"task_description": "x", "k": 0}),
        json!({"task_description": "x", "tau": 0.0}),
        json!({"task_description": "x", "tau": 1.5}),
        json!({"task_description": ""}),
        json!({"task": "missing field"}),
    ] {
        let (status, err) = client.post("/v1/retrieve", &body);
        assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{body} -> {err}");
        assert_schema("error", &err);
    }
}

#[test]
fn consolidate_on_empty_store_reports_zeros() {
    let client = Client::new(Arc::new(book_engine()));
    let (status, body) = client.call(axum::http::Method::POST, "/v1/consolidate", None);
    assert_eq!(status, StatusCode::OK);
    assert_schema("consolidation_report", &body);
    assert_eq!(body["tips_before"], 0);
    assert_eq!(body["tips_after"], 0);
    assert_eq!(body["clusters"], json!([]));
}

#[test]
fn tips_stats_and_lookup() {
    let engine = Arc::new(loaded_engine());
    let client = Client::new(Arc::clone(&engine));
    let (status, stats) = client.get("/v1/stats");
    assert_eq!(status, StatusCode::OK);
    assert_schema("stats", &stats);
    let (_, all) = client.get("/v1/tips");
    assert_schema("tip_list", &all);
    let all = all.as_array().unwrap();
    assert_eq!(stats["tips"], all.len());
    for category in ["strategy", "recovery", "optimization"] {
        let (_, listed) = client.get(&format!("/v1/tips?category={category}"));
        let recount = all.iter().filter(|t| t["category"] == category).count();
        assert_eq!(listed.as_array().unwrap().len(), recount);
        assert_eq!(stats["by_category"].get(category).map_or(0, |v| v.as_u64().unwrap() as usize), recount);
    }
    let (_, tasks) = client.get("/v1/tips?granularity=task");
    assert_eq!(tasks.as_array().unwrap().len(), engine.tips(TipsQuery { granularity: Some(tmem_core::model::Granularity::Task), ..Default::default() }).unwrap().len());

    let id = all[0]["id"].as_str().unwrap();
    let (status, tip) = client.get(&format!("/v1/tips/{id}"));
    assert_eq!(status, StatusCode::OK);
    assert_schema("tip", &tip);
    assert_eq!(&tip, &all[0]);
    let (status, err) = client.get("/v1/tips/does-not-exist");
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(err["kind"], "not_found");
    let (status, _) = client.get("/v1/tips?colour=red");
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = client.get("/v1/nowhere");
    assert_eq!(status, StatusCode::NOT_FOUND);
}

/// Holds every consolidator call until released.
struct Gated {
    inner: ScriptBook,
    entered: Mutex<Option<mpsc::Sender<()>>>,
    release: Mutex<mpsc::Receiver<()>>,
}

impl ChatProvider for Gated {
    fn chat(&self, role: Role, model: Option<&str>, prompt: &str, temperature: f64) -> Result<String, ProviderError> {
        if role == Role::Consolidator {
            if let Some(tx) = self.entered.lock().take() {
                tx.send(()).unwrap();
                self.release.lock().recv().unwrap();
            }
        }
        self.inner.chat(role, model, prompt, temperature)
    }
}

#[test]
fn second_consolidation_while_running_is_409() {
    let (entered_tx, entered_rx) = mpsc::channel();
    let (release_tx, release_rx) = mpsc::channel();
    let provider = Arc::new(Gated { inner: ScriptBook::fixtures(), entered: Mutex::new(Some(entered_tx)), release: Mutex::new(release_rx) });
    let settings = tmem_core::config::Settings { fixed_clock: Some(FIXED_CLOCK_SECS), ..Default::default() };
    let engine = engine_with(Store::in_memory(settings.embed_dim), provider, settings);
    tmem_testkit::scenario::ingest_and_extract(&engine).unwrap();
    let client = Arc::new(Client::new(Arc::new(engine)));

    let first = {
        let client = Arc::clone(&client);
        std::thread::spawn(move || client.post("/v1/consolidate", &json!({})))
    };
    entered_rx.recv_timeout(Duration::from_secs(30)).unwrap();
    let (status, err) = client.post("/v1/consolidate", &json!({}));
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(err["kind"], "conflict");
    release_tx.send(()).unwrap();
    let (status, report) = first.join().unwrap();
    assert_eq!(status, StatusCode::OK, "{report}");
    let (status, _) = client.post("/v1/consolidate", &json!({}));
    assert_eq!(status, StatusCode::OK);
}

#[test]
fn service_equals_library() {
    println!("{}", service_equivalence(17, 50).unwrap());
}

#[test]
fn published_schemas_cover_every_body() {
    let schemas = response_schemas();
    for name in ["ingest_response", "job", "retrieve_request", "retrieve_response", "consolidation_report", "tip", "tip_list", "stats", "error", "trajectory"] {
        jsonschema::validator_for(&schemas[name]).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
    let client = Client::new(Arc::new(book_engine()));
    let (status, body) = client.get("/v1/schemas");
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, serde_json::to_value(&schemas).unwrap());
    assert_schema("trajectory", &fixture("hard_failure"));
}

#[test]
fn serves_over_tcp() {
    let rt = tokio::runtime::Runtime::new().unwrap();
    let engine = Arc::new(book_engine());
    let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0")).unwrap();
    let addr = listener.local_addr().unwrap();
    rt.spawn(tmem_service::serve(engine, listener));
    let mut stream = std::net::TcpStream::connect(addr).unwrap();
    use std::io::{Read, Write};
    write!(stream, "GET /v1/stats HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n").unwrap();
    let mut out = String::new();
    stream.read_to_string(&mut out).unwrap();
    assert!(out.starts_with("HTTP/1.1 200"), "{out}");
    assert!(out.contains("\"revision\":0"));
}
