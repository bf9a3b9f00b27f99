//! In-process HTTP client for the service router and the service/library
//! equivalence check.

use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};
use tmem_core::api::{ErrorBody, ExtractMode, RetrieveRequest, TipsQuery};
use tmem_core::engine::{Engine, EngineError};
use tmem_core::model::{Granularity, Priority, TipCategory};
use tmem_core::retrieval::Strategy;
use tmem_service::{router, status_for, AppState};
use tower::ServiceExt;

use crate::fixtures::{book_engine, trajectory, FIXTURES};
use crate::oracle::{random_text, VOCAB};
use crate::scenario::{self, QUERIES};

/// Drives a router on its own runtime without a socket.
pub struct Client {
    router: Router,
    rt: tokio::runtime::Runtime,
}

impl Client {
    pub fn new(engine: Arc<Engine>) -> Self {
        let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build().expect("runtime");
        Client { router: router(AppState::new(engine)), rt }
    }

    pub fn call(&self, method: Method, uri: &str, body: Option<&Value>) -> (StatusCode, Value) {
        let req = Request::builder()
            .method(method)
            .uri(uri)
            .header("content-type", "application/json")
            .body(body.map_or_else(Body::empty, |b| Body::from(b.to_string())))
            .expect("request builds");
        let router = self.router.clone();
        self.rt.block_on(async move {
            let resp = router.oneshot(req).await.expect("router is infallible");
            let status = resp.status();
            let bytes = resp.into_body().collect().await.expect("body reads").to_bytes();
            let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into_owned())) };
            (status, value)
        })
    }

    pub fn get(&self, uri: &str) -> (StatusCode, Value) {
        self.call(Method::GET, uri, None)
    }

    pub fn post(&self, uri: &str, body: &Value) -> (StatusCode, Value) {
        self.call(Method::POST, uri, Some(body))
    }

    /// Polls a job until it leaves `queued`/`running`.
    pub fn wait_job(&self, id: &str, timeout: Duration) -> Value {
        let start = Instant::now();
        loop {
            let (status, job) = self.get(&format!("/v1/jobs/{id}"));
            assert_eq!(status, StatusCode::OK, "job lookup: {job}");
            if job["state"] == "done" || job["state"] == "failed" || start.elapsed() > timeout {
                return job;
            }
            std::thread::sleep(Duration::from_millis(5));
        }
    }
}

/// What the service should answer for a library result.
pub fn expected<T: Serialize>(result: Result<T, EngineError>, ok: StatusCode, validation: StatusCode) -> (StatusCode, Value) {
    match result {
        Ok(v) => (ok, serde_json::to_value(v).expect("serializes")),
        Err(e) => {
            let mut status = status_for(e.kind());
            if status == StatusCode::BAD_REQUEST {
                status = validation;
            }
            (status, serde_json::to_value(ErrorBody { error: e.to_string(), kind: e.kind().as_str().to_owned() }).unwrap())
        }
    }
}

/// Fixture corpus extracted and consolidated under the rule book.
pub fn loaded_engine() -> Engine {
    let engine = book_engine();
    scenario::ingest_and_extract(&engine).expect("fixtures extract");
    engine.consolidate(None).expect("fixtures consolidate");
    engine
}

fn query_string(q: &TipsQuery) -> String {
    let mut parts = Vec::new();
    if let Some(c) = q.category {
        parts.push(format!("category={}", c.as_str()));
    }
    if let Some(p) = q.priority {
        parts.push(format!("priority={}", p.as_str()));
    }
    if let Some(c) = &q.application_context {
        parts.push(format!("application_context={c}"));
    }
    if let Some(g) = q.generic_only {
        parts.push(format!("generic_only={g}"));
    }
    if let Some(c) = &q.task_category {
        parts.push(format!("task_category={c}"));
    }
    if let Some(g) = q.granularity {
        parts.push(format!("granularity={}", g.as_str()));
    }
    if parts.is_empty() {
        String::new()
    } else {
        format!("?{}", parts.join("&"))
    }
}

fn random_retrieve(rng: &mut ChaCha8Rng) -> RetrieveRequest {
    let task_description = if rng.gen_bool(0.6) { QUERIES.choose(rng).unwrap().to_string() } else { random_text(rng, &VOCAB, 1, 6) };
    RetrieveRequest {
        task_description,
        strategy: [None, Some(Strategy::Cosine), Some(Strategy::LlmGuided)].choose(rng).copied().flatten(),
        tau: [None, None, Some(0.0), Some(0.3), Some(0.5), Some(0.6), Some(0.7), Some(1.0), Some(1.2)].choose(rng).copied().flatten(),
        k: [None, None, Some(0), Some(1), Some(3), Some(5), Some(10)].choose(rng).copied().flatten(),
        granularities: [None, Some([Granularity::Task].into()), Some([Granularity::Subtask].into())].choose(rng).cloned().flatten(),
    }
}

fn random_tips_query(rng: &mut ChaCha8Rng) -> TipsQuery {
    TipsQuery {
        category: rng.gen_bool(0.4).then(|| *TipCategory::ALL.choose(rng).unwrap()),
        priority: rng.gen_bool(0.3).then(|| *Priority::ALL.choose(rng).unwrap()),
        application_context: rng.gen_bool(0.4).then(|| ["amazon", "venmo", "spotify", "gmail"].choose(rng).unwrap().to_string()),
        generic_only: rng.gen_bool(0.2).then_some(true),
        task_category: rng.gen_bool(0.2).then(|| ["shopping", "payments", "music"].choose(rng).unwrap().to_string()),
        granularity: rng.gen_bool(0.3).then(|| *[Granularity::Task, Granularity::Subtask].choose(rng).unwrap()),
    }
}

/// A fixture under a fresh id, a duplicate of a stored one, or an invalid body.
fn random_trajectory(rng: &mut ChaCha8Rng, n: usize) -> Value {
    let stem = FIXTURES.choose(rng).unwrap();
    let mut t = serde_json::to_value(trajectory(stem)).unwrap();
    match rng.gen_range(0..6) {
        0 => {}
        1 => t["steps"] = json!([]),
        _ => t["id"] = json!(format!("{}-copy-{n}", t["id"].as_str().unwrap())),
    }
    t
}

/// `n` randomized requests against the service and against a second engine
/// with identical state; every status and body must match field for field.
pub fn service_equivalence(seed: u64, n: usize) -> Result<String, String> {
    let client = Client::new(Arc::new(loaded_engine()));
    let lib = loaded_engine();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = [0usize; 7];
    let mut errors = 0;
    for i in 0..n {
        let op = rng.gen_range(0..counts.len());
        counts[op] += 1;
        let (label, got, want) = match op {
            0 => {
                let req = random_retrieve(&mut rng);
                let got = client.post("/v1/retrieve", &serde_json::to_value(&req).unwrap());
                ("retrieve", got, expected(lib.retrieve(&req), StatusCode::OK, StatusCode::UNPROCESSABLE_ENTITY))
            }
            1 => {
                let q = random_tips_query(&mut rng);
                let got = client.get(&format!("/v1/tips{}", query_string(&q)));
                ("tips", got, expected(lib.tips(q), StatusCode::OK, StatusCode::BAD_REQUEST))
            }
            2 => {
                let ids: Vec<String> = lib.store.snapshot().tips.keys().cloned().collect();
                let id = if rng.gen_bool(0.8) { ids.choose(&mut rng).cloned().unwrap_or_default() } else { format!("missing-{i}") };
                ("tip", client.get(&format!("/v1/tips/{id}")), expected(lib.tip(&id), StatusCode::OK, StatusCode::BAD_REQUEST))
            }
            3 => ("stats", client.get("/v1/stats"), (StatusCode::OK, serde_json::to_value(lib.stats()).unwrap())),
            4 => {
                let body = random_trajectory(&mut rng, i);
                let got = client.post("/v1/trajectories", &body);
                let raw = serde_json::from_value(body).unwrap();
                ("ingest", got, expected(lib.ingest(raw), StatusCode::CREATED, StatusCode::BAD_REQUEST))
            }
            5 => {
                let threshold = [None, Some(0.85), Some(0.7), Some(1.5)].choose(&mut rng).copied().flatten();
                let got = client.post("/v1/consolidate", &json!({ "threshold": threshold }));
                ("consolidate", got, expected(lib.consolidate(threshold), StatusCode::OK, StatusCode::BAD_REQUEST))
            }
            _ => {
                let body = random_trajectory(&mut rng, i);
                let mode = *[ExtractMode::Task, ExtractMode::Subtask, ExtractMode::Both].choose(&mut rng).unwrap();
                let mode_str = serde_json::to_value(mode).unwrap();
                let (status, resp) = client.post(&format!("/v1/trajectories?extract={}", mode_str.as_str().unwrap()), &body);
                let raw = serde_json::from_value(body).unwrap();
                match lib.ingest(raw) {
                    Err(e) => ("ingest+extract", (status, resp), expected::<()>(Err(e), StatusCode::CREATED, StatusCode::BAD_REQUEST)),
                    Ok(ingested) => {
                        let job_id = resp["job_id"].as_str().ok_or_else(|| format!("request {i}: no job id in {resp}"))?.to_owned();
                        let job = client.wait_job(&job_id, Duration::from_secs(30));
                        let summary = lib.extract(&ingested.id, mode);
                        let want_state = if summary.is_ok() { "done" } else { "failed" };
                        if job["state"] != want_state {
                            return Err(format!("request {i}: job {job_id} ended {} instead of {want_state}", job["state"]));
                        }
                        let got = if summary.is_ok() { (StatusCode::OK, job["summary"].clone()) } else { (StatusCode::OK, job["error"].clone()) };
                        let want = match summary {
                            Ok(s) => (StatusCode::OK, serde_json::to_value(s).unwrap()),
                            Err(e) => (StatusCode::OK, json!({ "error": e.to_string(), "kind": e.kind().as_str() })),
                        };
                        let mut ingest_want = serde_json::to_value(&ingested).unwrap();
                        ingest_want["job_id"] = json!(job_id);
                        if (status, &resp) != (StatusCode::CREATED, &ingest_want) {
                            return Err(format!("request {i} ingest+extract: service {status} {resp}, library {ingest_want}"));
                        }
                        ("extract job", got, want)
                    }
                }
            }
        };
        if got != want {
            return Err(format!("request {i} ({label}): service {} {}\nlibrary {} {}", got.0, got.1, want.0, want.1));
        }
        errors += usize::from(!got.0.is_success());
    }
    Ok(format!(
        "{n} requests (retrieve {}, tips {}, tip {}, stats {}, ingest {}, consolidate {}, extract {}; {errors} error responses) identical",
        counts[0], counts[1], counts[2], counts[3], counts[4], counts[5], counts[6]
    ))
}
