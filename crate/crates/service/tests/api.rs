use std::path::Path;
use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::Router;
use serde_json::{json, Value};
use tower::ServiceExt;

use courselab::harness::Scenario;
use courselab_service::{router, AppState, ServiceConfig};

fn config(dir: &Path) -> ServiceConfig {
    let scenario = Scenario {
        m: 12,
        n_students: 8,
        max_courses: 3,
        n_popular: 4,
        ..Scenario::default()
    };
    ServiceConfig::new(scenario.instance(5, 0).unwrap(), dir, 11)
}

fn start(dir: &Path) -> (Arc<AppState>, Router) {
    let state = AppState::open(config(dir)).unwrap();
    (state.clone(), router(state))
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let body = body.map_or_else(Body::empty, |v| Body::from(v.to_string()));
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body)
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap()
    };
    (status, value)
}

fn report() -> Value {
    json!({
        "base": {"0": 90.0, "1": 70.0, "2": 65.0, "4": 40.0, "6": 30.0, "9": 15.0},
        "adj": [[0, 2, 25.0], [1, 4, -20.0]]
    })
}

/// Answers by preferring the schedule that holds more of the first few courses.
fn pick(query: &Value) -> Value {
    let score = |side: &str| -> i64 {
        query[side]["courses"]
            .as_array()
            .unwrap()
            .iter()
            .map(|c| 10 - c.as_i64().unwrap())
            .sum()
    };
    if score("left") >= score("right") {
        query["left"]["courses"].clone()
    } else {
        query["right"]["courses"].clone()
    }
}

/// Runs `rounds` query/answer rounds and returns the queries seen.
async fn answer_rounds(app: &Router, id: u64, rounds: usize) -> Vec<Value> {
    let mut seen = Vec::new();
    for _ in 0..rounds {
        let (status, next) = call(app, "GET", &format!("/sessions/{id}/next-query"), None).await;
        assert_eq!(status, StatusCode::OK, "{next}");
        let query = next["query"].clone();
        assert!(!query.is_null(), "session ended early");
        let body = json!({"query_id": query["id"], "winner": pick(&query)});
        let (status, resp) = call(app, "POST", &format!("/sessions/{id}/answer"), Some(body)).await;
        assert_eq!(status, StatusCode::OK, "{resp}");
        seen.push(query);
    }
    seen
}

#[tokio::test]
async fn protocol_walk_ends_in_a_sorted_summary() {
    let dir = tempfile::tempdir().unwrap();
    let (_, app) = start(dir.path());

    let (status, created) = call(&app, "POST", "/sessions", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(created["id"], 1);
    assert_eq!(created["status"], "REPORTING");
    assert_eq!(created["courses"].as_array().unwrap().len(), 12);

    let (status, progress) = call(&app, "PUT", "/sessions/1/report", Some(report())).await;
    assert_eq!(status, StatusCode::OK, "{progress}");
    assert_eq!(progress["status"], "ELICITING");

    let queries = answer_rounds(&app, 1, 10).await;
    for q in &queries {
        assert_ne!(q["left"]["courses"], q["right"]["courses"]);
        assert!(!q["left"]["names"].as_array().unwrap().is_empty() || !q["right"]["names"].as_array().unwrap().is_empty());
    }

    let (status, info) = call(&app, "GET", "/sessions/1", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(info["answered"], 10);

    let (status, summary) = call(&app, "GET", "/sessions/1/summary", None).await;
    assert_eq!(status, StatusCode::OK);
    let top = summary["top"].as_array().unwrap();
    assert_eq!(top.len(), 5);
    let budget = info["budget"].as_f64().unwrap();
    for w in top.windows(2) {
        assert!(w[0]["value"].as_f64().unwrap() >= w[1]["value"].as_f64().unwrap());
    }
    for t in top {
        assert!(t["cost"].as_f64().unwrap() <= budget + 1e-9);
        assert_eq!(t["names"].as_array().unwrap().len(), t["courses"].as_array().unwrap().len());
    }
}

#[tokio::test]
async fn malformed_reports_are_unprocessable() {
    let dir = tempfile::tempdir().unwrap();
    let (_, app) = start(dir.path());
    call(&app, "POST", "/sessions", None).await;

    let bad_adjustment = json!({"base": {"0": 50.0, "1": 50.0}, "adj": [[0, 1, 250.0]]});
    let (status, body) = call(&app, "PUT", "/sessions/1/report", Some(bad_adjustment)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(body["error"].as_str().unwrap().contains("250"));

    let bad_base = json!({"base": {"3": 101.0}});
    let (status, _) = call(&app, "PUT", "/sessions/1/report", Some(bad_base)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);

    let outside_catalog = json!({"base": {"12": 10.0}});
    let (status, _) = call(&app, "PUT", "/sessions/1/report", Some(outside_catalog)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);

    // a rejected report leaves the session waiting for one
    let (_, info) = call(&app, "GET", "/sessions/1", None).await;
    assert_eq!(info["status"], "REPORTING");
}

#[tokio::test]
async fn unknown_sessions_and_out_of_order_calls() {
    let dir = tempfile::tempdir().unwrap();
    let (_, app) = start(dir.path());

    for (method, uri) in [
        ("GET", "/sessions/7"),
        ("GET", "/sessions/7/next-query"),
        ("GET", "/sessions/7/summary"),
    ] {
        assert_eq!(call(&app, method, uri, None).await.0, StatusCode::NOT_FOUND, "{uri}");
    }
    assert_eq!(call(&app, "PUT", "/sessions/7/report", Some(report())).await.0, StatusCode::NOT_FOUND);

    call(&app, "POST", "/sessions", None).await;
    let early = json!({"query_id": 0, "winner": [0]});
    assert_eq!(call(&app, "POST", "/sessions/1/answer", Some(early)).await.0, StatusCode::CONFLICT);
    assert_eq!(call(&app, "GET", "/sessions/1/next-query", None).await.0, StatusCode::CONFLICT);

    call(&app, "PUT", "/sessions/1/report", Some(report())).await;
    assert_eq!(call(&app, "PUT", "/sessions/1/report", Some(report())).await.0, StatusCode::CONFLICT);

    let (_, next) = call(&app, "GET", "/sessions/1/next-query", None).await;
    let q = next["query"].clone();
    let stale = json!({"query_id": q["id"].as_u64().unwrap() + 1, "winner": q["left"]["courses"]});
    assert_eq!(call(&app, "POST", "/sessions/1/answer", Some(stale)).await.0, StatusCode::CONFLICT);

    let good = json!({"query_id": q["id"], "winner": q["left"]["courses"]});
    assert_eq!(call(&app, "POST", "/sessions/1/answer", Some(good.clone())).await.0, StatusCode::OK);
    assert_eq!(call(&app, "POST", "/sessions/1/answer", Some(good)).await.0, StatusCode::CONFLICT);

    // slots: explicit duplicates conflict, out-of-range slots are rejected
    assert_eq!(call(&app, "POST", "/sessions", Some(json!({"student": 0}))).await.0, StatusCode::CONFLICT);
    assert_eq!(
        call(&app, "POST", "/sessions", Some(json!({"student": 8}))).await.0,
        StatusCode::UNPROCESSABLE_ENTITY
    );
    let (status, second) = call(&app, "POST", "/sessions", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!((second["id"].as_u64(), second["student"].as_u64()), (Some(2), Some(1)));
}

#[tokio::test]
async fn next_query_is_idempotent_until_answered() {
    let dir = tempfile::tempdir().unwrap();
    let (_, app) = start(dir.path());
    call(&app, "POST", "/sessions", None).await;
    call(&app, "PUT", "/sessions/1/report", Some(report())).await;
    let (_, a) = call(&app, "GET", "/sessions/1/next-query", None).await;
    let (_, b) = call(&app, "GET", "/sessions/1/next-query", None).await;
    assert_eq!(a, b);
}

#[tokio::test]
async fn restart_replays_the_log_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let reference = tempfile::tempdir().unwrap();

    // uninterrupted run
    let (_, app) = start(reference.path());
    call(&app, "POST", "/sessions", Some(json!({"algorithm": "OBIS"}))).await;
    call(&app, "PUT", "/sessions/1/report", Some(report())).await;
    let straight = answer_rounds(&app, 1, 8).await;
    let (_, straight_summary) = call(&app, "GET", "/sessions/1/summary", None).await;

    // the same answers with a restart in the middle and a query left open
    let (_, app) = start(dir.path());
    call(&app, "POST", "/sessions", Some(json!({"algorithm": "OBIS"}))).await;
    call(&app, "PUT", "/sessions/1/report", Some(report())).await;
    let mut resumed = answer_rounds(&app, 1, 4).await;
    let (_, open) = call(&app, "GET", "/sessions/1/next-query", None).await;
    drop(app);

    let (state, app) = start(dir.path());
    assert_eq!(state.n_sessions(), 1);
    let (_, again) = call(&app, "GET", "/sessions/1/next-query", None).await;
    assert_eq!(open, again);
    resumed.extend(answer_rounds(&app, 1, 4).await);
    assert_eq!(straight, resumed);
    let (_, resumed_summary) = call(&app, "GET", "/sessions/1/summary", None).await;
    assert_eq!(straight_summary, resumed_summary);

    // identical logs
    let a = std::fs::read(reference.path().join("session-1.jsonl")).unwrap();
    let b = std::fs::read(dir.path().join("session-1.jsonl")).unwrap();
    assert_eq!(a, b);
}

#[tokio::test]
async fn corrupted_logs_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let (_, app) = start(dir.path());
    call(&app, "POST", "/sessions", None).await;
    call(&app, "PUT", "/sessions/1/report", Some(report())).await;
    answer_rounds(&app, 1, 2).await;
    drop(app);

    let path = dir.path().join("session-1.jsonl");
    let text = std::fs::read_to_string(&path).unwrap();
    let tampered: String = text
        .lines()
        .map(|l| {
            let mut v: Value = serde_json::from_str(l).unwrap();
            if v["event"] == "report" {
                v["report"]["base"]["0"] = json!(10.0);
            }
            format!("{v}\n")
        })
        .collect();
    std::fs::write(&path, tampered).unwrap();
    assert!(AppState::open(config(dir.path())).is_err());
}

#[tokio::test]
async fn allocation_places_live_students_in_the_cohort() {
    let dir = tempfile::tempdir().unwrap();
    let (_, app) = start(dir.path());
    call(&app, "POST", "/sessions", Some(json!({"student": 3}))).await;
    call(&app, "PUT", "/sessions/1/report", Some(report())).await;
    answer_rounds(&app, 1, 3).await;
    // a session without a report takes no part
    call(&app, "POST", "/sessions", None).await;

    for kind in ["MLCM", "CM"] {
        let body = json!({"kind": kind, "n_queries": 2, "seed": 4});
        let (status, resp) = call(&app, "POST", "/allocate", Some(body.clone())).await;
        assert_eq!(status, StatusCode::OK, "{resp}");
        assert_eq!(resp["kind"], kind);
        let sessions = resp["sessions"].as_array().unwrap();
        assert_eq!(sessions.len(), 1);
        assert_eq!(sessions[0]["student"], 3);
        assert!(sessions[0]["schedule"]["courses"].as_array().unwrap().len() <= 3);
        assert!(resp["cohort_mean_utility"].as_f64().unwrap() > 0.0);
        let (_, again) = call(&app, "POST", "/allocate", Some(body)).await;
        assert_eq!(resp, again);
    }
    let (status, _) = call(&app, "POST", "/allocate", Some(json!({"kind": "NOPE"}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_answers_to_one_query_are_serialized() {
    let dir = tempfile::tempdir().unwrap();
    let (_, app) = start(dir.path());
    call(&app, "POST", "/sessions", None).await;
    call(&app, "PUT", "/sessions/1/report", Some(report())).await;
    let (_, next) = call(&app, "GET", "/sessions/1/next-query", None).await;
    let body = json!({"query_id": next["query"]["id"], "winner": next["query"]["left"]["courses"]});
    let tasks: Vec<_> = (0..8)
        .map(|_| {
            let app = app.clone();
            let body = body.clone();
            tokio::spawn(async move { call(&app, "POST", "/sessions/1/answer", Some(body)).await.0 })
        })
        .collect();
    let mut codes = Vec::new();
    for t in tasks {
        codes.push(t.await.unwrap());
    }
    assert_eq!(codes.iter().filter(|&&c| c == StatusCode::OK).count(), 1);
    assert_eq!(codes.iter().filter(|&&c| c == StatusCode::CONFLICT).count(), 7);
    let (_, info) = call(&app, "GET", "/sessions/1", None).await;
    assert_eq!(info["answered"], 1);
}

#[tokio::test]
async fn next_query_answers_within_a_second_at_full_size() {
    let dir = tempfile::tempdir().unwrap();
    let instance = Scenario::default().instance(2, 0).unwrap();
    let app = router(AppState::open(ServiceConfig::new(instance, dir.path(), 3)).unwrap());
    call(&app, "POST", "/sessions", None).await;
    let report = json!({
        "base": {"0": 95.0, "3": 80.0, "5": 75.0, "8": 60.0, "11": 55.0, "14": 40.0, "17": 30.0, "20": 20.0, "24": 10.0},
        "adj": [[0, 3, 30.0], [5, 8, -40.0]]
    });
    assert_eq!(call(&app, "PUT", "/sessions/1/report", Some(report)).await.0, StatusCode::OK);
    for _ in 0..10 {
        let t = std::time::Instant::now();
        let (_, next) = call(&app, "GET", "/sessions/1/next-query", None).await;
        let q = &next["query"];
        let body = json!({"query_id": q["id"], "winner": pick(q)});
        assert_eq!(call(&app, "POST", "/sessions/1/answer", Some(body)).await.0, StatusCode::OK);
        let elapsed = t.elapsed().as_secs_f64();
        assert!(elapsed < 1.0, "round trip took {elapsed:.3}s");
    }
}
