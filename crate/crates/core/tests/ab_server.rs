use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use rerank_core::eval::ab::SystemResponse;
use rerank_core::eval::server::{router, AbState};
use rerank_core::eval::{ABTask, JudgmentLog};
use rerank_core::{Context, Speaker, Utterance};

fn task(i: usize, swapped: bool) -> ABTask {
    let a = SystemResponse {
        system: "alpha".into(),
        response: format!("alpha says {i}"),
    };
    let b = SystemResponse {
        system: "beta".into(),
        response: format!("beta says {i}"),
    };
    let (left, right) = if swapped { (b, a) } else { (a, b) };
    ABTask {
        task_id: format!("t{i:04}"),
        context: Context::from_utterances(
            format!("d{i}#1"),
            vec![Utterance::new(Speaker::User, format!("hello {i}"))],
        ),
        left,
        right,
        swapped,
    }
}

fn app(n: usize) -> Router {
    let tasks = (0..n).map(|i| task(i, i % 2 == 1)).collect();
    router(Arc::new(AbState::new(tasks, JudgmentLog::in_memory()).unwrap()), None)
}

async fn call(app: &Router, req: Request<Body>) -> (StatusCode, Value) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

fn post(body: Value) -> Request<Body> {
    Request::post("/api/judgments")
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap()
}

fn judgment(task: &str, ev: &str, choice: &str) -> Value {
    json!({ "task_id": task, "evaluator_id": ev, "choice": choice })
}

#[tokio::test]
async fn next_task_hides_system_names_and_advances() {
    let app = app(2);
    let (s, v) = call(&app, get("/api/tasks/next?evaluator=e1")).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["task_id"], "t0000");
    assert_eq!(v["option_a"], "alpha says 0");
    assert_eq!(v["history"][0], json!({ "speaker": "user", "text": "hello 0" }));
    assert_eq!(v["progress"], json!({ "done": 0, "total": 2 }));
    assert!(!v.to_string().contains("\"alpha\""));

    let (s, v) = call(&app, post(judgment("t0000", "e1", "left"))).await;
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(v["progress"]["done"], 1);

    let (_, v) = call(&app, get("/api/tasks/next?evaluator=e1")).await;
    assert_eq!(v["task_id"], "t0001");
    // another evaluator starts from the beginning
    let (_, v) = call(&app, get("/api/tasks/next?evaluator=e2")).await;
    assert_eq!(v["task_id"], "t0000");

    call(&app, post(judgment("t0001", "e1", "b"))).await;
    let (s, v) = call(&app, get("/api/tasks/next?evaluator=e1")).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v, json!({ "exhausted": true, "progress": { "done": 2, "total": 2 } }));

    let (_, v) = call(&app, get("/api/progress?evaluator=e1")).await;
    assert_eq!(v, json!({ "evaluator": "e1", "done": 2, "total": 2 }));
}

#[tokio::test]
async fn error_statuses() {
    let app = app(1);
    assert_eq!(call(&app, post(judgment("t0000", "e1", "left"))).await.0, StatusCode::CREATED);
    assert_eq!(call(&app, post(judgment("t0000", "e1", "right"))).await.0, StatusCode::CONFLICT);
    assert_eq!(call(&app, post(judgment("nope", "e1", "left"))).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&app, post(judgment("t0000", " ", "left"))).await.0, StatusCode::BAD_REQUEST);
    assert!(call(&app, post(judgment("t0000", "e2", "middle"))).await.0.is_client_error());
    assert!(call(&app, post(json!({ "task_id": "t0000" }))).await.0.is_client_error());
    let raw = Request::post("/api/judgments")
        .header("content-type", "application/json")
        .body(Body::from("{not json"))
        .unwrap();
    assert!(call(&app, raw).await.0.is_client_error());
    assert!(call(&app, get("/api/tasks/next")).await.0.is_client_error());
    assert_eq!(call(&app, get("/api/tasks/next?evaluator=")).await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn stats_over_600_judgments() {
    // 200 tasks x 3 evaluators; alpha wins 347 of 600
    let app = app(200);
    let mut alpha_wins = 0;
    for i in 0..200 {
        for ev in ["e1", "e2", "e3"] {
            let want_alpha = alpha_wins < 347;
            // alpha sits on the right for odd (swapped) tasks
            let choice = match (want_alpha, i % 2 == 1) {
                (true, false) | (false, true) => "left",
                _ => "right",
            };
            alpha_wins += usize::from(want_alpha);
            let task = format!("t{i:04}");
            assert_eq!(call(&app, post(judgment(&task, ev, choice))).await.0, StatusCode::CREATED);
        }
    }
    let (s, v) = call(&app, get("/api/stats")).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["n_judgments"], 600);
    let p = &v["pairs"][0];
    assert_eq!((p["system_a"].as_str(), p["system_b"].as_str()), (Some("alpha"), Some("beta")));
    assert_eq!((p["wins_a"].as_u64(), p["total"].as_u64()), (Some(347), Some(600)));
    assert!((p["pct_a"].as_f64().unwrap() - 57.833).abs() < 1e-3);
    assert!(p["p_value"].as_f64().unwrap() < 0.05);
    assert_eq!(p["significant"], true);
    assert_eq!(p["evaluators"], 3);
    assert_eq!(p["kappa_tasks"], 200);
}

#[test]
fn state_rejects_inconsistent_inputs() {
    let dup = vec![task(0, false), task(0, true)];
    assert!(AbState::new(dup, JudgmentLog::in_memory()).is_err());
}

#[tokio::test]
async fn log_survives_restart() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("judgments.jsonl");
    let tasks: Vec<_> = (0..3).map(|i| task(i, false)).collect();
    let app1 = router(
        Arc::new(AbState::new(tasks.clone(), JudgmentLog::open(&store).unwrap()).unwrap()),
        None,
    );
    call(&app1, post(judgment("t0000", "e1", "left"))).await;
    let app2 = router(
        Arc::new(AbState::new(tasks, JudgmentLog::open(&store).unwrap()).unwrap()),
        None,
    );
    let (_, v) = call(&app2, get("/api/tasks/next?evaluator=e1")).await;
    assert_eq!(v["task_id"], "t0001");
    assert_eq!(call(&app2, post(judgment("t0000", "e1", "left"))).await.0, StatusCode::CONFLICT);
}

#[tokio::test]
async fn static_assets_fallback() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<p>ab</p>").unwrap();
    let state = Arc::new(AbState::new(vec![task(0, false)], JudgmentLog::in_memory()).unwrap());
    let app = router(state, Some(dir.path().to_path_buf()));
    let resp = app.clone().oneshot(get("/index.html")).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    let body = resp.into_body().collect().await.unwrap().to_bytes();
    assert_eq!(&body[..], b"<p>ab</p>");
    assert_eq!(call(&app, get("/api/tasks/next?evaluator=x")).await.0, StatusCode::OK);
}

#[tokio::test]
async fn six_evaluators_match_offline_recomputation() {
    use rand::Rng;
    use rerank_core::eval::ab_stats;

    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("log.jsonl");
    let tasks: Vec<_> = (0..100).map(|i| task(i, i % 3 == 0)).collect();
    let app = router(
        Arc::new(AbState::new(tasks.clone(), JudgmentLog::open(&store).unwrap()).unwrap()),
        None,
    );
    let mut rng = rerank_core::seeded_rng(3, 0);
    let expected_keys = ["history", "option_a", "option_b", "progress", "task_id"];
    for ev in ["e1", "e2", "e3", "e4", "e5", "e6"] {
        loop {
            let (_, v) = call(&app, get(&format!("/api/tasks/next?evaluator={ev}"))).await;
            if v.get("exhausted").is_some() {
                break;
            }
            let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
            keys.sort();
            assert_eq!(keys, expected_keys);
            assert!(!v.to_string().contains("\"system\""));
            let id = v["task_id"].as_str().unwrap().to_string();
            let choice = if rng.gen_bool(0.6) { "left" } else { "right" };
            assert_eq!(call(&app, post(judgment(&id, ev, choice))).await.0, StatusCode::CREATED);
        }
    }
    let (_, served) = call(&app, get("/api/stats")).await;
    let replayed = JudgmentLog::open(&store).unwrap();
    assert_eq!(replayed.judgments().len(), 600);
    let offline = serde_json::to_value(ab_stats(&tasks, replayed.judgments()).unwrap()).unwrap();
    assert_eq!(served, offline);
    assert_eq!(served["pairs"][0]["evaluators"], 6);
    assert_eq!(served["pairs"][0]["kappa_tasks"], 100);
}
