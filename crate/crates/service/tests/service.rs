use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use causalmix::elicit_loop::{run_elicitation_loop, ElicitationSession, OracleResponder};
use causalmix::events::NullSink;
use causalmix::experiment::{oracle_for, oracle_seed, prepare_data, ExperimentConfig, SyntheticSpec};
use causalmix::mixture::PriorConfig;
use causalmix_service::session::read_log;
use causalmix_service::{router, AppState, LiveSession};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn config() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.synthetic = Some(SyntheticSpec { num_vars: 4, num_rows: 60, held_out_rows: 0, edges_per_node: 1.0, ..Default::default() });
    c.inference.num_particles = 4;
    c.inference.cavi_rounds = 2;
    c.inference.schedules.total_steps = 500;
    c.inference.schedules.omega_slope = 0.005;
    c.inference.schedules.learning_rate = 0.05;
    c.inference.structure_prior = PriorConfig::ErdosRenyi { edges_per_node: 1.0 };
    c.elicitation.queries_per_component = 2;
    c.elicitation.rounds = 2;
    c.seeds = vec![3];
    c
}

fn make_app(state: AppState) -> Router {
    router(Arc::new(state))
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = req.body(body.map_or_else(Body::empty, |b| Body::from(b.to_string()))).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

async fn wait_idle(app: &Router, id: &str) -> Value {
    for _ in 0..6000 {
        let (status, state) = call(app, "GET", &format!("/sessions/{id}/state"), None).await;
        assert_eq!(status, StatusCode::OK);
        if !state["running"].as_bool().unwrap() {
            return state;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    panic!("session {id} never finished its segment");
}

async fn create(app: &Router, cfg: &ExperimentConfig) -> String {
    let (status, body) = call(app, "POST", "/sessions", Some(json!({ "config": cfg, "seed": 3 }))).await;
    assert_eq!(status, StatusCode::CREATED, "{body}");
    assert_eq!(body["phase"], "inferring");
    body["id"].as_str().unwrap().to_string()
}

fn oracle(cfg: &ExperimentConfig) -> OracleResponder {
    let truth = prepare_data(cfg, 3).unwrap().truth.unwrap();
    OracleResponder::new(oracle_for(cfg, &truth), oracle_seed(3)).unwrap()
}

fn in_process(cfg: &ExperimentConfig) -> ElicitationSession {
    let data = prepare_data(cfg, 3).unwrap().data;
    let mut responder = oracle(cfg);
    run_elicitation_loop(&data, cfg.inference.clone(), cfg.elicitation.clone(), None, 3, &mut responder, &mut NullSink)
        .unwrap()
}

/// Answers every round through the HTTP interface with the simulated expert.
async fn drive(app: &Router, id: &str, cfg: &ExperimentConfig) -> usize {
    let expert = oracle(cfg);
    let mut rounds = 0;
    loop {
        let state = wait_idle(app, id).await;
        if state["phase"] == "done" {
            return rounds;
        }
        let (_, q) = call(app, "GET", &format!("/sessions/{id}/queries"), None).await;
        let answers: Vec<Value> = q["queries"]
            .as_array()
            .unwrap()
            .iter()
            .map(|q| {
                let (k, i, j) = (q["component"].as_u64().unwrap() as usize, q["edge"][0].as_u64().unwrap() as usize, q["edge"][1].as_u64().unwrap() as usize);
                json!({ "component": k, "edge": [i, j], "psi_star": expert.answer(k, (i, j)).unwrap() })
            })
            .collect();
        let (status, body) = call(app, "POST", &format!("/sessions/{id}/responses"), Some(Value::Array(answers))).await;
        assert_eq!(status, StatusCode::OK, "{body}");
        let (status, body) = call(app, "POST", &format!("/sessions/{id}/advance"), None).await;
        assert_eq!(status, StatusCode::ACCEPTED);
        assert_eq!(body["location"], format!("/sessions/{id}/state"));
        rounds += 1;
    }
}

async fn snapshot(app: &Router, id: &str) -> ElicitationSession {
    let (status, body) = call(app, "GET", &format!("/sessions/{id}/snapshot"), None).await;
    assert_eq!(status, StatusCode::OK);
    serde_json::from_value(body).unwrap()
}

#[tokio::test]
async fn lifecycle_and_state_summary() {
    let app = make_app(AppState::new(None));
    let cfg = config();
    let id = create(&app, &cfg).await;
    let state = wait_idle(&app, &id).await;
    assert_eq!(state["phase"], "awaiting_responses");
    assert_eq!(state["round"], 0);
    let graph = &state["components"][0]["soft_graph"];
    assert_eq!(graph.as_array().unwrap().len(), 4);
    for v in graph.as_array().unwrap().iter().flat_map(|r| r.as_array().unwrap()) {
        let v = v.as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v));
        assert_eq!((v * 1e4).round() / 1e4, v, "soft graph entries carry 4 decimals");
    }
    assert_eq!(state["alpha"].as_array().unwrap().len(), 1);
    let (_, q) = call(&app, "GET", &format!("/sessions/{id}/queries"), None).await;
    let queries = q["queries"].as_array().unwrap();
    assert_eq!(queries.len(), 2);
    assert_eq!(queries[0]["rank"], 0);
    assert!(queries[0]["eig"].as_f64().unwrap() >= queries[1]["eig"].as_f64().unwrap());
}

#[tokio::test]
async fn error_statuses() {
    let app = make_app(AppState::new(None));
    let (status, _) = call(&app, "GET", "/sessions/nope/state", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&app, "POST", "/sessions/nope/advance", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let mut bad = config();
    bad.inference.num_particles = 0;
    let (status, body) = call(&app, "POST", "/sessions", Some(json!({ "config": bad }))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["field"], "num_particles", "{body}");
    let (status, _) = call(&app, "POST", "/sessions", Some(json!({ "config": { "schema_version": 1, "bogus": 1 } }))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);

    let cfg = config();
    let id = create(&app, &cfg).await;
    wait_idle(&app, &id).await;
    let (_, q) = call(&app, "GET", &format!("/sessions/{id}/queries"), None).await;
    let edge = q["queries"][0]["edge"].clone();
    let uri = format!("/sessions/{id}/responses");
    let post = |body: Value| call(&app, "POST", &uri, Some(body));
    let (status, _) = post(json!([{ "component": 0, "edge": edge, "psi_star": 1.2 }])).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    // Pick an edge outside the pending set.
    let pending: Vec<Value> = q["queries"].as_array().unwrap().iter().map(|q| q["edge"].clone()).collect();
    let other = (0..4).flat_map(|i| (0..4).map(move |j| json!([i, j]))).find(|e| e[0] != e[1] && !pending.contains(e)).unwrap();
    let (status, _) = post(json!([{ "component": 0, "edge": other, "psi_star": 0.7 }])).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    // A rejected batch registers nothing.
    let (status, _) = post(json!([{ "component": 0, "edge": edge, "psi_star": 0.7 }, { "component": 0, "edge": edge, "psi_star": -0.1 }])).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(snapshot(&app, &id).await.records.len(), 0);

    let (status, body) = post(json!([{ "component": 0, "edge": edge, "psi_star": 1.0 }])).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["records"][0]["kind"], "hard_present");

    let (status, _) = call(&app, "POST", &format!("/sessions/{id}/advance"), None).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let state = wait_idle(&app, &id).await;
    assert_eq!(state["phase"], "awaiting_responses");
    let (status, _) = call(&app, "POST", &format!("/sessions/{id}/advance"), None).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let state = wait_idle(&app, &id).await;
    assert_eq!(state["phase"], "done");
    let (status, _) = post(json!([{ "component": 0, "edge": edge, "psi_star": 0.7 }])).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, _) = call(&app, "POST", &format!("/sessions/{id}/advance"), None).await;
    assert_eq!(status, StatusCode::CONFLICT);
}

#[tokio::test]
async fn responses_while_inferring_conflict() {
    let cfg = config();
    let mut live = LiveSession::create("1".into(), cfg, 3, None).unwrap();
    let err = live.submit(vec![]).unwrap_err();
    assert_eq!(err.status(), StatusCode::CONFLICT);
    live.run_blocking().unwrap();
    live.begin_segment();
    let err = live.submit(vec![]).unwrap_err();
    assert_eq!(err.status(), StatusCode::CONFLICT);
}

#[tokio::test]
async fn scripted_session_matches_in_process_loop() {
    let app = make_app(AppState::new(None));
    let cfg = config();
    let id = create(&app, &cfg).await;
    assert_eq!(drive(&app, &id, &cfg).await, 2);
    let served = snapshot(&app, &id).await;
    let local = in_process(&cfg);
    assert_eq!(served.records.len(), 4);
    assert_eq!(served.state.digest(), local.state.digest());
    assert_eq!(served, local);
}

#[tokio::test]
async fn log_replay_rebuilds_the_session() {
    let dir = tempfile::tempdir().unwrap();
    let app = make_app(AppState::new(Some(dir.path().to_path_buf())));
    let cfg = config();
    let id = create(&app, &cfg).await;
    drive(&app, &id, &cfg).await;
    let served = snapshot(&app, &id).await;

    let path = dir.path().join(format!("session-{id}.ndjson"));
    let entries = read_log(&path).unwrap();
    let replayed = LiveSession::replay(&entries, None).unwrap();
    assert_eq!(replayed.session, served);

    // A log cut after the last advance resumes by rerunning that segment.
    let cut = entries.iter().rposition(|e| matches!(e, causalmix_service::LogEntry::Advance)).unwrap();
    let resumed = LiveSession::replay(&entries[..=cut], None).unwrap();
    assert_eq!(resumed.session, served);

    let recovered = make_app(AppState::recover(dir.path()).unwrap());
    assert_eq!(snapshot(&recovered, &id).await, served);
    let (status, body) = call(&recovered, "POST", "/sessions", Some(json!({ "config": cfg, "seed": 3 }))).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_ne!(body["id"], id.as_str());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn headless_client_completes_two_rounds_over_tcp() {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(causalmix_service::serve(listener, Arc::new(AppState::new(None))));
    let base = format!("http://{addr}");
    let client = reqwest::Client::new();
    let cfg = config();
    let expert = oracle(&cfg);

    let created: Value = client.post(format!("{base}/sessions")).json(&json!({ "config": cfg, "seed": 3 })).send().await.unwrap().json().await.unwrap();
    let id = created["id"].as_str().unwrap().to_string();
    let state_url = format!("{base}{}", created["location"].as_str().unwrap());
    let mut rounds = 0;
    loop {
        let state: Value = loop {
            let s: Value = client.get(&state_url).send().await.unwrap().json().await.unwrap();
            if !s["running"].as_bool().unwrap() {
                break s;
            }
            tokio::time::sleep(Duration::from_millis(20)).await;
        };
        if state["phase"] == "done" {
            break;
        }
        let q: Value = client.get(format!("{base}/sessions/{id}/queries")).send().await.unwrap().json().await.unwrap();
        let answers: Vec<Value> = q["queries"]
            .as_array()
            .unwrap()
            .iter()
            .map(|q| {
                let edge: (usize, usize) = serde_json::from_value(q["edge"].clone()).unwrap();
                let k = q["component"].as_u64().unwrap() as usize;
                json!({ "component": k, "edge": edge, "psi_star": expert.answer(k, edge).unwrap() })
            })
            .collect();
        let resp = client.post(format!("{base}/sessions/{id}/responses")).json(&answers).send().await.unwrap();
        assert_eq!(resp.status(), 200);
        let resp = client.post(format!("{base}/sessions/{id}/advance")).send().await.unwrap();
        assert_eq!(resp.status(), 202);
        assert_eq!(resp.headers()["location"], format!("/sessions/{id}/state").as_str());
        rounds += 1;
    }
    assert_eq!(rounds, 2);
    let served: ElicitationSession = client.get(format!("{base}/sessions/{id}/snapshot")).send().await.unwrap().json().await.unwrap();
    assert_eq!(served, in_process(&cfg));
    let log = client.get(format!("{base}/sessions/{id}/log")).send().await.unwrap().text().await.unwrap();
    assert_eq!(log.lines().filter(|l| l.contains("\"type\":\"advance\"")).count(), 2);
}
