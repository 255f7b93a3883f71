use std::sync::{Arc, OnceLock};

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use vaem::checkpoint::{AnyModel, Checkpoint};
use vaem::config::RunConfig;
use vaem::data::{ColumnSpec, Dataset, Schema};
use vaem::model::{VaemConfig, VaemModel};
use vaem::saia::{self, SaiaConfig};
use vaem_serve::service::{router, AppState, ModelEntry, ServiceConfig, SharedState};
use vaem_serve::session::reward_seed;

/// Five columns: two continuous, a categorical, an ordinal and the target.
fn five_columns() -> Dataset {
    let schema = Schema::new(
        vec![
            ColumnSpec::continuous("a", 0.0, 1.0),
            ColumnSpec::continuous("b", 0.0, 1.0),
            ColumnSpec::categorical("colour", &["blue", "green", "red"]),
            ColumnSpec::ordinal("grade", &["low", "mid", "high"]),
            ColumnSpec::continuous("y", 0.0, 10.0).target(),
        ],
        false,
    )
    .unwrap();
    let n = 120;
    let mut cells = Vec::with_capacity(n * 5);
    for i in 0..n {
        let a = ((i * 37) % 101) as f64 / 100.0;
        let b = ((i * 53) % 97) as f64 / 96.0;
        cells.extend([a, b, (i % 3) as f64, ((i / 3) % 3) as f64, 0.5 * a + 0.3 * b]);
    }
    Dataset::new(schema, n, cells.clone(), vec![true; cells.len()]).unwrap()
}

fn checkpoint(model: AnyModel) -> Checkpoint {
    Checkpoint::new(model, RunConfig::default(), 0).unwrap()
}

fn five_model() -> &'static VaemModel {
    static M: OnceLock<VaemModel> = OnceLock::new();
    M.get_or_init(|| {
        let mut c = VaemConfig::compact();
        c.marginal.epochs = 30;
        c.dependency.epochs = 30;
        VaemModel::train_two_stage(&five_columns(), &c, 1).unwrap()
    })
}

fn deterministic_model() -> &'static VaemModel {
    static M: OnceLock<VaemModel> = OnceLock::new();
    M.get_or_init(|| {
        let data = vaem::synthetic::deterministic(2000, 1).unwrap();
        let mut c = VaemConfig::compact();
        c.dependency.epochs = 1000;
        VaemModel::train_two_stage(&data, &c, 2).unwrap()
    })
}

fn small_saia() -> SaiaConfig {
    SaiaConfig {
        outer_samples: 4,
        inner_samples: 4,
        mc_samples: 20,
    }
}

fn state_with(models: Vec<(&str, AnyModel)>, config: ServiceConfig) -> SharedState {
    let entries = models
        .into_iter()
        .map(|(id, m)| ModelEntry::from_checkpoint(id, checkpoint(m)))
        .collect();
    AppState::new(entries, config).unwrap()
}

fn app() -> (Router, SharedState) {
    let state = state_with(
        vec![
            ("five", AnyModel::Vaem(five_model().clone())),
            ("zero", AnyModel::Vaem(five_model().zero_init_dependency())),
        ],
        ServiceConfig {
            saia: small_saia(),
            ..ServiceConfig::default()
        },
    );
    (router(state.clone()), state)
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(match body {
            Some(b) => Body::from(b.to_string()),
            None => Body::empty(),
        })
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap()
    };
    assert_eq!(value["schema_version"], 1, "{uri}: {value}");
    (status, value)
}

async fn create(app: &Router, model: &str, body: Value) -> (StatusCode, Value) {
    call(app, Method::POST, &format!("/models/{model}/sessions"), Some(body)).await
}

async fn observe(app: &Router, sid: &str, feature: &str, value: Value) -> (StatusCode, Value) {
    call(app, Method::POST, &format!("/sessions/{sid}/observe"), Some(json!({ "feature": feature, "value": value }))).await
}

fn candidate_names(v: &Value) -> Vec<String> {
    v["candidates"].as_array().unwrap().iter().map(|c| c["feature"].as_str().unwrap().to_string()).collect()
}

#[tokio::test]
async fn health_and_model_listing() {
    let (app, _) = app();
    let (s, v) = call(&app, Method::GET, "/health", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["status"], "ok");
    let (s, v) = call(&app, Method::GET, "/models", None).await;
    assert_eq!(s, StatusCode::OK);
    let models = v["models"].as_array().unwrap();
    assert_eq!(models.len(), 2);
    let cols = models[0]["columns"].as_array().unwrap();
    assert_eq!(cols.len(), 5);
    assert_eq!(cols[2]["labels"], json!(["blue", "green", "red"]));
    assert_eq!(cols[4]["is_target"], true);
    assert_eq!(models[0]["target"], "y");
}

#[tokio::test]
async fn session_creation_contract() {
    let (app, _) = app();
    let (s, v) = create(&app, "five", json!({})).await;
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(candidate_names(&v), ["a", "b", "colour", "grade"]);
    assert_eq!(v["status"], "active");
    assert_eq!(v["step"], 0);

    let (s, v) = call(&app, Method::POST, "/models/five/sessions", None).await;
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(candidate_names(&v).len(), 4);

    let (s, v) = create(&app, "five", json!({ "observations": { "a": 0.25 } })).await;
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(candidate_names(&v), ["b", "colour", "grade"]);
    assert_eq!(v["observed"][0]["feature"], "a");

    let (s, v) = create(&app, "nope", json!({})).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(v["error"]["code"], "not_found");

    let (s, v) = create(&app, "five", json!({ "observations": { "colour": "purple" } })).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["error"]["field"], "colour");

    let (s, v) = create(&app, "five", json!({ "observations": { "y": 3.0 } })).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["error"]["field"], "y");

    let (s, _) = create(&app, "five", json!({ "observations": { "a": 7.0 } })).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _) = create(&app, "five", json!({ "bogus": 1 })).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn ranking_matches_direct_engine_calls() {
    let (app, _) = app();
    let (_, v) = create(&app, "five", json!({ "seed": 77, "observations": { "grade": "mid" } })).await;
    let sid = v["id"].as_str().unwrap();
    let (s, rec) = call(&app, Method::GET, &format!("/sessions/{sid}/recommendation"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(rec["status"], "active");

    let model = five_model();
    let x = [0.0, 0.0, 0.0, 1.0, 0.0];
    let mask = [false, false, false, true, false];
    let direct = saia::estimate_rewards(model, &x, &mask, &[0, 1, 2], &small_saia(), reward_seed(77, 0)).unwrap();
    let mut expected: Vec<(usize, f64)> = direct.iter().map(|e| (e.candidate, e.reward)).collect();
    expected.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let got: Vec<(usize, f64)> = rec["ranking"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| (c["index"].as_u64().unwrap() as usize, c["reward"].as_f64().unwrap()))
        .collect();
    assert_eq!(got, expected);
}

#[tokio::test]
async fn zero_initialized_model_ranks_in_column_order() {
    let (app, _) = app();
    let (_, v) = create(&app, "zero", json!({})).await;
    let sid = v["id"].as_str().unwrap();
    let (_, rec) = call(&app, Method::GET, &format!("/sessions/{sid}/recommendation"), None).await;
    let ranking = rec["ranking"].as_array().unwrap();
    assert!(ranking.iter().all(|c| c["reward"].as_f64() == Some(0.0)));
    let order: Vec<u64> = ranking.iter().map(|c| c["index"].as_u64().unwrap()).collect();
    assert_eq!(order, [0, 1, 2, 3]);
}

#[tokio::test]
async fn observation_lifecycle() {
    let (app, _) = app();
    let (_, v) = create(&app, "five", json!({ "seed": 5 })).await;
    let sid = v["id"].as_str().unwrap().to_string();
    let (_, rec) = call(&app, Method::GET, &format!("/sessions/{sid}/recommendation"), None).await;
    let top = rec["ranking"][0]["feature"].as_str().unwrap().to_string();

    let value = match top.as_str() {
        "colour" => json!("green"),
        "grade" => json!("high"),
        _ => json!(0.4),
    };
    let (s, v) = observe(&app, &sid, &top, value).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["history"].as_array().unwrap().len(), 1);
    assert_eq!(v["history"][0]["recommended"], top);
    assert_eq!(v["observation"]["step"], 1);
    assert!(!candidate_names(&v).contains(&top));

    let (_, rec) = call(&app, Method::GET, &format!("/sessions/{sid}/recommendation"), None).await;
    assert_eq!(rec["step"], 1);
    assert!(rec["ranking"].as_array().unwrap().iter().all(|c| c["feature"] != top.as_str()));

    let (s, v) = observe(&app, &sid, &top, json!(0.1)).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(v["error"]["code"], "not_a_candidate");
    let (s, _) = observe(&app, &sid, "y", json!(1.0)).await;
    assert_eq!(s, StatusCode::CONFLICT);
    let (s, _) = observe(&app, &sid, "missing", json!(1.0)).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);

    let remaining = candidate_names(&call(&app, Method::GET, &format!("/sessions/{sid}"), None).await.1);
    let bad = if remaining.contains(&"colour".to_string()) { ("colour", json!("mauve")) } else { ("a", json!("x")) };
    let (s, v) = observe(&app, &sid, bad.0, bad.1).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["error"]["field"], bad.0);
    let (_, v) = call(&app, Method::GET, &format!("/sessions/{sid}"), None).await;
    assert_eq!(v["history"].as_array().unwrap().len(), 1);

    for f in remaining {
        let value = match f.as_str() {
            "colour" => json!("red"),
            "grade" => json!(0),
            _ => json!(0.5),
        };
        let (s, _) = observe(&app, &sid, &f, value).await;
        assert_eq!(s, StatusCode::OK);
    }
    let (_, rec) = call(&app, Method::GET, &format!("/sessions/{sid}/recommendation"), None).await;
    assert_eq!(rec["status"], "complete");
    assert!(rec["ranking"].as_array().unwrap().is_empty());
    assert!(rec["prediction"]["mean"].is_number());

    let (s, _) = call(&app, Method::GET, "/sessions/unknown", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&app, Method::GET, "/sessions/unknown/recommendation", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&app, Method::GET, "/sessions/unknown/curve", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = observe(&app, "unknown", "a", json!(0.1)).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn curve_has_one_step_per_observation_plus_the_start() {
    let (app, _) = app();
    let (_, v) = create(&app, "five", json!({})).await;
    let sid = v["id"].as_str().unwrap().to_string();
    let uri = format!("/sessions/{sid}/curve");
    let (s, c0) = call(&app, Method::GET, &uri, None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(c0["steps"].as_array().unwrap().len(), 1);
    assert_eq!(c0["steps"][0]["step"], 0);
    observe(&app, &sid, "b", json!(0.3)).await;
    observe(&app, &sid, "grade", json!("low")).await;
    let (_, c1) = call(&app, Method::GET, &uri, None).await;
    let (_, c2) = call(&app, Method::GET, &uri, None).await;
    assert_eq!(c1, c2);
    let steps = c1["steps"].as_array().unwrap();
    assert_eq!(steps.len(), 3);
    assert_eq!(steps[2]["feature"], "grade");
    let p = &steps[1]["prediction"];
    assert!(p["interval"][0].as_f64().unwrap() <= p["interval"][1].as_f64().unwrap());
}

#[tokio::test]
async fn identical_transcripts_and_interleaving_agree_with_serial_runs() {
    let (app, _) = app();
    let script = [("colour", json!("blue")), ("a", json!(0.9))];
    let other = [("grade", json!("mid")), ("b", json!(0.2))];

    let run_serial = |seed: u64, steps: Vec<(&'static str, Value)>| {
        let app = app.clone();
        async move {
            let (_, v) = create(&app, "five", json!({ "seed": seed })).await;
            let sid = v["id"].as_str().unwrap().to_string();
            let mut recs = Vec::new();
            for (f, val) in steps {
                recs.push(call(&app, Method::GET, &format!("/sessions/{sid}/recommendation"), None).await.1["ranking"].clone());
                observe(&app, &sid, f, val).await;
            }
            let (_, curve) = call(&app, Method::GET, &format!("/sessions/{sid}/curve"), None).await;
            (recs, curve["steps"].clone())
        }
    };
    let serial_a = run_serial(10, script.to_vec()).await;
    let serial_b = run_serial(20, other.to_vec()).await;
    assert_eq!(run_serial(10, script.to_vec()).await, serial_a);

    let (_, va) = create(&app, "five", json!({ "seed": 10 })).await;
    let (_, vb) = create(&app, "five", json!({ "seed": 20 })).await;
    let (sa, sb) = (va["id"].as_str().unwrap().to_string(), vb["id"].as_str().unwrap().to_string());
    let (mut ra, mut rb) = (Vec::new(), Vec::new());
    for i in 0..2 {
        let (ua, ub) = (format!("/sessions/{sa}/recommendation"), format!("/sessions/{sb}/recommendation"));
        let ((_, xa), (_, xb)) = tokio::join!(call(&app, Method::GET, &ua, None), call(&app, Method::GET, &ub, None));
        ra.push(xa["ranking"].clone());
        rb.push(xb["ranking"].clone());
        let (fa, va) = script[i].clone();
        let (fb, vb) = other[i].clone();
        tokio::join!(observe(&app, &sb, fb, vb), observe(&app, &sa, fa, va));
    }
    let (_, ca) = call(&app, Method::GET, &format!("/sessions/{sa}/curve"), None).await;
    let (_, cb) = call(&app, Method::GET, &format!("/sessions/{sb}/curve"), None).await;
    assert_eq!((ra, ca["steps"].clone()), serial_a);
    assert_eq!((rb, cb["steps"].clone()), serial_b);
}

#[tokio::test]
async fn observing_the_driver_collapses_predictive_spread() {
    let state = state_with(
        vec![("det", AnyModel::Vaem(deterministic_model().clone()))],
        ServiceConfig {
            saia: SaiaConfig {
                outer_samples: 10,
                inner_samples: 10,
                mc_samples: 200,
            },
            ..ServiceConfig::default()
        },
    );
    let app = router(state);
    let (_, v) = create(&app, "det", json!({ "seed": 3 })).await;
    let sid = v["id"].as_str().unwrap().to_string();
    let before = v["prediction"]["normalized_variance"].as_f64().unwrap();
    let (_, rec) = call(&app, Method::GET, &format!("/sessions/{sid}/recommendation"), None).await;
    assert_eq!(rec["ranking"][0]["feature"], "driver");
    let (_, v) = observe(&app, &sid, "driver", json!(0.3)).await;
    let after = v["prediction"]["normalized_variance"].as_f64().unwrap();
    assert!(after / before < 0.1, "variance {before} -> {after}");
    let mean = v["prediction"]["mean"].as_f64().unwrap();
    assert!((mean - 0.3).abs() < 0.1, "mean {mean}");
}

#[tokio::test]
async fn snapshots_let_a_restarted_service_resume() {
    let dir = tempfile::tempdir().unwrap();
    let config = ServiceConfig {
        saia: small_saia(),
        snapshot_dir: Some(dir.path().to_path_buf()),
        seed: 0,
    };
    let models = || vec![("five", AnyModel::Vaem(five_model().clone()))];
    let app1 = router(state_with(models(), config.clone()));
    let (_, v) = create(&app1, "five", json!({ "seed": 9 })).await;
    let sid = v["id"].as_str().unwrap().to_string();
    observe(&app1, &sid, "a", json!(0.6)).await;
    let (_, before) = call(&app1, Method::GET, &format!("/sessions/{sid}"), None).await;
    let (_, rec1) = call(&app1, Method::GET, &format!("/sessions/{sid}/recommendation"), None).await;

    let app2 = router(state_with(models(), config));
    let (s, after) = call(&app2, Method::GET, &format!("/sessions/{sid}"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(after, before);
    let (_, rec2) = call(&app2, Method::GET, &format!("/sessions/{sid}/recommendation"), None).await;
    assert_eq!(rec1, rec2);
    let (_, fresh) = create(&app2, "five", json!({})).await;
    assert_ne!(fresh["id"], sid.as_str());
}

#[tokio::test]
async fn closed_sessions_answer_gone() {
    let (app, state) = app();
    let (_, v) = create(&app, "five", json!({})).await;
    let sid = v["id"].as_str().unwrap().to_string();
    Arc::clone(&state).close_sessions();
    let (s, v) = call(&app, Method::GET, &format!("/sessions/{sid}"), None).await;
    assert_eq!(s, StatusCode::GONE);
    assert_eq!(v["error"]["code"], "gone");
    let (s, _) = call(&app, Method::GET, "/health", None).await;
    assert_eq!(s, StatusCode::OK);
}
