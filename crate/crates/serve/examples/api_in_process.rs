//! The HTTP API exercised in-process: list models, open a session, fetch a
//! recommendation and post an observation.
//!
//!     cargo run -p vaem-serve --example api_in_process

use axum::body::Body;
use axum::http::{Method, Request};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use vaem::checkpoint::{AnyModel, Checkpoint};
use vaem::config::RunConfig;
use vaem::model::{VaemConfig, VaemModel};
use vaem::synthetic;
use vaem_serve::service::{router, AppState, ModelEntry, ServiceConfig};

async fn call(app: &axum::Router, method: Method, uri: &str, body: Option<Value>) -> anyhow::Result<Value> {
    let req = Request::builder()
        .method(method.clone())
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, |b| Body::from(b.to_string())))?;
    let resp = app.clone().oneshot(req).await?;
    let status = resp.status();
    let value: Value = serde_json::from_slice(&resp.into_body().collect().await?.to_bytes())?;
    println!("{method} {uri} -> {status}\n{}\n", serde_json::to_string_pretty(&value)?);
    Ok(value)
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    let mut config = VaemConfig::compact();
    config.marginal.epochs = 200;
    config.dependency.epochs = 200;
    let model = VaemModel::train_two_stage(&synthetic::deterministic(600, 1)?, &config, 1)?;
    let ck = Checkpoint::new(AnyModel::Vaem(model), RunConfig::default(), 1)?;
    let app = router(AppState::new(vec![ModelEntry::from_checkpoint("toy", ck)], ServiceConfig::default())?);

    call(&app, Method::GET, "/models", None).await?;
    let session = call(&app, Method::POST, "/models/toy/sessions", Some(json!({ "seed": 1 }))).await?;
    let sid = session["id"].as_str().unwrap_or_default().to_string();
    let rec = call(&app, Method::GET, &format!("/sessions/{sid}/recommendation"), None).await?;
    let feature = rec["ranking"][0]["feature"].clone();
    let body = json!({ "feature": feature, "value": 0.4 });
    call(&app, Method::POST, &format!("/sessions/{sid}/observe"), Some(body)).await?;
    call(&app, Method::GET, &format!("/sessions/{sid}/curve"), None).await?;
    Ok(())
}
