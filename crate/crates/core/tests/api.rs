use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use cpmoe::dataio::{prepare, CleaningRules, PreparedDataset, RawSchema, SplitPlan, N_FEATURES, WINDOW};
use cpmoe::eval::cluster_features;
use cpmoe::model::{Checkpoint, ModelConfig};
use cpmoe::server::router;
use cpmoe::synth::{gen_plant, PlantConfig};
use cpmoe::twin::{Twin, TwinConfig};

fn setup() -> (axum::Router, PreparedDataset) {
    let plant = gen_plant(&PlantConfig::with_regimes("api", 3), 800, 11).unwrap();
    let data = prepare(plant.series, &RawSchema::mswi(), &CleaningRules::default(), &SplitPlan::default()).unwrap();
    let ck = Checkpoint::init(
        ModelConfig::tiny(WINDOW, N_FEATURES, 8),
        5,
        data.spec.clone(),
        Default::default(),
        &PlantConfig::default_scalars(),
    )
    .unwrap();
    let clusters = cluster_features(&data.raw, &RawSchema::mswi().column_names()).unwrap();
    let twin = Twin::new(ck, RawSchema::mswi(), TwinConfig::default())
        .unwrap()
        .with_clusters(clusters);
    (router(Arc::new(twin), None), data)
}

fn window_json(data: &PreparedDataset, end: usize) -> Value {
    let rows: Vec<Vec<f64>> = data.raw_window(end).rows().into_iter().map(|r| r.to_vec()).collect();
    json!(rows)
}

async fn call(app: &axum::Router, method: &str, uri: &str, body: Option<String>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map(Body::from).unwrap_or_else(Body::empty))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

#[tokio::test]
async fn health_and_meta() {
    let (app, _) = setup();
    let (s, b) = call(&app, "GET", "/health", None).await;
    assert_eq!(s, StatusCode::OK);
    let v: Value = serde_json::from_slice(&b).unwrap();
    assert_eq!(v["status"], "ok");
    assert!(v["model"]["experts"].is_array());

    let (s, b) = call(&app, "GET", "/meta", None).await;
    assert_eq!(s, StatusCode::OK);
    let v: Value = serde_json::from_slice(&b).unwrap();
    assert_eq!(v["variables"].as_array().unwrap().len(), 31);
    assert_eq!(v["modules"].as_array().unwrap().len(), 3);
    assert!(v["bounds"]["Q2_secondary_air"].as_f64().unwrap() > 0.0);

    let (s, b) = call(&app, "GET", "/regimes", None).await;
    assert_eq!(s, StatusCode::OK);
    let v: Value = serde_json::from_slice(&b).unwrap();
    assert!(v["k"].as_u64().unwrap() >= 2);
}

#[tokio::test]
async fn zero_action_whatif_body_equals_predict_body() {
    let (app, data) = setup();
    let w = window_json(&data, 200);
    let (s, pred) = call(&app, "POST", "/predict", Some(json!({ "window": w }).to_string())).await;
    assert_eq!(s, StatusCode::OK);
    let (s, wi) = call(&app, "POST", "/whatif", Some(json!({ "window": w, "action": {} }).to_string())).await;
    assert_eq!(s, StatusCode::OK);
    let wi = String::from_utf8(wi).unwrap();
    let pred_text = String::from_utf8(pred.clone()).unwrap();
    assert!(wi.starts_with(&format!("{{\"action\":{{}},\"prediction\":{pred_text},")), "{wi}");
    let p: Value = serde_json::from_slice(&pred).unwrap();
    assert_eq!(p["pollutants"].as_object().unwrap().len(), 6);
    assert!(p["cpsi"].as_f64().is_some());
    assert_eq!(p["gate_weights"].as_object().unwrap().len(), 4);
}

#[tokio::test]
async fn navigate_returns_ranked_scenarios() {
    let (app, data) = setup();
    let body = json!({ "window": window_json(&data, 300), "modules": ["air_grate"], "top_n": 3 });
    let (s, b) = call(&app, "POST", "/navigate", Some(body.to_string())).await;
    assert_eq!(s, StatusCode::OK);
    let v: Value = serde_json::from_slice(&b).unwrap();
    let ranked = v["ranked"].as_array().unwrap();
    assert_eq!(ranked.len(), 3);
    assert!(ranked[0]["score"].as_f64().unwrap() <= v["baseline"]["score"].as_f64().unwrap());
    let (_, again) = call(&app, "POST", "/navigate", Some(body.to_string())).await;
    assert_eq!(b, again);
}

#[tokio::test]
async fn malformed_requests_get_error_codes() {
    let (app, data) = setup();
    let (s, b) = call(&app, "POST", "/predict", Some("{not json".into())).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let v: Value = serde_json::from_slice(&b).unwrap();
    assert_eq!(v["error"]["code"], "malformed_body");

    let (s, b) = call(&app, "POST", "/predict", Some(json!({ "window": [[1.0, 2.0]] }).to_string())).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let v: Value = serde_json::from_slice(&b).unwrap();
    assert_eq!(v["error"]["code"], "bad_window_shape");

    let body = json!({ "window": window_json(&data, 100), "modules": [], "top_n": 3 });
    let (s, b) = call(&app, "POST", "/navigate", Some(body.to_string())).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let v: Value = serde_json::from_slice(&b).unwrap();
    assert_eq!(v["error"]["code"], "no_modules");

    let body = json!({ "window": window_json(&data, 100), "action": { "nope": 1.0 } });
    let (s, b) = call(&app, "POST", "/whatif", Some(body.to_string())).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let v: Value = serde_json::from_slice(&b).unwrap();
    assert_eq!(v["error"]["code"], "unknown_variable");
}

#[tokio::test]
async fn out_of_bounds_whatif_is_flagged_not_rejected() {
    let (app, data) = setup();
    let body = json!({ "window": window_json(&data, 100), "action": { "Q2_secondary_air": 1e9 } });
    let (s, b) = call(&app, "POST", "/whatif", Some(body.to_string())).await;
    assert_eq!(s, StatusCode::OK);
    let v: Value = serde_json::from_slice(&b).unwrap();
    assert_eq!(v["feasible"], false);
}
