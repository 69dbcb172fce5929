use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use petseg::{
    build_network, fingerprint_cases, generate_phantom, HybridPolicy, ImageGrid, InferenceConfig,
    ModelRegistry, NetworkConfig, PhantomSpec, Pipeline, SessionStore, Tracer, TtaMode,
};
use petseg_cli::api::router;
use tower::ServiceExt;

fn app(snapshots: Option<std::path::PathBuf>) -> Router {
    let spec = PhantomSpec {
        grid: ImageGrid::with_shape_spacing([16; 3], [8.0; 3]).unwrap(),
        n_lesions: 2,
        lesion_radius_mm: (10.0, 12.0),
        seed: 11,
        ..Default::default()
    };
    let case = generate_phantom(&spec).unwrap().into_case_data("ph0");
    let fingerprint = fingerprint_cases(std::slice::from_ref(&case)).unwrap();
    let net = build_network(&NetworkConfig {
        n_stages: 2,
        features_per_stage: vec![4, 8],
        blocks_per_stage: vec![1, 1],
        patch_size: [16; 3],
        ..Default::default()
    })
    .unwrap();
    let mut registry = ModelRegistry::new();
    registry.register_net("m", net, vec![Tracer::Fdg, Tracer::Psma]).unwrap();
    let pipeline = Pipeline {
        registry,
        policy: HybridPolicy::default(),
        classifier: None,
        fingerprint,
        config: InferenceConfig {
            tta: TtaMode::Fixed { axes: vec![] },
            model_override: Some("m".into()),
            ..Default::default()
        },
    };
    router(Arc::new(SessionStore::new(vec![case], pipeline, snapshots).unwrap()))
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<&str>) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    if body.is_some() {
        req = req.header("content-type", "application/json");
    }
    let req = req.body(body.map(|b| Body::from(b.to_string())).unwrap_or_else(Body::empty)).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, to_bytes(resp.into_body(), usize::MAX).await.unwrap().to_vec())
}

fn json(bytes: &[u8]) -> serde_json::Value {
    serde_json::from_slice(bytes).unwrap()
}

async fn new_session(app: &Router) -> String {
    let (s, b) = call(app, Method::POST, "/sessions", Some(r#"{"case_id":"ph0"}"#)).await;
    assert_eq!(s, StatusCode::CREATED);
    json(&b)["id"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn lists_cases() {
    let app = app(None);
    let (s, b) = call(&app, Method::GET, "/cases", None).await;
    assert_eq!(s, StatusCode::OK);
    let v = json(&b);
    assert_eq!(v[0]["id"], "ph0");
    assert_eq!(v[0]["shape"], serde_json::json!([16, 16, 16]));
    assert_eq!(v[0]["tracer"], "FDG");
}

#[tokio::test]
async fn click_json_round_trips_through_state() {
    let app = app(None);
    let id = new_session(&app).await;
    let (s, posted) = call(&app, Method::POST, &format!("/sessions/{id}/clicks"), Some(r#"{"pos":[3,4,5],"kind":"FG"}"#)).await;
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(posted, br#"{"pos":[3,4,5],"kind":"FG","ordinal":0}"#);
    let (s, state) = call(&app, Method::GET, &format!("/sessions/{id}/state"), None).await;
    assert_eq!(s, StatusCode::OK);
    let state = String::from_utf8(state).unwrap();
    let expected = format!(r#""clicks":[{}]"#, String::from_utf8(posted).unwrap());
    assert!(state.contains(&expected), "{state}");
}

#[tokio::test]
async fn click_limit_and_bounds_map_to_status_codes() {
    let app = app(None);
    let id = new_session(&app).await;
    let uri = format!("/sessions/{id}/clicks");
    for i in 0..10 {
        let body = format!(r#"{{"pos":[{i},1,1],"kind":"BG"}}"#);
        assert_eq!(call(&app, Method::POST, &uri, Some(&body)).await.0, StatusCode::CREATED);
    }
    let (s, b) = call(&app, Method::POST, &uri, Some(r#"{"pos":[12,1,1],"kind":"BG"}"#)).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert!(json(&b)["error"].as_str().unwrap().contains("click limit"));
    let (s, _) = call(&app, Method::POST, &uri, Some(r#"{"pos":[1,1,16],"kind":"FG"}"#)).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(call(&app, Method::POST, &uri, Some(r#"{"pos":[1,1,1],"kind":"FG"}"#)).await.0, StatusCode::CREATED);
}

#[tokio::test]
async fn unknown_ids_are_404() {
    let app = app(None);
    assert_eq!(call(&app, Method::GET, "/sessions/s999/state", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&app, Method::POST, "/sessions/s999/predict", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&app, Method::DELETE, "/sessions/s999/clicks/last", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(
        call(&app, Method::POST, "/sessions", Some(r#"{"case_id":"nope"}"#)).await.0,
        StatusCode::NOT_FOUND
    );
    assert_eq!(call(&app, Method::GET, "/cases/nope/slice", None).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn predict_with_zero_clicks_then_undo() {
    let app = app(None);
    let id = new_session(&app).await;
    let (s, b) = call(&app, Method::POST, &format!("/sessions/{id}/predict"), None).await;
    assert_eq!(s, StatusCode::OK);
    let v = json(&b);
    assert_eq!(v["mask_version"], 1);
    assert_eq!(v["k"], 0);
    assert!(v["metrics"]["dice"].as_f64().unwrap() >= 0.0);
    assert_eq!(v["provenance"]["model_id"], "m");

    call(&app, Method::POST, &format!("/sessions/{id}/clicks"), Some(r#"{"pos":[8,8,8],"kind":"FG"}"#)).await;
    let (s, b) = call(&app, Method::DELETE, &format!("/sessions/{id}/clicks/last"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(json(&b)["clicks"], serde_json::json!([]));
    assert_eq!(json(&b)["mask_version"], 1);
}

#[tokio::test]
async fn slices_are_png_with_overlays() {
    let app = app(None);
    let (s, b) = call(&app, Method::GET, "/cases/ph0/slice?plane=coronal&index=5&channel=pet", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(&b[1..4], b"PNG");

    let id = new_session(&app).await;
    call(&app, Method::POST, &format!("/sessions/{id}/clicks"), Some(r#"{"pos":[8,8,8],"kind":"FG"}"#)).await;
    let plain = call(&app, Method::GET, "/cases/ph0/slice?plane=axial&index=8&channel=ct", None).await.1;
    let uri = format!("/cases/ph0/slice?plane=axial&index=8&channel=ct&overlay=fg&session={id}");
    let (s, over) = call(&app, Method::GET, &uri, None).await;
    assert_eq!(s, StatusCode::OK);
    assert_ne!(plain, over);
    let (s, _) = call(&app, Method::GET, "/cases/ph0/slice?overlay=mask", None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = call(&app, Method::GET, "/cases/ph0/slice?plane=axial&index=99", None).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _) = call(&app, Method::GET, "/cases/ph0/slice?overlay=gt&plane=sagittal", None).await;
    assert_eq!(s, StatusCode::OK);
}

#[tokio::test]
async fn mutations_write_snapshots() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(Some(dir.path().to_path_buf()));
    let id = new_session(&app).await;
    call(&app, Method::POST, &format!("/sessions/{id}/clicks"), Some(r#"{"pos":[2,2,2],"kind":"BG"}"#)).await;
    let snap: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join(format!("{id}.json"))).unwrap()).unwrap();
    let (_, state) = call(&app, Method::GET, &format!("/sessions/{id}/state"), None).await;
    assert_eq!(snap, json(&state));
}
