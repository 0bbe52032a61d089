mod common;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use common::fixture::*;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use std::time::{Duration, Instant};
use tower::ServiceExt;
use usvkit::callsim::{synth_recording, CallSpec, NoiseSpec, RecordingPlan};
use usvkit::classifier::CallLabel;
use usvkit::datastore::{NewAnnotation, Store};
use usvkit::pipeline::Config;
use usvkit::server::{router, AppState};
use usvkit::spectrogram::{SpectroImage, TileParams};

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn get_json(app: &Router, uri: &str) -> (StatusCode, Value) {
    let (s, b) = call(app, Method::GET, uri, None).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

async fn send_json(app: &Router, method: Method, uri: &str, body: Value) -> (StatusCode, Value) {
    let (s, b) = call(app, method, uri, Some(body)).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

async fn wait_for(app: &Router, job_id: &str) -> Value {
    let start = Instant::now();
    loop {
        let (s, v) = get_json(app, &format!("/jobs/{job_id}")).await;
        assert_eq!(s, StatusCode::OK);
        if v["state"] == "done" || v["state"] == "failed" {
            return v;
        }
        assert!(start.elapsed() < Duration::from_secs(300), "job {job_id} did not finish");
        std::thread::sleep(Duration::from_millis(50));
    }
}

fn small_config() -> Config {
    let mut c = Config { tile: TileParams::with_size(32), ..Config::default() };
    c.train.epochs = 2;
    c.train.batch_size = 8;
    c.morph.max_displacement_px = 1.0;
    c
}

/// Two seconds with four planted flat calls, registered as `sim`.
fn planted(store: &mut Store) -> Vec<usvkit::callsim::TruthBox> {
    let calls = (0..4).map(|i| CallSpec { onset_s: 0.2 + 0.4 * i as f64, ..CallSpec::flat(50_000.0 + 5_000.0 * i as f64, 40.0) }).collect();
    let plan = RecordingPlan { sample_rate_hz: 250_000, duration_s: 2.0, calls, noise: NoiseSpec::white(-40.0), seed: 1, source_id: "sim".into() };
    let (clip, truth) = synth_recording(&plan).unwrap();
    store.add_recording(&clip, Some("low".into())).unwrap();
    truth.boxes
}

fn app_with(setup: impl FnOnce(&mut Store)) -> (tempfile::TempDir, Router) {
    let dir = tempfile::tempdir().unwrap();
    let mut store = Store::open(dir.path()).unwrap();
    setup(&mut store);
    (dir, router(AppState::new(store, small_config())))
}

#[tokio::test]
async fn health_and_recordings() {
    let (_d, app) = app_with(|s| {
        planted(s);
    });
    let (s, v) = get_json(&app, "/health").await;
    assert_eq!((s, v["status"].as_str()), (StatusCode::OK, Some("ok")));
    let (s, v) = get_json(&app, "/recordings").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v[0]["id"], "sim");
    assert_eq!(v[0]["noise_tag"], "low");
    assert!((v[0]["duration_s"].as_f64().unwrap() - 2.0).abs() < 1e-9);
}

#[tokio::test]
async fn spectrogram_strip_is_a_png_of_the_requested_size() {
    let (_d, app) = app_with(|s| {
        planted(s);
    });
    let (s, body) = call(&app, Method::GET, "/recordings/sim/spectrogram?t0=0.1&t1=0.9&width=200&height=64", None).await;
    assert_eq!(s, StatusCode::OK);
    let img = SpectroImage::from_png(&body).unwrap();
    assert_eq!((img.width(), img.height()), (200, 64));
    let (_, again) = call(&app, Method::GET, "/recordings/sim/spectrogram?t0=0.1&t1=0.9&width=200&height=64", None).await;
    assert_eq!(again, body);

    let (s, v) = get_json(&app, "/recordings/sim/spectrogram?t0=1.5&t1=0.5").await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["code"], "bad_request");
    let (s, v) = get_json(&app, "/recordings/ghost/spectrogram").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert!(v["message"].is_string());
}

#[tokio::test]
async fn candidates_are_computed_once_and_cover_the_calls() {
    let mut truth = Vec::new();
    let (dir, app) = app_with(|s| truth = planted(s));
    let (s, v) = get_json(&app, "/recordings/sim/candidates").await;
    assert_eq!(s, StatusCode::OK);
    let found = v.as_array().unwrap();
    assert!(found.len() >= truth.len());
    for t in &truth {
        assert!(found.iter().any(|c| c["t_start"].as_f64().unwrap() < t.t_end && c["t_end"].as_f64().unwrap() > t.t_start));
    }
    assert!(dir.path().join("candidates/sim.jsonl").exists());
    let (_, again) = get_json(&app, "/recordings/sim/candidates").await;
    assert_eq!(again, v);
}

#[tokio::test]
async fn annotations_round_trip_with_audit() {
    let (_d, app) = app_with(|s| {
        planted(s);
    });
    let body = json!({
        "recording_id": "sim",
        "box": {"t_start": 0.2, "t_end": 0.24, "f_min": 49000.0, "f_max": 51000.0},
        "label": "Flat",
        "annotator": "ann",
    });
    let (s, v) = send_json(&app, Method::POST, "/annotations", body.clone()).await;
    assert_eq!(s, StatusCode::CREATED);
    let id = v["id"].as_str().unwrap().to_string();

    let (s, a) = get_json(&app, &format!("/annotations/{id}")).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!((a["label"].as_str(), a["annotator"].as_str(), a["source"]["kind"].as_str()), (Some("Flat"), Some("ann"), Some("human")));

    send_json(&app, Method::PATCH, &format!("/annotations/{id}"), json!({"label": "Trill", "annotator": "bob"})).await;
    let (s, a) = send_json(&app, Method::PATCH, &format!("/annotations/{id}"), json!({"label": "Split", "annotator": "cy"})).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(a["audit"].as_array().unwrap().len(), 2);
    assert_eq!(a["audit"][1]["from"], "Trill");

    let (_, list) = get_json(&app, "/annotations?label=Split").await;
    assert_eq!(list.as_array().unwrap().len(), 1);
    let (_, list) = get_json(&app, "/annotations?label=Flat").await;
    assert!(list.as_array().unwrap().is_empty());
    let (s, _) = get_json(&app, "/annotations?label=nonsense").await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    let (s, _) = get_json(&app, "/annotations/ann-999999").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = send_json(&app, Method::POST, "/annotations", json!({"recording_id": "sim"})).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let mut ghost = body.clone();
    ghost["recording_id"] = json!("ghost");
    let (s, _) = send_json(&app, Method::POST, "/annotations", ghost).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn review_queue_and_conflicting_verdicts() {
    let (_d, app) = app_with(|s| {
        let rec = noise_recording(s, "r", 1.0, 2);
        let ids = naturals(s, &rec, 3, 0);
        let seeds = seed_tiles(s, &ids, 16);
        let params = usvkit::synthgen::MorphParams::for_tile(16, 9);
        s.add_synthetics(usvkit::synthgen::propose(&seeds, 1, &params).unwrap()).unwrap();
    });
    let (s, v) = get_json(&app, "/synthetics?status=pending").await;
    assert_eq!(s, StatusCode::OK);
    let pending = v.as_array().unwrap().clone();
    assert_eq!(pending.len(), 3);
    let id = pending[0]["id"].as_str().unwrap().to_string();

    let (s, tile) = call(&app, Method::GET, pending[0]["tile_url"].as_str().unwrap(), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(SpectroImage::from_png(&tile).unwrap().width(), 16);
    let (s, seed) = call(&app, Method::GET, pending[0]["seed_tile_url"].as_str().unwrap(), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(SpectroImage::from_png(&seed).unwrap().width(), 32);

    let uri = format!("/synthetics/{id}/decision");
    let (s, v) = send_json(&app, Method::POST, &uri, json!({"verdict": "accept", "reviewer": "rev"})).await;
    assert_eq!((s, v["changed"].as_bool(), v["review_status"].as_str()), (StatusCode::OK, Some(true), Some("accepted")));
    let (s, v) = send_json(&app, Method::POST, &uri, json!({"verdict": "accept", "reviewer": "rev"})).await;
    assert_eq!((s, v["changed"].as_bool()), (StatusCode::OK, Some(false)));
    let (s, v) = send_json(&app, Method::POST, &uri, json!({"verdict": "reject", "reviewer": "rev"})).await;
    assert_eq!((s, v["code"].as_str()), (StatusCode::CONFLICT, Some("conflict")));

    let (_, v) = get_json(&app, &format!("/synthetics/{id}")).await;
    assert_eq!(v["review_status"], "accepted");
    let (_, v) = get_json(&app, "/synthetics?status=pending").await;
    assert_eq!(v.as_array().unwrap().len(), 2);
    let (s, _) = send_json(&app, Method::POST, "/synthetics/syn-nope/decision", json!({"verdict": "accept", "reviewer": "rev"})).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&app, Method::GET, "/synthetics/syn-nope/tile", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn manifests_then_training_and_augmentation_jobs() {
    let (dir, app) = app_with(|s| {
        let rec = noise_recording(s, "r", 1.0, 3);
        naturals(s, &rec, 33, 0);
    });
    let (s, m) = send_json(&app, Method::POST, "/manifests", json!({"val_fraction": 0.2, "seed": 1})).await;
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(m["version"], 1);
    let (_, list) = get_json(&app, "/manifests").await;
    assert_eq!((list[0]["train"].as_u64(), list[0]["val"].as_u64()), (Some(26), Some(7)));
    let (s, _) = get_json(&app, "/manifests/1").await;
    assert_eq!(s, StatusCode::OK);
    let (s, _) = get_json(&app, "/manifests/7").await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    let (s, v) = send_json(&app, Method::POST, "/train", json!({"manifest_version": 1, "checkpoint_name": "m1"})).await;
    assert_eq!(s, StatusCode::ACCEPTED);
    let job = wait_for(&app, v["job_id"].as_str().unwrap()).await;
    assert_eq!(job["state"], "done", "{job}");
    assert_eq!(job["result"], "m1");
    assert_eq!(job["history"]["epochs"].as_array().unwrap().len(), 2);
    assert!(dir.path().join("checkpoints/m1.ckpt").exists());

    let (s, v) = send_json(&app, Method::POST, "/train", json!({"manifest_version": 1, "init_checkpoint": "m1", "checkpoint_name": "m2"})).await;
    assert_eq!(s, StatusCode::ACCEPTED);
    let job = wait_for(&app, v["job_id"].as_str().unwrap()).await;
    assert_eq!(job["state"], "done", "{job}");
    assert_eq!(job["history"]["epochs"][0]["epoch"], 3);

    let (s, v) = send_json(&app, Method::POST, "/augment", json!({"manifest_version": 1, "per_seed": 1, "seed": 4})).await;
    assert_eq!(s, StatusCode::ACCEPTED);
    let job = wait_for(&app, v["job_id"].as_str().unwrap()).await;
    assert_eq!((job["state"].as_str(), job["result"].as_str()), (Some("done"), Some("26")));
    let (_, v) = get_json(&app, "/synthetics?status=pending").await;
    assert_eq!(v.as_array().unwrap().len(), 26);

    let (s, v) = send_json(&app, Method::POST, "/train", json!({"manifest_version": 1, "init_checkpoint": "missing"})).await;
    assert_eq!(s, StatusCode::ACCEPTED);
    let job = wait_for(&app, v["job_id"].as_str().unwrap()).await;
    assert_eq!(job["state"], "failed");
    assert!(job["error"].is_string());

    let (s, _) = send_json(&app, Method::POST, "/train", json!({"manifest_version": 9})).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (_, jobs) = get_json(&app, "/jobs").await;
    assert_eq!(jobs.as_array().unwrap().len(), 4);
    let (s, _) = get_json(&app, "/jobs/job-999999").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn detect_then_evaluate_stores_a_run() {
    let (_d, app) = app_with(|s| {
        for t in planted(s) {
            s.put_annotation(NewAnnotation { recording_id: "sim".into(), bbox: t.bbox(), label: CallLabel::Flat, annotator: "truth".into(), source: usvkit::datastore::AnnotationSource::Human })
                .unwrap();
        }
    });
    let (s, v) = send_json(&app, Method::POST, "/detect", json!({})).await;
    assert_eq!(s, StatusCode::ACCEPTED);
    let job = wait_for(&app, v["job_id"].as_str().unwrap()).await;
    assert_eq!(job["state"], "done", "{job}");

    let (s, v) = send_json(&app, Method::POST, "/evaluate", json!({"run_id": "run-1"})).await;
    assert_eq!(s, StatusCode::ACCEPTED);
    let job = wait_for(&app, v["job_id"].as_str().unwrap()).await;
    assert_eq!((job["state"].as_str(), job["result"].as_str()), (Some("done"), Some("run-1")));

    let (s, r) = get_json(&app, "/metrics/runs/run-1").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(r["tally"]["hits"], 4);
    assert_eq!(r["tally"]["misses"], 0);
    assert_eq!(r["per_recording"][0]["recording"], "sim");
    let (s, _) = get_json(&app, "/metrics/runs/run-2").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = send_json(&app, Method::POST, "/detect", json!({"recording_ids": ["ghost"]})).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}
