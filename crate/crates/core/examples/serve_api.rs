//! The labeling service. Without arguments it seeds a temporary store and
//! issues a few requests in-process; with an address it serves over HTTP.
//!
//! `cargo run --example serve_api -- [127.0.0.1:8080]`

use std::net::SocketAddr;

use axum::body::Body;
use axum::http::Request;
use http_body_util::BodyExt;
use tower::ServiceExt;
use usvkit::callsim::{preset, synth_recording};
use usvkit::datastore::Store;
use usvkit::pipeline::Config;
use usvkit::server::{router, serve, AppState};

async fn show(app: &axum::Router, method: &str, uri: &str, body: &str) -> Result<(), Box<dyn std::error::Error>> {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json").body(Body::from(body.to_string()))?;
    let resp = app.clone().oneshot(req).await?;
    let status = resp.status();
    let bytes = resp.into_body().collect().await?.to_bytes();
    let text = String::from_utf8_lossy(&bytes);
    let shown: String = text.chars().take(160).collect();
    println!("{method} {uri} -> {status}\n  {shown}{}", if text.len() > 160 { " ..." } else { "" });
    Ok(())
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let mut store = Store::open(dir.path())?;
    let (clip, _) = synth_recording(&preset("low_noise", 1)?)?;
    let rec = store.add_recording(&clip.slice(0.0, 4.0)?, None)?;

    if let Some(addr) = std::env::args().nth(1) {
        let addr: SocketAddr = addr.parse()?;
        println!("recording {} loaded; try GET /recordings/{}/candidates", rec.id, rec.id);
        serve(store, Config::default(), addr)?;
        return Ok(());
    }

    let app = router(AppState::new(store, Config::default()));
    tokio::runtime::Builder::new_current_thread().enable_all().build()?.block_on(async {
        show(&app, "GET", "/health", "").await?;
        show(&app, "GET", "/recordings", "").await?;
        show(&app, "GET", &format!("/recordings/{}/candidates", rec.id), "").await?;
        let ann = format!(r#"{{"recording_id":"{}","box":{{"t_start":0.1,"t_end":0.13,"f_min":40000,"f_max":60000}},"label":"Flat","annotator":"me"}}"#, rec.id);
        show(&app, "POST", "/annotations", &ann).await?;
        show(&app, "GET", "/annotations", "").await?;
        show(&app, "GET", "/jobs", "").await
    })
}
