mod common;

use std::sync::Arc;

use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;
use tracewave::http::router;
use tracewave::{Config, Service};

const BOUNDARY: &str = "tracewave-test-boundary";

fn upload(body: &str, token: Option<&str>) -> Request<Body> {
    let form = format!(
        "--{BOUNDARY}\r\nContent-Disposition: form-data; name=\"file\"; filename=\"cap.csv\"\r\nContent-Type: text/csv\r\n\r\n{body}\r\n--{BOUNDARY}--\r\n"
    );
    let mut req = Request::builder().method(Method::POST).uri("/captures").header(
        header::CONTENT_TYPE,
        format!("multipart/form-data; boundary={BOUNDARY}"),
    );
    if let Some(t) = token {
        req = req.header(header::AUTHORIZATION, format!("Bearer {t}"));
    }
    req.body(Body::from(form)).unwrap()
}

fn get(uri: &str, method: Method, token: Option<&str>) -> Request<Body> {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(t) = token {
        req = req.header(header::AUTHORIZATION, format!("Bearer {t}"));
    }
    req.body(Body::empty()).unwrap()
}

async fn call(app: &axum::Router, req: Request<Body>) -> (StatusCode, Value) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let v = serde_json::from_slice(&bytes).unwrap_or(Value::String(String::from_utf8_lossy(&bytes).into()));
    (status, v)
}

fn app(dir: &std::path::Path, token: Option<&str>, static_dir: Option<std::path::PathBuf>) -> axum::Router {
    let cfg = Config {
        store: dir.join("store.log"),
        bearer_token: token.map(str::to_string),
        static_dir,
        ..Config::default()
    };
    router(Arc::new(Service::open(cfg, &common::KEY).unwrap()))
}

#[tokio::test(flavor = "multi_thread")]
async fn full_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), None, None);
    let cap = common::capture(&["Galaxy S4", "Galaxy A11", "iPhone SE"], 3, 17, false);

    let (status, summary) = call(&app, upload(&cap, None)).await;
    assert_eq!(status, StatusCode::CREATED, "{summary}");
    assert_eq!(summary["devices"], 3);
    let (status, again) = call(&app, upload(&cap, None)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(again, summary);

    let (status, found) = call(&app, get("/devices?q=D0:22:BE:F5:7C:B4", Method::GET, None)).await;
    assert_eq!(status, StatusCode::OK);
    let found = found.as_array().unwrap();
    assert_eq!(found.len(), 1);
    assert_eq!(found[0]["model_label"], "Galaxy S4");
    let bucket = found[0]["bucket_id"].as_u64().unwrap();

    let (status, rows) = call(&app, get(&format!("/devices/{bucket}/contacts"), Method::GET, None)).await;
    assert_eq!(status, StatusCode::OK);
    let rows = rows.as_array().unwrap().clone();
    assert_eq!(rows.len(), 2);
    let other = rows[0]["second_key"].as_str().unwrap().to_string();

    let (status, path) = call(
        &app,
        get(&format!("/devices/{other}/path?site=corridor"), Method::GET, None),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    let path = path.as_array().unwrap();
    assert!(!path.is_empty());
    assert!(path
        .iter()
        .all(|p| p["source"] == "TRUTH" && p["site_id"] == "corridor"));
    let t = path[5]["time_s"].as_f64().unwrap();
    let (_, at) = call(
        &app,
        get(
            &format!("/devices/{other}/path?site=corridor&start={t}&end={t}"),
            Method::GET,
            None,
        ),
    )
    .await;
    assert!(at.as_array().unwrap().iter().all(|p| p["time_s"].as_f64() == Some(t)));

    let (status, map) = call(&app, get("/sites/corridor/map", Method::GET, None)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(
        map["rows"].as_array().unwrap().len(),
        map["height"].as_u64().unwrap() as usize
    );
    let (status, _) = call(&app, get("/sites/atrium/map", Method::GET, None)).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (_, sites) = call(&app, get("/sites", Method::GET, None)).await;
    assert_eq!(sites, serde_json::json!(["corridor", "room"]));

    // Erase: every read of the device answers not-found.
    let (status, receipt) = call(&app, get(&format!("/devices/{bucket}"), Method::DELETE, None)).await;
    assert_eq!(status, StatusCode::OK);
    assert!(receipt["bytes_overwritten"].as_u64().unwrap() > 0);
    let (_, found) = call(&app, get("/devices?q=D0:22:BE:F5:7C:B4", Method::GET, None)).await;
    assert_eq!(found, serde_json::json!([]));
    for (uri, method) in [
        (format!("/devices/{bucket}/contacts"), Method::GET),
        (format!("/devices/{bucket}/path?site=corridor"), Method::GET),
        (format!("/devices/{bucket}"), Method::DELETE),
    ] {
        let (status, body) = call(&app, get(&uri, method, None)).await;
        assert_eq!(status, StatusCode::NOT_FOUND, "{uri}");
        assert!(body["error"].is_string());
    }
    let (_, rows) = call(&app, get(&format!("/devices/{other}/contacts"), Method::GET, None)).await;
    assert!(rows
        .as_array()
        .unwrap()
        .iter()
        .all(|r| r["second_key"] != bucket.to_string().as_str()));
}

#[tokio::test(flavor = "multi_thread")]
async fn bad_requests() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), None, None);
    let (status, body) = call(&app, upload("garbage,line\n", None)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(body["error"].as_str().unwrap().contains("rejected"));
    let (status, _) = call(&app, get("/devices/notanumber/contacts", Method::GET, None)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call(&app, get("/devices/1/path", Method::GET, None)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call(&app, get("/devices/1/path?site=corridor", Method::GET, None)).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, found) = call(&app, get("/devices?q=", Method::GET, None)).await;
    assert_eq!((status, found), (StatusCode::OK, serde_json::json!([])));
}

#[tokio::test(flavor = "multi_thread")]
async fn bearer_token_and_static_files() {
    let dir = tempfile::tempdir().unwrap();
    let www = dir.path().join("www");
    std::fs::create_dir(&www).unwrap();
    std::fs::write(www.join("index.html"), "<h1>console</h1>").unwrap();
    let app = app(dir.path(), Some("s3cret"), Some(www));

    let (status, _) = call(&app, get("/devices?q=x", Method::GET, None)).await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);
    let (status, _) = call(&app, get("/devices?q=x", Method::GET, Some("wrong"))).await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);
    let (status, _) = call(&app, get("/devices?q=x", Method::GET, Some("s3cret"))).await;
    assert_eq!(status, StatusCode::OK);
    let (status, _) = call(&app, upload("", None)).await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);

    let (status, page) = call(&app, get("/index.html", Method::GET, None)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(page, Value::String("<h1>console</h1>".into()));
}
