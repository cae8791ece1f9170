use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use ranlen::backbones::{Model, ModelConfig};
use ranlen::checkpoint::Checkpoint;
use ranlen::masks::{self, BandMode, BinaryMap, CircleSpec};
use ranlen_service::{router, AppState, DeriveResponse, EnhanceResponse, Registry, ServeOptions};
use serde_json::{json, Value};
use tower::ServiceExt;

fn small_config() -> ModelConfig {
    ModelConfig {
        width: 6,
        depth: 3,
        ranlen_sites: vec![1],
        mask_embed_width: 4,
        curve_iterations: 2,
        ..ModelConfig::default()
    }
}

fn write_checkpoint(dir: &std::path::Path, name: &str, seed: u64) {
    let cfg = small_config();
    let (_, params) = Model::new::<f32>(cfg.clone(), seed).unwrap();
    let ck = Checkpoint {
        model: cfg,
        train: None,
        epoch: 3,
        step: 12,
        rng: None,
        params,
    };
    ck.save(dir.join(format!("{name}.ckpt"))).unwrap();
}

fn app_with_model() -> (Router, tempfile::TempDir) {
    let dir = tempfile::tempdir().unwrap();
    write_checkpoint(dir.path(), "tiny", 1);
    let reg = Registry::load(&[dir.path().to_path_buf()]).unwrap();
    (router(AppState::ready(reg, 2), &ServeOptions::default()), dir)
}

fn test_image(h: u32, w: u32) -> image::RgbImage {
    image::RgbImage::from_fn(w, h, |x, y| image::Rgb([(x * 9) as u8, (y * 7) as u8, 40]))
}

fn png_b64(img: &image::RgbImage) -> String {
    STANDARD.encode(ranlen::data::encode_png(img).unwrap())
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let bytes = axum::body::to_bytes(res.into_body(), usize::MAX).await.unwrap();
    let value = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    (status, value)
}

fn circle_request(img: &image::RgbImage) -> Value {
    json!({
        "image": png_b64(img),
        "circle": { "center_x": 10.0, "center_y": 8.0, "r1": 4.0, "r2": 6.0 },
    })
}

#[tokio::test]
async fn healthz_reports_loading_then_ready() {
    let state = AppState::loading(1);
    let app = router(state.clone(), &ServeOptions::default());
    assert_eq!(call(&app, "GET", "/healthz", None).await.0, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(call(&app, "GET", "/v1/models", None).await.0, StatusCode::SERVICE_UNAVAILABLE);
    state.finish_loading(Registry::default());
    assert_eq!(call(&app, "GET", "/healthz", None).await.0, StatusCode::OK);
}

#[tokio::test]
async fn spawn_load_publishes_models() {
    let dir = tempfile::tempdir().unwrap();
    write_checkpoint(dir.path(), "m", 2);
    let state = AppState::loading(1);
    ranlen_service::spawn_load(state.clone(), vec![dir.path().to_path_buf()])
        .await
        .unwrap()
        .unwrap();
    assert!(state.is_ready());
}

#[tokio::test]
async fn models_listing_skips_corrupt_files() {
    let dir = tempfile::tempdir().unwrap();
    let empty = router(
        AppState::ready(Registry::load(&[dir.path().to_path_buf()]).unwrap(), 1),
        &ServeOptions::default(),
    );
    assert_eq!(call(&empty, "GET", "/v1/models", None).await.1, json!([]));

    write_checkpoint(dir.path(), "good", 4);
    std::fs::write(dir.path().join("broken.ckpt"), b"RANLENCK not really").unwrap();
    std::fs::write(dir.path().join("notes.txt"), b"ignored").unwrap();
    let app = router(
        AppState::ready(Registry::load(&[dir.path().to_path_buf()]).unwrap(), 1),
        &ServeOptions::default(),
    );
    let (status, body) = call(&app, "GET", "/v1/models", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(
        body,
        json!([{ "model_id": "good", "backbone": "curve", "conditioning": "ranlen", "trained_epochs": 3 }])
    );
}

#[tokio::test]
async fn enhance_is_idempotent_and_keeps_size() {
    let (app, _dir) = app_with_model();
    let img = test_image(16, 20);
    let (s1, b1) = call(&app, "POST", "/v1/enhance", Some(circle_request(&img))).await;
    let (s2, b2) = call(&app, "POST", "/v1/enhance", Some(circle_request(&img))).await;
    assert_eq!((s1, s2), (StatusCode::OK, StatusCode::OK));
    let r1: EnhanceResponse = serde_json::from_value(b1).unwrap();
    let r2: EnhanceResponse = serde_json::from_value(b2).unwrap();
    assert_eq!(r1.image, r2.image);
    assert_eq!((r1.r_a, r1.r_b), (r2.r_a, r2.r_b));
    let out = ranlen::data::decode_image(&STANDARD.decode(&r1.image).unwrap()).unwrap();
    assert_eq!(out.dimensions(), img.dimensions());

    let mask = CircleSpec::new(10.0, 8.0, 4.0, 6.0).unwrap().rasterize(16, 20);
    let p = mask.partition();
    assert_eq!((r1.r_a, r1.r_b), (p.r_a, p.r_b));

    // The same mask sent as a PNG gives the same pixels.
    let via_png = json!({
        "image": png_b64(&img),
        "mask": STANDARD.encode(masks::encode_mask_png(&mask).unwrap()),
        "degree": 1.0,
        "model_id": "tiny",
    });
    let (s3, b3) = call(&app, "POST", "/v1/enhance", Some(via_png)).await;
    assert_eq!(s3, StatusCode::OK);
    assert_eq!(b3["image"], r1.image.as_str());
}

#[tokio::test]
async fn concurrent_identical_requests_agree() {
    let (app, _dir) = app_with_model();
    let img = test_image(16, 20);
    let mut handles = Vec::new();
    for _ in 0..4 {
        let app = app.clone();
        let body = circle_request(&img);
        handles.push(tokio::spawn(async move { call(&app, "POST", "/v1/enhance", Some(body)).await }));
    }
    let mut images = Vec::new();
    for h in handles {
        let (s, b) = h.await.unwrap();
        assert_eq!(s, StatusCode::OK);
        images.push(b["image"].as_str().unwrap().to_string());
    }
    assert!(images.windows(2).all(|w| w[0] == w[1]));
}

#[tokio::test]
async fn enhance_validation_errors() {
    let (app, _dir) = app_with_model();
    let img = test_image(16, 20);
    let mut cases: Vec<(Value, StatusCode)> = Vec::new();

    let mut degree0 = circle_request(&img);
    degree0["degree"] = json!(0.0);
    cases.push((degree0, StatusCode::UNPROCESSABLE_ENTITY));
    let mut negative = circle_request(&img);
    negative["degree"] = json!(-1.5);
    cases.push((negative, StatusCode::UNPROCESSABLE_ENTITY));

    let mut unknown = circle_request(&img);
    unknown["model_id"] = json!("nope");
    cases.push((unknown, StatusCode::NOT_FOUND));

    cases.push((json!({ "image": png_b64(&img) }), StatusCode::BAD_REQUEST));
    let mut both = circle_request(&img);
    both["mask"] = json!(STANDARD.encode(masks::encode_mask_png(&masks::RegionMask::empty(16, 20)).unwrap()));
    cases.push((both, StatusCode::BAD_REQUEST));

    let small_mask = STANDARD.encode(masks::encode_mask_png(&masks::RegionMask::empty(8, 8)).unwrap());
    cases.push((json!({ "image": png_b64(&img), "mask": small_mask }), StatusCode::BAD_REQUEST));

    let mut outside = circle_request(&img);
    outside["circle"]["center_x"] = json!(40.0);
    cases.push((outside, StatusCode::BAD_REQUEST));
    let mut bad_radii = circle_request(&img);
    bad_radii["circle"]["r2"] = json!(2.0);
    cases.push((bad_radii, StatusCode::BAD_REQUEST));

    let mut garbage = circle_request(&img);
    garbage["image"] = json!("!!not base64!!");
    cases.push((garbage, StatusCode::BAD_REQUEST));
    let mut not_image = circle_request(&img);
    not_image["image"] = json!(STANDARD.encode(b"plain text"));
    cases.push((not_image, StatusCode::BAD_REQUEST));

    // Channel 0 set where channel 1 is not.
    let bad_rg = image::RgbImage::from_pixel(20, 16, image::Rgb([255, 0, 0]));
    cases.push((
        json!({ "image": png_b64(&img), "mask": png_b64(&bad_rg) }),
        StatusCode::BAD_REQUEST,
    ));
    cases.push((json!({ "image": 3 }), StatusCode::BAD_REQUEST));
    cases.push((json!({ "image": png_b64(&img), "circle": null, "extra": 1 }), StatusCode::BAD_REQUEST));

    for (i, (body, want)) in cases.into_iter().enumerate() {
        let (status, reply) = call(&app, "POST", "/v1/enhance", Some(body)).await;
        assert_eq!(status, want, "case {i}: {reply}");
        assert!(reply["error"].is_string(), "case {i}: {reply}");
    }

    let req = Request::post("/v1/enhance")
        .header("content-type", "application/json")
        .body(Body::from("{not json"))
        .unwrap();
    assert_eq!(app.clone().oneshot(req).await.unwrap().status(), StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn unknown_model_when_registry_is_empty() {
    let app = router(AppState::ready(Registry::default(), 1), &ServeOptions::default());
    let (status, _) = call(&app, "POST", "/v1/enhance", Some(circle_request(&test_image(16, 20)))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn oversized_body_is_rejected() {
    let (app, _dir) = app_with_model();
    let big = "A".repeat(ranlen_service::MAX_BODY_BYTES + 1);
    let req = Request::post("/v1/enhance")
        .header("content-type", "application/json")
        .body(Body::from(format!("{{\"image\":\"{big}\"}}")))
        .unwrap();
    assert_eq!(app.oneshot(req).await.unwrap().status(), StatusCode::PAYLOAD_TOO_LARGE);
}

#[tokio::test]
async fn cors_preflight_is_answered() {
    let (app, _dir) = app_with_model();
    let req = Request::builder()
        .method("OPTIONS")
        .uri("/v1/enhance")
        .header("origin", "http://localhost:5173")
        .header("access-control-request-method", "POST")
        .body(Body::empty())
        .unwrap();
    let res = app.oneshot(req).await.unwrap();
    assert_eq!(res.headers()["access-control-allow-origin"], "*");
}

fn disk(h: usize, w: usize, cy: f64, cx: f64, r: f64) -> BinaryMap {
    BinaryMap::from_fn(h, w, |y, x| {
        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
        dy * dy + dx * dx <= r * r
    })
}

fn map_png_b64(map: &BinaryMap) -> String {
    let img = image::GrayImage::from_fn(map.width() as u32, map.height() as u32, |x, y| {
        image::Luma([if map.get(y as usize, x as usize) { 255 } else { 0 }])
    });
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png).unwrap();
    STANDARD.encode(buf.into_inner())
}

#[tokio::test]
async fn derive_matches_masks_module() {
    let (app, _dir) = app_with_model();
    let a = disk(24, 24, 12.0, 11.0, 5.0);
    for (mode, name) in [(BandMode::DilateOut, "dilate-out"), (BandMode::ErodeIn, "erode-in")] {
        let body = json!({ "mask_a": map_png_b64(&a), "mode": name, "radius_px": 3 });
        let (status, reply) = call(&app, "POST", "/v1/mask/derive", Some(body)).await;
        assert_eq!(status, StatusCode::OK, "{reply}");
        let reply: DeriveResponse = serde_json::from_value(reply).unwrap();
        let got = masks::decode_mask_png(&STANDARD.decode(&reply.mask).unwrap()).unwrap();
        let want = masks::derive_band(&a, mode, 3).unwrap().mask;
        assert_eq!(got, want);
        assert_eq!(reply.r_a, want.partition().r_a);
        if mode == BandMode::DilateOut {
            assert!(want.partition().area_b.count() > 0);
        }
    }
}

#[tokio::test]
async fn derive_errors() {
    let (app, _dir) = app_with_model();
    let a = disk(24, 24, 12.0, 12.0, 5.0);
    let zero = json!({ "mask_a": map_png_b64(&a), "mode": "dilate-out", "radius_px": 0 });
    assert_eq!(call(&app, "POST", "/v1/mask/derive", Some(zero)).await.0, StatusCode::BAD_REQUEST);
    let negative = json!({ "mask_a": map_png_b64(&a), "mode": "dilate-out", "radius_px": -2 });
    assert_eq!(call(&app, "POST", "/v1/mask/derive", Some(negative)).await.0, StatusCode::BAD_REQUEST);
    let bad_mode = json!({ "mask_a": map_png_b64(&a), "mode": "sideways", "radius_px": 2 });
    assert_eq!(call(&app, "POST", "/v1/mask/derive", Some(bad_mode)).await.0, StatusCode::BAD_REQUEST);

    let eaten = json!({ "mask_a": map_png_b64(&a), "mode": "erode-in", "radius_px": 9 });
    let (status, reply) = call(&app, "POST", "/v1/mask/derive", Some(eaten)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(reply["error"].as_str().unwrap().contains("area-A"));

    let blank = json!({ "mask_a": map_png_b64(&BinaryMap::empty(24, 24)), "mode": "dilate-out", "radius_px": 2 });
    assert_eq!(
        call(&app, "POST", "/v1/mask/derive", Some(blank)).await.0,
        StatusCode::UNPROCESSABLE_ENTITY
    );
}

#[tokio::test]
async fn derived_mask_feeds_enhance() {
    let (app, _dir) = app_with_model();
    let a = disk(16, 20, 8.0, 10.0, 3.0);
    let body = json!({ "mask_a": map_png_b64(&a), "mode": "dilate-out", "radius_px": 2 });
    let (_, reply) = call(&app, "POST", "/v1/mask/derive", Some(body)).await;
    let req = json!({ "image": png_b64(&test_image(16, 20)), "mask": reply["mask"] });
    let (status, _) = call(&app, "POST", "/v1/enhance", Some(req)).await;
    assert_eq!(status, StatusCode::OK);
}

#[tokio::test]
async fn data_url_prefix_is_accepted() {
    let (app, _dir) = app_with_model();
    let mut body = circle_request(&test_image(16, 20));
    body["image"] = json!(format!("data:image/png;base64,{}", body["image"].as_str().unwrap()));
    assert_eq!(call(&app, "POST", "/v1/enhance", Some(body)).await.0, StatusCode::OK);
}
