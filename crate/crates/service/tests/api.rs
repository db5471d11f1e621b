use std::path::Path;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use lyricmuse_core::audio::{encode_wav, n_frames, MelConfig, SpecNormalizer};
use lyricmuse_core::corpus::Vocabulary;
use lyricmuse_core::spec_vae::{SpecVae, SpecVaeConfig};
use lyricmuse_core::text_vae::{TextVae, TextVaeConfig};
use lyricmuse_service::{build_app, ModelBundle, ServiceConfig};
use serde_json::{json, Value};
use tempfile::TempDir;
use tower::ServiceExt;

const SR: u32 = 8000;

fn mel() -> MelConfig {
    MelConfig {
        sample_rate: SR,
        window_size: 256,
        hop: 128,
        n_mels: 16,
        f_min: 0.0,
        f_max: 4000.0,
        db_floor: -80.0,
    }
}

/// Untrained but complete model pair laid out like a pipeline run, 1 s clips.
fn write_models(run: &Path) {
    let mel = mel();
    let spec = SpecVae::new(
        SpecVaeConfig {
            input_shape: (mel.n_mels, n_frames(SR as usize, mel.hop)),
            channels: vec![4, 8],
            kernel: 3,
            latent_dim: 8,
            leaky_slope: 0.2,
        },
        11,
    )
    .unwrap();
    let norm = SpecNormalizer { ref_db: 0.0, db_floor: -80.0 };
    spec.save(&run.join("spec_vae/checkpoint"), &mel, &norm, 11, 0).unwrap();
    std::fs::write(
        run.join("spec_vae/run_manifest.json"),
        json!({ "stage": "spec_vae", "config": { "clip_length": 1.0 } }).to_string(),
    )
    .unwrap();

    let vocab = Vocabulary::build(&["the quiet river sleeps", "fire and thunder rise", "soft light on the water"], 1).unwrap();
    let text = TextVae::new(
        TextVaeConfig {
            vocab_size: vocab.len(),
            embed_dim: 8,
            hidden: 16,
            latent_dim: 4,
            cond_dim: 8,
            max_line_len: 12,
        },
        12,
    )
    .unwrap();
    text.save(&run.join("text_vae/checkpoint"), 12, 0).unwrap();
    vocab.save(&run.join("text_vae/vocab.json")).unwrap();
}

struct Fixture {
    _tmp: TempDir,
    run: std::path::PathBuf,
    data: std::path::PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let tmp = TempDir::new().unwrap();
        let run = tmp.path().join("run");
        let data = tmp.path().join("data");
        write_models(&run);
        Self { _tmp: tmp, run, data }
    }

    fn config(&self) -> ServiceConfig {
        ServiceConfig::new(&self.data)
    }

    fn app(&self) -> Router {
        self.app_with(self.config())
    }

    fn app_with(&self, config: ServiceConfig) -> Router {
        let models = ModelBundle::load(&self.run, None).unwrap();
        build_app(&config, Some(models)).unwrap()
    }
}

fn tone(seconds: f64, freq: f64, amp: f32) -> Vec<u8> {
    let n = (seconds * SR as f64) as usize;
    let samples: Vec<f32> = (0..n)
        .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / SR as f64).sin() as f32)
        .collect();
    encode_wav(&samples, SR).unwrap()
}

const BOUNDARY: &str = "lyricmuse-test-boundary";

fn multipart(filename: &str, content_type: &str, bytes: &[u8]) -> Request<Body> {
    let mut body = Vec::new();
    body.extend_from_slice(format!("--{BOUNDARY}\r\n").as_bytes());
    body.extend_from_slice(
        format!("Content-Disposition: form-data; name=\"file\"; filename=\"{filename}\"\r\n").as_bytes(),
    );
    body.extend_from_slice(format!("Content-Type: {content_type}\r\n\r\n").as_bytes());
    body.extend_from_slice(bytes);
    body.extend_from_slice(format!("\r\n--{BOUNDARY}--\r\n").as_bytes());
    Request::post("/api/clips")
        .header("content-type", format!("multipart/form-data; boundary={BOUNDARY}"))
        .body(Body::from(body))
        .unwrap()
}

fn post_json(uri: &str, value: Value) -> Request<Body> {
    Request::post(uri)
        .header("content-type", "application/json")
        .body(Body::from(value.to_string()))
        .unwrap()
}

fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Value) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    (status, value)
}

async fn upload(app: &Router, seconds: f64) -> Value {
    let (status, body) = send(app, multipart("take.wav", "audio/wav", &tone(seconds, 440.0, 0.5))).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    body
}

async fn generate(app: &Router, clip_id: &str, n: i64, seed: Option<u64>) -> (StatusCode, Value) {
    let mut body = json!({ "clip_id": clip_id, "n_lines": n, "temperature": 1.0 });
    if let Some(s) = seed {
        body["seed"] = json!(s);
    }
    send(app, post_json("/api/generate", body)).await
}

#[tokio::test]
async fn health_is_degraded_without_models() {
    let tmp = TempDir::new().unwrap();
    let app = build_app(&ServiceConfig::new(tmp.path()), None).unwrap();
    let (status, body) = send(&app, get("/api/health")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["status"], "degraded");
    assert!(body["models"].is_null());
}

#[tokio::test]
async fn health_reports_checkpoint_digests() {
    let fx = Fixture::new();
    let (status, body) = send(&fx.app(), get("/api/health")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["status"], "ok");
    let digest = lyricmuse_core::checkpoint::digest(&fx.run.join("spec_vae/checkpoint")).unwrap();
    assert_eq!(body["models"]["spec_vae"], digest.as_str());
    assert_eq!(body["models"]["text_vae"].as_str().unwrap().len(), digest.len());
}

#[tokio::test]
async fn upload_without_models_is_unavailable() {
    let tmp = TempDir::new().unwrap();
    let app = build_app(&ServiceConfig::new(tmp.path()), None).unwrap();
    let (status, _) = send(&app, multipart("a.wav", "audio/wav", &tone(1.0, 440.0, 0.5))).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
}

#[tokio::test]
async fn one_clip_upload_returns_one_clip() {
    let fx = Fixture::new();
    let body = upload(&fx.app(), 1.0).await;
    assert_eq!(body["clips"].as_array().unwrap().len(), 1);
    assert_eq!(body["duration"], 1.0);
    let expected = 20.0 * 0.5f64.log10();
    assert!((body["peak_db"].as_f64().unwrap() - expected).abs() < 0.01, "{body}");
    let id = body["clip_id"].as_str().unwrap();
    for blob in [format!("audio/{id}.wav"), format!("spectrograms/{id}.mspc"), format!("embeddings/{id}.json")] {
        assert!(fx.data.join(blob).is_file());
    }
}

#[tokio::test]
async fn long_upload_drops_trailing_partial_clip() {
    let fx = Fixture::new();
    let body = upload(&fx.app(), 2.5).await;
    let clips = body["clips"].as_array().unwrap();
    assert_eq!(clips.len(), 2);
    assert_eq!(body["clip_id"], clips[0]["clip_id"]);
    assert_ne!(clips[0]["clip_id"], clips[1]["clip_id"]);
}

#[tokio::test]
async fn too_short_or_undecodable_uploads_are_rejected() {
    let fx = Fixture::new();
    let app = fx.app();
    let (status, body) = send(&app, multipart("notes.txt", "text/plain", b"just some text")).await;
    assert_eq!(status, StatusCode::BAD_REQUEST, "{body}");
    let (status, _) = send(&app, multipart("short.wav", "audio/wav", &tone(0.5, 440.0, 0.5))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = send(&app, get("/api/clips")).await;
    assert_eq!(status, StatusCode::OK);
}

#[tokio::test]
async fn oversized_upload_is_413() {
    let fx = Fixture::new();
    let mut config = fx.config();
    config.max_upload_bytes = 4096;
    let app = fx.app_with(config);
    let (status, _) = send(&app, multipart("big.wav", "audio/wav", &tone(1.0, 440.0, 0.5))).await;
    assert_eq!(status, StatusCode::PAYLOAD_TOO_LARGE);
}

#[tokio::test]
async fn generate_returns_exactly_n_lines_and_is_seed_deterministic() {
    let fx = Fixture::new();
    let app = fx.app();
    let clip = upload(&app, 1.0).await["clip_id"].as_str().unwrap().to_string();

    let (status, a) = generate(&app, &clip, 100, Some(42)).await;
    assert_eq!(status, StatusCode::OK, "{a}");
    assert_eq!(a["lines"].as_array().unwrap().len(), 100);
    assert_eq!(a["seed"], 42);
    let (_, b) = generate(&app, &clip, 100, Some(42)).await;
    assert_eq!(a["lines"], b["lines"]);
    let (_, c) = generate(&app, &clip, 100, Some(43)).await;
    assert_ne!(a["lines"], c["lines"]);
}

#[tokio::test]
async fn omitted_seed_is_generated_and_echoed() {
    let fx = Fixture::new();
    let app = fx.app();
    let clip = upload(&app, 1.0).await["clip_id"].as_str().unwrap().to_string();
    let (status, a) = generate(&app, &clip, 5, None).await;
    assert_eq!(status, StatusCode::OK);
    let seed = a["seed"].as_u64().unwrap();
    let (_, b) = generate(&app, &clip, 5, Some(seed)).await;
    assert_eq!(a["lines"], b["lines"]);
}

#[tokio::test]
async fn generate_validates_parameters() {
    let fx = Fixture::new();
    let app = fx.app();
    let clip = upload(&app, 1.0).await["clip_id"].as_str().unwrap().to_string();
    for n in [0, -3, 501] {
        let (status, _) = generate(&app, &clip, n, Some(1)).await;
        assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "n_lines={n}");
    }
    let (status, _) = generate(&app, &clip, 500, Some(1)).await;
    assert_eq!(status, StatusCode::OK);
    let bad_temp = json!({ "clip_id": clip, "n_lines": 3, "temperature": -1.0 });
    let (status, _) = send(&app, post_json("/api/generate", bad_temp)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let missing = json!({ "n_lines": 3 });
    let (status, _) = send(&app, post_json("/api/generate", missing)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, _) = generate(&app, "no-such-clip", 3, Some(1)).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_generation_matches_sequential() {
    let fx = Fixture::new();
    let app = fx.app();
    let clip = upload(&app, 1.0).await["clip_id"].as_str().unwrap().to_string();
    let seeds: Vec<u64> = (100..108).collect();
    let mut sequential = Vec::new();
    for &s in &seeds {
        sequential.push(generate(&app, &clip, 20, Some(s)).await.1["lines"].clone());
    }
    let handles: Vec<_> = seeds
        .iter()
        .map(|&s| {
            let app = app.clone();
            let clip = clip.clone();
            tokio::spawn(async move { generate(&app, &clip, 20, Some(s)).await.1["lines"].clone() })
        })
        .collect();
    for (h, expected) in handles.into_iter().zip(sequential) {
        assert_eq!(h.await.unwrap(), expected);
    }
}

#[tokio::test]
async fn favorites_round_trip_and_reject_dangling_clips() {
    let fx = Fixture::new();
    let app = fx.app();
    let clip = upload(&app, 1.0).await["clip_id"].as_str().unwrap().to_string();
    let (status, fav) = send(&app, post_json("/api/favorites", json!({ "clip_id": clip, "line": "soft light" }))).await;
    assert_eq!(status, StatusCode::OK);
    let (_, list) = send(&app, get("/api/favorites")).await;
    let list = list.as_array().unwrap();
    assert_eq!(list.len(), 1);
    assert_eq!(list[0]["favorite_id"], fav["favorite_id"]);
    assert_eq!(list[0]["line"], "soft light");
    assert_eq!(list[0]["clip_id"], clip.as_str());

    let (status, _) = send(&app, post_json("/api/favorites", json!({ "clip_id": "ghost", "line": "x" }))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn identical_uploads_get_distinct_ids_and_persist_across_restart() {
    let fx = Fixture::new();
    let app = fx.app();
    let a = upload(&app, 1.0).await;
    let b = upload(&app, 1.0).await;
    assert_ne!(a["clip_id"], b["clip_id"]);
    let (_, listed) = send(&app, get("/api/clips")).await;
    assert_eq!(listed.as_array().unwrap().len(), 2);
    let (_, before) = generate(&app, a["clip_id"].as_str().unwrap(), 10, Some(9)).await;
    drop(app);

    let reopened = fx.app();
    let (_, listed) = send(&reopened, get("/api/clips")).await;
    let listed = listed.as_array().unwrap();
    assert_eq!(listed.len(), 2);
    assert_eq!(listed[0]["clip_id"], a["clip_id"]);
    let (_, after) = generate(&reopened, a["clip_id"].as_str().unwrap(), 10, Some(9)).await;
    assert_eq!(before["lines"], after["lines"]);
}

#[tokio::test]
async fn static_assets_are_served_at_root() {
    let fx = Fixture::new();
    let assets = fx.data.parent().unwrap().join("www");
    std::fs::create_dir_all(&assets).unwrap();
    std::fs::write(assets.join("index.html"), "<h1>workbench</h1>").unwrap();
    let mut config = fx.config();
    config.static_dir = Some(assets);
    let app = fx.app_with(config);
    let resp = app.clone().oneshot(get("/")).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    assert_eq!(&bytes[..], b"<h1>workbench</h1>");
    let (status, _) = send(&app, get("/api/health")).await;
    assert_eq!(status, StatusCode::OK);
}

#[test]
fn clip_length_must_match_the_spectrogram_model() {
    let fx = Fixture::new();
    let err = ModelBundle::load(&fx.run, Some(2.0)).err().expect("mismatch");
    assert!(err.to_string().contains("model expects"), "{err}");
    assert_eq!(ModelBundle::load(&fx.run, None).unwrap().clip_length, 1.0);
}
