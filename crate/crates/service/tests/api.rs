use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::Router;
use rand::SeedableRng;
use serde_json::{json, Value};
use tower::ServiceExt;

use s2s_core::geometry::{parse_mesh, MeshFormat, VolumeGrid};
use s2s_core::nn::{build_generator, GeneratorConfig};
use s2s_core::train::checkpoint::save_generator;
use s2s_service::{router, ServiceConfig, Store};

const CUBE_OBJ: &str = "v 0 0 0\nv 1 0 0\nv 0 1 0\nv 1 1 0\nv 0 0 1\nv 1 0 1\nv 0 1 1\nv 1 1 1\n\
f 1 3 4 2\nf 5 6 8 7\nf 1 2 6 5\nf 3 7 8 4\nf 1 5 7 3\nf 2 4 8 6\n";

struct Harness {
    dir: tempfile::TempDir,
    app: Router,
}

fn write_checkpoint(dir: &Path, seed: u64) {
    std::fs::create_dir_all(dir).unwrap();
    let cfg = GeneratorConfig {
        base_width: 4,
        max_width: 8,
        ..GeneratorConfig::new(16)
    };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let g = build_generator(cfg, &mut rng).unwrap();
    save_generator(&g, dir.join("g.s2s1")).unwrap();
}

fn config(dir: &Path) -> ServiceConfig {
    ServiceConfig {
        artifact_dir: dir.join("artifacts"),
        checkpoint_dir: dir.join("ckpt"),
        workers: 1,
        upload_limit: s2s_service::DEFAULT_UPLOAD_LIMIT,
    }
}

impl Harness {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        write_checkpoint(&dir.path().join("ckpt"), 3);
        let app = router(Store::open(config(dir.path())).unwrap());
        Harness { dir, app }
    }

    fn restart(&mut self) {
        self.app = router(Store::open(config(self.dir.path())).unwrap());
    }

    async fn call(&self, method: &str, uri: &str, body: impl Into<Body>) -> (StatusCode, Vec<u8>) {
        let req = Request::builder().method(method).uri(uri).body(body.into()).unwrap();
        let resp = self.app.clone().oneshot(req).await.unwrap();
        let status = resp.status();
        (status, to_bytes(resp.into_body(), usize::MAX).await.unwrap().to_vec())
    }

    async fn json(&self, method: &str, uri: &str, body: impl Into<Body>) -> (StatusCode, Value) {
        let (s, b) = self.call(method, uri, body).await;
        (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
    }

    async fn upload_cube(&self) -> String {
        let (s, v) = self.json("POST", "/api/models?format=obj", CUBE_OBJ).await;
        assert_eq!(s, StatusCode::CREATED, "{v}");
        v["model_id"].as_str().unwrap().to_string()
    }

    async fn start_job(&self, model: &str) -> String {
        let body = json!({"axis": "z", "resolution": 16, "checkpoint": "default"}).to_string();
        let (s, v) = self.json("POST", &format!("/api/models/{model}/jobs"), body).await;
        assert_eq!(s, StatusCode::ACCEPTED, "{v}");
        v["job_id"].as_str().unwrap().to_string()
    }

    /// Poll until terminal, checking progress never goes backwards.
    async fn wait(&self, job: &str) -> Value {
        let start = Instant::now();
        let mut last = 0.0;
        loop {
            let (s, v) = self.json("GET", &format!("/api/jobs/{job}"), Body::empty()).await;
            assert_eq!(s, StatusCode::OK);
            let p = v["progress"].as_f64().unwrap();
            assert!(p >= last, "progress went from {last} to {p}");
            last = p;
            if v["state"] == "done" || v["state"] == "error" {
                return v;
            }
            assert!(start.elapsed() < Duration::from_secs(60), "job did not finish");
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
    }
}

fn error_code(v: &Value) -> u64 {
    v["error"]["code"].as_u64().unwrap()
}

#[tokio::test]
async fn walkthrough() {
    let h = Harness::new();
    let model = h.upload_cube().await;
    let job = h.start_job(&model).await;
    let status = h.wait(&job).await;
    assert_eq!(status, json!({"state": "done", "progress": 1.0, "error": null}));

    let (s, pgm) = h.call("GET", &format!("/api/jobs/{job}/slices/3"), Body::empty()).await;
    assert_eq!(s, StatusCode::OK);
    assert!(pgm.starts_with(b"P5"));
    let (s, v) = h.json("GET", &format!("/api/jobs/{job}/slices/16"), Body::empty()).await;
    assert_eq!((s, error_code(&v)), (StatusCode::UNPROCESSABLE_ENTITY, 422));

    let (s, ext) = h.json("POST", &format!("/api/jobs/{job}/extract"), r#"{"threshold":0.5}"#).await;
    assert_eq!(s, StatusCode::OK, "{ext}");
    let mesh = ext["mesh_id"].as_str().unwrap();
    let triangles = ext["triangles"].as_u64().unwrap() as usize;
    assert!(ext["voxels_above"].as_u64().is_some());

    let (s, again) = h.json("POST", &format!("/api/jobs/{job}/extract"), r#"{"threshold":0.5}"#).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(again, ext);

    let (s, stl) = h.call("GET", &format!("/api/meshes/{mesh}?format=stl"), Body::empty()).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(stl.len(), 84 + 50 * triangles);
    let (s, obj) = h.call("GET", &format!("/api/meshes/{mesh}?format=obj"), Body::empty()).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(parse_mesh(&obj, MeshFormat::Obj).unwrap().triangles.len(), triangles);
}

#[tokio::test]
async fn upload_errors() {
    let h = Harness::new();
    let (s, v) = h.json("POST", "/api/models", &b"\x00\x01garbage"[..]).await;
    assert_eq!((s, error_code(&v)), (StatusCode::UNPROCESSABLE_ENTITY, 422));
    assert!(v["error"]["message"].as_str().unwrap().contains("no geometry"), "{v}");

    let (s, v) = h.json("POST", "/api/models?format=ply", CUBE_OBJ).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY, "{v}");

    let big = vec![b' '; 65 << 20];
    let (s, v) = h.json("POST", "/api/models", big).await;
    assert_eq!((s, error_code(&v)), (StatusCode::PAYLOAD_TOO_LARGE, 413));
}

#[tokio::test]
async fn oversize_without_length_header() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    cfg.upload_limit = 100;
    let app = router(Store::open(cfg).unwrap());
    let chunks = (0..4).map(|_| Ok::<_, std::io::Error>(vec![b' '; 40]));
    let body = Body::from_stream(futures::stream::iter(chunks));
    let req = Request::builder().method("POST").uri("/api/models").body(body).unwrap();
    let resp = app.oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::PAYLOAD_TOO_LARGE);
}

#[tokio::test]
async fn job_errors() {
    let h = Harness::new();
    let model = h.upload_cube().await;
    let unknown = "0".repeat(32);
    let body = || json!({"axis": "z", "resolution": 16, "checkpoint": "default"}).to_string();

    let (s, v) = h.json("POST", &format!("/api/models/{unknown}/jobs"), body()).await;
    assert_eq!((s, error_code(&v)), (StatusCode::NOT_FOUND, 404));
    let (s, _) = h.json("POST", "/api/models/../jobs", body()).await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    let missing = json!({"axis": "z", "resolution": 16, "checkpoint": "nope"}).to_string();
    let (s, v) = h.json("POST", &format!("/api/models/{model}/jobs"), missing).await;
    assert_eq!((s, error_code(&v)), (StatusCode::NOT_FOUND, 404));
    let sneaky = json!({"checkpoint": "../ckpt/g.s2s1", "resolution": 16}).to_string();
    let (s, _) = h.json("POST", &format!("/api/models/{model}/jobs"), sneaky).await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    let bad_axis = json!({"axis": "w", "resolution": 16}).to_string();
    let (s, _) = h.json("POST", &format!("/api/models/{model}/jobs"), bad_axis).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let wrong_res = json!({"axis": "z", "resolution": 64}).to_string();
    let (s, v) = h.json("POST", &format!("/api/models/{model}/jobs"), wrong_res).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY, "{v}");

    for uri in [
        format!("/api/jobs/{unknown}"),
        format!("/api/jobs/{unknown}/slices/0"),
        format!("/api/meshes/{unknown}"),
    ] {
        let (s, v) = h.json("GET", &uri, Body::empty()).await;
        assert_eq!((s, error_code(&v)), (StatusCode::NOT_FOUND, 404), "{uri}");
    }
    let (s, _) = h.json("POST", &format!("/api/jobs/{unknown}/extract"), r#"{"threshold":0.5}"#).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn extraction_rules() {
    let h = Harness::new();
    let model = h.upload_cube().await;
    let job = h.start_job(&model).await;
    h.wait(&job).await;
    for body in [r#"{"threshold":1.5}"#, r#"{"threshold":0}"#, r#"{"threshold":1}"#, "{}", "nope"] {
        let (s, v) = h.json("POST", &format!("/api/jobs/{job}/extract"), body).await;
        assert_eq!((s, error_code(&v)), (StatusCode::UNPROCESSABLE_ENTITY, 422), "{body}");
    }
    // more voxels pass a lower threshold
    let mut counts = vec![];
    for t in [0.2, 0.5, 0.8] {
        let (s, v) = h.json("POST", &format!("/api/jobs/{job}/extract"), json!({"threshold": t}).to_string()).await;
        assert_eq!(s, StatusCode::OK);
        counts.push(v["voxels_above"].as_u64().unwrap());
    }
    assert!(counts[0] >= counts[1] && counts[1] >= counts[2], "{counts:?}");

    let (s, ext) = h.json("POST", &format!("/api/jobs/{job}/extract"), r#"{"threshold":0.5}"#).await;
    assert_eq!(s, StatusCode::OK);
    let mesh = ext["mesh_id"].as_str().unwrap();
    let (s, v) = h.json("GET", &format!("/api/meshes/{mesh}?format=ply"), Body::empty()).await;
    assert_eq!((s, error_code(&v)), (StatusCode::UNPROCESSABLE_ENTITY, 422));
    let (s, _) = h.call("GET", &format!("/api/meshes/{mesh}"), Body::empty()).await;
    assert_eq!(s, StatusCode::OK);
}

#[tokio::test]
async fn extract_before_done_conflicts() {
    // a full-size job occupies the single worker while the small one queues
    let h = Harness::new();
    let big = GeneratorConfig::new(64);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    save_generator(&build_generator(big, &mut rng).unwrap(), h.dir.path().join("ckpt/big.s2s1")).unwrap();
    let model = h.upload_cube().await;
    let body = json!({"resolution": 64, "checkpoint": "big"}).to_string();
    let (s, v) = h.json("POST", &format!("/api/models/{model}/jobs"), body).await;
    assert_eq!(s, StatusCode::ACCEPTED);
    let first = v["job_id"].as_str().unwrap().to_string();
    let second = h.start_job(&model).await;

    let (s, v) = h.json("GET", &format!("/api/jobs/{second}"), Body::empty()).await;
    assert_eq!((s, v["state"].as_str()), (StatusCode::OK, Some("queued")));
    let (s, v) = h.json("POST", &format!("/api/jobs/{second}/extract"), r#"{"threshold":0.5}"#).await;
    assert_eq!((s, error_code(&v)), (StatusCode::CONFLICT, 409));
    let (s, _) = h.json("GET", &format!("/api/jobs/{second}/slices/0"), Body::empty()).await;
    assert_eq!(s, StatusCode::CONFLICT);
    h.wait(&first).await;
    assert_eq!(h.wait(&second).await["state"], "done");
}

#[tokio::test]
async fn identical_jobs_give_identical_volumes() {
    let h = Harness::new();
    let model = h.upload_cube().await;
    let a = h.start_job(&model).await;
    let b = h.start_job(&model).await;
    h.wait(&a).await;
    h.wait(&b).await;
    let vol = |id: &str| std::fs::read(h.dir.path().join(format!("artifacts/volumes/{id}.s2svol"))).unwrap();
    assert_eq!(vol(&a), vol(&b));
    let v = VolumeGrid::from_bytes(&vol(&a)).unwrap();
    assert_eq!(v.dims, [16, 16, 16]);
}

#[tokio::test]
async fn restart_serves_finished_artifacts() {
    let mut h = Harness::new();
    let model = h.upload_cube().await;
    let job = h.start_job(&model).await;
    h.wait(&job).await;
    let (_, ext) = h.json("POST", &format!("/api/jobs/{job}/extract"), r#"{"threshold":0.5}"#).await;
    let mesh = ext["mesh_id"].as_str().unwrap().to_string();
    let (_, stl) = h.call("GET", &format!("/api/meshes/{mesh}"), Body::empty()).await;
    let (_, slice) = h.call("GET", &format!("/api/jobs/{job}/slices/5"), Body::empty()).await;

    h.restart();
    let (s, v) = h.json("GET", &format!("/api/jobs/{job}"), Body::empty()).await;
    assert_eq!((s, v["state"].as_str()), (StatusCode::OK, Some("done")));
    assert_eq!(h.call("GET", &format!("/api/meshes/{mesh}"), Body::empty()).await.1, stl);
    assert_eq!(h.call("GET", &format!("/api/jobs/{job}/slices/5"), Body::empty()).await.1, slice);
    let (_, again) = h.json("POST", &format!("/api/jobs/{job}/extract"), r#"{"threshold":0.5}"#).await;
    assert_eq!(again, ext);
    // uploaded models survive too
    let (s, _) = h.json("POST", &format!("/api/models/{model}/jobs"), json!({"resolution": 16}).to_string()).await;
    assert_eq!(s, StatusCode::ACCEPTED);
}

#[tokio::test]
async fn failed_job_reports_error() {
    let h = Harness::new();
    let model = h.upload_cube().await;
    // the checkpoint passes the upfront check, then goes bad before the worker loads it
    let ckpt = h.dir.path().join("ckpt/flaky.s2s1");
    std::fs::copy(h.dir.path().join("ckpt/g.s2s1"), &ckpt).unwrap();
    let big = json!({"resolution": 64, "checkpoint": "big"});
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    save_generator(&build_generator(GeneratorConfig::new(64), &mut rng).unwrap(), h.dir.path().join("ckpt/big.s2s1"))
        .unwrap();
    let (_, v) = h.json("POST", &format!("/api/models/{model}/jobs"), big.to_string()).await;
    let blocker = v["job_id"].as_str().unwrap().to_string();
    let body = json!({"resolution": 16, "checkpoint": "flaky"}).to_string();
    let (s, v) = h.json("POST", &format!("/api/models/{model}/jobs"), body).await;
    assert_eq!(s, StatusCode::ACCEPTED);
    let job = v["job_id"].as_str().unwrap().to_string();
    std::fs::write(&ckpt, b"S2S1 truncated").unwrap();

    h.wait(&blocker).await;
    let status = h.wait(&job).await;
    assert_eq!(status["state"], "error");
    assert!(status["error"].as_str().unwrap().contains("format"), "{status}");
    let (s, _) = h.json("POST", &format!("/api/jobs/{job}/extract"), r#"{"threshold":0.5}"#).await;
    assert_eq!(s, StatusCode::CONFLICT);
}

#[test]
fn store_is_shared_across_routers() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(config(dir.path())).unwrap();
    let _a = router(Arc::clone(&store));
    let _b = router(store);
}
