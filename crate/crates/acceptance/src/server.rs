//! A real service on an ephemeral port with a blocking HTTP client.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use reqwest::blocking::Client;
use serde_json::Value;

use s2s_core::nn::{build_generator, GeneratorConfig};
use s2s_core::train::checkpoint::save_generator;
use s2s_service::{serve_on, ServiceConfig, DEFAULT_UPLOAD_LIMIT};

pub const CUBE_OBJ: &str = "v 0 0 0\nv 1 0 0\nv 0 1 0\nv 1 1 0\nv 0 0 1\nv 1 0 1\nv 0 1 1\nv 1 1 1\n\
f 1 3 4 2\nf 5 6 8 7\nf 1 2 6 5\nf 3 7 8 4\nf 1 5 7 3\nf 2 4 8 6\n";

pub struct LiveServer {
    pub base: String,
    pub dir: tempfile::TempDir,
    client: Client,
}

pub struct Reply {
    pub status: u16,
    pub body: Vec<u8>,
}

impl Reply {
    pub fn json(&self) -> Value {
        serde_json::from_slice(&self.body).unwrap_or(Value::Null)
    }

    /// `error.code` of an error body, 0 when absent.
    pub fn error_code(&self) -> u64 {
        self.json()["error"]["code"].as_u64().unwrap_or(0)
    }
}

/// Randomly initialized generator saved as `name.s2s1`.
pub fn write_checkpoint(dir: &Path, name: &str, config: GeneratorConfig, seed: u64) -> Result<PathBuf, String> {
    std::fs::create_dir_all(dir).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = build_generator(config, &mut rng).map_err(|e| e.to_string())?;
    let path = dir.join(format!("{name}.s2s1"));
    save_generator(&g, &path).map_err(|e| e.to_string())?;
    Ok(path)
}

/// The small checkpoint used for quick jobs at 16².
pub fn tiny_generator() -> GeneratorConfig {
    GeneratorConfig {
        base_width: 4,
        max_width: 8,
        ..GeneratorConfig::new(16)
    }
}

impl LiveServer {
    /// Start a server with a tiny default checkpoint in a fresh directory.
    pub fn start() -> Result<Self, String> {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        write_checkpoint(&dir.path().join("ckpt"), "g", tiny_generator(), 3)?;
        let config = ServiceConfig {
            artifact_dir: dir.path().join("artifacts"),
            checkpoint_dir: dir.path().join("ckpt"),
            workers: 1,
            upload_limit: DEFAULT_UPLOAD_LIMIT,
        };
        let listener = std::net::TcpListener::bind("127.0.0.1:0").map_err(|e| e.to_string())?;
        let addr = listener.local_addr().map_err(|e| e.to_string())?;
        listener.set_nonblocking(true).map_err(|e| e.to_string())?;
        // detached: the process ends with the test binary
        std::thread::spawn(move || {
            let rt = tokio::runtime::Runtime::new().expect("runtime");
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(listener).expect("listener");
                if let Err(e) = serve_on(config, listener).await {
                    eprintln!("server stopped: {e}");
                }
            });
        });
        let client = Client::builder()
            .timeout(Duration::from_secs(60))
            .build()
            .map_err(|e| e.to_string())?;
        Ok(LiveServer {
            base: format!("http://{addr}"),
            dir,
            client,
        })
    }

    pub fn call(&self, method: &str, path: &str, body: impl Into<Vec<u8>>) -> Result<Reply, String> {
        let url = format!("{}{path}", self.base);
        let req = match method {
            "GET" => self.client.get(&url),
            "POST" => self.client.post(&url).body(body.into()),
            other => return Err(format!("unsupported method {other}")),
        };
        let resp = req.send().map_err(|e| format!("{method} {path}: {e}"))?;
        let status = resp.status().as_u16();
        let body = resp.bytes().map_err(|e| format!("{method} {path}: {e}"))?.to_vec();
        Ok(Reply { status, body })
    }

    /// Call and require `status`.
    pub fn expect(&self, method: &str, path: &str, body: impl Into<Vec<u8>>, status: u16) -> Result<Reply, String> {
        let r = self.call(method, path, body)?;
        if r.status != status {
            return Err(format!(
                "{method} {path}: expected {status}, got {} {}",
                r.status,
                String::from_utf8_lossy(&r.body)
            ));
        }
        Ok(r)
    }

    pub fn upload_cube(&self) -> Result<String, String> {
        let r = self.expect("POST", "/api/models?format=obj", CUBE_OBJ, 201)?;
        id_field(&r, "model_id")
    }

    pub fn submit(&self, model: &str, body: &str) -> Result<String, String> {
        let r = self.expect("POST", &format!("/api/models/{model}/jobs"), body, 202)?;
        id_field(&r, "job_id")
    }

    /// Poll until the job is done or failed; progress must not go back.
    pub fn wait(&self, job: &str) -> Result<Value, String> {
        let start = Instant::now();
        let mut last = 0.0;
        loop {
            let v = self.expect("GET", &format!("/api/jobs/{job}"), Vec::new(), 200)?.json();
            let p = v["progress"].as_f64().ok_or("status without progress")?;
            if p < last {
                return Err(format!("progress went from {last} to {p}"));
            }
            last = p;
            if v["state"] == "done" || v["state"] == "error" {
                return Ok(v);
            }
            if start.elapsed() > Duration::from_secs(60) {
                return Err(format!("job {job} did not finish"));
            }
            std::thread::sleep(Duration::from_millis(10));
        }
    }

    pub fn volume_bytes(&self, job: &str) -> Result<Vec<u8>, String> {
        std::fs::read(self.dir.path().join(format!("artifacts/volumes/{job}.s2svol"))).map_err(|e| e.to_string())
    }
}

fn id_field(r: &Reply, field: &str) -> Result<String, String> {
    r.json()[field].as_str().map(str::to_string).ok_or_else(|| format!("reply lacks {field}"))
}
