//! Job table, worker threads and the on-disk artifact directory.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex, Weak};

use serde::{Deserialize, Serialize};

use s2s_core::geometry::{export_mesh, parse_mesh, Axis, ExportFormat, MeshFormat, MeshSurface, VolumeGrid};
use s2s_core::pipeline::{extract_region, infer_volume, InferParams};
use s2s_core::train::checkpoint::load_generator;

use crate::ServiceConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Error,
}

/// What a finished job is stored as, next to its volume.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JobRecord {
    pub job_id: String,
    pub model_id: String,
    pub params: InferParams,
    pub checkpoint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeshRecord {
    pub mesh_id: String,
    pub job_id: String,
    pub threshold: f64,
    pub voxels_above: usize,
    pub triangles: usize,
}

#[derive(Debug)]
pub struct Job {
    pub record: JobRecord,
    pub checkpoint_path: PathBuf,
    pub state: JobState,
    pub progress: f64,
    pub error: Option<String>,
    pub volume: Option<Arc<VolumeGrid>>,
    /// Threshold bits → mesh id.
    pub extractions: HashMap<u64, String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct JobStatus {
    pub state: JobState,
    pub progress: f64,
    pub error: Option<String>,
}

pub fn new_id() -> String {
    format!("{:032x}", rand::random::<u128>())
}

/// Ids are exactly what [`new_id`] makes; anything else never names a file.
pub fn is_id(s: &str) -> bool {
    s.len() == 32 && s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
}

pub struct Store {
    pub config: ServiceConfig,
    jobs: Mutex<HashMap<String, Job>>,
    meshes: Mutex<HashMap<String, MeshRecord>>,
    queue: Mutex<Sender<String>>,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(tmp, path)
}

impl Store {
    /// Open the artifact directory, restore finished work and start workers.
    pub fn open(config: ServiceConfig) -> std::io::Result<Arc<Store>> {
        for sub in ["models", "volumes", "meshes"] {
            fs::create_dir_all(config.artifact_dir.join(sub))?;
        }
        let (tx, rx) = mpsc::channel();
        let store = Arc::new(Store {
            jobs: Mutex::new(HashMap::new()),
            meshes: Mutex::new(HashMap::new()),
            queue: Mutex::new(tx),
            config,
        });
        store.restore()?;
        let rx = Arc::new(Mutex::new(rx));
        for _ in 0..store.config.workers.max(1) {
            let (weak, rx) = (Arc::downgrade(&store), Arc::clone(&rx));
            std::thread::spawn(move || worker(weak, rx));
        }
        Ok(store)
    }

    fn dir(&self, sub: &str) -> PathBuf {
        self.config.artifact_dir.join(sub)
    }

    pub fn model_path(&self, id: &str) -> PathBuf {
        self.dir("models").join(format!("{id}.obj"))
    }

    fn volume_path(&self, id: &str) -> PathBuf {
        self.dir("volumes").join(format!("{id}.s2svol"))
    }

    pub fn mesh_path(&self, id: &str) -> PathBuf {
        self.dir("meshes").join(format!("{id}.obj"))
    }

    fn restore(&self) -> std::io::Result<()> {
        let mut jobs = self.jobs.lock().unwrap();
        for entry in fs::read_dir(self.dir("volumes"))? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            let Ok(record) = serde_json::from_slice::<JobRecord>(&fs::read(&path)?) else {
                log::warn!("skipping unreadable job record {}", path.display());
                continue;
            };
            let volume = match VolumeGrid::read(self.volume_path(&record.job_id)) {
                Ok(v) => v,
                Err(e) => {
                    log::warn!("skipping job {}: {e}", record.job_id);
                    continue;
                }
            };
            jobs.insert(
                record.job_id.clone(),
                Job {
                    checkpoint_path: PathBuf::new(),
                    state: JobState::Done,
                    progress: 1.0,
                    error: None,
                    volume: Some(Arc::new(volume)),
                    extractions: HashMap::new(),
                    record,
                },
            );
        }
        let mut meshes = self.meshes.lock().unwrap();
        for entry in fs::read_dir(self.dir("meshes"))? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            let Ok(record) = serde_json::from_slice::<MeshRecord>(&fs::read(&path)?) else {
                continue;
            };
            if let Some(job) = jobs.get_mut(&record.job_id) {
                job.extractions.insert(record.threshold.to_bits(), record.mesh_id.clone());
            }
            meshes.insert(record.mesh_id.clone(), record);
        }
        Ok(())
    }

    pub fn save_model(&self, mesh: &MeshSurface) -> std::io::Result<String> {
        let id = new_id();
        write_atomic(&self.model_path(&id), &export_mesh(mesh, ExportFormat::Obj))?;
        Ok(id)
    }

    pub fn model_exists(&self, id: &str) -> bool {
        is_id(id) && self.model_path(id).is_file()
    }

    /// Queue a job; workers pick jobs up in submission order.
    pub fn submit(&self, record: JobRecord, checkpoint_path: PathBuf) -> String {
        let id = record.job_id.clone();
        self.jobs.lock().unwrap().insert(
            id.clone(),
            Job {
                record,
                checkpoint_path,
                state: JobState::Queued,
                progress: 0.0,
                error: None,
                volume: None,
                extractions: HashMap::new(),
            },
        );
        self.queue.lock().unwrap().send(id.clone()).expect("workers outlive the store");
        id
    }

    pub fn status(&self, id: &str) -> Option<JobStatus> {
        self.jobs.lock().unwrap().get(id).map(|j| JobStatus {
            state: j.state,
            progress: j.progress,
            error: j.error.clone(),
        })
    }

    /// State and, when done, the volume and slicing axis.
    pub fn volume(&self, id: &str) -> Option<(JobState, Option<(Arc<VolumeGrid>, Axis)>)> {
        self.jobs.lock().unwrap().get(id).map(|j| {
            (j.state, j.volume.clone().map(|v| (v, j.record.params.axis)))
        })
    }

    pub fn cached_extraction(&self, job_id: &str, threshold: f64) -> Option<MeshRecord> {
        let jobs = self.jobs.lock().unwrap();
        let mesh_id = jobs.get(job_id)?.extractions.get(&threshold.to_bits())?.clone();
        self.meshes.lock().unwrap().get(&mesh_id).cloned()
    }

    /// Run marching cubes for a finished job and persist the mesh. A
    /// concurrent request for the same threshold may race; the first
    /// record stored wins.
    pub fn extract(
        &self,
        job_id: &str,
        volume: &VolumeGrid,
        axis: Axis,
        threshold: f64,
    ) -> s2s_core::Result<MeshRecord> {
        let mesh = extract_region(volume, threshold, axis)?;
        let record = MeshRecord {
            mesh_id: new_id(),
            job_id: job_id.to_string(),
            threshold,
            voxels_above: volume.count_above(threshold),
            triangles: mesh.triangles.len(),
        };
        write_atomic(&self.mesh_path(&record.mesh_id), &export_mesh(&mesh, ExportFormat::Obj))?;
        let json = serde_json::to_vec(&record).expect("serializable");
        write_atomic(&self.dir("meshes").join(format!("{}.json", record.mesh_id)), &json)?;

        let mut jobs = self.jobs.lock().unwrap();
        let job = jobs.get_mut(job_id).expect("job exists while extracting");
        if let Some(existing) = job.extractions.get(&threshold.to_bits()) {
            if let Some(r) = self.meshes.lock().unwrap().get(existing) {
                return Ok(r.clone());
            }
        }
        job.extractions.insert(threshold.to_bits(), record.mesh_id.clone());
        self.meshes.lock().unwrap().insert(record.mesh_id.clone(), record.clone());
        Ok(record)
    }

    pub fn mesh_exists(&self, id: &str) -> bool {
        self.meshes.lock().unwrap().contains_key(id)
    }

    pub fn load_mesh(&self, id: &str) -> s2s_core::Result<MeshSurface> {
        parse_mesh(&fs::read(self.mesh_path(id))?, MeshFormat::Obj)
    }

    fn update(&self, id: &str, f: impl FnOnce(&mut Job)) {
        if let Some(job) = self.jobs.lock().unwrap().get_mut(id) {
            f(job);
        }
    }

    fn run(&self, id: &str) {
        let Some((record, ckpt)) = self.jobs.lock().unwrap().get_mut(id).map(|j| {
            j.state = JobState::Running;
            (j.record.clone(), j.checkpoint_path.clone())
        }) else {
            return;
        };
        match self.execute(&record, &ckpt) {
            Ok(volume) => self.update(id, |j| {
                j.volume = Some(Arc::new(volume));
                j.progress = 1.0;
                j.state = JobState::Done;
            }),
            Err(e) => {
                log::warn!("job {id} failed: {e}");
                self.update(id, |j| {
                    j.error = Some(e.to_string());
                    j.state = JobState::Error;
                })
            }
        }
    }

    fn execute(&self, record: &JobRecord, ckpt: &Path) -> s2s_core::Result<VolumeGrid> {
        let mesh = parse_mesh(&fs::read(self.model_path(&record.model_id))?, MeshFormat::Obj)?;
        let g = load_generator(ckpt)?;
        let id = &record.job_id;
        let inference = infer_volume(&mesh, &g, &record.params, |done, total| {
            // the last step is reported by the done transition
            let p = done as f64 / total as f64;
            if done < total {
                self.update(id, |j| j.progress = j.progress.max(p));
            }
        })?;
        if !inference.open_slices.is_empty() {
            log::info!("job {id}: {} slices had open contours", inference.open_slices.len());
        }
        inference.volume.write(self.volume_path(id))?;
        let json = serde_json::to_vec(record).expect("serializable");
        write_atomic(&self.dir("volumes").join(format!("{id}.json")), &json)?;
        Ok(inference.volume)
    }
}

fn worker(store: Weak<Store>, rx: Arc<Mutex<Receiver<String>>>) {
    loop {
        let next = rx.lock().unwrap().recv();
        let Ok(id) = next else { return };
        let Some(store) = store.upgrade() else { return };
        let ran = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| store.run(&id)));
        if ran.is_err() {
            store.update(&id, |j| {
                j.error = Some("internal error while running the job".into());
                j.state = JobState::Error;
            });
        }
    }
}
