use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use s2s_core::dataset::{split_dataset, Corpus, TEST_FRACTION};
use s2s_core::geometry::{export_mesh, parse_mesh, Axis, ExportFormat, MeshFormat, RasterMode, VolumeGrid};
use s2s_core::image::Image;
use s2s_core::metrics::{evaluate_images, evaluate_volume, format_table, MetricReport};
use s2s_core::nn::DiscriminatorSpec;
use s2s_core::pipeline::{extract_region, infer_volume, translate_slices, InferParams};
use s2s_core::train::checkpoint::load_generator;
use s2s_core::train::{train, RunMeta, TrainConfig, META_FILE};
use s2s_service::{ServiceConfig, DEFAULT_UPLOAD_LIMIT};

#[derive(Parser)]
#[command(name = "s2s", version, about = "Estimate internal structure volumes from surface meshes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus of (contour, structure) image pairs.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 512)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        res: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Train a generator against one or more patch discriminators.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON training config; flags below override its fields.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Patch size and weight pairs, e.g. 6:0.25,126:0.75
        #[arg(long)]
        disc: Option<String>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        checkpoint_every: Option<usize>,
    },
    /// Run a trained generator over a corpus split and write predictions.
    Translate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Split seed; read from the run metadata next to the checkpoint if omitted.
        #[arg(long)]
        seed: Option<u64>,
        /// Translate every pair instead of the test split.
        #[arg(long)]
        all: bool,
    },
    /// Slice a mesh, translate every slice and stack the results.
    Infer {
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "z")]
        axis: Axis,
        /// Defaults to the checkpoint's resolution.
        #[arg(long)]
        res: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "auto")]
        format: MeshFormat,
        #[arg(long, default_value = "silhouette")]
        mode: String,
        #[arg(long, default_value_t = 0.0)]
        margin: f64,
        /// Also write contour and predicted slices as PGM here.
        #[arg(long)]
        slices: Option<PathBuf>,
    },
    /// Extract the region above a threshold as a mesh (.stl or .obj).
    Extract {
        #[arg(long)]
        vol: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long)]
        out: PathBuf,
        /// Slicing axis the volume was built along.
        #[arg(long, default_value = "z")]
        axis: Axis,
    },
    /// PSNR and SSIM of predictions against references (PGM directories or volumes).
    Metrics {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Write per-item records here as JSON lines.
        #[arg(long)]
        jsonl: Option<PathBuf>,
    },
    /// Run the HTTP API.
    Serve {
        #[arg(long, env = "S2S_PORT", default_value_t = 8080)]
        port: u16,
        #[arg(long, env = "S2S_HOST", default_value = "127.0.0.1")]
        host: String,
        #[arg(long, env = "S2S_CKPT_DIR", default_value = "ckpt")]
        ckpt_dir: PathBuf,
        #[arg(long, env = "S2S_ARTIFACT_DIR", default_value = "artifacts")]
        artifacts: PathBuf,
        #[arg(long, env = "S2S_WORKERS", default_value_t = 1)]
        workers: usize,
        /// Bytes.
        #[arg(long, env = "S2S_UPLOAD_LIMIT", default_value_t = DEFAULT_UPLOAD_LIMIT)]
        upload_limit: usize,
    },
}

fn parse_disc(s: &str) -> Result<Vec<DiscriminatorSpec>> {
    s.split(',')
        .map(|part| {
            let (p, w) = part
                .split_once(':')
                .with_context(|| format!("expected PATCH:WEIGHT, got {part:?}"))?;
            Ok(DiscriminatorSpec::new(p.trim().parse()?, w.trim().parse()?))
        })
        .collect()
}

fn gen_data(out: &Path, count: usize, res: usize, seed: u64) -> Result<()> {
    let corpus = Corpus::generate(seed, count, res)?;
    corpus.save(out)?;
    println!("wrote {count} pairs at {res}x{res} to {}", out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_train(
    data: &Path,
    out: &Path,
    config: Option<&Path>,
    disc: Option<&str>,
    lambda: Option<f64>,
    epochs: Option<usize>,
    seed: Option<u64>,
    batch_size: Option<usize>,
    checkpoint_every: Option<usize>,
) -> Result<()> {
    let corpus = Corpus::load(data)?;
    let mut cfg = match config {
        Some(p) => serde_json::from_slice(&fs::read(p)?).with_context(|| format!("reading {}", p.display()))?,
        None => TrainConfig::default(),
    };
    cfg.resolution = corpus.resolution;
    if let Some(d) = disc {
        cfg.discriminators = parse_disc(d)?;
    }
    cfg.lambda = lambda.unwrap_or(cfg.lambda);
    cfg.epochs = epochs.unwrap_or(cfg.epochs);
    cfg.seed = seed.unwrap_or(cfg.seed);
    cfg.batch_size = batch_size.unwrap_or(cfg.batch_size);
    cfg.checkpoint_every = checkpoint_every.unwrap_or(cfg.checkpoint_every);

    let mut epoch = usize::MAX;
    let outcome = train(cfg, &corpus, Some(out), |r| {
        if r.epoch != epoch {
            epoch = r.epoch;
            log::info!(
                "epoch {} step {}: G {:.4} (L1 {:.4}) D {:?}",
                r.epoch,
                r.step,
                r.generator_total,
                r.l1,
                r.discriminator
            );
        }
    })?;
    let eval = outcome.trainer.evaluate(&corpus, &outcome.test_indices)?;
    println!(
        "trained {} steps in {:.1}s; test L1 {:.4}, PSNR {:.2} dB, SSIM {:.4} over {} pairs",
        outcome.trainer.steps_taken(),
        outcome.report.wall_time_secs,
        eval.l1,
        eval.psnr,
        eval.ssim,
        eval.count
    );
    println!("checkpoints in {}", out.display());
    Ok(())
}

fn run_translate(data: &Path, ckpt: &Path, out: &Path, seed: Option<u64>, all: bool) -> Result<()> {
    let corpus = Corpus::load(data)?;
    let g = load_generator(ckpt)?;
    let indices: Vec<usize> = if all {
        (0..corpus.len()).collect()
    } else {
        let seed = match seed {
            Some(s) => s,
            None => {
                let meta = ckpt.with_file_name(META_FILE);
                let meta: RunMeta = serde_json::from_slice(&fs::read(&meta).with_context(|| {
                    format!("no --seed given and no run metadata at {}", meta.display())
                })?)?;
                meta.config.seed
            }
        };
        split_dataset(corpus.len(), TEST_FRACTION, seed)?.1
    };
    let inputs: Vec<Image> = indices.iter().map(|&i| corpus.pairs[i].contour.clone()).collect();
    let preds = translate_slices(&g, &inputs, |_, _| {})?;
    fs::create_dir_all(out)?;
    for (&i, p) in indices.iter().zip(&preds) {
        p.write_pgm(out.join(format!("{i:06}_x.pgm")))?;
    }
    println!("wrote {} predictions to {}", preds.len(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_infer(
    mesh: &Path,
    ckpt: &Path,
    axis: Axis,
    res: Option<usize>,
    out: &Path,
    format: MeshFormat,
    mode: &str,
    margin: f64,
    slices: Option<&Path>,
) -> Result<()> {
    let surface = parse_mesh(&fs::read(mesh)?, format).with_context(|| format!("reading {}", mesh.display()))?;
    let g = load_generator(ckpt)?;
    let mode = match mode {
        "silhouette" => RasterMode::Silhouette,
        "outline" => RasterMode::Outline,
        other => bail!("mode must be silhouette or outline, got {other:?}"),
    };
    let params = InferParams {
        axis,
        resolution: res.unwrap_or(g.resolution()),
        mode,
        margin,
    };
    let inference = infer_volume(&surface, &g, &params, |done, total| log::info!("{done}/{total} slices"))?;
    if !inference.open_slices.is_empty() {
        eprintln!(
            "warning: {} slices had open contours and were filled only where closed",
            inference.open_slices.len()
        );
    }
    inference.volume.write(out)?;
    if let Some(dir) = slices {
        let sil = s2s_core::pipeline::silhouettes(&surface, &params)?;
        fs::create_dir_all(dir)?;
        for k in 0..inference.volume.plane_count() {
            sil.images[k].write_pgm(dir.join(format!("{k:04}_contour.pgm")))?;
            inference.volume.plane(k)?.write_pgm(dir.join(format!("{k:04}_structure.pgm")))?;
        }
    }
    let [nx, ny, nz] = inference.volume.dims;
    println!("wrote {nx}x{ny}x{nz} volume to {}", out.display());
    Ok(())
}

fn run_extract(vol: &Path, threshold: f64, out: &Path, axis: Axis) -> Result<()> {
    let volume = VolumeGrid::read(vol)?;
    let mesh = extract_region(&volume, threshold, axis)?;
    let format = match out.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("obj") => ExportFormat::Obj,
        Some("stl") => ExportFormat::StlBinary,
        _ => bail!("output must end in .stl or .obj"),
    };
    fs::write(out, export_mesh(&mesh, format))?;
    println!(
        "{} voxels above {threshold}; wrote {} triangles to {}",
        volume.count_above(threshold),
        mesh.triangles.len(),
        out.display()
    );
    Ok(())
}

fn is_volume(p: &Path) -> bool {
    p.is_file() && p.extension().is_some_and(|e| e == "s2svol")
}

fn run_metrics(pred: &Path, truth: &Path, jsonl: Option<&Path>) -> Result<()> {
    let report: MetricReport = if is_volume(pred) && is_volume(truth) {
        evaluate_volume(&VolumeGrid::read(pred)?, &VolumeGrid::read(truth)?)?
    } else {
        let mut names: Vec<_> = fs::read_dir(pred)
            .with_context(|| format!("reading {}", pred.display()))?
            .filter_map(|e| e.ok().map(|e| e.file_name()))
            .filter(|n| n.to_string_lossy().ends_with(".pgm"))
            .collect();
        names.sort();
        if names.is_empty() {
            bail!("no .pgm files in {}", pred.display());
        }
        let mut p = Vec::with_capacity(names.len());
        let mut t = Vec::with_capacity(names.len());
        for n in &names {
            p.push(Image::read_pgm(pred.join(n))?);
            t.push(Image::read_pgm(truth.join(n)).with_context(|| {
                format!("no reference for {} in {}", n.to_string_lossy(), truth.display())
            })?);
        }
        evaluate_images(&p, &t)?
    };
    print!("{}", format_table(&[("pred", &report)]));
    if let Some(path) = jsonl {
        fs::write(path, report.to_jsonl())?;
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::GenData { out, count, res, seed } => gen_data(&out, count, res, seed),
        Command::Train {
            data,
            out,
            config,
            disc,
            lambda,
            epochs,
            seed,
            batch_size,
            checkpoint_every,
        } => run_train(
            &data,
            &out,
            config.as_deref(),
            disc.as_deref(),
            lambda,
            epochs,
            seed,
            batch_size,
            checkpoint_every,
        ),
        Command::Translate { data, ckpt, out, seed, all } => run_translate(&data, &ckpt, &out, seed, all),
        Command::Infer {
            mesh,
            ckpt,
            axis,
            res,
            out,
            format,
            mode,
            margin,
            slices,
        } => run_infer(&mesh, &ckpt, axis, res, &out, format, &mode, margin, slices.as_deref()),
        Command::Extract {
            vol,
            threshold,
            out,
            axis,
        } => run_extract(&vol, threshold, &out, axis),
        Command::Metrics { pred, truth, jsonl } => run_metrics(&pred, &truth, jsonl.as_deref()),
        Command::Serve {
            port,
            host,
            ckpt_dir,
            artifacts,
            workers,
            upload_limit,
        } => {
            let addr: SocketAddr = format!("{host}:{port}").parse().context("bad host/port")?;
            let config = ServiceConfig {
                artifact_dir: artifacts,
                checkpoint_dir: ckpt_dir,
                workers,
                upload_limit,
            };
            tokio::runtime::Runtime::new()?.block_on(s2s_service::serve(config, addr))?;
            Ok(())
        }
    }
}
