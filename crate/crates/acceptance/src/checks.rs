use std::f64::consts::PI;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use s2s_core::dataset::Corpus;
use s2s_core::geometry::measure::{
    hausdorff_distance, icosphere, is_watertight, surface_area, unit_cube,
};
use s2s_core::geometry::{assemble_volume, marching_cubes, slice_at, Axis, VolumeGrid};
use s2s_core::gradcheck::suite::CASES;
use s2s_core::image::Image;
use s2s_core::metrics::{psnr, ssim};
use s2s_core::nn::{
    build_discriminator, compute_receptive_field, discriminator_layers, DiscriminatorSpec, Mode,
    PATCH_FAMILY,
};
use s2s_core::pipeline::{extract_region, silhouettes, InferParams};
use s2s_core::tensor::{AdamConfig, Tensor};
use s2s_core::train::checkpoint::{load_discriminators, load_generator, save_discriminators, save_generator};
use s2s_core::train::{
    evaluate_generator, generator_loss, generator_loss_from_scores, train, TrainConfig, Trainer,
    DISCRIMINATOR_FILE, GENERATOR_FILE, REPORT_FILE,
};

use crate::server::{write_checkpoint, LiveServer};
use crate::{ensure, fail, run, Outcome};

const GRAD_TOL: f64 = 1e-4;
const GRAD_SEEDS: u64 = 100;
const LOSS_TOL: f64 = 1e-12;
const PSNR_TOL: f64 = 1e-9;
const SSIM_TOL: f64 = 1e-6;
const PERIMETER_TOL: f64 = 1e-9;
const AREA_REL_TOL: f64 = 0.05;
const L1_RATIO: f64 = 0.5;
const PSNR_GAIN_DB: f64 = 3.0;
const OVERFIT_L1: f64 = 0.05;
const OVERFIT_STEPS: usize = 200;
const OVERFIT_LR: f64 = 1e-3;

fn minutes(m: u64) -> Duration {
    Duration::from_secs(60 * m)
}

pub fn criterion_1() -> Outcome {
    run(1, "gradient suite", minutes(2), || {
        let mut worst = 0.0f64;
        for case in CASES {
            for seed in 0..GRAD_SEEDS {
                let err = case.run(seed).map_err(fail(case.name()))?;
                ensure(err <= GRAD_TOL, || format!("{} seed {seed}: relative error {err:e}", case.name()))?;
                worst = worst.max(err);
            }
        }
        Ok(format!("{} cases x {GRAD_SEEDS} seeds, worst relative error {worst:.2e}", CASES.len()))
    })
}

/// Bounding box side of the input pixels that reach the center output
/// unit, from the gradient of that unit.
fn empirical_patch(n_layers: usize, resolution: usize) -> Result<usize, String> {
    let patch = PATCH_FAMILY[n_layers - 1];
    let mut rng = ChaCha8Rng::seed_from_u64(n_layers as u64);
    let d = build_discriminator::<f64>(&DiscriminatorSpec::new(patch, 1.0), 2, resolution, &mut rng)
        .map_err(fail("build"))?;
    let shape = [1, 1, resolution, resolution];
    let cand = Tensor::zeros(&shape).into_parameter();
    let cond = Tensor::zeros(&shape);
    let out = d.forward(&cand, Some(&cond), Mode::Eval).map_err(fail("forward"))?;
    let (oh, ow) = (out.shape()[2], out.shape()[3]);
    let mut mask = vec![0.0; oh * ow];
    mask[(oh / 2) * ow + ow / 2] = 1.0;
    let mask = Tensor::from_vec(out.shape(), mask).map_err(fail("mask"))?;
    out.mul(&mask).map_err(fail("select"))?.sum().backward().map_err(fail("backward"))?;
    let grad = cand.grad().ok_or("no gradient reached the input")?;
    let hit: Vec<(usize, usize)> = (0..resolution * resolution)
        .filter(|&i| grad[i] != 0.0)
        .map(|i| (i / resolution, i % resolution))
        .collect();
    let rows = hit.iter().map(|p| p.0);
    let cols = hit.iter().map(|p| p.1);
    let h = rows.clone().max().ok_or("empty support")? - rows.min().unwrap() + 1;
    let w = cols.clone().max().unwrap() - cols.min().unwrap() + 1;
    ensure(h == w, || format!("support is {h}x{w}, not square"))?;
    Ok(h)
}

pub fn criterion_2() -> Outcome {
    run(2, "receptive fields", minutes(2), || {
        let expected = [2, 6, 14, 30, 62, 126];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (n, &want) in (1..=6).zip(&expected) {
            let analytic = compute_receptive_field(&discriminator_layers(n)).map_err(fail("layers"))?;
            let d = build_discriminator::<f32>(&DiscriminatorSpec::new(want, 1.0), 2, 256, &mut rng)
                .map_err(fail("build"))?;
            let built = d.effective_patch_size();
            let probed = empirical_patch(n, 256)?;
            ensure(analytic == want && built == want && probed == want && d.layer_count() == n, || {
                format!("n={n}: formula {analytic}, built {built}, probed {probed}, layers {}, want {want}", d.layer_count())
            })?;
        }
        Ok(format!("n=1..6 give {expected:?} by formula, construction and gradient support"))
    })
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

pub fn criterion_3() -> Outcome {
    run(3, "loss algebra", minutes(2), || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut worst_a = 0.0f64;
        let mut worst_b = 0.0f64;
        for _ in 0..20 {
            let lambda = rng.gen_range(0.0..200.0);
            let fake = rand_tensor(&mut rng, &[2, 1, 8, 8], -1.0, 1.0);
            let real = rand_tensor(&mut rng, &[2, 1, 8, 8], -1.0, 1.0);

            // (a) one discriminator: −mean log σ(z) + λ·mean|real − fake|
            let z = rand_tensor(&mut rng, &[2, 1, 3, 3], -5.0, 5.0);
            let got = generator_loss(&[z.clone()], &[1.0], &fake, &real, lambda)
                .map_err(fail("loss"))?
                .total
                .item();
            let zs = z.to_vec();
            let adv = zs.iter().map(|&v| softplus(-v)).sum::<f64>() / zs.len() as f64;
            let (f, r) = (fake.to_vec(), real.to_vec());
            let l1 = f.iter().zip(&r).map(|(a, b)| (a - b).abs()).sum::<f64>() / f.len() as f64;
            let want = adv + lambda * l1;
            worst_a = worst_a.max((got - want).abs() / want.abs().max(1.0));

            // (b) equal scores everywhere, weights on the simplex
            let n = rng.gen_range(2..6);
            let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..1.0)).collect();
            let sum: f64 = raw.iter().sum();
            let mut weights: Vec<f64> = raw.iter().map(|w| w / sum).collect();
            let rest: f64 = weights[..n - 1].iter().sum();
            weights[n - 1] = 1.0 - rest;
            let s = rand_tensor(&mut rng, &[2, 1, 3, 3], 0.05, 0.95);
            let multi = generator_loss_from_scores(&vec![s.clone(); n], &weights, &fake, &real, lambda)
                .map_err(fail("multi"))?;
            let single = generator_loss_from_scores(&[s], &[1.0], &fake, &real, lambda).map_err(fail("single"))?;
            worst_b = worst_b.max((multi - single).abs() / single.abs().max(1.0));
        }
        ensure(worst_a <= LOSS_TOL, || format!("single form differs by {worst_a:e}"))?;
        ensure(worst_b <= LOSS_TOL, || format!("equal-score multi loss differs by {worst_b:e}"))?;

        // (c) the full configuration takes a finite step
        let cfg = TrainConfig::multi_patch(64);
        let weights: Vec<f64> = cfg.discriminators.iter().map(|d| d.weight).collect();
        ensure(cfg.lambda == 100.0 && weights == [0.25, 0.75], || format!("config is {cfg:?}"))?;
        let corpus = Corpus::generate(7, 4, 64).map_err(fail("corpus"))?;
        let mut trainer = Trainer::new(cfg).map_err(fail("trainer"))?;
        let (y, x) = corpus.tensors(&[0, 1, 2, 3]).map_err(fail("batch"))?;
        let r = trainer.train_step(&y, &x, 0).map_err(fail("step"))?;
        let finite = [r.generator_total, r.l1].iter().chain(&r.adversarial).chain(&r.discriminator).all(|v| v.is_finite());
        ensure(finite, || format!("non-finite step {r:?}"))?;
        Ok(format!(
            "single form within {worst_a:.1e}, equal scores within {worst_b:.1e}, lambda=100 w=(0.25,0.75) step total {:.3}",
            r.generator_total
        ))
    })
}

/// SSIM straight from the definition: for every window position, weighted
/// moments with an explicit 2-D Gaussian, no separable filtering.
fn direct_ssim(a: &Image<f64>, b: &Image<f64>) -> f64 {
    const WIN: usize = 11;
    let sigma: f64 = 1.5;
    let mut g = [[0.0; WIN]; WIN];
    let mut total = 0.0;
    for (i, row) in g.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            total += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut sum = 0.0;
    let mut count = 0;
    for r0 in 0..=a.height - WIN {
        for c0 in 0..=a.width - WIN {
            let (mut ma, mut mb) = (0.0, 0.0);
            for i in 0..WIN {
                for j in 0..WIN {
                    let w = g[i][j] / total;
                    ma += w * a.get(c0 + j, r0 + i);
                    mb += w * b.get(c0 + j, r0 + i);
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..WIN {
                for j in 0..WIN {
                    let w = g[i][j] / total;
                    let (p, q) = (a.get(c0 + j, r0 + i) - ma, b.get(c0 + j, r0 + i) - mb);
                    va += w * p * p;
                    vb += w * q * q;
                    cov += w * p * q;
                }
            }
            sum += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    sum / count as f64
}

pub fn criterion_4() -> Outcome {
    run(4, "metrics oracle", Duration::from_secs(10), || {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Image::from_fn(64, 64, |_, _| rng.gen_range(0.0..0.9f64));
        let shifted = a.map(|v| v + 0.1);
        let p = psnr(&a, &shifted).map_err(fail("psnr"))?;
        ensure((p - 20.0).abs() <= PSNR_TOL, || format!("psnr(a, a+0.1) = {p}"))?;
        let same = ssim(&a, &a).map_err(fail("ssim"))?;
        ensure((same - 1.0).abs() <= 1e-12, || format!("ssim(a, a) = {same}"))?;
        let mut worst = 0.0f64;
        for k in 0..5 {
            let x = Image::from_fn(64, 64, |_, _| rng.gen_range(0.0..1.0f64));
            // correlated partner so SSIM is not near zero
            let y = Image::from_fn(64, 64, |c, r| (0.7 * x.get(c, r) + rng.gen_range(0.0..0.3)).min(1.0));
            let got = ssim(&x, &y).map_err(fail("ssim"))?;
            let want = direct_ssim(&x, &y);
            let err = (got - want).abs();
            ensure(err <= SSIM_TOL, || format!("pair {k}: ssim {got} vs direct {want}"))?;
            worst = worst.max(err);
        }
        Ok(format!("psnr {p:.12} dB, ssim(a,a) {same}, direct SSIM within {worst:.1e} on 5 pairs"))
    })
}

pub fn criterion_5() -> Outcome {
    run(5, "geometry round trip", minutes(1), || {
        let sphere = icosphere(1.0, 3);
        let params = InferParams {
            axis: Axis::Z,
            resolution: 64,
            ..InferParams::default()
        };
        let sil = silhouettes(&sphere, &params).map_err(fail("silhouettes"))?;
        let frame = sil.model_frame();
        let volume = assemble_volume(&sil.images, frame).map_err(fail("volume"))?;
        let mesh = extract_region(&volume, 0.5, Axis::Z).map_err(fail("extract"))?;
        ensure(is_watertight(&mesh), || "recovered sphere is not watertight".into())?;
        let diag = frame.spacing.iter().map(|s| s * s).sum::<f64>().sqrt();
        let h = hausdorff_distance(&mesh, &sphere);
        ensure(h <= 2.0 * diag, || format!("hausdorff {h} > 2 x {diag}"))?;

        let section = slice_at(&unit_cube(), 0.5, 1.0);
        let perimeter: f64 = section.polylines.iter().map(|p| p.perimeter()).sum();
        ensure((perimeter - 4.0).abs() <= PERIMETER_TOL, || format!("cube section perimeter {perimeter}"))?;

        // ball of radius 20 voxels in 64³ from its signed distance, clamped
        // to [0, 1] four voxels away from the surface
        let (n, r) = (64usize, 20.0);
        let mut values = Vec::with_capacity(n * n * n);
        for k in 0..n {
            for j in 0..n {
                for i in 0..n {
                    let p = [i, j, k].map(|t| t as f64 - 31.5);
                    let d = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
                    values.push((0.5 + (r - d) / 8.0).clamp(0.0, 1.0) as f32);
                }
            }
        }
        let grid = VolumeGrid::new([n; 3], [0.0; 3], [1.0; 3], values).map_err(fail("grid"))?;
        let ball = marching_cubes(&grid, 0.5).map_err(fail("marching cubes"))?;
        let area = surface_area(&ball);
        let exact = 4.0 * PI * r * r;
        let rel = (area - exact).abs() / exact;
        ensure(rel <= AREA_REL_TOL, || format!("sphere area {area} vs {exact}"))?;
        Ok(format!(
            "hausdorff {h:.4} <= {:.4}, perimeter {perimeter:.12}, area error {:.3}%",
            2.0 * diag,
            100.0 * rel
        ))
    })
}

/// L1 in training units after `steps` on one pair at `lr`.
fn overfit(corpus: &Corpus, lr: f64) -> Result<(f64, f64), String> {
    let cfg = TrainConfig {
        batch_size: 1,
        adam: AdamConfig {
            lr,
            ..AdamConfig::default()
        },
        ..TrainConfig::multi_patch(corpus.resolution)
    };
    let mut trainer = Trainer::new(cfg).map_err(fail("trainer"))?;
    let (y, x) = corpus.tensors(&[0]).map_err(fail("pair"))?;
    let mut first = f64::NAN;
    let mut last = f64::NAN;
    for step in 0..OVERFIT_STEPS {
        last = trainer.train_step(&y, &x, 0).map_err(fail("step"))?.l1;
        if step == 0 {
            first = last;
        }
    }
    Ok((first, last))
}

pub fn criterion_6() -> Outcome {
    run(6, "desk-scale learning", minutes(30), || {
        let corpus = Corpus::generate(7, 512, 64).map_err(fail("corpus"))?;
        let cfg = TrainConfig::multi_patch(64);
        let untrained = Trainer::new(cfg.clone()).map_err(fail("trainer"))?;
        let out = train(cfg, &corpus, None, |_| {}).map_err(fail("train"))?;
        let test = &out.test_indices;
        let before = evaluate_generator(untrained.generator(), &corpus, test).map_err(fail("evaluate"))?;
        let after = out.trainer.evaluate(&corpus, test).map_err(fail("evaluate"))?;
        let background: f64 = test
            .iter()
            .map(|&i| {
                let truth = &corpus.pairs[i].structure;
                psnr(&Image::filled(truth.width, truth.height, 0.0f32), truth)
            })
            .sum::<Result<f64, _>>()
            .map_err(fail("baseline"))?
            / test.len() as f64;
        ensure(after.l1 <= L1_RATIO * before.l1, || {
            format!("test L1 {:.4} vs untrained {:.4}", after.l1, before.l1)
        })?;
        ensure(after.psnr >= background + PSNR_GAIN_DB, || {
            format!("test PSNR {:.2} vs background {background:.2}", after.psnr)
        })?;

        let single = Corpus::generate(11, 1, 64).map_err(fail("corpus"))?;
        let (_, at_default) = overfit(&single, AdamConfig::default().lr)?;
        let (first, pinned) = overfit(&single, OVERFIT_LR)?;
        ensure(pinned <= OVERFIT_L1 && pinned < first, || {
            format!("overfit L1 {pinned:.4} after {OVERFIT_STEPS} steps at lr {OVERFIT_LR} (from {first:.4})")
        })?;
        Ok(format!(
            "test L1 {:.4} vs untrained {:.4}; PSNR {:.2} vs background {background:.2} dB; \
             overfit L1 {pinned:.4} at lr {OVERFIT_LR} ({at_default:.4} at default lr); training {:.0} s",
            after.l1, before.l1, after.psnr, out.report.wall_time_secs
        ))
    })
}

fn short_run(dir: &std::path::Path) -> Result<Vec<String>, String> {
    let corpus = Corpus::generate(5, 20, 32).map_err(fail("corpus"))?;
    let cfg = TrainConfig {
        epochs: 1,
        ..TrainConfig::multi_patch(32)
    };
    let out = train(cfg, &corpus, Some(dir), |_| {}).map_err(fail("train"))?;
    Ok(out.report.records.iter().map(|r| serde_json::to_string(r).expect("record")).collect())
}

fn read(path: impl AsRef<std::path::Path>) -> Result<Vec<u8>, String> {
    std::fs::read(path.as_ref()).map_err(|e| format!("{}: {e}", path.as_ref().display()))
}

pub fn criterion_7() -> Outcome {
    run(7, "determinism and persistence", minutes(5), || {
        let a = tempfile::tempdir().map_err(fail("tempdir"))?;
        let b = tempfile::tempdir().map_err(fail("tempdir"))?;
        let (ra, rb) = (short_run(a.path())?, short_run(b.path())?);
        ensure(ra == rb, || "loss sequences differ".into())?;
        for f in [GENERATOR_FILE, DISCRIMINATOR_FILE, REPORT_FILE] {
            ensure(read(a.path().join(f))? == read(b.path().join(f))?, || format!("{f} differs between runs"))?;
        }

        let g = load_generator(a.path().join(GENERATOR_FILE)).map_err(fail("load generator"))?;
        save_generator(&g, a.path().join("g2.s2s1")).map_err(fail("save generator"))?;
        let specs = TrainConfig::multi_patch(32).discriminators;
        let ds = load_discriminators(&specs, a.path().join(DISCRIMINATOR_FILE)).map_err(fail("load discriminators"))?;
        save_discriminators(&ds, a.path().join("d2.s2s1")).map_err(fail("save discriminators"))?;
        ensure(read(a.path().join("g2.s2s1"))? == read(a.path().join(GENERATOR_FILE))?, || {
            "generator checkpoint changes on reload".into()
        })?;
        ensure(read(a.path().join("d2.s2s1"))? == read(a.path().join(DISCRIMINATOR_FILE))?, || {
            "discriminator checkpoint changes on reload".into()
        })?;

        let server = LiveServer::start()?;
        let model = server.upload_cube()?;
        let body = json!({"axis": "z", "resolution": 16, "checkpoint": "default"}).to_string();
        let (j1, j2) = (server.submit(&model, &body)?, server.submit(&model, &body)?);
        for j in [&j1, &j2] {
            ensure(server.wait(j)?["state"] == "done", || format!("job {j} failed"))?;
        }
        let (v1, v2) = (server.volume_bytes(&j1)?, server.volume_bytes(&j2)?);
        ensure(v1 == v2, || "identical jobs gave different volumes".into())?;
        Ok(format!(
            "{} identical step records, bitwise checkpoints and reloads, service volumes of {} bytes match",
            ra.len(),
            v1.len()
        ))
    })
}

pub fn criterion_8() -> Outcome {
    run(8, "service contract", minutes(1), || {
        let server = LiveServer::start()?;
        let model = server.upload_cube()?;
        let job_body = json!({"axis": "z", "resolution": 16, "checkpoint": "default"}).to_string();
        let job = server.submit(&model, &job_body)?;
        let status = server.wait(&job)?;
        ensure(status == json!({"state": "done", "progress": 1.0, "error": null}), || format!("status {status}"))?;

        let slice = server.expect("GET", &format!("/api/jobs/{job}/slices/0"), Vec::new(), 200)?;
        ensure(slice.body.starts_with(b"P5"), || "slice is not a PGM".into())?;
        let ext = server.expect("POST", &format!("/api/jobs/{job}/extract"), r#"{"threshold":0.5}"#, 200)?.json();
        let mesh = ext["mesh_id"].as_str().ok_or("extract reply lacks mesh_id")?.to_string();
        let triangles = ext["triangles"].as_u64().ok_or("extract reply lacks triangles")? as usize;
        let again = server.expect("POST", &format!("/api/jobs/{job}/extract"), r#"{"threshold":0.5}"#, 200)?.json();
        ensure(again == ext, || "repeated extraction gave a different mesh".into())?;
        let stl = server.expect("GET", &format!("/api/meshes/{mesh}?format=stl"), Vec::new(), 200)?;
        ensure(stl.body.len() == 84 + 50 * triangles, || {
            format!("stl is {} bytes for {triangles} triangles", stl.body.len())
        })?;

        let unknown = "0".repeat(32);
        let mut errors = Vec::new();
        let mut check = |method: &str, path: String, body: Vec<u8>, code: u16| -> Result<(), String> {
            let r = server.call(method, &path, body)?;
            ensure(r.status == code && r.error_code() == u64::from(code), || {
                format!("{method} {path}: expected {code}, got {} {}", r.status, String::from_utf8_lossy(&r.body))
            })?;
            errors.push(code);
            Ok(())
        };
        check("POST", "/api/models".into(), b"\x00\x01garbage".to_vec(), 422)?;
        check("POST", "/api/models".into(), vec![b' '; 65 << 20], 413)?;
        check("POST", format!("/api/models/{unknown}/jobs"), job_body.clone().into(), 404)?;
        let missing = json!({"axis": "z", "resolution": 16, "checkpoint": "nope"}).to_string();
        check("POST", format!("/api/models/{model}/jobs"), missing.into(), 404)?;
        check("POST", format!("/api/jobs/{job}/extract"), br#"{"threshold":1.5}"#.to_vec(), 422)?;
        check("GET", format!("/api/jobs/{job}/slices/16"), Vec::new(), 422)?;
        check("GET", format!("/api/meshes/{mesh}?format=ply"), Vec::new(), 422)?;
        check("GET", format!("/api/jobs/{unknown}"), Vec::new(), 404)?;
        check("GET", format!("/api/meshes/{unknown}"), Vec::new(), 404)?;

        // a full-size job holds the only worker so the next one stays queued
        write_checkpoint(&server.dir.path().join("ckpt"), "big", s2s_core::nn::GeneratorConfig::new(64), 5)?;
        let blocker = server.submit(&model, &json!({"resolution": 64, "checkpoint": "big"}).to_string())?;
        let queued = server.submit(&model, &job_body)?;
        check("POST", format!("/api/jobs/{queued}/extract"), br#"{"threshold":0.5}"#.to_vec(), 409)?;
        server.wait(&blocker)?;
        server.wait(&queued)?;
        Ok(format!("walkthrough ok, stl {} bytes; error codes {errors:?}", stl.body.len()))
    })
}
