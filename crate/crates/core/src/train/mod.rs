//! Training one generator against several weighted patch discriminators.
//!
//! Each step updates every discriminator independently on the real pair and
//! a detached generated sample, then updates the generator once on
//! `Σ w_i · adv_i + λ · L1`.

pub mod checkpoint;
mod loss;

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use loss::{
    check_weights, discriminator_loss, generator_loss, generator_loss_from_scores,
    scores_to_logits, GeneratorLoss, WEIGHT_SUM_TOLERANCE,
};

use crate::dataset::{from_training_range, split_dataset, Corpus, TEST_FRACTION};
use crate::error::{Error, Result};
use crate::metrics;
use crate::image::Image;
use crate::nn::{
    build_discriminator, build_generator, DiscriminatorNet, DiscriminatorSpec, GeneratorConfig,
    GeneratorNet, Mode, Module,
};
use crate::tensor::{l1_loss, Adam, AdamConfig, Tensor};

pub const DEFAULT_LAMBDA: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub discriminators: Vec<DiscriminatorSpec>,
    pub lambda: f64,
    pub resolution: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Write a generator snapshot every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    pub generator_base_width: usize,
    pub generator_max_width: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let g = GeneratorConfig::new(64);
        TrainConfig {
            discriminators: vec![DiscriminatorSpec::new(6, 0.25), DiscriminatorSpec::new(126, 0.75)],
            lambda: DEFAULT_LAMBDA,
            resolution: 64,
            batch_size: 4,
            epochs: 20,
            seed: 7,
            adam: AdamConfig::default(),
            checkpoint_every: 5,
            generator_base_width: g.base_width,
            generator_max_width: g.max_width,
        }
    }
}

impl TrainConfig {
    /// Two discriminators, 6×6 at weight 0.25 and 126×126 at 0.75, λ = 100.
    pub fn multi_patch(resolution: usize) -> Self {
        TrainConfig {
            resolution,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let weights: Vec<f64> = self.discriminators.iter().map(|d| d.weight).collect();
        check_weights(&weights)?;
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be finite and ≥ 0, got {}", self.lambda)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        self.generator_config()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            base_width: self.generator_base_width,
            max_width: self.generator_max_width,
            ..GeneratorConfig::new(self.resolution)
        }
    }

    fn weights(&self) -> Vec<f64> {
        self.discriminators.iter().map(|d| d.weight).collect()
    }
}

/// Losses of one optimization step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub generator_total: f64,
    /// Unweighted adversarial term per discriminator.
    pub adversarial: Vec<f64>,
    pub l1: f64,
    pub discriminator: Vec<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: Vec<StepRecord>,
    pub wall_time_secs: f64,
}

impl TrainReport {
    /// One JSON object per step.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("plain record"));
            out.push('\n');
        }
        out
    }
}

fn finite(value: f64, term: impl FnOnce() -> String, step: usize) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite { term: term(), step })
    }
}

pub struct Trainer {
    config: TrainConfig,
    generator: GeneratorNet,
    discriminators: Vec<DiscriminatorNet>,
    g_opt: Adam,
    d_opts: Vec<Adam>,
    step: usize,
}

impl Trainer {
    /// Fresh networks initialized from `config.seed`: generator first, then
    /// discriminators in order.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let generator = build_generator::<f32>(config.generator_config(), &mut rng)?;
        let in_channels = 2;
        let discriminators = config
            .discriminators
            .iter()
            .map(|s| {
                let c = if s.conditional { in_channels } else { 1 };
                build_discriminator::<f32>(s, c, config.resolution, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_nets(config, generator, discriminators))
    }

    fn from_nets(config: TrainConfig, generator: GeneratorNet, discriminators: Vec<DiscriminatorNet>) -> Self {
        let g_opt = Adam::new(generator.parameters(), config.adam);
        let d_opts = discriminators
            .iter()
            .map(|d| Adam::new(d.parameters(), config.adam))
            .collect();
        Trainer {
            config,
            generator,
            discriminators,
            g_opt,
            d_opts,
            step: 0,
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn generator(&self) -> &GeneratorNet {
        &self.generator
    }

    pub fn discriminators(&self) -> &[DiscriminatorNet] {
        &self.discriminators
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// One update of every discriminator followed by one generator update.
    /// `y` is the contour batch, `x` the target structure batch, both in
    /// [−1, 1] with shape [B, 1, R, R].
    pub fn train_step(&mut self, y: &Tensor, x: &Tensor, epoch: usize) -> Result<StepRecord> {
        let step = self.step;
        let res = self.config.resolution;
        if y.shape().len() != 4 || y.shape()[2..] != [res, res] || x.shape() != y.shape() {
            return Err(Error::dim(format!(
                "batch shapes {:?} / {:?} do not match resolution {res}",
                y.shape(),
                x.shape()
            )));
        }
        let fake = self.generator.forward(y, Mode::Train)?;
        let fake_detached = fake.detach();

        let mut d_losses = Vec::with_capacity(self.discriminators.len());
        for (i, (d, opt)) in self.discriminators.iter().zip(&mut self.d_opts).enumerate() {
            opt.zero_grad();
            let loss = discriminator_loss(d, y, x, &fake_detached, Mode::Train)?;
            let v = finite(f64::from(loss.item()), || format!("discriminator {i} loss"), step)?;
            loss.backward()?;
            opt.step()?;
            d_losses.push(v);
        }

        self.g_opt.zero_grad();
        let logits = self
            .discriminators
            .iter()
            .map(|d| d.forward(&fake, Some(y), Mode::TrainFrozenStats))
            .collect::<Result<Vec<_>>>()?;
        let g = generator_loss(&logits, &self.config.weights(), &fake, x, self.config.lambda)?;
        for (i, &a) in g.adversarial.iter().enumerate() {
            finite(a, || format!("adversarial term of discriminator {i}"), step)?;
        }
        let l1 = finite(g.l1, || "L1 term".into(), step)?;
        let total = finite(f64::from(g.total.item()), || "generator loss".into(), step)?;
        g.total.backward()?;
        self.g_opt.step()?;
        // the generator's backward pass also reached discriminator weights
        for opt in &self.d_opts {
            opt.zero_grad();
        }

        self.step += 1;
        Ok(StepRecord {
            step,
            epoch,
            generator_total: total,
            adversarial: g.adversarial,
            l1,
            discriminator: d_losses,
        })
    }

    /// Mean L1 (in [0, 1] image units) and metrics of the generator in
    /// eval mode over `indices`.
    pub fn evaluate(&self, corpus: &Corpus, indices: &[usize]) -> Result<Evaluation> {
        evaluate_generator(&self.generator, corpus, indices)
    }
}

/// Generator quality on a held-out set, images compared in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub l1: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub count: usize,
}

const EVAL_BATCH: usize = 16;

pub fn evaluate_generator(g: &GeneratorNet, corpus: &Corpus, indices: &[usize]) -> Result<Evaluation> {
    if indices.is_empty() {
        return Err(Error::contract("evaluation set is empty"));
    }
    let res = corpus.resolution;
    let (mut l1, mut psnr, mut ssim) = (0.0, 0.0, 0.0);
    for chunk in indices.chunks(EVAL_BATCH) {
        let (y, x) = corpus.tensors(chunk)?;
        let out = g.forward(&y, Mode::Eval)?;
        // L1 in [−1, 1] units halves when mapped to [0, 1]
        l1 += 0.5 * f64::from(l1_loss(&out, &x)?.item()) * chunk.len() as f64;
        let data = out.data();
        for (k, &i) in chunk.iter().enumerate() {
            let pred = Image::from_vec(
                res,
                res,
                data[k * res * res..(k + 1) * res * res].iter().map(|&v| from_training_range(v)).collect(),
            )?;
            let truth = &corpus.pairs[i].structure;
            psnr += metrics::psnr(&pred, truth)?;
            ssim += metrics::ssim(&pred, truth)?;
        }
    }
    let n = indices.len() as f64;
    Ok(Evaluation {
        l1: l1 / n,
        psnr: psnr / n,
        ssim: ssim / n,
        count: indices.len(),
    })
}

/// Seed for the shuffle of one epoch.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMeta {
    pub config: TrainConfig,
    /// Receptive field each discriminator actually has at this resolution.
    pub effective_patch_sizes: Vec<usize>,
    pub train_count: usize,
    pub test_count: usize,
    pub steps: usize,
}

pub struct TrainOutcome {
    pub trainer: Trainer,
    pub report: TrainReport,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

pub const GENERATOR_FILE: &str = "g.s2s1";
pub const DISCRIMINATOR_FILE: &str = "d.s2s1";
pub const REPORT_FILE: &str = "train_report.jsonl";
pub const META_FILE: &str = "run_meta.json";

/// Train on the train split of `corpus`. When `out_dir` is given, the
/// final generator and discriminators, periodic generator snapshots, the
/// step report and run metadata are written there.
pub fn train(
    config: TrainConfig,
    corpus: &Corpus,
    out_dir: Option<&Path>,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    if corpus.resolution != config.resolution {
        return Err(Error::Config(format!(
            "dataset resolution {} differs from configured {}",
            corpus.resolution, config.resolution
        )));
    }
    let (train_indices, test_indices) = split_dataset(corpus.len(), TEST_FRACTION, config.seed)?;
    let mut trainer = Trainer::new(config.clone())?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    let started = Instant::now();
    let mut report = TrainReport::default();
    let mut report_file = match out_dir {
        Some(dir) => Some(fs::File::create(dir.join(REPORT_FILE))?),
        None => None,
    };

    for epoch in 0..config.epochs {
        for batch in corpus.batches(&train_indices, config.batch_size, epoch_seed(config.seed, epoch)) {
            let (y, x) = batch?;
            let record = trainer.train_step(&y, &x, epoch)?;
            if let Some(f) = report_file.as_mut() {
                writeln!(f, "{}", serde_json::to_string(&record).expect("plain record"))?;
            }
            on_step(&record);
            report.records.push(record);
        }
        if let Some(dir) = out_dir {
            let done = epoch + 1;
            if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 {
                checkpoint::save_generator(&trainer.generator, dir.join(format!("g_epoch{done:04}.s2s1")))?;
            }
        }
    }
    report.wall_time_secs = started.elapsed().as_secs_f64();

    if let Some(dir) = out_dir {
        checkpoint::save_generator(&trainer.generator, dir.join(GENERATOR_FILE))?;
        checkpoint::save_discriminators(&trainer.discriminators, dir.join(DISCRIMINATOR_FILE))?;
        let meta = RunMeta {
            config,
            effective_patch_sizes: trainer.discriminators.iter().map(|d| d.effective_patch_size()).collect(),
            train_count: train_indices.len(),
            test_count: test_indices.len(),
            steps: trainer.step,
        };
        fs::write(
            dir.join(META_FILE),
            serde_json::to_string_pretty(&meta).expect("plain metadata"),
        )?;
    }
    Ok(TrainOutcome {
        trainer,
        report,
        train_indices,
        test_indices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(resolution: usize, discs: Vec<DiscriminatorSpec>) -> TrainConfig {
        TrainConfig {
            discriminators: discs,
            resolution,
            batch_size: 2,
            epochs: 1,
            generator_base_width: 4,
            generator_max_width: 8,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let mut c = TrainConfig::default();
        c.discriminators[0].weight = 0.3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c = TrainConfig { discriminators: vec![], ..TrainConfig::default() };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c = TrainConfig { lambda: -1.0, ..TrainConfig::default() };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn updates_touch_only_their_own_network() {
        let mut t = Trainer::new(tiny(32, vec![DiscriminatorSpec::new(6, 1.0)])).unwrap();
        let corpus = Corpus::generate(1, 2, 32).unwrap();
        let (y, x) = corpus.tensors(&[0, 1]).unwrap();
        let g_before = t.generator.state_dict();
        let d_before = t.discriminators[0].state_dict();

        // discriminator update alone
        let fake = t.generator.forward(&y, Mode::Eval).unwrap().detach();
        t.d_opts[0].zero_grad();
        discriminator_loss(&t.discriminators[0], &y, &x, &fake, Mode::TrainFrozenStats)
            .unwrap()
            .backward()
            .unwrap();
        t.d_opts[0].step().unwrap();
        assert_eq!(t.generator.state_dict(), g_before);
        assert_ne!(t.discriminators[0].state_dict(), d_before);

        // generator update alone
        let d_mid = t.discriminators[0].state_dict();
        t.g_opt.zero_grad();
        let fake = t.generator.forward(&y, Mode::TrainFrozenStats).unwrap();
        let z = t.discriminators[0].forward(&fake, Some(&y), Mode::TrainFrozenStats).unwrap();
        generator_loss(&[z], &[1.0], &fake, &x, 100.0).unwrap().total.backward().unwrap();
        t.g_opt.step().unwrap();
        assert_eq!(t.discriminators[0].state_dict(), d_mid);
        assert_ne!(t.generator.state_dict(), g_before);
    }

    #[test]
    fn adversarial_gradient_without_l1() {
        // A critic that answers ≈ 0.5 everywhere but still depends on its
        // input: shrink the head weights and recentre the head bias.
        let t = Trainer::new(tiny(32, vec![DiscriminatorSpec::new(6, 1.0)])).unwrap();
        let d = &t.discriminators[0];
        let params = d.parameters();
        let head_weight = &params[params.len() - 2];
        head_weight.data_mut().iter_mut().for_each(|w| *w *= 1e-3);
        let corpus = Corpus::generate(1, 2, 32).unwrap();
        let (y, x) = corpus.tensors(&[0, 1]).unwrap();
        let fake = t.generator.forward(&y, Mode::TrainFrozenStats).unwrap();
        let z = d.forward(&fake, Some(&y), Mode::TrainFrozenStats).unwrap();
        let mean = z.data().iter().sum::<f32>() / z.numel() as f32;
        d.head_bias().data_mut()[0] -= mean;

        let z = d.forward(&fake, Some(&y), Mode::TrainFrozenStats).unwrap();
        assert!(z.sigmoid().data().iter().all(|p| (p - 0.5).abs() < 1e-3));
        let loss = generator_loss(&[z], &[1.0], &fake, &x, 0.0).unwrap();
        assert!((f64::from(loss.total.item()) - std::f64::consts::LN_2).abs() < 1e-3);
        loss.total.backward().unwrap();
        let norm: f32 = t
            .generator
            .parameters()
            .iter()
            .filter_map(|p| p.grad())
            .flatten()
            .map(|g| g * g)
            .sum();
        assert!(norm > 0.0);
    }

    #[test]
    fn zero_epochs_writes_initialization() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = Corpus::generate(2, 5, 32).unwrap();
        let cfg = TrainConfig { epochs: 0, ..tiny(32, vec![DiscriminatorSpec::new(6, 1.0)]) };
        let out = train(cfg.clone(), &corpus, Some(dir.path()), |_| {}).unwrap();
        assert!(out.report.records.is_empty());
        let fresh = Trainer::new(cfg).unwrap();
        let loaded = checkpoint::load_generator(dir.path().join(GENERATOR_FILE)).unwrap();
        assert_eq!(loaded.state_dict(), fresh.generator.state_dict());
        let meta: RunMeta =
            serde_json::from_str(&fs::read_to_string(dir.path().join(META_FILE)).unwrap()).unwrap();
        assert_eq!(meta.effective_patch_sizes, vec![6]);
    }

    #[test]
    fn empty_or_mismatched_dataset() {
        let cfg = tiny(32, vec![DiscriminatorSpec::new(6, 1.0)]);
        let empty = Corpus { seed: 0, resolution: 32, pairs: vec![] };
        assert!(matches!(train(cfg.clone(), &empty, None, |_| {}), Err(Error::Config(_))));
        let other = Corpus::generate(0, 5, 64).unwrap();
        assert!(matches!(train(cfg, &other, None, |_| {}), Err(Error::Config(_))));
    }

    #[test]
    fn report_lines_are_json() {
        let corpus = Corpus::generate(3, 5, 32).unwrap();
        let cfg = tiny(32, vec![DiscriminatorSpec::new(6, 0.5), DiscriminatorSpec::new(14, 0.5)]);
        let out = train(cfg, &corpus, None, |_| {}).unwrap();
        assert_eq!(out.report.records.len(), 2);
        for line in out.report.to_jsonl().lines() {
            let r: StepRecord = serde_json::from_str(line).unwrap();
            assert_eq!(r.adversarial.len(), 2);
            assert!(r.generator_total.is_finite());
        }
    }
}
