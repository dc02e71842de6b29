//! Objective, optimizer, checkpoints and the staged training loop.

mod checkpoint;
mod data;
mod losses;

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use data::{held_out_images, synthetic_image, Dataset};
pub use losses::{frequency_loss, rate_loss, spatial_loss, total_loss, ImageLoss, LossReport, LossWeights};

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, CODEC_PREFIX, DENOISER_PREFIX};
use crate::nn::{Ctx, ParamStore};
use crate::prior::PriorProvider;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Toy prior autoencoder.
    Prior,
    /// Codec with rate, spatial and frequency terms.
    Codec,
    /// Denoiser with the codec frozen.
    Denoiser,
    /// Codec and denoiser together with all four terms.
    Joint,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::Prior => 1,
            Stage::Codec => 2,
            Stage::Denoiser => 3,
            Stage::Joint => 4,
        }
    }

    pub fn from_number(n: u8) -> Option<Stage> {
        [Stage::Prior, Stage::Codec, Stage::Denoiser, Stage::Joint].into_iter().find(|s| s.number() == n)
    }

    /// File written when the stage finishes.
    pub fn output_name(self) -> &'static str {
        match self {
            Stage::Prior => "prior.ckpt",
            Stage::Codec => "codec.ckpt",
            Stage::Denoiser | Stage::Joint => "model.ckpt",
        }
    }

    pub fn metrics_name(self) -> String {
        format!("metrics-{self}.tsv")
    }

    pub fn resume_name(self) -> String {
        format!("resume-{self}.ckpt")
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Prior => "stage1",
            Stage::Codec => "stage2",
            Stage::Denoiser => "stage3",
            Stage::Joint => "joint",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Stage> {
        match s {
            "1" => Ok(Stage::Prior),
            "2" => Ok(Stage::Codec),
            "3" => Ok(Stage::Denoiser),
            "joint" => Ok(Stage::Joint),
            _ => Err(Error::Config(format!("unknown stage {s:?}; expected 1, 2, 3 or joint"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    /// Side of the square training crops.
    pub crop: usize,
    pub lr: f64,
    /// Learning rate of the prior stage.
    pub prior_lr: f64,
    /// Global gradient-norm clip.
    pub clip: f64,
    pub prior_steps: u64,
    pub codec_steps: u64,
    pub denoiser_steps: u64,
    pub joint_steps: u64,
    /// Stage 2 uses `(λ1, λ2, λ3, 0)`, stage 3 `(0, 0, 0, λ4)`, joint all four.
    pub weights: LossWeights,
    /// Resume checkpoint period in steps; 0 disables.
    pub checkpoint_every: u64,
    /// Images used to calibrate the toy prior's content scale.
    pub calibration_images: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            batch_size: 4,
            crop: 64,
            lr: 1e-4,
            prior_lr: 1e-3,
            clip: 1.0,
            prior_steps: 1000,
            codec_steps: 1000,
            denoiser_steps: 500,
            joint_steps: 1000,
            weights: LossWeights { lambda1: 1.0, lambda2: 1.0, lambda3: 0.1, lambda4: 1.0 },
            checkpoint_every: 100,
            calibration_images: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.batch_size == 0 || self.crop == 0 {
            return Err(Error::Config("batch size and crop must be positive".into()));
        }
        if [self.lr, self.prior_lr].iter().any(|lr| !(*lr > 0.0 && lr.is_finite())) || !(self.clip > 0.0) {
            return Err(Error::Config("learning rate and clip must be positive".into()));
        }
        Ok(())
    }

    pub fn steps(&self, stage: Stage) -> u64 {
        match stage {
            Stage::Prior => self.prior_steps,
            Stage::Codec => self.codec_steps,
            Stage::Denoiser => self.denoiser_steps,
            Stage::Joint => self.joint_steps,
        }
    }

    pub fn stage_lr(&self, stage: Stage) -> f64 {
        if stage == Stage::Prior {
            self.prior_lr
        } else {
            self.lr
        }
    }

    pub fn stage_weights(&self, stage: Stage) -> LossWeights {
        let w = self.weights;
        match stage {
            Stage::Prior | Stage::Codec => LossWeights { lambda4: 0.0, ..w },
            Stage::Denoiser => LossWeights { lambda1: 0.0, lambda2: 0.0, lambda3: 0.0, lambda4: w.lambda4 },
            Stage::Joint => w,
        }
    }
}

/// Full configuration file: architecture plus training settings.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Adaptive-moment optimizer with global gradient-norm clipping.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip: f64,
    pub t: u64,
    m: ParamStore<T>,
    v: ParamStore<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64, clip: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip, t: 0, m: ParamStore::new(), v: ParamStore::new() }
    }

    /// Applies one update; returns the gradient norm before clipping.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>) -> f64 {
        let norm = grads.values().map(|g| g.data().iter().map(|v| v.to_f64c().powi(2)).sum::<f64>()).sum::<f64>().sqrt();
        let scale = if norm > self.clip { self.clip / norm } else { 1.0 };
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (name, g) in grads {
            let p = params.get_mut(name).unwrap_or_else(|| panic!("gradient for unknown parameter {name}"));
            if self.m.get(name).is_none() {
                self.m.insert(name.clone(), Tensor::zeros(g.shape()));
                self.v.insert(name.clone(), Tensor::zeros(g.shape()));
            }
            let m = self.m.get_mut(name).unwrap();
            let v = self.v.get_mut(name).unwrap();
            for i in 0..g.len() {
                let gi = g.data()[i].to_f64c() * scale;
                let mi = b1 * m.data()[i].to_f64c() + (1.0 - b1) * gi;
                let vi = b2 * v.data()[i].to_f64c() + (1.0 - b2) * gi * gi;
                m.data_mut()[i] = T::from_f64c(mi);
                v.data_mut()[i] = T::from_f64c(vi);
                let upd = self.lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
                p.data_mut()[i] = T::from_f64c(p.data()[i].to_f64c() - upd);
            }
        }
        norm
    }

    /// Moments as `opt.m.*` / `opt.v.*` tensors.
    pub fn export(&self, into: &mut ParamStore<T>) {
        for (name, t) in self.m.iter() {
            into.insert(format!("opt.m.{name}"), t.clone());
        }
        for (name, t) in self.v.iter() {
            into.insert(format!("opt.v.{name}"), t.clone());
        }
    }

    pub fn import(&mut self, from: &ParamStore<T>, t: u64) {
        self.m = ParamStore::new();
        self.v = ParamStore::new();
        for (name, tensor) in from.iter() {
            if let Some(rest) = name.strip_prefix("opt.m.") {
                self.m.insert(rest, tensor.clone());
            } else if let Some(rest) = name.strip_prefix("opt.v.") {
                self.v.insert(rest, tensor.clone());
            }
        }
        self.t = t;
    }
}

/// RNG for one training step, a pure function of `(seed, stage, step)`.
pub fn step_rng(seed: u64, stage: Stage, step: u64) -> ChaCha8Rng {
    let mut s = seed ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul(step.wrapping_add(1)) ^ ((stage.number() as u64) << 56);
    // splitmix64 finaliser
    s = (s ^ (s >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    s = (s ^ (s >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(s ^ (s >> 31))
}

/// One line of the metrics file.
pub fn metrics_line(step: u64, r: &LossReport) -> String {
    format!("{step}\t{}\t{}\t{}\t{}\t{}\t{}", r.bpp, r.rate, r.spatial, r.frequency, r.noise, r.total)
}

pub const METRICS_HEADER: &str = "step\tbpp\tL_rate\tL_spatial\tL_frequency\tL_noise\ttotal";

impl<T: Scalar> Model<T> {
    /// Checkpoint of the current parameters.
    pub fn checkpoint(&self, step: u64, seed: u64, stage: u8) -> Checkpoint<T> {
        Checkpoint { config: self.cfg, step, seed, stage, tensors: self.params.clone() }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint<T>) -> Result<Self> {
        let mut model = Model::new(ckpt.config, 0)?;
        model.params.assign_from(&ckpt.model_params())?;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&load_checkpoint(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.checkpoint(0, 0, 0))
    }
}

/// What a stage optimizes.
fn trainable_prefixes<T: Scalar>(model: &Model<T>, stage: Stage) -> Result<Vec<String>> {
    Ok(match stage {
        Stage::Prior => match &model.prior {
            PriorProvider::Toy(p) => p.trainable_prefixes().to_vec(),
            PriorProvider::Fixed(_) => return Err(Error::Config("the fixed filter prior has nothing to train".into())),
        },
        Stage::Codec => vec![CODEC_PREFIX.to_string()],
        Stage::Denoiser => vec![DENOISER_PREFIX.to_string()],
        Stage::Joint => vec![CODEC_PREFIX.to_string(), DENOISER_PREFIX.to_string()],
    })
}

/// Loss and gradients of one image.
fn image_step<T: Scalar>(
    model: &Model<T>,
    stage: Stage,
    prefixes: &[&str],
    weights: &LossWeights,
    x: &Tensor<T>,
    rng: &mut ChaCha8Rng,
) -> Result<(LossReport, BTreeMap<String, Tensor<T>>)> {
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &model.params).with_trainable(prefixes);
    let (total, report) = match (stage, &model.prior) {
        (Stage::Prior, PriorProvider::Toy(p)) => {
            let loss = p.reconstruction_loss(&ctx, ctx.constant(x.clone()))?;
            let v = loss.item().to_f64c();
            (loss, LossReport { spatial: v, total: v, ..LossReport::default() })
        }
        (Stage::Prior, _) => unreachable!("checked by trainable_prefixes"),
        _ => {
            let (_, h, w) = x.dims3();
            let xp = model.pad(x)?;
            let l = total_loss(model, &ctx, &xp, h * w, weights, rng)?;
            (l.total, l.report)
        }
    };
    if !report.total.is_finite() {
        return Ok((report, BTreeMap::new()));
    }
    let grads = tape.backward(total);
    Ok((report, ctx.param_grads(&grads)))
}

/// Per-step summary returned by [`train_stage`].
#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub report: LossReport,
    pub grad_norm: f64,
}

/// Options of one stage run.
#[derive(Debug, Clone, Default)]
pub struct StageRun {
    /// Output directory for metrics and checkpoints; `None` keeps everything in memory.
    pub out: Option<PathBuf>,
    /// Continue from this resume checkpoint.
    pub resume: Option<PathBuf>,
    /// Stop after this step even if the stage has more.
    pub stop_after: Option<u64>,
}

/// Runs one training stage, mutating `model`. Deterministic given the config seed.
pub fn train_stage<T: Scalar>(
    model: &mut Model<T>,
    tcfg: &TrainConfig,
    data: &Dataset<T>,
    stage: Stage,
    run: &StageRun,
) -> Result<Vec<StepLog>> {
    tcfg.validate()?;
    let prefixes = trainable_prefixes(model, stage)?;
    let prefix_refs: Vec<&str> = prefixes.iter().map(|s| s.as_str()).collect();
    let weights = tcfg.stage_weights(stage);
    if stage != Stage::Prior {
        weights.validate()?;
    }
    let mut adam = Adam::new(tcfg.stage_lr(stage), tcfg.clip);
    let mut start = 0;
    if let Some(path) = &run.resume {
        let ckpt: Checkpoint<T> = load_checkpoint(path)?;
        ckpt.expect_config(&model.cfg)?;
        if ckpt.stage != stage.number() || ckpt.seed != tcfg.seed {
            return Err(Error::Model(format!(
                "resume checkpoint is from stage {} seed {}, not {stage} seed {}",
                ckpt.stage, ckpt.seed, tcfg.seed
            )));
        }
        model.params.assign_from(&ckpt.model_params())?;
        adam.import(&ckpt.tensors, ckpt.step);
        start = ckpt.step;
    }
    let mut metrics = match &run.out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(open_metrics(&dir.join(stage.metrics_name()), start)?)
        }
        None => None,
    };

    let end = tcfg.steps(stage).min(run.stop_after.unwrap_or(u64::MAX));
    let mut logs = Vec::new();
    for step in start + 1..=end {
        let mut rng = step_rng(tcfg.seed, stage, step);
        let batch: Vec<Tensor<T>> = (0..tcfg.batch_size).map(|_| data.sample(&mut rng)).collect();
        let mut reports = Vec::with_capacity(batch.len());
        let mut acc: BTreeMap<String, Tensor<T>> = BTreeMap::new();
        for x in &batch {
            let (report, grads) = image_step(model, stage, &prefix_refs, &weights, x, &mut rng)?;
            if !report.total.is_finite() || grads.values().any(|g| !g.is_finite()) {
                let dump = dump_batch(run.out.as_deref(), model, stage, step, &batch)?;
                return Err(Error::NonFinite(format!("{stage} step {step}: loss {:?}; batch dumped to {dump}", report)));
            }
            reports.push(report);
            for (name, g) in grads {
                match acc.get_mut(&name) {
                    Some(a) => a.add_assign(&g),
                    None => {
                        acc.insert(name, g);
                    }
                }
            }
        }
        let inv = T::from_f64c(1.0 / batch.len() as f64);
        for g in acc.values_mut() {
            *g = g.scale(inv);
        }
        let grad_norm = adam.step(&mut model.params, &acc);
        let report = LossReport::mean(&reports);
        if let Some(f) = metrics.as_mut() {
            writeln!(f, "{}", metrics_line(step, &report))?;
            f.flush()?;
        }
        log::debug!("{stage} step {step}: total {:.5} bpp {:.4}", report.total, report.bpp);
        logs.push(StepLog { step, report, grad_norm });
        if let Some(dir) = &run.out {
            if tcfg.checkpoint_every > 0 && step % tcfg.checkpoint_every == 0 {
                let mut ckpt = model.checkpoint(step, tcfg.seed, stage.number());
                adam.export(&mut ckpt.tensors);
                save_checkpoint(&dir.join(stage.resume_name()), &ckpt)?;
            }
        }
    }

    if end == tcfg.steps(stage) {
        if stage == Stage::Prior {
            calibrate_content_scale(model, tcfg, data)?;
        }
        if let Some(dir) = &run.out {
            save_checkpoint(&dir.join(stage.output_name()), &model.checkpoint(end, tcfg.seed, stage.number()))?;
        }
    }
    Ok(logs)
}

/// Runs the staged schedule (or the joint stage) from a fresh model.
pub fn train(cfg: &Config, data: &Dataset<f32>, out: &Path, stages: &[Stage]) -> Result<Model<f32>> {
    let mut model = Model::new(cfg.model, cfg.train.seed)?;
    for &stage in stages {
        if stage == Stage::Prior && model.prior.kind() != crate::prior::PriorKind::ToyLatent {
            continue;
        }
        log::info!("{stage}: {} steps", cfg.train.steps(stage));
        train_stage(&mut model, &cfg.train, data, stage, &StageRun { out: Some(out.to_path_buf()), ..Default::default() })?;
    }
    Ok(model)
}

/// Sets the toy prior's content scale so content targets have unit variance.
pub fn calibrate_content_scale<T: Scalar>(model: &mut Model<T>, tcfg: &TrainConfig, data: &Dataset<T>) -> Result<()> {
    let PriorProvider::Toy(p) = &model.prior else { return Ok(()) };
    let mut rng = step_rng(tcfg.seed, Stage::Prior, u64::MAX);
    let (mut sum, mut sq, mut n) = (0.0, 0.0, 0.0);
    let tape = Tape::inference();
    let ctx = Ctx::new(&tape, &model.params);
    for _ in 0..tcfg.calibration_images.max(1) {
        let x = data.sample(&mut rng);
        let content = p.encode(&ctx, tape.constant(x))?.content.value();
        for v in content.data() {
            let v = v.to_f64c();
            sum += v;
            sq += v * v;
            n += 1.0;
        }
    }
    let var = sq / n - (sum / n).powi(2);
    if !(var > 0.0 && var.is_finite()) {
        return Err(Error::NonFinite(format!("content variance {var} after prior training")));
    }
    let name = p.scale_name();
    model.params.get_mut(&name).expect("scale parameter").data_mut()[0] = T::from_f64c(1.0 / var.sqrt());
    Ok(())
}

fn open_metrics(path: &Path, keep_through: u64) -> Result<File> {
    let mut kept = Vec::new();
    if keep_through > 0 && path.exists() {
        for line in BufReader::new(File::open(path)?).lines() {
            let line = line?;
            match line.split('\t').next().and_then(|s| s.parse::<u64>().ok()) {
                Some(step) if step <= keep_through => kept.push(line),
                Some(_) => break,
                None => {}
            }
        }
    }
    let mut f = OpenOptions::new().create(true).write(true).truncate(true).open(path)?;
    writeln!(f, "{METRICS_HEADER}")?;
    for line in kept {
        writeln!(f, "{line}")?;
    }
    Ok(f)
}

fn dump_batch<T: Scalar>(out: Option<&Path>, model: &Model<T>, stage: Stage, step: u64, batch: &[Tensor<T>]) -> Result<String> {
    let Some(dir) = out else { return Ok("(no output directory)".into()) };
    let mut tensors = ParamStore::new();
    for (i, x) in batch.iter().enumerate() {
        tensors.insert(format!("batch.{i:03}"), x.clone());
    }
    let ckpt = Checkpoint { config: model.cfg, step, seed: 0, stage: stage.number(), tensors };
    let path = dir.join(format!("nonfinite-{stage}-step{step}.ckpt"));
    save_checkpoint(&path, &ckpt)?;
    Ok(path.display().to_string())
}
