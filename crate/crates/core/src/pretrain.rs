//! Self-supervised pre-training of the U-Net.
//!
//! MDM corrupts by masking random patches and regresses the clean image;
//! the DDPM baseline corrupts with Gaussian noise and regresses either the
//! noise or the clean image. Each iteration `k` draws all of its randomness
//! (batch indices, augmentation, timesteps, masks, noise) from
//! `rng::stream(seed, "pretrain", k)`, so resuming from a checkpoint at step
//! `k` replays the uninterrupted run exactly.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{meta_json, parse_meta, UNetCheckpoint};
use crate::corruption::{diffuse, diffuse_with_noise, make_beta_schedule, mask_image, DiffusionSchedule, ScheduleKind};
use crate::data::{random_crop, random_flip};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::losses::{mse_tensor, ssim_loss_tensor, SsimParams};
use crate::nn::{Adam, AdamConfig};
use crate::rng;
use crate::unet::{UNet, UNetConfig};

/// Consecutive non-finite losses tolerated before training aborts.
pub const DIVERGENCE_PATIENCE: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Mdm,
    Ddpm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Ssim,
    Mse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Image,
    Noise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub method: Method,
    pub loss: LossKind,
    pub target: Target,
    /// Maximum timestep `T`.
    pub max_t: usize,
    pub patch: usize,
    /// Train at this single timestep instead of sampling `t ~ U{1..T}`.
    pub fixed_t: Option<usize>,
    pub batch_size: usize,
    pub iterations: usize,
    pub optimizer: AdamConfig,
    pub seed: u64,
    /// Random square crop applied before flipping; `None` trains on full images.
    pub crop_size: Option<usize>,
    pub flip: bool,
    /// Write an intermediate checkpoint every this many iterations (0 = never).
    pub checkpoint_every: usize,
    pub schedule: ScheduleKind,
    pub ssim: SsimParams,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Mdm,
            loss: LossKind::Ssim,
            target: Target::Image,
            max_t: 1000,
            patch: 8,
            fixed_t: None,
            batch_size: 128,
            iterations: 10_000,
            optimizer: AdamConfig::with_lr(1e-4),
            seed: 0,
            crop_size: None,
            flip: true,
            checkpoint_every: 0,
            schedule: ScheduleKind::default(),
            ssim: SsimParams::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.max_t == 0 {
            return bad("max_t must be >= 1".into());
        }
        if self.method == Method::Mdm && self.target == Target::Noise {
            return bad("MDM reconstructs the image; target = noise is only valid for ddpm".into());
        }
        if self.target == Target::Noise && self.loss == LossKind::Ssim {
            return bad("the noise target is trained with mse only".into());
        }
        if let Some(t) = self.fixed_t {
            if !(1..=self.max_t).contains(&t) {
                return bad(format!("fixed_t = {t} outside [1, {}]", self.max_t));
            }
        }
        if self.patch == 0 || self.batch_size == 0 {
            return bad("patch and batch_size must be positive".into());
        }
        if self.crop_size == Some(0) {
            return bad("crop_size must be positive".into());
        }
        if let Some(c) = self.crop_size {
            if c % self.patch != 0 {
                return bad(format!("crop_size {c} is not a multiple of patch {}", self.patch));
            }
        }
        if !(self.optimizer.lr > 0.0 && self.optimizer.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.optimizer.lr));
        }
        self.ssim.validate()
    }
}

/// `batch_size` timesteps drawn i.i.d. from `{1, …, max_t}`, or `fixed_t`
/// repeated.
pub fn sample_timesteps<R: Rng + ?Sized>(
    batch_size: usize,
    max_t: usize,
    rng: &mut R,
    fixed_t: Option<usize>,
) -> Result<Vec<usize>> {
    if max_t == 0 {
        return Err(Error::Config("max_t must be >= 1".into()));
    }
    match fixed_t {
        Some(t) if !(1..=max_t).contains(&t) => Err(Error::Range(format!("fixed_t = {t} outside [1, {max_t}]"))),
        Some(t) => Ok(vec![t; batch_size]),
        None => Ok((0..batch_size).map(|_| rng.random_range(1..=max_t)).collect()),
    }
}

/// Which corruption produced the network input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorruptionPath {
    Mask,
    Diffuse,
}

#[derive(Debug, Clone)]
pub struct StepReport {
    /// 1-based iteration number.
    pub step: usize,
    pub loss: f64,
    pub timesteps: Vec<usize>,
    pub path: CorruptionPath,
    /// False when the loss was non-finite and the update was skipped.
    pub updated: bool,
}

/// Model, optimizer and schedule for one pre-training run.
pub struct Trainer {
    config: PretrainConfig,
    model: UNet,
    optimizer: Adam,
    schedule: DiffusionSchedule,
    step: usize,
    nonfinite_run: usize,
    mask_calls: usize,
    diffuse_calls: usize,
}

impl Trainer {
    /// Fresh model initialized from `rng::stream(seed, "init", 0)`.
    pub fn new(config: PretrainConfig, unet: UNetConfig) -> Result<Self> {
        config.validate()?;
        let model = UNet::new(unet, &mut rng::stream(config.seed, "init", 0))?;
        let optimizer = Adam::new(config.optimizer, model.params())?;
        let schedule = make_beta_schedule(config.max_t, config.schedule)?;
        Ok(Self {
            config,
            model,
            optimizer,
            schedule,
            step: 0,
            nonfinite_run: 0,
            mask_calls: 0,
            diffuse_calls: 0,
        })
    }

    /// Restores model, optimizer moments and step counter.
    pub fn from_checkpoint(config: PretrainConfig, ck: &UNetCheckpoint, path: &Path) -> Result<Self> {
        config.validate()?;
        let stored: PretrainConfig = parse_meta(path, &ck.meta, "pretrain_config")?;
        let comparable = |c: &PretrainConfig| PretrainConfig {
            iterations: 0,
            checkpoint_every: 0,
            ..c.clone()
        };
        if comparable(&stored) != comparable(&config) {
            return Err(Error::Config(format!(
                "{} was trained with a different configuration; only iterations and checkpoint_every may change on resume",
                path.display()
            )));
        }
        let step: usize = parse_meta(path, &ck.meta, "step")?;
        let nonfinite_run: usize = parse_meta(path, &ck.meta, "nonfinite_run")?;
        let model = ck.build_model()?;
        let mut optimizer = Adam::new(config.optimizer, model.params())?;
        let updates: usize = parse_meta(path, &ck.meta, "optimizer_steps")?;
        optimizer.restore(updates, &ck.extra)?;
        Ok(Self {
            config,
            model,
            optimizer,
            schedule: ck.schedule.clone(),
            step,
            nonfinite_run,
            mask_calls: 0,
            diffuse_calls: 0,
        })
    }

    pub fn config(&self) -> &PretrainConfig {
        &self.config
    }

    pub fn model(&self) -> &UNet {
        &self.model
    }

    pub fn into_model(self) -> UNet {
        self.model
    }

    pub fn schedule(&self) -> &DiffusionSchedule {
        &self.schedule
    }

    /// Iterations run so far, including skipped non-finite ones.
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn optimizer_steps(&self) -> usize {
        self.optimizer.steps_taken()
    }

    /// How many times `(mask_image, diffuse)` were invoked by this trainer.
    pub fn corruption_calls(&self) -> (usize, usize) {
        (self.mask_calls, self.diffuse_calls)
    }

    pub fn train_step<R: Rng + ?Sized>(&mut self, batch: &[ImageTensor], rng: &mut R) -> Result<StepReport> {
        match self.config.method {
            Method::Mdm => self.train_step_mdm(batch, rng),
            Method::Ddpm => self.train_step_ddpm(batch, rng),
        }
    }

    /// Masks each image at its own timestep and regresses the clean image.
    pub fn train_step_mdm<R: Rng + ?Sized>(&mut self, batch: &[ImageTensor], rng: &mut R) -> Result<StepReport> {
        if self.config.method != Method::Mdm {
            return Err(Error::Config("train_step_mdm called on a ddpm configuration".into()));
        }
        let ts = sample_timesteps(batch.len(), self.config.max_t, rng, self.config.fixed_t)?;
        let mut masked = Vec::with_capacity(batch.len());
        for (img, &t) in batch.iter().zip(&ts) {
            self.mask_calls += 1;
            masked.push(mask_image(img, t, self.config.max_t, self.config.patch, rng)?.0);
        }
        self.update(batch, &masked, None, ts, CorruptionPath::Mask)
    }

    /// Diffuses each image and regresses the noise or the clean image.
    pub fn train_step_ddpm<R: Rng + ?Sized>(&mut self, batch: &[ImageTensor], rng: &mut R) -> Result<StepReport> {
        let ts = sample_timesteps(batch.len(), self.config.max_t, rng, self.config.fixed_t)?;
        let mut noisy = Vec::with_capacity(batch.len());
        let mut noise = Vec::with_capacity(batch.len());
        for (img, &t) in batch.iter().zip(&ts) {
            self.diffuse_calls += 1;
            let (x, eps) = diffuse(img, t, &self.schedule, rng)?;
            noisy.push(x);
            noise.push(eps);
        }
        self.update(batch, &noisy, Some(&noise), ts, CorruptionPath::Diffuse)
    }

    /// DDPM step with caller-chosen timesteps and noise.
    pub fn train_step_ddpm_with_noise(
        &mut self,
        batch: &[ImageTensor],
        timesteps: &[usize],
        noise: &[ImageTensor],
    ) -> Result<StepReport> {
        if timesteps.len() != batch.len() || noise.len() != batch.len() {
            return Err(Error::Dimension("batch, timesteps and noise lengths differ".into()));
        }
        let mut noisy = Vec::with_capacity(batch.len());
        for ((img, &t), eps) in batch.iter().zip(timesteps).zip(noise) {
            self.diffuse_calls += 1;
            noisy.push(diffuse_with_noise(img, t, &self.schedule, eps)?);
        }
        self.update(batch, &noisy, Some(noise), timesteps.to_vec(), CorruptionPath::Diffuse)
    }

    fn update(
        &mut self,
        clean: &[ImageTensor],
        corrupted: &[ImageTensor],
        noise: Option<&[ImageTensor]>,
        timesteps: Vec<usize>,
        path: CorruptionPath,
    ) -> Result<StepReport> {
        if self.config.method == Method::Ddpm && path == CorruptionPath::Mask
            || self.config.method == Method::Mdm && path == CorruptionPath::Diffuse
        {
            return Err(Error::Config(format!("{:?} run cannot use the {path:?} corruption", self.config.method)));
        }
        let device = self.model.params().device().clone();
        let input = stack(corrupted, &device)?;
        let target: Tensor = match (self.config.target, noise) {
            (Target::Noise, Some(eps)) => stack(eps, &device)?,
            (Target::Noise, None) => return Err(Error::Config("noise target without noise".into())),
            (Target::Image, _) => stack(clean, &device)?,
        };
        let pred = self.model.forward(&input, &timesteps)?;
        let loss = match self.config.loss {
            LossKind::Ssim => ssim_loss_tensor(&target, &pred, &self.config.ssim)?,
            LossKind::Mse => mse_tensor(&pred, &target)?,
        };
        let value = loss.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        self.step += 1;
        let updated = value.is_finite();
        if updated {
            let grads = loss.backward()?;
            self.optimizer.step(self.model.params(), &grads)?;
            self.nonfinite_run = 0;
        } else {
            self.nonfinite_run += 1;
            log::warn!("step {}: non-finite loss {value}, update skipped", self.step);
            if self.nonfinite_run >= DIVERGENCE_PATIENCE {
                return Err(Error::Divergence {
                    step: self.step,
                    detail: format!(
                        "loss {value} for {} consecutive steps; last timesteps {timesteps:?}; {} optimizer updates applied",
                        self.nonfinite_run,
                        self.optimizer.steps_taken()
                    ),
                });
            }
        }
        Ok(StepReport {
            step: self.step,
            loss: value,
            timesteps,
            path,
            updated,
        })
    }

    /// Snapshot including optimizer moments and step counters.
    pub fn checkpoint(&self) -> Result<UNetCheckpoint> {
        let mut ck = UNetCheckpoint::from_model(&self.model, &self.schedule)?;
        ck.extra = self.optimizer.state_tensors()?;
        ck.meta.insert("step".into(), self.step.to_string());
        ck.meta.insert("optimizer_steps".into(), self.optimizer.steps_taken().to_string());
        ck.meta.insert("nonfinite_run".into(), self.nonfinite_run.to_string());
        ck.meta.insert("pretrain_config".into(), meta_json(&self.config)?);
        Ok(ck)
    }
}

fn stack(images: &[ImageTensor], device: &candle_core::Device) -> Result<Tensor> {
    ImageTensor::batch_to_tensor(&images.iter().collect::<Vec<_>>(), device)
}

/// Draws the iteration's batch: uniform indices with replacement, then the
/// optional random crop and the random horizontal flip.
pub fn sample_batch<R: Rng + ?Sized>(
    images: &[ImageTensor],
    config: &PretrainConfig,
    rng: &mut R,
) -> Result<Vec<ImageTensor>> {
    if images.is_empty() {
        return Err(Error::Data("pre-training needs at least one image".into()));
    }
    (0..config.batch_size)
        .map(|_| {
            let mut img = images[rng.random_range(0..images.len())].clone();
            if let Some(size) = config.crop_size {
                img = random_crop(&img, None, size, rng)?.0;
            }
            if config.flip {
                img = random_flip(&img, None, rng).0;
            }
            Ok(img)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub iteration: usize,
    pub loss: f64,
    pub wall_time: f64,
}

pub const LOSS_LOG: &str = "loss_log.csv";
pub const FINAL_CHECKPOINT: &str = "checkpoint.safetensors";

pub fn read_loss_log(path: &Path) -> Result<Vec<LossRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::format(path, e))?;
    reader
        .deserialize()
        .map(|r| r.map_err(|e| Error::format(path, e)))
        .collect()
}

fn write_loss_rows(writer: &mut csv::Writer<fs::File>, path: &Path, rows: &[LossRow]) -> Result<()> {
    for r in rows {
        writer.serialize(r).map_err(|e| Error::format(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

pub fn intermediate_checkpoint(out_dir: &Path, step: usize) -> PathBuf {
    out_dir.join("checkpoints").join(format!("step_{step:06}.safetensors"))
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
    pub losses: Vec<f64>,
    pub optimizer_steps: usize,
}

/// Runs (or resumes) pre-training, writing `loss_log.csv`, periodic
/// checkpoints and the final `checkpoint.safetensors` under `out_dir`.
pub fn pretrain(
    config: &PretrainConfig,
    unet: &UNetConfig,
    images: &[ImageTensor],
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<PretrainOutcome> {
    config.validate()?;
    if images.is_empty() {
        return Err(Error::Data("pre-training needs at least one image".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join(LOSS_LOG);

    let (mut trainer, history) = match resume {
        Some(ck_path) => {
            let ck = UNetCheckpoint::load(ck_path)?;
            let trainer = Trainer::from_checkpoint(config.clone(), &ck, ck_path)?;
            let mut rows = if log_path.is_file() { read_loss_log(&log_path)? } else { Vec::new() };
            rows.retain(|r| r.iteration <= trainer.step());
            if rows.len() != trainer.step() {
                return Err(Error::Data(format!(
                    "{} holds {} rows up to step {}, cannot resume",
                    log_path.display(),
                    rows.len(),
                    trainer.step()
                )));
            }
            (trainer, rows)
        }
        None => (Trainer::new(config.clone(), unet.clone())?, Vec::new()),
    };

    let mut writer = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(&log_path)
        .map_err(|e| Error::format(&log_path, e))?;
    writer
        .write_record(["iteration", "loss", "wall_time"])
        .map_err(|e| Error::format(&log_path, e))?;
    write_loss_rows(&mut writer, &log_path, &history)?;
    let mut losses: Vec<f64> = history.iter().map(|r| r.loss).collect();
    let wall_offset = history.last().map_or(0.0, |r| r.wall_time);
    let start = Instant::now();

    for k in trainer.step()..config.iterations {
        let mut rng = rng::stream(config.seed, "pretrain", k as u64);
        let batch = sample_batch(images, config, &mut rng)?;
        let report = trainer.train_step(&batch, &mut rng);
        let report = match report {
            Ok(r) => r,
            Err(e) => {
                writer.flush().map_err(|io| Error::io(&log_path, io))?;
                return Err(e);
            }
        };
        let row = LossRow {
            iteration: report.step,
            loss: report.loss,
            wall_time: wall_offset + start.elapsed().as_secs_f64(),
        };
        writer.serialize(row).map_err(|e| Error::format(&log_path, e))?;
        losses.push(report.loss);
        if report.step % 100 == 0 {
            log::info!("step {}/{}: loss {:.5}", report.step, config.iterations, report.loss);
        }
        if config.checkpoint_every > 0 && report.step % config.checkpoint_every == 0 {
            writer.flush().map_err(|e| Error::io(&log_path, e))?;
            trainer.checkpoint()?.save(&intermediate_checkpoint(out_dir, report.step))?;
        }
    }
    writer.flush().map_err(|e| Error::io(&log_path, e))?;
    let checkpoint = out_dir.join(FINAL_CHECKPOINT);
    trainer.checkpoint()?.save(&checkpoint)?;
    Ok(PretrainOutcome {
        checkpoint,
        loss_log: log_path,
        losses,
        optimizer_steps: trainer.optimizer_steps(),
    })
}

/// Masks `image` at timestep `t` and runs one forward pass.
/// Returns `(masked input, reconstruction)`.
pub fn reconstruct<R: Rng + ?Sized>(
    model: &UNet,
    image: &ImageTensor,
    t: usize,
    max_t: usize,
    patch: usize,
    rng: &mut R,
) -> Result<(ImageTensor, ImageTensor)> {
    let (masked, _) = mask_image(image, t, max_t, patch, rng)?;
    let recon = model.predict(&[&masked], &[t])?.remove(0);
    Ok((masked, recon))
}

/// Grid with one row per image: the original followed by a masked input and
/// its reconstruction for every timestep in `ts`.
pub fn reconstruction_preview(
    model: &UNet,
    images: &[ImageTensor],
    ts: &[usize],
    max_t: usize,
    patch: usize,
    seed: u64,
) -> Result<ImageTensor> {
    let mut rows = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        let mut row = vec![img.clone()];
        for &t in ts {
            let mut rng = rng::stream(seed, "reconstruct", (i * ts.len()) as u64 + t as u64);
            let (m, r) = reconstruct(model, img, t, max_t, patch, &mut rng)?;
            row.push(m);
            row.push(r.map(|v| v.clamp(-1.0, 1.0)));
        }
        rows.push(row);
    }
    tile(&rows, 2)
}

/// Lays out equally sized images in a grid separated by `gap` white pixels.
pub fn tile(rows: &[Vec<ImageTensor>], gap: usize) -> Result<ImageTensor> {
    let first = rows
        .first()
        .and_then(|r| r.first())
        .ok_or_else(|| Error::Dimension("nothing to tile".into()))?;
    let (h, w, c) = first.shape();
    let ncols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let (gh, gw) = (rows.len() * (h + gap) - gap, ncols * (w + gap) - gap);
    let mut out = ImageTensor::filled(gh, gw, c, 1.0);
    for (r, row) in rows.iter().enumerate() {
        for (col, img) in row.iter().enumerate() {
            if img.shape() != (h, w, c) {
                return Err(Error::Dimension("tiled images differ in shape".into()));
            }
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        out.set(r * (h + gap) + y, col * (w + gap) + x, ch, img.get(y, x, ch));
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn micro() -> UNetConfig {
        UNetConfig {
            image_size: 16,
            in_channels: 3,
            out_channels: 3,
            base_width: 8,
            channel_mult: vec![1, 2],
            num_res_blocks: 1,
            attention_resolutions: vec![8],
            head_channels: 8,
            norm_groups: 4,
            time_embed_dim: 16,
        }
    }

    fn small_config(method: Method) -> PretrainConfig {
        PretrainConfig {
            method,
            max_t: 100,
            patch: 4,
            batch_size: 2,
            iterations: 6,
            optimizer: AdamConfig::with_lr(1e-3),
            seed: 3,
            ..PretrainConfig::default()
        }
    }

    fn images(n: usize) -> Vec<ImageTensor> {
        (0..n)
            .map(|i| ImageTensor::from_fn(16, 16, 3, |y, x, c| ((y * 3 + x * 5 + c * 7 + i) % 11) as f64 / 5.0 - 1.0))
            .collect()
    }

    #[test]
    fn fixed_and_degenerate_timesteps() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_timesteps(5, 1000, &mut rng, Some(50)).unwrap(), vec![50; 5]);
        assert_eq!(sample_timesteps(4, 1, &mut rng, None).unwrap(), vec![1; 4]);
        assert!(matches!(sample_timesteps(4, 10, &mut rng, Some(0)), Err(Error::Range(_))));
        assert!(matches!(sample_timesteps(4, 10, &mut rng, Some(11)), Err(Error::Range(_))));
        assert!(sample_timesteps(4, 0, &mut rng, None).is_err());
        let t = sample_timesteps(500, 7, &mut rng, None).unwrap();
        assert!(t.iter().all(|&v| (1..=7).contains(&v)));
    }

    #[test]
    fn config_invariants() {
        let mut c = PretrainConfig {
            target: Target::Noise,
            ..PretrainConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.method = Method::Ddpm;
        assert!(c.validate().is_err(), "noise target with ssim");
        c.loss = LossKind::Mse;
        c.validate().unwrap();
        c.fixed_t = Some(0);
        assert!(c.validate().is_err());
        c.fixed_t = Some(1001);
        assert!(c.validate().is_err());
        c.fixed_t = Some(1000);
        c.validate().unwrap();
        let parsed: std::result::Result<PretrainConfig, _> = toml::from_str("bogus = 1");
        assert!(parsed.is_err());
        let parsed: PretrainConfig = toml::from_str("method = \"ddpm\"\nfixed_t = 250\n[optimizer]\nlr = 0.001\n").unwrap();
        assert_eq!((parsed.method, parsed.fixed_t, parsed.optimizer.lr), (Method::Ddpm, Some(250), 1e-3));
    }

    #[test]
    fn mdm_step_loss_in_unit_interval_and_deterministic() {
        let data = images(4);
        let run = || {
            let mut tr = Trainer::new(small_config(Method::Mdm), micro()).unwrap();
            (0..4)
                .map(|k| {
                    let mut rng = rng::stream(3, "pretrain", k);
                    let batch = sample_batch(&data, tr.config(), &mut rng).unwrap();
                    tr.train_step(&batch, &mut rng).unwrap().loss
                })
                .collect::<Vec<_>>()
        };
        let a = run();
        assert!(a.iter().all(|l| (0.0..=1.0).contains(l)), "{a:?}");
        assert_eq!(a, run());
    }

    #[test]
    fn corruption_paths_are_pure() {
        let data = images(2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut mdm = Trainer::new(small_config(Method::Mdm), micro()).unwrap();
        let r = mdm.train_step(&data, &mut rng).unwrap();
        assert_eq!(r.path, CorruptionPath::Mask);
        assert_eq!(mdm.corruption_calls(), (2, 0));
        let cfg = PretrainConfig {
            loss: LossKind::Mse,
            target: Target::Noise,
            ..small_config(Method::Ddpm)
        };
        let mut ddpm = Trainer::new(cfg, micro()).unwrap();
        let r = ddpm.train_step(&data, &mut rng).unwrap();
        assert_eq!(r.path, CorruptionPath::Diffuse);
        assert_eq!(ddpm.corruption_calls(), (0, 2));
        assert!(ddpm.train_step_mdm(&data, &mut rng).is_err());
    }

    #[test]
    fn ddpm_noise_loss_compares_against_the_drawn_noise() {
        let data = images(2);
        let cfg = PretrainConfig {
            loss: LossKind::Mse,
            target: Target::Noise,
            ..small_config(Method::Ddpm)
        };
        let mut tr = Trainer::new(cfg, micro()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let eps: Vec<ImageTensor> = data
            .iter()
            .map(|d| d.map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)))
            .collect();
        let ts = [10, 70];
        let noisy: Vec<ImageTensor> = data
            .iter()
            .zip(&ts)
            .zip(&eps)
            .map(|((d, &t), e)| diffuse_with_noise(d, t, tr.schedule(), e).unwrap())
            .collect();
        let pred = tr.model().predict(&noisy.iter().collect::<Vec<_>>(), &ts).unwrap();
        let n: usize = pred.iter().map(ImageTensor::len).sum();
        let oracle: f64 = pred
            .iter()
            .zip(&eps)
            .flat_map(|(p, e)| p.data().iter().zip(e.data()).map(|(a, b)| (a - b).powi(2)))
            .sum::<f64>()
            / n as f64;
        let r = tr.train_step_ddpm_with_noise(&data, &ts, &eps).unwrap();
        assert!((r.loss - oracle).abs() < 1e-4 * oracle.max(1.0), "{} vs {oracle}", r.loss);
    }

    #[test]
    fn divergence_guard_skips_then_aborts() {
        let mut data = images(2);
        data[0].data_mut()[0] = f64::NAN;
        let mut tr = Trainer::new(small_config(Method::Mdm), micro()).unwrap();
        let before = tr.model().params().digest().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..DIVERGENCE_PATIENCE - 1 {
            let r = tr.train_step(&data, &mut rng).unwrap();
            assert!(!r.updated && r.loss.is_nan());
        }
        assert_eq!(tr.model().params().digest().unwrap(), before);
        match tr.train_step(&data, &mut rng) {
            Err(Error::Divergence { step, .. }) => assert_eq!(step, DIVERGENCE_PATIENCE),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn zero_iterations_saves_the_initialization() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PretrainConfig {
            iterations: 0,
            ..small_config(Method::Mdm)
        };
        let out = pretrain(&cfg, &micro(), &images(2), dir.path(), None).unwrap();
        let init = UNet::new(micro(), &mut rng::stream(cfg.seed, "init", 0)).unwrap();
        let saved = UNetCheckpoint::load(&out.checkpoint).unwrap().build_model().unwrap();
        assert_eq!(saved.params().digest().unwrap(), init.params().digest().unwrap());
        assert!(read_loss_log(&out.loss_log).unwrap().is_empty());
    }

    #[test]
    fn reconstruct_at_t0_keeps_input() {
        let model = UNet::new(micro(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let img = &images(1)[0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (masked, recon) = reconstruct(&model, img, 0, 100, 4, &mut rng).unwrap();
        assert_eq!(&masked, img);
        assert_eq!(recon.shape(), img.shape());
        let grid = reconstruction_preview(&model, &images(2), &[0, 50], 100, 4, 1).unwrap();
        assert_eq!(grid.shape(), (16 * 2 + 2, 16 * 5 + 2 * 4, 3));
    }
}
