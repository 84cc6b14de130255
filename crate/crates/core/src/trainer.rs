//! Mini-batch Adam training with a two-phase learning-rate schedule,
//! per-epoch validation, resumable checkpoints and the loss ablation.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::dataset::{Dataset, Patch};
use crate::error::{Error, Result};
use crate::image::AmplitudeImage;
use crate::loss::{grad_loss, total_loss, LossBreakdown, LossWeights, Variant};
use crate::metrics::{dkl_ratio, mse, snr, ssim, RatioImage};
use crate::nn::weights::{atomic_write, read_adam, write_adam};
use crate::nn::{adam_step, load_weights, save_weights, AdamConfig, AdamState, MonetModel, Tensor4};
use crate::rng::{derive_seed, seeded};

const STREAM_INIT: u64 = 11;
const STREAM_SHUFFLE: u64 = 12;

pub const CHECKPOINT_WEIGHTS: &str = "model.monw";
pub const CHECKPOINT_ADAM: &str = "adam.mona";
pub const CHECKPOINT_MANIFEST: &str = "checkpoint.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub width: usize,
    pub batch_size: usize,
    pub epochs_phase1: usize,
    pub epochs_phase2: usize,
    pub lr_phase1: f64,
    pub lr_phase2: f64,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub seed: u64,
    /// Checkpoint cadence in optimizer steps; 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    pub checkpoint_dir: Option<PathBuf>,
    /// Stop after this many optimizer steps even if epochs remain.
    pub max_steps: Option<u64>,
    pub validate_each_epoch: bool,
}

impl TrainConfig {
    /// Full-scale schedule: width 64, batch 128, 87 epochs at 1e-4 then 35 at 1e-5.
    pub fn full_scale() -> Self {
        Self {
            width: crate::nn::FULL_WIDTH,
            batch_size: 128,
            epochs_phase1: 87,
            epochs_phase2: 35,
            lr_phase1: 1e-4,
            lr_phase2: 1e-5,
            adam: AdamConfig::default(),
            weights: LossWeights::default(),
            seed: 0,
            checkpoint_every: 0,
            checkpoint_dir: None,
            max_steps: None,
            validate_each_epoch: true,
        }
    }

    /// Single-CPU schedule: width 16, batch 16, 10 + 5 epochs with the same 10:1 drop.
    pub fn desk() -> Self {
        Self {
            width: crate::nn::DESK_WIDTH,
            batch_size: 16,
            epochs_phase1: 10,
            epochs_phase2: 5,
            lr_phase1: 1e-3,
            lr_phase2: 1e-4,
            ..Self::full_scale()
        }
    }

    pub fn epochs(&self) -> usize {
        self.epochs_phase1 + self.epochs_phase2
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.batch_size == 0 || self.epochs() == 0 {
            return Err(Error::Config("width, batch size and epoch count must be positive".into()));
        }
        if !(self.lr_phase1 > 0.0 && self.lr_phase2 > 0.0) || !self.lr_phase1.is_finite() || !self.lr_phase2.is_finite() {
            return Err(Error::Config("learning rates must be finite and positive".into()));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(Error::Config("Adam betas must lie in [0,1) and eps must be positive".into()));
        }
        self.weights.validate()
    }

    /// Learning rate used during `epoch` (0-based).
    pub fn lr_for_epoch(&self, epoch: usize) -> f64 {
        if epoch < self.epochs_phase1 {
            self.lr_phase1
        } else {
            self.lr_phase2
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    /// Seconds since the start of this run.
    pub elapsed: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Validation {
    pub loss: LossBreakdown,
    pub ssim: f64,
    pub mse: f64,
    /// MSE of the noisy inputs against the references, as a baseline.
    pub noisy_mse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub validation: Option<Validation>,
    pub elapsed: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    /// `step,l2,kl,grad,total,lr`.
    pub fn steps_csv(&self) -> String {
        let mut s = String::from("step,l2,kl,grad,total,lr\n");
        for r in &self.steps {
            let l = &r.loss;
            let _ = writeln!(s, "{},{},{},{},{},{}", r.step, l.l2, l.kl, l.grad, l.total, r.lr);
        }
        s
    }

    /// `epoch,step,val_total,val_l2,val_kl,val_grad,val_ssim,val_mse,noisy_mse`.
    pub fn epochs_csv(&self) -> String {
        let mut s = String::from("epoch,step,val_total,val_l2,val_kl,val_grad,val_ssim,val_mse,noisy_mse\n");
        for e in &self.epochs {
            match &e.validation {
                Some(v) => {
                    let _ = writeln!(
                        s,
                        "{},{},{},{},{},{},{},{},{}",
                        e.epoch, e.step, v.loss.total, v.loss.l2, v.loss.kl, v.loss.grad, v.ssim, v.mse, v.noisy_mse
                    );
                }
                None => {
                    let _ = writeln!(s, "{},{},,,,,,,", e.epoch, e.step);
                }
            }
        }
        s
    }
}

fn batch_tensors(patches: &[&Patch]) -> Result<(Tensor4<f32>, Tensor4<f32>)> {
    let noisy: Vec<&AmplitudeImage> = patches.iter().map(|p| &p.noisy).collect();
    let clean: Vec<&AmplitudeImage> = patches.iter().map(|p| &p.clean).collect();
    Ok((Tensor4::from_images(&noisy)?, Tensor4::from_images(&clean)?))
}

/// Optimizer state and progress of one training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: MonetModel<f32>,
    pub adam: AdamState<f32>,
    pub step: u64,
    /// Epoch and learning rate of the most recent step.
    pub epoch: usize,
    pub lr: f64,
    cfg: TrainConfig,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = MonetModel::new(cfg.width, derive_seed(cfg.seed, STREAM_INIT))?;
        let adam = AdamState::for_params(&model.param_slices());
        let lr = cfg.lr_phase1;
        Ok(Self { model, adam, step: 0, epoch: 0, lr, cfg })
    }

    /// Resumes from a checkpoint directory written by [`Trainer::save_checkpoint`].
    pub fn from_checkpoint(dir: &Path, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = load_weights(&dir.join(CHECKPOINT_WEIGHTS))?;
        if model.width() != cfg.width {
            return Err(Error::Config(format!(
                "checkpoint width {} does not match configured width {}",
                model.width(),
                cfg.width
            )));
        }
        let adam_path = dir.join(CHECKPOINT_ADAM);
        let bytes = fs::read(&adam_path).map_err(|e| Error::ingest(&adam_path, e))?;
        let adam = read_adam(bytes.as_slice())?;
        let shapes: Vec<usize> = model.param_slices().iter().map(|s| s.len()).collect();
        if adam.m.iter().map(|m| m.len()).collect::<Vec<_>>() != shapes {
            return Err(Error::Format("optimizer state does not match the model".into()));
        }
        let step = adam.step;
        let lr = cfg.lr_phase1;
        Ok(Self { model, adam, step, epoch: 0, lr, cfg })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn steps_per_epoch(&self, n_train: usize) -> Result<u64> {
        if n_train < self.cfg.batch_size {
            return Err(Error::Config(format!(
                "{n_train} training patches cannot fill one batch of {}",
                self.cfg.batch_size
            )));
        }
        // the last partial batch is dropped
        Ok((n_train / self.cfg.batch_size) as u64)
    }

    /// Seeded permutation of the training set for `epoch`.
    pub fn epoch_order(&self, epoch: usize, n_train: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n_train).collect();
        order.shuffle(&mut seeded(derive_seed(derive_seed(self.cfg.seed, STREAM_SHUFFLE), epoch as u64)));
        order
    }

    /// Forward, loss, backward and one Adam update.
    pub fn train_step(&mut self, noisy: &Tensor4<f32>, clean: &Tensor4<f32>, lr: f64) -> Result<LossBreakdown> {
        let step = self.step;
        let (out, cache) = self.model.forward_train(noisy).map_err(|e| match e {
            Error::NonFinite(m) => Error::NonFinite(format!("step {step}: {m}")),
            other => other,
        })?;
        let (loss, grad) = total_loss(&out, clean, noisy, &self.cfg.weights)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss at step {}: l2={} kl={} grad={} total={}",
                self.step, loss.l2, loss.kl, loss.grad, loss.total
            )));
        }
        let (grads, _) = self.model.backward(cache, &grad, false)?;
        if !grads.all_finite() {
            return Err(Error::NonFinite(format!("parameter gradient at step {}", self.step)));
        }
        let mut params = self.model.param_slices_mut();
        adam_step(&mut params, &grads.slices, &mut self.adam, lr, &self.cfg.adam)?;
        self.step += 1;
        Ok(loss)
    }

    /// Trains until the schedule (or `max_steps`) is exhausted, appending to `log`.
    pub fn run(&mut self, ds: &Dataset, log: &mut TrainLog) -> Result<()> {
        let spe = self.steps_per_epoch(ds.train.len())?;
        let total = spe * self.cfg.epochs() as u64;
        let stop = self.cfg.max_steps.map_or(total, |m| m.min(total));
        let start = Instant::now();
        let b = self.cfg.batch_size;
        while self.step < stop {
            let epoch = (self.step / spe) as usize;
            let order = self.epoch_order(epoch, ds.train.len());
            let lr = self.cfg.lr_for_epoch(epoch);
            self.epoch = epoch;
            self.lr = lr;
            while self.step < stop && (self.step / spe) as usize == epoch {
                let k = (self.step % spe) as usize;
                let batch: Vec<&Patch> = order[k * b..(k + 1) * b].iter().map(|&i| &ds.train[i]).collect();
                let (y, x) = batch_tensors(&batch)?;
                let loss = self.train_step(&y, &x, lr)?;
                log.steps.push(StepRecord {
                    step: self.step,
                    epoch,
                    lr,
                    loss,
                    elapsed: start.elapsed().as_secs_f64(),
                });
                if self.cfg.checkpoint_every > 0 && self.step.is_multiple_of(self.cfg.checkpoint_every) {
                    if let Some(dir) = &self.cfg.checkpoint_dir {
                        self.save_checkpoint(dir)?;
                    }
                }
            }
            if self.step.is_multiple_of(spe) {
                let validation = if self.cfg.validate_each_epoch && !ds.val.is_empty() {
                    Some(validate(&self.model, &ds.val, &self.cfg.weights, b)?)
                } else {
                    None
                };
                log.epochs.push(EpochRecord {
                    epoch,
                    step: self.step,
                    validation,
                    elapsed: start.elapsed().as_secs_f64(),
                });
            }
        }
        if let Some(dir) = &self.cfg.checkpoint_dir {
            self.save_checkpoint(dir)?;
        }
        Ok(())
    }

    /// Writes weights, optimizer moments and a text manifest, each atomically.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        save_weights(&self.model, &dir.join(CHECKPOINT_WEIGHTS))?;
        let mut buf = Vec::new();
        write_adam(&self.adam, &mut buf)?;
        atomic_write(&dir.join(CHECKPOINT_ADAM), &buf)?;
        let manifest = format!(
            "step = {}\nepoch = {}\nlr = {}\nwidth = {}\nseed = {}\nlr_phase1 = {}\nlr_phase2 = {}\nepochs_phase1 = {}\nepochs_phase2 = {}\nbatch_size = {}\n",
            self.step,
            self.epoch,
            self.lr,
            self.cfg.width,
            self.cfg.seed,
            self.cfg.lr_phase1,
            self.cfg.lr_phase2,
            self.cfg.epochs_phase1,
            self.cfg.epochs_phase2,
            self.cfg.batch_size
        );
        atomic_write(&dir.join(CHECKPOINT_MANIFEST), manifest.as_bytes())
    }
}

/// Trains a fresh model on `ds` with `cfg`.
pub fn train(ds: &Dataset, cfg: &TrainConfig) -> Result<(MonetModel<f32>, TrainLog)> {
    let mut t = Trainer::new(cfg.clone())?;
    let mut log = TrainLog::default();
    t.run(ds, &mut log)?;
    Ok((t.model, log))
}

/// Inference-phase evaluation over `val` in chunks of `chunk` patches.
/// Loss terms are patch-weighted means of the per-chunk breakdowns.
pub fn validate(model: &MonetModel<f32>, val: &[Patch], weights: &LossWeights, chunk: usize) -> Result<Validation> {
    if val.is_empty() {
        return Err(Error::param("validation set is empty"));
    }
    let mut acc = LossBreakdown {
        lambda_kl: weights.lambda_kl,
        lambda_grad: weights.lambda_grad,
        ..Default::default()
    };
    let (mut s_ssim, mut s_mse, mut s_noisy) = (0.0, 0.0, 0.0);
    for part in val.chunks(chunk.max(1)) {
        let refs: Vec<&Patch> = part.iter().collect();
        let (y, x) = batch_tensors(&refs)?;
        let out = model.infer(&y)?;
        let (l, _) = total_loss(&out, &x, &y, weights)?;
        let f = part.len() as f64;
        acc.l2 += f * l.l2;
        acc.kl += f * l.kl;
        acc.grad += f * l.grad;
        acc.total += f * l.total;
        for (p, est) in part.iter().zip(out.to_images()?) {
            s_ssim += ssim(&est, &p.clean)?;
            s_mse += mse(&est, &p.clean)?;
            s_noisy += mse(&p.noisy, &p.clean)?;
        }
    }
    let n = val.len() as f64;
    acc.l2 /= n;
    acc.kl /= n;
    acc.grad /= n;
    acc.total /= n;
    Ok(Validation {
        loss: acc,
        ssim: s_ssim / n,
        mse: s_mse / n,
        noisy_mse: s_noisy / n,
    })
}

/// Quality of one ablation variant on a set of `(clean, noisy)` images.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantScore {
    pub ssim: f64,
    pub snr: f64,
    pub mse: f64,
    /// Base-2 D_KL of the pooled ratio pixels against Rayleigh.
    pub d_kl: f64,
    /// Mean gradient-domain error.
    pub grad_loss: f64,
}

pub fn score_model(model: &MonetModel<f32>, scenes: &[(AmplitudeImage, AmplitudeImage)]) -> Result<VariantScore> {
    if scenes.is_empty() {
        return Err(Error::param("no scenes to score"));
    }
    let (mut s, mut sn, mut m, mut g) = (0.0, 0.0, 0.0, 0.0);
    let mut ratio_px = Vec::new();
    for (clean, noisy) in scenes {
        let est = model.denoise(noisy, usize::MAX)?;
        s += ssim(&est, clean)?;
        sn += snr(&est, clean)?;
        m += mse(&est, clean)?;
        let e = Tensor4::<f64>::from_images(&[&est])?;
        let c = Tensor4::<f64>::from_images(&[clean])?;
        g += grad_loss(&e, &c)?.0;
        ratio_px.extend_from_slice(RatioImage::from_pair(noisy, &est)?.pixels());
    }
    let n = scenes.len() as f64;
    let pooled = AmplitudeImage::new(1, ratio_px.len(), ratio_px)?;
    Ok(VariantScore {
        ssim: s / n,
        snr: sn / n,
        mse: m / n,
        d_kl: dkl_ratio(&RatioImage::from_image(pooled))?,
        grad_loss: g / n,
    })
}

pub struct AblationRun {
    pub variant: Variant,
    pub model: MonetModel<f32>,
    pub log: TrainLog,
    pub score: VariantScore,
}

/// Trains the four loss variants with identical seed and data order and
/// scores each on `scenes` (the validation patches when `scenes` is empty).
pub fn run_ablation(ds: &Dataset, cfg: &TrainConfig, scenes: &[(AmplitudeImage, AmplitudeImage)]) -> Result<Vec<AblationRun>> {
    let fallback: Vec<(AmplitudeImage, AmplitudeImage)>;
    let scenes = if scenes.is_empty() {
        fallback = ds.val.iter().map(|p| (p.clean.clone(), p.noisy.clone())).collect();
        &fallback
    } else {
        scenes
    };
    Variant::ALL
        .iter()
        .map(|&variant| {
            let vcfg = TrainConfig {
                weights: cfg.weights.with_variant(variant),
                checkpoint_dir: cfg.checkpoint_dir.as_ref().map(|d| d.join(variant.to_string())),
                ..cfg.clone()
            };
            let (model, log) = train(ds, &vcfg)?;
            let score = score_model(&model, scenes)?;
            Ok(AblationRun { variant, model, log, score })
        })
        .collect()
}

/// `variant,ssim,snr,mse,d_kl,grad_loss` rows.
pub fn ablation_table(runs: &[AblationRun]) -> String {
    let mut s = String::from("variant,ssim,snr,mse,d_kl,grad_loss\n");
    for r in runs {
        let v = &r.score;
        let _ = writeln!(s, "{},{},{},{},{},{}", r.variant, v.ssim, v.snr, v.mse, v.d_kl, v.grad_loss);
    }
    s
}
