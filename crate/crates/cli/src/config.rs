//! Flat `key = value` run configuration shared by every subcommand.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use monet::dataset::{DatasetSpec, Source};
use monet::detect::{Combine, DetectConfig};
use monet::loss::KlPooling;
use monet::metrics::EvalConfig;
use monet::speckle::parse_recipe;
use monet::trainer::TrainConfig;
use monet::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// `synthetic` or a directory of source images.
    pub source: String,
    pub recipe: String,
    pub images: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub stride: usize,
    pub looks: u32,
    pub train_fraction: f64,
    pub val_fraction: f64,
    /// 0 keeps every extracted patch.
    pub max_patches: usize,
    pub train: TrainConfig,
    pub detect: DetectConfig,
    pub eval: EvalConfig,
    /// Memory budget for whole-image inference before tiling kicks in.
    pub infer_budget_mb: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            source: "synthetic".into(),
            recipe: "mosaic".into(),
            images: 8,
            image_size: 256,
            patch_size: 32,
            stride: 32,
            looks: 1,
            train_fraction: 0.8,
            val_fraction: 0.2,
            max_patches: 0,
            train: TrainConfig::desk(),
            detect: DetectConfig::default(),
            eval: EvalConfig::default(),
            infer_budget_mb: 512,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse value '{value}' for key '{key}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("key '{key}' expects true or false, got '{value}'"))),
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::ingest(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value'", n + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, strip(e))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "source" => self.source = v.to_string(),
            "recipe" => self.recipe = v.to_string(),
            "images" => self.images = parse(key, v)?,
            "image_size" => self.image_size = parse(key, v)?,
            "patch_size" => self.patch_size = parse(key, v)?,
            "stride" => self.stride = parse(key, v)?,
            "looks" => self.looks = parse(key, v)?,
            "train_fraction" => self.train_fraction = parse(key, v)?,
            "val_fraction" => self.val_fraction = parse(key, v)?,
            "max_patches" => self.max_patches = parse(key, v)?,
            "width" => t.width = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "epochs_phase1" => t.epochs_phase1 = parse(key, v)?,
            "epochs_phase2" => t.epochs_phase2 = parse(key, v)?,
            "lr_phase1" => t.lr_phase1 = parse(key, v)?,
            "lr_phase2" => t.lr_phase2 = parse(key, v)?,
            "beta1" => t.adam.beta1 = parse(key, v)?,
            "beta2" => t.adam.beta2 = parse(key, v)?,
            "adam_eps" => t.adam.eps = parse(key, v)?,
            "checkpoint_every" => t.checkpoint_every = parse(key, v)?,
            "max_steps" => t.max_steps = Some(parse(key, v)?).filter(|&s: &u64| s > 0),
            "validate_each_epoch" => t.validate_each_epoch = parse_bool(key, v)?,
            "lambda_kl" => t.weights.lambda_kl = parse(key, v)?,
            "lambda_grad" => t.weights.lambda_grad = parse(key, v)?,
            "use_kl" => t.weights.use_kl = parse_bool(key, v)?,
            "use_grad" => t.weights.use_grad = parse_bool(key, v)?,
            "kl_pooling" => t.weights.pooling = v.parse::<KlPooling>()?,
            "kl_bins" => t.weights.bins = parse(key, v)?,
            "edge_window" => self.detect.edge_window = parse(key, v)?,
            "edge_threshold" => self.detect.edge_threshold = parse(key, v)?,
            "ks_patch" => self.detect.ks_patch = parse(key, v)?,
            "ks_alpha" => self.detect.ks_alpha = parse(key, v)?,
            "combine" => self.detect.combine = v.parse::<Combine>()?,
            "dilation" => self.detect.dilation = parse(key, v)?,
            "roi_count" => self.eval.roi_count = parse(key, v)?,
            "roi_size" => self.eval.roi_size = parse(key, v)?,
            "permutations" => self.eval.permutations = parse(key, v)?,
            "m_weight_dh" => self.eval.m_weights.delta_h = parse(key, v)?,
            "m_weight_rmu" => self.eval.m_weights.r_mu = parse(key, v)?,
            "m_weight_renl" => self.eval.m_weights.r_enl = parse(key, v)?,
            "infer_budget_mb" => self.infer_budget_mb = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Propagates the master seed into the sub-configurations.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset_spec()?.validate()?;
        self.train_config().validate()?;
        self.detect.validate()?;
        if self.eval.roi_count == 0 || self.eval.roi_size == 0 || self.eval.permutations == 0 {
            return Err(Error::Config("roi_count, roi_size and permutations must be positive".into()));
        }
        if self.infer_budget_mb == 0 {
            return Err(Error::Config("infer_budget_mb must be positive".into()));
        }
        Ok(())
    }

    pub fn dataset_spec(&self) -> Result<DatasetSpec> {
        let source = if self.source == "synthetic" {
            Source::Synthetic {
                recipe: parse_recipe(&self.recipe).map_err(|e| Error::Config(strip(e)))?,
                images: self.images,
                size: self.image_size,
            }
        } else {
            Source::Directory(PathBuf::from(&self.source))
        };
        Ok(DatasetSpec {
            source,
            patch_size: self.patch_size,
            stride: self.stride,
            looks: self.looks,
            train_fraction: self.train_fraction,
            val_fraction: self.val_fraction,
            seed: self.seed,
            max_patches: (self.max_patches > 0).then_some(self.max_patches),
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train.clone() }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig { seed: self.seed, ..self.eval.clone() }
    }

    pub fn infer_budget_bytes(&self) -> usize {
        self.infer_budget_mb.saturating_mul(1 << 20)
    }

    /// Every key with its current value, in a form `parse` accepts.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let w = &t.weights;
        let d = &self.detect;
        let e = &self.eval;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("source", self.source.clone());
        kv("recipe", self.recipe.clone());
        kv("images", self.images.to_string());
        kv("image_size", self.image_size.to_string());
        kv("patch_size", self.patch_size.to_string());
        kv("stride", self.stride.to_string());
        kv("looks", self.looks.to_string());
        kv("train_fraction", self.train_fraction.to_string());
        kv("val_fraction", self.val_fraction.to_string());
        kv("max_patches", self.max_patches.to_string());
        kv("width", t.width.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("epochs_phase1", t.epochs_phase1.to_string());
        kv("epochs_phase2", t.epochs_phase2.to_string());
        kv("lr_phase1", t.lr_phase1.to_string());
        kv("lr_phase2", t.lr_phase2.to_string());
        kv("beta1", t.adam.beta1.to_string());
        kv("beta2", t.adam.beta2.to_string());
        kv("adam_eps", t.adam.eps.to_string());
        kv("checkpoint_every", t.checkpoint_every.to_string());
        kv("max_steps", t.max_steps.unwrap_or(0).to_string());
        kv("validate_each_epoch", t.validate_each_epoch.to_string());
        kv("lambda_kl", w.lambda_kl.to_string());
        kv("lambda_grad", w.lambda_grad.to_string());
        kv("use_kl", w.use_kl.to_string());
        kv("use_grad", w.use_grad.to_string());
        kv("kl_pooling", w.pooling.to_string());
        kv("kl_bins", w.bins.to_string());
        kv("edge_window", d.edge_window.to_string());
        kv("edge_threshold", d.edge_threshold.to_string());
        kv("ks_patch", d.ks_patch.to_string());
        kv("ks_alpha", d.ks_alpha.to_string());
        kv("combine", d.combine.to_string());
        kv("dilation", d.dilation.to_string());
        kv("roi_count", e.roi_count.to_string());
        kv("roi_size", e.roi_size.to_string());
        kv("permutations", e.permutations.to_string());
        kv("m_weight_dh", e.m_weights.delta_h.to_string());
        kv("m_weight_rmu", e.m_weights.r_mu.to_string());
        kv("m_weight_renl", e.m_weights.r_enl.to_string());
        kv("infer_budget_mb", self.infer_budget_mb.to_string());
        s
    }
}

/// Error text without the variant prefix, for re-wrapping.
fn strip(e: Error) -> String {
    match e {
        Error::Config(m) | Error::Parameter(m) => m,
        other => other.to_string(),
    }
}
