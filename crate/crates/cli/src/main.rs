mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use monet::dataset::{build_dataset, read_dataset, write_dataset, Dataset};
use monet::detect::{detect, validate_populations};
use monet::io::{encode_mask_pgm, read_image, write_quicklook, write_sarf};
use monet::metrics::{evaluate, MetricsReport, RatioImage};
use monet::nn::weights::atomic_write;
use monet::nn::{load_weights, save_weights};
use monet::stats::FreryParams;
use monet::trainer::{ablation_table, run_ablation, TrainLog, Trainer};
use monet::{AmplitudeImage, Error, Result};

use config::RunConfig;

/// SAR despeckling toolkit: simulation, training, inference, evaluation and
/// detection of extremely heterogeneous points.
#[derive(Debug, Parser)]
#[command(name = "monet", version)]
struct Cli {
    /// Run configuration file (`key = value` lines).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed; overrides the `seed` key of the configuration.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "monet-out")]
    out: PathBuf,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesize a (noisy, clean) patch dataset.
    Simulate,
    /// Train a model on a dataset directory, or on one built from the configuration.
    Train {
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Continue from OUT/checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Despeckle images; writes the estimate, the ratio image and quicklooks.
    Infer {
        #[arg(long, value_name = "FILE")]
        weights: PathBuf,
        #[arg(required = true, value_name = "IMAGE")]
        inputs: Vec<PathBuf>,
    },
    /// Compute the metric report of a filtered image.
    Eval {
        #[arg(long, value_name = "FILE")]
        noisy: PathBuf,
        #[arg(long, value_name = "FILE")]
        filtered: PathBuf,
        /// Clean reference for SSIM, MSE and SNR.
        #[arg(long, value_name = "FILE")]
        reference: Option<PathBuf>,
        /// Fail unless a reference is given.
        #[arg(long)]
        require_reference: bool,
    },
    /// Flag extremely heterogeneous points from the ratio image.
    Detect {
        #[arg(long, value_name = "FILE")]
        noisy: PathBuf,
        #[arg(long, value_name = "FILE")]
        filtered: PathBuf,
    },
    /// Train the four loss variants and write the comparison table.
    Ablate {
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
    },
}

/// 0 success, 1 usage or configuration, 2 data, 3 numeric failure.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) | Error::Config(_) | Error::Parameter(_) => 1,
        Error::NonFinite(_) | Error::Degenerate(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("monet: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Usage("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Usage(e.to_string()))?;
    }
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(|e| match e {
            Error::Ingestion { path, msg } => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg = cfg.with_seed(s);
    }
    let out = cli.out.as_path();
    fs::create_dir_all(out)?;
    match cli.cmd {
        Command::Simulate => simulate(&cfg, out),
        Command::Train { data, resume } => train(&cfg, out, data.as_deref(), resume),
        Command::Infer { weights, inputs } => infer(&cfg, out, &weights, &inputs),
        Command::Eval {
            noisy,
            filtered,
            reference,
            require_reference,
        } => {
            if require_reference && reference.is_none() {
                return Err(Error::Usage("--require-reference given without --reference".into()));
            }
            eval(&cfg, out, &noisy, &filtered, reference.as_deref())
        }
        Command::Detect { noisy, filtered } => detect_cmd(&cfg, out, &noisy, &filtered),
        Command::Ablate { data } => ablate(&cfg, out, data.as_deref()),
    }
}

fn save_config(cfg: &RunConfig, out: &Path) -> Result<()> {
    atomic_write(&out.join("config.txt"), cfg.to_text().as_bytes())
}

fn load_or_build(cfg: &RunConfig, data: Option<&Path>) -> Result<Dataset> {
    match data {
        Some(dir) => read_dataset(dir),
        None => build_dataset(&cfg.dataset_spec()?),
    }
}

fn simulate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = build_dataset(&cfg.dataset_spec()?)?;
    write_dataset(out, &ds)?;
    save_config(cfg, out)?;
    eprintln!("wrote {} train + {} val patches to {}", ds.train.len(), ds.val.len(), out.display());
    Ok(())
}

fn train(cfg: &RunConfig, out: &Path, data: Option<&Path>, resume: bool) -> Result<()> {
    let ds = load_or_build(cfg, data)?;
    let ckpt = out.join("checkpoint");
    let tcfg = monet::trainer::TrainConfig {
        checkpoint_dir: Some(ckpt.clone()),
        ..cfg.train_config()
    };
    let mut trainer = if resume { Trainer::from_checkpoint(&ckpt, tcfg)? } else { Trainer::new(tcfg)? };
    let mut log = TrainLog::default();
    trainer.run(&ds, &mut log)?;
    save_weights(&trainer.model, &out.join("model.monw"))?;
    atomic_write(&out.join("train_log.csv"), log.steps_csv().as_bytes())?;
    atomic_write(&out.join("epochs.csv"), log.epochs_csv().as_bytes())?;
    save_config(cfg, out)?;
    if let Some(v) = log.epochs.last().and_then(|e| e.validation.as_ref()) {
        eprintln!(
            "step {}: val loss {:.5}, ssim {:.4}, mse {:.5} (noisy {:.5})",
            trainer.step, v.loss.total, v.ssim, v.mse, v.noisy_mse
        );
    }
    Ok(())
}

fn stem(path: &Path) -> String {
    path.file_stem().unwrap_or_default().to_string_lossy().into_owned()
}

fn infer(cfg: &RunConfig, out: &Path, weights: &Path, inputs: &[PathBuf]) -> Result<()> {
    let model = load_weights(weights)?;
    for input in inputs {
        let noisy = read_image(input)?;
        let filtered = model.denoise(&noisy, cfg.infer_budget_bytes())?;
        let ratio = RatioImage::from_pair(&noisy, &filtered)?;
        let name = stem(input);
        let f = out.join(format!("{name}_filtered"));
        let r = out.join(format!("{name}_ratio"));
        write_sarf(&f.with_extension("sarf"), &filtered)?;
        write_sarf(&r.with_extension("sarf"), ratio.image())?;
        write_quicklook(&f, &filtered)?;
        write_quicklook(&r, ratio.image())?;
        write_quicklook(&out.join(format!("{name}_noisy")), &noisy)?;
        eprintln!("{}: {}x{} -> {}", input.display(), noisy.height(), noisy.width(), f.display());
    }
    Ok(())
}

fn read_pair(noisy: &Path, filtered: &Path) -> Result<(AmplitudeImage, AmplitudeImage)> {
    let y = read_image(noisy)?;
    let x = read_image(filtered)?;
    if !y.same_shape(&x) {
        return Err(Error::shape(format!(
            "{} is {}x{} but {} is {}x{}",
            noisy.display(),
            y.height(),
            y.width(),
            filtered.display(),
            x.height(),
            x.width()
        )));
    }
    Ok((y, x))
}

fn eval(cfg: &RunConfig, out: &Path, noisy: &Path, filtered: &Path, reference: Option<&Path>) -> Result<()> {
    let (y, x) = read_pair(noisy, filtered)?;
    let clean = reference.map(read_image).transpose()?;
    if let Some(c) = &clean {
        if !c.same_shape(&x) {
            return Err(Error::shape("reference and filtered images differ in size"));
        }
    }
    let report = evaluate(&y, &x, clean.as_ref(), &cfg.eval_config())?;
    let csv = format!("{}\n{}\n", MetricsReport::csv_header(), report.csv_row());
    atomic_write(&out.join("metrics.csv"), csv.as_bytes())?;
    print!("{}", report.pretty());
    Ok(())
}

fn detect_cmd(cfg: &RunConfig, out: &Path, noisy: &Path, filtered: &Path) -> Result<()> {
    let (y, x) = read_pair(noisy, filtered)?;
    let ratio = RatioImage::from_pair(&y, &x)?;
    let mask = detect(&ratio, &cfg.detect)?;
    atomic_write(&out.join("mask.pgm"), &encode_mask_pgm(mask.height, mask.width, &mask.flags))?;
    atomic_write(&out.join("mask.csv"), mask.to_csv().as_bytes())?;
    let ga0 = FreryParams::ga0(-0.5, 0.145, 1)?;
    let ka = FreryParams::ka(2.0, 7.5, 1)?;
    let fit = validate_populations(&y, &mask, &ga0, &ka)?;
    atomic_write(&out.join("fit.csv"), fit.to_csv().as_bytes())?;
    eprintln!(
        "{} of {} pixels flagged{}",
        mask.count(),
        mask.flags.len(),
        if fit.inconclusive { " (population fit inconclusive)" } else { "" }
    );
    Ok(())
}

fn ablate(cfg: &RunConfig, out: &Path, data: Option<&Path>) -> Result<()> {
    let ds = load_or_build(cfg, data)?;
    let runs = run_ablation(&ds, &cfg.train_config(), &[])?;
    for r in &runs {
        let dir = out.join(r.variant.to_string());
        fs::create_dir_all(&dir)?;
        save_weights(&r.model, &dir.join("model.monw"))?;
        atomic_write(&dir.join("train_log.csv"), r.log.steps_csv().as_bytes())?;
    }
    let table = ablation_table(&runs);
    atomic_write(&out.join("ablation.csv"), table.as_bytes())?;
    save_config(cfg, out)?;
    print!("{table}");
    Ok(())
}
