//! Patch datasets of simulated (noisy, clean) pairs.
//!
//! On disk a dataset is a directory holding `manifest.txt` and one pair of
//! SARF files per patch under `patches/`. Manifest rows are tab separated:
//! `id  split  source  row  col  seed`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::AmplitudeImage;
use crate::io::{read_image, read_sarf, write_sarf};
use crate::rng::{derive_seed, seeded};
use crate::speckle::{simulate_pair, synth_texture, Texture};

pub const MANIFEST: &str = "manifest.txt";
const MANIFEST_HEADER: &str = "# id\tsplit\tsource\trow\tcol\tseed";

// Independent seed streams derived from the master seed.
const STREAM_SCENE: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_SPLIT: u64 = 3;

#[derive(Debug, Clone, PartialEq)]
pub enum Source {
    /// Every PGM/PPM/PNG/SARF file in the directory, in name order.
    Directory(PathBuf),
    /// `images` synthetic scenes of `size`×`size`, cycling through `recipe`.
    Synthetic { recipe: Vec<Texture>, images: usize, size: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub source: Source,
    pub patch_size: usize,
    pub stride: usize,
    pub looks: u32,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub seed: u64,
    /// Keep at most this many patches (in extraction order).
    pub max_patches: Option<usize>,
}

impl DatasetSpec {
    pub fn synthetic(recipe: Vec<Texture>, images: usize, size: usize, seed: u64) -> Self {
        Self {
            source: Source::Synthetic { recipe, images, size },
            patch_size: 64,
            stride: 64,
            looks: 1,
            train_fraction: 0.8,
            val_fraction: 0.2,
            seed,
            max_patches: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.stride == 0 || self.looks == 0 {
            return Err(Error::Config("patch size, stride and looks must be positive".into()));
        }
        let (t, v) = (self.train_fraction, self.val_fraction);
        if !(0.0..=1.0).contains(&t) || !(0.0..=1.0).contains(&v) || ((t + v) - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions must be in [0,1] and sum to 1, got {t} + {v}")));
        }
        if let Source::Synthetic { recipe, images, size } = &self.source {
            if recipe.is_empty() || *images == 0 || *size == 0 {
                return Err(Error::Config("synthetic source needs a recipe, images >= 1 and size >= 1".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub id: usize,
    pub split: Split,
    pub source: String,
    pub row: usize,
    pub col: usize,
    /// Speckle seed of this patch.
    pub seed: u64,
    pub clean: AmplitudeImage,
    pub noisy: AmplitudeImage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Patch>,
    pub val: Vec<Patch>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.train.len() + self.val.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn load_sources(spec: &DatasetSpec) -> Result<Vec<(String, AmplitudeImage)>> {
    match &spec.source {
        Source::Directory(dir) => {
            let entries = fs::read_dir(dir).map_err(|e| Error::ingest(dir, e))?;
            let mut paths: Vec<PathBuf> = entries
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file())
                .collect();
            paths.sort();
            if paths.is_empty() {
                return Err(Error::ingest(dir, "source directory holds no images"));
            }
            paths
                .iter()
                .map(|p| Ok((p.file_name().unwrap_or_default().to_string_lossy().into_owned(), read_image(p)?)))
                .collect()
        }
        Source::Synthetic { recipe, images, size } => (0..*images)
            .into_par_iter()
            .map(|i| {
                let kind = &recipe[i % recipe.len()];
                let seed = derive_seed(derive_seed(spec.seed, STREAM_SCENE), i as u64);
                Ok((format!("synthetic:{}#{i}", kind.name()), synth_texture(kind, *size, *size, seed)?))
            })
            .collect(),
    }
}

/// Builds the dataset: tiles every source with the configured stride,
/// simulates speckle per patch from `(seed, patch index)`, and splits with
/// a seeded shuffle.
pub fn build_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let sources = load_sources(spec)?;
    let p = spec.patch_size;
    let mut slots = Vec::new();
    for (si, (name, img)) in sources.iter().enumerate() {
        let (h, w) = img.dims();
        if h < p || w < p {
            return Err(Error::param(format!("patch size {p} exceeds source '{name}' ({h}x{w})")));
        }
        for row in (0..=h - p).step_by(spec.stride) {
            for col in (0..=w - p).step_by(spec.stride) {
                slots.push((si, row, col));
            }
        }
    }
    if let Some(max) = spec.max_patches {
        slots.truncate(max);
    }
    if slots.is_empty() {
        return Err(Error::param("no patch could be extracted"));
    }
    let noise_stream = derive_seed(spec.seed, STREAM_NOISE);
    let mut patches: Vec<Patch> = slots
        .par_iter()
        .enumerate()
        .map(|(id, &(si, row, col))| {
            let (name, img) = &sources[si];
            let clean = img.crop(row, col, p, p)?;
            let seed = derive_seed(noise_stream, id as u64);
            let pair = simulate_pair(&clean, spec.looks, seed).map_err(|e| match e {
                Error::Domain(m) => Error::Domain(format!("source '{name}': {m}")),
                other => other,
            })?;
            Ok(Patch {
                id,
                split: Split::Train,
                source: name.clone(),
                row,
                col,
                seed,
                clean,
                noisy: pair.noisy,
            })
        })
        .collect::<Result<_>>()?;
    let n = patches.len();
    let n_train = (spec.train_fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded(derive_seed(spec.seed, STREAM_SPLIT)));
    for &i in &order[n_train..] {
        patches[i].split = Split::Val;
    }
    let (train, val) = patches.into_iter().partition(|p| p.split == Split::Train);
    Ok(Dataset { train, val })
}

fn patch_paths(dir: &Path, id: usize) -> (PathBuf, PathBuf) {
    let base = dir.join("patches");
    (base.join(format!("{id:06}_clean.sarf")), base.join(format!("{id:06}_noisy.sarf")))
}

pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir.join("patches"))?;
    let mut all: Vec<&Patch> = ds.train.iter().chain(&ds.val).collect();
    all.sort_by_key(|p| p.id);
    let mut manifest = String::from(MANIFEST_HEADER);
    manifest.push('\n');
    for p in all {
        let (c, n) = patch_paths(dir, p.id);
        write_sarf(&c, &p.clean)?;
        write_sarf(&n, &p.noisy)?;
        manifest.push_str(&format!("{}\t{}\t{}\t{}\t{}\t{}\n", p.id, p.split, p.source, p.row, p.col, p.seed));
    }
    crate::nn::weights::atomic_write(&dir.join(MANIFEST), manifest.as_bytes())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::ingest(&path, e))?;
    let mut ds = Dataset { train: Vec::new(), val: Vec::new() };
    for (ln, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let bad = || Error::ingest(&path, format!("malformed manifest line {}", ln + 1));
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 6 {
            return Err(bad());
        }
        let id: usize = f[0].parse().map_err(|_| bad())?;
        let split = match f[1] {
            "train" => Split::Train,
            "val" => Split::Val,
            _ => return Err(bad()),
        };
        let (c, n) = patch_paths(dir, id);
        let patch = Patch {
            id,
            split,
            source: f[2].to_string(),
            row: f[3].parse().map_err(|_| bad())?,
            col: f[4].parse().map_err(|_| bad())?,
            seed: f[5].parse().map_err(|_| bad())?,
            clean: read_sarf(&c)?,
            noisy: read_sarf(&n)?,
        };
        if !patch.clean.same_shape(&patch.noisy) {
            return Err(Error::ingest(&n, "noisy and clean patches differ in size"));
        }
        match split {
            Split::Train => ds.train.push(patch),
            Split::Val => ds.val.push(patch),
        }
    }
    if ds.is_empty() {
        return Err(Error::ingest(&path, "manifest lists no patches"));
    }
    Ok(ds)
}
