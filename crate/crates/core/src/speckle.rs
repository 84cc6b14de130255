//! Fully developed speckle, noisy/clean pair synthesis and synthetic
//! clean scenes.

use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};
use crate::image::AmplitudeImage;
use crate::rng::seeded;
use crate::stats::dist::speckle_distribution;

/// I.i.d. amplitude speckle `n = sqrt(S)`, `S ~ Gamma(L, 1/L)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeckleField {
    pub looks: u32,
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl SpeckleField {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn to_image(&self) -> AmplitudeImage {
        AmplitudeImage::new(self.height, self.width, self.values.clone()).expect("speckle samples are valid amplitudes")
    }
}

pub fn sample_speckle(height: usize, width: usize, looks: u32, seed: u64) -> Result<SpeckleField> {
    if height == 0 || width == 0 {
        return Err(Error::param(format!("speckle field needs positive dimensions, got {height}x{width}")));
    }
    let law = speckle_distribution(looks)?;
    let mut rng = seeded(seed);
    let values = (0..height * width).map(|_| law.sample(&mut rng).sqrt()).collect();
    Ok(SpeckleField { looks, height, width, values })
}

/// Clean reference, speckle realization and their product.
#[derive(Debug, Clone, PartialEq)]
pub struct SimPair {
    pub clean: AmplitudeImage,
    pub noisy: AmplitudeImage,
    pub speckle: SpeckleField,
    pub seed: u64,
}

/// `Y = X · N` with fresh `L`-look speckle.
pub fn simulate_pair(clean: &AmplitudeImage, looks: u32, seed: u64) -> Result<SimPair> {
    if let Some(p) = clean.pixels().iter().find(|p| **p > 1.0) {
        return Err(Error::Domain(format!("clean reference must lie in [0,1], found {p}")));
    }
    let (h, w) = clean.dims();
    let speckle = sample_speckle(h, w, looks, seed)?;
    let noisy: Vec<f64> = clean.pixels().iter().zip(speckle.values()).map(|(x, n)| x * n).collect();
    Ok(SimPair {
        clean: clean.clone(),
        noisy: AmplitudeImage::new(h, w, noisy)?,
        speckle,
        seed,
    })
}

/// Recipes for synthetic clean scenes in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub enum Texture {
    Constant { level: f64 },
    /// Linear ramp from `lo` (first column) to `hi` (last column).
    Ramp { lo: f64, hi: f64 },
    Checkerboard { cell: usize, lo: f64, hi: f64 },
    /// Box-smoothed i.i.d. Gamma field with the given mean.
    GammaTexture { mean: f64, shape: f64, radius: usize },
    /// Constant background with isolated bright pixels of `contrast × background`.
    PointScatterers { background: f64, contrast: f64, density: f64 },
    /// Random piecewise-constant rectangles and discs over a smooth gradient,
    /// modulated by a mild Gamma texture.
    Mosaic { shapes: usize },
}

impl Texture {
    pub fn name(&self) -> &'static str {
        match self {
            Texture::Constant { .. } => "constant",
            Texture::Ramp { .. } => "ramp",
            Texture::Checkerboard { .. } => "checkerboard",
            Texture::GammaTexture { .. } => "gamma-texture",
            Texture::PointScatterers { .. } => "point-scatterers",
            Texture::Mosaic { .. } => "mosaic",
        }
    }

    /// Analytic mean of the clean scene, where one exists.
    pub fn expected_mean(&self) -> Option<f64> {
        match *self {
            Texture::Constant { level } => Some(level),
            Texture::Ramp { lo, hi } => Some(0.5 * (lo + hi)),
            Texture::Checkerboard { lo, hi, .. } => Some(0.5 * (lo + hi)),
            Texture::GammaTexture { mean, .. } => Some(mean),
            Texture::PointScatterers { background, contrast, density } => {
                Some(background * (1.0 + (contrast - 1.0) * density))
            }
            Texture::Mosaic { .. } => None,
        }
    }
}

impl FromStr for Texture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "constant" => Texture::Constant { level: 0.5 },
            "ramp" | "gradient" => Texture::Ramp { lo: 0.05, hi: 0.95 },
            "checkerboard" => Texture::Checkerboard { cell: 8, lo: 0.2, hi: 0.8 },
            "gamma-texture" => Texture::GammaTexture { mean: 0.4, shape: 4.0, radius: 2 },
            "point-scatterers" => Texture::PointScatterers { background: 0.15, contrast: 5.0, density: 1e-3 },
            "mosaic" => Texture::Mosaic { shapes: 12 },
            other => return Err(Error::param(format!("unknown texture kind '{other}'"))),
        })
    }
}

/// Parses a `+`-separated recipe such as `constant+gradient+gamma-texture`.
pub fn parse_recipe(recipe: &str) -> Result<Vec<Texture>> {
    let kinds: Vec<Texture> = recipe.split('+').map(str::parse).collect::<Result<_>>()?;
    if kinds.is_empty() {
        return Err(Error::param("empty texture recipe"));
    }
    Ok(kinds)
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::param(format!("{name} must lie in [0,1], got {v}")));
    }
    Ok(())
}

pub fn synth_texture(kind: &Texture, height: usize, width: usize, seed: u64) -> Result<AmplitudeImage> {
    if height == 0 || width == 0 {
        return Err(Error::param(format!("texture needs positive dimensions, got {height}x{width}")));
    }
    let mut rng = seeded(seed);
    match *kind {
        Texture::Constant { level } => {
            check_unit("level", level)?;
            AmplitudeImage::filled(height, width, level)
        }
        Texture::Ramp { lo, hi } => {
            check_unit("lo", lo)?;
            check_unit("hi", hi)?;
            if hi < lo {
                return Err(Error::param("ramp must be nondecreasing (hi >= lo)"));
            }
            let denom = (width.max(2) - 1) as f64;
            AmplitudeImage::from_fn(height, width, |_, c| lo + (hi - lo) * c as f64 / denom)
        }
        Texture::Checkerboard { cell, lo, hi } => {
            check_unit("lo", lo)?;
            check_unit("hi", hi)?;
            if cell == 0 {
                return Err(Error::param("checkerboard cell must be positive"));
            }
            AmplitudeImage::from_fn(height, width, |r, c| if (r / cell + c / cell) % 2 == 0 { lo } else { hi })
        }
        Texture::GammaTexture { mean, shape, radius } => {
            check_unit("mean", mean)?;
            let law = Gamma::new(shape, mean / shape).map_err(|e| Error::param(e.to_string()))?;
            let raw: Vec<f64> = (0..height * width).map(|_| law.sample(&mut rng)).collect();
            let smooth = box_blur(&raw, height, width, radius);
            AmplitudeImage::new(height, width, smooth.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
        }
        Texture::PointScatterers { background, contrast, density } => {
            check_unit("background", background)?;
            check_unit("density", density)?;
            if contrast < 1.0 || background * contrast > 1.0 {
                return Err(Error::param(format!(
                    "scatterer amplitude {} must lie in [background, 1]",
                    background * contrast
                )));
            }
            let mut px = vec![background; height * width];
            let target = background * contrast;
            for r in 0..height {
                for c in 0..width {
                    if rng.random::<f64>() < density && !has_bright_neighbor(&px, height, width, r, c, background) {
                        px[r * width + c] = target;
                    }
                }
            }
            AmplitudeImage::new(height, width, px)
        }
        Texture::Mosaic { shapes } => Ok(mosaic(&mut rng, height, width, shapes)?),
    }
}

/// Pixels brighter than the background of a point-scatterer scene.
pub fn scatterer_positions(image: &AmplitudeImage, background: f64) -> Vec<(usize, usize)> {
    let (h, w) = image.dims();
    (0..h)
        .flat_map(|r| (0..w).map(move |c| (r, c)))
        .filter(|&(r, c)| image.get(r, c) > background)
        .collect()
}

fn has_bright_neighbor(px: &[f64], h: usize, w: usize, r: usize, c: usize, bg: f64) -> bool {
    let r0 = r.saturating_sub(1);
    let c0 = c.saturating_sub(1);
    (r0..=(r + 1).min(h - 1)).any(|rr| (c0..=(c + 1).min(w - 1)).any(|cc| px[rr * w + cc] > bg))
}

fn box_blur(src: &[f64], h: usize, w: usize, radius: usize) -> Vec<f64> {
    if radius == 0 {
        return src.to_vec();
    }
    let r = radius as isize;
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = 0.0;
            let mut n = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let yy = (y + dy).clamp(0, h as isize - 1) as usize;
                    let xx = (x + dx).clamp(0, w as isize - 1) as usize;
                    acc += src[yy * w + xx];
                    n += 1.0;
                }
            }
            out[y as usize * w + x as usize] = acc / n;
        }
    }
    out
}

fn mosaic<R: Rng>(rng: &mut R, h: usize, w: usize, shapes: usize) -> Result<AmplitudeImage> {
    let (g0, gy, gx) = (
        rng.random_range(0.15..0.6),
        rng.random_range(-0.3..0.3),
        rng.random_range(-0.3..0.3),
    );
    let mut px: Vec<f64> = (0..h * w)
        .map(|i| {
            let (r, c) = ((i / w) as f64 / h as f64, (i % w) as f64 / w as f64);
            g0 + gy * (r - 0.5) + gx * (c - 0.5)
        })
        .collect();
    for _ in 0..shapes {
        let level = rng.random_range(0.05..0.95);
        let cy = rng.random_range(0.0..h as f64);
        let cx = rng.random_range(0.0..w as f64);
        let sy = rng.random_range(0.05..0.35) * h as f64;
        let sx = rng.random_range(0.05..0.35) * w as f64;
        let disc = rng.random::<bool>();
        for r in 0..h {
            for c in 0..w {
                let dy = (r as f64 - cy) / sy;
                let dx = (c as f64 - cx) / sx;
                let inside = if disc { dy * dy + dx * dx <= 1.0 } else { dy.abs() <= 1.0 && dx.abs() <= 1.0 };
                if inside {
                    px[r * w + c] = level;
                }
            }
        }
    }
    let grain = Gamma::new(16.0, 1.0 / 16.0).map_err(|e| Error::param(e.to_string()))?;
    let raw: Vec<f64> = (0..h * w).map(|_| grain.sample(rng)).collect();
    let grain = box_blur(&raw, h, w, 1);
    let px = px.iter().zip(grain).map(|(p, g)| (p * g).clamp(0.0, 1.0)).collect();
    AmplitudeImage::new(h, w, px)
}
