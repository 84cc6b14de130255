//! Reference (SSIM, MSE, SNR) and no-reference (ENL, δh, r_ENL, r_μ,
//! M-index surrogate, ratio-image D_KL) despeckling quality indexes.

use std::fmt::Write as _;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::image::AmplitudeImage;
use crate::loss::DIV_FLOOR;
use crate::rng::seeded;
use crate::stats::{kl_divergence, speckle_edges, Histogram, RayleighRef};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const GLCM_LEVELS: usize = 64;
pub const GLCM_OFFSET: (usize, usize) = (0, 1);
pub const DELTA_H_PERMUTATIONS: usize = 8;

/// Estimated speckle `N̂ = Y / max(X̂, ε)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioImage(AmplitudeImage);

impl RatioImage {
    pub fn from_pair(noisy: &AmplitudeImage, filtered: &AmplitudeImage) -> Result<Self> {
        noisy.ensure_same_shape(filtered, "ratio image")?;
        let (h, w) = noisy.dims();
        let px = noisy
            .pixels()
            .iter()
            .zip(filtered.pixels())
            .map(|(y, x)| y / x.max(DIV_FLOOR))
            .collect();
        Ok(Self(AmplitudeImage::new(h, w, px)?))
    }

    /// Wraps an already computed ratio raster.
    pub fn from_image(image: AmplitudeImage) -> Self {
        Self(image)
    }

    pub fn image(&self) -> &AmplitudeImage {
        &self.0
    }

    pub fn into_image(self) -> AmplitudeImage {
        self.0
    }

    pub fn pixels(&self) -> &[f64] {
        self.0.pixels()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    fn overlaps(&self, o: &Rect) -> bool {
        self.row < o.row + o.height && o.row < self.row + self.height && self.col < o.col + o.width && o.col < self.col + self.width
    }

    fn pixels<'a>(&self, img: &'a AmplitudeImage) -> impl Iterator<Item = f64> + 'a {
        let Rect { row, col, height, width } = *self;
        (row..row + height).flat_map(move |r| (col..col + width).map(move |c| img.get(r, c)))
    }
}

/// Homogeneous areas used by the no-reference metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct Roi {
    rects: Vec<Rect>,
    dims: (usize, usize),
}

impl Roi {
    pub fn new(rects: Vec<Rect>, dims: (usize, usize)) -> Result<Self> {
        if rects.is_empty() {
            return Err(Error::param("a region of interest needs at least one rectangle"));
        }
        for (i, r) in rects.iter().enumerate() {
            if r.height * r.width < 2 || r.row + r.height > dims.0 || r.col + r.width > dims.1 {
                return Err(Error::param(format!("rectangle {r:?} is empty or outside {}x{}", dims.0, dims.1)));
            }
            if rects[..i].iter().any(|o| o.overlaps(r)) {
                return Err(Error::param(format!("rectangle {r:?} overlaps another one")));
            }
        }
        Ok(Self { rects, dims })
    }

    /// The `count` non-overlapping `size`×`size` tiles of `noisy` with the
    /// lowest intensity coefficient of variation. Falls back to the whole
    /// image when it is smaller than one tile.
    pub fn auto(noisy: &AmplitudeImage, count: usize, size: usize) -> Result<Self> {
        let (h, w) = noisy.dims();
        if count == 0 || size < 2 {
            return Err(Error::param("automatic roi needs count >= 1 and size >= 2"));
        }
        if h < size || w < size {
            return Self::new(vec![Rect { row: 0, col: 0, height: h, width: w }], (h, w));
        }
        let mut scored = Vec::new();
        for row in (0..=h - size).step_by(size) {
            for col in (0..=w - size).step_by(size) {
                let rect = Rect { row, col, height: size, width: size };
                let (m, v) = mean_var(rect.pixels(noisy).map(|a| a * a));
                if m > 0.0 {
                    scored.push((v.sqrt() / m, rect));
                }
            }
        }
        if scored.is_empty() {
            return Err(Error::Degenerate("no tile with nonzero intensity for roi selection".into()));
        }
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.1.row, a.1.col).cmp(&(b.1.row, b.1.col))));
        Self::new(scored.into_iter().take(count).map(|(_, r)| r).collect(), (h, w))
    }

    pub fn rects(&self) -> &[Rect] {
        &self.rects
    }

    fn check(&self, img: &AmplitudeImage) -> Result<()> {
        if img.dims() != self.dims {
            return Err(Error::shape(format!("roi built for {:?}, image is {:?}", self.dims, img.dims())));
        }
        Ok(())
    }
}

fn mean_var(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = values.collect();
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n)
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering with the normalized Gaussian window.
fn blur_valid(px: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut tmp = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            tmp[r * ow + c] = (0..k).map(|i| g[i] * px[r * w + c + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..k).map(|i| g[i] * tmp[(r + i) * ow + c]).sum();
        }
    }
    out
}

/// Mean local SSIM over all fully contained 11×11 Gaussian windows, for a
/// dynamic range of 1.
pub fn ssim(a: &AmplitudeImage, b: &AmplitudeImage) -> Result<f64> {
    a.ensure_same_shape(b, "ssim")?;
    let (h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}")));
    }
    let g = gaussian_window();
    let (x, y) = (a.pixels(), b.pixels());
    let prod = |f: &dyn Fn(f64, f64) -> f64| x.iter().zip(y).map(|(&p, &q)| f(p, q)).collect::<Vec<_>>();
    let mx = blur_valid(x, h, w, &g);
    let my = blur_valid(y, h, w, &g);
    let sxx = blur_valid(&prod(&|p, _| p * p), h, w, &g);
    let syy = blur_valid(&prod(&|_, q| q * q), h, w, &g);
    let sxy = blur_valid(&prod(&|p, q| p * q), h, w, &g);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (ux, uy) = (mx[i], my[i]);
        let vx = sxx[i] - ux * ux;
        let vy = syy[i] - uy * uy;
        let cov = sxy[i] - ux * uy;
        total += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
    }
    Ok(total / mx.len() as f64)
}

pub fn mse(estimate: &AmplitudeImage, reference: &AmplitudeImage) -> Result<f64> {
    estimate.ensure_same_shape(reference, "mse")?;
    let s: f64 = estimate.pixels().iter().zip(reference.pixels()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / estimate.len() as f64)
}

/// `10·log10(ΣX² / Σ(X − X̂)²)` in dB; `+∞` for a perfect estimate.
pub fn snr(estimate: &AmplitudeImage, reference: &AmplitudeImage) -> Result<f64> {
    estimate.ensure_same_shape(reference, "snr")?;
    let signal: f64 = reference.pixels().iter().map(|v| v * v).sum();
    let noise: f64 = estimate.pixels().iter().zip(reference.pixels()).map(|(a, b)| (a - b) * (a - b)).sum();
    if noise == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (signal / noise).log10())
}

fn enl_of(values: impl Iterator<Item = f64>) -> Result<f64> {
    let (m, v) = mean_var(values.map(|a| a * a));
    // rounding leaves a tiny variance on constant regions
    if !(v > 1e-12 * m * m) {
        return Err(Error::Degenerate("zero intensity variance in ENL region".into()));
    }
    Ok(m * m / v)
}

/// Equivalent number of looks `E[I]²/Var(I)` on intensity `I = A²`, pooled
/// over every rectangle of the roi.
pub fn enl(image: &AmplitudeImage, roi: &Roi) -> Result<f64> {
    roi.check(image)?;
    enl_of(roi.rects.iter().flat_map(|r| r.pixels(image)))
}

/// Quantizes linearly between the image minimum and maximum into `levels`.
fn quantize(px: &[f64], levels: usize) -> Vec<usize> {
    let lo = px.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = px.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0; px.len()];
    }
    let scale = levels as f64 / (hi - lo);
    px.iter().map(|&v| (((v - lo) * scale) as usize).min(levels - 1)).collect()
}

fn homogeneity(q: &[usize], h: usize, w: usize, levels: usize, offset: (usize, usize)) -> Result<f64> {
    let (dr, dc) = offset;
    if dr >= h || dc >= w || (dr == 0 && dc == 0) {
        return Err(Error::param(format!("co-occurrence offset {offset:?} does not fit {h}x{w}")));
    }
    let mut glcm = vec![0.0; levels * levels];
    for r in 0..h - dr {
        for c in 0..w - dc {
            let (i, j) = (q[r * w + c], q[(r + dr) * w + c + dc]);
            glcm[i * levels + j] += 1.0;
            glcm[j * levels + i] += 1.0;
        }
    }
    let total: f64 = glcm.iter().sum();
    let mut hom = 0.0;
    for i in 0..levels {
        for j in 0..levels {
            let d = i as f64 - j as f64;
            hom += glcm[i * levels + j] / (1.0 + d * d);
        }
    }
    Ok(hom / total)
}

/// Haralick homogeneity `Σ p(i,j)/(1+(i−j)²)` of the symmetric co-occurrence
/// matrix. A constant image has a single level and homogeneity 1.
pub fn glcm_homogeneity(image: &AmplitudeImage, levels: usize, offset: (usize, usize)) -> Result<f64> {
    if levels < 2 {
        return Err(Error::param("co-occurrence needs at least 2 gray levels"));
    }
    let (h, w) = image.dims();
    homogeneity(&quantize(image.pixels(), levels), h, w, levels, offset)
}

/// `|h₀ − h_g| / h₀` where `h_g` averages the homogeneity of `permutations`
/// seeded random shuffles of the ratio pixels.
pub fn delta_h(ratio: &RatioImage, permutations: usize, seed: u64) -> Result<f64> {
    if permutations == 0 {
        return Err(Error::param("delta_h needs at least one permutation"));
    }
    let (h, w) = ratio.dims();
    let mut q = quantize(ratio.pixels(), GLCM_LEVELS);
    let h0 = homogeneity(&q, h, w, GLCM_LEVELS, GLCM_OFFSET)?;
    let mut rng = seeded(seed);
    let mut hg = 0.0;
    for _ in 0..permutations {
        q.shuffle(&mut rng);
        hg += homogeneity(&q, h, w, GLCM_LEVELS, GLCM_OFFSET)?;
    }
    hg /= permutations as f64;
    Ok((h0 - hg).abs() / h0)
}

/// Mean over the roi rectangles of `|ENL_noisy − ENL_ratio| / ENL_noisy`.
pub fn residual_enl(noisy: &AmplitudeImage, ratio: &RatioImage, roi: &Roi) -> Result<f64> {
    roi.check(noisy)?;
    roi.check(ratio.image())?;
    let mut acc = 0.0;
    for r in &roi.rects {
        let en = enl_of(r.pixels(noisy))?;
        let er = enl_of(r.pixels(ratio.image()))?;
        acc += (en - er).abs() / en;
    }
    Ok(acc / roi.rects.len() as f64)
}

/// Mean over the roi rectangles of `|1 − μ_N̂|`.
pub fn r_mu(ratio: &RatioImage, roi: &Roi) -> Result<f64> {
    roi.check(ratio.image())?;
    let acc: f64 = roi
        .rects
        .iter()
        .map(|r| {
            let (m, _) = mean_var(r.pixels(ratio.image()));
            (1.0 - m).abs()
        })
        .sum();
    Ok(acc / roi.rects.len() as f64)
}

/// Global mean of the ratio image.
pub fn mu_ratio(ratio: &RatioImage) -> f64 {
    ratio.0.mean()
}

/// Weights of the M-index surrogate `w_dh·δh + w_mu·r_μ + w_enl·r_ENL`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MIndexWeights {
    pub delta_h: f64,
    pub r_mu: f64,
    pub r_enl: f64,
}

impl Default for MIndexWeights {
    fn default() -> Self {
        Self {
            delta_h: 50.0,
            r_mu: 50.0,
            r_enl: 0.5,
        }
    }
}

/// Surrogate aggregate, lower is better. Not the published index.
pub fn m_index(delta_h: f64, r_enl: f64, r_mu: f64, w: &MIndexWeights) -> f64 {
    w.delta_h * delta_h + w.r_mu * r_mu + w.r_enl * r_enl
}

/// Base-2 KL divergence between the ratio histogram (256 bins on `[0, 4]`)
/// and the per-bin Rayleigh(1/√2) masses.
pub fn dkl_ratio(ratio: &RatioImage) -> Result<f64> {
    let edges = speckle_edges();
    let p = Histogram::from_samples(ratio.pixels(), &edges)?;
    let rayleigh = RayleighRef::default();
    let q = Histogram::from_cdf(&edges, |v| rayleigh.cdf(v))?;
    kl_divergence(&p, &q)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    /// User rectangles; `None` selects tiles automatically.
    pub roi: Option<Vec<Rect>>,
    pub roi_count: usize,
    pub roi_size: usize,
    pub permutations: usize,
    pub seed: u64,
    pub m_weights: MIndexWeights,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            roi: None,
            roi_count: 4,
            roi_size: 32,
            permutations: DELTA_H_PERMUTATIONS,
            seed: 0,
            m_weights: MIndexWeights::default(),
        }
    }
}

/// Every index for one filtered image. Reference metrics are `None` when no
/// clean reference is available.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub ssim: Option<f64>,
    pub mse: Option<f64>,
    pub snr: Option<f64>,
    pub m_index: f64,
    pub delta_h: f64,
    pub r_enl: f64,
    pub r_mu: f64,
    pub mu_ratio: f64,
    pub d_kl: f64,
    pub enl: f64,
}

pub const REPORT_COLUMNS: [&str; 10] = [
    "ssim", "mse", "snr", "m_index", "delta_h", "r_enl", "r_mu", "mu_ratio", "d_kl", "enl",
];

impl MetricsReport {
    fn values(&self) -> [Option<f64>; 10] {
        [
            self.ssim,
            self.mse,
            self.snr,
            Some(self.m_index),
            Some(self.delta_h),
            Some(self.r_enl),
            Some(self.r_mu),
            Some(self.mu_ratio),
            Some(self.d_kl),
            Some(self.enl),
        ]
    }

    pub fn csv_header() -> String {
        REPORT_COLUMNS.join(",")
    }

    pub fn csv_row(&self) -> String {
        self.values()
            .iter()
            .map(|v| v.map(|x| format!("{x}")).unwrap_or_default())
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn pretty(&self) -> String {
        let mut s = String::new();
        for (name, v) in REPORT_COLUMNS.iter().zip(self.values()) {
            let shown = v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "-".into());
            let _ = writeln!(s, "{name:<10} {shown:>14}");
        }
        s
    }
}

/// Computes the full report for `filtered` given the `noisy` input and an
/// optional clean reference.
pub fn evaluate(
    noisy: &AmplitudeImage,
    filtered: &AmplitudeImage,
    reference: Option<&AmplitudeImage>,
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    let ratio = RatioImage::from_pair(noisy, filtered)?;
    let roi = match &cfg.roi {
        Some(rects) => Roi::new(rects.clone(), noisy.dims())?,
        None => Roi::auto(noisy, cfg.roi_count, cfg.roi_size)?,
    };
    let (ssim_v, mse_v, snr_v) = match reference {
        Some(x) => (Some(ssim(filtered, x)?), Some(mse(filtered, x)?), Some(snr(filtered, x)?)),
        None => (None, None, None),
    };
    let dh = delta_h(&ratio, cfg.permutations, cfg.seed)?;
    let renl = residual_enl(noisy, &ratio, &roi)?;
    let rmu = r_mu(&ratio, &roi)?;
    Ok(MetricsReport {
        ssim: ssim_v,
        mse: mse_v,
        snr: snr_v,
        m_index: m_index(dh, renl, rmu, &cfg.m_weights),
        delta_h: dh,
        r_enl: renl,
        r_mu: rmu,
        mu_ratio: mu_ratio(&ratio),
        d_kl: dkl_ratio(&ratio)?,
        enl: enl(filtered, &roi)?,
    })
}
