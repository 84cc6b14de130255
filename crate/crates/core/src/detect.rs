//! Extremely heterogeneous (EH) point detection on ratio images: a Touzi
//! ratio edge detector combined with patch-wise Kolmogorov–Smirnov tests
//! against the fully developed Rayleigh law.
//!
//! Flagged pixels are reported, never filtered.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::image::AmplitudeImage;
use crate::metrics::RatioImage;
use crate::stats::ks::ks_statistic_sorted;
use crate::stats::{ga0_cdf, ka_cdf, kolmogorov_critical, uniform_edges, FreryParams, Histogram, RayleighRef};

pub const EDGE_HIT: u8 = 1;
pub const KS_HIT: u8 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Combine {
    And,
    Or,
}

impl fmt::Display for Combine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Combine::And => "and",
            Combine::Or => "or",
        })
    }
}

impl FromStr for Combine {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "and" => Ok(Combine::And),
            "or" => Ok(Combine::Or),
            other => Err(Error::Config(format!("unknown combination rule '{other}' (and|or)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectConfig {
    pub edge_window: usize,
    pub edge_threshold: f64,
    pub ks_patch: usize,
    pub ks_alpha: f64,
    pub combine: Combine,
    pub dilation: usize,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            edge_window: 7,
            edge_threshold: 1.5,
            ks_patch: 16,
            ks_alpha: 0.01,
            combine: Combine::And,
            dilation: 1,
        }
    }
}

impl DetectConfig {
    pub fn validate(&self) -> Result<()> {
        if self.edge_window < 3 || self.edge_window.is_multiple_of(2) {
            return Err(Error::Config(format!("edge window must be odd and >= 3, got {}", self.edge_window)));
        }
        if !(self.edge_threshold > 1.0) {
            return Err(Error::Config(format!("edge threshold must exceed 1, got {}", self.edge_threshold)));
        }
        if !(self.ks_alpha > 0.0 && self.ks_alpha < 1.0) {
            return Err(Error::Config(format!("KS significance must lie in (0,1), got {}", self.ks_alpha)));
        }
        if self.ks_patch < 2 {
            return Err(Error::Config("KS patch must be at least 2 pixels".into()));
        }
        Ok(())
    }
}

/// Touzi detector output.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMap {
    pub height: usize,
    pub width: usize,
    /// `max(μ₁/μ₂, μ₂/μ₁)` over four orientations; ≥ 1.
    pub response: Vec<f64>,
    pub flags: Vec<bool>,
    /// Pixels where some half-window had zero mean; their response is set to 1.
    pub skipped: usize,
}

/// Ratio-of-means edge detector over vertical, horizontal and both diagonal
/// splits of a `window`×`window` neighbourhood (centre line excluded).
/// Borders use replicate indexing.
pub fn touzi_edge_map(ratio: &RatioImage, window: usize, threshold: f64) -> Result<EdgeMap> {
    if window < 3 || window.is_multiple_of(2) {
        return Err(Error::param(format!("edge window must be odd and >= 3, got {window}")));
    }
    let (h, w) = ratio.dims();
    if window > h || window > w {
        return Err(Error::param(format!("{window}x{window} window does not fit {h}x{w}")));
    }
    let half = (window / 2) as isize;
    let img = ratio.image();
    let at = |r: isize, c: isize| img.get(r.clamp(0, h as isize - 1) as usize, c.clamp(0, w as isize - 1) as usize);
    let mut response = vec![1.0; h * w];
    let mut skipped = 0;
    for r in 0..h as isize {
        for c in 0..w as isize {
            // sums for the negative and positive side of each split
            let mut s = [[0.0f64; 2]; 4];
            for dy in -half..=half {
                for dx in -half..=half {
                    let v = at(r + dy, c + dx);
                    for (k, key) in [dx, dy, dx - dy, dx + dy].into_iter().enumerate() {
                        if key != 0 {
                            s[k][(key > 0) as usize] += v;
                        }
                    }
                }
            }
            let mut best = 1.0f64;
            let mut degenerate = false;
            for [a, b] in s {
                if a <= 0.0 || b <= 0.0 {
                    degenerate = true;
                    break;
                }
                // both halves hold the same number of pixels
                best = best.max(a / b).max(b / a);
            }
            if degenerate {
                skipped += 1;
            } else {
                response[r as usize * w + c as usize] = best;
            }
        }
    }
    let flags = response.iter().map(|&v| v > threshold).collect();
    Ok(EdgeMap {
        height: h,
        width: w,
        response,
        flags,
        skipped,
    })
}

/// Per-patch KS tests on a `patch`-stride grid of full patches.
#[derive(Debug, Clone, PartialEq)]
pub struct KsMap {
    pub patch: usize,
    pub rows: usize,
    pub cols: usize,
    pub statistic: Vec<f64>,
    pub reject: Vec<bool>,
    /// `c(α)/√n`.
    pub critical: f64,
    pub height: usize,
    pub width: usize,
}

impl KsMap {
    /// Rejection bit of the patch covering `(r, c)`; pixels outside the
    /// grid of full patches are never rejected.
    pub fn pixel(&self, r: usize, c: usize) -> bool {
        let (pr, pc) = (r / self.patch, c / self.patch);
        pr < self.rows && pc < self.cols && self.reject[pr * self.cols + pc]
    }

    pub fn rejection_rate(&self) -> f64 {
        self.reject.iter().filter(|&&b| b).count() as f64 / self.reject.len() as f64
    }
}

pub fn ks_patch_map(ratio: &RatioImage, patch: usize, alpha: f64) -> Result<KsMap> {
    let (h, w) = ratio.dims();
    if patch == 0 || patch > h || patch > w {
        return Err(Error::param(format!("KS patch {patch} does not fit {h}x{w}")));
    }
    let n = patch * patch;
    let critical = kolmogorov_critical(alpha)? / (n as f64).sqrt();
    let (rows, cols) = (h / patch, w / patch);
    let rayleigh = RayleighRef::default();
    let img = ratio.image();
    let mut statistic = Vec::with_capacity(rows * cols);
    let mut buf = Vec::with_capacity(n);
    for pr in 0..rows {
        for pc in 0..cols {
            buf.clear();
            for r in pr * patch..(pr + 1) * patch {
                buf.extend((pc * patch..(pc + 1) * patch).map(|c| img.get(r, c)));
            }
            buf.sort_unstable_by(f64::total_cmp);
            statistic.push(ks_statistic_sorted(&buf, |v| rayleigh.cdf(v)));
        }
    }
    let reject = statistic.iter().map(|&d| d > critical).collect();
    Ok(KsMap {
        patch,
        rows,
        cols,
        statistic,
        reject,
        critical,
        height: h,
        width: w,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EHMask {
    pub height: usize,
    pub width: usize,
    pub flags: Vec<bool>,
    /// [`EDGE_HIT`] (dilated edge map) and [`KS_HIT`] bits per pixel.
    pub provenance: Vec<u8>,
}

impl EHMask {
    pub fn count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.flags[r * self.width + c]
    }

    /// `row,col,edge_hit,ks_hit` for every flagged pixel.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("row,col,edge_hit,ks_hit\n");
        for (i, _) in self.flags.iter().enumerate().filter(|(_, f)| **f) {
            let p = self.provenance[i];
            let _ = writeln!(s, "{},{},{},{}", i / self.width, i % self.width, (p & EDGE_HIT != 0) as u8, (p & KS_HIT != 0) as u8);
        }
        s
    }
}

fn dilate(flags: &[bool], h: usize, w: usize, radius: usize) -> Vec<bool> {
    if radius == 0 {
        return flags.to_vec();
    }
    let mut out = vec![false; h * w];
    for r in 0..h {
        for c in 0..w {
            if !flags[r * w + c] {
                continue;
            }
            for rr in r.saturating_sub(radius)..=(r + radius).min(h - 1) {
                for cc in c.saturating_sub(radius)..=(c + radius).min(w - 1) {
                    out[rr * w + cc] = true;
                }
            }
        }
    }
    out
}

pub fn combine_eh_mask(edge: &EdgeMap, ks: &KsMap, cfg: &DetectConfig) -> Result<EHMask> {
    if (edge.height, edge.width) != (ks.height, ks.width) {
        return Err(Error::shape(format!(
            "edge map {}x{} vs KS map {}x{}",
            edge.height, edge.width, ks.height, ks.width
        )));
    }
    let (h, w) = (edge.height, edge.width);
    let dilated = dilate(&edge.flags, h, w, cfg.dilation);
    let mut flags = vec![false; h * w];
    let mut provenance = vec![0u8; h * w];
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let bits = if dilated[i] { EDGE_HIT } else { 0 } | if ks.pixel(r, c) { KS_HIT } else { 0 };
            provenance[i] = bits;
            flags[i] = match cfg.combine {
                Combine::And => bits == EDGE_HIT | KS_HIT,
                Combine::Or => bits != 0,
            };
        }
    }
    Ok(EHMask {
        height: h,
        width: w,
        flags,
        provenance,
    })
}

/// Full detection chain on a ratio image.
pub fn detect(ratio: &RatioImage, cfg: &DetectConfig) -> Result<EHMask> {
    cfg.validate()?;
    let edge = touzi_edge_map(ratio, cfg.edge_window, cfg.edge_threshold)?;
    let ks = ks_patch_map(ratio, cfg.ks_patch, cfg.ks_alpha)?;
    combine_eh_mask(&edge, &ks, cfg)
}

/// Goodness of fit of one pixel population against both reference laws.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationFit {
    pub count: usize,
    pub ks_ga0: f64,
    pub ks_ka: f64,
    /// `(bin center, empirical density, G_A⁰ density, K_A density)`; the
    /// reference densities are per-bin masses with tails folded into the end bins.
    pub curves: Vec<(f64, f64, f64, f64)>,
    pub bin_width: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    /// Pixels under the mask (expected to follow `G_A⁰`).
    pub eh: Option<PopulationFit>,
    /// Remaining pixels (expected to follow `K_A`).
    pub h: Option<PopulationFit>,
    pub inconclusive: bool,
}

impl FitReport {
    /// `population,bin_center,empirical,ga0,ka` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("population,bin_center,empirical,ga0,ka\n");
        for (name, pop) in [("eh", &self.eh), ("h", &self.h)] {
            if let Some(p) = pop {
                for (c, e, g, k) in &p.curves {
                    let _ = writeln!(s, "{name},{c},{e},{g},{k}");
                }
            }
        }
        s
    }
}

pub const FIT_BINS: usize = 64;

fn fit_population(values: &mut [f64], ga0: &FreryParams, ka: &FreryParams) -> Result<PopulationFit> {
    values.sort_unstable_by(f64::total_cmp);
    let ks_ga0 = ks_statistic_sorted(values, |z| ga0_cdf(z, ga0).unwrap_or(f64::NAN));
    let ks_ka = ks_statistic_sorted(values, |z| ka_cdf(z, ka).unwrap_or(f64::NAN));
    let q = values[((values.len() - 1) as f64 * 0.99) as usize];
    let hi = if q > 0.0 { q } else { values[values.len() - 1].max(1e-6) };
    let edges = uniform_edges(0.0, hi, FIT_BINS)?;
    let emp = Histogram::from_samples(values, &edges)?;
    let tg = Histogram::from_cdf(&edges, |z| ga0_cdf(z, ga0).unwrap_or(0.0))?;
    let tk = Histogram::from_cdf(&edges, |z| ka_cdf(z, ka).unwrap_or(0.0))?;
    let curves = emp
        .centers()
        .into_iter()
        .zip(emp.densities())
        .zip(tg.densities().iter().zip(tk.densities()))
        .map(|((c, &e), (&g, &k))| (c, e, g, k))
        .collect();
    Ok(PopulationFit {
        count: values.len(),
        ks_ga0,
        ks_ka,
        curves,
        bin_width: hi / FIT_BINS as f64,
    })
}

/// KS distances of the masked (EH) and unmasked (H) amplitude populations
/// against fixed-parameter `G_A⁰` and `K_A` laws, with plotting curves.
/// An empty population marks the report inconclusive.
pub fn validate_populations(sar: &AmplitudeImage, mask: &EHMask, ga0: &FreryParams, ka: &FreryParams) -> Result<FitReport> {
    if sar.dims() != (mask.height, mask.width) {
        return Err(Error::shape("mask and image differ in size"));
    }
    ga0.require(crate::stats::FreryRegime::GA0)?;
    ka.require(crate::stats::FreryRegime::KA)?;
    let (mut eh, mut rest): (Vec<f64>, Vec<f64>) = (Vec::new(), Vec::new());
    for (&v, &f) in sar.pixels().iter().zip(&mask.flags) {
        if f {
            eh.push(v);
        } else {
            rest.push(v);
        }
    }
    let fit = |v: &mut Vec<f64>| -> Result<Option<PopulationFit>> {
        if v.is_empty() {
            Ok(None)
        } else {
            fit_population(v, ga0, ka).map(Some)
        }
    };
    let eh = fit(&mut eh)?;
    let h = fit(&mut rest)?;
    let inconclusive = eh.is_none() || h.is_none();
    Ok(FitReport { eh, h, inconclusive })
}
