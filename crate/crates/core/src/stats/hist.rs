use crate::error::{Error, Result};

/// Density floor applied to the reference histogram before the logarithm.
pub const KL_FLOOR: f64 = 1e-12;

/// Default speckle binning: 256 equal bins over `[0, 4]`.
pub const SPECKLE_BINS: usize = 256;
pub const SPECKLE_RANGE: f64 = 4.0;

/// Piecewise-constant density on strictly increasing bin edges.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    edges: Vec<f64>,
    densities: Vec<f64>,
}

fn check_edges(edges: &[f64]) -> Result<()> {
    if edges.len() < 2 {
        return Err(Error::param("a histogram needs at least two bin edges"));
    }
    if edges.windows(2).any(|w| !(w[1] > w[0]) || !w[0].is_finite() || !w[1].is_finite()) {
        return Err(Error::param("bin edges must be finite and strictly increasing"));
    }
    Ok(())
}

pub fn uniform_edges(lo: f64, hi: f64, bins: usize) -> Result<Vec<f64>> {
    if bins == 0 || !(hi > lo) {
        return Err(Error::param(format!("cannot split [{lo}, {hi}] into {bins} bins")));
    }
    let w = (hi - lo) / bins as f64;
    Ok((0..=bins).map(|i| lo + i as f64 * w).collect())
}

pub fn speckle_edges() -> Vec<f64> {
    uniform_edges(0.0, SPECKLE_RANGE, SPECKLE_BINS).expect("static binning is valid")
}

impl Histogram {
    /// Normalized histogram of `samples`; out-of-range samples are clamped
    /// into the end bins.
    pub fn from_samples(samples: &[f64], edges: &[f64]) -> Result<Self> {
        check_edges(edges)?;
        if samples.is_empty() {
            return Err(Error::param("histogram of an empty sample set"));
        }
        let bins = edges.len() - 1;
        let mut counts = vec![0.0; bins];
        for &s in samples {
            if s.is_nan() {
                return Err(Error::NonFinite("NaN sample in histogram input".into()));
            }
            // partition_point gives the number of edges <= s
            let idx = edges.partition_point(|&e| e <= s).saturating_sub(1).min(bins - 1);
            counts[idx] += 1.0;
        }
        Self::from_masses(edges, &counts)
    }

    /// Builds a histogram from unnormalized bin masses.
    pub fn from_masses(edges: &[f64], masses: &[f64]) -> Result<Self> {
        check_edges(edges)?;
        if masses.len() + 1 != edges.len() {
            return Err(Error::shape(format!("{} masses for {} bins", masses.len(), edges.len() - 1)));
        }
        if masses.iter().any(|m| !(*m >= 0.0) || !m.is_finite()) {
            return Err(Error::param("bin masses must be finite and nonnegative"));
        }
        let total: f64 = masses.iter().sum();
        if total <= 0.0 {
            return Err(Error::Degenerate("histogram carries no mass".into()));
        }
        let densities = masses
            .iter()
            .zip(edges.windows(2))
            .map(|(m, w)| m / total / (w[1] - w[0]))
            .collect();
        Ok(Self { edges: edges.to_vec(), densities })
    }

    /// Per-bin integral of a continuous CDF; mass outside the edges is
    /// folded into the end bins to mirror the clamping of samples.
    pub fn from_cdf(edges: &[f64], cdf: impl Fn(f64) -> f64) -> Result<Self> {
        check_edges(edges)?;
        let bins = edges.len() - 1;
        let masses: Vec<f64> = (0..bins)
            .map(|i| {
                let lo = if i == 0 { 0.0 } else { cdf(edges[i]) };
                let hi = if i + 1 == bins { 1.0 } else { cdf(edges[i + 1]) };
                (hi - lo).max(0.0)
            })
            .collect();
        Self::from_masses(edges, &masses)
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn densities(&self) -> &[f64] {
        &self.densities
    }

    pub fn bins(&self) -> usize {
        self.densities.len()
    }

    pub fn centers(&self) -> Vec<f64> {
        self.edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }

    /// Probability mass per bin (`density · width`).
    pub fn masses(&self) -> Vec<f64> {
        self.densities
            .iter()
            .zip(self.edges.windows(2))
            .map(|(d, w)| d * (w[1] - w[0]))
            .collect()
    }
}

/// `Σ P(i) log₂(P(i) / max(Q(i), ε))` over bin probability masses.
pub fn kl_divergence(p: &Histogram, q: &Histogram) -> Result<f64> {
    if p.edges != q.edges {
        return Err(Error::param("KL divergence between histograms with different bin edges"));
    }
    let kl = p
        .masses()
        .iter()
        .zip(q.masses())
        .filter(|(pm, _)| **pm > 0.0)
        .map(|(pm, qm)| pm * (pm / qm.max(KL_FLOOR)).log2())
        .sum::<f64>();
    Ok(kl.max(0.0))
}
