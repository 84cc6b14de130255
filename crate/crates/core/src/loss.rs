//! Multi-objective training loss
//! `L = L₂ + λ_KL·L_KL + λ_∇·L_∇` with analytic gradients w.r.t. `X̂`.
//!
//! All terms are means over the pixels of the batch, so the weights keep
//! their meaning across patch and batch sizes.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::{Scalar, Tensor4};
use crate::stats::{Histogram, RayleighRef, SPECKLE_BINS, SPECKLE_RANGE};

/// Floor applied to `X̂` before forming the ratio `Y / X̂`.
pub const DIV_FLOOR: f64 = 1e-3;
/// Floor applied to the reference bin masses inside the logarithm.
pub const MASS_FLOOR: f64 = 1e-12;

/// KL weight quoted against L2 and L∇ norms summed over a whole mini-batch.
pub const SUMMED_LAMBDA_KL: f64 = 1e4;
/// Pixels in the mini-batch that weight refers to: 128 patches of 64×64.
pub const REFERENCE_BATCH_PIXELS: f64 = 128.0 * 64.0 * 64.0;
/// The same balance under the mean-per-pixel reduction used here (≈ 0.019).
/// L2 and L∇ scale together, so their relative weight needs no conversion.
pub const DEFAULT_LAMBDA_KL: f64 = SUMMED_LAMBDA_KL / REFERENCE_BATCH_PIXELS;
pub const DEFAULT_LAMBDA_GRAD: f64 = 1.0;

/// How ratio pixels are pooled into histograms for the KL term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KlPooling {
    /// One histogram over every pixel of the mini-batch.
    Batch,
    /// One histogram per patch, KL averaged over the batch.
    Patch,
}

impl fmt::Display for KlPooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KlPooling::Batch => "batch",
            KlPooling::Patch => "patch",
        })
    }
}

impl FromStr for KlPooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch" => Ok(KlPooling::Batch),
            "patch" => Ok(KlPooling::Patch),
            other => Err(Error::Config(format!("unknown KL pooling '{other}' (batch|patch)"))),
        }
    }
}

/// Loss ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    L2,
    L2Kl,
    L2Grad,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::L2, Variant::L2Kl, Variant::L2Grad, Variant::Full];
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::L2 => "L2",
            Variant::L2Kl => "L_kl",
            Variant::L2Grad => "L_grad",
            Variant::Full => "L",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_kl: f64,
    pub lambda_grad: f64,
    pub use_kl: bool,
    pub use_grad: bool,
    pub pooling: KlPooling,
    pub bins: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_kl: DEFAULT_LAMBDA_KL,
            lambda_grad: DEFAULT_LAMBDA_GRAD,
            use_kl: true,
            use_grad: true,
            pooling: KlPooling::Batch,
            bins: SPECKLE_BINS,
        }
    }
}

impl LossWeights {
    pub fn with_variant(self, v: Variant) -> Self {
        let (use_kl, use_grad) = match v {
            Variant::L2 => (false, false),
            Variant::L2Kl => (true, false),
            Variant::L2Grad => (false, true),
            Variant::Full => (true, true),
        };
        Self { use_kl, use_grad, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_kl >= 0.0 && self.lambda_grad >= 0.0) || !self.lambda_kl.is_finite() || !self.lambda_grad.is_finite() {
            return Err(Error::Config("loss weights must be finite and >= 0".into()));
        }
        if self.bins < 2 {
            return Err(Error::Config("KL histogram needs at least 2 bins".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub l2: f64,
    pub kl: f64,
    pub grad: f64,
    pub lambda_kl: f64,
    pub lambda_grad: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.l2, self.kl, self.grad, self.total].iter().all(|v| v.is_finite())
    }
}

fn check_pair<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>, what: &str) -> Result<()> {
    a.same_dims(b, what)?;
    if a.channels() != 1 {
        return Err(Error::shape(format!("{what}: loss expects single-channel images")));
    }
    Ok(())
}

/// Mean squared error and its gradient `2(X̂ − X)/count`.
pub fn l2_loss<T: Scalar>(xhat: &Tensor4<T>, x: &Tensor4<T>) -> Result<(f64, Tensor4<T>)> {
    check_pair(xhat, x, "l2 loss")?;
    let count = xhat.len() as f64;
    let mut grad = Tensor4::zeros(xhat.dims());
    let mut sum = 0.0;
    for ((g, &a), &b) in grad.data_mut().iter_mut().zip(xhat.data()).zip(x.data()) {
        let d = a.to_f64() - b.to_f64();
        sum += d * d;
        *g = T::from_f64(2.0 * d / count);
    }
    Ok((sum / count, grad))
}

/// Squared error between forward-difference gradients (replicate boundary,
/// so the last row/column difference is zero), summed over both directions
/// and averaged over pixels.
pub fn grad_loss<T: Scalar>(xhat: &Tensor4<T>, x: &Tensor4<T>) -> Result<(f64, Tensor4<T>)> {
    check_pair(xhat, x, "gradient loss")?;
    let [n, _, h, w] = xhat.dims();
    let count = xhat.len() as f64;
    let diff: Vec<f64> = xhat.data().iter().zip(x.data()).map(|(a, b)| a.to_f64() - b.to_f64()).collect();
    let mut g = vec![0.0; diff.len()];
    let mut sum = 0.0;
    for b in 0..n {
        let off = b * h * w;
        for r in 0..h {
            for c in 0..w {
                let i = off + r * w + c;
                if c + 1 < w {
                    let e = diff[i + 1] - diff[i];
                    sum += e * e;
                    g[i + 1] += 2.0 * e / count;
                    g[i] -= 2.0 * e / count;
                }
                if r + 1 < h {
                    let e = diff[i + w] - diff[i];
                    sum += e * e;
                    g[i + w] += 2.0 * e / count;
                    g[i] -= 2.0 * e / count;
                }
            }
        }
    }
    let grad = Tensor4::from_vec(xhat.dims(), g.into_iter().map(T::from_f64).collect())?;
    Ok((sum / count, grad))
}

/// Triangular-kernel bin assignment of one ratio value on `bins` uniform
/// bins of width `h` over `[0, bins·h]`: `(lower bin, weight of upper bin,
/// d(weight)/dr)`. Values outside the span of bin centers collapse onto
/// the end bins with zero derivative.
#[inline]
fn soft_bin(r: f64, bins: usize, h: f64) -> (usize, f64, f64) {
    let u = r / h - 0.5;
    if u <= 0.0 {
        (0, 0.0, 0.0)
    } else if u >= (bins - 1) as f64 {
        (bins - 2, 1.0, 0.0)
    } else {
        let i = u.floor() as usize;
        (i, u - i as f64, 1.0 / h)
    }
}

/// Reference bin masses of a Rayleigh law on the loss binning.
pub fn reference_masses(rayleigh: &RayleighRef, bins: usize) -> Result<Vec<f64>> {
    let edges = crate::stats::uniform_edges(0.0, SPECKLE_RANGE, bins)?;
    Ok(Histogram::from_cdf(&edges, |v| rayleigh.cdf(v))?.masses())
}

/// KL divergence (natural log) between a soft histogram of the estimated
/// speckle `N̂ = Y / max(X̂, ε)` and the Rayleigh reference, with the exact
/// gradient through the soft bin weights and the division.
pub fn kl_loss<T: Scalar>(
    xhat: &Tensor4<T>,
    y: &Tensor4<T>,
    rayleigh: &RayleighRef,
    bins: usize,
    pooling: KlPooling,
) -> Result<(f64, Tensor4<T>)> {
    check_pair(xhat, y, "kl loss")?;
    if bins < 2 {
        return Err(Error::param("KL histogram needs at least 2 bins"));
    }
    if y.data().iter().all(|v| v.to_f64() == 0.0) {
        return Err(Error::Degenerate("noisy input is identically zero".into()));
    }
    let q = reference_masses(rayleigh, bins)?;
    let h = SPECKLE_RANGE / bins as f64;
    let groups: Vec<(usize, usize)> = match pooling {
        KlPooling::Batch => vec![(0, xhat.len())],
        KlPooling::Patch => {
            let len = xhat.plane();
            (0..xhat.batch()).map(|b| (b * len, (b + 1) * len)).collect()
        }
    };
    let mut grad = vec![0.0; xhat.len()];
    let mut value = 0.0;
    let scale = 1.0 / groups.len() as f64;
    for (start, end) in groups {
        let count = (end - start) as f64;
        let mut bin = Vec::with_capacity(end - start);
        let mut p = vec![0.0; bins];
        for i in start..end {
            let xv = xhat.data()[i].to_f64();
            let yv = y.data()[i].to_f64();
            let denom = xv.max(DIV_FLOOR);
            let r = yv / denom;
            let (lo, f, dfdr) = soft_bin(r, bins, h);
            p[lo] += (1.0 - f) / count;
            p[lo + 1] += f / count;
            let drdx = if xv > DIV_FLOOR { -yv / (xv * xv) } else { 0.0 };
            bin.push((lo, dfdr * drdx));
        }
        // d/dP_i of Σ P log(P/Q) is log(P_i/Q_i) + 1; the constant cancels
        // because every pixel's weights sum to one.
        let dlog: Vec<f64> = p
            .iter()
            .zip(&q)
            .map(|(&pi, &qi)| if pi > 0.0 { (pi / qi.max(MASS_FLOOR)).ln() } else { 0.0 })
            .collect();
        value += scale
            * p.iter()
                .zip(&q)
                .filter(|(pi, _)| **pi > 0.0)
                .map(|(&pi, &qi)| pi * (pi / qi.max(MASS_FLOOR)).ln())
                .sum::<f64>();
        for (k, (lo, dfdx)) in bin.into_iter().enumerate() {
            if dfdx != 0.0 {
                grad[start + k] = scale * (dlog[lo + 1] - dlog[lo]) * dfdx / count;
            }
        }
    }
    let grad = Tensor4::from_vec(xhat.dims(), grad.into_iter().map(T::from_f64).collect())?;
    Ok((value.max(0.0), grad))
}

/// Weighted sum of the enabled terms; disabled terms are never evaluated.
pub fn total_loss<T: Scalar>(
    xhat: &Tensor4<T>,
    x: &Tensor4<T>,
    y: &Tensor4<T>,
    weights: &LossWeights,
) -> Result<(LossBreakdown, Tensor4<T>)> {
    weights.validate()?;
    check_pair(xhat, y, "total loss")?;
    let (l2, mut grad) = l2_loss(xhat, x)?;
    let mut out = LossBreakdown {
        l2,
        lambda_kl: weights.lambda_kl,
        lambda_grad: weights.lambda_grad,
        ..Default::default()
    };
    let mut accumulate = |g: Tensor4<T>, lambda: f64| {
        let l = T::from_f64(lambda);
        for (a, b) in grad.data_mut().iter_mut().zip(g.data()) {
            *a += l * *b;
        }
    };
    if weights.use_kl {
        let (kl, g) = kl_loss(xhat, y, &RayleighRef::default(), weights.bins, weights.pooling)?;
        out.kl = kl;
        accumulate(g, weights.lambda_kl);
    }
    if weights.use_grad {
        let (gl, g) = grad_loss(xhat, x)?;
        out.grad = gl;
        accumulate(g, weights.lambda_grad);
    }
    out.total = out.l2
        + if weights.use_kl { weights.lambda_kl * out.kl } else { 0.0 }
        + if weights.use_grad { weights.lambda_grad * out.grad } else { 0.0 };
    Ok((out, grad))
}
