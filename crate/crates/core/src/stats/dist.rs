//! Amplitude-domain densities for fully developed speckle and the Frery
//! backscatter families, with product-model samplers.
//!
//! Conventions (amplitude `z = sqrt(I)`, intensity `I = X·S`):
//!
//! * speckle intensity `S ~ Gamma(shape L, rate L)` (unit mean);
//! * `K_A(α, λ, L)`: backscatter `X ~ Gamma(shape α, rate λ)`;
//! * `G_A⁰(α, γ, L)`: backscatter `X ~ InverseGamma(shape −α, scale γ)`.
//!
//! The resulting amplitude densities are
//!
//! ```text
//! K_A:  f(z) = 4λLz / (Γ(α)Γ(L)) · (λLz²)^((α+L)/2 − 1) · K_{α−L}(2z·sqrt(λL))
//! G_A⁰: f(z) = 2 L^L Γ(L−α) z^(2L−1) / (γ^α Γ(L) Γ(−α) (γ + Lz²)^(L−α))
//! ```

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use statrs::function::beta::beta_reg;
use statrs::function::gamma::{gamma_lr, ln_gamma};

use crate::error::{Error, Result};
use crate::rng::seeded;

/// Rayleigh scale of single-look amplitude speckle with unit power.
pub const CANONICAL_SIGMA: f64 = std::f64::consts::FRAC_1_SQRT_2;

fn check_looks(looks: u32) -> Result<()> {
    if looks == 0 {
        return Err(Error::param("number of looks must be >= 1"));
    }
    Ok(())
}

fn check_amplitude(n: f64) -> Result<()> {
    if n.is_nan() || n < 0.0 {
        return Err(Error::Domain(format!("amplitude must be >= 0, got {n}")));
    }
    Ok(())
}

/// Square-root-Gamma amplitude density of fully developed `L`-look speckle.
pub fn sqrt_gamma_pdf(n: f64, looks: u32) -> Result<f64> {
    check_looks(looks)?;
    check_amplitude(n)?;
    if n == 0.0 {
        return Ok(0.0);
    }
    let l = looks as f64;
    let ln = std::f64::consts::LN_2 + l * l.ln() - ln_gamma(l) + (2.0 * l - 1.0) * n.ln() - l * n * n;
    Ok(ln.exp())
}

/// CDF of the square-root-Gamma amplitude law: `P(L, L·n²)`.
pub fn sqrt_gamma_cdf(n: f64, looks: u32) -> Result<f64> {
    check_looks(looks)?;
    check_amplitude(n)?;
    if n == 0.0 {
        return Ok(0.0);
    }
    let l = looks as f64;
    Ok(gamma_lr(l, l * n * n))
}

/// Rayleigh reference distribution for the ratio image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayleighRef {
    pub sigma: f64,
}

impl Default for RayleighRef {
    fn default() -> Self {
        Self { sigma: CANONICAL_SIGMA }
    }
}

impl RayleighRef {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::param(format!("Rayleigh sigma must be positive, got {sigma}")));
        }
        Ok(Self { sigma })
    }

    pub fn pdf(&self, n: f64) -> f64 {
        if n <= 0.0 {
            return 0.0;
        }
        let s2 = self.sigma * self.sigma;
        n / s2 * (-n * n / (2.0 * s2)).exp()
    }

    pub fn cdf(&self, n: f64) -> f64 {
        if n <= 0.0 {
            return 0.0;
        }
        -(-n * n / (2.0 * self.sigma * self.sigma)).exp_m1()
    }

    pub fn mean(&self) -> f64 {
        self.sigma * (std::f64::consts::PI / 2.0).sqrt()
    }
}

/// `F(n) = 1 − exp(−n²)`, the canonical single-look speckle CDF.
pub fn rayleigh_cdf(n: f64) -> Result<f64> {
    check_amplitude(n)?;
    Ok(RayleighRef::default().cdf(n))
}

/// Modified Bessel function of the second kind scaled by `e^x`:
/// `K_ν(x)·e^x = ∫₀^∞ exp(−x(cosh t − 1)) cosh(νt) dt`.
///
/// The integrand decays double-exponentially, so the trapezoidal rule
/// converges geometrically in the step size.
pub fn bessel_k_scaled(nu: f64, x: f64) -> f64 {
    assert!(x > 0.0, "bessel_k_scaled requires x > 0");
    let nu = nu.abs();
    let h = 0.01;
    let mut sum = 0.5;
    let mut k = 1usize;
    loop {
        let t = k as f64 * h;
        let a = -x * (t.cosh() - 1.0);
        let term = 0.5 * ((a + nu * t).exp() + (a - nu * t).exp());
        sum += term;
        // the exponent is eventually decreasing in t
        if a + nu * t < -745.0 && x * t.sinh() > nu {
            break;
        }
        k += 1;
    }
    sum * h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FreryRegime {
    /// Heterogeneous returns: `α > 0, γ = 0, λ > 0`.
    KA,
    /// Extremely heterogeneous returns: `α < 0, γ > 0, λ = 0`.
    GA0,
}

/// Parameters of the generalized `G_A(α, γ, λ, L)` amplitude family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FreryParams {
    pub alpha: f64,
    pub gamma: f64,
    pub lam: f64,
    pub looks: u32,
}

impl FreryParams {
    pub fn ka(alpha: f64, lam: f64, looks: u32) -> Result<Self> {
        let p = Self { alpha, gamma: 0.0, lam, looks };
        p.require(FreryRegime::KA)?;
        Ok(p)
    }

    pub fn ga0(alpha: f64, gamma: f64, looks: u32) -> Result<Self> {
        let p = Self { alpha, gamma, lam: 0.0, looks };
        p.require(FreryRegime::GA0)?;
        Ok(p)
    }

    /// Heterogeneous-area parameters `K_A(2, 7.5, 1)`.
    pub fn heterogeneous() -> Self {
        Self { alpha: 2.0, gamma: 0.0, lam: 7.5, looks: 1 }
    }

    /// Extremely heterogeneous parameters `G_A⁰(−0.5, 0.145, 1)`.
    pub fn extremely_heterogeneous() -> Self {
        Self { alpha: -0.5, gamma: 0.145, lam: 0.0, looks: 1 }
    }

    pub fn regime(&self) -> Option<FreryRegime> {
        if self.looks == 0 {
            return None;
        }
        if self.alpha > 0.0 && self.gamma == 0.0 && self.lam > 0.0 {
            Some(FreryRegime::KA)
        } else if self.alpha < 0.0 && self.gamma > 0.0 && self.lam == 0.0 {
            Some(FreryRegime::GA0)
        } else {
            None
        }
    }

    pub fn require(&self, regime: FreryRegime) -> Result<()> {
        if self.regime() == Some(regime) && self.alpha.is_finite() && self.gamma.is_finite() && self.lam.is_finite() {
            Ok(())
        } else {
            Err(Error::param(format!("{self:?} is not a valid {regime:?} parameter set")))
        }
    }
}

pub fn ka_pdf(z: f64, p: &FreryParams) -> Result<f64> {
    p.require(FreryRegime::KA)?;
    check_amplitude(z)?;
    if z == 0.0 {
        return Ok(0.0);
    }
    let (a, lam, l) = (p.alpha, p.lam, p.looks as f64);
    let x = 2.0 * z * (lam * l).sqrt();
    let ln = (4.0 * lam * l * z).ln() - ln_gamma(a) - ln_gamma(l)
        + ((a + l) / 2.0 - 1.0) * (lam * l * z * z).ln()
        + bessel_k_scaled(a - l, x).ln()
        - x;
    Ok(ln.exp())
}

/// Closed-form `K_A` CDF for integer looks:
/// `F(z) = 1 − Σ_{k<L} (2/k!Γ(α)) (λc)^((α+k)/2) K_{α−k}(2√(λc))`, `c = Lz²`.
pub fn ka_cdf(z: f64, p: &FreryParams) -> Result<f64> {
    p.require(FreryRegime::KA)?;
    check_amplitude(z)?;
    if z == 0.0 {
        return Ok(0.0);
    }
    let (a, lam, l) = (p.alpha, p.lam, p.looks as f64);
    let c = l * z * z;
    let x = 2.0 * (lam * c).sqrt();
    let mut tail = 0.0;
    for k in 0..p.looks {
        let kf = k as f64;
        let ln = std::f64::consts::LN_2 - ln_gamma(kf + 1.0) - ln_gamma(a)
            + (a + kf) / 2.0 * (lam * c).ln()
            + bessel_k_scaled(a - kf, x).ln()
            - x;
        tail += ln.exp();
    }
    Ok((1.0 - tail).clamp(0.0, 1.0))
}

pub fn ga0_pdf(z: f64, p: &FreryParams) -> Result<f64> {
    p.require(FreryRegime::GA0)?;
    check_amplitude(z)?;
    if z == 0.0 {
        return Ok(0.0);
    }
    let (a, g, l) = (p.alpha, p.gamma, p.looks as f64);
    let ln = std::f64::consts::LN_2 + l * l.ln() + ln_gamma(l - a) - a * g.ln() - ln_gamma(l) - ln_gamma(-a)
        + (2.0 * l - 1.0) * z.ln()
        - (l - a) * (g + l * z * z).ln();
    Ok(ln.exp())
}

/// `G_A⁰` CDF through the Beta representation `Lz²/γ = B/(1−B)`, `B ~ Beta(L, −α)`.
pub fn ga0_cdf(z: f64, p: &FreryParams) -> Result<f64> {
    p.require(FreryRegime::GA0)?;
    check_amplitude(z)?;
    if z == 0.0 {
        return Ok(0.0);
    }
    let t = p.looks as f64 * z * z / p.gamma;
    Ok(beta_reg(p.looks as f64, -p.alpha, t / (1.0 + t)))
}

/// Unit-mean Gamma law of `L`-look speckle intensity.
pub(crate) fn speckle_distribution(looks: u32) -> Result<Gamma<f64>> {
    check_looks(looks)?;
    let l = looks as f64;
    Gamma::new(l, 1.0 / l).map_err(|e| Error::param(e.to_string()))
}

fn product_samples<R: Rng>(
    rng: &mut R,
    count: usize,
    looks: u32,
    mut texture: impl FnMut(&mut R) -> f64,
) -> Result<Vec<f64>> {
    let speckle = speckle_distribution(looks)?;
    Ok((0..count)
        .map(|_| {
            let x = texture(rng);
            let s = speckle.sample(rng);
            (x * s).sqrt()
        })
        .collect())
}

/// Product-model `K_A` samples: `sqrt(X·S)` with Gamma texture.
pub fn sample_ka(count: usize, p: &FreryParams, seed: u64) -> Result<Vec<f64>> {
    p.require(FreryRegime::KA)?;
    let texture = Gamma::new(p.alpha, 1.0 / p.lam).map_err(|e| Error::param(e.to_string()))?;
    let mut rng = seeded(seed);
    product_samples(&mut rng, count, p.looks, |r| texture.sample(r))
}

/// Product-model `G_A⁰` samples: `sqrt(X·S)` with inverse-Gamma texture.
pub fn sample_ga0(count: usize, p: &FreryParams, seed: u64) -> Result<Vec<f64>> {
    p.require(FreryRegime::GA0)?;
    let base = Gamma::new(-p.alpha, 1.0).map_err(|e| Error::param(e.to_string()))?;
    let gamma = p.gamma;
    let mut rng = seeded(seed);
    product_samples(&mut rng, count, p.looks, |r| gamma / base.sample(r))
}
