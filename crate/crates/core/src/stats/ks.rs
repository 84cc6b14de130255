use crate::error::{Error, Result};

/// One-sample Kolmogorov–Smirnov statistic `sup |F_n − F|`.
///
/// Both one-sided gaps are evaluated at every sorted sample point.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::param("KS statistic needs at least one sample"));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    Ok(ks_statistic_sorted(&sorted, cdf))
}

pub(crate) fn ks_statistic_sorted(sorted: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let n = sorted.len() as f64;
    sorted.iter().enumerate().fold(0.0f64, |acc, (i, &x)| {
        let f = cdf(x);
        let above = (i + 1) as f64 / n - f;
        let below = f - i as f64 / n;
        acc.max(above).max(below)
    })
}

/// Asymptotic Kolmogorov critical value `c(α) = sqrt(−ln(α/2)/2)`;
/// reject when `D > c(α)/√n`.
pub fn kolmogorov_critical(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::param(format!("significance must lie in (0,1), got {alpha}")));
    }
    Ok((-(alpha / 2.0).ln() / 2.0).sqrt())
}

/// Asymptotic p-value `Q_KS(√n·D)` from the Kolmogorov series.
pub fn kolmogorov_pvalue(d: f64, n: usize) -> f64 {
    let t = (n as f64).sqrt() * d;
    if t < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        let term = (-2.0 * k * k * t * t).exp();
        sum += if k as i64 % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}
