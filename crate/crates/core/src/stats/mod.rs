//! Distribution families, histograms and goodness-of-fit statistics
//! shared by the loss, metrics and detection code.

pub mod dist;
pub mod hist;
pub mod ks;

pub use dist::{
    bessel_k_scaled, ga0_cdf, ga0_pdf, ka_cdf, ka_pdf, rayleigh_cdf, sample_ga0, sample_ka, sqrt_gamma_cdf,
    sqrt_gamma_pdf, FreryParams, FreryRegime, RayleighRef, CANONICAL_SIGMA,
};
pub use hist::{kl_divergence, speckle_edges, uniform_edges, Histogram, KL_FLOOR, SPECKLE_BINS, SPECKLE_RANGE};
pub use ks::{kolmogorov_critical, kolmogorov_pvalue, ks_statistic};
