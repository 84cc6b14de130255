//! SAR despeckling toolkit: speckle simulation, the 17-layer MONet
//! network with its multi-objective loss, training, quality metrics and
//! detection of extremely heterogeneous points from ratio images.

// `!(a > b)` is used on purpose throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod detect;
pub mod error;
pub mod image;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod speckle;
pub mod stats;
pub mod trainer;

pub use error::{Error, Result};
pub use image::AmplitudeImage;
