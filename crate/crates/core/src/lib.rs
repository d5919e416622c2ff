//! Discovery of distributional treatment effect modifiers.
//!
//! Mean-based heterogeneity analyses compare conditional *average* treatment
//! effects across feature values and therefore miss features that shift other
//! aspects of the potential outcome distributions, such as their variance.
//! This crate measures, for each feature, how strongly its values move the
//! squared maximum mean discrepancy (MMD) between the treated and untreated
//! potential outcome distributions, and turns that importance measure into a
//! feature selection procedure with type-I error control.
//!
//! The pieces fit together as follows:
//!
//! * [`dataset`] — the observational data model, CSV interchange, and seeded
//!   synthetic benchmark generators (including discrete joint-table fixtures).
//! * [`kernels`] — Gaussian kernels, median-heuristic bandwidths, and random
//!   Fourier feature maps used to accelerate the estimator.
//! * [`propensity`] — a small feed-forward classifier for the propensity score
//!   and the inverse probability weights built from it.
//! * [`wcmmd`] — conditional weights, the exact and Fourier-feature estimators
//!   of the per-value squared MMD, and the variance-of-MMD importance measure.
//! * [`crt`] — conditional randomization tests: resampling one feature from a
//!   fitted conditional model to obtain a null distribution and a p-value.
//! * [`selection`] — Benjamini-Hochberg adjustment and the end-to-end
//!   selection pipeline.
//!
//! All stochastic operations take explicit seeds and are deterministic for a
//! fixed seed, independent of the number of worker threads.

pub mod crt;
pub mod dataset;
mod error;
pub mod kernels;
mod linalg;
pub mod propensity;
pub mod rng;
pub mod selection;
pub mod wcmmd;

pub use error::{Error, Result};
