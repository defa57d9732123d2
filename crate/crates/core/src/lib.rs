//! Detection of outlier evaluators in multi-evaluator measurement studies.
//!
//! In large measurement studies (hearing tests, lab assays, clinical scoring)
//! every participant is measured by exactly one of M evaluators, and a
//! systematically miscalibrated evaluator shifts every measurement it
//! produces. This crate implements a two-stage screen for such evaluators:
//!
//! 1. **Evaluator-effect regression** ([`regression`]): a no-intercept linear
//!    model with one indicator column per evaluator plus participant
//!    covariates, fit by ordinary least squares for single measurements or by
//!    generalized estimating equations (GEE) with a sandwich covariance when
//!    participants contribute repeated, correlated measurements.
//! 2. **Power-calibrated Wald screening** ([`inference`], [`calibration`],
//!    [`fdr`]): each evaluator effect is compared against the (optionally
//!    trimmed) mean of all effects with a Wald chi-square contrast test. The
//!    per-evaluator significance level is chosen so every test has the same
//!    power against a common alternative shift `c`, and the induced false
//!    discovery rate is estimated from those calibrated levels.
//!
//! The [`simulation`] module generates synthetic studies with planted outlier
//! evaluators and reproduces the operating characteristics of the screen
//! (estimated vs. empirical FDR, detection proportions) over replicates.
//!
//! ```
//! use evalguard_core::{
//!     dataset::build_design,
//!     fdr::detect,
//!     inference::ContrastKind,
//!     regression::fit_ols,
//!     simulation::{generate_dataset, SimConfig},
//! };
//!
//! let config = SimConfig {
//!     n_evaluators: 20,
//!     per_evaluator: 30,
//!     n_replicates: 1,
//!     ..SimConfig::default()
//! };
//! let data = generate_dataset(&config, 7).unwrap();
//! let design = build_design(&data).unwrap();
//! let fit = fit_ols(&design, &data.outcomes()).unwrap();
//! let report = detect(&fit, ContrastKind::Truncated, 0.1, 5.0, 0.8, true).unwrap();
//! assert!(report.rejected.contains(&0)); // planted high outlier
//! ```

pub mod calibration;
pub mod dataset;
pub mod error;
pub mod fdr;
pub mod inference;
pub mod linalg;
pub mod regression;
pub mod simulation;

pub use error::{Error, Result};
