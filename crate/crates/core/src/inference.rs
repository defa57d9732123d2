//! Stage two: Wald tests of each evaluator against the panel consensus.
//!
//! For evaluator `j` the null is "no difference from the average of the
//! others", expressed as a contrast vector `L` with `L' beta = 0`. Two
//! consensus definitions are supported:
//!
//! * **untruncated** — the plain mean of the other evaluators' effects:
//!   `L_j = (M-1)/M`, `-1/M` elsewhere;
//! * **truncated** — a symmetrically trimmed mean that keeps extreme
//!   evaluators (the very ones being hunted) from dragging the consensus
//!   toward themselves: the `floor(M*delta)` smallest and largest effects
//!   are trimmed before averaging, and trimmed evaluators get weight zero.
//!
//! In both cases `L' beta_hat` equals `beta_hat_j` minus the (possibly
//! trimmed) mean of the panel, and the squared standardized estimate is
//! referred to the chi-square(1) distribution.

use crate::calibration::chisq1_sf;
use crate::error::{Error, Result};
use crate::regression::FitResult;
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

/// Which consensus the per-evaluator contrasts compare against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ContrastKind {
    /// Mean of all evaluators.
    Untruncated,
    /// Symmetrically trimmed mean (trim fraction `delta` per tail).
    Truncated,
}

/// A single evaluator-vs-consensus contrast.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastSpec {
    /// Zero-based index of the evaluator under test.
    pub j: usize,
    pub kind: ContrastKind,
    /// Trim fraction per tail (ignored by [`ContrastKind::Untruncated`]).
    pub delta: f64,
    /// Contrast weights over the evaluator effects; they sum to zero.
    pub weights: Array1<f64>,
    /// Evaluator indices trimmed out of the consensus (ascending; empty for
    /// the untruncated kind).
    pub trimmed: Vec<usize>,
}

impl ContrastSpec {
    /// `L' beta_hat` — the evaluator's gap from the consensus.
    pub fn estimate(&self, beta_hat: &Array1<f64>) -> Result<f64> {
        if beta_hat.len() != self.weights.len() {
            return Err(Error::LengthMismatch {
                left: "contrast weights",
                left_len: self.weights.len(),
                right: "beta_hat",
                right_len: beta_hat.len(),
            });
        }
        Ok(self.weights.dot(beta_hat))
    }

    /// `L' Sigma L` — the variance of the gap estimate. A non-positive or
    /// non-finite value cannot be tested and is an error.
    pub fn variance(&self, beta_cov: &Array2<f64>) -> Result<f64> {
        if beta_cov.nrows() != self.weights.len() || beta_cov.ncols() != self.weights.len() {
            return Err(Error::LengthMismatch {
                left: "contrast weights",
                left_len: self.weights.len(),
                right: "covariance rows",
                right_len: beta_cov.nrows(),
            });
        }
        let v = self.weights.dot(&beta_cov.dot(&self.weights));
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::DegenerateContrastVariance { value: v });
        }
        Ok(v)
    }
}

fn check_trim_inputs(beta_hat: &Array1<f64>, delta: f64) -> Result<()> {
    if beta_hat.len() < 2 {
        return Err(Error::InvalidParameter(format!(
            "need at least 2 evaluators, got {}",
            beta_hat.len()
        )));
    }
    if beta_hat.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter(
            "evaluator effects must be finite".into(),
        ));
    }
    if !(0.0..0.5).contains(&delta) {
        return Err(Error::InvalidParameter(format!(
            "trim fraction must lie in [0, 0.5), got {delta}"
        )));
    }
    Ok(())
}

/// Number of evaluators trimmed from each tail.
fn trim_count(m: usize, delta: f64) -> usize {
    (m as f64 * delta).floor() as usize
}

/// Ascending stable order of the effects: ties broken by original index, so
/// the trimmed set is a deterministic function of the values alone.
fn sorted_order(beta_hat: &Array1<f64>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..beta_hat.len()).collect();
    order.sort_by(|&a, &b| {
        beta_hat[a]
            .partial_cmp(&beta_hat[b])
            .expect("finite effects")
            .then(a.cmp(&b))
    });
    order
}

/// Indices of the `floor(M*delta)` smallest and largest effects — the
/// evaluators excluded from the truncated consensus. Ascending order.
pub fn trimmed_indices(beta_hat: &Array1<f64>, delta: f64) -> Result<Vec<usize>> {
    check_trim_inputs(beta_hat, delta)?;
    let m = beta_hat.len();
    let t = trim_count(m, delta);
    let order = sorted_order(beta_hat);
    let mut trimmed: Vec<usize> = order[..t].iter().chain(order[m - t..].iter()).copied().collect();
    trimmed.sort_unstable();
    Ok(trimmed)
}

/// Mean of the effects after trimming `floor(M*delta)` from each tail.
pub fn truncated_mean(beta_hat: &Array1<f64>, delta: f64) -> Result<f64> {
    check_trim_inputs(beta_hat, delta)?;
    let m = beta_hat.len();
    let t = trim_count(m, delta);
    let order = sorted_order(beta_hat);
    let kept = &order[t..m - t];
    let sum: f64 = kept.iter().map(|&i| beta_hat[i]).sum();
    Ok(sum / kept.len() as f64)
}

/// Build the contrast for evaluator `j`. `beta_hat` supplies both the panel
/// size and, for the truncated kind, the effects that determine the trimmed
/// set.
pub fn make_contrast(
    j: usize,
    beta_hat: &Array1<f64>,
    kind: ContrastKind,
    delta: f64,
) -> Result<ContrastSpec> {
    check_trim_inputs(beta_hat, delta)?;
    let m = beta_hat.len();
    if j >= m {
        return Err(Error::InvalidParameter(format!(
            "evaluator index {j} out of range for {m} evaluators"
        )));
    }
    let trimmed = match kind {
        ContrastKind::Untruncated => Vec::new(),
        ContrastKind::Truncated => trimmed_indices(beta_hat, delta)?,
    };
    Ok(contrast_from_trimmed(j, m, kind, delta, &trimmed))
}

/// Contrasts for every evaluator, sharing a single trimmed-set computation.
pub fn all_contrasts(
    beta_hat: &Array1<f64>,
    kind: ContrastKind,
    delta: f64,
) -> Result<Vec<ContrastSpec>> {
    check_trim_inputs(beta_hat, delta)?;
    let m = beta_hat.len();
    let trimmed = match kind {
        ContrastKind::Untruncated => Vec::new(),
        ContrastKind::Truncated => trimmed_indices(beta_hat, delta)?,
    };
    Ok((0..m)
        .map(|j| contrast_from_trimmed(j, m, kind, delta, &trimmed))
        .collect())
}

fn contrast_from_trimmed(
    j: usize,
    m: usize,
    kind: ContrastKind,
    delta: f64,
    trimmed: &[usize],
) -> ContrastSpec {
    let mut w = Array1::<f64>::zeros(m);
    match kind {
        ContrastKind::Untruncated => {
            let mf = m as f64;
            w.fill(-1.0 / mf);
            w[j] = (mf - 1.0) / mf;
        }
        ContrastKind::Truncated => {
            let kept = (m - trimmed.len()) as f64;
            let is_trimmed = |k: usize| trimmed.binary_search(&k).is_ok();
            for k in 0..m {
                w[k] = if is_trimmed(k) { 0.0 } else { -1.0 / kept };
            }
            // the tested evaluator compares itself to the trimmed consensus;
            // if it was itself trimmed it contributes nothing to that mean
            w[j] = if is_trimmed(j) { 1.0 } else { 1.0 - 1.0 / kept };
        }
    }
    ContrastSpec {
        j,
        kind,
        delta,
        weights: w,
        trimmed: trimmed.to_vec(),
    }
}

/// One evaluator's test against the consensus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    /// Zero-based evaluator index.
    pub j: usize,
    /// `L' beta_hat`.
    pub estimate: f64,
    /// `L' Sigma L`.
    pub variance: f64,
    /// Squared standardized gap, chi-square(1) under the null.
    pub statistic: f64,
    /// Upper-tail probability, clamped into `(0, 1]`.
    pub p_value: f64,
}

/// Wald test of one contrast against a fitted model.
pub fn wald_test(fit: &FitResult, spec: &ContrastSpec) -> Result<TestResult> {
    if !fit.converged {
        return Err(Error::NotConverged);
    }
    let estimate = spec.estimate(&fit.beta_hat)?;
    let variance = spec.variance(&fit.beta_cov)?;
    let statistic = estimate * estimate / variance;
    let p_value = chisq1_sf(statistic).max(f64::MIN_POSITIVE);
    Ok(TestResult {
        j: spec.j,
        estimate,
        variance,
        statistic,
        p_value,
    })
}

/// Test every evaluator against the chosen consensus.
pub fn test_all(fit: &FitResult, kind: ContrastKind, delta: f64) -> Result<Vec<TestResult>> {
    let contrasts = all_contrasts(&fit.beta_hat, kind, delta)?;
    contrasts.iter().map(|spec| wald_test(fit, spec)).collect()
}
