//! Stage one: estimate per-evaluator effects by no-intercept regression.
//!
//! The model is `y = T beta + X gamma + Z eta + e` where `T` holds one
//! indicator column per evaluator, so `beta_j` is evaluator `j`'s level after
//! covariate adjustment. Two engines share the [`FitResult`] shape:
//!
//! * [`fit_ols`] for independent single measurements, with either the
//!   model-based covariance `sigma^2 (X'X)^-1` or the HC0 sandwich;
//! * [`fit_gee`] for repeated measurements, an identity-link GEE whose
//!   working correlation (independence, exchangeable, or unstructured) is
//!   re-estimated by moments between scoring updates, and whose covariance is
//!   the robust sandwich `A^-1 B A^-1` — consistent even when the working
//!   correlation is wrong.

use crate::dataset::{Dataset, DesignMatrix};
use crate::error::{Error, Result};
use crate::linalg;
use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Working correlation structure for [`fit_gee`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WorkingCorrelation {
    Independence,
    /// One common within-participant correlation.
    Exchangeable,
    /// A free symmetric correlation matrix; requires every participant to
    /// have the same number of measurements.
    Unstructured,
}

/// The working correlation actually estimated during a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum EstimatedCorrelation {
    Independence,
    Exchangeable { alpha: f64 },
    Unstructured { matrix: Array2<f64> },
}

/// Covariance estimator for [`fit_ols_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CovarianceKind {
    /// `sigma_hat^2 (X'X)^-1`.
    ModelBased,
    /// Heteroscedasticity-robust HC0 sandwich.
    RobustHc0,
}

/// Iteration control for [`fit_gee`]: stop when the parameter step's max
/// norm falls below `tol`, fail after `max_iter` scoring updates.
#[derive(Debug, Clone, Copy)]
pub struct SolverControl {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverControl {
    fn default() -> Self {
        SolverControl {
            tol: 1e-8,
            max_iter: 100,
        }
    }
}

/// A fitted evaluator-effect model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    /// Evaluator effects, indexed like the dataset's dense evaluator ids.
    pub beta_hat: Array1<f64>,
    /// Participant-covariate coefficients.
    pub gamma_hat: Array1<f64>,
    /// Measurement-covariate coefficients.
    pub eta_hat: Array1<f64>,
    /// Covariance of the full coefficient vector (evaluators first).
    pub full_cov: Array2<f64>,
    /// Evaluator block of `full_cov` — the input to contrast variances.
    pub beta_cov: Array2<f64>,
    /// Residual variance (OLS) or estimated dispersion (GEE).
    pub dispersion: f64,
    pub working_correlation: EstimatedCorrelation,
    /// Scoring updates performed (1 for the closed-form OLS solve).
    pub n_iterations: usize,
    pub converged: bool,
    pub n_obs: usize,
    /// Original evaluator identifiers, aligned with `beta_hat`.
    pub evaluator_ids: Vec<String>,
    /// Design column names, aligned with the full coefficient vector.
    pub column_names: Vec<String>,
}

impl FitResult {
    pub fn n_evaluators(&self) -> usize {
        self.beta_hat.len()
    }

    /// Full coefficient vector `[beta | gamma | eta]`.
    pub fn theta(&self) -> Array1<f64> {
        let mut out = Vec::with_capacity(
            self.beta_hat.len() + self.gamma_hat.len() + self.eta_hat.len(),
        );
        out.extend(self.beta_hat.iter());
        out.extend(self.gamma_hat.iter());
        out.extend(self.eta_hat.iter());
        Array1::from_vec(out)
    }
}

/// Least-squares fit with the model-based covariance. See [`fit_ols_with`].
pub fn fit_ols(design: &DesignMatrix, y: &Array1<f64>) -> Result<FitResult> {
    fit_ols_with(design, y, CovarianceKind::ModelBased)
}

/// Least-squares fit of the no-intercept evaluator model, for designs where
/// every measurement is independent (one per participant).
pub fn fit_ols_with(
    design: &DesignMatrix,
    y: &Array1<f64>,
    covariance: CovarianceKind,
) -> Result<FitResult> {
    check_design(design, y)?;
    let x = &design.x;
    let (n, d) = (x.nrows(), x.ncols());

    let gram = x.t().dot(x);
    check_rank(design, &gram)?;
    // factor through the equilibrated Gram: the raw normal equations square
    // the design's column-scale spread, and solving them unscaled costs
    // several digits on designs mixing indicators with squared covariates
    let chol = linalg::EquilibratedChol::new(&gram).ok_or_else(|| Error::RankDeficient {
        columns: design.columns.clone(),
    })?;
    let theta = chol.solve(&x.t().dot(y));
    let resid = y - &x.dot(&theta);
    let rss: f64 = resid.iter().map(|e| e * e).sum();
    let sigma2 = rss / (n - d) as f64;

    let gram_inv = chol.inverse();
    let full_cov = match covariance {
        CovarianceKind::ModelBased => &gram_inv * sigma2,
        CovarianceKind::RobustHc0 => {
            // meat = sum_r e_r^2 x_r x_r'
            let mut meat = Array2::<f64>::zeros((d, d));
            for (r, row) in x.rows().into_iter().enumerate() {
                let w = resid[r] * resid[r];
                if w == 0.0 {
                    continue;
                }
                for i in 0..d {
                    let wi = w * row[i];
                    if wi == 0.0 {
                        continue;
                    }
                    for j in 0..d {
                        meat[[i, j]] += wi * row[j];
                    }
                }
            }
            gram_inv.dot(&meat).dot(&gram_inv)
        }
    };

    assemble(
        design,
        theta,
        full_cov,
        sigma2,
        EstimatedCorrelation::Independence,
        1,
        n,
    )
}

/// Identity-link GEE fit for repeated-measurement studies. Starts from the
/// least-squares solution, alternates moment re-estimation of dispersion and
/// working-correlation parameters with scoring updates of the coefficients,
/// and reports the robust sandwich covariance. Non-convergence within
/// `ctrl.max_iter` updates is an error.
pub fn fit_gee(
    data: &Dataset,
    design: &DesignMatrix,
    corr: WorkingCorrelation,
    ctrl: &SolverControl,
) -> Result<FitResult> {
    let y = data.outcomes();
    check_design(design, &y)?;
    if data.n_records() != design.n_rows() {
        return Err(Error::LengthMismatch {
            left: "dataset records",
            left_len: data.n_records(),
            right: "design rows",
            right_len: design.n_rows(),
        });
    }
    if !(ctrl.tol > 0.0) || !ctrl.tol.is_finite() || ctrl.max_iter == 0 {
        return Err(Error::InvalidParameter(format!(
            "solver control requires tol > 0 and max_iter >= 1, got tol={} max_iter={}",
            ctrl.tol, ctrl.max_iter
        )));
    }
    let t_i = data.t_i();
    if corr == WorkingCorrelation::Unstructured {
        let t0 = t_i[0];
        if t_i.iter().any(|&t| t != t0) {
            return Err(Error::InvalidParameter(
                "unstructured working correlation requires the same number of \
                 measurements for every participant"
                    .into(),
            ));
        }
    }

    let x = &design.x;
    let (n, d) = (x.nrows(), x.ncols());
    let gram = x.t().dot(x);
    check_rank(design, &gram)?;
    let chol = linalg::EquilibratedChol::new(&gram).ok_or_else(|| Error::RankDeficient {
        columns: design.columns.clone(),
    })?;
    let mut theta = chol.solve(&x.t().dot(&y));

    let bounds = data.cluster_bounds();
    let mut n_iterations = 0usize;
    let mut last_step = f64::NAN;
    let mut converged = false;

    for iter in 1..=ctrl.max_iter {
        let resid = &y - &x.dot(&theta);
        let (phi, est) = estimate_nuisance(corr, &resid, bounds, &t_i, d)?;
        let winv = working_inverses(&est, &t_i, phi)?;

        // score U = sum_i X_i' V_i^-1 r_i and slope A = sum_i X_i' V_i^-1 X_i
        let mut a = Array2::<f64>::zeros((d, d));
        let mut u = Array1::<f64>::zeros(d);
        for &(lo, hi) in bounds {
            let xi = x.slice(s![lo..hi, ..]);
            let ri = resid.slice(s![lo..hi]);
            let w = &winv[&(hi - lo)];
            let wxi = w.dot(&xi);
            general_mat_mul(1.0, &xi.t(), &wxi, 1.0, &mut a);
            u += &xi.t().dot(&w.dot(&ri));
        }
        let delta = match linalg::EquilibratedChol::new(&a) {
            Some(ca) => ca.solve(&u),
            None => {
                log::warn!(
                    "scoring slope matrix not positive definite; \
                     using pseudo-inverse for the update"
                );
                linalg::pinv_sym_equilibrated(&a, 1e-12).dot(&u)
            }
        };
        theta += &delta;
        n_iterations = iter;
        last_step = delta.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if last_step < ctrl.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::DidNotConverge {
            iterations: n_iterations,
            last_step,
        });
    }

    // sandwich covariance at the final coefficients
    let resid = &y - &x.dot(&theta);
    let (phi, est) = estimate_nuisance(corr, &resid, bounds, &t_i, d)?;
    let winv = working_inverses(&est, &t_i, phi)?;
    let mut a = Array2::<f64>::zeros((d, d));
    let mut b = Array2::<f64>::zeros((d, d));
    for &(lo, hi) in bounds {
        let xi = x.slice(s![lo..hi, ..]);
        let ri = resid.slice(s![lo..hi]);
        let w = &winv[&(hi - lo)];
        let wxi = w.dot(&xi);
        general_mat_mul(1.0, &xi.t(), &wxi, 1.0, &mut a);
        let v = xi.t().dot(&w.dot(&ri));
        for i in 0..d {
            let vi = v[i];
            if vi == 0.0 {
                continue;
            }
            for j in 0..d {
                b[[i, j]] += vi * v[j];
            }
        }
    }
    let a_inv = match linalg::EquilibratedChol::new(&a) {
        Some(ca) => ca.inverse(),
        None => {
            log::warn!(
                "sandwich bread matrix not positive definite; \
                 using pseudo-inverse for the covariance"
            );
            linalg::pinv_sym_equilibrated(&a, 1e-12)
        }
    };
    let full_cov = a_inv.dot(&b).dot(&a_inv);

    assemble(design, theta, full_cov, phi, est, n_iterations, n)
}

/// The GEE estimating-equation value `U(theta) = sum_i X_i' V_i^-1 r_i` at an
/// arbitrary coefficient vector, exposed so callers can check that a reported
/// solution actually zeroes the equations.
pub fn gee_score(
    data: &Dataset,
    design: &DesignMatrix,
    theta: &Array1<f64>,
    correlation: &EstimatedCorrelation,
    dispersion: f64,
) -> Result<Array1<f64>> {
    let y = data.outcomes();
    check_design(design, &y)?;
    if theta.len() != design.n_cols() {
        return Err(Error::LengthMismatch {
            left: "theta",
            left_len: theta.len(),
            right: "design columns",
            right_len: design.n_cols(),
        });
    }
    let t_i = data.t_i();
    let winv = working_inverses(correlation, &t_i, dispersion)?;
    let x = &design.x;
    let resid = &y - &x.dot(theta);
    let mut u = Array1::<f64>::zeros(design.n_cols());
    for &(lo, hi) in data.cluster_bounds() {
        let xi = x.slice(s![lo..hi, ..]);
        let ri = resid.slice(s![lo..hi]);
        let w = &winv[&(hi - lo)];
        u += &xi.t().dot(&w.dot(&ri));
    }
    Ok(u)
}

fn check_design(design: &DesignMatrix, y: &Array1<f64>) -> Result<()> {
    let (n, d) = (design.n_rows(), design.n_cols());
    if n == 0 || d == 0 {
        return Err(Error::EmptyInput);
    }
    if y.len() != n {
        return Err(Error::LengthMismatch {
            left: "design rows",
            left_len: n,
            right: "outcome",
            right_len: y.len(),
        });
    }
    if n <= d {
        return Err(Error::InsufficientDof {
            n_obs: n,
            n_params: d,
        });
    }
    if y.iter().any(|v| !v.is_finite()) || design.x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter(
            "design and outcome must be finite".into(),
        ));
    }
    Ok(())
}

fn check_rank(design: &DesignMatrix, gram: &Array2<f64>) -> Result<()> {
    // probe the equilibrated Gram (unit diagonal) so the rank decision is
    // invariant to column scaling: raw-Gram pivots compare squared column
    // norms across wildly different units — a squared-covariate column next
    // to a 0/1 indicator — which turns the collinearity threshold into a
    // unit choice. An identically-zero column keeps a zero scaled diagonal
    // and is still flagged dependent.
    let d = linalg::equilibration_scale(gram);
    let probe = linalg::pivoted_rank(&linalg::equilibrated(gram, &d), 1e-10);
    if probe.rank < design.n_cols() {
        return Err(Error::RankDeficient {
            columns: probe
                .dependent
                .iter()
                .map(|&i| design.columns[i].clone())
                .collect(),
        });
    }
    Ok(())
}

/// Moment estimates of the dispersion and the working-correlation
/// parameters at the current residuals.
fn estimate_nuisance(
    corr: WorkingCorrelation,
    resid: &Array1<f64>,
    bounds: &[(usize, usize)],
    t_i: &[usize],
    d: usize,
) -> Result<(f64, EstimatedCorrelation)> {
    let n = resid.len();
    let phi = resid.iter().map(|e| e * e).sum::<f64>() / (n - d) as f64;
    if !(phi > 0.0) || !phi.is_finite() {
        return Err(Error::SingularWorkingCovariance);
    }
    let est = match corr {
        WorkingCorrelation::Independence => EstimatedCorrelation::Independence,
        WorkingCorrelation::Exchangeable => {
            let mut cross = 0.0_f64;
            let mut pairs = 0usize;
            for &(lo, hi) in bounds {
                for k in lo..hi {
                    for l in (k + 1)..hi {
                        cross += resid[k] * resid[l];
                        pairs += 1;
                    }
                }
            }
            let alpha = if pairs == 0 {
                // only singleton clusters: the parameter never enters
                0.0
            } else {
                // degrees-of-freedom-corrected moment estimator; fall back to
                // the raw pair count when the correction exhausts it
                let denom = if pairs > d {
                    (pairs - d) as f64
                } else {
                    log::warn!(
                        "too few residual pairs ({pairs}) for a {d}-parameter \
                         df correction; using the raw pair count"
                    );
                    pairs as f64
                };
                let raw = cross / (denom * phi);
                let t_max = t_i.iter().copied().max().unwrap_or(1);
                let lo_bound = if t_max > 1 {
                    -1.0 / (t_max as f64 - 1.0) + 1e-6
                } else {
                    -1.0 + 1e-6
                };
                let clamped = raw.clamp(lo_bound, 1.0 - 1e-6);
                if clamped != raw {
                    log::warn!(
                        "exchangeable correlation estimate {raw} outside the \
                         feasible range; clamped to {clamped}"
                    );
                }
                clamped
            };
            EstimatedCorrelation::Exchangeable { alpha }
        }
        WorkingCorrelation::Unstructured => {
            let t = t_i[0];
            let n_clusters = bounds.len();
            let denom = if n_clusters > d {
                (n_clusters - d) as f64
            } else {
                log::warn!(
                    "too few clusters ({n_clusters}) for a {d}-parameter df \
                     correction; using the raw cluster count"
                );
                n_clusters as f64
            };
            let mut r = Array2::<f64>::eye(t);
            for a in 0..t {
                for b in (a + 1)..t {
                    let mut s = 0.0;
                    for &(lo, _) in bounds {
                        s += resid[lo + a] * resid[lo + b];
                    }
                    let raw = s / (denom * phi);
                    // the df correction can push a moment estimate past 1 in
                    // small samples; an entry outside (-1, 1) is not a
                    // correlation and makes the working matrix indefinite
                    let v = raw.clamp(-1.0 + 1e-6, 1.0 - 1e-6);
                    if v != raw {
                        log::warn!(
                            "unstructured correlation estimate {raw} at \
                             ({a},{b}) outside the feasible range; clamped to {v}"
                        );
                    }
                    r[[a, b]] = v;
                    r[[b, a]] = v;
                }
            }
            EstimatedCorrelation::Unstructured { matrix: r }
        }
    };
    Ok((phi, est))
}

/// Inverse working covariance `V_t^-1 = R_t^-1 / phi` for each distinct
/// cluster size `t`.
fn working_inverses(
    est: &EstimatedCorrelation,
    t_i: &[usize],
    phi: f64,
) -> Result<BTreeMap<usize, Array2<f64>>> {
    let mut out = BTreeMap::new();
    for &t in t_i {
        if out.contains_key(&t) {
            continue;
        }
        let r = match est {
            EstimatedCorrelation::Independence => Array2::<f64>::eye(t),
            EstimatedCorrelation::Exchangeable { alpha } => {
                let mut r = Array2::<f64>::from_elem((t, t), *alpha);
                for k in 0..t {
                    r[[k, k]] = 1.0;
                }
                r
            }
            EstimatedCorrelation::Unstructured { matrix } => {
                if matrix.nrows() != t {
                    return Err(Error::LengthMismatch {
                        left: "working correlation size",
                        left_len: matrix.nrows(),
                        right: "cluster size",
                        right_len: t,
                    });
                }
                matrix.clone()
            }
        };
        let l = linalg::cholesky(&r).ok_or(Error::SingularWorkingCovariance)?;
        let mut rinv = linalg::chol_inverse(&l);
        rinv.mapv_inplace(|v| v / phi);
        out.insert(t, rinv);
    }
    Ok(out)
}

/// Slice the coefficient vector, extract the evaluator covariance block,
/// check it is positive semidefinite up to round-off, and package the fit.
fn assemble(
    design: &DesignMatrix,
    theta: Array1<f64>,
    full_cov: Array2<f64>,
    dispersion: f64,
    working_correlation: EstimatedCorrelation,
    n_iterations: usize,
    n_obs: usize,
) -> Result<FitResult> {
    let (m, p) = (design.m, design.p);
    let d = design.n_cols();
    let beta_cov = full_cov.slice(s![0..m, 0..m]).to_owned();
    let floor = 1e-8 * linalg::inf_norm(&full_cov);
    if !linalg::psd_floor_ok(&full_cov, floor) {
        return Err(Error::CovarianceNotPsd { floor });
    }
    let evaluator_ids = design.columns[..m]
        .iter()
        .map(|c| c.strip_prefix("evaluator:").unwrap_or(c).to_string())
        .collect();
    Ok(FitResult {
        beta_hat: theta.slice(s![0..m]).to_owned(),
        gamma_hat: theta.slice(s![m..m + p]).to_owned(),
        eta_hat: theta.slice(s![m + p..d]).to_owned(),
        full_cov,
        beta_cov,
        dispersion,
        working_correlation,
        n_iterations,
        converged: true,
        n_obs,
        evaluator_ids,
        column_names: design.columns.clone(),
    })
}
