//! Turning calibrated per-evaluator tests into decisions with a known
//! false-discovery cost.
//!
//! At a power target `phi`, evaluator `j` is flagged when `p_j <
//! alpha_j(phi)`. Because the calibrated levels are the per-test false-alarm
//! probabilities, their sum estimates the expected number of false
//! discoveries, and dividing by the observed rejection count estimates the
//! false discovery rate:
//!
//! ```text
//! Q_hat = sum_j alpha_j(phi) / #{ j : p_j < alpha_j(phi) }
//! ```
//!
//! Sweeping `phi` over a grid traces a decision curve (rejections and
//! estimated FDR per target), from which a caller can pick the most
//! sensitive operating point whose estimated FDR is still acceptable.
//! When the expected false-discovery count exceeds one, the adjustment step
//! prunes the least-significant rejections to bring the set back in line
//! with its own FDR estimate.

use crate::calibration::{calibration_points, contrast_lambdas, default_power_grid, CalibrationPoint};
use crate::error::{Error, Result};
use crate::inference::{all_contrasts, wald_test, ContrastKind, TestResult};
use crate::regression::FitResult;
use serde::{Deserialize, Serialize};

/// An estimated false discovery rate at one operating point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FdrEstimate {
    /// Expected false-discovery count: the sum of the calibrated levels.
    pub numerator: f64,
    /// Observed rejections.
    pub n_rejected: usize,
    /// `numerator / n_rejected`, or zero when nothing is rejected. May
    /// exceed one; that is reported as-is (and logged), not clamped.
    pub q_hat: f64,
}

/// Estimate the false discovery rate of the rule "reject `j` when
/// `p_j < alpha_j`" (strict). `alphas` and `pvalues` are indexed by
/// evaluator; the numerator is accumulated in that order, so repeated calls
/// on the same inputs are bit-identical.
pub fn estimate_fdr(alphas: &[f64], pvalues: &[f64]) -> Result<FdrEstimate> {
    if alphas.is_empty() {
        return Err(Error::EmptyInput);
    }
    if alphas.len() != pvalues.len() {
        return Err(Error::LengthMismatch {
            left: "alphas",
            left_len: alphas.len(),
            right: "pvalues",
            right_len: pvalues.len(),
        });
    }
    for (j, &a) in alphas.iter().enumerate() {
        if !(a > 0.0 && a < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "alpha[{j}] = {a} outside (0, 1)"
            )));
        }
    }
    for (j, &p) in pvalues.iter().enumerate() {
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "p_value[{j}] = {p} outside (0, 1]"
            )));
        }
    }
    let numerator: f64 = alphas.iter().sum();
    let n_rejected = alphas
        .iter()
        .zip(pvalues.iter())
        .filter(|(a, p)| p < a)
        .count();
    let q_hat = if n_rejected == 0 {
        0.0
    } else {
        numerator / n_rejected as f64
    };
    if q_hat > 1.0 {
        log::warn!(
            "estimated FDR {q_hat} exceeds 1 ({numerator:.4} expected false \
             discoveries over {n_rejected} rejections)"
        );
    }
    Ok(FdrEstimate {
        numerator,
        n_rejected,
        q_hat,
    })
}

/// One grid point of a [`DecisionCurve`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Power target.
    pub phi: f64,
    /// Calibrated levels in evaluator order.
    pub alphas: Vec<f64>,
    /// Expected false-discovery count at this target.
    pub numerator: f64,
    pub n_rejected: usize,
    pub q_hat: f64,
}

/// Estimated FDR and rejection counts across a grid of power targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionCurve {
    pub kind: ContrastKind,
    pub delta: f64,
    pub c: f64,
    /// Grid points in the order given (conventionally ascending `phi`).
    pub points: Vec<CurvePoint>,
}

/// Sweep the power target over `grid`, re-calibrating the levels at each
/// point. The contrast noncentralities do not depend on the target, so they
/// are computed once for the whole sweep.
pub fn decision_curve(
    fit: &FitResult,
    kind: ContrastKind,
    delta: f64,
    c: f64,
    grid: &[f64],
) -> Result<DecisionCurve> {
    if grid.is_empty() {
        return Err(Error::EmptyInput);
    }
    let contrasts = all_contrasts(&fit.beta_hat, kind, delta)?;
    let tests: Vec<TestResult> = contrasts
        .iter()
        .map(|spec| wald_test(fit, spec))
        .collect::<Result<_>>()?;
    let pvalues: Vec<f64> = tests.iter().map(|t| t.p_value).collect();
    let lambdas = contrast_lambdas(fit, &contrasts, c)?;

    let mut points = Vec::with_capacity(grid.len());
    for &phi in grid {
        let cal = calibration_points(&contrasts, &lambdas, c, phi)?;
        let alphas: Vec<f64> = cal.iter().map(|cp| cp.alpha).collect();
        let est = estimate_fdr(&alphas, &pvalues)?;
        points.push(CurvePoint {
            phi,
            alphas,
            numerator: est.numerator,
            n_rejected: est.n_rejected,
            q_hat: est.q_hat,
        });
    }
    Ok(DecisionCurve {
        kind,
        delta,
        c,
        points,
    })
}

/// How many of the least-significant rejections the FDR-based pruning
/// removes when the expected false-discovery count `q_hat * k` exceeds one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AdjustmentRule {
    /// Remove `round(q_hat * k)` rejections (half rounds up). Default.
    RoundedCount,
    /// Remove one fewer — an alternate published form of the same pruning
    /// step, kept selectable for comparison.
    RoundedCountMinusOne,
}

impl Default for AdjustmentRule {
    fn default() -> Self {
        AdjustmentRule::RoundedCount
    }
}

/// Prune a rejection set to match its own FDR estimate, with the default
/// [`AdjustmentRule::RoundedCount`]. See [`apply_adjustment_with`].
pub fn apply_adjustment(rejected_by_p: &[usize], q_hat: f64) -> Vec<usize> {
    apply_adjustment_with(rejected_by_p, q_hat, AdjustmentRule::RoundedCount)
}

/// With `k` rejections at estimated FDR `q_hat`, about `q_hat * k` of them
/// are expected to be false. When that product exceeds one, drop that many
/// (rounded, capped at `k`) from the tail of `rejected_by_p`, which must be
/// ordered by ascending p-value so the least-significant rejections go
/// first. A pure function of `(rejected_by_p, q_hat)`: re-running it on the
/// same stored inputs reproduces the same set exactly.
pub fn apply_adjustment_with(
    rejected_by_p: &[usize],
    q_hat: f64,
    rule: AdjustmentRule,
) -> Vec<usize> {
    let k = rejected_by_p.len();
    if k == 0 || !(q_hat * k as f64 > 1.0) {
        return rejected_by_p.to_vec();
    }
    let mut remove = (q_hat * k as f64).round() as usize;
    if rule == AdjustmentRule::RoundedCountMinusOne {
        remove = remove.saturating_sub(1);
    }
    let remove = remove.min(k);
    rejected_by_p[..k - remove].to_vec()
}

/// The operating point a report was produced at.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReportSettings {
    pub kind: ContrastKind,
    pub delta: f64,
    /// Alternative shift the tests are powered against.
    pub c: f64,
    /// Power target actually used (absent when no feasible target existed).
    pub phi: Option<f64>,
    /// FDR budget, when the operating point was chosen by
    /// [`detect_at_fdr`].
    pub target_fdr: Option<f64>,
    pub adjust: bool,
    pub adjust_rule: AdjustmentRule,
}

/// Full output of a detection pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutlierReport {
    /// Per-evaluator tests, in evaluator order.
    pub tests: Vec<TestResult>,
    /// Per-evaluator calibration at the chosen power target, in evaluator
    /// order (empty when no feasible target existed).
    pub calibration: Vec<CalibrationPoint>,
    /// Flagged evaluators, most significant first (ascending p-value, ties
    /// by index).
    pub rejected: Vec<usize>,
    /// Expected false-discovery count at the operating point.
    pub numerator: f64,
    /// Estimated FDR of `rejected`.
    pub q_hat: f64,
    /// `rejected` after FDR-based pruning (equal to `rejected` when
    /// adjustment is off or not triggered).
    pub adjusted_rejected: Vec<usize>,
    pub settings: ReportSettings,
    /// Present when the report is degenerate (e.g. no grid point met the
    /// FDR budget).
    pub diagnostic: Option<String>,
}

/// Detect outlying evaluators at a fixed power target: test every evaluator,
/// calibrate every level to power `phi` against a shift of `c`, reject where
/// `p_j < alpha_j`, and estimate the FDR of the resulting set. With
/// `adjust`, the set is additionally pruned when its expected
/// false-discovery count exceeds one.
pub fn detect(
    fit: &FitResult,
    kind: ContrastKind,
    delta: f64,
    c: f64,
    phi: f64,
    adjust: bool,
) -> Result<OutlierReport> {
    detect_with(fit, kind, delta, c, phi, adjust, AdjustmentRule::default())
}

/// [`detect`] with an explicit pruning rule.
pub fn detect_with(
    fit: &FitResult,
    kind: ContrastKind,
    delta: f64,
    c: f64,
    phi: f64,
    adjust: bool,
    adjust_rule: AdjustmentRule,
) -> Result<OutlierReport> {
    let contrasts = all_contrasts(&fit.beta_hat, kind, delta)?;
    let tests: Vec<TestResult> = contrasts
        .iter()
        .map(|spec| wald_test(fit, spec))
        .collect::<Result<_>>()?;
    let lambdas = contrast_lambdas(fit, &contrasts, c)?;
    let calibration = calibration_points(&contrasts, &lambdas, c, phi)?;

    let alphas: Vec<f64> = calibration.iter().map(|cp| cp.alpha).collect();
    let pvalues: Vec<f64> = tests.iter().map(|t| t.p_value).collect();
    let est = estimate_fdr(&alphas, &pvalues)?;

    let mut rejected: Vec<usize> = (0..tests.len())
        .filter(|&j| pvalues[j] < alphas[j])
        .collect();
    rejected.sort_by(|&a, &b| {
        pvalues[a]
            .partial_cmp(&pvalues[b])
            .expect("p-values are finite")
            .then(a.cmp(&b))
    });
    let adjusted_rejected = if adjust {
        apply_adjustment_with(&rejected, est.q_hat, adjust_rule)
    } else {
        rejected.clone()
    };

    Ok(OutlierReport {
        tests,
        calibration,
        rejected,
        numerator: est.numerator,
        q_hat: est.q_hat,
        adjusted_rejected,
        settings: ReportSettings {
            kind,
            delta,
            c,
            phi: Some(phi),
            target_fdr: None,
            adjust,
            adjust_rule,
        },
        diagnostic: None,
    })
}

/// Detect at the most sensitive power target whose estimated FDR stays
/// within `target_fdr`: sweep the default grid, pick the largest `phi` with
/// `q_hat <= target_fdr`, and report at that point. When no grid point
/// qualifies, the report carries the tests but flags nothing, and
/// `diagnostic` explains why.
pub fn detect_at_fdr(
    fit: &FitResult,
    kind: ContrastKind,
    delta: f64,
    c: f64,
    target_fdr: f64,
    adjust: bool,
) -> Result<OutlierReport> {
    detect_at_fdr_with(
        fit,
        kind,
        delta,
        c,
        target_fdr,
        adjust,
        AdjustmentRule::default(),
    )
}

/// [`detect_at_fdr`] with an explicit pruning rule.
pub fn detect_at_fdr_with(
    fit: &FitResult,
    kind: ContrastKind,
    delta: f64,
    c: f64,
    target_fdr: f64,
    adjust: bool,
    adjust_rule: AdjustmentRule,
) -> Result<OutlierReport> {
    if !(target_fdr >= 0.0) || !target_fdr.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "FDR budget must be a finite nonnegative number, got {target_fdr}"
        )));
    }
    let grid = default_power_grid();
    let curve = decision_curve(fit, kind, delta, c, &grid)?;
    let chosen = curve
        .points
        .iter()
        .rev()
        .find(|pt| pt.q_hat <= target_fdr)
        .map(|pt| pt.phi);

    match chosen {
        Some(phi) => {
            let mut report = detect_with(fit, kind, delta, c, phi, adjust, adjust_rule)?;
            report.settings.target_fdr = Some(target_fdr);
            Ok(report)
        }
        None => {
            let contrasts = all_contrasts(&fit.beta_hat, kind, delta)?;
            let tests: Vec<TestResult> = contrasts
                .iter()
                .map(|spec| wald_test(fit, spec))
                .collect::<Result<_>>()?;
            let min_q = curve
                .points
                .iter()
                .map(|pt| pt.q_hat)
                .fold(f64::INFINITY, f64::min);
            Ok(OutlierReport {
                tests,
                calibration: Vec::new(),
                rejected: Vec::new(),
                numerator: 0.0,
                q_hat: 0.0,
                adjusted_rejected: Vec::new(),
                settings: ReportSettings {
                    kind,
                    delta,
                    c,
                    phi: None,
                    target_fdr: Some(target_fdr),
                    adjust,
                    adjust_rule,
                },
                diagnostic: Some(format!(
                    "no power target on the grid attains estimated FDR <= \
                     {target_fdr} (best was {min_q:.4}); nothing flagged"
                )),
            })
        }
    }
}

/// Benjamini-Hochberg step-up procedure at level `alpha`: reject the `k`
/// smallest p-values where `k` is the largest rank with
/// `p_(k) <= k * alpha / M`. Returns the rejected indices in ascending
/// index order. Tied p-values enter or leave the set together, so the
/// result does not depend on input order.
pub fn bh_procedure(pvalues: &[f64], alpha: f64) -> Result<Vec<usize>> {
    if pvalues.is_empty() {
        return Err(Error::EmptyInput);
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "level must lie in (0, 1), got {alpha}"
        )));
    }
    for (j, &p) in pvalues.iter().enumerate() {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidParameter(format!(
                "p_value[{j}] = {p} outside [0, 1]"
            )));
        }
    }
    let m = pvalues.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        pvalues[a]
            .partial_cmp(&pvalues[b])
            .expect("p-values are finite")
            .then(a.cmp(&b))
    });
    let mut cut = 0usize;
    for (rank0, &idx) in order.iter().enumerate() {
        let k = (rank0 + 1) as f64;
        if pvalues[idx] <= k * alpha / m as f64 {
            cut = rank0 + 1;
        }
    }
    let mut rejected: Vec<usize> = order[..cut].to_vec();
    rejected.sort_unstable();
    Ok(rejected)
}
