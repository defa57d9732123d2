//! Monte Carlo evaluation harness: generate synthetic multi-evaluator
//! studies with planted outlying evaluators, run the full detection pipeline
//! on each replicate, and aggregate operating characteristics (estimated vs
//! empirical FDR, per-evaluator flag rates) across replicates.
//!
//! Replicates are independent and run in parallel, but each one is seeded as
//! `base_seed + replicate_index` and the aggregation folds outcomes in
//! replicate order, so results are bit-for-bit reproducible regardless of
//! thread count.

use crate::calibration::{calibration_points, contrast_lambdas, default_power_grid};
use crate::dataset::{build_design, Dataset, RawRecord};
use crate::error::{Error, Result};
use crate::fdr::{apply_adjustment, estimate_fdr};
use crate::inference::{all_contrasts, wald_test, ContrastKind, TestResult};
use crate::regression::{fit_gee, fit_ols, FitResult, SolverControl, WorkingCorrelation};
use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// Design of a synthetic multi-evaluator study.
///
/// Each of `n_evaluators` examines `per_evaluator` participants. A
/// participant's outcome is the evaluator's effect plus a quadratic age term,
/// two health-status effects, and Gaussian noise. Most evaluators share
/// `normal_effect`; the ones listed in `outlier_effects` are planted at a
/// different level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_evaluators: usize,
    pub per_evaluator: usize,
    /// Effect level shared by all non-planted evaluators.
    pub normal_effect: f64,
    /// Planted deviations: `(evaluator index, effect level)`.
    pub outlier_effects: Vec<(usize, f64)>,
    /// Linear age coefficient.
    pub gamma_age: f64,
    /// Quadratic age coefficient.
    pub gamma_age_sq: f64,
    /// Effect of "very good" health status (reference: "excellent").
    pub gamma_very_good: f64,
    /// Effect of "a little trouble" health status.
    pub gamma_little_trouble: f64,
    pub age_mean: f64,
    pub age_sd: f64,
    /// P(status = "very good").
    pub p_very_good: f64,
    /// P(status = "a little trouble"); the remainder is the reference level.
    pub p_little_trouble: f64,
    /// Residual standard deviation.
    pub sigma: f64,
    pub n_replicates: usize,
    /// Alternative shift the tests are powered against.
    pub c: f64,
    pub kind: ContrastKind,
    /// Trim fraction for the truncated consensus.
    pub delta: f64,
    /// Replicate `r` uses seed `base_seed + r`.
    pub base_seed: u64,
    /// When set, every participant is measured twice with residual
    /// correlation `rho`, and fitting switches to the exchangeable GEE.
    pub paired_rho: Option<f64>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_evaluators: 100,
            per_evaluator: 40,
            normal_effect: 67.0,
            outlier_effects: vec![
                (0, 75.0),
                (1, 75.0),
                (2, 75.0),
                (3, 75.0),
                (4, 75.0),
                (5, 70.0),
                (6, 70.0),
                (7, 70.0),
            ],
            gamma_age: -2.7,
            gamma_age_sq: 0.03,
            gamma_very_good: 3.3,
            gamma_little_trouble: 10.3,
            age_mean: 56.6,
            age_sd: 4.4,
            p_very_good: 0.44,
            p_little_trouble: 0.25,
            sigma: 8.0,
            n_replicates: 300,
            c: 5.0,
            kind: ContrastKind::Truncated,
            delta: 0.1,
            base_seed: 1729,
            paired_rho: None,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_evaluators < 2 {
            return Err(Error::InvalidParameter(format!(
                "need at least 2 evaluators, got {}",
                self.n_evaluators
            )));
        }
        if self.per_evaluator == 0 || self.n_replicates == 0 {
            return Err(Error::InvalidParameter(
                "per_evaluator and n_replicates must be at least 1".into(),
            ));
        }
        let finite = [
            self.normal_effect,
            self.gamma_age,
            self.gamma_age_sq,
            self.gamma_very_good,
            self.gamma_little_trouble,
            self.age_mean,
            self.age_sd,
            self.sigma,
            self.c,
            self.delta,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "simulation parameters must be finite".into(),
            ));
        }
        if self.age_sd < 0.0 || self.sigma < 0.0 {
            return Err(Error::InvalidParameter(
                "standard deviations must be nonnegative".into(),
            ));
        }
        if !(self.p_very_good >= 0.0
            && self.p_little_trouble >= 0.0
            && self.p_very_good + self.p_little_trouble <= 1.0)
        {
            return Err(Error::InvalidParameter(format!(
                "status prevalences ({}, {}) must be nonnegative and sum to at most 1",
                self.p_very_good, self.p_little_trouble
            )));
        }
        if !(self.c > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "alternative shift c must be positive, got {}",
                self.c
            )));
        }
        if !(0.0..0.5).contains(&self.delta) {
            return Err(Error::InvalidParameter(format!(
                "trim fraction must lie in [0, 0.5), got {}",
                self.delta
            )));
        }
        let mut seen = vec![false; self.n_evaluators];
        for &(j, effect) in &self.outlier_effects {
            if j >= self.n_evaluators {
                return Err(Error::InvalidParameter(format!(
                    "planted evaluator index {j} out of range for {} evaluators",
                    self.n_evaluators
                )));
            }
            if seen[j] {
                return Err(Error::InvalidParameter(format!(
                    "evaluator {j} planted twice"
                )));
            }
            seen[j] = true;
            if !effect.is_finite() {
                return Err(Error::InvalidParameter(
                    "planted effect levels must be finite".into(),
                ));
            }
        }
        if let Some(rho) = self.paired_rho {
            if !(-1.0..1.0).contains(&rho) || !rho.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "within-participant correlation must lie in (-1, 1), got {rho}"
                )));
            }
        }
        Ok(())
    }

    /// Effect level of every evaluator, planted deviations applied.
    pub fn effect_levels(&self) -> Vec<f64> {
        let mut effects = vec![self.normal_effect; self.n_evaluators];
        for &(j, effect) in &self.outlier_effects {
            effects[j] = effect;
        }
        effects
    }

    /// Whether each evaluator is planted as an outlier.
    pub fn outlier_flags(&self) -> Vec<bool> {
        let mut flags = vec![false; self.n_evaluators];
        for &(j, _) in &self.outlier_effects {
            flags[j] = true;
        }
        flags
    }
}

/// Draw one synthetic study. Evaluator `j`'s dense index equals `j` (ids are
/// zero-padded so lexicographic and numeric order agree), so effects in
/// [`SimConfig::outlier_effects`] line up with the fitted `beta_hat` indices.
/// With `paired_rho` set, every participant yields two measurements whose
/// residuals are correlated bivariate normal.
pub fn generate_dataset(config: &SimConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = config.n_evaluators;
    let n_per = config.per_evaluator;
    let effects = config.effect_levels();

    let e_width = m.to_string().len();
    let p_width = (m * n_per).to_string().len();
    let age_dist = Normal::new(config.age_mean, config.age_sd)
        .map_err(|e| Error::InvalidParameter(format!("age distribution: {e}")))?;

    let mut raw = Vec::with_capacity(m * n_per * if config.paired_rho.is_some() { 2 } else { 1 });
    let mut participant = 0usize;
    for (j, &effect) in effects.iter().enumerate() {
        let evaluator_id = format!("e{j:0e_width$}");
        for _ in 0..n_per {
            let participant_id = format!("p{participant:0p_width$}");
            participant += 1;

            let age: f64 = age_dist.sample(&mut rng);
            let u: f64 = rng.gen();
            let (very_good, little_trouble) = if u < config.p_very_good {
                (1.0, 0.0)
            } else if u < config.p_very_good + config.p_little_trouble {
                (0.0, 1.0)
            } else {
                (0.0, 0.0)
            };
            let mean = effect
                + config.gamma_age * age
                + config.gamma_age_sq * age * age
                + config.gamma_very_good * very_good
                + config.gamma_little_trouble * little_trouble;
            let x = vec![age, age * age, very_good, little_trouble];

            match config.paired_rho {
                None => {
                    let z: f64 = rng.sample(StandardNormal);
                    raw.push(RawRecord {
                        participant_id,
                        evaluator_id: evaluator_id.clone(),
                        repeat_index: Some(1),
                        outcome: mean + config.sigma * z,
                        x,
                        z: vec![],
                    });
                }
                Some(rho) => {
                    let z1: f64 = rng.sample(StandardNormal);
                    let z2: f64 = rng.sample(StandardNormal);
                    let e1 = config.sigma * z1;
                    let e2 = config.sigma * (rho * z1 + (1.0 - rho * rho).sqrt() * z2);
                    for (k, e) in [(1u32, e1), (2u32, e2)] {
                        raw.push(RawRecord {
                            participant_id: participant_id.clone(),
                            evaluator_id: evaluator_id.clone(),
                            repeat_index: Some(k),
                            outcome: mean + e,
                            x: x.clone(),
                            z: vec![],
                        });
                    }
                }
            }
        }
    }
    Dataset::from_raw(
        raw,
        vec![
            "age".into(),
            "age_sq".into(),
            "status_very_good".into(),
            "status_little_trouble".into(),
        ],
        vec![],
    )
}

/// Fit one replicate with the engine the design calls for: plain least
/// squares for single measurements, exchangeable GEE for paired ones.
pub fn fit_replicate(config: &SimConfig, data: &Dataset) -> Result<FitResult> {
    let design = build_design(data)?;
    match config.paired_rho {
        None => fit_ols(&design, &data.outcomes()),
        Some(_) => fit_gee(
            data,
            &design,
            WorkingCorrelation::Exchangeable,
            &SolverControl::default(),
        ),
    }
}

/// Everything measured on one replicate, before aggregation.
struct ReplicateOutcome {
    /// Estimated FDR per power-grid point.
    q_hat: Vec<f64>,
    /// Realized false-discovery proportion per grid point (0 when nothing
    /// was rejected).
    fdr_realized: Vec<f64>,
    /// Flag indicators `[grid point][evaluator]`, before pruning.
    unadjusted: Vec<Vec<bool>>,
    /// Flag indicators after FDR-based pruning.
    adjusted: Vec<Vec<bool>>,
    /// Flags of the fixed-level comparator (`p < 0.05`).
    alpha05: Vec<bool>,
    /// Realized false-discovery proportion of the comparator.
    fdr_alpha05: f64,
    /// `sigma^2` over the sample variance of the outcomes.
    noise_ratio: f64,
}

fn run_replicate(config: &SimConfig, seed: u64, grid: &[f64]) -> Result<ReplicateOutcome> {
    let is_outlier = config.outlier_flags();
    let data = generate_dataset(config, seed)?;
    let fit = fit_replicate(config, &data)?;

    let contrasts = all_contrasts(&fit.beta_hat, config.kind, config.delta)?;
    let tests: Vec<TestResult> = contrasts
        .iter()
        .map(|spec| wald_test(&fit, spec))
        .collect::<Result<_>>()?;
    let pvalues: Vec<f64> = tests.iter().map(|t| t.p_value).collect();
    let lambdas = contrast_lambdas(&fit, &contrasts, config.c)?;

    let m = config.n_evaluators;
    let mut q_hat = Vec::with_capacity(grid.len());
    let mut fdr_realized = Vec::with_capacity(grid.len());
    let mut unadjusted = Vec::with_capacity(grid.len());
    let mut adjusted = Vec::with_capacity(grid.len());
    for &phi in grid {
        let cal = calibration_points(&contrasts, &lambdas, config.c, phi)?;
        let alphas: Vec<f64> = cal.iter().map(|cp| cp.alpha).collect();
        let est = estimate_fdr(&alphas, &pvalues)?;

        let mut rejected: Vec<usize> = (0..m).filter(|&j| pvalues[j] < alphas[j]).collect();
        rejected.sort_by(|&a, &b| {
            pvalues[a]
                .partial_cmp(&pvalues[b])
                .expect("p-values are finite")
                .then(a.cmp(&b))
        });
        let kept = apply_adjustment(&rejected, est.q_hat);

        let mut flags = vec![false; m];
        for &j in &rejected {
            flags[j] = true;
        }
        let mut kept_flags = vec![false; m];
        for &j in &kept {
            kept_flags[j] = true;
        }
        let false_flags = rejected.iter().filter(|&&j| !is_outlier[j]).count();
        fdr_realized.push(if rejected.is_empty() {
            0.0
        } else {
            false_flags as f64 / rejected.len() as f64
        });
        q_hat.push(est.q_hat);
        unadjusted.push(flags);
        adjusted.push(kept_flags);
    }

    // fixed-level comparator
    let alpha05: Vec<bool> = pvalues.iter().map(|&p| p < 0.05).collect();
    let n05 = alpha05.iter().filter(|&&f| f).count();
    let v05 = alpha05
        .iter()
        .enumerate()
        .filter(|&(j, &f)| f && !is_outlier[j])
        .count();
    let fdr_alpha05 = if n05 == 0 { 0.0 } else { v05 as f64 / n05 as f64 };

    let y = data.outcomes();
    let noise_ratio = noise_ratio(&y, config.sigma);

    Ok(ReplicateOutcome {
        q_hat,
        fdr_realized,
        unadjusted,
        adjusted,
        alpha05,
        fdr_alpha05,
        noise_ratio,
    })
}

/// Residual variance share: `sigma^2 / sample_variance(y)`.
fn noise_ratio(y: &Array1<f64>, sigma: f64) -> f64 {
    let n = y.len();
    if n < 2 {
        return 0.0;
    }
    let mean = y.sum() / n as f64;
    let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    if var > 0.0 {
        sigma * sigma / var
    } else {
        0.0
    }
}

/// Aggregated operating characteristics of a replicated study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSummary {
    pub config: SimConfig,
    /// Power targets the study was evaluated at.
    pub phi_grid: Vec<f64>,
    /// Mean estimated FDR per grid point.
    pub fdr_est_mean: Vec<f64>,
    /// Mean realized false-discovery proportion per grid point.
    pub fdr_realized_mean: Vec<f64>,
    /// Mean realized false-discovery proportion of the fixed `p < 0.05`
    /// comparator.
    pub fdr_alpha05: f64,
    /// Flag rate `[grid point][evaluator]`, before pruning.
    pub prop_unadjusted: Vec<Vec<f64>>,
    /// Flag rate after FDR-based pruning.
    pub prop_adjusted: Vec<Vec<f64>>,
    /// Flag rate of the fixed-level comparator, per evaluator.
    pub prop_alpha05: Vec<f64>,
    /// Mean share of outcome variance due to residual noise.
    pub noise_ratio_mean: f64,
    /// Which evaluators were planted as outliers.
    pub evaluator_is_outlier: Vec<bool>,
    pub n_completed: usize,
    pub n_failures: usize,
}

/// Run the full replicated study. Replicates execute in parallel; a
/// replicate whose fit fails is excluded from the averages and counted in
/// `n_failures`, but more than 5% failures aborts the study. Aggregation
/// runs in replicate order, so the summary is identical for any thread
/// count.
pub fn run_study(config: &SimConfig) -> Result<SimSummary> {
    config.validate()?;
    let grid = default_power_grid();
    let total = config.n_replicates;

    let outcomes: Vec<Result<ReplicateOutcome>> = (0..total)
        .into_par_iter()
        .map(|r| run_replicate(config, config.base_seed.wrapping_add(r as u64), &grid))
        .collect();

    let n_failures = outcomes.iter().filter(|o| o.is_err()).count();
    let max_allowed = (0.05 * total as f64).floor() as usize;
    if n_failures > max_allowed {
        let first = outcomes
            .iter()
            .find_map(|o| o.as_ref().err())
            .map(|e| e.to_string())
            .unwrap_or_default();
        return Err(Error::TooManyFailures {
            failed: n_failures,
            total,
            max_allowed,
            first,
        });
    }

    let m = config.n_evaluators;
    let g = grid.len();
    let mut fdr_est_sum = vec![0.0_f64; g];
    let mut fdr_realized_sum = vec![0.0_f64; g];
    let mut unadj_sum = vec![vec![0.0_f64; m]; g];
    let mut adj_sum = vec![vec![0.0_f64; m]; g];
    let mut alpha05_sum = vec![0.0_f64; m];
    let mut fdr_alpha05_sum = 0.0_f64;
    let mut noise_sum = 0.0_f64;
    let mut n_completed = 0usize;

    for outcome in outcomes.iter() {
        let Ok(out) = outcome else { continue };
        n_completed += 1;
        for k in 0..g {
            fdr_est_sum[k] += out.q_hat[k];
            fdr_realized_sum[k] += out.fdr_realized[k];
            for j in 0..m {
                if out.unadjusted[k][j] {
                    unadj_sum[k][j] += 1.0;
                }
                if out.adjusted[k][j] {
                    adj_sum[k][j] += 1.0;
                }
            }
        }
        for j in 0..m {
            if out.alpha05[j] {
                alpha05_sum[j] += 1.0;
            }
        }
        fdr_alpha05_sum += out.fdr_alpha05;
        noise_sum += out.noise_ratio;
    }
    if n_completed == 0 {
        return Err(Error::TooManyFailures {
            failed: n_failures,
            total,
            max_allowed,
            first: "no replicate completed".into(),
        });
    }
    let nc = n_completed as f64;

    Ok(SimSummary {
        config: config.clone(),
        phi_grid: grid,
        fdr_est_mean: fdr_est_sum.into_iter().map(|s| s / nc).collect(),
        fdr_realized_mean: fdr_realized_sum.into_iter().map(|s| s / nc).collect(),
        fdr_alpha05: fdr_alpha05_sum / nc,
        prop_unadjusted: unadj_sum
            .into_iter()
            .map(|row| row.into_iter().map(|s| s / nc).collect())
            .collect(),
        prop_adjusted: adj_sum
            .into_iter()
            .map(|row| row.into_iter().map(|s| s / nc).collect())
            .collect(),
        prop_alpha05: alpha05_sum.into_iter().map(|s| s / nc).collect(),
        noise_ratio_mean: noise_sum / nc,
        evaluator_is_outlier: config.outlier_flags(),
        n_completed,
        n_failures,
    })
}

/// Serialized form of the run metadata written to `manifest.json`.
#[derive(Serialize)]
struct Manifest<'a> {
    config: &'a SimConfig,
    n_completed: usize,
    n_failures: usize,
    noise_ratio_mean: f64,
    fdr_alpha05: f64,
    prop_alpha05: &'a [f64],
    evaluator_is_outlier: &'a [bool],
}

impl SimSummary {
    /// Write the study outputs into `dir`:
    ///
    /// * `fdr_curve.csv` — `phi, fdr_est_mean, fdr_realized_mean,
    ///   fdr_alpha05` per grid point;
    /// * `proportions.csv` — flag rate per `(evaluator, phi)`, one row for
    ///   the raw rule and one for the pruned rule;
    /// * `manifest.json` — configuration echo and run metadata.
    ///
    /// Output bytes depend only on the summary contents, making bundles
    /// directly comparable across runs.
    pub fn write_csv_bundle<P: AsRef<Path>>(&self, dir: P) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;

        let mut curve = std::fs::File::create(dir.join("fdr_curve.csv"))?;
        writeln!(curve, "phi,fdr_est_mean,fdr_realized_mean,fdr_alpha05")?;
        for (k, &phi) in self.phi_grid.iter().enumerate() {
            writeln!(
                curve,
                "{phi},{},{},{}",
                self.fdr_est_mean[k], self.fdr_realized_mean[k], self.fdr_alpha05
            )?;
        }

        let mut props = std::fs::File::create(dir.join("proportions.csv"))?;
        writeln!(props, "evaluator,phi,tp_or_fp,adjusted_flag,proportion")?;
        let m = self.evaluator_is_outlier.len();
        for j in 0..m {
            let label = if self.evaluator_is_outlier[j] {
                "tp"
            } else {
                "fp"
            };
            for (k, &phi) in self.phi_grid.iter().enumerate() {
                writeln!(
                    props,
                    "{},{phi},{label},false,{}",
                    j + 1,
                    self.prop_unadjusted[k][j]
                )?;
                writeln!(
                    props,
                    "{},{phi},{label},true,{}",
                    j + 1,
                    self.prop_adjusted[k][j]
                )?;
            }
        }

        let manifest = std::fs::File::create(dir.join("manifest.json"))?;
        serde_json::to_writer_pretty(
            manifest,
            &Manifest {
                config: &self.config,
                n_completed: self.n_completed,
                n_failures: self.n_failures,
                noise_ratio_mean: self.noise_ratio_mean,
                fdr_alpha05: self.fdr_alpha05,
                prop_alpha05: &self.prop_alpha05,
                evaluator_is_outlier: &self.evaluator_is_outlier,
            },
        )
        .map_err(|e| Error::InvalidParameter(format!("manifest serialization: {e}")))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn small_config() -> SimConfig {
        SimConfig {
            n_evaluators: 12,
            per_evaluator: 15,
            outlier_effects: vec![(0, 75.0), (1, 70.0)],
            n_replicates: 8,
            base_seed: 42,
            ..SimConfig::default()
        }
    }

    #[test]
    fn zero_noise_recovers_the_planted_effects_exactly() {
        let config = SimConfig {
            n_evaluators: 10,
            per_evaluator: 25,
            outlier_effects: vec![(2, 75.0), (7, 70.0)],
            sigma: 0.0,
            n_replicates: 1,
            ..SimConfig::default()
        };
        let data = generate_dataset(&config, 5).unwrap();
        let design = build_design(&data).unwrap();
        let fit = fit_ols(&design, &data.outcomes()).unwrap();
        let effects = config.effect_levels();
        for j in 0..10 {
            assert_abs_diff_eq!(fit.beta_hat[j], effects[j], epsilon = 1e-6);
        }
        assert_abs_diff_eq!(fit.gamma_hat[0], config.gamma_age, epsilon = 1e-6);
        assert_abs_diff_eq!(fit.gamma_hat[1], config.gamma_age_sq, epsilon = 1e-8);
        assert_abs_diff_eq!(fit.gamma_hat[2], config.gamma_very_good, epsilon = 1e-6);
        assert_abs_diff_eq!(fit.gamma_hat[3], config.gamma_little_trouble, epsilon = 1e-6);
    }

    #[test]
    fn generated_study_has_the_declared_shape() {
        let config = small_config();
        let data = generate_dataset(&config, 1).unwrap();
        assert_eq!(data.n_evaluators(), 12);
        assert_eq!(data.n_participants(), 12 * 15);
        assert_eq!(data.n_records(), 12 * 15);
        assert_eq!(data.n_j(), vec![15; 12]);
        // dense evaluator index j corresponds to planted index j
        assert_eq!(data.evaluator_ids()[0], "e00");
        assert_eq!(data.evaluator_ids()[11], "e11");
        assert_eq!(data.x_names().len(), 4);
    }

    #[test]
    fn noise_share_matches_the_generator_arithmetic() {
        // with the default parameters the signal variance is ~28.4, so at
        // sigma = 8 the residual share is 64 / (64 + 28.4) ~ 0.69
        let config = SimConfig {
            n_replicates: 1,
            ..SimConfig::default()
        };
        let data = generate_dataset(&config, 11).unwrap();
        let ratio = noise_ratio(&data.outcomes(), config.sigma);
        assert!((0.63..0.75).contains(&ratio), "noise share was {ratio}");
    }

    #[test]
    fn paired_generation_doubles_records_and_correlates_residuals() {
        let config = SimConfig {
            n_evaluators: 8,
            per_evaluator: 30,
            outlier_effects: vec![(0, 75.0)],
            paired_rho: Some(0.7),
            n_replicates: 1,
            ..SimConfig::default()
        };
        let data = generate_dataset(&config, 3).unwrap();
        assert_eq!(data.n_records(), 2 * 8 * 30);
        assert_eq!(data.t_i(), vec![2; 8 * 30]);

        let fit = fit_replicate(&config, &data).unwrap();
        assert!(fit.converged);
        match fit.working_correlation {
            crate::regression::EstimatedCorrelation::Exchangeable { alpha } => {
                assert!(
                    (0.45..0.9).contains(&alpha),
                    "estimated within-participant correlation {alpha}"
                );
            }
            ref other => panic!("expected exchangeable estimate, got {other:?}"),
        }
    }

    #[test]
    fn study_summary_is_identical_across_thread_counts() {
        let config = small_config();
        let run_with = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| run_study(&config).unwrap())
        };
        let one = run_with(1);
        let four = run_with(4);
        assert_eq!(
            serde_json::to_string(&one).unwrap(),
            serde_json::to_string(&four).unwrap()
        );
        assert_eq!(one.n_completed, 8);
        assert_eq!(one.n_failures, 0);
    }

    #[test]
    fn different_seeds_give_different_results() {
        let a = run_study(&SimConfig {
            n_replicates: 2,
            ..small_config()
        })
        .unwrap();
        let b = run_study(&SimConfig {
            n_replicates: 2,
            base_seed: 43,
            ..small_config()
        })
        .unwrap();
        assert_ne!(a.fdr_est_mean, b.fdr_est_mean);
    }

    #[test]
    fn study_flags_planted_outliers_much_more_often_than_normals() {
        let summary = run_study(&small_config()).unwrap();
        let k = summary.phi_grid.iter().position(|&p| p == 0.8).unwrap();
        let planted_rate = summary.prop_unadjusted[k][0];
        let normal_max = (2..12)
            .map(|j| summary.prop_unadjusted[k][j])
            .fold(0.0_f64, f64::max);
        assert!(
            planted_rate > 0.9,
            "8-point outlier flagged at rate {planted_rate}"
        );
        assert!(
            normal_max < 0.5,
            "a normal evaluator was flagged at rate {normal_max}"
        );
    }

    #[test]
    fn pervasive_fit_failures_abort_the_study() {
        // two evaluators, one participant each: 2 observations for 6
        // parameters can never fit
        let config = SimConfig {
            n_evaluators: 2,
            per_evaluator: 1,
            outlier_effects: vec![],
            n_replicates: 4,
            ..SimConfig::default()
        };
        let err = run_study(&config).unwrap_err();
        match err {
            Error::TooManyFailures { failed, total, .. } => {
                assert_eq!(failed, 4);
                assert_eq!(total, 4);
            }
            other => panic!("expected TooManyFailures, got {other:?}"),
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut config = small_config();
        config.outlier_effects = vec![(0, 75.0), (0, 70.0)];
        assert!(config.validate().is_err());

        let mut config = small_config();
        config.outlier_effects = vec![(99, 75.0)];
        assert!(config.validate().is_err());

        let mut config = small_config();
        config.paired_rho = Some(1.0);
        assert!(config.validate().is_err());

        let mut config = small_config();
        config.p_very_good = 0.8;
        config.p_little_trouble = 0.3;
        assert!(config.validate().is_err());
    }

    #[test]
    fn csv_bundle_has_the_documented_shape() {
        let config = SimConfig {
            n_replicates: 2,
            ..small_config()
        };
        let summary = run_study(&config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        summary.write_csv_bundle(dir.path()).unwrap();

        let curve = std::fs::read_to_string(dir.path().join("fdr_curve.csv")).unwrap();
        let lines: Vec<&str> = curve.lines().collect();
        assert_eq!(lines[0], "phi,fdr_est_mean,fdr_realized_mean,fdr_alpha05");
        assert_eq!(lines.len(), 1 + 86);

        let props = std::fs::read_to_string(dir.path().join("proportions.csv")).unwrap();
        assert_eq!(props.lines().count(), 1 + 12 * 86 * 2);
        assert!(props.lines().nth(1).unwrap().starts_with("1,0.1,tp,false,"));

        let manifest = std::fs::read_to_string(dir.path().join("manifest.json")).unwrap();
        let parsed: serde_json::Value = serde_json::from_str(&manifest).unwrap();
        assert_eq!(parsed["n_completed"], 2);
        assert_eq!(parsed["config"]["n_evaluators"], 12);
    }
}
