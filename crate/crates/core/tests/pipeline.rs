//! Cross-module pipeline tests: synthetic generation through design, fit,
//! calibration, and detection, plus the CSV round-trip contract.

use evalguard_core::dataset::{ingest_reader, ColumnBinding};
use evalguard_core::fdr::{decision_curve, detect};
use evalguard_core::inference::ContrastKind;
use evalguard_core::regression::EstimatedCorrelation;
use evalguard_core::simulation::{fit_replicate, generate_dataset, SimConfig};

/// A small single-measurement study: 12 evaluators of 25 participants,
/// evaluator 3 planted 10 above the shared level.
fn planted_config() -> SimConfig {
    SimConfig {
        n_evaluators: 12,
        per_evaluator: 25,
        outlier_effects: vec![(3, 77.0)],
        sigma: 4.0,
        n_replicates: 1,
        base_seed: 31,
        ..SimConfig::default()
    }
}

#[test]
fn a_planted_deviation_survives_the_full_pipeline() {
    let config = planted_config();
    let data = generate_dataset(&config, config.base_seed).unwrap();
    let fit = fit_replicate(&config, &data).unwrap();
    let report = detect(&fit, ContrastKind::Truncated, 0.1, 5.0, 0.8, true).unwrap();

    assert_eq!(report.rejected, vec![3], "only the planted evaluator is flagged");
    assert_eq!(report.adjusted_rejected, vec![3]);
    assert!(report.q_hat < 0.01, "a clear deviation carries a tiny estimated FDR");
    assert_eq!(report.tests.len(), 12);
    assert_eq!(report.calibration.len(), 12);
}

#[test]
fn csv_round_trip_reproduces_the_fit_bit_for_bit() {
    let config = planted_config();
    let data = generate_dataset(&config, 77).unwrap();

    let mut buffer = Vec::new();
    data.export_csv(&mut buffer).unwrap();
    let binding = ColumnBinding {
        covariates: data.x_names().to_vec(),
        repeat_index: Some("repeat".into()),
        ..ColumnBinding::default()
    };
    let reread = ingest_reader(buffer.as_slice(), &binding).unwrap();

    let fit_a = fit_replicate(&config, &data).unwrap();
    let fit_b = fit_replicate(&config, &reread).unwrap();
    assert_eq!(fit_a.evaluator_ids, fit_b.evaluator_ids);
    for j in 0..fit_a.beta_hat.len() {
        assert_eq!(
            fit_a.beta_hat[j].to_bits(),
            fit_b.beta_hat[j].to_bits(),
            "effect {j} changed across the CSV round trip"
        );
    }
    for (a, b) in fit_a.beta_cov.iter().zip(fit_b.beta_cov.iter()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn the_top_effect_is_recovered_across_seeds() {
    let config = SimConfig {
        n_evaluators: 10,
        per_evaluator: 20,
        outlier_effects: vec![(0, 73.0)],
        sigma: 4.0,
        n_replicates: 1,
        ..SimConfig::default()
    };
    let mut recovered = 0;
    for seed in 0..20u64 {
        let data = generate_dataset(&config, 500 + seed).unwrap();
        let fit = fit_replicate(&config, &data).unwrap();
        let argmax = (0..fit.beta_hat.len())
            .max_by(|&a, &b| fit.beta_hat[a].partial_cmp(&fit.beta_hat[b]).unwrap())
            .unwrap();
        if argmax == 0 {
            recovered += 1;
        }
    }
    assert!(
        recovered >= 19,
        "planted top effect recovered in only {recovered}/20 replicates"
    );
}

#[test]
fn paired_measurements_flow_through_the_gee_pipeline() {
    let config = SimConfig {
        n_evaluators: 10,
        per_evaluator: 15,
        outlier_effects: vec![(2, 74.0)],
        sigma: 4.0,
        n_replicates: 1,
        base_seed: 9,
        paired_rho: Some(0.6),
        ..SimConfig::default()
    };
    let data = generate_dataset(&config, config.base_seed).unwrap();
    assert_eq!(data.n_records(), 10 * 15 * 2, "two measurements per participant");

    let fit = fit_replicate(&config, &data).unwrap();
    match &fit.working_correlation {
        EstimatedCorrelation::Exchangeable { alpha } => {
            assert!(
                (0.2..0.95).contains(alpha),
                "estimated within-participant correlation {alpha} far from the planted 0.6"
            );
        }
        other => panic!("paired fitting should use the exchangeable estimate, got {other:?}"),
    }

    let report = detect(&fit, ContrastKind::Truncated, 0.1, 5.0, 0.8, false).unwrap();
    assert_eq!(report.rejected, vec![2]);
}

#[test]
fn rejections_and_expected_false_discoveries_grow_with_the_power_target() {
    let config = planted_config();
    let data = generate_dataset(&config, config.base_seed).unwrap();
    let fit = fit_replicate(&config, &data).unwrap();
    let grid = evalguard_core::calibration::default_power_grid();
    let curve = decision_curve(&fit, ContrastKind::Truncated, 0.1, 5.0, &grid).unwrap();

    for pair in curve.points.windows(2) {
        assert!(
            pair[0].n_rejected <= pair[1].n_rejected,
            "rejection count dropped between power targets {} and {}",
            pair[0].phi,
            pair[1].phi
        );
        assert!(
            pair[0].numerator <= pair[1].numerator,
            "expected false-discovery count dropped between power targets {} and {}",
            pair[0].phi,
            pair[1].phi
        );
    }
}
