//! Implementations of the six subcommands.

use crate::artifacts::{
    correlation_summary, fmt, kind_name, read_json, render_curve_svg, render_report_txt,
    write_json, write_text, FitArtifact, ReportArtifact,
};
use crate::{
    input_failure, BhArgs, CurveArgs, DetectArgs, Engine, EngineArgs, Failure, FitArgs,
    SimulateArgs, VerifyArgs,
};
use evalguard_core::calibration::default_power_grid;
use evalguard_core::dataset::{build_design, ingest_csv};
use evalguard_core::fdr::{
    apply_adjustment_with, decision_curve, detect_at_fdr_with, detect_with, estimate_fdr,
    OutlierReport,
};
use evalguard_core::inference::truncated_mean;
use evalguard_core::regression::{fit_gee, fit_ols_with, CovarianceKind, SolverControl};
use evalguard_core::simulation::{run_study, SimConfig};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Fit from a CSV with the configured engine. Shared by `fit` and `detect`.
fn fit_from_csv(
    input: &Path,
    ingest: &crate::IngestArgs,
    engine: &EngineArgs,
) -> Result<FitArtifact, Failure> {
    if engine.robust && engine.engine == Engine::Gee {
        return Err(input_failure(anyhow::anyhow!(
            "--robust only applies to the OLS engine; the GEE sandwich covariance is already robust"
        )));
    }
    let data = ingest_csv(input, &ingest.binding())?;
    let design = build_design(&data)?;
    let (fit, engine_name, correlation) = match engine.engine {
        Engine::Ols => {
            let kind = if engine.robust {
                CovarianceKind::RobustHc0
            } else {
                CovarianceKind::ModelBased
            };
            (fit_ols_with(&design, &data.outcomes(), kind)?, "ols", None)
        }
        Engine::Gee => {
            let corr = engine.corr.to_core();
            let fit = fit_gee(&data, &design, corr, &SolverControl::default())?;
            let name = match engine.corr {
                crate::Corr::Independent => "independent",
                crate::Corr::Exchangeable => "exchangeable",
                crate::Corr::Unstructured => "unstructured",
            };
            (fit, "gee", Some(name.to_string()))
        }
    };
    Ok(FitArtifact {
        engine: engine_name.to_string(),
        correlation,
        robust: engine.robust,
        fit,
    })
}

fn ensure_out_dir(out: &PathBuf) -> Result<(), Failure> {
    std::fs::create_dir_all(out)
        .map_err(|e| input_failure(anyhow::anyhow!("creating {}: {e}", out.display())))
}

pub fn cmd_fit(args: FitArgs) -> Result<(), Failure> {
    let artifact = fit_from_csv(&args.input, &args.ingest, &args.engine)?;
    let fit = &artifact.fit;

    ensure_out_dir(&args.out)?;
    write_json(&args.out.join("fit.json"), &artifact)?;

    // Per-evaluator effect table with both centerings used downstream.
    let m = fit.beta_hat.len();
    let mean = fit.beta_hat.sum() / m as f64;
    let tmean = truncated_mean(&fit.beta_hat, args.delta)?;
    let mut table = String::from("evaluator,beta,beta_minus_mean,beta_minus_truncated_mean\n");
    for j in 0..m {
        let b = fit.beta_hat[j];
        let _ = writeln!(
            table,
            "{},{},{},{}",
            fit.evaluator_ids[j],
            fmt(b),
            fmt(b - mean),
            fmt(b - tmean)
        );
    }
    write_text(&args.out.join("beta_table.csv"), &table)?;

    println!(
        "fitted {} evaluator effects from {} observations ({} engine, {} scoring pass{})",
        m,
        fit.n_obs,
        artifact.engine,
        fit.n_iterations,
        if fit.n_iterations == 1 { "" } else { "es" }
    );
    if artifact.engine == "gee" {
        println!(
            "working correlation: {}",
            correlation_summary(&fit.working_correlation)
        );
    }
    println!(
        "wrote {} and {}",
        args.out.join("fit.json").display(),
        args.out.join("beta_table.csv").display()
    );
    Ok(())
}

/// Parse a "start:stop:step" power grid. Every point must lie in (0, 1).
fn parse_grid(spec: &str) -> Result<Vec<f64>, Failure> {
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() != 3 {
        return Err(input_failure(anyhow::anyhow!(
            "--grid must be start:stop:step, got {spec:?}"
        )));
    }
    let nums: Vec<f64> = parts
        .iter()
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| input_failure(anyhow::anyhow!("--grid component {p:?} is not a number")))
        })
        .collect::<Result<_, _>>()?;
    let (start, stop, step) = (nums[0], nums[1], nums[2]);
    if !start.is_finite() || !stop.is_finite() || !(step > 0.0) || start > stop {
        return Err(input_failure(anyhow::anyhow!(
            "--grid needs start <= stop and step > 0, got {spec:?}"
        )));
    }
    let mut grid = Vec::new();
    let mut k = 0usize;
    loop {
        let v = start + k as f64 * step;
        if v > stop + 1e-9 {
            break;
        }
        if !(v > 0.0 && v < 1.0) {
            return Err(input_failure(anyhow::anyhow!(
                "power grid point {v} outside (0, 1)"
            )));
        }
        grid.push(v);
        k += 1;
        if k > 10_000 {
            return Err(input_failure(anyhow::anyhow!(
                "--grid {spec:?} expands to more than 10000 points"
            )));
        }
    }
    if grid.is_empty() {
        return Err(input_failure(anyhow::anyhow!(
            "--grid {spec:?} contains no points"
        )));
    }
    Ok(grid)
}

pub fn cmd_curve(args: CurveArgs) -> Result<(), Failure> {
    let artifact: FitArtifact = read_json(&args.fit)?;
    let grid = match &args.grid {
        Some(spec) => parse_grid(spec)?,
        None => default_power_grid(),
    };
    let curve = decision_curve(
        &artifact.fit,
        args.contrast.to_core(),
        args.delta,
        args.c,
        &grid,
    )?;

    ensure_out_dir(&args.out)?;
    let mut csv = String::from("phi,n_rejected,numerator,q_hat\n");
    for p in &curve.points {
        let _ = writeln!(
            csv,
            "{},{},{},{}",
            fmt(p.phi),
            p.n_rejected,
            fmt(p.numerator),
            fmt(p.q_hat)
        );
    }
    let csv_path = args.out.join("fdr_curve.csv");
    write_text(&csv_path, &csv)?;
    println!(
        "traced the decision curve over {} power targets ({} contrast, shift {})",
        curve.points.len(),
        kind_name(curve.kind),
        fmt(curve.c)
    );
    println!("wrote {}", csv_path.display());
    if args.svg {
        let svg_path = args.out.join("curve.svg");
        write_text(&svg_path, &render_curve_svg(&curve))?;
        println!("wrote {}", svg_path.display());
    }
    Ok(())
}

pub fn cmd_detect(args: DetectArgs) -> Result<(), Failure> {
    let artifact = match (&args.input, &args.fit) {
        (Some(input), None) => fit_from_csv(input, &args.ingest, &args.engine)?,
        (None, Some(fit_path)) => read_json(fit_path)?,
        // clap's arg group guarantees exactly one source.
        _ => unreachable!("clap enforces exactly one of --input/--fit"),
    };
    let fit = &artifact.fit;
    let kind = args.contrast.to_core();
    let rule = args.adjust_rule.to_core();

    let report = match (args.power, args.target_fdr) {
        (Some(phi), None) => detect_with(fit, kind, args.delta, args.c, phi, args.adjust, rule)?,
        (None, Some(budget)) => {
            detect_at_fdr_with(fit, kind, args.delta, args.c, budget, args.adjust, rule)?
        }
        _ => unreachable!("clap enforces exactly one of --power/--target-fdr"),
    };

    let report_artifact = ReportArtifact {
        evaluator_ids: fit.evaluator_ids.clone(),
        engine: artifact.engine.clone(),
        report,
    };

    ensure_out_dir(&args.out)?;
    write_json(&args.out.join("report.json"), &report_artifact)?;
    write_text(
        &args.out.join("report.txt"),
        &render_report_txt(&report_artifact),
    )?;

    let report = &report_artifact.report;
    let names = |set: &[usize]| -> String {
        if set.is_empty() {
            "(none)".into()
        } else {
            set.iter()
                .map(|&j| report_artifact.evaluator_ids[j].as_str())
                .collect::<Vec<_>>()
                .join(", ")
        }
    };
    println!(
        "flagged {} of {} evaluators (estimated FDR {})",
        report.rejected.len(),
        report.tests.len(),
        fmt(report.q_hat)
    );
    println!("flagged: {}", names(&report.rejected));
    if report.settings.adjust {
        println!("after adjustment: {}", names(&report.adjusted_rejected));
    }
    if let Some(d) = &report.diagnostic {
        println!("note: {d}");
    }
    println!(
        "wrote {} and {}",
        args.out.join("report.json").display(),
        args.out.join("report.txt").display()
    );
    Ok(())
}

pub fn cmd_simulate(args: SimulateArgs) -> Result<(), Failure> {
    let mut config = SimConfig {
        n_evaluators: args.evaluators,
        per_evaluator: args.per_evaluator,
        sigma: args.sigma,
        n_replicates: args.replicates,
        c: args.c,
        kind: args.contrast.to_core(),
        delta: args.delta,
        base_seed: args.seed,
        ..SimConfig::default()
    };
    if args.paired {
        config.paired_rho = args.rho;
    }
    // Planted deviations outside a shrunk roster would silently vanish;
    // keep only the ones the roster can hold.
    config.outlier_effects.retain(|&(j, _)| j < config.n_evaluators);

    let summary = run_study(&config)?;
    summary.write_csv_bundle(&args.out)?;
    println!(
        "completed {} of {} replicates ({} failed); wrote the CSV bundle to {}",
        summary.n_completed,
        config.n_replicates,
        summary.n_failures,
        args.out.display()
    );
    Ok(())
}

pub fn cmd_bh(args: BhArgs) -> Result<(), Failure> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(&args.input)
        .map_err(|e| input_failure(anyhow::anyhow!("reading {}: {e}", args.input.display())))?;
    let headers = rdr
        .headers()
        .map_err(input_failure)?
        .iter()
        .map(|h| h.to_string())
        .collect::<Vec<_>>();
    let col = headers
        .iter()
        .position(|h| h == &args.pvalue_col)
        .ok_or_else(|| {
            input_failure(anyhow::anyhow!(
                "column {:?} not found in {}; available: {}",
                args.pvalue_col,
                args.input.display(),
                headers.join(", ")
            ))
        })?;

    let mut pvalues = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record.map_err(input_failure)?;
        let raw = record.get(col).ok_or_else(|| {
            input_failure(anyhow::anyhow!("data row {} is missing column {:?}", i + 1, args.pvalue_col))
        })?;
        let p: f64 = raw.parse().map_err(|_| {
            input_failure(anyhow::anyhow!(
                "data row {}: {:?} is not a number",
                i + 1,
                raw
            ))
        })?;
        pvalues.push(p);
    }

    let mut rejected = evalguard_core::fdr::bh_procedure(&pvalues, args.alpha)?;
    rejected.sort_unstable();
    println!("row,p_value");
    for &j in &rejected {
        println!("{},{}", j + 1, fmt(pvalues[j]));
    }
    eprintln!(
        "rejected {} of {} p-values at level {}",
        rejected.len(),
        pvalues.len(),
        fmt(args.alpha)
    );
    Ok(())
}

/// Recompute a report's decisions from nothing but its own stored state.
fn recompute(report: &OutlierReport) -> Result<(Vec<usize>, Vec<usize>, f64, f64), Failure> {
    if report.calibration.is_empty() {
        // Degenerate report: no operating point existed, nothing rejected.
        return Ok((Vec::new(), Vec::new(), 0.0, 0.0));
    }
    let m = report.tests.len();
    let mut alphas = vec![f64::NAN; m];
    for point in &report.calibration {
        if point.j >= m {
            return Err(input_failure(anyhow::anyhow!(
                "calibration refers to evaluator {} but only {} were tested",
                point.j,
                m
            )));
        }
        alphas[point.j] = point.alpha;
    }
    let mut pvalues = vec![f64::NAN; m];
    for test in &report.tests {
        if test.j >= m {
            return Err(input_failure(anyhow::anyhow!(
                "test refers to evaluator {} but only {} were tested",
                test.j,
                m
            )));
        }
        pvalues[test.j] = test.p_value;
    }
    if alphas.iter().chain(pvalues.iter()).any(|v| v.is_nan()) {
        return Err(input_failure(anyhow::anyhow!(
            "stored tests/calibration do not cover every evaluator"
        )));
    }

    let est = estimate_fdr(&alphas, &pvalues)?;
    let mut rejected: Vec<usize> = (0..m).filter(|&j| pvalues[j] < alphas[j]).collect();
    rejected.sort_by(|&a, &b| {
        pvalues[a]
            .partial_cmp(&pvalues[b])
            .expect("p-values are finite")
            .then(a.cmp(&b))
    });
    let adjusted = if report.settings.adjust {
        apply_adjustment_with(&rejected, est.q_hat, report.settings.adjust_rule)
    } else {
        rejected.clone()
    };
    Ok((rejected, adjusted, est.numerator, est.q_hat))
}

pub fn cmd_verify(args: VerifyArgs) -> Result<(), Failure> {
    let artifact: ReportArtifact = read_json(&args.input)?;
    let report = &artifact.report;
    let (rejected, adjusted, numerator, q_hat) = recompute(report)?;

    let mut mismatches = Vec::new();
    if rejected != report.rejected {
        mismatches.push(format!(
            "rejected set: stored {:?}, recomputed {:?}",
            report.rejected, rejected
        ));
    }
    if adjusted != report.adjusted_rejected {
        mismatches.push(format!(
            "adjusted set: stored {:?}, recomputed {:?}",
            report.adjusted_rejected, adjusted
        ));
    }
    if numerator.to_bits() != report.numerator.to_bits() {
        mismatches.push(format!(
            "expected false-discovery count: stored {}, recomputed {}",
            fmt(report.numerator),
            fmt(numerator)
        ));
    }
    if q_hat.to_bits() != report.q_hat.to_bits() {
        mismatches.push(format!(
            "estimated FDR: stored {}, recomputed {}",
            fmt(report.q_hat),
            fmt(q_hat)
        ));
    }

    if mismatches.is_empty() {
        println!(
            "report verified: decisions in {} reproduce exactly from its stored state",
            args.input.display()
        );
        Ok(())
    } else {
        Err(input_failure(anyhow::anyhow!(
            "report {} does not reproduce from its stored state:\n  {}",
            args.input.display(),
            mismatches.join("\n  ")
        )))
    }
}
