//! On-disk artifacts and their renderers.
//!
//! `fit.json` and `report.json` are self-contained: each stores everything
//! needed to resume downstream steps (curve tracing, detection, offline
//! verification) without the original CSV. All rendering is a pure function
//! of the artifact contents, so identical inputs produce byte-identical
//! files.

use crate::{input_failure, Failure};
use evalguard_core::fdr::{CurvePoint, DecisionCurve, OutlierReport};
use evalguard_core::inference::ContrastKind;
use evalguard_core::regression::{EstimatedCorrelation, FitResult};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

/// Saved output of `fit`: the fitted model plus how it was estimated.
#[derive(Serialize, Deserialize)]
pub struct FitArtifact {
    /// Estimation engine: "ols" or "gee".
    pub engine: String,
    /// Working correlation requested for the GEE engine.
    pub correlation: Option<String>,
    /// Whether the OLS covariance was the robust sandwich.
    pub robust: bool,
    pub fit: FitResult,
}

/// Saved output of `detect`: the report plus the evaluator labels needed to
/// present it.
#[derive(Serialize, Deserialize)]
pub struct ReportArtifact {
    /// Original evaluator identifiers, indexed like the report's tests.
    pub evaluator_ids: Vec<String>,
    /// Estimation engine the fit came from.
    pub engine: String,
    pub report: OutlierReport,
}

/// Shortest decimal form that parses back to the same f64.
pub fn fmt(v: f64) -> String {
    format!("{v}")
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut body = serde_json::to_string_pretty(value).map_err(input_failure)?;
    body.push('\n');
    std::fs::write(path, body)
        .map_err(|e| input_failure(anyhow::anyhow!("writing {}: {e}", path.display())))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, Failure> {
    let body = std::fs::read_to_string(path)
        .map_err(|e| input_failure(anyhow::anyhow!("reading {}: {e}", path.display())))?;
    serde_json::from_str(&body)
        .map_err(|e| input_failure(anyhow::anyhow!("parsing {}: {e}", path.display())))
}

pub fn write_text(path: &Path, body: &str) -> Result<(), Failure> {
    std::fs::write(path, body)
        .map_err(|e| input_failure(anyhow::anyhow!("writing {}: {e}", path.display())))
}

pub fn kind_name(kind: ContrastKind) -> &'static str {
    match kind {
        ContrastKind::Truncated => "truncated",
        ContrastKind::Untruncated => "untruncated",
    }
}

pub fn correlation_summary(corr: &EstimatedCorrelation) -> String {
    match corr {
        EstimatedCorrelation::Independence => "independence".into(),
        EstimatedCorrelation::Exchangeable { alpha } => {
            format!("exchangeable (alpha_hat = {})", fmt(*alpha))
        }
        EstimatedCorrelation::Unstructured { matrix } => {
            format!("unstructured ({}x{})", matrix.nrows(), matrix.ncols())
        }
    }
}

/// Human-readable report: run settings, then one line per evaluator with its
/// deviation estimate, p-value, calibrated level and flags, then the flagged
/// sets.
pub fn render_report_txt(artifact: &ReportArtifact) -> String {
    let report = &artifact.report;
    let s = &report.settings;
    let mut out = String::new();

    let _ = writeln!(out, "outlier evaluator report");
    let _ = writeln!(out, "========================");
    let _ = writeln!(out, "engine:            {}", artifact.engine);
    let _ = writeln!(
        out,
        "contrast:          {} (delta = {})",
        kind_name(s.kind),
        fmt(s.delta)
    );
    let _ = writeln!(out, "alternative shift: {}", fmt(s.c));
    match (s.phi, s.target_fdr) {
        (Some(phi), Some(budget)) => {
            let _ = writeln!(
                out,
                "operating point:   power {} (chosen for FDR budget {})",
                fmt(phi),
                fmt(budget)
            );
        }
        (Some(phi), None) => {
            let _ = writeln!(out, "operating point:   power {}", fmt(phi));
        }
        (None, Some(budget)) => {
            let _ = writeln!(
                out,
                "operating point:   none met FDR budget {}",
                fmt(budget)
            );
        }
        (None, None) => {
            let _ = writeln!(out, "operating point:   none");
        }
    }
    let _ = writeln!(
        out,
        "expected false discoveries: {}",
        fmt(report.numerator)
    );
    let _ = writeln!(out, "estimated FDR:     {}", fmt(report.q_hat));
    let _ = writeln!(
        out,
        "adjustment:        {}",
        if s.adjust { "on" } else { "off" }
    );
    if let Some(d) = &report.diagnostic {
        let _ = writeln!(out, "note:              {d}");
    }
    let _ = writeln!(out);

    let id_width = artifact
        .evaluator_ids
        .iter()
        .map(|id| id.len())
        .max()
        .unwrap_or(9)
        .max("evaluator".len());
    let _ = writeln!(
        out,
        "{:<id_width$}  {:>12}  {:>12}  {:>12}  flagged  kept",
        "evaluator", "deviation", "p_value", "alpha_j"
    );
    let flagged: std::collections::BTreeSet<usize> = report.rejected.iter().copied().collect();
    let kept: std::collections::BTreeSet<usize> =
        report.adjusted_rejected.iter().copied().collect();
    for (j, test) in report.tests.iter().enumerate() {
        let alpha = report
            .calibration
            .get(j)
            .map(|c| format!("{:>12.6e}", c.alpha))
            .unwrap_or_else(|| format!("{:>12}", "-"));
        let _ = writeln!(
            out,
            "{:<id_width$}  {:>12.4}  {:>12.6e}  {alpha}  {:>7}  {:>4}",
            artifact.evaluator_ids[j],
            test.estimate,
            test.p_value,
            if flagged.contains(&j) { "yes" } else { "no" },
            if kept.contains(&j) { "yes" } else { "no" },
        );
    }
    let _ = writeln!(out);

    let names = |set: &[usize]| -> String {
        if set.is_empty() {
            "(none)".into()
        } else {
            set.iter()
                .map(|&j| artifact.evaluator_ids[j].as_str())
                .collect::<Vec<_>>()
                .join(", ")
        }
    };
    let _ = writeln!(out, "flagged (ascending p): {}", names(&report.rejected));
    let _ = writeln!(
        out,
        "after adjustment:      {}",
        names(&report.adjusted_rejected)
    );
    out
}

/// Decision curve as a standalone SVG: estimated FDR against the power
/// target, with reference lines at the conventional reading points.
pub fn render_curve_svg(curve: &DecisionCurve) -> String {
    const W: f64 = 640.0;
    const H: f64 = 420.0;
    const ML: f64 = 60.0; // left margin
    const MR: f64 = 20.0;
    const MT: f64 = 20.0;
    const MB: f64 = 50.0;

    let points: &[CurvePoint] = &curve.points;
    let x_min = points.first().map(|p| p.phi).unwrap_or(0.0);
    let x_max = points.last().map(|p| p.phi).unwrap_or(1.0);
    let x_span = if x_max > x_min { x_max - x_min } else { 1.0 };
    let y_max = points
        .iter()
        .map(|p| p.q_hat)
        .fold(1.0_f64, f64::max)
        .max(1e-12);

    let to_x = |phi: f64| ML + (phi - x_min) / x_span * (W - ML - MR);
    let to_y = |q: f64| H - MB - (q / y_max) * (H - MT - MB);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);

    // axes
    let _ = writeln!(
        svg,
        r#"<line x1="{ML}" y1="{MT}" x2="{ML}" y2="{y0}" stroke="black"/>"#,
        y0 = H - MB
    );
    let _ = writeln!(
        svg,
        r#"<line x1="{ML}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#,
        y0 = H - MB,
        x1 = W - MR
    );

    // x ticks every 0.1 within the grid range
    let mut tick = (x_min * 10.0).ceil() / 10.0;
    while tick <= x_max + 1e-9 {
        let x = to_x(tick);
        let _ = writeln!(
            svg,
            r#"<line x1="{x:.2}" y1="{y0}" x2="{x:.2}" y2="{y1}" stroke="black"/>"#,
            y0 = H - MB,
            y1 = H - MB + 5.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{x:.2}" y="{y}" font-size="12" text-anchor="middle">{tick:.1}</text>"#,
            y = H - MB + 20.0
        );
        tick += 0.1;
    }
    // y ticks at fifths of the range
    for i in 0..=5 {
        let q = y_max * i as f64 / 5.0;
        let y = to_y(q);
        let _ = writeln!(
            svg,
            r#"<line x1="{x0}" y1="{y:.2}" x2="{ML}" y2="{y:.2}" stroke="black"/>"#,
            x0 = ML - 5.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{x}" y="{yt:.2}" font-size="12" text-anchor="end">{q:.2}</text>"#,
            x = ML - 8.0,
            yt = y + 4.0
        );
    }

    // axis labels
    let _ = writeln!(
        svg,
        r#"<text x="{x:.2}" y="{y}" font-size="13" text-anchor="middle">power target</text>"#,
        x = (ML + W - MR) / 2.0,
        y = H - 12.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{y:.2}" font-size="13" text-anchor="middle" transform="rotate(-90 16 {y:.2})">estimated FDR</text>"#,
        y = (MT + H - MB) / 2.0
    );

    // reference lines: estimated FDR 0.5, and the q_hat = target guide is up
    // to the caller; a dashed unity line marks where the estimate saturates.
    if y_max >= 0.5 {
        let y = to_y(0.5);
        let _ = writeln!(
            svg,
            r#"<line x1="{ML}" y1="{y:.2}" x2="{x1}" y2="{y:.2}" stroke="gray" stroke-dasharray="4 4"/>"#,
            x1 = W - MR
        );
    }

    // the curve itself
    let coords: Vec<String> = points
        .iter()
        .map(|p| format!("{:.2},{:.2}", to_x(p.phi), to_y(p.q_hat)))
        .collect();
    let _ = writeln!(
        svg,
        r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="2"/>"#,
        coords.join(" ")
    );

    let _ = writeln!(svg, "</svg>");
    svg
}
