//! Study data: ingest, validation, and design-matrix construction.
//!
//! A study consists of participants, each measured by exactly one of M
//! evaluators, possibly several times (repeated measurements form a cluster
//! per participant). Ingest validates that structure and re-indexes
//! identifiers densely: evaluator and participant indices run from 0 in
//! lexicographic order of the original identifiers, with the original ids
//! retained for reporting.
//!
//! Covariates come in two flavors: participant-level covariates (constant
//! across a participant's measurements, e.g. age) and measurement-level
//! covariates (may vary across repeats, e.g. which side was measured).
//! Categorical text columns are expanded into reference-coded dummy columns
//! at ingest; the reference is the lexicographically first level.

use crate::error::{Error, Result};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

/// Maps the logical roles (outcome, participant, evaluator, covariates,
/// repeat index) onto CSV column names.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ColumnBinding {
    pub outcome: String,
    pub participant: String,
    pub evaluator: String,
    /// Participant-level covariate columns (numeric or categorical).
    pub covariates: Vec<String>,
    /// Optional repeat-index column (integer >= 1). When absent, repeats are
    /// numbered by order of appearance within each participant.
    pub repeat_index: Option<String>,
    /// Measurement-level covariate columns (numeric or categorical).
    pub measurement_covariates: Vec<String>,
}

impl Default for ColumnBinding {
    fn default() -> Self {
        ColumnBinding {
            outcome: "outcome".into(),
            participant: "participant".into(),
            evaluator: "evaluator".into(),
            covariates: Vec::new(),
            repeat_index: None,
            measurement_covariates: Vec::new(),
        }
    }
}

/// One validated measurement, with dense participant/evaluator indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRecord {
    /// Dense participant index (lexicographic order of original ids).
    pub participant: usize,
    /// Dense evaluator index (lexicographic order of original ids).
    pub evaluator: usize,
    /// Repeat number within the participant, starting at 1.
    pub repeat_index: u32,
    pub outcome: f64,
    /// Participant-level covariates (identical across the participant's
    /// records).
    pub x: Vec<f64>,
    /// Measurement-level covariates.
    pub z: Vec<f64>,
}

/// A raw measurement before validation and re-indexing, used to build a
/// [`Dataset`] in memory (the simulation generators produce these directly).
#[derive(Debug, Clone)]
pub struct RawRecord {
    pub participant_id: String,
    pub evaluator_id: String,
    /// `None` numbers repeats by order of appearance.
    pub repeat_index: Option<u32>,
    pub outcome: f64,
    pub x: Vec<f64>,
    pub z: Vec<f64>,
}

/// A validated study: records sorted by (participant, repeat), dense ids,
/// and the retained mapping back to the original identifiers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    records: Vec<MeasurementRecord>,
    participant_ids: Vec<String>,
    evaluator_ids: Vec<String>,
    x_names: Vec<String>,
    z_names: Vec<String>,
    /// participant index -> evaluator index
    evaluator_of: Vec<usize>,
    /// participant index -> half-open row range into `records`
    cluster_bounds: Vec<(usize, usize)>,
}

impl Dataset {
    /// Validate raw records and build a dataset: dense lexicographic
    /// re-indexing, one evaluator per participant, constant participant
    /// covariates, uniform covariate dimensions, no non-finite values.
    pub fn from_raw(
        mut raw: Vec<RawRecord>,
        x_names: Vec<String>,
        z_names: Vec<String>,
    ) -> Result<Dataset> {
        if raw.is_empty() {
            return Err(Error::EmptyInput);
        }
        for r in &raw {
            if r.x.len() != x_names.len() {
                return Err(Error::InvalidParameter(format!(
                    "participant {:?}: {} covariate values for {} covariate names",
                    r.participant_id,
                    r.x.len(),
                    x_names.len()
                )));
            }
            if r.z.len() != z_names.len() {
                return Err(Error::InvalidParameter(format!(
                    "participant {:?}: {} measurement-covariate values for {} names",
                    r.participant_id,
                    r.z.len(),
                    z_names.len()
                )));
            }
            if !r.outcome.is_finite()
                || r.x.iter().any(|v| !v.is_finite())
                || r.z.iter().any(|v| !v.is_finite())
            {
                return Err(Error::InvalidParameter(format!(
                    "participant {:?}: non-finite value",
                    r.participant_id
                )));
            }
        }

        // dense indices in lexicographic id order
        let mut participant_ids: Vec<String> =
            raw.iter().map(|r| r.participant_id.clone()).collect();
        participant_ids.sort();
        participant_ids.dedup();
        let mut evaluator_ids: Vec<String> = raw.iter().map(|r| r.evaluator_id.clone()).collect();
        evaluator_ids.sort();
        evaluator_ids.dedup();
        let p_index: BTreeMap<&str, usize> = participant_ids
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        let e_index: BTreeMap<&str, usize> = evaluator_ids
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();

        // one evaluator per participant
        let mut evaluator_of = vec![usize::MAX; participant_ids.len()];
        for r in &raw {
            let pi = p_index[r.participant_id.as_str()];
            let ei = e_index[r.evaluator_id.as_str()];
            if evaluator_of[pi] == usize::MAX {
                evaluator_of[pi] = ei;
            } else if evaluator_of[pi] != ei {
                return Err(Error::MultipleEvaluators {
                    participant: r.participant_id.clone(),
                    first: evaluator_ids[evaluator_of[pi]].clone(),
                    second: r.evaluator_id.clone(),
                });
            }
        }

        // participant covariates constant within participant
        let mut x_of: Vec<Option<&[f64]>> = vec![None; participant_ids.len()];
        for r in &raw {
            let pi = p_index[r.participant_id.as_str()];
            match x_of[pi] {
                None => x_of[pi] = Some(&r.x),
                Some(seen) if seen == r.x.as_slice() => {}
                Some(_) => {
                    return Err(Error::InconsistentCovariates {
                        participant: r.participant_id.clone(),
                    })
                }
            }
        }

        // assign repeat numbers where absent (order of appearance within the
        // participant), then sort records into (participant, repeat) order
        let mut next_repeat: Vec<u32> = vec![0; participant_ids.len()];
        let mut staged: Vec<(usize, u32, usize)> = Vec::with_capacity(raw.len()); // (participant, repeat, raw position)
        for (pos, r) in raw.iter().enumerate() {
            let pi = p_index[r.participant_id.as_str()];
            let k = match r.repeat_index {
                Some(k) => {
                    if k == 0 {
                        return Err(Error::InvalidParameter(format!(
                            "participant {:?}: repeat index must be >= 1",
                            r.participant_id
                        )));
                    }
                    k
                }
                None => {
                    next_repeat[pi] += 1;
                    next_repeat[pi]
                }
            };
            staged.push((pi, k, pos));
        }
        staged.sort_by_key(|&(pi, k, pos)| (pi, k, pos));

        let records: Vec<MeasurementRecord> = staged
            .iter()
            .map(|&(pi, k, pos)| {
                let r = &mut raw[pos];
                MeasurementRecord {
                    participant: pi,
                    evaluator: evaluator_of[pi],
                    repeat_index: k,
                    outcome: r.outcome,
                    x: std::mem::take(&mut r.x),
                    z: std::mem::take(&mut r.z),
                }
            })
            .collect();

        // cluster row ranges
        let mut cluster_bounds = vec![(0usize, 0usize); participant_ids.len()];
        let mut start = 0usize;
        for pi in 0..participant_ids.len() {
            let mut end = start;
            while end < records.len() && records[end].participant == pi {
                end += 1;
            }
            cluster_bounds[pi] = (start, end);
            start = end;
        }

        Ok(Dataset {
            records,
            participant_ids,
            evaluator_ids,
            x_names,
            z_names,
            evaluator_of,
            cluster_bounds,
        })
    }

    pub fn n_participants(&self) -> usize {
        self.participant_ids.len()
    }

    pub fn n_evaluators(&self) -> usize {
        self.evaluator_ids.len()
    }

    pub fn n_records(&self) -> usize {
        self.records.len()
    }

    pub fn records(&self) -> &[MeasurementRecord] {
        &self.records
    }

    pub fn participant_ids(&self) -> &[String] {
        &self.participant_ids
    }

    pub fn evaluator_ids(&self) -> &[String] {
        &self.evaluator_ids
    }

    pub fn x_names(&self) -> &[String] {
        &self.x_names
    }

    pub fn z_names(&self) -> &[String] {
        &self.z_names
    }

    /// Evaluator index of each participant.
    pub fn evaluator_of(&self) -> &[usize] {
        &self.evaluator_of
    }

    /// Half-open row ranges of each participant's records (records are
    /// sorted participant-major, so each cluster is contiguous).
    pub fn cluster_bounds(&self) -> &[(usize, usize)] {
        &self.cluster_bounds
    }

    /// Measurements per participant.
    pub fn t_i(&self) -> Vec<usize> {
        self.cluster_bounds.iter().map(|&(a, b)| b - a).collect()
    }

    /// Participants per evaluator.
    pub fn n_j(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.evaluator_ids.len()];
        for &e in &self.evaluator_of {
            counts[e] += 1;
        }
        counts
    }

    /// Outcome vector in record order.
    pub fn outcomes(&self) -> Array1<f64> {
        Array1::from_iter(self.records.iter().map(|r| r.outcome))
    }

    /// Write the dataset as CSV with canonical column names: `participant`,
    /// `evaluator`, `repeat`, `outcome`, then the covariate columns. Values
    /// round-trip exactly ([`ingest_reader`] on the output reproduces an
    /// identical dataset).
    pub fn export_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec![
            "participant".to_string(),
            "evaluator".to_string(),
            "repeat".to_string(),
            "outcome".to_string(),
        ];
        header.extend(self.x_names.iter().cloned());
        header.extend(self.z_names.iter().cloned());
        w.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![
                self.participant_ids[r.participant].clone(),
                self.evaluator_ids[r.evaluator].clone(),
                r.repeat_index.to_string(),
                format_float(r.outcome),
            ];
            row.extend(r.x.iter().map(|v| format_float(*v)));
            row.extend(r.z.iter().map(|v| format_float(*v)));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// The [`ColumnBinding`] that re-ingests a file written by
    /// [`Dataset::export_csv`].
    pub fn export_binding(&self) -> ColumnBinding {
        ColumnBinding {
            outcome: "outcome".into(),
            participant: "participant".into(),
            evaluator: "evaluator".into(),
            covariates: self.x_names.clone(),
            repeat_index: Some("repeat".into()),
            measurement_covariates: self.z_names.clone(),
        }
    }
}

/// Shortest exact decimal representation (round-trips to the same f64).
fn format_float(v: f64) -> String {
    format!("{v}")
}

/// Read a study from a CSV file. See [`ingest_reader`].
pub fn ingest_csv<P: AsRef<Path>>(path: P, binding: &ColumnBinding) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    ingest_reader(file, binding)
}

/// Read a study from CSV data: locate the bound columns, parse values,
/// expand categorical covariates into reference-coded dummies (reference =
/// lexicographically first level), and validate the participant/evaluator
/// structure. Missing values are rejected, never imputed.
pub fn ingest_reader<R: Read>(reader: R, binding: &ColumnBinding) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);

    let headers: Vec<String> = rdr
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn {
                column: name.to_string(),
            })
    };

    let outcome_col = col(&binding.outcome)?;
    let participant_col = col(&binding.participant)?;
    let evaluator_col = col(&binding.evaluator)?;
    let covariate_cols: Vec<usize> = binding
        .covariates
        .iter()
        .map(|c| col(c))
        .collect::<Result<_>>()?;
    let z_cols: Vec<usize> = binding
        .measurement_covariates
        .iter()
        .map(|c| col(c))
        .collect::<Result<_>>()?;
    let repeat_col = match &binding.repeat_index {
        Some(name) => Some(col(name)?),
        None => None,
    };

    // first pass: pull raw string rows (row numbers are 1-based data rows)
    let mut rows: Vec<Vec<String>> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        rows.push(rec.iter().map(|f| f.to_string()).collect());
    }
    if rows.is_empty() {
        return Err(Error::EmptyInput);
    }

    // decide numeric vs categorical per covariate column, then expand
    let x_plan = plan_columns(&binding.covariates, &covariate_cols, &rows)?;
    let z_plan = plan_columns(&binding.measurement_covariates, &z_cols, &rows)?;

    let mut raw = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        let rownum = i + 1;
        let outcome = parse_number(&binding.outcome, rownum, &row[outcome_col])?;
        let participant_id = require_value(&binding.participant, rownum, &row[participant_col])?;
        let evaluator_id = require_value(&binding.evaluator, rownum, &row[evaluator_col])?;
        let repeat_index = match repeat_col {
            None => None,
            Some(c) => {
                let text = require_value(binding.repeat_index.as_ref().unwrap(), rownum, &row[c])?;
                let k: u32 = text.parse().map_err(|_| Error::NonNumeric {
                    column: binding.repeat_index.clone().unwrap(),
                    row: rownum,
                    value: text.clone(),
                })?;
                Some(k)
            }
        };
        let x = expand_columns(&x_plan, row, rownum)?;
        let z = expand_columns(&z_plan, row, rownum)?;
        raw.push(RawRecord {
            participant_id,
            evaluator_id,
            repeat_index,
            outcome,
            x,
            z,
        });
    }

    let x_names = plan_names(&x_plan);
    let z_names = plan_names(&z_plan);
    Dataset::from_raw(raw, x_names, z_names)
}

/// How one bound CSV column becomes one or more numeric design inputs.
enum ColumnPlan {
    Numeric {
        name: String,
        col: usize,
    },
    /// Reference-coded dummies, one per non-reference level (levels sorted,
    /// the first is the reference).
    Categorical {
        name: String,
        col: usize,
        levels: Vec<String>,
    },
}

fn plan_columns(names: &[String], cols: &[usize], rows: &[Vec<String>]) -> Result<Vec<ColumnPlan>> {
    let mut plans = Vec::with_capacity(cols.len());
    for (name, &c) in names.iter().zip(cols.iter()) {
        let mut numeric = true;
        for (i, row) in rows.iter().enumerate() {
            let cell = row[c].trim();
            if cell.is_empty() {
                return Err(Error::MissingValue {
                    column: name.clone(),
                    row: i + 1,
                });
            }
            match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => {}
                _ => {
                    numeric = false;
                    break;
                }
            }
        }
        if numeric {
            plans.push(ColumnPlan::Numeric {
                name: name.clone(),
                col: c,
            });
        } else {
            // verify no missing cells, then collect sorted distinct levels
            let mut levels: Vec<String> = Vec::new();
            for (i, row) in rows.iter().enumerate() {
                let cell = row[c].trim();
                if cell.is_empty() {
                    return Err(Error::MissingValue {
                        column: name.clone(),
                        row: i + 1,
                    });
                }
                levels.push(cell.to_string());
            }
            levels.sort();
            levels.dedup();
            if levels.len() < 2 {
                return Err(Error::InvalidParameter(format!(
                    "categorical column {name:?} has a single level; it carries no information"
                )));
            }
            plans.push(ColumnPlan::Categorical {
                name: name.clone(),
                col: c,
                levels,
            });
        }
    }
    Ok(plans)
}

fn plan_names(plans: &[ColumnPlan]) -> Vec<String> {
    let mut names = Vec::new();
    for plan in plans {
        match plan {
            ColumnPlan::Numeric { name, .. } => names.push(name.clone()),
            ColumnPlan::Categorical { name, levels, .. } => {
                for level in &levels[1..] {
                    names.push(format!("{name}={level}"));
                }
            }
        }
    }
    names
}

fn expand_columns(plans: &[ColumnPlan], row: &[String], rownum: usize) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for plan in plans {
        match plan {
            ColumnPlan::Numeric { name, col } => {
                out.push(parse_number(name, rownum, &row[*col])?);
            }
            ColumnPlan::Categorical { name, col, levels } => {
                let cell = row[*col].trim();
                // levels were collected from the same rows, so membership
                // only fails on internal inconsistency
                if !levels.iter().any(|l| l == cell) {
                    return Err(Error::NonNumeric {
                        column: name.clone(),
                        row: rownum,
                        value: cell.to_string(),
                    });
                }
                for level in &levels[1..] {
                    out.push(if level == cell { 1.0 } else { 0.0 });
                }
            }
        }
    }
    Ok(out)
}

fn require_value(column: &str, row: usize, cell: &str) -> Result<String> {
    let trimmed = cell.trim();
    if trimmed.is_empty() {
        return Err(Error::MissingValue {
            column: column.to_string(),
            row,
        });
    }
    Ok(trimmed.to_string())
}

fn parse_number(column: &str, row: usize, cell: &str) -> Result<f64> {
    let trimmed = cell.trim();
    if trimmed.is_empty() {
        return Err(Error::MissingValue {
            column: column.to_string(),
            row,
        });
    }
    match trimmed.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(Error::NonNumeric {
            column: column.to_string(),
            row,
            value: trimmed.to_string(),
        }),
    }
}

/// The regression design built from a dataset: one indicator column per
/// evaluator (no intercept), then participant covariates, then
/// measurement covariates.
#[derive(Debug, Clone)]
pub struct DesignMatrix {
    pub x: Array2<f64>,
    /// Column names: `evaluator:<id>` for the indicator block, then the
    /// covariate names.
    pub columns: Vec<String>,
    /// Number of evaluator columns.
    pub m: usize,
    /// Number of participant-covariate columns.
    pub p: usize,
    /// Number of measurement-covariate columns.
    pub q: usize,
}

impl DesignMatrix {
    pub fn n_rows(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.x.ncols()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }
}

/// Build the no-intercept design matrix: rows in record order, columns
/// `[evaluator indicators | participant covariates | measurement covariates]`.
pub fn build_design(data: &Dataset) -> Result<DesignMatrix> {
    let n = data.n_records();
    let m = data.n_evaluators();
    let p = data.x_names().len();
    let q = data.z_names().len();
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    let mut x = Array2::<f64>::zeros((n, m + p + q));
    for (row, rec) in data.records().iter().enumerate() {
        x[[row, rec.evaluator]] = 1.0;
        for (k, v) in rec.x.iter().enumerate() {
            x[[row, m + k]] = *v;
        }
        for (k, v) in rec.z.iter().enumerate() {
            x[[row, m + p + k]] = *v;
        }
    }
    let mut columns: Vec<String> = data
        .evaluator_ids()
        .iter()
        .map(|id| format!("evaluator:{id}"))
        .collect();
    columns.extend(data.x_names().iter().cloned());
    columns.extend(data.z_names().iter().cloned());
    Ok(DesignMatrix {
        x,
        columns,
        m,
        p,
        q,
    })
}
