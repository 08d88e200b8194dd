//! CSV ingestion: schema-driven column mapping, fixed-effect expansion and
//! dataset serialization.
//!
//! Rows with missing required values are rejected, never imputed. Judge and
//! cluster columns may hold arbitrary strings; they are re-encoded to dense
//! labels in first-appearance order, deterministically.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::data::{GroupedLabels, JudgeDesignData, MultiwayClustering};
use crate::error::DataError;

/// Column mapping for a judge-design CSV.
#[derive(Debug, Clone, Default)]
pub struct Schema {
    pub outcome: String,
    pub treatments: Vec<String>,
    pub judge: String,
    /// Numeric control columns, used as-is.
    pub numeric_controls: Vec<String>,
    /// Categorical control columns, expanded into one dummy per level.
    pub fe_controls: Vec<String>,
    /// Clustering dimensions as (name, column) pairs, in declaration order.
    pub clusters: Vec<(String, String)>,
    /// Prepend a column of ones to the controls.
    pub intercept: bool,
}

impl Schema {
    /// Parse a plain-text `key = value` schema. Recognized keys:
    /// `outcome`, `treatment`, `judge`, `controls`, `fe`, `cluster`
    /// (comma-separated `name:column` pairs) and `intercept` (true/false).
    pub fn parse(text: &str) -> Result<Self, DataError> {
        let mut schema = Schema::default();
        let mut saw_outcome = false;
        let mut saw_judge = false;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                DataError::InvalidSchema(format!("line {}: expected key = value", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            match key {
                "outcome" => {
                    schema.outcome = value.to_string();
                    saw_outcome = true;
                }
                "treatment" => {
                    schema.treatments = split_list(value);
                }
                "judge" => {
                    schema.judge = value.to_string();
                    saw_judge = true;
                }
                "controls" => {
                    schema.numeric_controls = split_list(value);
                }
                "fe" => {
                    schema.fe_controls = split_list(value);
                }
                "cluster" => {
                    for item in split_list(value) {
                        let (name, column) = item.split_once(':').ok_or_else(|| {
                            DataError::InvalidSchema(format!(
                                "cluster entry `{item}` must be name:column"
                            ))
                        })?;
                        schema
                            .clusters
                            .push((name.trim().to_string(), column.trim().to_string()));
                    }
                }
                "intercept" => {
                    schema.intercept = matches!(value, "true" | "1" | "yes");
                }
                other => {
                    return Err(DataError::InvalidSchema(format!(
                        "unknown schema key `{other}`"
                    )))
                }
            }
        }
        if !saw_outcome || schema.outcome.is_empty() {
            return Err(DataError::InvalidSchema("missing `outcome`".into()));
        }
        if schema.treatments.is_empty() {
            return Err(DataError::InvalidSchema("missing `treatment`".into()));
        }
        if !saw_judge || schema.judge.is_empty() {
            return Err(DataError::InvalidSchema("missing `judge`".into()));
        }
        Ok(schema)
    }
}

fn split_list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

/// A loaded dataset plus bookkeeping about the control layout.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub data: JudgeDesignData,
    pub rows_read: usize,
    /// Rows rejected because a required value was missing.
    pub rows_dropped: usize,
    /// Control column names, in the order of the control matrix.
    pub control_names: Vec<String>,
    /// For each fixed-effect source column: (name, first control column,
    /// number of dummy columns).
    pub fe_spans: Vec<(String, usize, usize)>,
    /// Clustering dimension names in declaration order.
    pub cluster_names: Vec<String>,
}

pub fn load_dataset(path: &Path, schema: &Schema) -> Result<LoadedDataset, DataError> {
    let mut reader = csv::ReaderBuilder::new().flexible(false).from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.is_empty() {
        return Err(DataError::Empty("CSV has no header row".into()));
    }
    let col = |name: &str| -> Result<usize, DataError> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };

    let outcome_idx = col(&schema.outcome)?;
    let treat_idx: Vec<usize> = schema
        .treatments
        .iter()
        .map(|c| col(c))
        .collect::<Result<_, _>>()?;
    let judge_idx = col(&schema.judge)?;
    let numeric_idx: Vec<usize> = schema
        .numeric_controls
        .iter()
        .map(|c| col(c))
        .collect::<Result<_, _>>()?;
    let fe_idx: Vec<usize> = schema
        .fe_controls
        .iter()
        .map(|c| col(c))
        .collect::<Result<_, _>>()?;
    let cluster_idx: Vec<usize> = schema
        .clusters
        .iter()
        .map(|(_, c)| col(c))
        .collect::<Result<_, _>>()?;

    let mut rows_read = 0usize;
    let mut rows_dropped = 0usize;
    let mut y_vals: Vec<f64> = Vec::new();
    let mut x_rows: Vec<Vec<f64>> = Vec::new();
    let mut judge_keys: Vec<String> = Vec::new();
    let mut numeric_rows: Vec<Vec<f64>> = Vec::new();
    let mut fe_keys: Vec<Vec<String>> = vec![Vec::new(); fe_idx.len()];
    let mut cluster_keys: Vec<Vec<String>> = vec![Vec::new(); cluster_idx.len()];

    let required: Vec<usize> = std::iter::once(outcome_idx)
        .chain(treat_idx.iter().copied())
        .chain(std::iter::once(judge_idx))
        .chain(numeric_idx.iter().copied())
        .chain(fe_idx.iter().copied())
        .chain(cluster_idx.iter().copied())
        .collect();

    for (row_number, record) in reader.records().enumerate() {
        let record = record?;
        rows_read += 1;
        if required
            .iter()
            .any(|&i| record.get(i).is_none_or(|v| v.trim().is_empty()))
        {
            rows_dropped += 1;
            continue;
        }
        let parse = |idx: usize, name: &str| -> Result<f64, DataError> {
            let raw = record.get(idx).unwrap_or("").trim();
            raw.parse::<f64>().map_err(|_| DataError::NonNumeric {
                row: row_number + 1,
                column: name.to_string(),
                value: raw.to_string(),
            })
        };
        y_vals.push(parse(outcome_idx, &schema.outcome)?);
        x_rows.push(
            treat_idx
                .iter()
                .zip(&schema.treatments)
                .map(|(&i, name)| parse(i, name))
                .collect::<Result<_, _>>()?,
        );
        numeric_rows.push(
            numeric_idx
                .iter()
                .zip(&schema.numeric_controls)
                .map(|(&i, name)| parse(i, name))
                .collect::<Result<_, _>>()?,
        );
        judge_keys.push(record.get(judge_idx).unwrap().trim().to_string());
        for (slot, &i) in fe_idx.iter().enumerate() {
            fe_keys[slot].push(record.get(i).unwrap().trim().to_string());
        }
        for (slot, &i) in cluster_idx.iter().enumerate() {
            cluster_keys[slot].push(record.get(i).unwrap().trim().to_string());
        }
    }

    let n = y_vals.len();
    if n == 0 {
        return Err(DataError::Empty(format!(
            "no usable rows ({rows_read} read, {rows_dropped} dropped)"
        )));
    }

    let y = DVector::from_vec(y_vals);
    let p = schema.treatments.len();
    let x = DMatrix::from_fn(n, p, |i, j| x_rows[i][j]);
    let judges = GroupedLabels::from_keys(&judge_keys)?;

    // Controls: optional intercept, numeric columns, then one dummy block
    // per fixed-effect column (all levels; pruning happens downstream).
    let mut control_names: Vec<String> = Vec::new();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    if schema.intercept {
        control_names.push("intercept".to_string());
        columns.push(vec![1.0; n]);
    }
    for (j, name) in schema.numeric_controls.iter().enumerate() {
        control_names.push(name.clone());
        columns.push(numeric_rows.iter().map(|row| row[j]).collect());
    }
    let mut fe_spans = Vec::with_capacity(fe_idx.len());
    for (slot, name) in schema.fe_controls.iter().enumerate() {
        let start = columns.len();
        let levels = GroupedLabels::from_keys(&fe_keys[slot])?;
        let mut level_names: HashMap<usize, &str> = HashMap::new();
        for (i, key) in fe_keys[slot].iter().enumerate() {
            level_names.entry(levels.label(i)).or_insert(key.as_str());
        }
        for level in 0..levels.group_count() {
            control_names.push(format!("{name}={}", level_names[&level]));
            let mut col = vec![0.0; n];
            for &i in levels.members(level) {
                col[i] = 1.0;
            }
            columns.push(col);
        }
        fe_spans.push((name.clone(), start, levels.group_count()));
    }
    let controls = DMatrix::from_fn(n, columns.len(), |i, j| columns[j][i]);

    let mut dims = Vec::with_capacity(cluster_idx.len());
    for keys in &cluster_keys {
        dims.push(GroupedLabels::from_keys(keys)?);
    }
    let clustering = MultiwayClustering::new(dims)?;
    let cluster_names = schema.clusters.iter().map(|(n, _)| n.clone()).collect();

    Ok(LoadedDataset {
        data: JudgeDesignData::new(y, x, judges, controls, clustering)?,
        rows_read,
        rows_dropped,
        control_names,
        fe_spans,
        cluster_names,
    })
}

/// Write a dataset as CSV with full-precision (round-trip exact) floats.
///
/// Columns: outcome, treatments, judge label, then one column per clustering
/// dimension. Labels are written 1-based.
pub fn write_dataset(
    data: &JudgeDesignData,
    dim_names: &[String],
    path: &Path,
) -> Result<(), DataError> {
    if dim_names.len() != data.clustering().dim_count() {
        return Err(DataError::LengthMismatch {
            what: "clustering dimension names".into(),
            expected: data.clustering().dim_count(),
            got: dim_names.len(),
        });
    }
    let mut writer = csv::Writer::from_path(path)?;
    let mut header = vec!["y".to_string()];
    if data.p() == 1 {
        header.push("x".to_string());
    } else {
        header.extend((1..=data.p()).map(|j| format!("x{j}")));
    }
    header.push("judge".to_string());
    header.extend(dim_names.iter().cloned());
    writer.write_record(&header)?;

    for i in 0..data.n() {
        let mut row = vec![format!("{}", data.y()[i])];
        for j in 0..data.p() {
            row.push(format!("{}", data.x()[(i, j)]));
        }
        row.push(format!("{}", data.judges().label(i) + 1));
        for dim in data.clustering().dims() {
            row.push(format!("{}", dim.label(i) + 1));
        }
        writer.write_record(&row)?;
    }
    writer.flush()?;
    Ok(())
}

/// The schema matching [`write_dataset`] output.
pub fn generated_schema(data: &JudgeDesignData, dim_names: &[String]) -> Schema {
    Schema {
        outcome: "y".to_string(),
        treatments: if data.p() == 1 {
            vec!["x".to_string()]
        } else {
            (1..=data.p()).map(|j| format!("x{j}")).collect()
        },
        judge: "judge".to_string(),
        numeric_controls: vec![],
        fe_controls: vec![],
        clusters: dim_names
            .iter()
            .map(|n| (n.clone(), n.clone()))
            .collect(),
        intercept: false,
    }
}
