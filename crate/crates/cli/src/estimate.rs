//! The `estimate` subcommand: run estimators over cumulative clustering
//! declarations, reproducing the row-by-row "+ dimension" table layout.
//!
//! Dimensions apply cumulatively in declaration order. The first dimension
//! must be the leave-out dimension; later dimensions are marked `se`
//! (clustering implied by how standard errors were specified) or `fe`
//! (clustering induced by projecting out fixed-effect controls). Per row:
//!
//! - `md_cjive` removes projection entries for every active dimension;
//! - `fe_cjive` keeps the leave-out dimension as general clustering and
//!   *correctly* removes the active se/fe dimensions as fixed effects, while
//!   the remaining schema controls stay naively projected out;
//! - the optional `--all-controls` row removes every control column through
//!   the FE CJIVE machinery.

use anyhow::{bail, Result};
use nalgebra::DMatrix;

use mdjive::fe::FeModel;
use mdjive::ingest::{LoadedDataset, Schema};
use mdjive::projections::Annihilator;
use mdjive::variance::{fe_cjive_with_variance_from_matrices, md_cjive_variance};
use mdjive::{
    cjive, jive, leave_out_tsls, md_cjive, tsls, EstimateResult, EstimationError, GroupedLabels,
    HSolveOptions, LeaveOutWeighting, VarianceOptions,
};

use crate::report::fmt_sig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Handling {
    LeaveOut,
    Se,
    Fe,
}

impl Handling {
    fn label(&self) -> &'static str {
        match self {
            Self::LeaveOut => "leave-out",
            Self::Se => "se",
            Self::Fe => "fe",
        }
    }
}

#[derive(Debug, Clone)]
pub struct DimDecl {
    pub name: String,
    pub handling: Handling,
    /// Index into the dataset's clustering dimensions.
    pub index: usize,
}

/// Parse `name:handling,...` against the schema's cluster names.
pub fn parse_dims(spec: &str, cluster_names: &[String]) -> Result<Vec<DimDecl>> {
    let mut dims = Vec::new();
    for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let Some((name, handling)) = item.split_once(':') else {
            bail!("dimension `{item}` must be name:handling");
        };
        let name = name.trim();
        let handling = match handling.trim() {
            "leaveout" | "leave-out" | "leave_out" => Handling::LeaveOut,
            "se" | "general" => Handling::Se,
            "fe" => Handling::Fe,
            other => bail!("unknown handling `{other}` (expected leaveout, se or fe)"),
        };
        let index = cluster_names
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| {
                anyhow::anyhow!(
                    "dimension `{name}` is not declared in the schema (clusters: {})",
                    cluster_names.join(", ")
                )
            })?;
        if dims.iter().any(|d: &DimDecl| d.index == index) {
            bail!("dimension `{name}` declared twice");
        }
        dims.push(DimDecl {
            name: name.to_string(),
            handling,
            index,
        });
    }
    if dims.is_empty() {
        bail!("--dims must declare at least one dimension");
    }
    if dims[0].handling != Handling::LeaveOut {
        bail!("the first dimension must use the leaveout handling");
    }
    if dims[1..].iter().any(|d| d.handling == Handling::LeaveOut) {
        bail!("only the first dimension may be the leave-out dimension");
    }
    Ok(dims)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorChoice {
    Tsls,
    Jive,
    Cjive,
    LeaveOut,
    MdCjive,
    FeJive,
    FeCjive,
}

impl EstimatorChoice {
    pub fn parse_list(spec: &str) -> Result<Vec<Self>> {
        let mut out = Vec::new();
        for name in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            out.push(match name {
                "2sls" | "tsls" => Self::Tsls,
                "jive" => Self::Jive,
                "cjive" => Self::Cjive,
                "leave_out" | "leaveout" => Self::LeaveOut,
                "md_cjive" => Self::MdCjive,
                "fe_jive" => Self::FeJive,
                "fe_cjive" => Self::FeCjive,
                other => bail!("unknown estimator `{other}`"),
            });
        }
        if out.is_empty() {
            bail!("--estimators must name at least one estimator");
        }
        Ok(out)
    }

    fn label(&self) -> &'static str {
        match self {
            Self::Tsls => "2sls",
            Self::Jive => "jive",
            Self::Cjive => "cjive",
            Self::LeaveOut => "leave_out",
            Self::MdCjive => "md_cjive",
            Self::FeJive => "fe_jive",
            Self::FeCjive => "fe_cjive",
        }
    }
}

/// One report row.
#[derive(Debug)]
pub struct ReportRow {
    pub step: usize,
    pub clusters: String,
    pub estimator: &'static str,
    pub outcome: Result<(EstimateResult, Option<f64>), EstimationError>,
}

/// Columns of W split into "naively projected" and "correctly removed" for
/// one accumulation step.
fn split_controls(
    loaded: &LoadedDataset,
    schema: &Schema,
    active: &[DimDecl],
    all_controls: bool,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let data = &loaded.data;
    let n = data.n();
    let w = data.controls();
    let mut correct_cols = vec![false; w.ncols()];
    let mut extra_dummies: Vec<&GroupedLabels> = Vec::new();

    for dim in active.iter().filter(|d| d.handling != Handling::LeaveOut) {
        // A dimension whose column doubles as a fixed-effect control moves
        // its dummy span from the naive side to the correct side; otherwise
        // dummies are built from the labels and added.
        let cluster_column = schema
            .clusters
            .iter()
            .find(|(name, _)| *name == dim.name)
            .map(|(_, column)| column.as_str());
        let span = loaded
            .fe_spans
            .iter()
            .find(|(name, _, _)| cluster_column == Some(name.as_str()));
        match span {
            Some((_, start, len)) => {
                correct_cols[*start..*start + *len].fill(true);
            }
            None => extra_dummies.push(data.clustering().dim(dim.index)),
        }
    }
    if all_controls {
        correct_cols.iter_mut().for_each(|c| *c = true);
    }

    let naive_idx: Vec<usize> = (0..w.ncols()).filter(|&c| !correct_cols[c]).collect();
    let correct_idx: Vec<usize> = (0..w.ncols()).filter(|&c| correct_cols[c]).collect();
    let mut naive = DMatrix::zeros(n, naive_idx.len());
    for (slot, &c) in naive_idx.iter().enumerate() {
        naive.set_column(slot, &w.column(c));
    }
    let extra_width: usize = extra_dummies.iter().map(|d| d.group_count()).sum();
    let mut correct = DMatrix::zeros(n, correct_idx.len() + extra_width);
    for (slot, &c) in correct_idx.iter().enumerate() {
        correct.set_column(slot, &w.column(c));
    }
    let mut col = correct_idx.len();
    for dim in extra_dummies {
        correct
            .view_mut((0, col), (n, dim.group_count()))
            .copy_from(&dim.dummy_matrix());
        col += dim.group_count();
    }
    (naive, correct)
}

fn run_fe_family(
    loaded: &LoadedDataset,
    schema: &Schema,
    dims: &[DimDecl],
    active: &[DimDecl],
    all_controls: bool,
    general: bool,
) -> Result<(EstimateResult, Option<f64>), EstimationError> {
    let data = &loaded.data;
    let (naive, correct) = split_controls(loaded, schema, active, all_controls);
    let ann = Annihilator::new(&naive);
    let z = data.judges().dummy_matrix();
    let z_t = ann.apply(&z);
    let w_t = ann.apply(&correct);
    let x_t = ann.apply(data.x());
    let y_t = ann.apply_vector(data.y());
    let model = FeModel {
        z: &z_t,
        w: &w_t,
        x: &x_t,
        y: &y_t,
    };
    if general {
        let dim = data.clustering().dim(dims[0].index);
        let est = fe_cjive_with_variance_from_matrices(
            &model,
            dim,
            &HSolveOptions::default(),
            &VarianceOptions::default(),
        )?;
        let se = est
            .variance
            .as_ref()
            .map(|v| v[(0, 0)].max(0.0).sqrt());
        Ok((est, se))
    } else {
        let est = mdjive::fe::fe_estimate_from_matrices(&model, None, &HSolveOptions::default())?;
        Ok((est, None))
    }
}

/// Run the cumulative table and return the rows in deterministic order.
pub fn run_estimate(
    loaded: &LoadedDataset,
    schema: &Schema,
    dims: &[DimDecl],
    estimators: &[EstimatorChoice],
    all_controls: bool,
) -> Vec<ReportRow> {
    let data = &loaded.data;
    let mut rows = Vec::new();
    for step in 1..=dims.len() {
        let active = &dims[..step];
        let clusters = row_label(active);
        for &est in estimators {
            let outcome = match est {
                EstimatorChoice::Tsls => tsls(data).map(|r| (r, None)),
                EstimatorChoice::Jive => jive(data).map(|r| (r, None)),
                EstimatorChoice::Cjive => cjive(data, dims[0].index).map(|r| (r, None)),
                EstimatorChoice::LeaveOut => {
                    leave_out_tsls(data, dims[0].index, LeaveOutWeighting::Weighted)
                        .map(|r| (r, None))
                }
                EstimatorChoice::MdCjive => {
                    let indices: Vec<usize> = active.iter().map(|d| d.index).collect();
                    md_cjive(data, &indices).map(|mut r| {
                        let se = md_cjive_variance(
                            data,
                            &indices,
                            &r.beta,
                            &VarianceOptions::default(),
                        )
                        .ok()
                        .map(|v| {
                            let s = v.matrix[(0, 0)].max(0.0).sqrt();
                            r.variance = Some(v.matrix);
                            s
                        });
                        (r, se)
                    })
                }
                EstimatorChoice::FeJive => run_fe_family(loaded, schema, dims, active, false, false),
                EstimatorChoice::FeCjive => run_fe_family(loaded, schema, dims, active, false, true),
            };
            rows.push(ReportRow {
                step,
                clusters: clusters.clone(),
                estimator: est.label(),
                outcome,
            });
        }
    }
    if all_controls {
        for &est in estimators {
            let outcome = match est {
                EstimatorChoice::FeCjive => run_fe_family(loaded, schema, dims, dims, true, true),
                EstimatorChoice::FeJive => run_fe_family(loaded, schema, dims, dims, true, false),
                // The all-controls row is a fixed-effect-removal exercise;
                // other estimators have no analogue here.
                _ => continue,
            };
            rows.push(ReportRow {
                step: dims.len() + 1,
                clusters: "+ all controls".to_string(),
                estimator: est.label(),
                outcome,
            });
        }
    }
    rows
}

fn row_label(active: &[DimDecl]) -> String {
    let last = active.last().expect("at least one dimension");
    if active.len() == 1 {
        last.name.clone()
    } else {
        format!("+ {} ({})", last.name, last.handling.label())
    }
}

/// Render the rows as CSV: one line per (estimator × accumulation step).
pub fn rows_to_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from(
        "step,clusters,estimator,beta,se_heuristic,rcond,zeroed_entries,fe_residual,error_code,error\n",
    );
    for row in rows {
        match &row.outcome {
            Ok((est, se)) => {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{},,\n",
                    row.step,
                    escape(&row.clusters),
                    row.estimator,
                    fmt_sig(est.beta_scalar()),
                    se.map(fmt_sig).unwrap_or_default(),
                    fmt_sig(est.diagnostics.rcond),
                    est.diagnostics.zeroed_entries,
                    est.diagnostics.fe_residual.map(fmt_sig).unwrap_or_default(),
                ));
            }
            Err(e) => {
                out.push_str(&format!(
                    "{},{},{},,,,,,{},{}\n",
                    row.step,
                    escape(&row.clusters),
                    row.estimator,
                    e.code(),
                    escape(&e.to_string()),
                ));
            }
        }
    }
    out
}

fn escape(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
