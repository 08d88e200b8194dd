//! Jackknifed projection matrices.
//!
//! The instrument projection P_Z (closed form for judge dummies) is combined
//! with pair-selection masks to produce the dot (zero diagonal), ddot (zero
//! within-cluster entries) and dddot (zero union-of-dimensions entries)
//! variants, plus the control annihilator M_W and the leave-out instrument.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use crate::data::{GroupedLabels, MaskKind, SelectionMask};
use crate::error::{EstimationError, IdentificationFailureKind};
use crate::linalg::{max_abs, orthonormal_basis};

pub use crate::linalg::Annihilator;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectionVariant {
    Plain,
    /// Zero diagonal (dot).
    Dot,
    /// Zero within-cluster entries for one dimension (ddot).
    DDot,
    /// Zero entries for pairs sharing a cluster in any dimension (dddot).
    DDDot,
    /// Fixed-effect-adjusted projection P − M·Adj·M.
    FeAdjusted,
}

/// A projection matrix together with how it was jackknifed.
#[derive(Debug, Clone)]
pub struct ProjectionKit {
    matrix: DMatrix<f64>,
    variant: ProjectionVariant,
    mask: Option<SelectionMask>,
    zeroed_entries: usize,
}

impl ProjectionKit {
    pub fn plain(matrix: DMatrix<f64>) -> Self {
        Self {
            matrix,
            variant: ProjectionVariant::Plain,
            mask: None,
            zeroed_entries: 0,
        }
    }

    pub(crate) fn fe_adjusted(matrix: DMatrix<f64>) -> Self {
        Self {
            matrix,
            variant: ProjectionVariant::FeAdjusted,
            mask: None,
            zeroed_entries: 0,
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn variant(&self) -> ProjectionVariant {
        self.variant
    }

    pub fn mask(&self) -> Option<&SelectionMask> {
        self.mask.as_ref()
    }

    /// Number of entries assigned zero by the jackknife mask.
    pub fn zeroed_entries(&self) -> usize {
        self.zeroed_entries
    }

    pub fn n(&self) -> usize {
        self.matrix.nrows()
    }
}

/// The judge-dummy projection in closed form: P_ij = 1/n_{J(i)} when cases i
/// and j are handled by the same judge, 0 otherwise. The dummy matrix is
/// never materialized.
pub fn judge_projection(judges: &GroupedLabels) -> ProjectionKit {
    let n = judges.n();
    let mut m = DMatrix::zeros(n, n);
    for g in 0..judges.group_count() {
        let mem = judges.members(g);
        let w = 1.0 / mem.len() as f64;
        for &i in mem {
            for &j in mem {
                m[(i, j)] = w;
            }
        }
    }
    ProjectionKit::plain(m)
}

/// Projection onto the column space of an explicit instrument matrix,
/// via a rank-revealing orthonormal basis (columns may be collinear).
pub fn projection_from_columns(z: &DMatrix<f64>) -> ProjectionKit {
    let basis = orthonormal_basis(z);
    let n = z.nrows();
    let mut p = DMatrix::zeros(n, n);
    if basis.ncols() > 0 {
        p.gemm(1.0, &basis, &basis.transpose(), 0.0);
    }
    ProjectionKit::plain(p)
}

/// M_W A = A − W(W'W)⁻¹W'A. For a matrix without columns this is the
/// identity map.
pub fn annihilate(w: &DMatrix<f64>, a: &DMatrix<f64>) -> DMatrix<f64> {
    Annihilator::new(w).apply(a)
}

/// Set the masked entries of a projection to exact zeros.
///
/// This single elementwise product with the mask complement covers all three
/// jackknife variants: the diagonal mask gives the dot projection, a
/// one-dimension mask the ddot projection and the union mask the dddot
/// projection (the inclusion–exclusion sum collapses to the union for 0/1
/// selection matrices).
pub fn jackknife(
    base: &ProjectionKit,
    mask: &SelectionMask,
) -> Result<ProjectionKit, EstimationError> {
    let n = base.n();
    if mask.n() != n {
        return Err(EstimationError::InvalidInput(format!(
            "mask size {} does not match projection size {n}",
            mask.n()
        )));
    }
    let mut matrix = base.matrix.clone();
    let mut zeroed = 0usize;
    for i in 0..n {
        for j in 0..n {
            if mask.get(i, j) {
                matrix[(i, j)] = 0.0;
                zeroed += 1;
            }
        }
    }
    if max_abs(&matrix) == 0.0 {
        return Err(EstimationError::identification(
            IdentificationFailureKind::ZeroProjection,
            "the clustering mask removes every nonzero projection entry; clustering that \
             contains the judge groups leaves no instrument variation to exploit",
        ));
    }
    let variant = match mask.kind() {
        MaskKind::Diagonal => ProjectionVariant::Dot,
        MaskKind::SingleDimension => ProjectionVariant::DDot,
        MaskKind::Union => ProjectionVariant::DDDot,
    };
    Ok(ProjectionKit {
        matrix,
        variant,
        mask: Some(mask.clone()),
        zeroed_entries: zeroed,
    })
}

/// The leave-out instrument pieces: L, D_n and D̃_n.
#[derive(Debug, Clone)]
pub struct LeaveOutInstrument {
    /// Row i holds the sum of X over the cases of judge J(i) outside i's
    /// leave-out cluster (n×p).
    pub leave_out_sums: DMatrix<f64>,
    /// Diagonal of D_n: total case count of judge J(i).
    pub judge_counts: DVector<f64>,
    /// Diagonal of D̃_n: case count of judge J(i) outside i's cluster.
    pub leave_out_counts: DVector<f64>,
}

/// Leave-out sums and counts for one clustering dimension.
///
/// Fails with [`EstimationError::LeaveOutUndefined`] when some judge handles
/// no case outside a case's leave-out cluster.
pub fn leave_out_instrument(
    x: &DMatrix<f64>,
    judges: &GroupedLabels,
    dim: &GroupedLabels,
) -> Result<LeaveOutInstrument, EstimationError> {
    let n = x.nrows();
    let p = x.ncols();
    if judges.n() != n || dim.n() != n {
        return Err(EstimationError::InvalidInput(
            "label vectors must match the number of rows of X".into(),
        ));
    }

    // Per-judge totals and per-(judge, cluster) totals.
    let k = judges.group_count();
    let mut judge_sums = DMatrix::<f64>::zeros(k, p);
    let mut pair_sums: HashMap<(usize, usize), (usize, Vec<f64>)> = HashMap::new();
    for i in 0..n {
        let j = judges.label(i);
        let g = dim.label(i);
        for c in 0..p {
            judge_sums[(j, c)] += x[(i, c)];
        }
        let entry = pair_sums.entry((j, g)).or_insert_with(|| (0, vec![0.0; p]));
        entry.0 += 1;
        for c in 0..p {
            entry.1[c] += x[(i, c)];
        }
    }

    let mut leave_out_sums = DMatrix::zeros(n, p);
    let mut judge_counts = DVector::zeros(n);
    let mut leave_out_counts = DVector::zeros(n);
    for i in 0..n {
        let j = judges.label(i);
        let g = dim.label(i);
        let (inside_count, inside_sum) = &pair_sums[&(j, g)];
        let total = judges.size(j);
        let outside = total - inside_count;
        if outside == 0 {
            return Err(EstimationError::LeaveOutUndefined { case: i, judge: j });
        }
        judge_counts[i] = total as f64;
        leave_out_counts[i] = outside as f64;
        for c in 0..p {
            leave_out_sums[(i, c)] = judge_sums[(j, c)] - inside_sum[c];
        }
    }

    Ok(LeaveOutInstrument {
        leave_out_sums,
        judge_counts,
        leave_out_counts,
    })
}
