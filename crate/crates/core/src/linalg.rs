//! Dense linear-algebra helpers: rank-revealing orthonormalization,
//! residual-maker application, and small solve utilities.

use nalgebra::{DMatrix, DVector};

/// Relative pivot threshold used for rank decisions throughout the crate.
pub const RANK_REL_TOL: f64 = 1e-10;

/// Column-pivoted modified Gram–Schmidt with one re-orthogonalization pass.
///
/// Returns an orthonormal basis of the column space of `a` together with the
/// indices of the pivot columns, in pivot order. A column is accepted while
/// its residual norm exceeds `rel_tol` times the first (largest) pivot norm.
pub fn pivoted_orthonormalize(a: &DMatrix<f64>, rel_tol: f64) -> (DMatrix<f64>, Vec<usize>) {
    let n = a.nrows();
    let m = a.ncols();
    if m == 0 || n == 0 {
        return (DMatrix::zeros(n, 0), Vec::new());
    }

    let mut work = a.clone();
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut pivots: Vec<usize> = Vec::new();
    let mut remaining: Vec<usize> = (0..m).collect();
    let mut threshold = f64::INFINITY;

    while !remaining.is_empty() {
        // Pick the remaining column with the largest residual norm (first
        // index on ties, for determinism).
        let mut best = 0usize;
        let mut best_norm = -1.0;
        for (slot, &col) in remaining.iter().enumerate() {
            let norm = work.column(col).norm();
            if norm > best_norm {
                best_norm = norm;
                best = slot;
            }
        }
        if pivots.is_empty() {
            threshold = rel_tol * best_norm;
        }
        if best_norm <= threshold || best_norm == 0.0 {
            break;
        }
        let col_idx = remaining.remove(best);

        // Re-orthogonalize the chosen column against the accepted basis.
        let mut q = work.column(col_idx).clone_owned();
        for b in &basis {
            let c = b.dot(&q);
            q.axpy(-c, b, 1.0);
        }
        let norm = q.norm();
        if norm <= threshold || norm == 0.0 {
            break;
        }
        q /= norm;

        // Deflate all remaining columns.
        for &col in &remaining {
            let c = q.dot(&work.column(col).clone_owned());
            let mut target = work.column_mut(col);
            target.axpy(-c, &q, 1.0);
        }

        basis.push(q);
        pivots.push(col_idx);
    }

    let r = basis.len();
    let mut out = DMatrix::zeros(n, r);
    for (j, b) in basis.iter().enumerate() {
        out.set_column(j, b);
    }
    (out, pivots)
}

/// Orthonormal basis of the column space of `a` at the default tolerance.
pub fn orthonormal_basis(a: &DMatrix<f64>) -> DMatrix<f64> {
    pivoted_orthonormalize(a, RANK_REL_TOL).0
}

/// Residual maker for a (possibly rank-deficient) block of columns.
///
/// Stores an orthonormal basis once so that M_W can be applied to many
/// matrices without refactorizing.
#[derive(Debug, Clone)]
pub struct Annihilator {
    basis: Option<DMatrix<f64>>,
    n: usize,
}

impl Annihilator {
    pub fn new(w: &DMatrix<f64>) -> Self {
        let n = w.nrows();
        if w.ncols() == 0 {
            return Self { basis: None, n };
        }
        let basis = orthonormal_basis(w);
        if basis.ncols() == 0 {
            Self { basis: None, n }
        } else {
            Self {
                basis: Some(basis),
                n,
            }
        }
    }

    pub fn identity(n: usize) -> Self {
        Self { basis: None, n }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn rank(&self) -> usize {
        self.basis.as_ref().map_or(0, |b| b.ncols())
    }

    pub fn basis(&self) -> Option<&DMatrix<f64>> {
        self.basis.as_ref()
    }

    /// M_W A = A − B (B'A).
    pub fn apply(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.basis {
            None => a.clone(),
            Some(b) => {
                let coeffs = b.tr_mul(a);
                let mut out = a.clone();
                out.gemm(-1.0, b, &coeffs, 1.0);
                out
            }
        }
    }

    pub fn apply_vector(&self, v: &DVector<f64>) -> DVector<f64> {
        match &self.basis {
            None => v.clone(),
            Some(b) => {
                let coeffs = b.tr_mul(v);
                let mut out = v.clone();
                out.gemm(-1.0, b, &coeffs, 1.0);
                out
            }
        }
    }
}

/// Largest absolute entry; 0.0 for empty matrices.
pub fn max_abs(a: &DMatrix<f64>) -> f64 {
    let mut m = 0.0f64;
    for v in a.iter() {
        m = m.max(v.abs());
    }
    m
}

/// Solve the p×p system A β = b through an SVD, reporting the extreme
/// singular values so callers can gate on conditioning.
pub fn svd_solve(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
) -> Result<(DVector<f64>, f64, f64), &'static str> {
    let svd = a.clone().svd(true, true);
    let mut smin = f64::INFINITY;
    let mut smax = 0.0f64;
    for &s in svd.singular_values.iter() {
        smin = smin.min(s);
        smax = smax.max(s);
    }
    if smin == f64::INFINITY {
        smin = 0.0;
    }
    let sol = svd.solve(b, 0.0)?;
    Ok((DVector::from(sol), smin, smax))
}

/// One-norm condition estimate ‖A‖₁‖A⁻¹‖₁ via a short Hager iteration on a
/// prefactored LU. Assumes A symmetric (true for the Hadamard and blockwise
/// Kronecker adjustment systems), so the transpose solve reuses the same
/// factorization. Returns `None` when the factorization cannot solve.
pub fn cond1_estimate_sym(
    a: &DMatrix<f64>,
    lu: &nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
) -> Option<f64> {
    let n = a.nrows();
    if n == 0 {
        return Some(0.0);
    }
    let norm_a = one_norm(a);
    let mut x = DVector::from_element(n, 1.0 / n as f64);
    let mut est = 0.0f64;
    for _ in 0..4 {
        let y = lu.solve(&x)?;
        let y_norm: f64 = y.iter().map(|v| v.abs()).sum();
        if y_norm <= est {
            break;
        }
        est = y_norm;
        let sign = DVector::from_iterator(n, y.iter().map(|v| if *v >= 0.0 { 1.0 } else { -1.0 }));
        let z = lu.solve(&sign)?;
        let (mut best, mut best_val) = (0usize, -1.0f64);
        for (i, v) in z.iter().enumerate() {
            if v.abs() > best_val {
                best_val = v.abs();
                best = i;
            }
        }
        x = DVector::zeros(n);
        x[best] = 1.0;
    }
    Some(norm_a * est)
}

fn one_norm(a: &DMatrix<f64>) -> f64 {
    let mut best = 0.0f64;
    for j in 0..a.ncols() {
        let s: f64 = a.column(j).iter().map(|v| v.abs()).sum();
        best = best.max(s);
    }
    best
}
