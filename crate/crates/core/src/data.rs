//! Case-level dataset representation for judge designs: judge labels,
//! multiway clusterings, pair-selection masks and control pruning.

use std::collections::HashMap;
use std::hash::Hash;

use nalgebra::{DMatrix, DVector};

use crate::error::DataError;
use crate::linalg::{pivoted_orthonormalize, RANK_REL_TOL};

/// A partition of the n cases into groups with dense labels `0..group_count`.
///
/// Used for judges and for every clustering dimension. Raw labels are
/// re-encoded in first-appearance order, so string and integer labels from a
/// CSV map onto the same representation deterministically.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupedLabels {
    labels: Vec<usize>,
    members: Vec<Vec<usize>>,
}

impl GroupedLabels {
    /// Re-encode arbitrary hashable keys into dense group labels.
    pub fn from_keys<K: Eq + Hash>(keys: &[K]) -> Result<Self, DataError> {
        if keys.is_empty() {
            return Err(DataError::Empty("no cases to label".into()));
        }
        let mut seen: HashMap<&K, usize> = HashMap::new();
        let mut labels = Vec::with_capacity(keys.len());
        for key in keys {
            let next = seen.len();
            let id = *seen.entry(key).or_insert(next);
            labels.push(id);
        }
        Ok(Self::from_dense(labels))
    }

    /// Wrap labels that are already dense `0..group_count`.
    fn from_dense(labels: Vec<usize>) -> Self {
        let count = labels.iter().copied().max().map_or(0, |m| m + 1);
        let mut members = vec![Vec::new(); count];
        for (i, &g) in labels.iter().enumerate() {
            members[g].push(i);
        }
        debug_assert!(members.iter().all(|m| !m.is_empty()));
        Self { labels, members }
    }

    /// The case-level partition: every case is its own group.
    pub fn singleton(n: usize) -> Self {
        Self {
            labels: (0..n).collect(),
            members: (0..n).map(|i| vec![i]).collect(),
        }
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn group_count(&self) -> usize {
        self.members.len()
    }

    pub fn label(&self, case: usize) -> usize {
        self.labels[case]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Case indices of group `g`, ascending.
    pub fn members(&self, g: usize) -> &[usize] {
        &self.members[g]
    }

    pub fn size(&self, g: usize) -> usize {
        self.members[g].len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.members.iter().map(|m| m.len()).collect()
    }

    pub fn is_singleton(&self) -> bool {
        self.group_count() == self.n()
    }

    pub fn same_group(&self, i: usize, j: usize) -> bool {
        self.labels[i] == self.labels[j]
    }

    /// 0/1 dummy column for every group, in label order.
    pub fn dummy_matrix(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n(), self.group_count());
        for (i, &g) in self.labels.iter().enumerate() {
            m[(i, g)] = 1.0;
        }
        m
    }

    /// Whether two labelings induce the same partition of the cases.
    pub fn same_partition(&self, other: &GroupedLabels) -> bool {
        if self.n() != other.n() || self.group_count() != other.group_count() {
            return false;
        }
        let mut map = vec![usize::MAX; self.group_count()];
        for i in 0..self.n() {
            let a = self.labels[i];
            let b = other.labels[i];
            if map[a] == usize::MAX {
                map[a] = b;
            } else if map[a] != b {
                return false;
            }
        }
        true
    }
}

/// C clustering dimensions over the same n cases.
#[derive(Debug, Clone)]
pub struct MultiwayClustering {
    dims: Vec<GroupedLabels>,
}

impl MultiwayClustering {
    pub fn new(dims: Vec<GroupedLabels>) -> Result<Self, DataError> {
        if let Some(first) = dims.first() {
            let n = first.n();
            for (c, d) in dims.iter().enumerate() {
                if d.n() != n {
                    return Err(DataError::LengthMismatch {
                        what: format!("clustering dimension {c}"),
                        expected: n,
                        got: d.n(),
                    });
                }
            }
        }
        Ok(Self { dims })
    }

    pub fn singleton(n: usize) -> Self {
        Self {
            dims: vec![GroupedLabels::singleton(n)],
        }
    }

    pub fn dims(&self) -> &[GroupedLabels] {
        &self.dims
    }

    pub fn dim(&self, c: usize) -> &GroupedLabels {
        &self.dims[c]
    }

    pub fn dim_count(&self) -> usize {
        self.dims.len()
    }

    pub fn n(&self) -> usize {
        self.dims.first().map_or(0, |d| d.n())
    }
}

/// What a pair-selection mask represents, mirroring the jackknife variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    /// Own-observation pairs only.
    Diagonal,
    /// Pairs sharing a cluster in one dimension.
    SingleDimension,
    /// Pairs sharing a cluster in any of several dimensions.
    Union,
}

/// Symmetric n×n boolean matrix marking case pairs that share a cluster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionMask {
    n: usize,
    bits: Vec<bool>,
    kind: MaskKind,
}

impl SelectionMask {
    pub fn diagonal(n: usize) -> Self {
        let mut bits = vec![false; n * n];
        for i in 0..n {
            bits[i * n + i] = true;
        }
        Self {
            n,
            bits,
            kind: MaskKind::Diagonal,
        }
    }

    /// Pairs sharing a cluster in one dimension (diagonal included, since a
    /// case always shares its own cluster).
    pub fn from_dim(dim: &GroupedLabels) -> Self {
        let n = dim.n();
        let mut bits = vec![false; n * n];
        for g in 0..dim.group_count() {
            let mem = dim.members(g);
            for &i in mem {
                let row = i * n;
                for &j in mem {
                    bits[row + j] = true;
                }
            }
        }
        Self {
            n,
            bits,
            kind: MaskKind::SingleDimension,
        }
    }

    /// Pairs sharing a cluster in any of the given dimensions.
    pub fn union_of(dims: &[&GroupedLabels]) -> Result<Self, DataError> {
        let first = dims
            .first()
            .ok_or_else(|| DataError::Empty("union mask needs at least one dimension".into()))?;
        let n = first.n();
        let mut bits = vec![false; n * n];
        for dim in dims {
            if dim.n() != n {
                return Err(DataError::LengthMismatch {
                    what: "clustering dimension".into(),
                    expected: n,
                    got: dim.n(),
                });
            }
            for g in 0..dim.group_count() {
                let mem = dim.members(g);
                for &i in mem {
                    let row = i * n;
                    for &j in mem {
                        bits[row + j] = true;
                    }
                }
            }
        }
        Ok(Self {
            n,
            bits,
            kind: MaskKind::Union,
        })
    }

    /// Union mask over every dimension of a clustering.
    pub fn union(clustering: &MultiwayClustering) -> Result<Self, DataError> {
        let dims: Vec<&GroupedLabels> = clustering.dims().iter().collect();
        Self::union_of(&dims)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.n + j]
    }

    pub fn count_true(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_symmetric(&self) -> bool {
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                if self.get(i, j) != self.get(j, i) {
                    return false;
                }
            }
        }
        true
    }
}

/// A validated judge-design dataset.
///
/// `x` holds the endogenous regressors (one column in the classic design,
/// more are permitted), `controls` the exogenous columns after fixed-effect
/// expansion but before pruning.
#[derive(Debug, Clone)]
pub struct JudgeDesignData {
    y: DVector<f64>,
    x: DMatrix<f64>,
    judges: GroupedLabels,
    controls: DMatrix<f64>,
    clustering: MultiwayClustering,
}

impl JudgeDesignData {
    pub fn new(
        y: DVector<f64>,
        x: DMatrix<f64>,
        judges: GroupedLabels,
        controls: DMatrix<f64>,
        clustering: MultiwayClustering,
    ) -> Result<Self, DataError> {
        let n = y.len();
        if n == 0 {
            return Err(DataError::Empty("dataset has no rows".into()));
        }
        let check = |what: &str, got: usize| -> Result<(), DataError> {
            if got != n {
                Err(DataError::LengthMismatch {
                    what: what.into(),
                    expected: n,
                    got,
                })
            } else {
                Ok(())
            }
        };
        check("x rows", x.nrows())?;
        check("judge labels", judges.n())?;
        check("control rows", controls.nrows())?;
        if clustering.dim_count() > 0 {
            check("clustering labels", clustering.n())?;
        }
        if x.ncols() == 0 {
            return Err(DataError::Empty("no endogenous regressor column".into()));
        }
        Ok(Self {
            y,
            x,
            judges,
            controls,
            clustering,
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    /// Number of endogenous regressors.
    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// Number of control columns (before pruning).
    pub fn l(&self) -> usize {
        self.controls.ncols()
    }

    pub fn judge_count(&self) -> usize {
        self.judges.group_count()
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn judges(&self) -> &GroupedLabels {
        &self.judges
    }

    pub fn controls(&self) -> &DMatrix<f64> {
        &self.controls
    }

    pub fn clustering(&self) -> &MultiwayClustering {
        &self.clustering
    }
}

/// Drop control columns until the remainder has full column rank.
///
/// Rank is decided by a column-pivoted factorization with a relative
/// threshold of `1e-10` times the largest pivot. Returns the retained matrix
/// (original column order) and the indices of the dropped columns.
pub fn prune_controls(w: &DMatrix<f64>) -> (DMatrix<f64>, Vec<usize>) {
    if w.ncols() == 0 {
        return (w.clone(), Vec::new());
    }
    let (_, pivots) = pivoted_orthonormalize(w, RANK_REL_TOL);
    let mut keep = pivots;
    keep.sort_unstable();
    let dropped: Vec<usize> = (0..w.ncols()).filter(|c| !keep.contains(c)).collect();
    if dropped.is_empty() {
        return (w.clone(), Vec::new());
    }
    let mut out = DMatrix::zeros(w.nrows(), keep.len());
    for (slot, &c) in keep.iter().enumerate() {
        out.set_column(slot, &w.column(c));
    }
    (out, dropped)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_reencode_first_appearance() {
        let g = GroupedLabels::from_keys(&["b", "b", "a", "b", "a"]).unwrap();
        assert_eq!(g.labels(), &[0, 0, 1, 0, 1]);
        assert_eq!(g.group_count(), 2);
        assert_eq!(g.members(0), &[0, 1, 3]);
        assert_eq!(g.members(1), &[2, 4]);
    }

    #[test]
    fn union_mask_two_dims_enumerated() {
        // dims [1,2,1,2] and [1,1,2,2]: sharing in any dimension holds for
        // every pair except (0,3) and (1,2).
        let d1 = GroupedLabels::from_keys(&[1, 2, 1, 2]).unwrap();
        let d2 = GroupedLabels::from_keys(&[1, 1, 2, 2]).unwrap();
        let mask = SelectionMask::union_of(&[&d1, &d2]).unwrap();
        // Brute-force oracle over all 16 pairs.
        for i in 0..4 {
            for j in 0..4 {
                let expect = d1.same_group(i, j) || d2.same_group(i, j);
                assert_eq!(mask.get(i, j), expect, "pair ({i},{j})");
            }
        }
        let false_pairs: Vec<(usize, usize)> = (0..4)
            .flat_map(|i| (0..4).map(move |j| (i, j)))
            .filter(|&(i, j)| !mask.get(i, j))
            .collect();
        assert_eq!(false_pairs, vec![(0, 3), (1, 2), (2, 1), (3, 0)]);
    }

    #[test]
    fn union_mask_singleton_is_diagonal() {
        let d = GroupedLabels::singleton(5);
        let mask = SelectionMask::union_of(&[&d]).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(mask.get(i, j), i == j);
            }
        }
    }

    #[test]
    fn union_mask_single_cluster_is_full() {
        let d = GroupedLabels::from_keys(&[7, 7, 7, 7]).unwrap();
        let mask = SelectionMask::union_of(&[&d]).unwrap();
        assert_eq!(mask.count_true(), 16);
    }

    #[test]
    fn inclusion_exclusion_matches_union_for_two_dims() {
        // 1 − S1 − S2 + S1⊙S2 = 1 − (S1 OR S2), exactly, entrywise.
        let d1 = GroupedLabels::from_keys(&[0, 1, 0, 2, 1, 2, 0]).unwrap();
        let d2 = GroupedLabels::from_keys(&[0, 0, 1, 1, 2, 2, 2]).unwrap();
        let union = SelectionMask::union_of(&[&d1, &d2]).unwrap();
        let m1 = SelectionMask::from_dim(&d1);
        let m2 = SelectionMask::from_dim(&d2);
        for i in 0..7 {
            for j in 0..7 {
                let s1 = m1.get(i, j) as i32;
                let s2 = m2.get(i, j) as i32;
                let lhs = 1 - s1 - s2 + s1 * s2;
                let rhs = 1 - (union.get(i, j) as i32);
                assert_eq!(lhs, rhs);
            }
        }
    }

    #[test]
    fn prune_drops_duplicate_column() {
        let mut w = DMatrix::zeros(6, 2);
        for i in 0..6 {
            w[(i, 0)] = i as f64 + 1.0;
            w[(i, 1)] = i as f64 + 1.0;
        }
        let (pruned, dropped) = prune_controls(&w);
        assert_eq!(pruned.ncols(), 1);
        assert_eq!(dropped.len(), 1);
    }

    #[test]
    fn prune_handles_dummy_trap() {
        // Intercept plus a full set of group dummies: exactly one column falls.
        let groups = GroupedLabels::from_keys(&[0, 0, 1, 1, 2, 2]).unwrap();
        let dummies = groups.dummy_matrix();
        let mut w = DMatrix::zeros(6, 4);
        for i in 0..6 {
            w[(i, 0)] = 1.0;
        }
        w.view_mut((0, 1), (6, 3)).copy_from(&dummies);
        let (pruned, dropped) = prune_controls(&w);
        assert_eq!(pruned.ncols(), 3);
        assert_eq!(dropped.len(), 1);
    }

    #[test]
    fn prune_keeps_full_rank_matrix() {
        // Independent rank oracle: an SVD of a fixed 8×3 matrix.
        let w = DMatrix::from_fn(8, 3, |i, j| ((i * 3 + j) as f64).sin() + (j as f64 + 1.0));
        let svd = w.clone().svd(false, false);
        let smax = svd.singular_values.max();
        let rank = svd
            .singular_values
            .iter()
            .filter(|&&s| s > 1e-10 * smax)
            .count();
        assert_eq!(rank, 3, "oracle says W is full rank");
        let (pruned, dropped) = prune_controls(&w);
        assert_eq!(pruned, w);
        assert!(dropped.is_empty());
    }

    #[test]
    fn data_validates_lengths() {
        let y = DVector::from_row_slice(&[1.0, 2.0]);
        let x = DMatrix::from_row_slice(3, 1, &[1.0, 2.0, 3.0]);
        let judges = GroupedLabels::from_keys(&[1, 1]).unwrap();
        let res = JudgeDesignData::new(
            y,
            x,
            judges,
            DMatrix::zeros(2, 0),
            MultiwayClustering::singleton(2),
        );
        assert!(matches!(res, Err(DataError::LengthMismatch { .. })));
    }
}
