//! Point estimators: 2SLS, JIVE, CJIVE, MD CJIVE and leave-out 2SLS, all
//! routed through one generic IV kernel.

use nalgebra::{DMatrix, DVector};

use crate::data::{JudgeDesignData, SelectionMask};
use crate::error::{EstimationError, IdentificationFailureKind};
use crate::linalg::{max_abs, svd_solve, Annihilator};
use crate::projections::{
    jackknife, judge_projection, leave_out_instrument, projection_from_columns, ProjectionKit,
};

/// Reciprocal-condition threshold below which the moment matrix X'P̃X is
/// treated as singular instead of inverted.
pub const RCOND_MIN: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorTag {
    Tsls,
    Jive,
    Cjive,
    MdCjive,
    /// Leave-out 2SLS in the D_n-weighted form (equals CJIVE).
    LeaveOutWeighted,
    /// Conventional 2SLS on the leave-out mean instrument D̃_n⁻¹L.
    LeaveOutConventional,
    FeJive,
    FeCjive,
}

impl EstimatorTag {
    pub fn label(&self) -> &'static str {
        match self {
            Self::Tsls => "2sls",
            Self::Jive => "jive",
            Self::Cjive => "cjive",
            Self::MdCjive => "md_cjive",
            Self::LeaveOutWeighted => "leave_out_weighted",
            Self::LeaveOutConventional => "leave_out_2sls",
            Self::FeJive => "fe_jive",
            Self::FeCjive => "fe_cjive",
        }
    }
}

impl std::fmt::Display for EstimatorTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Numerical diagnostics carried with every estimate.
#[derive(Debug, Clone, Default)]
pub struct Diagnostics {
    /// Entries assigned zero by the jackknife mask.
    pub zeroed_entries: usize,
    /// Reciprocal condition number of X'P̃X.
    pub rcond: f64,
    /// Control columns dropped during pruning (fixed-effect paths).
    pub dropped_controls: Vec<usize>,
    /// Adjustment system size Σ_g n_g² (fe paths).
    pub fe_system_size: Option<usize>,
    /// Relative zero-diagonal / zero-block residual after the solve (fe paths).
    pub fe_residual: Option<f64>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct EstimateResult {
    pub beta: DVector<f64>,
    pub estimator: EstimatorTag,
    /// Filled by the variance module when a variance estimator exists.
    pub variance: Option<DMatrix<f64>>,
    pub diagnostics: Diagnostics,
}

impl EstimateResult {
    /// The scalar coefficient for the single-regressor design.
    pub fn beta_scalar(&self) -> f64 {
        self.beta[0]
    }
}

/// β̂ = (X'P̃X)⁻¹ X'P̃y.
///
/// Fails loudly when the projection is identically zero (clustering at the
/// judge level produces exactly this) or when X'P̃X is numerically singular,
/// instead of returning garbage.
pub fn iv_kernel(
    kit: &ProjectionKit,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    tag: EstimatorTag,
) -> Result<EstimateResult, EstimationError> {
    let p_tilde = kit.matrix();
    let n = p_tilde.nrows();
    if x.nrows() != n || y.len() != n {
        return Err(EstimationError::InvalidInput(
            "X and y must match the projection dimension".into(),
        ));
    }
    let pmax = max_abs(p_tilde);
    if pmax == 0.0 {
        return Err(EstimationError::identification(
            IdentificationFailureKind::ZeroProjection,
            "the jackknifed projection is a zero matrix, so the coefficient is undefined",
        ));
    }

    let px = p_tilde * x;
    let py = p_tilde * y;
    let a = x.tr_mul(&px);
    let b = x.tr_mul(&py);
    solve_moment(&a, &b, x, pmax, kit.zeroed_entries(), tag)
}

/// Shared final step: solve A β = b with conditioning gates.
fn solve_moment(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    x: &DMatrix<f64>,
    instrument_scale: f64,
    zeroed_entries: usize,
    tag: EstimatorTag,
) -> Result<EstimateResult, EstimationError> {
    let (beta, smin, smax) = svd_solve(a, b)
        .map_err(|e| EstimationError::InvalidInput(format!("SVD failed: {e}")))?;
    // Scale against which "numerically zero" is judged: the moment matrix of
    // a healthy design is of order ‖X‖² times the projection magnitude.
    let scale = smax.max(x.norm_squared() * instrument_scale).max(f64::MIN_POSITIVE);
    let rcond = if smax > 0.0 { smin / smax } else { 0.0 };
    if smin <= RCOND_MIN * scale {
        return Err(EstimationError::IdentificationFailure {
            kind: IdentificationFailureKind::SingularMoment,
            detail: format!(
                "moment matrix X'P̃X is numerically singular (sigma_min = {smin:.3e}, \
                 reciprocal condition = {rcond:.3e})"
            ),
        });
    }
    Ok(EstimateResult {
        beta,
        estimator: tag,
        variance: None,
        diagnostics: Diagnostics {
            zeroed_entries,
            rcond,
            ..Default::default()
        },
    })
}

/// The instrument projection and (possibly control-annihilated) X, y for a
/// dataset: P_Z when there are no controls, P_{M_W Z} with X and y replaced
/// by M_W X and M_W y otherwise.
pub(crate) struct DesignContext {
    pub kit: ProjectionKit,
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub dropped_controls: Vec<usize>,
}

pub(crate) fn design_context(data: &JudgeDesignData) -> DesignContext {
    if data.l() == 0 {
        return DesignContext {
            kit: judge_projection(data.judges()),
            x: data.x().clone(),
            y: data.y().clone(),
            dropped_controls: Vec::new(),
        };
    }
    let (w, dropped) = crate::data::prune_controls(data.controls());
    let ann = Annihilator::new(&w);
    let z = data.judges().dummy_matrix();
    let z_resid = ann.apply(&z);
    DesignContext {
        kit: projection_from_columns(&z_resid),
        x: ann.apply(data.x()),
        y: ann.apply_vector(data.y()),
        dropped_controls: dropped,
    }
}

fn finish(
    ctx: DesignContext,
    mask: Option<&SelectionMask>,
    tag: EstimatorTag,
) -> Result<EstimateResult, EstimationError> {
    let kit = match mask {
        None => ctx.kit,
        Some(m) => jackknife(&ctx.kit, m)?,
    };
    let mut res = iv_kernel(&kit, &ctx.x, &ctx.y, tag)?;
    res.diagnostics.dropped_controls = ctx.dropped_controls;
    Ok(res)
}

/// Conventional 2SLS on the judge dummies.
pub fn tsls(data: &JudgeDesignData) -> Result<EstimateResult, EstimationError> {
    finish(design_context(data), None, EstimatorTag::Tsls)
}

/// JIVE: 2SLS with the projection diagonal zeroed.
pub fn jive(data: &JudgeDesignData) -> Result<EstimateResult, EstimationError> {
    let ctx = design_context(data);
    let mask = SelectionMask::diagonal(data.n());
    finish(ctx, Some(&mask), EstimatorTag::Jive)
}

/// CJIVE: zeroes every within-cluster entry of one clustering dimension.
pub fn cjive(data: &JudgeDesignData, dim: usize) -> Result<EstimateResult, EstimationError> {
    let ctx = design_context(data);
    let dim = clustering_dim(data, dim)?;
    let mask = SelectionMask::from_dim(dim);
    finish(ctx, Some(&mask), EstimatorTag::Cjive)
}

/// MD CJIVE: zeroes entries for pairs sharing a cluster in any of the
/// selected dimensions (all dimensions when `dims` is empty).
pub fn md_cjive(data: &JudgeDesignData, dims: &[usize]) -> Result<EstimateResult, EstimationError> {
    let ctx = design_context(data);
    let mask = union_mask_for(data, dims)?;
    finish(ctx, Some(&mask), EstimatorTag::MdCjive)
}

pub(crate) fn union_mask_for(
    data: &JudgeDesignData,
    dims: &[usize],
) -> Result<SelectionMask, EstimationError> {
    let clustering = data.clustering();
    let selected: Vec<&crate::data::GroupedLabels> = if dims.is_empty() {
        clustering.dims().iter().collect()
    } else {
        let mut out = Vec::with_capacity(dims.len());
        for &d in dims {
            if d >= clustering.dim_count() {
                return Err(EstimationError::InvalidInput(format!(
                    "clustering dimension {d} out of range ({} declared)",
                    clustering.dim_count()
                )));
            }
            out.push(clustering.dim(d));
        }
        out
    };
    SelectionMask::union_of(&selected)
        .map_err(|e| EstimationError::InvalidInput(e.to_string()))
}

fn clustering_dim(
    data: &JudgeDesignData,
    dim: usize,
) -> Result<&crate::data::GroupedLabels, EstimationError> {
    if dim >= data.clustering().dim_count() {
        return Err(EstimationError::InvalidInput(format!(
            "clustering dimension {dim} out of range ({} declared)",
            data.clustering().dim_count()
        )));
    }
    Ok(data.clustering().dim(dim))
}

/// Which leave-out 2SLS form to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LeaveOutWeighting {
    /// β̂ = (X'D_n⁻¹L)⁻¹ L'D_n⁻¹y — algebraically equal to CJIVE.
    Weighted,
    /// Plain 2SLS with the leave-out mean D̃_n⁻¹L as the single instrument.
    Conventional,
}

/// 2SLS with the leave-out instrument for one clustering dimension.
///
/// With controls present, X and y are annihilated by M_W first and the
/// leave-out sums are taken over the residualized treatment.
pub fn leave_out_tsls(
    data: &JudgeDesignData,
    dim: usize,
    weighting: LeaveOutWeighting,
) -> Result<EstimateResult, EstimationError> {
    let dim = clustering_dim(data, dim)?.clone();
    let (x, y, dropped) = if data.l() == 0 {
        (data.x().clone(), data.y().clone(), Vec::new())
    } else {
        let (w, dropped) = crate::data::prune_controls(data.controls());
        let ann = Annihilator::new(&w);
        (ann.apply(data.x()), ann.apply_vector(data.y()), dropped)
    };
    let lo = leave_out_instrument(&x, data.judges(), &dim)?;

    let n = data.n();
    let p = x.ncols();
    let (tag, instrument) = match weighting {
        LeaveOutWeighting::Weighted => {
            // D_n⁻¹ L
            let mut v = lo.leave_out_sums.clone();
            for i in 0..n {
                let w = 1.0 / lo.judge_counts[i];
                for c in 0..p {
                    v[(i, c)] *= w;
                }
            }
            (EstimatorTag::LeaveOutWeighted, v)
        }
        LeaveOutWeighting::Conventional => {
            // D̃_n⁻¹ L
            let mut v = lo.leave_out_sums.clone();
            for i in 0..n {
                let w = 1.0 / lo.leave_out_counts[i];
                for c in 0..p {
                    v[(i, c)] *= w;
                }
            }
            (EstimatorTag::LeaveOutConventional, v)
        }
    };

    // Weighted form: β̂ = (X'D⁻¹L)⁻¹ L'D⁻¹y. Conventional form: plain IV with
    // the leave-out mean as instrument, β̂ = (V'X)⁻¹ V'y.
    let a = match weighting {
        LeaveOutWeighting::Weighted => x.tr_mul(&instrument),
        LeaveOutWeighting::Conventional => instrument.tr_mul(&x),
    };
    let b = instrument.tr_mul(&y);
    let scale = {
        let vmax = max_abs(&instrument);
        if vmax > 0.0 {
            vmax
        } else {
            f64::MIN_POSITIVE
        }
    };
    let mut res = solve_moment(&a, &b, &x, scale, 0, tag)?;
    res.diagnostics.dropped_controls = dropped;
    Ok(res)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{GroupedLabels, MultiwayClustering};
    use nalgebra::{DMatrix, DVector};
    use rand::prelude::*;
    use rand_chacha::ChaCha20Rng;

    fn simple_data(
        judges: &[usize],
        x: &[f64],
        y: &[f64],
        dims: Vec<GroupedLabels>,
    ) -> JudgeDesignData {
        let n = judges.len();
        JudgeDesignData::new(
            DVector::from_row_slice(y),
            DMatrix::from_column_slice(n, 1, x),
            GroupedLabels::from_keys(judges).unwrap(),
            DMatrix::zeros(n, 0),
            MultiwayClustering::new(dims).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn cjive_hand_example_is_four() {
        // Judges [1,1,1], X=(1,0,1)', y=(1,2,3)', singleton clusters:
        // X'P̈X = 2/3, X'P̈y = 8/3, so β̂ = 4.
        let data = simple_data(
            &[1, 1, 1],
            &[1.0, 0.0, 1.0],
            &[1.0, 2.0, 3.0],
            vec![GroupedLabels::singleton(3)],
        );
        let res = cjive(&data, 0).unwrap();
        assert!((res.beta_scalar() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn tsls_recovers_beta_with_exact_first_stage() {
        // X exactly judge-mean-coded, y = Xβ with no noise.
        let judges = [1usize, 1, 1, 2, 2, 3, 3, 3];
        let pi = [0.7, -1.2, 2.1];
        let x: Vec<f64> = judges.iter().map(|&j| pi[j - 1]).collect();
        let beta = 1.75;
        let y: Vec<f64> = x.iter().map(|v| beta * v).collect();
        let data = simple_data(&judges, &x, &y, vec![GroupedLabels::singleton(8)]);
        let res = tsls(&data).unwrap();
        assert!((res.beta_scalar() - beta).abs() < 1e-12);
    }

    #[test]
    fn judge_level_clustering_fails_identification() {
        let judges = [1usize, 1, 2, 2, 3, 3];
        let dim = GroupedLabels::from_keys(&judges).unwrap();
        let data = simple_data(
            &judges,
            &[1.0, 0.0, 1.0, 1.0, 0.0, 1.0],
            &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
            vec![dim.clone(), dim],
        );
        let err = md_cjive(&data, &[]).unwrap_err();
        assert!(err.is_identification_failure());
    }

    #[test]
    fn cjive_equals_jive_for_singleton_clusters_bitwise() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let judges: Vec<usize> = (0..20).map(|i| i / 4).collect();
        let x: Vec<f64> = (0..20).map(|_| rng.gen::<f64>()).collect();
        let y: Vec<f64> = (0..20).map(|_| rng.gen::<f64>()).collect();
        let data = simple_data(&judges, &x, &y, vec![GroupedLabels::singleton(20)]);
        let a = jive(&data).unwrap();
        let b = cjive(&data, 0).unwrap();
        assert_eq!(a.beta_scalar().to_bits(), b.beta_scalar().to_bits());
    }

    #[test]
    fn md_cjive_equals_cjive_for_one_dimension_bitwise() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let judges: Vec<usize> = (0..24).map(|i| i / 4).collect();
        let dim = GroupedLabels::from_keys(&(0..24).map(|i| i / 3).collect::<Vec<_>>()).unwrap();
        let x: Vec<f64> = (0..24).map(|_| rng.gen::<f64>()).collect();
        let y: Vec<f64> = (0..24).map(|_| rng.gen::<f64>()).collect();
        let data = simple_data(&judges, &x, &y, vec![dim]);
        let a = cjive(&data, 0).unwrap();
        let b = md_cjive(&data, &[0]).unwrap();
        assert_eq!(a.beta_scalar().to_bits(), b.beta_scalar().to_bits());
    }

    #[test]
    fn leave_out_weighted_hand_example() {
        let data = simple_data(
            &[1, 1, 1],
            &[1.0, 0.0, 1.0],
            &[1.0, 2.0, 3.0],
            vec![GroupedLabels::singleton(3)],
        );
        let res = leave_out_tsls(&data, 0, LeaveOutWeighting::Weighted).unwrap();
        assert!((res.beta_scalar() - 4.0).abs() < 1e-12);
        let cj = cjive(&data, 0).unwrap();
        assert!((res.beta_scalar() - cj.beta_scalar()).abs() < 1e-12);
    }

    #[test]
    fn leave_out_equivalence_on_random_instance() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let judges: Vec<usize> = (0..30).map(|_| rng.gen_range(0..5)).collect();
        let x: Vec<f64> = (0..30).map(|_| rng.gen::<f64>() - 0.5).collect();
        let y: Vec<f64> = (0..30).map(|_| rng.gen::<f64>() - 0.5).collect();
        let data = simple_data(&judges, &x, &y, vec![GroupedLabels::singleton(30)]);
        let lo = leave_out_tsls(&data, 0, LeaveOutWeighting::Weighted).unwrap();
        let cj = cjive(&data, 0).unwrap();
        let rel = (lo.beta_scalar() - cj.beta_scalar()).abs() / cj.beta_scalar().abs().max(1.0);
        assert!(rel < 1e-10, "rel diff {rel}");
    }

    #[test]
    fn conventional_and_weighted_leave_out_differ_by_weighting() {
        // Judges [1,1,1,2,2] with X=(1,0,1,1,0)', y=(1,2,3,4,5)' and
        // singleton clusters: L=(1,2,1,0,1)', D=(3,3,3,2,2), D̃=(2,2,2,1,1),
        // so the weighted form gives 31/4 (equal to CJIVE) and the plain
        // 2SLS on D̃⁻¹L gives 9.
        let data = simple_data(
            &[1, 1, 1, 2, 2],
            &[1.0, 0.0, 1.0, 1.0, 0.0],
            &[1.0, 2.0, 3.0, 4.0, 5.0],
            vec![GroupedLabels::singleton(5)],
        );
        let weighted = leave_out_tsls(&data, 0, LeaveOutWeighting::Weighted).unwrap();
        assert!((weighted.beta_scalar() - 31.0 / 4.0).abs() < 1e-12);
        let cj = cjive(&data, 0).unwrap();
        assert!((weighted.beta_scalar() - cj.beta_scalar()).abs() < 1e-12);
        let conventional = leave_out_tsls(&data, 0, LeaveOutWeighting::Conventional).unwrap();
        assert!((conventional.beta_scalar() - 9.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_leave_out_moment_fails() {
        // X identically zero: X'D⁻¹L = 0, a singular moment.
        let data = simple_data(
            &[1, 1, 1, 1],
            &[0.0, 0.0, 0.0, 0.0],
            &[1.0, 2.0, 3.0, 4.0],
            vec![GroupedLabels::singleton(4)],
        );
        let err = leave_out_tsls(&data, 0, LeaveOutWeighting::Weighted).unwrap_err();
        assert!(err.is_identification_failure());
    }

    #[test]
    fn leave_out_on_judge_clusters_is_undefined() {
        let judges = [1usize, 1, 2, 2];
        let dim = GroupedLabels::from_keys(&judges).unwrap();
        let data = simple_data(
            &judges,
            &[1.0, 0.0, 1.0, 0.0],
            &[1.0, 2.0, 3.0, 4.0],
            vec![dim],
        );
        let err = leave_out_tsls(&data, 0, LeaveOutWeighting::Weighted).unwrap_err();
        assert!(matches!(err, EstimationError::LeaveOutUndefined { .. }));
    }

    #[test]
    fn relabeling_groups_leaves_estimates_unchanged() {
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let judges: Vec<usize> = (0..24).map(|_| rng.gen_range(0..4)).collect();
        let dim_keys: Vec<usize> = (0..24).map(|_| rng.gen_range(0..6)).collect();
        let x: Vec<f64> = (0..24).map(|_| rng.gen::<f64>()).collect();
        let y: Vec<f64> = (0..24).map(|_| rng.gen::<f64>()).collect();

        let data = simple_data(
            &judges,
            &x,
            &y,
            vec![GroupedLabels::from_keys(&dim_keys).unwrap()],
        );
        // Relabel: judge j -> 9 - j, cluster g -> g + 100. Same partitions.
        let judges2: Vec<usize> = judges.iter().map(|&j| 9 - j).collect();
        let dims2: Vec<usize> = dim_keys.iter().map(|&g| g + 100).collect();
        let data2 = simple_data(
            &judges2,
            &x,
            &y,
            vec![GroupedLabels::from_keys(&dims2).unwrap()],
        );
        for f in [tsls, jive] {
            let a = f(&data).unwrap();
            let b = f(&data2).unwrap();
            assert_eq!(a.beta_scalar().to_bits(), b.beta_scalar().to_bits());
        }
        let a = md_cjive(&data, &[]).unwrap();
        let b = md_cjive(&data2, &[]).unwrap();
        assert_eq!(a.beta_scalar().to_bits(), b.beta_scalar().to_bits());
    }

    #[test]
    fn row_permutation_leaves_estimates_unchanged_to_tolerance() {
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        let n = 30;
        let judges: Vec<usize> = (0..n).map(|_| rng.gen_range(0..5)).collect();
        let dim_keys: Vec<usize> = (0..n).map(|_| rng.gen_range(0..7)).collect();
        let x: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let data = simple_data(
            &judges,
            &x,
            &y,
            vec![GroupedLabels::from_keys(&dim_keys).unwrap()],
        );

        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let judges_p: Vec<usize> = perm.iter().map(|&i| judges[i]).collect();
        let dims_p: Vec<usize> = perm.iter().map(|&i| dim_keys[i]).collect();
        let x_p: Vec<f64> = perm.iter().map(|&i| x[i]).collect();
        let y_p: Vec<f64> = perm.iter().map(|&i| y[i]).collect();
        let data_p = simple_data(
            &judges_p,
            &x_p,
            &y_p,
            vec![GroupedLabels::from_keys(&dims_p).unwrap()],
        );

        let a = md_cjive(&data, &[]).unwrap().beta_scalar();
        let b = md_cjive(&data_p, &[]).unwrap().beta_scalar();
        assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }
}
