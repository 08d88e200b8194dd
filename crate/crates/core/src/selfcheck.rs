//! Self-check suites: projection identities, leave-out equivalence,
//! adjustment-solve residuals, variance oracles and the degenerate
//! one-instrument-per-cluster scenario.
//!
//! The oracles here are deliberately literal — plain index loops over the
//! defining sums — and never share code with the production paths they
//! gate.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::data::{GroupedLabels, JudgeDesignData, MultiwayClustering, SelectionMask};
use crate::error::EstimationError;
use crate::estimators::{cjive, leave_out_tsls, md_cjive, LeaveOutWeighting};
use crate::fe::{
    fe_cjive, fe_context, fe_projection_parts, solve_block_h, solve_vartheta, FeModel, FeSpec,
    GeneralDim, HSolveOptions,
};
use crate::projections::{jackknife, judge_projection};
use crate::simulation::{
    scenario_fe_cjive, scenario_md_cjive, within_cluster_instrument_scenario, ScenarioConfig,
};
use crate::variance::{fe_cjive_variance, md_cjive_variance, VarianceOptions};

/// Outcome of one named check.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn pass(name: &'static str, detail: String) -> Self {
        Self {
            name,
            passed: true,
            detail,
        }
    }

    fn fail(name: &'static str, detail: String) -> Self {
        Self {
            name,
            passed: false,
            detail,
        }
    }
}

/// Run every check; `fast` trims the instance counts for a quick smoke run.
pub fn run_all(fast: bool) -> Vec<CheckOutcome> {
    let (proj, equiv, fe, var) = if fast {
        (150, 150, 40, 20)
    } else {
        (1000, 1000, 200, 100)
    };
    let scenario = if fast {
        (600, 60, 0.15)
    } else {
        (2000, 100, 0.05)
    };
    vec![
        check_projection_identities(proj),
        check_leave_out_equivalence(equiv),
        check_fe_solves(fe),
        check_variance_oracles(var),
        check_degenerate_scenario(scenario.0, scenario.1, scenario.2),
    ]
}

/// Assert that every masked entry of a jackknifed projection is exactly
/// zero. Exposed so tests can perturb an entry and watch the check fail.
pub fn verify_masked_zeros(matrix: &DMatrix<f64>, mask: &SelectionMask) -> Result<(), String> {
    let n = matrix.nrows();
    for i in 0..n {
        for j in 0..n {
            if mask.get(i, j) && matrix[(i, j)] != 0.0 {
                return Err(format!(
                    "masked entry ({i},{j}) holds {} instead of exact zero",
                    matrix[(i, j)]
                ));
            }
        }
    }
    Ok(())
}

/// Labels with every group nonempty: one case per group, rest scattered.
fn random_labels(rng: &mut ChaCha20Rng, n: usize, groups: usize) -> GroupedLabels {
    debug_assert!(groups <= n);
    let mut keys = vec![0usize; n];
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    for (g, &case) in order.iter().take(groups).enumerate() {
        keys[case] = g;
    }
    for &case in order.iter().skip(groups) {
        keys[case] = rng.gen_range(0..groups);
    }
    GroupedLabels::from_keys(&keys).unwrap()
}

/// Labels with every group holding at least `min_size` cases.
fn random_labels_min_size(
    rng: &mut ChaCha20Rng,
    n: usize,
    groups: usize,
    min_size: usize,
) -> GroupedLabels {
    debug_assert!(groups * min_size <= n);
    let mut sizes = vec![min_size; groups];
    for _ in 0..n - groups * min_size {
        sizes[rng.gen_range(0..groups)] += 1;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut keys = vec![0usize; n];
    let mut cursor = 0usize;
    for (g, &s) in sizes.iter().enumerate() {
        for &case in &order[cursor..cursor + s] {
            keys[case] = g;
        }
        cursor += s;
    }
    GroupedLabels::from_keys(&keys).unwrap()
}

/// Clusters of at most two cases: a judge with three or more cases then
/// always keeps a case outside any cluster, so the leave-out instrument is
/// defined everywhere.
fn random_pair_labels(rng: &mut ChaCha20Rng, n: usize) -> GroupedLabels {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut keys = vec![0usize; n];
    for (g, pair) in order.chunks(2).enumerate() {
        for &case in pair {
            keys[case] = g;
        }
    }
    GroupedLabels::from_keys(&keys).unwrap()
}

/// Balanced crossing of `judges` judges with `clusters` clusters: one case
/// per (judge, cluster) pair, in shuffled row order. These designs keep the
/// blockwise Kronecker system full rank.
fn grid_labels(
    rng: &mut ChaCha20Rng,
    judges: usize,
    clusters: usize,
) -> (GroupedLabels, GroupedLabels) {
    let n = judges * clusters;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut judge_keys = vec![0usize; n];
    let mut cluster_keys = vec![0usize; n];
    for (slot, &case) in order.iter().enumerate() {
        judge_keys[case] = slot % judges;
        cluster_keys[case] = slot / judges;
    }
    (
        GroupedLabels::from_keys(&judge_keys).unwrap(),
        GroupedLabels::from_keys(&cluster_keys).unwrap(),
    )
}

pub fn check_projection_identities(instances: usize) -> CheckOutcome {
    const NAME: &str = "projection_identities";
    for seed in 0..instances as u64 {
        let mut rng = ChaCha20Rng::seed_from_u64(0x50_0000 + seed);
        // Retry until the union jackknife keeps at least one entry.
        let mut done = false;
        for _attempt in 0..20 {
            let n = rng.gen_range(20..=200);
            let judges = random_labels(&mut rng, n, (n / 4).max(2));
            let d1 = random_labels(&mut rng, n, (n / 8).max(2));
            let d2 = random_labels(&mut rng, n, (n / 6).max(2));
            let base = judge_projection(&judges);

            let diag = SelectionMask::diagonal(n);
            let single = SelectionMask::from_dim(&d1);
            let union = match SelectionMask::union_of(&[&d1, &d2]) {
                Ok(u) => u,
                Err(e) => return CheckOutcome::fail(NAME, e.to_string()),
            };
            let dddot = match jackknife(&base, &union) {
                Ok(k) => k,
                Err(EstimationError::IdentificationFailure { .. }) => continue,
                Err(e) => return CheckOutcome::fail(NAME, e.to_string()),
            };
            let dot = match jackknife(&base, &diag) {
                Ok(k) => k,
                Err(_) => continue,
            };
            let ddot = match jackknife(&base, &single) {
                Ok(k) => k,
                Err(_) => continue,
            };
            for (kit, mask) in [(&dot, &diag), (&ddot, &single), (&dddot, &union)] {
                if let Err(detail) = verify_masked_zeros(kit.matrix(), mask) {
                    return CheckOutcome::fail(NAME, format!("seed {seed}: {detail}"));
                }
            }
            done = true;
            break;
        }
        if !done {
            return CheckOutcome::fail(
                NAME,
                format!("seed {seed}: no identifiable instance in 20 attempts"),
            );
        }
    }
    CheckOutcome::pass(
        NAME,
        format!("{instances} random instances, max masked-entry violation 0.0"),
    )
}

pub fn check_leave_out_equivalence(instances: usize) -> CheckOutcome {
    const NAME: &str = "leave_out_equivalence";
    let mut worst = 0.0f64;
    for seed in 0..instances as u64 {
        let mut rng = ChaCha20Rng::seed_from_u64(0xB_0000 + seed);
        let n = rng.gen_range(20..=80);
        let judge_count = rng.gen_range(3..=(n / 3));
        let judges = random_labels_min_size(&mut rng, n, judge_count, 3);
        let dim = random_pair_labels(&mut rng, n);
        let x = DMatrix::from_fn(n, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let data = JudgeDesignData::new(
            y,
            x,
            judges,
            DMatrix::zeros(n, 0),
            MultiwayClustering::new(vec![dim]).unwrap(),
        )
        .unwrap();
        let cj = match cjive(&data, 0) {
            Ok(r) => r.beta_scalar(),
            Err(e) => return CheckOutcome::fail(NAME, format!("seed {seed}: cjive failed: {e}")),
        };
        let lo = match leave_out_tsls(&data, 0, LeaveOutWeighting::Weighted) {
            Ok(r) => r.beta_scalar(),
            Err(e) => {
                return CheckOutcome::fail(NAME, format!("seed {seed}: leave-out failed: {e}"))
            }
        };
        let rel = (cj - lo).abs() / cj.abs().max(1.0);
        worst = worst.max(rel);
        if rel > 1e-10 {
            return CheckOutcome::fail(
                NAME,
                format!("seed {seed}: cjive {cj} vs weighted leave-out {lo} (rel {rel:.3e})"),
            );
        }
    }
    CheckOutcome::pass(
        NAME,
        format!("{instances} instances, worst relative gap {worst:.3e}"),
    )
}

pub fn check_fe_solves(instances: usize) -> CheckOutcome {
    const NAME: &str = "fe_adjustment_solves";
    let mut worst = 0.0f64;
    for seed in 0..instances as u64 {
        let mut rng = ChaCha20Rng::seed_from_u64(0xFE_0000 + seed);
        let judge_count = rng.gen_range(4..=6);
        let cluster_count = rng.gen_range(4..=6);
        let (judges, dim) = grid_labels(&mut rng, judge_count, cluster_count);
        let n = judges.n();
        let mut w = DMatrix::zeros(n, 3);
        for i in 0..n {
            w[(i, 0)] = 1.0;
            w[(i, 1)] = rng.sample::<f64, _>(StandardNormal);
            w[(i, 2)] = rng.sample::<f64, _>(StandardNormal);
        }
        let z = judges.dummy_matrix();
        let parts = match fe_projection_parts(&w, &z) {
            Ok(p) => p,
            Err(e) => return CheckOutcome::fail(NAME, format!("seed {seed}: parts: {e}")),
        };
        let theta = match solve_vartheta(&parts.m_wz, &parts.p_mwz) {
            Ok(t) => t,
            Err(e) => return CheckOutcome::fail(NAME, format!("seed {seed}: vartheta: {e}")),
        };
        worst = worst.max(theta.info.relative_residual);
        let h = match solve_block_h(&parts.m_wz, &parts.p_mwz, &dim, &HSolveOptions::default()) {
            Ok(h) => h,
            Err(e) => return CheckOutcome::fail(NAME, format!("seed {seed}: block H: {e}")),
        };
        worst = worst.max(h.info.relative_residual);

        // Case-level blocks reduce to the diagonal solve.
        let singleton = GroupedLabels::singleton(n);
        let hs =
            match solve_block_h(&parts.m_wz, &parts.p_mwz, &singleton, &HSolveOptions::default()) {
                Ok(h) => h,
                Err(e) => {
                    return CheckOutcome::fail(NAME, format!("seed {seed}: singleton H: {e}"))
                }
            };
        let theta_vec = theta.diag.as_ref().unwrap();
        let blocks = hs.blocks.as_ref().unwrap();
        for i in 0..n {
            let gap = (blocks[i][(0, 0)] - theta_vec[i]).abs();
            if gap > 1e-12 {
                return CheckOutcome::fail(
                    NAME,
                    format!("seed {seed}: singleton H[{i}] differs from ϑ by {gap:.3e}"),
                );
            }
        }
    }
    CheckOutcome::pass(
        NAME,
        format!("{instances} instances, worst relative residual {worst:.3e}"),
    )
}

// ---------------------------------------------------------------------------
// Variance oracles
// ---------------------------------------------------------------------------

/// Literal-loop variance of the MD CJIVE, for two clustering dimensions.
///
/// Builds P from the judge labels, decides membership straight from the
/// labels, and evaluates the defining quadruple sum without shortcuts.
pub fn oracle_md_variance(
    judges: &GroupedLabels,
    dims: [&GroupedLabels; 2],
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    beta: &DVector<f64>,
) -> DMatrix<f64> {
    let n = judges.n();
    let p = x.ncols();
    let share = |i: usize, j: usize| dims[0].same_group(i, j) || dims[1].same_group(i, j);
    let proj = |i: usize, j: usize| {
        if judges.same_group(i, j) {
            1.0 / judges.size(judges.label(i)) as f64
        } else {
            0.0
        }
    };
    let eps = y - x * beta;

    // P with entries for pairs sharing any cluster set to zero.
    let mut p_ddd = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if !share(i, j) {
                p_ddd[(i, j)] = proj(i, j);
            }
        }
    }
    let a = x.tr_mul(&(&p_ddd * x));

    let mut cross = DMatrix::zeros(p, p);
    for j in 0..n {
        for k in 0..n {
            for i in 0..n {
                if !(share(i, k) && !share(i, j)) {
                    continue;
                }
                let pij = proj(i, j);
                if pij == 0.0 {
                    continue;
                }
                for l in 0..n {
                    if !(share(l, j) && !share(l, k)) {
                        continue;
                    }
                    let pkl = proj(k, l);
                    if pkl == 0.0 {
                        continue;
                    }
                    let w = pij * eps[j] * eps[k] * pkl;
                    for r in 0..p {
                        for c in 0..p {
                            cross[(r, c)] += w * x[(i, r)] * x[(l, c)];
                        }
                    }
                }
            }
        }
    }

    // B^{(1)} + B^{(2)} − B^{(1,2)} applied to ε̂ε̂', assembled literally.
    let mut b = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let s1 = dims[0].same_group(i, j) as i32;
            let s2 = dims[1].same_group(i, j) as i32;
            let coeff = (s1 + s2 - s1 * s2) as f64;
            b[(i, j)] = coeff * eps[i] * eps[j];
        }
    }
    let block = x.tr_mul(&(&p_ddd * &b * &p_ddd * x));

    let a_inv = a.try_inverse().expect("oracle moment matrix invertible");
    let v = &a_inv * (cross + block) * a_inv.transpose();
    (&v + &v.transpose()) * 0.5
}

/// Literal-loop variance of the FE CJIVE given its projection and
/// annihilator.
pub fn oracle_fe_variance(
    p_tilde: &DMatrix<f64>,
    m_wz: &DMatrix<f64>,
    dim: &GroupedLabels,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    beta: &DVector<f64>,
) -> DMatrix<f64> {
    let n = x.nrows();
    let p = x.ncols();
    let eps = m_wz * (y - x * beta);
    let a = x.tr_mul(&(p_tilde * x));

    let mut b = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if dim.same_group(i, j) {
                b[(i, j)] = eps[i] * eps[j];
            }
        }
    }
    let block = x.tr_mul(&(p_tilde.transpose() * &b * p_tilde * x));

    let mut cross = DMatrix::zeros(p, p);
    for g in 0..dim.group_count() {
        for h in 0..dim.group_count() {
            if g == h {
                continue;
            }
            let mut lhs = DVector::<f64>::zeros(p);
            let mut rhs = nalgebra::RowDVector::<f64>::zeros(p);
            for &i in dim.members(g) {
                for &j in dim.members(h) {
                    for r in 0..p {
                        lhs[r] += x[(i, r)] * p_tilde[(i, j)] * eps[j];
                        rhs[r] += eps[i] * p_tilde[(i, j)] * x[(j, r)];
                    }
                }
            }
            cross += &lhs * &rhs;
        }
    }

    let a_inv = a.try_inverse().expect("oracle moment matrix invertible");
    let v = &a_inv * (cross + block) * a_inv.transpose();
    (&v + &v.transpose()) * 0.5
}

fn rel_gap(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let mut scale = 0.0f64;
    let mut gap = 0.0f64;
    for (x, y) in a.iter().zip(b.iter()) {
        scale = scale.max(y.abs());
        gap = gap.max((x - y).abs());
    }
    if scale == 0.0 {
        gap
    } else {
        gap / scale
    }
}

pub fn check_variance_oracles(seeds: usize) -> CheckOutcome {
    const NAME: &str = "variance_oracles";
    let mut worst = 0.0f64;

    // MD CJIVE variance vs the quadruple-loop oracle, on fully random
    // labelings (instances whose dddot projection is empty are resampled).
    let mut seed = 0u64;
    let mut checked = 0usize;
    let mut attempts = 0usize;
    while checked < seeds {
        attempts += 1;
        if attempts > seeds * 30 {
            return CheckOutcome::fail(
                NAME,
                format!("could not assemble {seeds} identifiable md instances"),
            );
        }
        seed += 1;
        let mut rng = ChaCha20Rng::seed_from_u64(0x7A_0000 + seed);
        let n = rng.gen_range(10..=20);
        let judge_count = rng.gen_range(2..=4);
        let judges = random_labels(&mut rng, n, judge_count);
        let g1 = rng.gen_range(3..=5);
        let d1 = random_labels(&mut rng, n, g1);
        let g2 = rng.gen_range(3..=5);
        let d2 = random_labels(&mut rng, n, g2);
        let x = DMatrix::from_fn(n, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let data = JudgeDesignData::new(
            y.clone(),
            x.clone(),
            judges.clone(),
            DMatrix::zeros(n, 0),
            MultiwayClustering::new(vec![d1.clone(), d2.clone()]).unwrap(),
        )
        .unwrap();

        let est = match md_cjive(&data, &[]) {
            Ok(r) => r,
            Err(_) => continue,
        };
        let v = match md_cjive_variance(&data, &[], &est.beta, &VarianceOptions::default()) {
            Ok(v) => v,
            Err(e) => return CheckOutcome::fail(NAME, format!("seed {seed}: md variance: {e}")),
        };
        let oracle = oracle_md_variance(&judges, [&d1, &d2], &x, &y, &est.beta);
        let gap = rel_gap(&v.matrix, &oracle);
        worst = worst.max(gap);
        if gap > 1e-10 {
            return CheckOutcome::fail(
                NAME,
                format!("seed {seed}: md variance differs from oracle by rel {gap:.3e}"),
            );
        }
        checked += 1;
    }

    // FE CJIVE variance vs the cluster-loop oracle, on balanced crossings
    // (which keep the block solve full rank) without extra controls.
    const GRID_SHAPES: [(usize, usize); 6] = [(4, 3), (4, 4), (4, 5), (5, 3), (5, 4), (6, 3)];
    for seed in 0..seeds as u64 {
        let mut rng = ChaCha20Rng::seed_from_u64(0xFE7A_0000 + seed);
        let (jk, gk) = GRID_SHAPES[rng.gen_range(0..GRID_SHAPES.len())];
        let (judges, dim) = grid_labels(&mut rng, jk, gk);
        let n = judges.n();
        let d2 = random_labels(&mut rng, n, 4);
        let x = DMatrix::from_fn(n, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let data = JudgeDesignData::new(
            y.clone(),
            x.clone(),
            judges.clone(),
            DMatrix::zeros(n, 0),
            MultiwayClustering::new(vec![dim.clone(), d2]).unwrap(),
        )
        .unwrap();

        let spec = FeSpec::dims(&[]);
        let fe_est = match fe_cjive(&data, &spec, GeneralDim::Clustering(0)) {
            Ok(r) => r,
            Err(e) => return CheckOutcome::fail(NAME, format!("seed {seed}: fe_cjive: {e}")),
        };
        let fv = match fe_cjive_variance(
            &data,
            &spec,
            GeneralDim::Clustering(0),
            &fe_est.beta,
            &VarianceOptions::default(),
        ) {
            Ok(v) => v,
            Err(e) => return CheckOutcome::fail(NAME, format!("seed {seed}: fe variance: {e}")),
        };
        let z = judges.dummy_matrix();
        let w = DMatrix::zeros(n, 0);
        let model = FeModel {
            z: &z,
            w: &w,
            x: &x,
            y: &y,
        };
        let ctx = fe_context(&model, Some(&dim), &HSolveOptions::default()).unwrap();
        let fe_oracle = oracle_fe_variance(
            ctx.kit.matrix(),
            &ctx.parts.m_wz,
            &dim,
            &x,
            &y,
            &fe_est.beta,
        );
        let fe_gap = rel_gap(&fv.matrix, &fe_oracle);
        worst = worst.max(fe_gap);
        if fe_gap > 1e-10 {
            return CheckOutcome::fail(
                NAME,
                format!("seed {seed}: fe variance differs from oracle by rel {fe_gap:.3e}"),
            );
        }
    }
    CheckOutcome::pass(NAME, format!("{seeds} seeds, worst relative gap {worst:.3e}"))
}

pub fn check_degenerate_scenario(n: usize, clusters: usize, bias_bound: f64) -> CheckOutcome {
    const NAME: &str = "within_cluster_instrument_scenario";
    let config = ScenarioConfig {
        n,
        clusters,
        ..Default::default()
    };
    let data = match within_cluster_instrument_scenario(&config) {
        Ok(d) => d,
        Err(e) => return CheckOutcome::fail(NAME, e.to_string()),
    };
    match scenario_md_cjive(&data) {
        Err(EstimationError::IdentificationFailure { .. }) => {}
        Err(e) => return CheckOutcome::fail(NAME, format!("md route failed oddly: {e}")),
        Ok(r) => {
            return CheckOutcome::fail(
                NAME,
                format!(
                    "md route should fail identification but returned {}",
                    r.beta_scalar()
                ),
            )
        }
    }
    match scenario_fe_cjive(&data) {
        Ok(r) => {
            let bias = (r.beta_scalar() - data.beta_true).abs();
            if bias < bias_bound {
                CheckOutcome::pass(
                    NAME,
                    format!("md fails identification, fe_cjive bias {bias:.4} < {bias_bound}"),
                )
            } else {
                CheckOutcome::fail(NAME, format!("fe_cjive bias {bias:.4} ≥ {bias_bound}"))
            }
        }
        Err(e) => CheckOutcome::fail(NAME, format!("fe route failed: {e}")),
    }
}
