//! Data-generating process and Monte-Carlo harness.
//!
//! Data are clustered on two dimensions with factor-structured errors whose
//! ω parameter interpolates between clustering that cluster fixed effects
//! capture fully (ω = 0) and general within-cluster correlation (ω = 1).
//! Replications run in parallel on deterministic counter-based substreams,
//! so identical configurations reproduce bit-identical summaries.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{GroupedLabels, JudgeDesignData, MultiwayClustering};
use crate::error::{DataError, EstimationError};
use crate::estimators::{
    cjive, jive, leave_out_tsls, md_cjive, tsls, EstimateResult, LeaveOutWeighting,
};
use crate::fe::{fe_cjive_with, fe_estimate_from_matrices, fe_jive, FeModel, FeSpec, GeneralDim, HSolveOptions};
use crate::projections::{jackknife, projection_from_columns};

/// Stream index reserved for study-level draws (the first-stage coefficients
/// Π, which stay fixed across replications).
const STUDY_STREAM: u64 = u64::MAX;

/// Full parameterization of the two-dimension clustered DGP.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DgpConfig {
    pub n: usize,
    /// Number of judges k.
    pub judges: usize,
    /// Cluster counts G per dimension.
    pub clusters: [usize; 2],
    /// Unbalancedness of the cluster sizes per dimension.
    pub gamma: [f64; 2],
    /// Unbalancedness of the judge group sizes.
    pub gamma_judges: f64,
    /// Share of the within-cluster correlation that fixed effects cannot
    /// capture, per dimension; in [0, 1].
    pub omega: [f64; 2],
    /// Correlation between first- and second-stage errors.
    pub rho: f64,
    /// Weights of the two clustered error components (the idiosyncratic
    /// component receives 1 − w₁ − w₂).
    pub weights: [f64; 2],
    pub beta: f64,
    /// Variance of the cluster factor f.
    pub factor_variance: f64,
    /// Ridge added to the projection block before normalizing it into a
    /// correlation matrix.
    pub ridge: f64,
    pub replications: usize,
    pub seed: u64,
}

impl Default for DgpConfig {
    fn default() -> Self {
        Self {
            n: 500,
            judges: 30,
            clusters: [30, 30],
            gamma: [2.0, 2.0],
            gamma_judges: 2.0,
            omega: [0.0, 0.0],
            rho: 0.5,
            weights: [1.0 / 3.0, 1.0 / 3.0],
            beta: 0.0,
            factor_variance: 9.0,
            ridge: 0.01,
            replications: 1000,
            seed: 20240101,
        }
    }
}

impl DgpConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |msg: String| Err(DataError::InvalidConfig(msg));
        if self.n == 0 || self.judges == 0 {
            return fail("n and judges must be at least 1".into());
        }
        if self.judges > self.n {
            return fail(format!("judges ({}) exceed n ({})", self.judges, self.n));
        }
        for (c, &g) in self.clusters.iter().enumerate() {
            if g == 0 || g > self.n {
                return fail(format!("cluster count {g} of dimension {c} outside 1..=n"));
            }
        }
        for &w in &self.omega {
            if !(0.0..=1.0).contains(&w) {
                return fail(format!("omega {w} outside [0, 1]"));
            }
        }
        if self.weights[0] < 0.0 || self.weights[1] < 0.0 {
            return fail("weights must be nonnegative".into());
        }
        if self.weights[0] + self.weights[1] > 1.0 + 1e-12 {
            return fail(format!(
                "weights sum to {} > 1",
                self.weights[0] + self.weights[1]
            ));
        }
        if !(-1.0..=1.0).contains(&self.rho) {
            return fail(format!("rho {} outside [-1, 1]", self.rho));
        }
        if self.factor_variance < 0.0 || self.ridge < 0.0 {
            return fail("factor_variance and ridge must be nonnegative".into());
        }
        Ok(())
    }
}

/// Exponentially unbalanced group sizes that sum to n.
///
/// Sizes follow max{1, n·exp(γg/(G−1))/(Σ_{g<G} exp(γg/(G−1)) + 1)} for the
/// first G−1 groups, the last group takes max{1, n − Σ}, everything is
/// floored, and the first n − Σ groups are incremented by one. When the
/// size-one floor pushes the total over n (tiny n), the largest groups give
/// the excess back.
pub fn cluster_sizes(n: usize, groups: usize, gamma: f64) -> Result<Vec<usize>, DataError> {
    if groups == 0 || n == 0 {
        return Err(DataError::InvalidConfig(
            "group and sample counts must be at least 1".into(),
        ));
    }
    if groups > n {
        return Err(DataError::InvalidConfig(format!(
            "cannot split {n} cases into {groups} nonempty groups"
        )));
    }
    if groups == 1 {
        return Ok(vec![n]);
    }

    let denom_exp = (groups - 1) as f64;
    let scale: f64 = (1..groups)
        .map(|g| (gamma * g as f64 / denom_exp).exp())
        .sum::<f64>()
        + 1.0;
    let mut real: Vec<f64> = (1..groups)
        .map(|g| (n as f64 * (gamma * g as f64 / denom_exp).exp() / scale).max(1.0))
        .collect();
    let last = (n as f64 - real.iter().sum::<f64>()).max(1.0);
    real.push(last);

    let mut sizes: Vec<usize> = real.iter().map(|v| v.floor() as usize).collect();
    let mut deficit = n as i64 - sizes.iter().sum::<usize>() as i64;
    let mut next = 0usize;
    while deficit > 0 {
        sizes[next % groups] += 1;
        next += 1;
        deficit -= 1;
    }
    while deficit < 0 {
        let (idx, _) = sizes
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .expect("nonempty");
        if sizes[idx] <= 1 {
            return Err(DataError::InvalidConfig(format!(
                "cannot fit {groups} groups of at least one case into n = {n}"
            )));
        }
        sizes[idx] -= 1;
        deficit += 1;
    }
    Ok(sizes)
}

/// Randomly scatter the cases over groups with the given sizes.
fn random_partition(rng: &mut ChaCha20Rng, n: usize, sizes: &[usize]) -> GroupedLabels {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut labels = vec![0usize; n];
    let mut cursor = 0usize;
    for (g, &s) in sizes.iter().enumerate() {
        for &case in &order[cursor..cursor + s] {
            labels[case] = g;
        }
        cursor += s;
    }
    GroupedLabels::from_keys(&labels).expect("n >= 1")
}

/// Correlation matrix D^{-1/2} (B + ridge·I) D^{-1/2} built from a
/// projection block B.
pub fn correlation_from_projection_block(block: &DMatrix<f64>, ridge: f64) -> DMatrix<f64> {
    let m = block.nrows();
    let mut a = block.clone();
    for i in 0..m {
        a[(i, i)] += ridge;
    }
    let inv_sqrt: Vec<f64> = (0..m).map(|i| 1.0 / a[(i, i)].sqrt()).collect();
    for i in 0..m {
        for j in 0..m {
            a[(i, j)] *= inv_sqrt[i] * inv_sqrt[j];
        }
    }
    a
}

/// One generated dataset plus the latent error components (exposed so tests
/// can verify the factor structure directly).
#[derive(Debug, Clone)]
pub struct GeneratedData {
    pub data: JudgeDesignData,
    pub eta: DVector<f64>,
    pub eps: DVector<f64>,
    /// The two clustered components of η, before weighting.
    pub eta_clustered: [DVector<f64>; 2],
    /// Count of per-cluster covariance factorizations that needed a jitter
    /// retry (expected to stay zero; the ridge keeps the matrix PD).
    pub covariance_retries: usize,
}

/// The first-stage coefficients Π, drawn once per study and held fixed over
/// replications.
pub fn draw_coefficients(config: &DgpConfig) -> DVector<f64> {
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    rng.set_stream(STUDY_STREAM);
    DVector::from_fn(config.judges, |_, _| rng.sample::<f64, _>(StandardNormal))
}

fn cholesky_with_retry(
    sigma: &DMatrix<f64>,
    retries: &mut usize,
) -> Cholesky<f64, Dyn> {
    if let Some(c) = Cholesky::new(sigma.clone()) {
        return c;
    }
    // The ridge guarantees positive definiteness in exact arithmetic; retry
    // with a little extra jitter if floating point disagrees.
    *retries += 1;
    let m = sigma.nrows();
    let mut bumped = sigma.clone();
    for i in 0..m {
        bumped[(i, i)] += 1e-8;
    }
    Cholesky::new(bumped).expect("correlation matrix with jitter is positive definite")
}

/// Generate replication `rep` of the configured DGP.
pub fn generate(
    config: &DgpConfig,
    pi: &DVector<f64>,
    rep: u64,
) -> Result<GeneratedData, DataError> {
    config.validate()?;
    if pi.len() != config.judges {
        return Err(DataError::LengthMismatch {
            what: "first-stage coefficient vector".into(),
            expected: config.judges,
            got: pi.len(),
        });
    }
    let n = config.n;
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    rng.set_stream(rep);

    // Group assignments: judges first, then the two clustering dimensions,
    // each scattered over a fresh random permutation.
    let judge_sizes = cluster_sizes(n, config.judges, config.gamma_judges)?;
    let judges = random_partition(&mut rng, n, &judge_sizes);
    let mut dims = Vec::with_capacity(2);
    for c in 0..2 {
        let sizes = cluster_sizes(n, config.clusters[c], config.gamma[c])?;
        dims.push(random_partition(&mut rng, n, &sizes));
    }

    // Clustered error components: η_[g] = (√(1−ω²)·u_g + ω·e_[g])·f_g with
    // e ~ N(0, Σ_g) and Σ_g the correlation matrix of the within-cluster
    // projection block plus a ridge.
    let f_sd = config.factor_variance.sqrt();
    let mut retries = 0usize;
    let mut eta_clustered = [DVector::zeros(n), DVector::zeros(n)];
    for c in 0..2 {
        let dim = &dims[c];
        let omega = config.omega[c];
        let shared_scale = (1.0 - omega * omega).sqrt();
        for g in 0..dim.group_count() {
            let members = dim.members(g);
            let m = members.len();
            let u: f64 = rng.sample(StandardNormal);
            let f: f64 = rng.sample::<f64, _>(StandardNormal) * f_sd;
            let block = DMatrix::from_fn(m, m, |a, b| {
                let (i, j) = (members[a], members[b]);
                if judges.same_group(i, j) {
                    1.0 / judges.size(judges.label(i)) as f64
                } else {
                    0.0
                }
            });
            let sigma = correlation_from_projection_block(&block, config.ridge);
            let chol = cholesky_with_retry(&sigma, &mut retries);
            let raw = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
            let e = chol.l() * raw;
            for (idx, &case) in members.iter().enumerate() {
                eta_clustered[c][case] = (shared_scale * u + omega * e[idx]) * f;
            }
        }
    }

    let eta_idio = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let w = config.weights;
    let eta = &eta_clustered[0] * w[0]
        + &eta_clustered[1] * w[1]
        + eta_idio * (1.0 - w[0] - w[1]);

    let v = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let eps = &eta * config.rho + v * (1.0 - config.rho * config.rho).sqrt();

    let x = DMatrix::from_fn(n, 1, |i, _| pi[judges.label(i)] + eta[i]);
    let y = DVector::from_fn(n, |i, _| config.beta * x[(i, 0)] + eps[i]);

    let data = JudgeDesignData::new(
        y,
        x,
        judges,
        DMatrix::zeros(n, 0),
        MultiwayClustering::new(dims)?,
    )?;
    Ok(GeneratedData {
        data,
        eta,
        eps,
        eta_clustered,
        covariance_retries: retries,
    })
}

/// Estimators the Monte-Carlo harness can run per replication.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum EstimatorSpec {
    Tsls,
    Jive,
    /// CJIVE on one clustering dimension.
    Cjive { dim: usize },
    /// MD CJIVE over the given dimensions (all when empty).
    MdCjive { dims: Vec<usize> },
    /// Leave-out 2SLS in the weighted (CJIVE-equivalent) form.
    LeaveOut { dim: usize },
    /// FE JIVE with dummies for the given dimensions.
    FeJive { fe_dims: Vec<usize> },
    /// FE CJIVE: dummies for `fe_dims`, general clustering on `general_dim`.
    FeCjive {
        fe_dims: Vec<usize>,
        general_dim: usize,
    },
}

impl EstimatorSpec {
    pub fn label(&self) -> &'static str {
        match self {
            Self::Tsls => "2sls",
            Self::Jive => "jive",
            Self::Cjive { .. } => "cjive",
            Self::MdCjive { .. } => "md_cjive",
            Self::LeaveOut { .. } => "leave_out",
            Self::FeJive { .. } => "fe_jive",
            Self::FeCjive { .. } => "fe_cjive",
        }
    }

    pub fn run(&self, data: &JudgeDesignData) -> Result<EstimateResult, EstimationError> {
        match self {
            Self::Tsls => tsls(data),
            Self::Jive => jive(data),
            Self::Cjive { dim } => cjive(data, *dim),
            Self::MdCjive { dims } => md_cjive(data, dims),
            Self::LeaveOut { dim } => leave_out_tsls(data, *dim, LeaveOutWeighting::Weighted),
            Self::FeJive { fe_dims } => fe_jive(data, &FeSpec::dims(fe_dims)),
            Self::FeCjive {
                fe_dims,
                general_dim,
            } => fe_cjive_with(
                data,
                &FeSpec::dims(fe_dims),
                GeneralDim::Clustering(*general_dim),
                &HSolveOptions::default(),
            ),
        }
    }
}

/// The six estimators compared in the simulation study: 2SLS, JIVE, CJIVE on
/// the first dimension, FE JIVE with both dimensions as fixed effects,
/// FE CJIVE with dimension 1 as fixed effects and dimension 2 general, and
/// MD CJIVE over both dimensions.
pub fn study_estimators() -> Vec<EstimatorSpec> {
    vec![
        EstimatorSpec::Tsls,
        EstimatorSpec::Jive,
        EstimatorSpec::Cjive { dim: 0 },
        EstimatorSpec::FeJive { fe_dims: vec![0, 1] },
        EstimatorSpec::FeCjive {
            fe_dims: vec![0],
            general_dim: 1,
        },
        EstimatorSpec::MdCjive { dims: vec![] },
    ]
}

/// Per-estimator summary over the successful replications.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSummary {
    pub label: String,
    pub used: usize,
    pub failures: usize,
    pub mean: f64,
    pub median: f64,
    pub mean_bias: f64,
    pub median_bias: f64,
    pub q1: f64,
    pub q3: f64,
    pub iqr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    pub beta_true: f64,
    pub replications: usize,
    pub seed: u64,
    /// How cases are assigned to groups (fixed: scattered by a uniform
    /// random permutation, independently per dimension and for judges).
    pub assignment: String,
    pub estimators: Vec<EstimatorSummary>,
}

/// Linearly interpolated quantile (type 7) of an ascending slice.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
    }
}

fn summarize(label: &str, mut values: Vec<f64>, failures: usize, beta: f64) -> EstimatorSummary {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite estimates"));
    let used = values.len();
    if used == 0 {
        return EstimatorSummary {
            label: label.to_string(),
            used,
            failures,
            mean: f64::NAN,
            median: f64::NAN,
            mean_bias: f64::NAN,
            median_bias: f64::NAN,
            q1: f64::NAN,
            q3: f64::NAN,
            iqr: f64::NAN,
        };
    }
    let mean = values.iter().sum::<f64>() / used as f64;
    let median = quantile(&values, 0.5);
    let q1 = quantile(&values, 0.25);
    let q3 = quantile(&values, 0.75);
    EstimatorSummary {
        label: label.to_string(),
        used,
        failures,
        mean,
        median,
        mean_bias: mean - beta,
        median_bias: median - beta,
        q1,
        q3,
        iqr: q3 - q1,
    }
}

/// Run the Monte-Carlo study. Replications execute in parallel on
/// per-replication substreams; failed estimates are excluded and counted.
pub fn monte_carlo(
    config: &DgpConfig,
    estimators: &[EstimatorSpec],
) -> Result<McSummary, DataError> {
    config.validate()?;
    let pi = draw_coefficients(config);
    let reps: Vec<Vec<Option<f64>>> = (0..config.replications as u64)
        .into_par_iter()
        .map(|rep| {
            let generated = generate(config, &pi, rep)?;
            Ok(estimators
                .iter()
                .map(|spec| {
                    spec.run(&generated.data)
                        .ok()
                        .map(|r| r.beta_scalar())
                        .filter(|b| b.is_finite())
                })
                .collect())
        })
        .collect::<Result<_, DataError>>()?;

    let mut summaries = Vec::with_capacity(estimators.len());
    for (e, spec) in estimators.iter().enumerate() {
        let values: Vec<f64> = reps.iter().filter_map(|row| row[e]).collect();
        let failures = config.replications - values.len();
        summaries.push(summarize(spec.label(), values, failures, config.beta));
    }
    Ok(McSummary {
        beta_true: config.beta,
        replications: config.replications,
        seed: config.seed,
        assignment: "random-scatter".to_string(),
        estimators: summaries,
    })
}

/// One-instrument-per-cluster scenario with within-cluster instrument
/// variation and errors that cluster fixed effects capture fully. The
/// instrument projection is block diagonal, so removing all within-cluster
/// entries leaves nothing, while the FE route stays identified.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub n: usize,
    pub clusters: usize,
    pub rho: f64,
    pub beta: f64,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            n: 2000,
            clusters: 100,
            rho: 0.5,
            beta: 0.0,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioData {
    /// n×G instrument matrix: column g carries the instrument values of the
    /// cases in cluster g, zero elsewhere.
    pub z: DMatrix<f64>,
    pub cluster: GroupedLabels,
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub beta_true: f64,
}

pub fn within_cluster_instrument_scenario(config: &ScenarioConfig) -> Result<ScenarioData, DataError> {
    if config.clusters == 0 || config.clusters > config.n {
        return Err(DataError::InvalidConfig(
            "cluster count must lie in 1..=n".into(),
        ));
    }
    let n = config.n;
    let g_count = config.clusters;
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);

    let base = n / g_count;
    let rem = n % g_count;
    let sizes: Vec<usize> = (0..g_count)
        .map(|g| base + usize::from(g < rem))
        .collect();
    let cluster = random_partition(&mut rng, n, &sizes);

    let pi: Vec<f64> = (0..g_count).map(|_| rng.sample(StandardNormal)).collect();
    let gamma1: Vec<f64> = (0..g_count).map(|_| rng.sample(StandardNormal)).collect();
    let gamma2: Vec<f64> = (0..g_count).map(|_| rng.sample(StandardNormal)).collect();

    let mut z = DMatrix::zeros(n, g_count);
    let mut x = DMatrix::zeros(n, 1);
    let mut y = DVector::zeros(n);
    let noise = (1.0 - config.rho * config.rho).sqrt();
    for i in 0..n {
        let g = cluster.label(i);
        let zi: f64 = rng.sample(StandardNormal);
        let u: f64 = rng.sample(StandardNormal);
        let w2: f64 = rng.sample(StandardNormal);
        let eta = 0.5 * u;
        let eps = 0.5 * (config.rho * u + noise * w2);
        z[(i, g)] = zi;
        x[(i, 0)] = pi[g] * zi + gamma1[g] + eta;
        y[i] = config.beta * x[(i, 0)] + gamma2[g] + eps;
    }
    Ok(ScenarioData {
        z,
        cluster,
        x,
        y,
        beta_true: config.beta,
    })
}

/// MD CJIVE route for the scenario: controls projected out, then every
/// within-cluster entry removed. Deterministically fails identification.
pub fn scenario_md_cjive(data: &ScenarioData) -> Result<EstimateResult, EstimationError> {
    let w = data.cluster.dummy_matrix();
    let ann = crate::linalg::Annihilator::new(&w);
    let kit = projection_from_columns(&ann.apply(&data.z));
    let mask = crate::data::SelectionMask::union_of(&[&data.cluster])
        .map_err(|e| EstimationError::InvalidInput(e.to_string()))?;
    let jk = jackknife(&kit, &mask)?;
    crate::estimators::iv_kernel(
        &jk,
        &ann.apply(&data.x),
        &ann.apply_vector(&data.y),
        crate::estimators::EstimatorTag::MdCjive,
    )
}

/// FE CJIVE route for the scenario: cluster fixed effects removed through
/// the block adjustment at the case level.
pub fn scenario_fe_cjive(data: &ScenarioData) -> Result<EstimateResult, EstimationError> {
    let w = data.cluster.dummy_matrix();
    let model = FeModel {
        z: &data.z,
        w: &w,
        x: &data.x,
        y: &data.y,
    };
    let singleton = GroupedLabels::singleton(data.x.nrows());
    fe_estimate_from_matrices(&model, Some(&singleton), &HSolveOptions::default())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cluster_sizes_match_reported_extremes() {
        let sizes = cluster_sizes(500, 30, 2.0).unwrap();
        assert_eq!(sizes.iter().sum::<usize>(), 500);
        assert_eq!(*sizes.iter().min().unwrap(), 5);
        assert_eq!(*sizes.iter().max().unwrap(), 38);
    }

    #[test]
    fn cluster_sizes_gamma_zero_is_even_split() {
        let sizes = cluster_sizes(100, 7, 0.0).unwrap();
        assert_eq!(sizes.iter().sum::<usize>(), 100);
        let min = *sizes.iter().min().unwrap();
        let max = *sizes.iter().max().unwrap();
        assert!(max - min <= 1, "sizes {sizes:?}");
    }

    #[test]
    fn cluster_sizes_all_ones_when_n_equals_groups() {
        let sizes = cluster_sizes(10, 10, 2.0).unwrap();
        assert_eq!(sizes, vec![1; 10]);
    }

    #[test]
    fn cluster_sizes_rejects_more_groups_than_cases() {
        assert!(cluster_sizes(5, 6, 2.0).is_err());
    }

    #[test]
    fn omega_zero_gives_shared_factor_within_clusters() {
        let config = DgpConfig {
            n: 120,
            replications: 1,
            omega: [0.0, 0.0],
            ..Default::default()
        };
        let pi = draw_coefficients(&config);
        let generated = generate(&config, &pi, 0).unwrap();
        for c in 0..2 {
            let dim = generated.data.clustering().dim(c);
            for g in 0..dim.group_count() {
                let members = dim.members(g);
                let first = generated.eta_clustered[c][members[0]];
                for &i in members {
                    assert_eq!(
                        generated.eta_clustered[c][i], first,
                        "dimension {c} cluster {g} is not a single shared value"
                    );
                }
            }
        }
    }

    #[test]
    fn rho_zero_decouples_the_error_stages() {
        let config = DgpConfig {
            n: 500,
            rho: 0.0,
            replications: 1,
            ..Default::default()
        };
        let pi = draw_coefficients(&config);
        let mut sxy = 0.0;
        let mut sxx = 0.0;
        let mut syy = 0.0;
        let mut count = 0usize;
        for rep in 0..200u64 {
            let g = generate(&config, &pi, rep).unwrap();
            for i in 0..config.n {
                sxy += g.eta[i] * g.eps[i];
                sxx += g.eta[i] * g.eta[i];
                syy += g.eps[i] * g.eps[i];
                count += 1;
            }
        }
        assert_eq!(count, 100_000);
        let corr = sxy / (sxx.sqrt() * syy.sqrt());
        assert!(corr.abs() < 0.01, "pooled correlation {corr}");
    }

    #[test]
    fn correlated_component_matches_target_correlation() {
        // Draw e ~ N(0, Σ) repeatedly for one cluster and compare the sample
        // correlations against Σ built from a projection block.
        let judges = GroupedLabels::from_keys(&[0usize, 0, 1, 1, 1, 2]).unwrap();
        let block = DMatrix::from_fn(6, 6, |i, j| {
            if judges.same_group(i, j) {
                1.0 / judges.size(judges.label(i)) as f64
            } else {
                0.0
            }
        });
        let sigma = correlation_from_projection_block(&block, 0.01);
        let chol = Cholesky::new(sigma.clone()).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(99);
        let reps = 10_000;
        let mut acc = DMatrix::<f64>::zeros(6, 6);
        for _ in 0..reps {
            let raw = DVector::from_fn(6, |_, _| rng.sample::<f64, _>(StandardNormal));
            let e = chol.l() * raw;
            for i in 0..6 {
                for j in 0..6 {
                    acc[(i, j)] += e[i] * e[j];
                }
            }
        }
        acc /= reps as f64;
        // Normalize to correlations before comparing.
        for i in 0..6 {
            for j in 0..6 {
                if i != j {
                    let r = acc[(i, j)] / (acc[(i, i)] * acc[(j, j)]).sqrt();
                    assert!(
                        (r - sigma[(i, j)]).abs() < 0.05,
                        "sample corr {r} vs target {}",
                        sigma[(i, j)]
                    );
                }
            }
        }
    }

    #[test]
    fn monte_carlo_is_bit_reproducible() {
        let config = DgpConfig {
            n: 80,
            judges: 8,
            clusters: [8, 8],
            replications: 6,
            seed: 4242,
            ..Default::default()
        };
        let specs = vec![EstimatorSpec::Tsls, EstimatorSpec::Jive];
        let a = monte_carlo(&config, &specs).unwrap();
        let b = monte_carlo(&config, &specs).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn tsls_mean_exceeds_jive_mean_under_positive_rho() {
        // Singleton clusters and purely idiosyncratic errors with ρ > 0: the
        // own-observation bias term inflates 2SLS but not JIVE.
        let config = DgpConfig {
            n: 120,
            judges: 12,
            clusters: [120, 120],
            weights: [0.0, 0.0],
            rho: 0.5,
            replications: 300,
            seed: 99,
            ..Default::default()
        };
        let summary =
            monte_carlo(&config, &[EstimatorSpec::Tsls, EstimatorSpec::Jive]).unwrap();
        let tsls_mean = summary.estimators[0].mean;
        let jive_mean = summary.estimators[1].mean;
        assert!(
            tsls_mean > jive_mean,
            "2sls mean {tsls_mean} vs jive mean {jive_mean}"
        );
    }

    #[test]
    fn scenario_is_degenerate_for_md_but_not_fe() {
        let config = ScenarioConfig {
            n: 400,
            clusters: 40,
            ..Default::default()
        };
        let data = within_cluster_instrument_scenario(&config).unwrap();
        let md = scenario_md_cjive(&data);
        assert!(matches!(
            md,
            Err(EstimationError::IdentificationFailure { .. })
        ));
        let fe = scenario_fe_cjive(&data).unwrap();
        assert!(
            (fe.beta_scalar() - data.beta_true).abs() < 0.15,
            "fe_cjive estimate {} too far from {}",
            fe.beta_scalar(),
            data.beta_true
        );
    }
}
