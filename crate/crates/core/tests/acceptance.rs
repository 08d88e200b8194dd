//! Acceptance suite: one test per criterion, each printing a pass/fail line.
//!
//! The Monte-Carlo criteria run 1000 replications each and take a few
//! minutes; everything else is seconds.

use std::time::Instant;

use mdjive::selfcheck::{
    check_degenerate_scenario, check_fe_solves, check_leave_out_equivalence,
    check_projection_identities, check_variance_oracles,
};
use mdjive::{
    fe_cjive, md_cjive, monte_carlo, study_estimators, DgpConfig, FeSpec, GeneralDim,
    GroupedLabels, JudgeDesignData, McSummary, MultiwayClustering,
};
use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

fn report(criterion: &str, passed: bool, detail: &str) {
    let status = if passed { "PASS" } else { "FAIL" };
    println!("[{status}] {criterion}: {detail}");
    assert!(passed, "{criterion}: {detail}");
}

#[test]
fn criterion_01_projection_identities() {
    let start = Instant::now();
    let outcome = check_projection_identities(1000);
    let elapsed = start.elapsed().as_secs_f64();
    report(
        "criterion 1 (projection identities)",
        outcome.passed && elapsed < 10.0,
        &format!("{} in {elapsed:.1}s (cap 10s)", outcome.detail),
    );
}

#[test]
fn criterion_02_leave_out_equivalence() {
    let start = Instant::now();
    let outcome = check_leave_out_equivalence(1000);
    let elapsed = start.elapsed().as_secs_f64();
    report(
        "criterion 2 (cluster jackknife equals weighted leave-out 2SLS)",
        outcome.passed && elapsed < 30.0,
        &format!("{} in {elapsed:.1}s (cap 30s)", outcome.detail),
    );
}

#[test]
fn criterion_03_fe_adjustment_solves() {
    let start = Instant::now();
    let outcome = check_fe_solves(200);
    let elapsed = start.elapsed().as_secs_f64();
    report(
        "criterion 3 (fixed-effect adjustment residuals)",
        outcome.passed && elapsed < 60.0,
        &format!("{} in {elapsed:.1}s (cap 60s)", outcome.detail),
    );
}

#[test]
fn criterion_04_variance_oracles() {
    let start = Instant::now();
    let outcome = check_variance_oracles(100);
    let elapsed = start.elapsed().as_secs_f64();
    report(
        "criterion 4 (variance estimators match literal-loop oracles)",
        outcome.passed && elapsed < 60.0,
        &format!("{} in {elapsed:.1}s (cap 60s)", outcome.detail),
    );
}

fn study_config(omega: [f64; 2]) -> DgpConfig {
    DgpConfig {
        n: 500,
        judges: 30,
        clusters: [30, 30],
        gamma: [2.0, 2.0],
        gamma_judges: 2.0,
        omega,
        rho: 0.5,
        weights: [1.0 / 3.0, 1.0 / 3.0],
        beta: 0.0,
        factor_variance: 9.0,
        ridge: 0.01,
        replications: 1000,
        seed: 20240101,
    }
}

fn stat<'a>(summary: &'a McSummary, label: &str) -> &'a mdjive::EstimatorSummary {
    summary
        .estimators
        .iter()
        .find(|e| e.label == label)
        .unwrap_or_else(|| panic!("estimator {label} missing from summary"))
}

#[test]
fn criterion_05_monte_carlo_fe_capturable_clustering() {
    let summary = monte_carlo(&study_config([0.0, 0.0]), &study_estimators()).unwrap();
    let tsls = stat(&summary, "2sls");
    let jive = stat(&summary, "jive");
    let cjive = stat(&summary, "cjive");
    let fe_jive = stat(&summary, "fe_jive");
    let fe_cjive = stat(&summary, "fe_cjive");
    let md = stat(&summary, "md_cjive");

    let fe_medians_near_zero =
        fe_jive.median_bias.abs() < 0.02 && fe_cjive.median_bias.abs() < 0.02;
    let ordering = tsls.median > jive.median && jive.median > cjive.median && cjive.median > 0.0;
    let dispersion = fe_jive.iqr <= 1.1 * fe_cjive.iqr && fe_cjive.iqr <= 1.1 * md.iqr;
    report(
        "criterion 5 (both dimensions fully FE-capturable, 1000 reps)",
        fe_medians_near_zero && ordering && dispersion,
        &format!(
            "medians 2sls {:.4} > jive {:.4} > cjive {:.4} > 0; |fe_jive| {:.4}, |fe_cjive| {:.4} < 0.02; \
             IQR fe_jive {:.4} ≤ 1.1·fe_cjive {:.4} ≤ 1.1²·md {:.4}",
            tsls.median,
            jive.median,
            cjive.median,
            fe_jive.median_bias.abs(),
            fe_cjive.median_bias.abs(),
            fe_jive.iqr,
            fe_cjive.iqr,
            md.iqr
        ),
    );
}

#[test]
fn criterion_06_monte_carlo_mixed_clustering() {
    let summary = monte_carlo(&study_config([0.0, 1.0]), &study_estimators()).unwrap();
    let fe_jive = stat(&summary, "fe_jive");
    let fe_cjive = stat(&summary, "fe_cjive");
    let passed = fe_cjive.median_bias.abs() < 0.02
        && fe_jive.median_bias.abs() > fe_cjive.median_bias.abs();
    report(
        "criterion 6 (second dimension not FE-capturable, 1000 reps)",
        passed,
        &format!(
            "|median(fe_cjive)| {:.4} < 0.02 and |median(fe_jive)| {:.4} exceeds it",
            fe_cjive.median_bias.abs(),
            fe_jive.median_bias.abs()
        ),
    );
}

#[test]
fn criterion_07_monte_carlo_general_clustering() {
    let summary = monte_carlo(&study_config([1.0, 1.0]), &study_estimators()).unwrap();
    let md = stat(&summary, "md_cjive");
    let others = ["2sls", "jive", "cjive", "fe_jive", "fe_cjive"];
    let md_bias = md.median_bias.abs();
    let all_larger = others
        .iter()
        .all(|label| stat(&summary, label).median_bias.abs() > md_bias);
    let detail = others
        .iter()
        .map(|l| format!("{l} {:.4}", stat(&summary, l).median_bias.abs()))
        .collect::<Vec<_>>()
        .join(", ");
    report(
        "criterion 7 (neither dimension FE-capturable, 1000 reps)",
        all_larger,
        &format!("|median bias| md_cjive {md_bias:.4} vs {detail}"),
    );
}

#[test]
fn criterion_08_within_cluster_instrument_scenario() {
    let outcome = check_degenerate_scenario(2000, 100, 0.05);
    report(
        "criterion 8 (one instrument per cluster with within-cluster variation)",
        outcome.passed,
        &outcome.detail,
    );
}

#[test]
fn criterion_09_judge_level_clustering_degeneracy() {
    let mut all_md_fail = true;
    let mut all_fe_fail = true;
    for seed in 0..20u64 {
        let mut rng = ChaCha20Rng::seed_from_u64(0x9_0000 + seed);
        let n = rng.gen_range(30..=80);
        let judge_count = rng.gen_range(4..=8);
        let keys: Vec<usize> = (0..n)
            .map(|i| if i < judge_count { i } else { rng.gen_range(0..judge_count) })
            .collect();
        let judges = GroupedLabels::from_keys(&keys).unwrap();
        let judge_dim = judges.clone();
        let x = DMatrix::from_fn(n, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let data = JudgeDesignData::new(
            y,
            x,
            judges,
            DMatrix::zeros(n, 0),
            MultiwayClustering::new(vec![judge_dim]).unwrap(),
        )
        .unwrap();
        let md_failed = matches!(
            md_cjive(&data, &[]),
            Err(e) if e.is_identification_failure()
        );
        let fe_failed = matches!(
            fe_cjive(&data, &FeSpec::dims(&[0]), GeneralDim::CaseLevel),
            Err(e) if e.is_identification_failure()
        );
        all_md_fail &= md_failed;
        all_fe_fail &= fe_failed;
    }
    report(
        "criterion 9 (judge-level clustering yields identification failures)",
        all_md_fail && all_fe_fail,
        "md_cjive and judge-FE fe_cjive fail identification on all 20 instances",
    );
}

/// The replication criterion needs the original (proprietary) datasets. When
/// the environment names them, the pinned coefficient columns are checked to
/// ±1e-3; otherwise the conditional is vacuously satisfied and the
/// serialization-fidelity half (the dataset round trip) is exercised.
#[test]
fn criterion_10_replication_tables_when_data_supplied() {
    let dts = std::env::var_os("MDJIVE_DTS_DATA");
    let adh = std::env::var_os("MDJIVE_ADH_DATA");
    if dts.is_none() && adh.is_none() {
        round_trip_is_bit_exact();
        report(
            "criterion 10 (replication tables)",
            true,
            "conditional: no replication datasets supplied (set MDJIVE_DTS_DATA / \
             MDJIVE_ADH_DATA); dataset round trip verified bit-exact instead",
        );
        return;
    }
    if let Some(dir) = dts {
        let expected = [-0.0997, -0.1059, -0.1434, -0.1057];
        run_replication(&dir, &expected, "electronic-monitoring study");
    }
    if let Some(dir) = adh {
        let expected = [-0.1996, -0.1805, -0.1274];
        run_replication(&dir, &expected, "nonprosecution study");
    }
}

/// Cumulative MD CJIVE column on a supplied replication dataset: the
/// schema's cluster declarations are taken in order, with one dimension
/// added per table row.
fn run_replication(dir: &std::ffi::OsStr, expected: &[f64], label: &str) {
    use std::path::PathBuf;
    let dir = PathBuf::from(dir);
    let schema_text = std::fs::read_to_string(dir.join("schema.txt"))
        .expect("replication directory must hold schema.txt");
    let schema = mdjive::ingest::Schema::parse(&schema_text).unwrap();
    let loaded = mdjive::ingest::load_dataset(&dir.join("data.csv"), &schema).unwrap();
    let mut passed = true;
    let mut details = Vec::new();
    for (step, &target) in expected.iter().enumerate() {
        let active: Vec<usize> = (0..=step).collect();
        let est = md_cjive(&loaded.data, &active).unwrap();
        let gap = (est.beta_scalar() - target).abs();
        passed &= gap <= 1e-3;
        details.push(format!("step {}: {:.4} vs {target}", step + 1, est.beta_scalar()));
    }
    report(
        &format!("criterion 10 ({label})"),
        passed,
        &details.join("; "),
    );
}

/// `dgp`-written CSV re-loaded and re-estimated must reproduce the in-memory
/// estimates bit for bit.
fn round_trip_is_bit_exact() {
    let config = DgpConfig {
        n: 200,
        judges: 12,
        clusters: [10, 10],
        replications: 1,
        seed: 515,
        ..Default::default()
    };
    let pi = mdjive::draw_coefficients(&config);
    let generated = mdjive::generate(&config, &pi, 0).unwrap();
    let dim_names = vec!["cluster1".to_string(), "cluster2".to_string()];
    let dir = std::env::temp_dir().join("mdjive_roundtrip_test");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("data.csv");
    mdjive::ingest::write_dataset(&generated.data, &dim_names, &path).unwrap();
    let schema = mdjive::ingest::generated_schema(&generated.data, &dim_names);
    let loaded = mdjive::ingest::load_dataset(&path, &schema).unwrap();

    let mem = md_cjive(&generated.data, &[]).unwrap().beta_scalar();
    let disk = md_cjive(&loaded.data, &[]).unwrap().beta_scalar();
    assert_eq!(mem.to_bits(), disk.to_bits(), "md_cjive round trip");
    let mem = mdjive::cjive(&generated.data, 0).unwrap().beta_scalar();
    let disk = mdjive::cjive(&loaded.data, 0).unwrap().beta_scalar();
    assert_eq!(mem.to_bits(), disk.to_bits(), "cjive round trip");
}

#[test]
fn criterion_11_consistency_trend() {
    let small = DgpConfig {
        n: 500,
        replications: 500,
        omega: [1.0, 1.0],
        seed: 20240111,
        ..study_config([1.0, 1.0])
    };
    let large = DgpConfig {
        n: 2000,
        ..small.clone()
    };

    let median_abs_dev = |config: &DgpConfig| -> f64 {
        use rayon::prelude::*;
        let pi = mdjive::draw_coefficients(config);
        let mut devs: Vec<f64> = (0..config.replications as u64)
            .into_par_iter()
            .filter_map(|rep| {
                let g = mdjive::generate(config, &pi, rep).unwrap();
                md_cjive(&g.data, &[])
                    .ok()
                    .map(|r| (r.beta_scalar() - config.beta).abs())
            })
            .collect();
        devs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        mdjive::simulation::quantile(&devs, 0.5)
    };
    let dev_small = median_abs_dev(&small);
    let dev_large = median_abs_dev(&large);
    report(
        "criterion 11 (median deviation shrinks from n=500 to n=2000)",
        dev_large < dev_small,
        &format!("median |β̂ − β|: {dev_small:.4} at n=500 vs {dev_large:.4} at n=2000"),
    );
}
