//! Run the three simulation-study configurations at a chosen replication
//! count and print per-estimator summaries.
//!
//! Usage: `cargo run --release --example simulation_study -- [reps]`

use mdjive::{monte_carlo, study_estimators, DgpConfig};

fn main() {
    let reps: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(200);
    let cases = [
        ([0.0, 0.0], "both dimensions FE-capturable"),
        ([0.0, 1.0], "second dimension general"),
        ([1.0, 1.0], "both dimensions general"),
    ];
    for (omega, label) in cases {
        let config = DgpConfig {
            omega,
            replications: reps,
            ..Default::default()
        };
        let start = std::time::Instant::now();
        let summary = monte_carlo(&config, &study_estimators()).expect("valid config");
        println!(
            "== ω = {omega:?} ({label}), {reps} replications, {:.1}s",
            start.elapsed().as_secs_f64()
        );
        for e in &summary.estimators {
            println!(
                "  {:<10} used={:<5} failures={:<4} mean={:>8.4} median={:>8.4} iqr={:>7.4}",
                e.label, e.used, e.failures, e.mean, e.median, e.iqr
            );
        }
    }
}
