//! mdjive — jackknife IV estimation for clustered judge designs.
//!
//! Subcommands: `dgp` (write a synthetic dataset), `simulate` (Monte-Carlo
//! study), `estimate` (CSV estimation with cumulative clustering
//! declarations) and `check` (self-verification suites).
//!
//! Exit codes: 0 ok, 2 input error, 3 estimation infeasible, 4 check failure.

mod config;
mod estimate;
mod report;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use mdjive::ingest::{load_dataset, write_dataset, Schema};
use mdjive::selfcheck;
use mdjive::{draw_coefficients, generate, monte_carlo, study_estimators, EstimatorSpec};

#[derive(Parser)]
#[command(name = "mdjive")]
#[command(about = "Jackknife IV estimators for judge designs with multiway clustered data")]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    command: Commands,
}

#[derive(Subcommand)]
enum Commands {
    /// Generate one synthetic dataset and write it as CSV
    Dgp(DgpArgs),
    /// Run a Monte-Carlo study and write the summary (JSON or CSV)
    Simulate(SimulateArgs),
    /// Estimate coefficients from a CSV dataset
    Estimate(EstimateArgs),
    /// Run the self-verification suites
    Check(CheckArgs),
}

#[derive(Args)]
struct DgpArgs {
    /// Plain-text key=value configuration file
    #[arg(long)]
    config: PathBuf,
    /// Output CSV path
    #[arg(long)]
    out: PathBuf,
    /// Replication index to materialize
    #[arg(long, default_value_t = 0)]
    rep: u64,
    /// Also write a schema file matching the emitted CSV
    #[arg(long)]
    schema_out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Plain-text key=value configuration file
    #[arg(long)]
    config: PathBuf,
    /// Estimators to run (comma list of
    /// 2sls,jive,cjive,leave_out,fe_jive,fe_cjive,md_cjive); the six study
    /// estimators when omitted
    #[arg(long)]
    estimators: Option<String>,
    /// Override the configured replication count
    #[arg(long)]
    reps: Option<usize>,
    /// Override the configured seed
    #[arg(long)]
    seed: Option<u64>,
    /// Output path; format by extension (.json or .csv), stdout JSON when
    /// omitted
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EstimateArgs {
    /// Input dataset CSV
    #[arg(long)]
    data: PathBuf,
    /// Schema file mapping columns to roles
    #[arg(long)]
    schema: PathBuf,
    /// Ordered clustering declarations, e.g.
    /// `individual:leaveout,district:se,crime:fe`
    #[arg(long)]
    dims: String,
    /// Estimators to report (default md_cjive,fe_cjive)
    #[arg(long, default_value = "md_cjive,fe_cjive")]
    estimators: String,
    /// Append a row removing every control column through the FE CJIVE
    #[arg(long, default_value_t = false)]
    all_controls: bool,
    /// Output CSV path (stdout when omitted)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CheckArgs {
    /// Trim the instance counts for a quick smoke run
    #[arg(long, default_value_t = false)]
    fast: bool,
}

enum Failure {
    Input(anyhow::Error),
    Estimation(mdjive::EstimationError),
    Check(usize),
}

impl Failure {
    fn report(&self) -> (u8, String, String) {
        match self {
            Failure::Input(e) => (2, "input_error".into(), format!("{e:#}")),
            Failure::Estimation(e) => (3, e.code().into(), e.to_string()),
            Failure::Check(n) => (4, "check_failure".into(), format!("{n} check(s) failed")),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Input(e)
    }
}

impl From<mdjive::DataError> for Failure {
    fn from(e: mdjive::DataError) -> Self {
        Failure::Input(anyhow::Error::new(e))
    }
}

impl From<mdjive::EstimationError> for Failure {
    fn from(e: mdjive::EstimationError) -> Self {
        Failure::Estimation(e)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Commands::Dgp(args) => run_dgp(args),
        Commands::Simulate(args) => run_simulate(args),
        Commands::Estimate(args) => run_estimate_cmd(args),
        Commands::Check(args) => run_check(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            let (code, tag, message) = failure.report();
            eprintln!("error[{tag}]: {message}");
            ExitCode::from(code)
        }
    }
}

fn read_to_string(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(Failure::Input)
}

fn run_dgp(args: DgpArgs) -> Result<(), Failure> {
    let config = config::dgp_config(&read_to_string(&args.config)?)?;
    config.validate()?;
    let pi = draw_coefficients(&config);
    let generated = generate(&config, &pi, args.rep)?;
    let dim_names = vec!["cluster1".to_string(), "cluster2".to_string()];
    write_dataset(&generated.data, &dim_names, &args.out)?;
    if let Some(schema_path) = &args.schema_out {
        // Matches the column layout emitted by write_dataset.
        let text = "outcome = y\ntreatment = x\njudge = judge\ncluster = cluster1:cluster1,cluster2:cluster2\n";
        fs::write(schema_path, text)
            .with_context(|| format!("writing {}", schema_path.display()))?;
    }
    println!(
        "wrote {} cases ({} judges, seed {}, replication {}) to {}",
        generated.data.n(),
        generated.data.judge_count(),
        config.seed,
        args.rep,
        args.out.display()
    );
    Ok(())
}

fn parse_simulate_estimators(spec: &str) -> Result<Vec<EstimatorSpec>, Failure> {
    let mut out = Vec::new();
    for name in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        out.push(match name {
            "2sls" | "tsls" => EstimatorSpec::Tsls,
            "jive" => EstimatorSpec::Jive,
            "cjive" => EstimatorSpec::Cjive { dim: 0 },
            "leave_out" | "leaveout" => EstimatorSpec::LeaveOut { dim: 0 },
            "fe_jive" => EstimatorSpec::FeJive {
                fe_dims: vec![0, 1],
            },
            "fe_cjive" => EstimatorSpec::FeCjive {
                fe_dims: vec![0],
                general_dim: 1,
            },
            "md_cjive" => EstimatorSpec::MdCjive { dims: vec![] },
            other => {
                return Err(Failure::Input(anyhow::anyhow!(
                    "unknown estimator `{other}`"
                )))
            }
        });
    }
    if out.is_empty() {
        return Err(Failure::Input(anyhow::anyhow!(
            "--estimators must name at least one estimator"
        )));
    }
    Ok(out)
}

fn run_simulate(args: SimulateArgs) -> Result<(), Failure> {
    let mut config = config::dgp_config(&read_to_string(&args.config)?)?;
    if let Some(reps) = args.reps {
        config.replications = reps;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let estimators = match &args.estimators {
        Some(spec) => parse_simulate_estimators(spec)?,
        None => study_estimators(),
    };
    let summary = monte_carlo(&config, &estimators)?;
    let rendered_csv;
    let rendered_json;
    let (path, content): (Option<&Path>, &str) = match &args.out {
        Some(path) if path.extension().is_some_and(|e| e == "csv") => {
            rendered_csv = report::summary_to_csv(&summary);
            (Some(path), &rendered_csv)
        }
        Some(path) => {
            rendered_json = report::summary_to_json(&summary);
            (Some(path), &rendered_json)
        }
        None => {
            rendered_json = report::summary_to_json(&summary);
            (None, &rendered_json)
        }
    };
    match path {
        Some(path) => {
            fs::write(path, content).with_context(|| format!("writing {}", path.display()))?;
            println!(
                "simulated {} replications over {} estimators into {}",
                summary.replications,
                summary.estimators.len(),
                path.display()
            );
        }
        None => print!("{content}"),
    }
    Ok(())
}

fn run_estimate_cmd(args: EstimateArgs) -> Result<(), Failure> {
    let schema = Schema::parse(&read_to_string(&args.schema)?)?;
    let loaded = load_dataset(&args.data, &schema)?;
    let dims = estimate::parse_dims(&args.dims, &loaded.cluster_names)?;
    let estimators = estimate::EstimatorChoice::parse_list(&args.estimators)?;
    let rows = estimate::run_estimate(&loaded, &schema, &dims, &estimators, args.all_controls);
    let csv = estimate::rows_to_csv(&rows);
    match &args.out {
        Some(path) => {
            fs::write(path, &csv).with_context(|| format!("writing {}", path.display()))?;
            let failures = rows.iter().filter(|r| r.outcome.is_err()).count();
            println!(
                "estimated {} row(s) ({} failures) from {} cases into {}",
                rows.len(),
                failures,
                loaded.data.n(),
                path.display()
            );
            if loaded.rows_dropped > 0 {
                println!(
                    "note: {} row(s) with missing required values were rejected",
                    loaded.rows_dropped
                );
            }
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn run_check(args: CheckArgs) -> Result<(), Failure> {
    let outcomes = selfcheck::run_all(args.fast);
    let mut failed = 0usize;
    for outcome in &outcomes {
        let status = if outcome.passed { "PASS" } else { "FAIL" };
        println!("[{status}] {}: {}", outcome.name, outcome.detail);
        if !outcome.passed {
            failed += 1;
        }
    }
    if failed > 0 {
        Err(Failure::Check(failed))
    } else {
        Ok(())
    }
}
