//! Jackknife instrumental-variable estimators for judge designs with
//! multidimensionally clustered data.
//!
//! Judge designs instrument an endogenous decision with the identity of a
//! randomly assigned decision-maker. With many judges the instrument
//! projection puts nonnegligible weight on own- and within-cluster error
//! products, biasing 2SLS. The estimators here remove those terms:
//!
//! - [`estimators::jive`] zeroes the projection diagonal;
//! - [`estimators::cjive`] zeroes within-cluster entries for one clustering
//!   dimension (equivalent to 2SLS on a leave-out mean instrument, up to
//!   weighting);
//! - [`estimators::md_cjive`] zeroes entries for pairs sharing a cluster in
//!   any of several dimensions;
//! - [`fe::fe_jive`] and [`fe::fe_cjive`] remove fixed-effect controls
//!   through a solved diagonal (ϑ) or per-cluster block (H) adjustment, so
//!   projecting out numerous controls does not reintroduce bias.
//!
//! [`variance`] holds sandwich variance estimators for the MD CJIVE and
//! FE CJIVE, [`simulation`] a clustered data-generating process with a
//! deterministic parallel Monte-Carlo harness, [`ingest`] schema-driven CSV
//! loading and [`selfcheck`] oracle-gated verification suites.

pub mod data;
pub mod error;
pub mod estimators;
pub mod fe;
pub mod ingest;
pub(crate) mod linalg;
pub mod projections;
pub mod selfcheck;
pub mod simulation;
pub mod variance;

pub use data::{
    prune_controls, GroupedLabels, JudgeDesignData, MaskKind, MultiwayClustering, SelectionMask,
};
pub use error::{DataError, EstimationError, IdentificationFailureKind};
pub use estimators::{
    cjive, iv_kernel, jive, leave_out_tsls, md_cjive, tsls, Diagnostics, EstimateResult,
    EstimatorTag, LeaveOutWeighting,
};
pub use fe::{
    fe_cjive, fe_jive, solve_block_h, solve_vartheta, FeAdjustment, FeSpec, GeneralDim,
    HSolveOptions,
};
pub use projections::{
    annihilate, jackknife, judge_projection, leave_out_instrument, projection_from_columns,
    LeaveOutInstrument, ProjectionKit, ProjectionVariant,
};
pub use simulation::{
    cluster_sizes, draw_coefficients, generate, monte_carlo, study_estimators, DgpConfig,
    EstimatorSpec, EstimatorSummary, GeneratedData, McSummary, ScenarioConfig,
};
pub use variance::{
    fe_cjive_variance, md_cjive_variance, VarianceMethod, VarianceOptions, VarianceResult,
};
