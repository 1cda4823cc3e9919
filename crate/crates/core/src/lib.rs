//! Numerical lab for the variational formula
//! `log E[e^{F(B)}] = sup_v E[F(B + ∫v) − ½ ∫|v|²]`
//! on finite-dimensional (cylinder) Wiener functionals.
//!
//! Paths are sampled on a [`TimeGrid`] with an Euler scheme. Estimators take a
//! [`PathSource`] so the same code runs on small batches and on streamed
//! million-path samples, and every stochastic value is reproducible from its seed.

pub mod drift_opt;
pub mod error;
pub mod follmer;
pub mod functionals;
pub mod gaussian;
pub mod ou_gaussian;
pub mod params;
pub mod paths;
pub mod policy;
pub mod quadrature;
pub mod rng;
pub mod stats;
pub mod variational;

pub use drift_opt::{
    compare_to_oracle, optimize, random_clamped_policy, FamilyKind, GradientMethod, OptConfig,
    OptTrace, OracleComparison, ParametricPolicy, PolicyFamily,
};
pub use error::{Error, Result};
pub use follmer::{
    entropy_bound_check, entropy_identity_check, follmer_drift, terminal_entropy,
    zero_variance_check, DriftForm, EntropyBoundReport, EntropyIdentityReport, EntropyMethod,
    FollmerPolicy, RelEntropyResult, ZeroVarianceReport,
};
pub use functionals::{
    catalog, catalog_entries, check_integrability, evaluate, parse_functional, truncate,
    CatalogEntry, CylinderFunctional, IntegrabilityReport, OptimalDrift, Oracle, TailConfig,
    TruncationSpec,
};
pub use gaussian::{marginal_entropy, GaussianLaw};
pub use ou_gaussian::{
    conditional_g, ehc_check, field_catalog, field_entries, lsi_check, ou_apply, parse_field,
    rehc_check, rehc_grid, rescale_path, EhcReport, LsiReport, RehcReport, ScalarField,
};
pub use paths::{
    action_norm_sq, apply_drift, drive, girsanov_log_weight, sample_brownian, AffineDrift,
    BrownianStream, DriftPolicy, PathBatch, PathKind, PathSource, TimeGrid,
};
pub use policy::{
    AffineFeedback, Clamped, ConstantPolicy, PiecewiseConstant, PolicySpec, ZeroPolicy,
};
pub use quadrature::GaussianQuadrature;
pub use stats::{EstimatorReport, Method};
pub use variational::{
    duality_gap, dv_bound, estimate_lhs, estimate_lhs_quadrature, estimate_rhs, lhs_with,
    truncation_sweep, DvReport, GapReport, LhsMethod, SweepRow,
};
