//! Maps each subcommand onto core operations and declares its checks.

use std::sync::Arc;
use std::time::Instant;

use bdlab_core::rng::{derive_seed, stream};
use bdlab_core::{
    compare_to_oracle, duality_gap, dv_bound, ehc_check, entropy_bound_check,
    entropy_identity_check, lhs_with, lsi_check, optimize, parse_field, parse_functional,
    rehc_check, rehc_grid, truncation_sweep, zero_variance_check, BrownianStream,
    CylinderFunctional, DriftForm, DriftPolicy, GaussianQuadrature, LhsMethod, PolicyFamily,
    PolicySpec, TimeGrid, TruncationSpec,
};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::record::{Check, RunRecord, Table, ARTIFACT_VERSION};
use crate::suite;

/// Agreement required between the last finite truncation level and the limit.
pub const SWEEP_LIMIT_TOL: f64 = 1e-6;

#[derive(Debug, Default)]
pub struct Outcome {
    pub results: Value,
    pub tables: Vec<Table>,
    pub checks: Vec<Check>,
    /// Extra files for the run directory, `(name, contents)`.
    pub files: Vec<(String, String)>,
}

fn to_value<T: Serialize>(v: &T) -> Result<Value, CliError> {
    Ok(serde_json::to_value(v)?)
}

pub(crate) fn functional(cfg: &ExperimentConfig) -> Result<CylinderFunctional, CliError> {
    Ok(parse_functional(&cfg.functional)?)
}

pub(crate) fn grid_for(
    cfg: &ExperimentConfig,
    f: &CylinderFunctional,
) -> Result<Arc<TimeGrid>, CliError> {
    let horizon = f.marks().iter().copied().fold(cfg.horizon, f64::max);
    Ok(Arc::new(TimeGrid::new(horizon, cfg.steps, f.marks())?))
}

/// Brownian paths for stream `index` of the config's master seed.
pub(crate) fn paths(
    cfg: &ExperimentConfig,
    grid: Arc<TimeGrid>,
    dim: usize,
    index: u64,
) -> Result<BrownianStream, CliError> {
    Ok(BrownianStream::new(
        grid,
        dim,
        cfg.n,
        derive_seed(cfg.seed, stream::PATHS, index),
    )?)
}

fn lhs_method(cfg: &ExperimentConfig) -> Result<LhsMethod, CliError> {
    cfg.lhs_method
        .parse()
        .map_err(|e: bdlab_core::Error| CliError::Config(e.to_string()))
}

fn drift_form(cfg: &ExperimentConfig) -> Result<DriftForm, CliError> {
    cfg.drift_form
        .parse()
        .map_err(|e: bdlab_core::Error| CliError::Config(e.to_string()))
}

fn policy(
    cfg: &ExperimentConfig,
    f: &CylinderFunctional,
) -> Result<Arc<dyn DriftPolicy>, CliError> {
    let spec = PolicySpec::parse(&cfg.policy).map_err(|e| CliError::Config(e.to_string()))?;
    Ok(spec.build(f)?)
}

/// `n_se · se + abs`, floored by the deterministic tolerance so that
/// zero-variance estimators are not failed on rounding.
fn band(cfg: &ExperimentConfig, se: f64) -> f64 {
    cfg.tolerance.n_se * se + cfg.tolerance.abs + cfg.tolerance.exact
}

/// Runs the experiment named in the config.
pub fn execute(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    cfg.validate()?;
    match cfg.experiment.as_str() {
        "lhs" => lhs(cfg),
        "rhs" => rhs(cfg),
        "gap" => gap(cfg),
        "optimize" => optimize_exp(cfg),
        "follmer" => follmer(cfg),
        "entropy" => entropy(cfg),
        "truncation-sweep" => sweep(cfg),
        "ou-ehc" => ehc(cfg),
        "ou-rehc" => rehc(cfg),
        "lsi" => lsi(cfg),
        "suite" => suite_exp(cfg),
        other => Err(CliError::Config(format!("unknown experiment {other:?}"))),
    }
}

/// Runs the experiment on a pool of `threads` workers (0 = rayon default)
/// and wraps the outcome in a record. Module errors are recorded, not raised.
pub fn run(
    cfg: &ExperimentConfig,
    threads: usize,
) -> Result<(RunRecord, Vec<(String, String)>), CliError> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    let started_at = chrono::Utc::now().to_rfc3339();
    let clock = Instant::now();
    let result = pool.install(|| execute(cfg));
    let wall_clock_secs = clock.elapsed().as_secs_f64();
    let (outcome, error) = match result {
        Ok(o) => (o, None),
        Err(CliError::Config(msg)) => return Err(CliError::Config(msg)),
        Err(e) => (Outcome::default(), Some(e.to_string())),
    };
    let mut record = RunRecord {
        version: ARTIFACT_VERSION.to_string(),
        experiment: cfg.experiment.clone(),
        config_hash: cfg.hash8(),
        config: cfg.clone(),
        started_at,
        wall_clock_secs,
        threads: pool.current_num_threads(),
        results: outcome.results,
        tables: outcome.tables,
        checks: outcome.checks,
        passed: false,
        error,
    };
    record.passed = record.recompute_passed();
    Ok((record, outcome.files))
}

fn lhs(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let f = functional(cfg)?;
    let base = paths(cfg, grid_for(cfg, &f)?, f.dim(), 0)?;
    let report = lhs_with(&f, &base, lhs_method(cfg)?)?;
    let mut checks = Vec::new();
    if let Some(exact) = f.log_mgf() {
        let tol = band(cfg, report.std_error);
        checks.push(Check::within(
            "lhs_matches_closed_form",
            report.value,
            exact,
            tol,
        ));
    }
    Ok(Outcome {
        results: json!({ "functional": f.spec(), "lhs": report, "closed_form": f.log_mgf() }),
        checks,
        ..Outcome::default()
    })
}

fn rhs(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let f = functional(cfg)?;
    let v = policy(cfg, &f)?;
    let base = paths(cfg, grid_for(cfg, &f)?, f.dim(), 0)?;
    let report = bdlab_core::estimate_rhs(&f, v.as_ref(), &base)?;
    let mut checks = Vec::new();
    if let Some(exact) = f.log_mgf() {
        checks.push(Check::at_most(
            "rhs_below_lhs",
            report.value,
            exact + band(cfg, report.std_error),
        ));
    }
    Ok(Outcome {
        results: json!({ "functional": f.spec(), "policy": v.label(), "rhs": report }),
        checks,
        ..Outcome::default()
    })
}

fn gap(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let f = functional(cfg)?;
    let v = policy(cfg, &f)?;
    let base = paths(cfg, grid_for(cfg, &f)?, f.dim(), 0)?;
    let report = duality_gap(&f, v.as_ref(), &base, lhs_method(cfg)?)?;
    let mut checks = vec![Check::at_least(
        "weak_duality",
        report.gap,
        -band(cfg, report.gap_se),
    )];
    if let Some(max) = cfg.tolerance.max_gap {
        checks.push(Check::at_most(
            "gap_below_max",
            report.gap,
            max + band(cfg, report.gap_se),
        ));
    }
    Ok(Outcome {
        results: json!({ "functional": f.spec(), "policy": v.label(), "gap": report }),
        checks,
        ..Outcome::default()
    })
}

fn optimize_exp(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let f = functional(cfg)?;
    let grid = grid_for(cfg, &f)?;
    let family = PolicyFamily::parse(&cfg.family, f.dim(), grid.horizon())
        .map_err(|e| CliError::Config(e.to_string()))?;
    let opt = bdlab_core::OptConfig {
        seed: cfg.seed,
        ..cfg.opt.clone()
    };
    let (best, trace) = optimize(&f, &family, grid.clone(), &opt)?;
    let eval = paths(cfg, grid, f.dim(), 1)?;
    let comparison = compare_to_oracle(&f, &best, &eval).ok();

    let initial = trace.initial_objective().clone();
    let best_obj = trace.best_objective().clone();
    let mut checks = vec![Check::at_least(
        "heldout_not_worse",
        best_obj.value,
        initial.value,
    )];
    if let Some(c) = &comparison {
        checks.push(Check::at_least(
            "weak_duality",
            c.policy.gap,
            -band(cfg, c.policy.gap_se),
        ));
        if let Some(max) = cfg.tolerance.max_gap {
            checks.push(Check::at_most(
                "gap_below_max",
                c.policy.gap,
                max + band(cfg, c.policy.gap_se),
            ));
        }
    }

    let mut table = Table::new("heldout", &["iteration", "objective", "std_error"]);
    for h in &trace.heldout {
        table.push(vec![
            h.iteration as f64,
            h.objective.value,
            h.objective.std_error,
        ]);
    }
    let mut jsonl = String::new();
    for it in &trace.iterations {
        let mut v = to_value(it)?;
        v["type"] = json!("iteration");
        jsonl.push_str(&v.to_string());
        jsonl.push('\n');
    }
    for h in &trace.heldout {
        let mut v = to_value(h)?;
        v["type"] = json!("heldout");
        jsonl.push_str(&v.to_string());
        jsonl.push('\n');
    }
    Ok(Outcome {
        results: json!({
            "functional": f.spec(),
            "family": family,
            "gradient": trace.gradient,
            "n_params": trace.n_params,
            "best_iteration": trace.best_iteration,
            "best_theta": trace.best_theta,
            "initial_heldout": initial,
            "best_heldout": best_obj,
            "evaluation": comparison,
        }),
        tables: vec![table],
        checks,
        files: vec![("trace.jsonl".into(), jsonl)],
    })
}

fn follmer(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let f = functional(cfg)?;
    let form = drift_form(cfg)?;
    let base = paths(cfg, grid_for(cfg, &f)?, f.dim(), 0)?;
    let identity = entropy_identity_check(&f, &base, form)?;
    let zero_var = zero_variance_check(&f, &base, form)?;
    let checks = vec![Check::within(
        "entropy_identity",
        identity.diff,
        0.0,
        band(cfg, identity.diff_se),
    )];
    Ok(Outcome {
        results: json!({ "functional": f.spec(), "identity": identity, "zero_variance": zero_var }),
        checks,
        ..Outcome::default()
    })
}

fn entropy(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let f = functional(cfg)?;
    let v = policy(cfg, &f)?;
    let base = paths(cfg, grid_for(cfg, &f)?, f.dim(), 0)?;
    let bound = entropy_bound_check(v.as_ref(), &base, f.marks())?;
    let dv = dv_bound(&f, v.as_ref(), &base, lhs_method(cfg)?)?;
    let checks = vec![
        Check::at_least("entropy_bound", bound.slack, -band(cfg, bound.slack_se)),
        Check::at_least("donsker_varadhan", dv.slack, -band(cfg, dv.slack_se)),
    ];
    Ok(Outcome {
        results: json!({ "functional": f.spec(), "policy": v.label(), "bound": bound, "dv": dv }),
        checks,
        ..Outcome::default()
    })
}

fn sweep(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let f = functional(cfg)?;
    let v = policy(cfg, &f)?;
    let base = paths(cfg, grid_for(cfg, &f)?, f.dim(), 0)?;
    let cap = match cfg.truncation.as_str() {
        "cap" => true,
        "floor" => false,
        other => {
            return Err(CliError::Config(format!(
                "truncation must be cap or floor, got {other:?}"
            )))
        }
    };
    let mut specs: Vec<TruncationSpec> = cfg
        .levels
        .iter()
        .map(|&l| {
            if cap {
                TruncationSpec::cap(l)
            } else {
                TruncationSpec::floor(l)
            }
        })
        .collect();
    specs.push(TruncationSpec::none());
    let rows = truncation_sweep(&f, &specs, Some(&base), Some(v.as_ref()), lhs_method(cfg)?)?;

    let mut table = Table::new("sweep", &["level", "lhs", "lhs_se", "rhs", "rhs_se"]);
    for (row, spec) in rows.iter().zip(&specs) {
        let level = spec.upper.or(spec.lower).unwrap_or(f64::INFINITY);
        let (r, rse) = row
            .rhs
            .as_ref()
            .map_or((f64::NAN, f64::NAN), |r| (r.value, r.std_error));
        table.push(vec![level, row.lhs.value, row.lhs.std_error, r, rse]);
    }
    let lhs: Vec<f64> = rows.iter().map(|r| r.lhs.value).collect();
    let finite = &lhs[..lhs.len() - 1];
    let limit = lhs[lhs.len() - 1];
    let mut checks = Vec::new();
    if cap {
        checks.push(Check::holds(
            "strictly_increasing",
            finite.windows(2).all(|w| w[1] > w[0]),
        ));
    } else {
        checks.push(Check::holds(
            "nonincreasing",
            lhs.windows(2).all(|w| w[1] <= w[0]),
        ));
    }
    if let Some(&last) = finite.last() {
        checks.push(Check::within(
            "last_level_near_limit",
            last,
            limit,
            SWEEP_LIMIT_TOL,
        ));
    }
    Ok(Outcome {
        results: json!({ "functional": f.spec(), "policy": v.label(), "truncation": cfg.truncation, "rows": rows }),
        tables: vec![table],
        checks,
        ..Outcome::default()
    })
}

/// `3 · 2^{−k}`, `k = 0..7`: eight points over `(0, 3]`.
pub fn ehc_times() -> Vec<f64> {
    (0..8).map(|k| 3.0 * 0.5f64.powi(k)).collect()
}

fn ehc(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let field = parse_field(&cfg.field).map_err(|e| CliError::Config(e.to_string()))?;
    let quad = GaussianQuadrature::standard(field.dim())?;
    let times = if cfg.times.is_empty() {
        ehc_times()
    } else {
        cfg.times.clone()
    };
    let mut table = Table::new("ehc", &["t", "lhs_norm", "rhs_norm", "deficit"]);
    let mut checks = Vec::new();
    let mut reports = Vec::new();
    for &t in &times {
        let r = ehc_check(&field, t, &quad)?;
        table.push(vec![t, r.lhs_norm, r.rhs_norm, r.deficit]);
        checks.push(Check::at_least(
            format!("deficit_t={t}"),
            r.deficit,
            -cfg.tolerance.exact,
        ));
        reports.push(r);
    }
    Ok(Outcome {
        results: json!({ "field": field.spec(), "reports": reports }),
        tables: vec![table],
        checks,
        ..Outcome::default()
    })
}

fn rehc(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let field = parse_field(&cfg.field).map_err(|e| CliError::Config(e.to_string()))?;
    let times = if cfg.times.is_empty() {
        vec![0.25, 0.5, 0.75, 1.0]
    } else {
        cfg.times.clone()
    };
    let mut table = Table::new("rehc", &["t", "lhs", "lhs_se", "rhs", "slack", "slack_se"]);
    let mut checks = Vec::new();
    let mut reports = Vec::new();
    for (k, &t) in times.iter().enumerate() {
        let grid = Arc::new(rehc_grid(cfg.steps, t)?);
        let base = paths(cfg, grid, field.dim(), k as u64)?;
        let r = rehc_check(&field, t, &base)?;
        table.push(vec![
            t,
            r.lhs.value,
            r.lhs.std_error,
            r.rhs.value,
            r.slack,
            r.slack_se,
        ]);
        checks.push(Check::at_least(
            format!("slack_t={t}"),
            r.slack,
            -band(cfg, r.slack_se),
        ));
        reports.push(r);
    }
    Ok(Outcome {
        results: json!({ "field": field.spec(), "reports": reports }),
        tables: vec![table],
        checks,
        ..Outcome::default()
    })
}

fn lsi(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let field = parse_field(&cfg.field).map_err(|e| CliError::Config(e.to_string()))?;
    let quad = GaussianQuadrature::standard(field.dim())?;
    let r = lsi_check(&field, &quad)?;
    let checks = vec![Check::at_least("deficit", r.deficit, -cfg.tolerance.exact)];
    Ok(Outcome {
        results: json!({ "field": field.spec(), "lsi": r }),
        checks,
        ..Outcome::default()
    })
}

fn suite_exp(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let outcomes = suite::run_suite(&cfg.suite, cfg.seed)?;
    let mut checks = Vec::new();
    for o in &outcomes {
        for c in &o.checks {
            checks.push(Check {
                name: format!("c{}:{}", o.id, c.name),
                ..c.clone()
            });
        }
        if let Some(e) = &o.error {
            checks.push(Check::holds(format!("c{}:error: {e}", o.id), false));
        }
    }
    Ok(Outcome {
        results: to_value(&outcomes)?,
        checks,
        ..Outcome::default()
    })
}
