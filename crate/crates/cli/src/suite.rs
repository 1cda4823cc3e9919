//! The acceptance suite: eleven criteria, each a list of checks against
//! oracles computed here rather than by the module under test.

use std::sync::Arc;
use std::time::Instant;

use bdlab_core::rng::{derive_seed, stream};
use bdlab_core::{
    catalog, compare_to_oracle, duality_gap, ehc_check, entropy_bound_check,
    entropy_identity_check, estimate_lhs_quadrature, estimate_rhs, field_catalog, lsi_check,
    optimize, parse_field, parse_functional, random_clamped_policy, rehc_check, rehc_grid,
    truncation_sweep, zero_variance_check, AffineFeedback, BrownianStream, ConstantPolicy,
    DriftForm, DriftPolicy, GaussianQuadrature, LhsMethod, OptConfig, PolicyFamily, TimeGrid,
    TruncationSpec,
};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::experiments;
use crate::record::Check;

pub const CRITERIA: [(u32, &str); 11] = [
    (1, "formula equality, linear case"),
    (2, "formula equality, quadratic case"),
    (3, "weak duality over random clamped policies"),
    (4, "Föllmer entropy identity"),
    (5, "marginal entropy bound"),
    (6, "zero-variance importance sampling"),
    (7, "truncation monotone convergence"),
    (8, "exponential hypercontractivity"),
    (9, "conditional hypercontractivity"),
    (10, "log-Sobolev inequality"),
    (11, "reproducibility across thread counts"),
];

const N_SE: f64 = 3.0;

#[derive(Debug, Clone, Serialize)]
pub struct CriterionOutcome {
    pub id: u32,
    pub title: String,
    pub checks: Vec<Check>,
    pub details: Value,
    pub error: Option<String>,
    pub seconds: f64,
}

impl CriterionOutcome {
    pub fn passed(&self) -> bool {
        self.error.is_none() && !self.checks.is_empty() && self.checks.iter().all(Check::recompute)
    }

    /// `criterion N: PASS|FAIL (title)`, plus failing checks.
    pub fn summary(&self) -> String {
        let mut s = format!(
            "criterion {}: {} ({}, {:.1}s)",
            self.id,
            if self.passed() { "PASS" } else { "FAIL" },
            self.title,
            self.seconds
        );
        if let Some(e) = &self.error {
            s.push_str(&format!("\n  error: {e}"));
        }
        for c in self.checks.iter().filter(|c| !c.recompute()) {
            s.push_str(&format!(
                "\n  failed {}: value {} vs {:?}",
                c.name, c.value, c.bound
            ));
        }
        s
    }
}

/// Criterion ids named by a suite: `acceptance` or `acceptance:1,4,7`.
pub fn suite_ids(name: &str) -> Result<Vec<u32>, CliError> {
    let all: Vec<u32> = CRITERIA.iter().map(|c| c.0).collect();
    match name.split_once(':') {
        None if name == "acceptance" => Ok(all),
        Some(("acceptance", list)) => list
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<u32>()
                    .ok()
                    .filter(|id| all.contains(id))
                    .ok_or_else(|| CliError::Config(format!("unknown criterion {s:?}")))
            })
            .collect(),
        _ => Err(CliError::Config(format!("unknown suite {name:?}"))),
    }
}

pub fn run_suite(name: &str, seed: u64) -> Result<Vec<CriterionOutcome>, CliError> {
    Ok(suite_ids(name)?
        .into_iter()
        .map(|id| run_criterion(id, seed))
        .collect())
}

pub fn run_criterion(id: u32, seed: u64) -> CriterionOutcome {
    let title = CRITERIA
        .iter()
        .find(|c| c.0 == id)
        .map_or("unknown", |c| c.1)
        .to_string();
    let clock = Instant::now();
    let mut checks = Vec::new();
    let result = match id {
        1 => linear_equality(seed, &mut checks),
        2 => quadratic_equality(seed, &mut checks),
        3 => weak_duality(seed, &mut checks),
        4 => follmer_identity(seed, &mut checks),
        5 => entropy_bound(seed, &mut checks),
        6 => zero_variance(seed, &mut checks),
        7 => truncation(&mut checks),
        8 => ehc(&mut checks),
        9 => rehc(seed, &mut checks),
        10 => lsi(&mut checks),
        11 => reproducibility(seed, &mut checks),
        _ => Err(CliError::Config(format!("unknown criterion {id}"))),
    };
    let (details, error) = match result {
        Ok(d) => (d, None),
        Err(e) => (Value::Null, Some(e.to_string())),
    };
    CriterionOutcome {
        id,
        title,
        checks,
        details,
        error,
        seconds: clock.elapsed().as_secs_f64(),
    }
}

fn grid(horizon: f64, steps: usize) -> Result<Arc<TimeGrid>, CliError> {
    Ok(Arc::new(TimeGrid::new(horizon, steps, &[])?))
}

fn brownian(
    grid: Arc<TimeGrid>,
    dim: usize,
    n: usize,
    seed: u64,
    index: u64,
) -> Result<BrownianStream, CliError> {
    Ok(BrownianStream::new(
        grid,
        dim,
        n,
        derive_seed(seed, stream::PATHS, index),
    )?)
}

/// Monte Carlo left side, constant-policy right side and their gap, all
/// against `a²/2`.
fn linear_equality(seed: u64, checks: &mut Vec<Check>) -> Result<Value, CliError> {
    let mut details = Vec::new();
    for (k, a) in [0.5, 1.0].into_iter().enumerate() {
        let f = parse_functional(&format!("linear:a={a}"))?;
        let base = brownian(grid(1.0, 50)?, 1, 1_000_000, seed, k as u64)?;
        let v = ConstantPolicy::new(vec![a]);
        let gap = duality_gap(&f, &v, &base, LhsMethod::MonteCarlo)?;
        let exact = a * a / 2.0;
        checks.push(Check::within(
            format!("a={a}:lhs"),
            gap.lhs.value,
            exact,
            N_SE * gap.lhs.std_error,
        ));
        checks.push(Check::within(
            format!("a={a}:rhs"),
            gap.rhs.value,
            exact,
            N_SE * gap.rhs.std_error,
        ));
        checks.push(Check::within(
            format!("a={a}:gap"),
            gap.gap,
            0.0,
            N_SE * gap.gap_se,
        ));
        details.push(json!({ "a": a, "gap": gap }));
    }
    Ok(json!(details))
}

fn quadratic_equality(seed: u64, checks: &mut Vec<Check>) -> Result<Value, CliError> {
    let c: f64 = 0.25;
    let f = parse_functional("quadratic:c=0.25,t=1")?;
    let exact = -0.5 * (1.0 - 2.0 * c).ln();
    let quad = estimate_lhs_quadrature(&f)?;
    checks.push(Check::within("quadrature_lhs", quad.value, exact, 1e-9));

    let train_grid = grid(1.0, 200)?;
    let family = PolicyFamily::parse("linear_feedback:pieces=10", 1, 1.0)?;
    let config = OptConfig {
        seed,
        ..OptConfig::default()
    };
    let clock = Instant::now();
    let (best, trace) = optimize(&f, &family, train_grid.clone(), &config)?;
    let opt_secs = clock.elapsed().as_secs_f64();
    checks.push(Check::at_most("optimizer_seconds", opt_secs, 300.0));
    let fresh = brownian(train_grid, 1, 200_000, seed, 1)?;
    let rhs = estimate_rhs(&f, &best, &fresh)?;
    checks.push(Check::at_least("optimized_rhs", rhs.value, exact - 0.01));

    let fine = brownian(grid(1.0, 400)?, 1, 200_000, seed, 2)?;
    let cmp = compare_to_oracle(&f, &best, &fine)?;
    let oracle = cmp
        .oracle
        .ok_or_else(|| CliError::Config("quadratic functional lost its oracle policy".into()))?;
    checks.push(Check::within("oracle_lhs", oracle.lhs.value, exact, 1e-12));
    checks.push(Check::at_most(
        "oracle_gap",
        oracle.gap,
        0.005 + N_SE * oracle.gap_se,
    ));
    Ok(json!({
        "exact": exact,
        "quadrature": quad,
        "optimizer": {
            "seconds": opt_secs,
            "gradient": trace.gradient,
            "best_iteration": trace.best_iteration,
            "best_heldout": trace.best_objective(),
            "theta": best.theta,
        },
        "fresh_rhs": rhs,
        "oracle_gap_400": oracle,
    }))
}

fn weak_duality(seed: u64, checks: &mut Vec<Check>) -> Result<Value, CliError> {
    let n_policies = 200;
    let mut details = Vec::new();
    let mut stream_index = 0;
    for d in [1usize, 2] {
        for f in catalog(d)
            .into_iter()
            .filter(|f| f.log_mgf().is_some_and(f64::is_finite))
        {
            let lhs = f.log_mgf().expect("filtered on a closed form");
            let horizon = f.marks().iter().copied().fold(1.0, f64::max);
            let base = brownian(
                Arc::new(TimeGrid::new(horizon, 50, f.marks())?),
                d,
                4000,
                seed,
                stream_index,
            )?;
            stream_index += 1;
            let mut worst = f64::INFINITY;
            let mut failures = 0;
            for i in 0..n_policies {
                let v = random_clamped_policy(d, horizon, seed, i);
                let rhs = estimate_rhs(&f, &v, &base)?;
                let z = (lhs - rhs.value) / rhs.std_error.max(f64::MIN_POSITIVE);
                worst = worst.min(z);
                if lhs - rhs.value < -N_SE * rhs.std_error {
                    failures += 1;
                    checks.push(Check::at_least(
                        format!("{}:policy{i}", f.spec()),
                        lhs - rhs.value,
                        -N_SE * rhs.std_error,
                    ));
                }
            }
            checks.push(Check::at_least(
                format!("{}:violations", f.spec()),
                -(failures as f64),
                0.0,
            ));
            details.push(
                json!({ "functional": f.spec(), "policies": n_policies, "min_gap_in_se": worst }),
            );
        }
    }
    Ok(json!(details))
}

/// `H(μ|W)` for `dμ/dW ∝ e^F` with Gaussian `μ`: `a²/2` for `F = a w(1)` and
/// `c σ² + ½ log(1 − 2c)`, `σ² = 1/(1 − 2c)`, for `F = c w(1)²`.
fn follmer_identity(seed: u64, checks: &mut Vec<Check>) -> Result<Value, CliError> {
    let c: f64 = 0.25;
    let cases = [
        ("linear:a=1", 0.5),
        (
            "quadratic:c=0.25",
            c / (1.0 - 2.0 * c) + 0.5 * (1.0 - 2.0 * c).ln(),
        ),
    ];
    let mut details = Vec::new();
    for (k, (spec, h)) in cases.into_iter().enumerate() {
        let f = parse_functional(spec)?;
        let base = brownian(grid(1.0, 400)?, 1, 20_000, seed, k as u64)?;
        let r = entropy_identity_check(&f, &base, DriftForm::Auto)?;
        checks.push(Check::within(
            format!("{spec}:entropy"),
            r.entropy.value,
            h,
            1e-8,
        ));
        checks.push(Check::within(
            format!("{spec}:identity"),
            r.diff,
            0.0,
            N_SE * r.diff_se + 0.01,
        ));
        details.push(json!({ "functional": spec, "closed_form_entropy": h, "report": r }));
    }
    Ok(json!(details))
}

/// Euler law of `X_{k+1} = (1 + aΔt) X_k + bΔt + ΔB_k` at time 1:
/// returns `(KL(N(m, s²) ‖ N(0, 1)), ½ E Σ (a X_k + b)² Δt)`.
fn euler_affine_oracle(a: f64, b: f64, steps: usize) -> (f64, f64) {
    let dt = 1.0 / steps as f64;
    let (mut m, mut s2, mut half_action) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..steps {
        half_action += 0.5 * dt * (a * a * s2 + (a * m + b).powi(2));
        m = (1.0 + a * dt) * m + b * dt;
        s2 = (1.0 + a * dt).powi(2) * s2 + dt;
    }
    (0.5 * (s2 + m * m - 1.0 - s2.ln()), half_action)
}

fn entropy_bound(seed: u64, checks: &mut Vec<Check>) -> Result<Value, CliError> {
    let steps = 200;
    let cases: Vec<(String, f64, f64, Box<dyn DriftPolicy>)> = vec![
        (
            "constant:1".into(),
            0.0,
            1.0,
            Box::new(ConstantPolicy::new(vec![1.0])),
        ),
        (
            "constant:-0.5".into(),
            0.0,
            -0.5,
            Box::new(ConstantPolicy::new(vec![-0.5])),
        ),
        (
            "ou:a=-1".into(),
            -1.0,
            0.0,
            Box::new(AffineFeedback::ou(1, -1.0)),
        ),
        (
            "ou:a=0.5".into(),
            0.5,
            0.0,
            Box::new(AffineFeedback::ou(1, 0.5)),
        ),
        (
            "linear_feedback:a=-2,b=0.3".into(),
            -2.0,
            0.3,
            Box::new(AffineFeedback::new(
                1,
                |_| -2.0,
                vec![0.3],
                "linear_feedback(a=-2, b=0.3)",
            )),
        ),
    ];
    let mut details = Vec::new();
    for (k, (name, a, b, policy)) in cases.into_iter().enumerate() {
        let base = brownian(grid(1.0, steps)?, 1, 100_000, seed, k as u64)?;
        let r = entropy_bound_check(policy.as_ref(), &base, &[1.0])?;
        let (kl, half_action) = euler_affine_oracle(a, b, steps);
        checks.push(Check::at_least(
            format!("{name}:slack"),
            r.slack,
            -N_SE * r.slack_se,
        ));
        checks.push(Check::within(
            format!("{name}:kl"),
            r.h_marginal.value,
            kl,
            1e-12,
        ));
        checks.push(Check::within(
            format!("{name}:half_action"),
            r.half_action.value,
            half_action,
            N_SE * r.half_action.std_error + 1e-12,
        ));
        details.push(json!({ "policy": name, "oracle_kl": kl, "oracle_half_action": half_action, "report": r }));
    }
    Ok(json!(details))
}

fn zero_variance(seed: u64, checks: &mut Vec<Check>) -> Result<Value, CliError> {
    let f = parse_functional("linear:a=1")?;
    let base = brownian(grid(1.0, 400)?, 1, 20_000, seed, 0)?;
    let r = zero_variance_check(&f, &base, DriftForm::Auto)?;
    checks.push(Check::at_most("variance_ratio", r.ratio, 1e-3));
    checks.push(Check::within(
        "importance_mean",
        r.importance.value,
        0.5f64.exp(),
        1e-9,
    ));
    Ok(json!(r))
}

fn truncation(checks: &mut Vec<Check>) -> Result<Value, CliError> {
    let cfg = ExperimentConfig::default();
    let levels = &cfg.levels;
    let q = parse_functional("quadratic:c=0.25")?;
    let caps: Vec<_> = levels
        .iter()
        .map(|&m| TruncationSpec::cap(m))
        .chain([TruncationSpec::none()])
        .collect();
    let cap_rows = truncation_sweep(&q, &caps, None, None, LhsMethod::Quadrature)?;
    let cap_vals: Vec<f64> = cap_rows.iter().map(|r| r.lhs.value).collect();
    let limit = -0.5 * 0.5f64.ln();
    let finite = &cap_vals[..levels.len()];
    checks.push(Check::holds(
        "cap_strictly_increasing",
        finite.windows(2).all(|w| w[1] > w[0]),
    ));
    checks.push(Check::within(
        "cap_at_64",
        finite[levels.len() - 1],
        limit,
        1e-6,
    ));

    let lin = parse_functional("linear:a=1")?;
    let floors: Vec<_> = levels
        .iter()
        .map(|&n| TruncationSpec::floor(n))
        .chain([TruncationSpec::none()])
        .collect();
    let floor_rows = truncation_sweep(&lin, &floors, None, None, LhsMethod::Quadrature)?;
    let floor_vals: Vec<f64> = floor_rows.iter().map(|r| r.lhs.value).collect();
    checks.push(Check::holds(
        "floor_nonincreasing",
        floor_vals.windows(2).all(|w| w[1] <= w[0]),
    ));
    checks.push(Check::within(
        "floor_at_64",
        floor_vals[levels.len() - 1],
        0.5,
        1e-6,
    ));
    Ok(json!({ "levels": levels, "cap": cap_vals, "floor": floor_vals }))
}

fn ehc(checks: &mut Vec<Check>) -> Result<Value, CliError> {
    let times = experiments::ehc_times();
    let mut details = Vec::new();
    for f in field_catalog().into_iter().filter(|f| f.satisfies_b()) {
        let quad = GaussianQuadrature::standard(f.dim())?;
        let mut worst = f64::INFINITY;
        for &t in &times {
            let r = ehc_check(&f, t, &quad)?;
            worst = worst.min(r.deficit);
            checks.push(Check::at_least(
                format!("{}:t={t}", f.spec()),
                r.deficit,
                -1e-9,
            ));
        }
        details.push(json!({ "field": f.spec(), "min_deficit": worst }));
    }
    let lin = parse_field("linear:a=1")?;
    let quad = GaussianQuadrature::standard(1)?;
    let both = 0.5f64.exp();
    for &t in &times {
        let r = ehc_check(&lin, t, &quad)?;
        checks.push(Check::within(
            format!("linear:equality_lhs:t={t}"),
            r.lhs_norm,
            both,
            1e-8,
        ));
        checks.push(Check::within(
            format!("linear:equality_rhs:t={t}"),
            r.rhs_norm,
            both,
            1e-8,
        ));
    }
    Ok(json!({ "times": times, "fields": details }))
}

fn rehc(seed: u64, checks: &mut Vec<Check>) -> Result<Value, CliError> {
    let times = [0.25, 0.5, 0.75, 1.0];
    let mut details = Vec::new();
    let linear_spec = parse_field("linear:a=1")?.spec().to_string();
    let mut index = 0;
    for f in field_catalog().into_iter().filter(|f| f.satisfies_b()) {
        for &t in &times {
            let g = Arc::new(rehc_grid(20, t)?);
            let base = brownian(g, f.dim(), 100_000, seed, index)?;
            index += 1;
            let r = rehc_check(&f, t, &base)?;
            checks.push(Check::at_least(
                format!("{}:t={t}", f.spec()),
                r.slack,
                -N_SE * r.slack_se,
            ));
            if f.spec() == linear_spec {
                checks.push(Check::within(
                    format!("linear:equality_rhs:t={t}"),
                    r.rhs.value,
                    0.5,
                    1e-9,
                ));
                checks.push(Check::within(
                    format!("linear:equality_lhs:t={t}"),
                    r.lhs.value,
                    0.5,
                    N_SE * r.slack_se,
                ));
            }
            details.push(
                json!({ "field": f.spec(), "t": t, "slack": r.slack, "slack_se": r.slack_se }),
            );
        }
    }
    Ok(json!(details))
}

fn lsi(checks: &mut Vec<Check>) -> Result<Value, CliError> {
    let mut details = Vec::new();
    for f in field_catalog().into_iter().filter(|f| f.has_grad()) {
        let quad = GaussianQuadrature::standard(f.dim())?;
        let r = lsi_check(&f, &quad)?;
        checks.push(Check::at_least(f.spec(), r.deficit, -1e-9));
        details.push(json!({ "field": f.spec(), "report": r }));
    }
    let e = parse_field("exp:a=1")?;
    let r = lsi_check(&e, &GaussianQuadrature::standard(1)?)?;
    let both = 2.0 * 1f64.exp().powi(2);
    checks.push(Check::within("exp:equality_lhs", r.lhs, both, 1e-7));
    checks.push(Check::within("exp:equality_rhs", r.rhs, both, 1e-7));
    details.push(json!({ "field": e.spec(), "report": r }));
    Ok(json!(details))
}

/// Persisted configs rerun at one and four threads, and after a JSON round
/// trip, must reproduce every stochastic output bitwise.
fn reproducibility(seed: u64, checks: &mut Vec<Check>) -> Result<Value, CliError> {
    let base = ExperimentConfig {
        seed,
        ..ExperimentConfig::default()
    };
    let mut opt = base.opt.clone();
    opt.iters = 20;
    opt.batch = 256;
    opt.heldout = 2000;
    opt.eval_every = 10;
    let configs = vec![
        ExperimentConfig {
            experiment: "gap".into(),
            functional: "quadratic:c=0.25".into(),
            policy: "linear_feedback:a=0.7".into(),
            n: 20_000,
            ..base.clone()
        },
        ExperimentConfig {
            experiment: "lhs".into(),
            functional: "bounded_smooth:d=4".into(),
            n: 20_000,
            steps: 20,
            ..base.clone()
        },
        ExperimentConfig {
            experiment: "optimize".into(),
            functional: "quadratic:c=0.25".into(),
            family: "linear_feedback:pieces=4".into(),
            steps: 50,
            n: 5000,
            opt,
            ..base.clone()
        },
        ExperimentConfig {
            experiment: "follmer".into(),
            functional: "two_mark".into(),
            steps: 40,
            n: 2000,
            ..base.clone()
        },
        ExperimentConfig {
            experiment: "ou-rehc".into(),
            field: "sin".into(),
            steps: 20,
            n: 20_000,
            ..base.clone()
        },
    ];
    let mut details = Vec::new();
    for cfg in configs {
        let (one, _) = experiments::run(&cfg, 1)?;
        let replayed = ExperimentConfig::from_json(&one.config.canonical_json())?;
        let (four, _) = experiments::run(&replayed, 4)?;
        let name = format!("{}:{}", cfg.experiment, cfg.hash8());
        checks.push(Check::holds(
            format!("{name}:ran"),
            one.error.is_none() && four.error.is_none(),
        ));
        checks.push(Check::holds(
            format!("{name}:bitwise"),
            serde_json::to_string(&one.stochastic_outputs())?
                == serde_json::to_string(&four.stochastic_outputs())?,
        ));
        checks.push(Check::holds(
            format!("{name}:pass_recomputes"),
            one.passed == one.recompute_passed(),
        ));
        details.push(json!({
            "experiment": cfg.experiment,
            "config_hash": one.config_hash,
            "threads": [one.threads, four.threads],
            "error": one.error,
        }));
    }
    Ok(json!(details))
}
