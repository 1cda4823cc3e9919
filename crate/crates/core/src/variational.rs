//! Both sides of the variational formula
//! `log E[e^{F(B)}] = sup_v E[F(B^v) − ½ ∫|v|² dt]`, their gap, the
//! Donsker–Varadhan bound and truncation sweeps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::follmer::{EntropyMethod, RelEntropyResult};
use crate::functionals::{evaluate, truncate, CylinderFunctional, TruncationSpec};
use crate::gaussian::marginal_entropy;
use crate::paths::{check_support, drive, map_chunks, DriftPolicy, PathKind, PathSource};
use crate::quadrature::{default_order, GaussianQuadrature, MAX_DIM};
use crate::stats::{combined_se, EstimatorReport, LogMeanExp, Method, Moments};

/// Monte Carlo `log (1/N) Σ e^{F(B_i)}` with a delta-method standard error.
pub fn estimate_lhs(
    functional: &CylinderFunctional,
    paths: &dyn PathSource,
) -> Result<EstimatorReport> {
    let parts = map_chunks(paths, |chunk| {
        if chunk.kind() != PathKind::Brownian {
            return Err(Error::invalid(
                "the left-hand side is estimated on Brownian paths",
            ));
        }
        LogMeanExp::from_slice(&evaluate(functional, chunk)?)
    })?;
    let mut acc = LogMeanExp::default();
    for p in &parts {
        acc.merge(p);
    }
    let (value, std_error) = acc.finish()?;
    Ok(EstimatorReport {
        value,
        std_error,
        n_samples: acc.count() as usize,
        seed: Some(paths.seed()),
        method: Method::MonteCarlo,
    })
}

/// Maps standard normal `z` (mark-major) to Brownian values at `marks`
/// through independent increments.
pub(crate) fn brownian_from_increments(marks: &[f64], d: usize, z: &[f64], out: &mut [f64]) {
    let mut prev = 0.0;
    for (i, &t) in marks.iter().enumerate() {
        let s = (t - prev).sqrt();
        for j in 0..d {
            let before = if i == 0 { 0.0 } else { out[(i - 1) * d + j] };
            out[i * d + j] = before + s * z[i * d + j];
        }
        prev = t;
    }
}

/// Tensor Gauss–Hermite `log E[e^{F(B)}]`, deterministic. Needs `d · m ≤ 3`.
pub fn estimate_lhs_quadrature(functional: &CylinderFunctional) -> Result<EstimatorReport> {
    let n = functional.n_inputs();
    if n > MAX_DIM {
        return Err(Error::unsupported(format!(
            "quadrature needs d·m ≤ {MAX_DIM}, {} has {n}",
            functional.spec()
        )));
    }
    let quad = GaussianQuadrature::new(n, default_order(n))?;
    let (marks, d) = (functional.marks(), functional.dim());
    let mut x = vec![0.0; n];
    let value = quad.log_expectation_exp(|z| {
        brownian_from_increments(marks, d, z, &mut x);
        functional.value(&x)
    })?;
    Ok(EstimatorReport {
        n_samples: quad.len(),
        ..EstimatorReport::exact(value, Method::Quadrature)
    })
}

/// How the left-hand side is obtained.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LhsMethod {
    /// Closed form, else quadrature when `d · m ≤ 3`, else Monte Carlo.
    #[default]
    Auto,
    MonteCarlo,
    Quadrature,
    Oracle,
}

impl std::str::FromStr for LhsMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(LhsMethod::Auto),
            "mc" | "monte_carlo" => Ok(LhsMethod::MonteCarlo),
            "quadrature" => Ok(LhsMethod::Quadrature),
            "oracle" => Ok(LhsMethod::Oracle),
            other => Err(Error::invalid(format!("unknown LHS method {other:?}"))),
        }
    }
}

pub fn lhs_with(
    functional: &CylinderFunctional,
    base: &dyn PathSource,
    method: LhsMethod,
) -> Result<EstimatorReport> {
    match method {
        LhsMethod::MonteCarlo => estimate_lhs(functional, base),
        LhsMethod::Quadrature => estimate_lhs_quadrature(functional),
        LhsMethod::Oracle => functional
            .log_mgf()
            .map(|v| EstimatorReport::exact(v, Method::ClosedForm))
            .ok_or_else(|| {
                Error::unsupported(format!("{} has no closed-form log-MGF", functional.spec()))
            }),
        LhsMethod::Auto => match functional.log_mgf() {
            Some(v) => Ok(EstimatorReport::exact(v, Method::ClosedForm)),
            None if functional.n_inputs() <= MAX_DIM => estimate_lhs_quadrature(functional),
            None => estimate_lhs(functional, base),
        },
    }
}

/// Per-path `F(X) − ½ Σ|v_k|² Δt_k` on the drifted paths.
fn rhs_samples(
    functional: &CylinderFunctional,
    policy: &dyn DriftPolicy,
    chunk: &crate::paths::PathBatch,
) -> Result<Vec<f64>> {
    let driven = drive(chunk, policy)?;
    let f = evaluate(functional, &driven.paths)?;
    Ok(f.iter()
        .zip(&driven.action)
        .map(|(f, a)| f - 0.5 * a)
        .collect())
}

/// Monte Carlo `E[F(B^v) − ½ Σ|v_k|² Δt_k]` on the given base paths.
///
/// The same base gives bitwise-identical results, so different policies can
/// be compared under common random numbers.
pub fn estimate_rhs(
    functional: &CylinderFunctional,
    policy: &dyn DriftPolicy,
    base: &dyn PathSource,
) -> Result<EstimatorReport> {
    check_support(policy, base.grid())?;
    let parts = map_chunks(base, |chunk| {
        Ok(Moments::from_slice(&rhs_samples(
            functional, policy, chunk,
        )?))
    })?;
    let mut m = Moments::new();
    for p in &parts {
        m.merge(p);
    }
    Ok(EstimatorReport::from_moments(
        &m,
        Some(base.seed()),
        Method::MonteCarlo,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub lhs: EstimatorReport,
    pub rhs: EstimatorReport,
    /// `lhs − rhs`
    pub gap: f64,
    pub gap_se: f64,
}

impl GapReport {
    pub fn new(lhs: EstimatorReport, rhs: EstimatorReport) -> Self {
        GapReport {
            gap: lhs.value - rhs.value,
            gap_se: combined_se(lhs.std_error, rhs.std_error),
            lhs,
            rhs,
        }
    }
}

pub fn duality_gap(
    functional: &CylinderFunctional,
    policy: &dyn DriftPolicy,
    base: &dyn PathSource,
    method: LhsMethod,
) -> Result<GapReport> {
    let lhs = lhs_with(functional, base, method)?;
    let rhs = estimate_rhs(functional, policy, base)?;
    Ok(GapReport::new(lhs, rhs))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DvReport {
    /// `E[F(B^v)] − H`
    pub dv_value: EstimatorReport,
    pub entropy: RelEntropyResult,
    pub lhs: EstimatorReport,
    /// `lhs − dv_value`, non-negative up to noise.
    pub slack: f64,
    pub slack_se: f64,
}

/// Donsker–Varadhan lower bound `E_μ[F] − H(μ|W) ≤ log E[e^F]` at `μ = law(B^v)`.
///
/// For affine policies `H` is the exact KL of the mark marginals, which is
/// valid here because `F` only sees the marks. Otherwise the control cost
/// `½ ‖v‖²` stands in for `H` and the bound is conservative.
pub fn dv_bound(
    functional: &CylinderFunctional,
    policy: &dyn DriftPolicy,
    base: &dyn PathSource,
    method: LhsMethod,
) -> Result<DvReport> {
    check_support(policy, base.grid())?;
    let lhs = lhs_with(functional, base, method)?;
    let grid = base.grid().clone();
    let parts = map_chunks(base, |chunk| {
        let driven = drive(chunk, policy)?;
        let f = evaluate(functional, &driven.paths)?;
        Ok((Moments::from_slice(&f), Moments::from_slice(&driven.action)))
    })?;
    let (mut ef, mut act) = (Moments::new(), Moments::new());
    for (a, b) in &parts {
        ef.merge(a);
        act.merge(b);
    }
    let entropy = match marginal_entropy(policy, &grid, functional.marks()) {
        Ok(h) => RelEntropyResult {
            value: h,
            std_error: 0.0,
            method: EntropyMethod::GaussianClosedForm,
        },
        Err(Error::Unsupported(_)) => RelEntropyResult {
            value: 0.5 * act.mean(),
            std_error: 0.5 * act.std_error(),
            method: EntropyMethod::BoundOnly,
        },
        Err(e) => return Err(e),
    };
    let dv = EstimatorReport {
        value: ef.mean() - entropy.value,
        std_error: combined_se(ef.std_error(), entropy.std_error),
        n_samples: ef.count() as usize,
        seed: Some(base.seed()),
        method: Method::MonteCarlo,
    };
    Ok(DvReport {
        slack: lhs.value - dv.value,
        slack_se: combined_se(lhs.std_error, dv.std_error),
        dv_value: dv,
        entropy,
        lhs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub upper: Option<f64>,
    pub lower: Option<f64>,
    pub lhs: EstimatorReport,
    pub rhs: Option<EstimatorReport>,
}

fn level(v: Option<f64>) -> f64 {
    v.unwrap_or(f64::INFINITY)
}

/// `log E[e^{(F ∧ M) ∨ (−N)}]` along a list of truncation levels, and
/// optionally the right-hand side of each truncated functional at a fixed
/// reference policy.
///
/// Specs must be ordered with `M` and `N` both non-decreasing.
pub fn truncation_sweep(
    functional: &CylinderFunctional,
    specs: &[TruncationSpec],
    base: Option<&dyn PathSource>,
    reference: Option<&dyn DriftPolicy>,
    method: LhsMethod,
) -> Result<Vec<SweepRow>> {
    if specs
        .windows(2)
        .any(|w| level(w[1].upper) < level(w[0].upper) || level(w[1].lower) < level(w[0].lower))
    {
        return Err(Error::invalid(
            "truncation specs must be ordered by increasing M and N",
        ));
    }
    if reference.is_some() && base.is_none() {
        return Err(Error::invalid("a reference policy needs base paths"));
    }
    specs
        .iter()
        .map(|spec| {
            let f = truncate(functional, *spec)?;
            // Closed forms do not survive truncation, so Auto means quadrature or MC here.
            let lhs = match (method, base) {
                (LhsMethod::Auto, _) if f.n_inputs() <= MAX_DIM => estimate_lhs_quadrature(&f)?,
                (LhsMethod::Auto | LhsMethod::MonteCarlo, Some(b)) => estimate_lhs(&f, b)?,
                (LhsMethod::Quadrature, _) => estimate_lhs_quadrature(&f)?,
                (LhsMethod::Oracle, Some(b)) => lhs_with(&f, b, LhsMethod::Oracle)?,
                _ => return Err(Error::invalid("Monte Carlo sweep needs base paths")),
            };
            let rhs = match (reference, base) {
                (Some(p), Some(b)) => Some(estimate_rhs(&f, p, b)?),
                _ => None,
            };
            Ok(SweepRow {
                upper: spec.upper,
                lower: spec.lower,
                lhs,
                rhs,
            })
        })
        .collect()
}
