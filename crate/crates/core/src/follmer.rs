//! The Föllmer drift `u(t, x) = ∇_x log E[e^{F}(x + future increments)]`,
//! its entropy identity, the entropy bound for Gaussian-family policies and
//! the zero-variance importance sampler it induces.

use serde::{Deserialize, Serialize};

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::functionals::{evaluate, CylinderFunctional};
use crate::gaussian::marginal_entropy;
use crate::paths::{
    action_norm_sq, check_support, drive, log_weights, map_chunks, DriftPolicy, PathSource,
    TimeGrid,
};
use crate::quadrature::{default_order, GaussianQuadrature, MAX_DIM};
use crate::rng::{rng_for, stream};
use crate::stats::{combined_se, EstimatorReport, Method, Moments};
use crate::variational::{brownian_from_increments, lhs_with, LhsMethod};

/// Below this remaining time the drift is `∇f` at the current point.
pub const NEAR_TERMINAL: f64 = 1e-8;
/// Inner Monte Carlo draws when the future marks span more than three dimensions.
pub const INNER_DRAWS: usize = 10_000;
const INNER_SEED: u64 = 0x0f01_1e12;
const MARK_TOL: f64 = 1e-12;

/// Which expression of the drift is integrated.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftForm {
    /// Ratio form when a gradient is available, score form otherwise.
    #[default]
    Auto,
    /// `E[e^f ∇f] / E[e^f]`
    Ratio,
    /// `E[Z e^{f(x + σZ)}] / (σ E[e^{f(x + σZ)}])`
    Score,
}

impl std::str::FromStr for DriftForm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(DriftForm::Auto),
            "ratio" => Ok(DriftForm::Ratio),
            "score" => Ok(DriftForm::Score),
            other => Err(Error::invalid(format!(
                "unknown Föllmer drift form {other:?}"
            ))),
        }
    }
}

enum Inner {
    /// One rule and its log weights per number of remaining marks, indexed by
    /// the next mark.
    Quadrature(Vec<(GaussianQuadrature, Vec<f64>)>),
    /// `INNER_DRAWS × d` standard normals, fixed at construction.
    MonteCarlo(Vec<f64>),
}

pub struct FollmerPolicy {
    functional: CylinderFunctional,
    form: DriftForm,
    inner: Inner,
}

impl std::fmt::Debug for FollmerPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FollmerPolicy")
            .field("functional", &self.functional.spec())
            .field("form", &self.form)
            .finish()
    }
}

impl FollmerPolicy {
    /// Multi-mark functionals need at most three remaining dimensions
    /// (`m · d ≤ 3`); single-mark functionals of higher dimension use inner
    /// Monte Carlo.
    pub fn new(functional: CylinderFunctional, form: DriftForm) -> Result<Self> {
        let form = match (form, functional.has_grad()) {
            (DriftForm::Auto, true) => DriftForm::Ratio,
            (DriftForm::Auto, false) => DriftForm::Score,
            (DriftForm::Ratio, false) => {
                return Err(Error::unsupported(format!(
                    "{} has no gradient for the ratio form",
                    functional.spec()
                )))
            }
            (f, _) => f,
        };
        let (m, d) = (functional.marks().len(), functional.dim());
        let inner = if m * d <= MAX_DIM {
            Inner::Quadrature(
                (0..m)
                    .map(|i| {
                        let n = (m - i) * d;
                        let q = GaussianQuadrature::new(n, default_order(n))?;
                        let log_w = q.weights().iter().map(|w| w.ln()).collect();
                        Ok((q, log_w))
                    })
                    .collect::<Result<_>>()?,
            )
        } else if m == 1 {
            let mut rng = rng_for(INNER_SEED, stream::INNER_MC, 0);
            Inner::MonteCarlo(
                (0..INNER_DRAWS * d)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect(),
            )
        } else {
            return Err(Error::unsupported(format!(
                "Föllmer drift of a {m}-mark functional in dimension {d} (needs m·d ≤ {MAX_DIM})"
            )));
        };
        Ok(FollmerPolicy {
            functional,
            form,
            inner,
        })
    }

    pub fn functional(&self) -> &CylinderFunctional {
        &self.functional
    }

    pub fn form(&self) -> DriftForm {
        self.form
    }

    /// `u(t, x)` given the path values at the marks already passed (`past`,
    /// mark-major). Zero from the last mark on.
    pub fn drift_at(&self, t: f64, past: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        let d = self.functional.dim();
        let marks = self.functional.marks();
        let i = marks.partition_point(|&s| s <= t + MARK_TOL);
        if past.len() != i * d || x.len() != d {
            return Err(Error::invalid(format!(
                "expected {} past values and a point of dimension {d} at t = {t}",
                i * d
            )));
        }
        let mut out = vec![0.0; d];
        if i < marks.len() {
            self.eval(i, marks[i] - t, past, x, &mut out)?;
        }
        Ok(out)
    }

    /// Drift with mark `i` next, `tau = t_i − t`.
    fn eval(&self, i: usize, tau: f64, past: &[f64], x: &[f64], out: &mut [f64]) -> Result<()> {
        let f = &self.functional;
        let (m, d) = (f.marks().len(), f.dim());
        let marks = f.marks();
        let n_future = (m - i) * d;
        let near = tau < NEAR_TERMINAL;
        let ratio = self.form == DriftForm::Ratio || (near && f.has_grad());
        let sigma = if near {
            if ratio {
                0.0
            } else {
                NEAR_TERMINAL.sqrt()
            }
        } else {
            tau.sqrt()
        };
        // Standard deviations of the increments between consecutive future
        // marks, the first one from `t`.
        let mut scales = Vec::with_capacity(m - i);
        scales.push(sigma);
        for j in i + 1..m {
            scales.push((marks[j] - marks[j - 1]).sqrt());
        }

        let mut input = vec![0.0; m * d];
        input[..i * d].copy_from_slice(past);
        let mut grad = vec![0.0; m * d];
        let mut acc = Accumulator::with_capacity(d, self.inner.len());

        let mut node = |z: &[f64], log_w: f64, outer: bool| -> Result<()> {
            // Brownian path from x at the future marks.
            for (l, &s) in scales.iter().enumerate() {
                for j in 0..d {
                    let prev = if l == 0 {
                        x[j]
                    } else {
                        input[(i + l - 1) * d + j]
                    };
                    input[(i + l) * d + j] = prev + s * z[l * d + j];
                }
            }
            let v = f.value(&input);
            if v.is_nan() || v == f64::INFINITY {
                return Err(Error::numeric(
                    None,
                    format!("f = {v} inside the Föllmer integral of {}", f.spec()),
                ));
            }
            let lw = log_w + v;
            if ratio {
                f.gradient(&input, &mut grad);
                acc.add(lw, outer, |j| (i..m).map(|l| grad[l * d + j]).sum());
            } else {
                acc.add(lw, outer, |j| z[j] / sigma);
            }
            Ok(())
        };

        match &self.inner {
            Inner::Quadrature(rules) => {
                let (q, log_w) = &rules[i];
                debug_assert_eq!(q.dim(), n_future);
                for (k, &lw) in log_w.iter().enumerate() {
                    node(q.point(k), lw, q.is_outer(k))?;
                }
            }
            Inner::MonteCarlo(z) => {
                let lw = -(INNER_DRAWS as f64).ln();
                for zk in z.chunks_exact(d) {
                    node(zk, lw, false)?;
                }
            }
        }
        acc.finish(out)
            .map_err(|msg| Error::numeric(None, format!("{}: {msg}", f.spec())))
    }
}

impl Inner {
    /// Nodes per evaluation, an upper bound for buffer sizes.
    fn len(&self) -> usize {
        match self {
            Inner::Quadrature(rules) => rules.first().map_or(0, |r| r.1.len()),
            Inner::MonteCarlo(z) => z.len(),
        }
    }
}

/// `Σ e^{lw} g / Σ e^{lw}`, shifted by the largest `lw` once all terms are in.
struct Accumulator {
    d: usize,
    lw: Vec<f64>,
    outer: Vec<bool>,
    g: Vec<f64>,
}

impl Accumulator {
    fn with_capacity(d: usize, n: usize) -> Self {
        Accumulator {
            d,
            lw: Vec::with_capacity(n),
            outer: Vec::with_capacity(n),
            g: Vec::with_capacity(n * d),
        }
    }

    fn add(&mut self, lw: f64, outer: bool, g: impl Fn(usize) -> f64) {
        if lw == f64::NEG_INFINITY {
            return;
        }
        self.lw.push(lw);
        self.outer.push(outer);
        self.g.extend((0..self.d).map(g));
    }

    fn finish(&self, out: &mut [f64]) -> std::result::Result<(), String> {
        let shift = self.lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if shift == f64::NEG_INFINITY {
            return Err("every term of the inner expectation vanishes".into());
        }
        let (mut total, mut edge) = (0.0, 0.0);
        out.fill(0.0);
        for ((&lw, &outer), g) in self
            .lw
            .iter()
            .zip(&self.outer)
            .zip(self.g.chunks_exact(self.d))
        {
            let w = (lw - shift).exp();
            total += w;
            if outer {
                edge += w;
            }
            for (o, gj) in out.iter_mut().zip(g) {
                *o += w * gj;
            }
        }
        if edge > 1e-6 * total {
            return Err(format!(
                "{:.2e} of the inner mass lies on the outermost nodes; E[e^f] looks infinite",
                edge / total
            ));
        }
        out.iter_mut().for_each(|o| *o /= total);
        Ok(())
    }
}

impl DriftPolicy for FollmerPolicy {
    fn dim(&self) -> usize {
        self.functional.dim()
    }

    fn drift(&self, grid: &TimeGrid, k: usize, history: &[f64], out: &mut [f64]) {
        let d = self.functional.dim();
        let marks = self.functional.marks();
        let t = grid.time(k);
        let i = marks.partition_point(|&s| s <= t + MARK_TOL);
        if i == marks.len() {
            out.fill(0.0);
            return;
        }
        let mut past = vec![0.0; i * d];
        for (j, &s) in marks[..i].iter().enumerate() {
            match grid.index_of(s) {
                Some(node) if node <= k => {
                    past[j * d..(j + 1) * d].copy_from_slice(&history[node * d..(node + 1) * d])
                }
                _ => {
                    out.fill(f64::NAN);
                    return;
                }
            }
        }
        if self
            .eval(i, marks[i] - t, &past, &history[k * d..(k + 1) * d], out)
            .is_err()
        {
            out.fill(f64::NAN);
        }
    }

    fn sup_bound(&self) -> Option<f64> {
        self.functional.drift_bound()
    }

    fn cutoff(&self) -> Option<f64> {
        self.functional.marks().last().copied()
    }

    fn label(&self) -> String {
        format!("follmer({})", self.functional.spec())
    }
}

/// `u(t, x)` for a single-mark functional; zero for `t ≥ t_m`.
pub fn follmer_drift(
    functional: &CylinderFunctional,
    t: f64,
    x: &[f64],
    form: DriftForm,
) -> Result<Vec<f64>> {
    if functional.marks().len() != 1 {
        return Err(Error::invalid(
            "follmer_drift takes a single-mark functional",
        ));
    }
    let policy = FollmerPolicy::new(functional.clone(), form)?;
    if t >= functional.marks()[0] - MARK_TOL {
        if x.len() != functional.dim() {
            return Err(Error::invalid(
                "point dimension does not match the functional",
            ));
        }
        return Ok(vec![0.0; functional.dim()]);
    }
    policy.drift_at(t, &[], x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyMethod {
    /// KL between Gaussian mark laws.
    GaussianClosedForm,
    /// `½ ‖u‖²` of a Föllmer drift.
    ActionIdentity,
    /// `½ ‖v‖²`, an upper bound on `H`.
    BoundOnly,
    /// `E_μ[F] − log E[e^F]` for `dμ/dW = e^F / Z`.
    TerminalIdentity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelEntropyResult {
    pub value: f64,
    pub std_error: f64,
    pub method: EntropyMethod,
}

impl RelEntropyResult {
    pub fn is_upper_bound(&self) -> bool {
        self.method == EntropyMethod::BoundOnly
    }
}

/// `H(μ|W)` for `dμ/dW = e^F / E[e^F]` by quadrature over the marks, `d · m ≤ 3`.
pub fn terminal_entropy(functional: &CylinderFunctional) -> Result<RelEntropyResult> {
    let n = functional.n_inputs();
    if n > MAX_DIM {
        return Err(Error::unsupported(format!(
            "terminal entropy by quadrature needs d·m ≤ {MAX_DIM}"
        )));
    }
    let q = GaussianQuadrature::new(n, default_order(n))?;
    let (marks, d) = (functional.marks(), functional.dim());
    let mut x = vec![0.0; n];
    let mut f = |z: &[f64]| {
        brownian_from_increments(marks, d, z, &mut x);
        functional.value(&x)
    };
    let log_z = q.log_expectation_exp(&mut f)?;
    let mean_f: f64 = (0..q.len())
        .map(|k| {
            let v = f(q.point(k));
            q.weights()[k] * (v - log_z).exp() * v
        })
        .sum();
    Ok(RelEntropyResult {
        value: (mean_f - log_z).max(0.0),
        std_error: 0.0,
        method: EntropyMethod::TerminalIdentity,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EntropyIdentityReport {
    pub entropy: RelEntropyResult,
    pub half_action: EstimatorReport,
    /// `H − ½ ‖u‖²`
    pub diff: f64,
    pub diff_se: f64,
}

/// Compares `H(μ|W)` with half the action of the Föllmer drift on `base`.
pub fn entropy_identity_check(
    functional: &CylinderFunctional,
    base: &dyn PathSource,
    form: DriftForm,
) -> Result<EntropyIdentityReport> {
    let policy = FollmerPolicy::new(functional.clone(), form)?;
    if functional.n_inputs() <= MAX_DIM {
        let act = action_norm_sq(&policy, base)?;
        return Ok(identity_report(terminal_entropy(functional)?, act));
    }
    // E_μ[F] from the Föllmer paths themselves.
    check_support(&policy, base.grid())?;
    let parts = map_chunks(base, |chunk| {
        let driven = drive(chunk, &policy)?;
        Ok((
            Moments::from_slice(&evaluate(functional, &driven.paths)?),
            Moments::from_slice(&driven.action),
        ))
    })?;
    let (mut ef, mut act) = (Moments::new(), Moments::new());
    for (a, b) in &parts {
        ef.merge(a);
        act.merge(b);
    }
    let log_z = lhs_with(functional, base, LhsMethod::Auto)?;
    let h = RelEntropyResult {
        value: ef.mean() - log_z.value,
        std_error: combined_se(ef.std_error(), log_z.std_error),
        method: EntropyMethod::TerminalIdentity,
    };
    Ok(identity_report(
        h,
        EstimatorReport::from_moments(&act, Some(base.seed()), Method::MonteCarlo),
    ))
}

fn identity_report(entropy: RelEntropyResult, action: EstimatorReport) -> EntropyIdentityReport {
    let half_action = EstimatorReport {
        value: 0.5 * action.value,
        std_error: 0.5 * action.std_error,
        ..action
    };
    EntropyIdentityReport {
        diff: entropy.value - half_action.value,
        diff_se: combined_se(entropy.std_error, half_action.std_error),
        entropy,
        half_action,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EntropyBoundReport {
    pub h_marginal: RelEntropyResult,
    pub half_action: EstimatorReport,
    /// `½ ‖v‖² − H_marginal`, non-negative up to noise.
    pub slack: f64,
    pub slack_se: f64,
}

/// `H(law of B^v at the marks | Wiener) ≤ ½ E Σ|v|²Δt` for an affine policy.
/// An empty mark list means the grid horizon.
pub fn entropy_bound_check(
    policy: &dyn DriftPolicy,
    base: &dyn PathSource,
    marks: &[f64],
) -> Result<EntropyBoundReport> {
    let grid = base.grid();
    let marks = if marks.is_empty() {
        vec![grid.horizon()]
    } else {
        marks.to_vec()
    };
    let h = marginal_entropy(policy, grid, &marks)?;
    let act = action_norm_sq(policy, base)?;
    let half_action = EstimatorReport {
        value: 0.5 * act.value,
        std_error: 0.5 * act.std_error,
        ..act
    };
    Ok(EntropyBoundReport {
        slack: half_action.value - h,
        slack_se: half_action.std_error,
        h_marginal: RelEntropyResult {
            value: h,
            std_error: 0.0,
            method: EntropyMethod::GaussianClosedForm,
        },
        half_action,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ZeroVarianceReport {
    /// Plain Monte Carlo estimate of `E[e^F]`.
    pub plain: EstimatorReport,
    /// `e^{F(X)} · exp(girsanov weight)` under the Föllmer drift.
    pub importance: EstimatorReport,
    pub var_plain: f64,
    pub var_is: f64,
    /// `var_is / var_plain`, with `0 / 0 = 0`.
    pub ratio: f64,
}

pub fn zero_variance_check(
    functional: &CylinderFunctional,
    base: &dyn PathSource,
    form: DriftForm,
) -> Result<ZeroVarianceReport> {
    let policy = FollmerPolicy::new(functional.clone(), form)?;
    check_support(&policy, base.grid())?;
    let parts = map_chunks(base, |chunk| {
        let plain: Vec<f64> = evaluate(functional, chunk)?
            .into_iter()
            .map(f64::exp)
            .collect();
        let driven = drive(chunk, &policy)?;
        let fx = evaluate(functional, &driven.paths)?;
        let is: Vec<f64> = fx
            .iter()
            .zip(log_weights(&driven))
            .map(|(f, w)| (f + w).exp())
            .collect();
        Ok((Moments::from_slice(&plain), Moments::from_slice(&is)))
    })?;
    let (mut plain, mut is) = (Moments::new(), Moments::new());
    for (a, b) in &parts {
        plain.merge(a);
        is.merge(b);
    }
    let (var_plain, var_is) = (plain.variance(), is.variance());
    let ratio = if var_is == 0.0 {
        0.0
    } else {
        var_is / var_plain
    };
    Ok(ZeroVarianceReport {
        plain: EstimatorReport::from_moments(&plain, Some(base.seed()), Method::MonteCarlo),
        importance: EstimatorReport::from_moments(
            &is,
            Some(base.seed()),
            Method::ImportanceSampling,
        ),
        var_plain,
        var_is,
        ratio,
    })
}
