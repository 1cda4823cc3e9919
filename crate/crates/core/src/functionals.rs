//! Cylinder functionals `F(w) = f(w(t_1), …, w(t_m))`.
//!
//! Inputs to `f` are laid out mark-major: `x[i * d + j]` is coordinate `j`
//! of the path at mark `t_i`.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::SpecString;
use crate::paths::{map_chunks, DriftPolicy, PathBatch, PathKind, PathSource};
use crate::policy::{AffineFeedback, ConstantPolicy, PiecewiseConstant};
use crate::stats::Moments;

pub type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type GradFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// Closed-form knowledge about a functional.
#[derive(Debug, Clone, PartialEq)]
pub struct Oracle {
    /// `log E[e^{F(B)}]`
    pub log_mgf: Option<f64>,
    pub optimal_drift: Option<OptimalDrift>,
}

/// Known maximizer of the control problem, as a buildable description.
#[derive(Debug, Clone, PartialEq)]
pub enum OptimalDrift {
    /// `v = a` until `cutoff`.
    Constant { value: Vec<f64>, cutoff: f64 },
    PiecewiseConstant {
        knots: Vec<f64>,
        values: Vec<Vec<f64>>,
    },
    /// `v(t, x) = 2c x / (1 − 2c (t_m − t))` for `f = c |x|²` at `t_m`.
    QuadraticGain { c: f64, t_m: f64 },
}

impl OptimalDrift {
    pub fn policy(&self, dim: usize) -> Result<Arc<dyn DriftPolicy>> {
        Ok(match self {
            OptimalDrift::Constant { value, cutoff } => {
                Arc::new(ConstantPolicy::new(value.clone()).with_cutoff(*cutoff))
            }
            OptimalDrift::PiecewiseConstant { knots, values } => {
                Arc::new(PiecewiseConstant::new(knots.clone(), values.clone())?)
            }
            &OptimalDrift::QuadraticGain { c, t_m } => Arc::new(
                AffineFeedback::new(
                    dim,
                    move |t| 2.0 * c / (1.0 - 2.0 * c * (t_m - t)),
                    vec![0.0; dim],
                    format!("quadratic_oracle(c={c}, t_m={t_m})"),
                )
                .with_cutoff(t_m),
            ),
        })
    }
}

#[derive(Clone)]
pub struct CylinderFunctional {
    name: String,
    spec: String,
    dim: usize,
    marks: Vec<f64>,
    f: ScalarFn,
    grad: Option<GradFn>,
    oracle: Option<Oracle>,
    bounds: Option<(f64, f64)>,
    satisfies_a1: bool,
    drift_bound: Option<f64>,
}

impl fmt::Debug for CylinderFunctional {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CylinderFunctional")
            .field("spec", &self.spec)
            .field("dim", &self.dim)
            .field("marks", &self.marks)
            .field("oracle", &self.oracle)
            .field("bounds", &self.bounds)
            .finish()
    }
}

impl CylinderFunctional {
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        marks: Vec<f64>,
        f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("dimension must be at least 1"));
        }
        if marks.is_empty() {
            return Err(Error::invalid(
                "a cylinder functional needs at least one mark",
            ));
        }
        if marks[0] < 0.0
            || marks.iter().any(|t| !t.is_finite())
            || marks.windows(2).any(|w| w[1] <= w[0])
        {
            return Err(Error::invalid(format!(
                "marks must be finite, ≥ 0 and strictly increasing: {marks:?}"
            )));
        }
        let name = name.into();
        Ok(CylinderFunctional {
            spec: name.clone(),
            name,
            dim,
            marks,
            f: Arc::new(f),
            grad: None,
            oracle: None,
            bounds: None,
            satisfies_a1: true,
            drift_bound: None,
        })
    }

    pub fn with_grad(mut self, g: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.grad = Some(Arc::new(g));
        self
    }

    pub fn with_oracle(mut self, oracle: Oracle) -> Self {
        self.oracle = Some(oracle);
        self
    }

    pub fn with_bounds(mut self, lower: f64, upper: f64) -> Self {
        self.bounds = Some((lower, upper));
        self
    }

    pub fn with_spec(mut self, spec: impl Into<String>) -> Self {
        self.spec = spec.into();
        self
    }

    /// Marks the entry as violating `E[e^F] < ∞`.
    pub fn violating_a1(mut self) -> Self {
        self.satisfies_a1 = false;
        self
    }

    /// Known bound on the Föllmer drift of `e^F / Z`.
    pub fn with_drift_bound(mut self, b: f64) -> Self {
        self.drift_bound = Some(b);
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Canonical spec string, e.g. `quadratic:c=0.25,t=1,d=1`.
    pub fn spec(&self) -> &str {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn marks(&self) -> &[f64] {
        &self.marks
    }

    /// `m · d`, the number of scalar inputs of `f`.
    pub fn n_inputs(&self) -> usize {
        self.marks.len() * self.dim
    }

    pub fn oracle(&self) -> Option<&Oracle> {
        self.oracle.as_ref()
    }

    pub fn log_mgf(&self) -> Option<f64> {
        self.oracle.as_ref().and_then(|o| o.log_mgf)
    }

    pub fn bounds(&self) -> Option<(f64, f64)> {
        self.bounds
    }

    pub fn satisfies_a1(&self) -> bool {
        self.satisfies_a1
    }

    pub fn drift_bound(&self) -> Option<f64> {
        self.drift_bound
    }

    pub fn has_grad(&self) -> bool {
        self.grad.is_some()
    }

    #[inline]
    pub fn value(&self, x: &[f64]) -> f64 {
        (self.f)(x)
    }

    /// Writes `∇f(x)` into `out`; returns false when no gradient is available.
    pub fn gradient(&self, x: &[f64], out: &mut [f64]) -> bool {
        match &self.grad {
            Some(g) => {
                g(x, out);
                true
            }
            None => false,
        }
    }

    /// Node indices of the marks on `grid`.
    pub fn mark_nodes(&self, grid: &crate::paths::TimeGrid) -> Result<Vec<usize>> {
        self.marks
            .iter()
            .map(|&t| {
                grid.index_of(t).ok_or_else(|| {
                    Error::invalid(format!("mark {t} of {} is not a grid node", self.spec))
                })
            })
            .collect()
    }

    /// Gathers the mark values of path `p` into `buf`.
    #[inline]
    pub(crate) fn gather(&self, paths: &PathBatch, p: usize, nodes: &[usize], buf: &mut [f64]) {
        let d = self.dim;
        for (i, &k) in nodes.iter().enumerate() {
            buf[i * d..(i + 1) * d].copy_from_slice(paths.at(p, k));
        }
    }
}

/// `f` applied to the mark values of every path.
pub fn evaluate(functional: &CylinderFunctional, paths: &PathBatch) -> Result<Vec<f64>> {
    if paths.dim() != functional.dim {
        return Err(Error::invalid(format!(
            "functional dimension {} does not match path dimension {}",
            functional.dim,
            paths.dim()
        )));
    }
    let nodes = functional.mark_nodes(paths.grid())?;
    let out = (0..paths.n_paths())
        .into_par_iter()
        .map_init(
            || vec![0.0; functional.n_inputs()],
            |buf, p| {
                functional.gather(paths, p, &nodes, buf);
                functional.value(buf)
            },
        )
        .collect();
    Ok(out)
}

/// `F ↦ (F ∧ M) ∨ (−N)`. `None` stands for `+∞`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncationSpec {
    pub upper: Option<f64>,
    pub lower: Option<f64>,
}

impl TruncationSpec {
    pub fn cap(m: f64) -> Self {
        TruncationSpec {
            upper: Some(m),
            lower: None,
        }
    }

    pub fn floor(n: f64) -> Self {
        TruncationSpec {
            upper: None,
            lower: Some(n),
        }
    }

    pub fn none() -> Self {
        TruncationSpec {
            upper: None,
            lower: None,
        }
    }

    fn upper_value(&self) -> f64 {
        self.upper.unwrap_or(f64::INFINITY)
    }

    fn floor_value(&self) -> f64 {
        self.lower.map_or(f64::NEG_INFINITY, |n| -n)
    }

    pub fn is_noop(&self) -> bool {
        self.upper.is_none() && self.lower.is_none()
    }
}

fn fmt_level(v: Option<f64>) -> String {
    v.map_or_else(|| "inf".to_string(), |x| format!("{x}"))
}

pub fn truncate(
    functional: &CylinderFunctional,
    spec: TruncationSpec,
) -> Result<CylinderFunctional> {
    let (m, floor) = (spec.upper_value(), spec.floor_value());
    if spec.upper.is_some_and(f64::is_nan) || spec.lower.is_some_and(f64::is_nan) || m <= floor {
        return Err(Error::invalid(format!(
            "truncation needs M > −N, got M = {}, N = {}",
            fmt_level(spec.upper),
            fmt_level(spec.lower)
        )));
    }
    if spec.is_noop() {
        return Ok(functional.clone());
    }
    let inner = functional.f.clone();
    let mut out = functional.clone();
    out.f = Arc::new(move |x| inner(x).min(m).max(floor));
    out.grad = functional.grad.clone().map(|g| {
        let inner = functional.f.clone();
        Arc::new(move |x: &[f64], o: &mut [f64]| {
            let v = inner(x);
            if v >= m || v <= floor {
                o.fill(0.0);
            } else {
                g(x, o);
            }
        }) as GradFn
    });
    let (lo, hi) = functional
        .bounds
        .unwrap_or((f64::NEG_INFINITY, f64::INFINITY));
    out.bounds = Some((lo.max(floor).min(m), hi.min(m).max(floor)));
    out.oracle = None;
    out.drift_bound = None;
    if spec.upper.is_some() {
        out.satisfies_a1 = true;
    }
    out.spec = format!(
        "truncate({}, M={}, N={})",
        functional.spec,
        fmt_level(spec.upper),
        fmt_level(spec.lower)
    );
    Ok(out)
}

/// Parameter schema of one catalog entry.
#[derive(Debug, Clone, Serialize)]
pub struct CatalogEntry {
    pub name: &'static str,
    pub params: Vec<(&'static str, f64)>,
    pub summary: &'static str,
}

pub fn catalog_entries() -> Vec<CatalogEntry> {
    vec![
        CatalogEntry {
            name: "zero",
            params: vec![("t", 1.0), ("d", 1.0)],
            summary: "F = 0",
        },
        CatalogEntry {
            name: "linear",
            params: vec![("a", 1.0), ("t", 1.0), ("d", 1.0)],
            summary: "a · Σ_j w_j(t)",
        },
        CatalogEntry {
            name: "quadratic",
            params: vec![("c", 0.25), ("t", 1.0), ("d", 1.0)],
            summary: "c |w(t)|², finite exponential moment iff 2ct < 1",
        },
        CatalogEntry {
            name: "two_mark",
            params: vec![
                ("a1", 1.0),
                ("a2", 1.0),
                ("t1", 0.5),
                ("t2", 1.0),
                ("d", 1.0),
            ],
            summary: "a1 Σ w(t1) + a2 Σ w(t2)",
        },
        CatalogEntry {
            name: "bounded_smooth",
            params: vec![("t", 1.0), ("d", 1.0)],
            summary: "sin of the first coordinate of w(t)",
        },
        CatalogEntry {
            name: "unbounded_below",
            params: vec![("t", 1.0), ("d", 1.0)],
            summary: "−|w(t)|",
        },
        CatalogEntry {
            name: "diverging",
            params: vec![("c", 0.6), ("t", 1.0), ("d", 1.0)],
            summary: "quadratic with 2ct ≥ 1, E[e^F] = ∞",
        },
        CatalogEntry {
            name: "log_density",
            params: vec![("amp", 0.5), ("t", 1.0), ("d", 1.0)],
            summary: "log(1 + amp · sin w_1(t)), a bounded smooth density",
        },
    ]
}

fn fmt_spec(name: &str, params: &[(&str, f64)]) -> String {
    let body: Vec<String> = params.iter().map(|(k, v)| format!("{k}={v}")).collect();
    format!("{name}:{}", body.join(","))
}

/// Builds a catalog functional from a spec string such as `quadratic:c=0.25,t=1`.
pub fn parse_functional(s: &str) -> Result<CylinderFunctional> {
    let spec = SpecString::parse(s)?;
    let entry = catalog_entries()
        .into_iter()
        .find(|e| e.name == spec.name)
        .ok_or_else(|| Error::invalid(format!("unknown functional {:?}", spec.name)))?;
    let keys: Vec<&str> = entry.params.iter().map(|p| p.0).collect();
    spec.expect_keys(&keys)?;
    if !spec.positional.is_empty() {
        return Err(Error::invalid(format!(
            "{} takes named parameters only",
            spec.name
        )));
    }
    let p = |k: &str| {
        spec.get(
            k,
            entry.params.iter().find(|e| e.0 == k).expect("known key").1,
        )
    };
    let d = spec.get_usize("d", 1)?;
    let params: Vec<(&str, f64)> = entry.params.iter().map(|(k, _)| (*k, p(k))).collect();
    let canonical = fmt_spec(entry.name, &params);
    let f = match entry.name {
        "zero" => zero(p("t"), d),
        "linear" => linear(p("a"), p("t"), d),
        "quadratic" | "diverging" => quadratic(p("c"), p("t"), d),
        "two_mark" => two_mark(p("a1"), p("a2"), p("t1"), p("t2"), d),
        "bounded_smooth" => bounded_smooth(p("t"), d),
        "unbounded_below" => unbounded_below(p("t"), d),
        "log_density" => log_density(p("amp"), p("t"), d),
        _ => unreachable!("catalog entries are exhaustive"),
    }?;
    if entry.name == "diverging" && f.satisfies_a1 {
        return Err(Error::invalid(
            "diverging needs 2ct ≥ 1; use quadratic otherwise",
        ));
    }
    Ok(f.with_spec(canonical))
}

/// Default-parameter instance of every catalog entry, in dimension `d`.
pub fn catalog(d: usize) -> Vec<CylinderFunctional> {
    catalog_entries()
        .iter()
        .map(|e| parse_functional(&format!("{}:d={d}", e.name)).expect("defaults are valid"))
        .collect()
}

pub fn zero(t: f64, d: usize) -> Result<CylinderFunctional> {
    Ok(CylinderFunctional::new("zero", d, vec![t], |_| 0.0)?
        .with_grad(|_, o| o.fill(0.0))
        .with_bounds(0.0, 0.0)
        .with_drift_bound(0.0)
        .with_oracle(Oracle {
            log_mgf: Some(0.0),
            optimal_drift: Some(OptimalDrift::Constant {
                value: vec![0.0; d],
                cutoff: t,
            }),
        }))
}

/// `f(x) = a Σ_j x_j`, with `log E e^F = d a² t / 2`.
pub fn linear(a: f64, t: f64, d: usize) -> Result<CylinderFunctional> {
    Ok(
        CylinderFunctional::new("linear", d, vec![t], move |x| a * x.iter().sum::<f64>())?
            .with_grad(move |_, o| o.fill(a))
            .with_oracle(Oracle {
                log_mgf: Some(0.5 * d as f64 * a * a * t),
                optimal_drift: Some(OptimalDrift::Constant {
                    value: vec![a; d],
                    cutoff: t,
                }),
            }),
    )
}

/// `f(x) = c |x|²`; `log E e^F = −(d/2) log(1 − 2ct)` when `2ct < 1`.
pub fn quadratic(c: f64, t: f64, d: usize) -> Result<CylinderFunctional> {
    let f = CylinderFunctional::new("quadratic", d, vec![t], move |x| {
        c * x.iter().map(|v| v * v).sum::<f64>()
    })?
    .with_grad(move |x, o| {
        for (oi, xi) in o.iter_mut().zip(x) {
            *oi = 2.0 * c * xi;
        }
    });
    let f = if c <= 0.0 {
        f.with_bounds(f64::NEG_INFINITY, 0.0)
    } else {
        f.with_bounds(0.0, f64::INFINITY)
    };
    if 2.0 * c * t < 1.0 {
        Ok(f.with_oracle(Oracle {
            log_mgf: Some(-0.5 * d as f64 * (1.0 - 2.0 * c * t).ln()),
            optimal_drift: Some(OptimalDrift::QuadraticGain { c, t_m: t }),
        }))
    } else {
        Ok(f.violating_a1())
    }
}

/// `f = a1 Σ w(t1) + a2 Σ w(t2)`, log-MGF `d (a1² t1 + 2 a1 a2 t1 + a2² t2) / 2`.
pub fn two_mark(a1: f64, a2: f64, t1: f64, t2: f64, d: usize) -> Result<CylinderFunctional> {
    if !(t1 < t2) {
        return Err(Error::invalid("two_mark needs t1 < t2"));
    }
    let var = a1 * a1 * t1 + 2.0 * a1 * a2 * t1 + a2 * a2 * t2;
    Ok(
        CylinderFunctional::new("two_mark", d, vec![t1, t2], move |x| {
            a1 * x[..d].iter().sum::<f64>() + a2 * x[d..].iter().sum::<f64>()
        })?
        .with_grad(move |_, o| {
            o[..d].fill(a1);
            o[d..].fill(a2);
        })
        .with_oracle(Oracle {
            log_mgf: Some(0.5 * d as f64 * var),
            optimal_drift: Some(OptimalDrift::PiecewiseConstant {
                knots: vec![t1, t2],
                values: vec![vec![a1 + a2; d], vec![a2; d]],
            }),
        }),
    )
}

pub fn bounded_smooth(t: f64, d: usize) -> Result<CylinderFunctional> {
    Ok(
        CylinderFunctional::new("bounded_smooth", d, vec![t], |x| x[0].sin())?
            .with_grad(|x, o| {
                o.fill(0.0);
                o[0] = x[0].cos();
            })
            .with_bounds(-1.0, 1.0)
            // The ratio form of the Föllmer drift is an average of ∇f.
            .with_drift_bound(1.0),
    )
}

pub fn unbounded_below(t: f64, d: usize) -> Result<CylinderFunctional> {
    Ok(CylinderFunctional::new("unbounded_below", d, vec![t], |x| {
        -x.iter().map(|v| v * v).sum::<f64>().sqrt()
    })?
    .with_grad(|x, o| {
        let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (oi, xi) in o.iter_mut().zip(x) {
            *oi = if r > 0.0 { -xi / r } else { 0.0 };
        }
    })
    .with_bounds(f64::NEG_INFINITY, 0.0)
    .with_oracle(Oracle {
        log_mgf: (d <= 3).then(|| neg_norm_log_mgf(t.sqrt(), d)),
        optimal_drift: None,
    }))
}

/// `log E e^{−s|Z|}` for `Z ~ N(0, I_d)`, `d ≤ 3`, from the chi densities and
/// `I_n(s) = ∫₀^∞ r^n e^{−r²/2 − s r} dr`, which satisfy `I_1 + s I_0 = 1`
/// and `I_2 + s I_1 = I_0`. Larger `d` has no oracle.
fn neg_norm_log_mgf(s: f64, d: usize) -> f64 {
    use std::f64::consts::{FRAC_2_PI, PI};
    let i0 = (0.5 * PI).sqrt() * (0.5 * s * s).exp() * statrs::function::erf::erfc(s / 2f64.sqrt());
    let i1 = 1.0 - s * i0;
    match d {
        1 => (FRAC_2_PI.sqrt() * i0).ln(),
        2 => i1.ln(),
        3 => (FRAC_2_PI.sqrt() * (i0 - s * i1)).ln(),
        _ => unreachable!("oracle is defined for d ≤ 3"),
    }
}

/// `f = log φ` with `φ(x) = 1 + amp · sin x_1`: a density bounded below by
/// `1 − amp` with `|∇φ| ≤ amp`, so the Föllmer drift is bounded by `amp / (1 − amp)`.
pub fn log_density(amp: f64, t: f64, d: usize) -> Result<CylinderFunctional> {
    if !(amp.abs() < 1.0) {
        return Err(Error::invalid("log_density needs |amp| < 1"));
    }
    Ok(
        CylinderFunctional::new("log_density", d, vec![t], move |x| {
            (1.0 + amp * x[0].sin()).ln()
        })?
        .with_grad(move |x, o| {
            o.fill(0.0);
            o[0] = amp * x[0].cos() / (1.0 + amp * x[0].sin());
        })
        .with_bounds((1.0 - amp.abs()).ln(), (1.0 + amp.abs()).ln())
        .with_drift_bound(amp.abs() / (1.0 - amp.abs())),
    )
}

/// Thresholds of the heavy-tail heuristic for `E[e^F] < ∞`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailConfig {
    /// Share of the largest samples inspected.
    pub top_fraction: f64,
    /// Flag when those samples carry more than this share of `Σ e^F`.
    pub mass_threshold: f64,
    pub sub_batches: usize,
}

impl Default for TailConfig {
    fn default() -> Self {
        TailConfig {
            top_fraction: 1e-3,
            mass_threshold: 0.5,
            sub_batches: 10,
        }
    }
}

/// Empirical, advisory diagnosis of the integrability assumptions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntegrabilityReport {
    pub a1_ok: bool,
    pub a2_ok: bool,
    pub n_samples: usize,
    pub top_k: usize,
    /// Share of `Σ e^F` carried by the `top_k` largest samples.
    pub tail_fraction: f64,
    /// Sample mean of `F₋ = max(−F, 0)` and its sub-batch means.
    pub f_minus_mean: f64,
    pub f_minus_sub_means: Vec<f64>,
}

pub fn check_integrability(
    functional: &CylinderFunctional,
    paths: &dyn PathSource,
    config: &TailConfig,
) -> Result<IntegrabilityReport> {
    let values: Vec<f64> = map_chunks(paths, |chunk| {
        if chunk.kind() != PathKind::Brownian {
            return Err(Error::invalid(
                "integrability is diagnosed on Brownian paths",
            ));
        }
        evaluate(functional, chunk)
    })?
    .concat();
    let n = values.len();
    let k = ((config.top_fraction * n as f64).ceil() as usize).clamp(1, n);

    let finite_max = values
        .iter()
        .copied()
        .filter(|v| !v.is_nan())
        .fold(f64::NEG_INFINITY, f64::max);
    let tail_fraction = if values.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        1.0
    } else if finite_max == f64::NEG_INFINITY {
        k as f64 / n as f64
    } else {
        let mut sorted = values.clone();
        sorted.sort_unstable_by(|a, b| b.total_cmp(a));
        let w = |v: f64| (v - finite_max).exp();
        let top: f64 = sorted[..k].iter().map(|&v| w(v)).sum();
        let total: f64 = top + sorted[k..].iter().map(|&v| w(v)).sum::<f64>();
        top / total
    };

    let f_minus: Vec<f64> = values.iter().map(|v| (-v).max(0.0)).collect();
    let whole = Moments::from_slice(&f_minus);
    let groups = config.sub_batches.clamp(1, n);
    let size = n / groups;
    let sub_means: Vec<f64> = (0..groups)
        .map(|g| {
            let end = if g + 1 == groups { n } else { (g + 1) * size };
            Moments::from_slice(&f_minus[g * size..end]).mean()
        })
        .collect();
    let band = 6.0 * whole.variance().sqrt() / (size.max(1) as f64).sqrt();
    let a2_ok = whole.mean().is_finite()
        && sub_means
            .iter()
            .all(|m| m.is_finite() && (m - whole.mean()).abs() <= band);

    Ok(IntegrabilityReport {
        a1_ok: tail_fraction <= config.mass_threshold,
        a2_ok,
        n_samples: n,
        top_k: k,
        tail_fraction,
        f_minus_mean: whole.mean(),
        f_minus_sub_means: sub_means,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paths::{sample_brownian, BrownianStream, TimeGrid};
    use crate::quadrature::GaussianQuadrature;
    use proptest::prelude::*;

    fn batch_with_terminal(values: &[f64]) -> PathBatch {
        let g = Arc::new(TimeGrid::new(1.0, 1, &[]).unwrap());
        let v: Vec<f64> = values.iter().flat_map(|&x| [0.0, x]).collect();
        PathBatch::from_values(g, 1, v, 0, PathKind::Brownian).unwrap()
    }

    #[test]
    fn evaluate_examples() {
        let b = batch_with_terminal(&[0.7, 2.0]);
        assert_eq!(evaluate(&linear(1.0, 1.0, 1).unwrap(), &b).unwrap()[0], 0.7);
        assert_eq!(
            evaluate(&zero(1.0, 1).unwrap(), &b).unwrap(),
            vec![0.0, 0.0]
        );
        assert_eq!(
            evaluate(&quadratic(0.25, 1.0, 1).unwrap(), &b).unwrap()[1],
            1.0
        );
    }

    #[test]
    fn mark_off_grid_is_invalid() {
        let b = batch_with_terminal(&[0.7]);
        let f = linear(1.0, 0.3, 1).unwrap();
        assert!(matches!(evaluate(&f, &b), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn truncation_examples() {
        let b = batch_with_terminal(&[0.7, -3.0]);
        let lin = linear(1.0, 1.0, 1).unwrap();
        let same = truncate(&lin, TruncationSpec::none()).unwrap();
        assert_eq!(evaluate(&same, &b).unwrap(), vec![0.7, -3.0]);
        assert_eq!(same.log_mgf(), Some(0.5));
        let capped = truncate(&lin, TruncationSpec::cap(0.0)).unwrap();
        assert_eq!(evaluate(&capped, &b).unwrap(), vec![0.0, -3.0]);
        assert!(capped.oracle().is_none());
        let q = quadratic(0.25, 1.0, 1).unwrap();
        let floored = truncate(&q, TruncationSpec::floor(0.0)).unwrap();
        assert_eq!(evaluate(&floored, &b).unwrap(), evaluate(&q, &b).unwrap());
        assert!(matches!(
            truncate(
                &lin,
                TruncationSpec {
                    upper: Some(-2.0),
                    lower: Some(1.0)
                }
            ),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn catalog_contains_the_required_entries() {
        let names: Vec<String> = catalog_entries()
            .iter()
            .map(|e| e.name.to_string())
            .collect();
        assert_eq!(catalog(1).len(), names.len());
        for n in [
            "linear",
            "quadratic",
            "two_mark",
            "bounded_smooth",
            "unbounded_below",
            "diverging",
        ] {
            assert!(names.iter().any(|x| x == n), "{n}");
        }
        let div = parse_functional("diverging").unwrap();
        assert!(!div.satisfies_a1());
        assert!(div.log_mgf().is_none());
        assert!(parse_functional("diverging:c=0.1").is_err());
        assert!(parse_functional("linear:b=1").is_err());
        assert!(parse_functional("nope").is_err());
    }

    #[test]
    fn oracle_values() {
        assert_eq!(parse_functional("linear:a=1").unwrap().log_mgf(), Some(0.5));
        let q = parse_functional("quadratic:c=0.25,t=1")
            .unwrap()
            .log_mgf()
            .unwrap();
        assert!((q - 0.346_573_590_279_972_6).abs() < 1e-12);
        let two = parse_functional("two_mark").unwrap().log_mgf().unwrap();
        assert!((two - 1.25).abs() < 1e-15);
    }

    /// Independent check of every smooth closed-form log-MGF: quadrature over
    /// the Brownian increments between marks, written directly here.
    #[test]
    fn oracles_match_gauss_hermite() {
        for d in 1..=3 {
            let smooth = |f: &CylinderFunctional| f.name() != "unbounded_below";
            for f in catalog(d)
                .into_iter()
                .filter(|f| f.log_mgf().is_some() && f.n_inputs() <= 3 && smooth(f))
            {
                let q = GaussianQuadrature::new(
                    f.n_inputs(),
                    64.min(if f.n_inputs() == 1 { 64 } else { 32 }),
                )
                .unwrap();
                let marks = f.marks().to_vec();
                let v = q
                    .log_expectation_exp(|z| {
                        let mut x = vec![0.0; f.n_inputs()];
                        let mut prev = 0.0;
                        for (i, &t) in marks.iter().enumerate() {
                            let s = (t - prev).sqrt();
                            for j in 0..d {
                                let before = if i == 0 { 0.0 } else { x[(i - 1) * d + j] };
                                x[i * d + j] = before + s * z[i * d + j];
                            }
                            prev = t;
                        }
                        f.value(&x)
                    })
                    .unwrap();
                assert!((v - f.log_mgf().unwrap()).abs() < 1e-9, "{}: {v}", f.spec());
            }
        }
    }

    /// `−|x|` has a kink at the origin, so its oracle is checked against
    /// Simpson's rule on the chi density of `|B_t|` instead.
    #[test]
    fn kinked_oracle_matches_radial_integral() {
        use std::f64::consts::PI;
        let chi = |d: usize, r: f64| match d {
            1 => (2.0 / PI).sqrt() * (-0.5 * r * r).exp(),
            2 => r * (-0.5 * r * r).exp(),
            _ => (2.0 / PI).sqrt() * r * r * (-0.5 * r * r).exp(),
        };
        for d in 1..=3 {
            for t in [0.5f64, 1.0, 2.0] {
                let (n, top) = (200_000, 40.0);
                let h = top / n as f64;
                let g = |r: f64| chi(d, r) * (-t.sqrt() * r).exp();
                let mut sum = g(0.0) + g(top);
                for i in 1..n {
                    sum += if i % 2 == 1 { 4.0 } else { 2.0 } * g(i as f64 * h);
                }
                let want = (sum * h / 3.0).ln();
                let got = unbounded_below(t, d).unwrap().log_mgf().unwrap();
                assert!((got - want).abs() < 1e-9, "d={d} t={t}: {got} vs {want}");
            }
        }
        assert!(unbounded_below(1.0, 4).unwrap().log_mgf().is_none());
    }

    #[test]
    fn gradients_match_central_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for d in [1, 2] {
            for f in catalog(d) {
                let n = f.n_inputs();
                let mut g = vec![0.0; n];
                for _ in 0..100 {
                    let x: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
                    assert!(f.gradient(&x, &mut g));
                    for i in 0..n {
                        let h = 1e-5;
                        let mut xp = x.clone();
                        let mut xm = x.clone();
                        xp[i] += h;
                        xm[i] -= h;
                        let fd = (f.value(&xp) - f.value(&xm)) / (2.0 * h);
                        assert!(
                            (fd - g[i]).abs() <= 1e-6 * fd.abs().max(1.0),
                            "{} coord {i}: {fd} vs {}",
                            f.spec(),
                            g[i]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn integrability_of_linear_and_zero() {
        let g = Arc::new(TimeGrid::new(1.0, 1, &[]).unwrap());
        let base = BrownianStream::new(g, 1, 200_000, 5).unwrap();
        let r = check_integrability(&linear(1.0, 1.0, 1).unwrap(), &base, &TailConfig::default())
            .unwrap();
        assert!(r.a1_ok && r.a2_ok, "{r:?}");
        let r = check_integrability(&zero(1.0, 1).unwrap(), &base, &TailConfig::default()).unwrap();
        assert!(r.a1_ok && r.a2_ok);
        assert_eq!(r.tail_fraction, r.top_k as f64 / r.n_samples as f64);
        assert_eq!(r.top_k, 200);
    }

    #[test]
    fn integrability_flags_the_diverging_entry() {
        let g = Arc::new(TimeGrid::new(1.0, 1, &[]).unwrap());
        let base = BrownianStream::new(g, 1, 1_000_000, 6).unwrap();
        let f = parse_functional("diverging:c=0.6,t=1").unwrap();
        let r = check_integrability(&f, &base, &TailConfig::default()).unwrap();
        assert!(!r.a1_ok, "tail fraction {}", r.tail_fraction);
        assert!(r.a2_ok);
    }

    proptest! {
        #[test]
        fn truncation_bounds_and_monotonicity(m in -3.0f64..3.0, dm in 0.0f64..3.0, n in -2.0f64..3.0, seed in 0u64..50) {
            prop_assume!(m > -n);
            let g = Arc::new(TimeGrid::new(1.0, 2, &[]).unwrap());
            let b = sample_brownian(g, 1, 64, seed).unwrap();
            let f = quadratic(0.7, 1.0, 1).unwrap();
            let lin = linear(-1.5, 1.0, 1).unwrap();
            for base in [f, lin] {
                let lo = truncate(&base, TruncationSpec { upper: Some(m), lower: Some(n) }).unwrap();
                let hi = truncate(&base, TruncationSpec { upper: Some(m + dm), lower: Some(n) }).unwrap();
                let a = evaluate(&lo, &b).unwrap();
                let c = evaluate(&hi, &b).unwrap();
                for (x, y) in a.iter().zip(&c) {
                    prop_assert!(-n <= *x && *x <= m);
                    prop_assert!(x <= y);
                }
            }
        }
    }
}
