//! Ornstein–Uhlenbeck semigroup on `(R^d, γ)` by Gauss–Hermite quadrature,
//! exponential hypercontractivity, its conditional-expectation form on
//! Brownian paths, and the Gaussian log-Sobolev inequality.

use std::fmt;
use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::functionals::{GradFn, ScalarFn};
use crate::params::SpecString;
use crate::paths::{map_chunks, PathBatch, PathKind, PathSource, TimeGrid};
use crate::quadrature::{GaussianQuadrature, MAX_DIM};
use crate::stats::{combined_se, EstimatorReport, LogMeanExp, Method};

/// A function on `R^d` with an optional gradient and a tag for whether
/// `f ∈ L¹(γ)` and `e^f ∈ L¹(γ)`.
#[derive(Clone)]
pub struct ScalarField {
    spec: String,
    dim: usize,
    f: ScalarFn,
    grad: Option<GradFn>,
    satisfies_b: bool,
}

impl fmt::Debug for ScalarField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScalarField")
            .field("spec", &self.spec)
            .field("dim", &self.dim)
            .field("has_grad", &self.grad.is_some())
            .field("satisfies_b", &self.satisfies_b)
            .finish()
    }
}

impl ScalarField {
    pub fn new(
        spec: impl Into<String>,
        dim: usize,
        f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
    ) -> Result<Self> {
        if dim == 0 || dim > MAX_DIM {
            return Err(Error::invalid(format!(
                "scalar fields live in 1..={MAX_DIM} dimensions, got {dim}"
            )));
        }
        Ok(ScalarField {
            spec: spec.into(),
            dim,
            f: Arc::new(f),
            grad: None,
            satisfies_b: true,
        })
    }

    pub fn with_grad(mut self, g: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.grad = Some(Arc::new(g));
        self
    }

    /// Marks `e^f ∉ L¹(γ)`.
    pub fn violating_b(mut self) -> Self {
        self.satisfies_b = false;
        self
    }

    pub fn spec(&self) -> &str {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn satisfies_b(&self) -> bool {
        self.satisfies_b
    }

    pub fn has_grad(&self) -> bool {
        self.grad.is_some()
    }

    #[inline]
    pub fn value(&self, x: &[f64]) -> f64 {
        (self.f)(x)
    }

    /// Writes `∇f(x)` into `out`; `false` when there is no gradient.
    pub fn gradient(&self, x: &[f64], out: &mut [f64]) -> bool {
        match &self.grad {
            Some(g) => {
                g(x, out);
                true
            }
            None => false,
        }
    }
}

pub struct FieldEntry {
    pub name: &'static str,
    pub params: Vec<(&'static str, f64)>,
    pub summary: &'static str,
}

pub fn field_entries() -> Vec<FieldEntry> {
    vec![
        FieldEntry {
            name: "linear",
            params: vec![("a", 1.0), ("d", 1.0)],
            summary: "a · Σ x_j",
        },
        FieldEntry {
            name: "constant",
            params: vec![("c", 0.5), ("d", 1.0)],
            summary: "c",
        },
        FieldEntry {
            name: "sin",
            params: vec![],
            summary: "sin x, d = 1",
        },
        FieldEntry {
            name: "quadratic",
            params: vec![("c", 0.25)],
            summary: "c x², d = 1, c < 1/2",
        },
        FieldEntry {
            name: "exp",
            params: vec![("a", 1.0)],
            summary: "e^{a x}, d = 1; e^f is not γ-integrable",
        },
        FieldEntry {
            name: "one_plus_half_sin",
            params: vec![],
            summary: "1 + sin(x)/2, d = 1",
        },
        FieldEntry {
            name: "product",
            params: vec![("c", 0.25)],
            summary: "c x_0 x_1, d = 2, |c| < 1",
        },
    ]
}

/// Parses `linear:a=1,d=2`, `quadratic:c=0.25`, `sin`, … into a field.
pub fn parse_field(s: &str) -> Result<ScalarField> {
    let spec = SpecString::parse(s)?;
    let entry = field_entries()
        .into_iter()
        .find(|e| e.name == spec.name)
        .ok_or_else(|| Error::invalid(format!("unknown scalar field {:?}", spec.name)))?;
    let keys: Vec<&str> = entry.params.iter().map(|p| p.0).collect();
    spec.expect_keys(&keys)?;
    let p = |k: &str| {
        spec.get(
            k,
            entry.params.iter().find(|e| e.0 == k).map_or(0.0, |e| e.1),
        )
    };
    let canon = if entry.params.is_empty() {
        entry.name.to_string()
    } else {
        let args: Vec<String> = entry
            .params
            .iter()
            .map(|(k, _)| format!("{k}={}", p(k)))
            .collect();
        format!("{}:{}", entry.name, args.join(","))
    };
    let dim = match spec.named.get("d") {
        Some(_) => spec.get_usize("d", 1)?,
        None => 1,
    };
    let field = match entry.name {
        "linear" => {
            let a = p("a");
            ScalarField::new(canon, dim, move |x| a * x.iter().sum::<f64>())?
                .with_grad(move |_, o| o.fill(a))
        }
        "constant" => {
            let c = p("c");
            ScalarField::new(canon, dim, move |_| c)?.with_grad(|_, o| o.fill(0.0))
        }
        "sin" => ScalarField::new(canon, 1, |x| x[0].sin())?.with_grad(|x, o| o[0] = x[0].cos()),
        "quadratic" => {
            let c = p("c");
            let f = ScalarField::new(canon, 1, move |x| c * x[0] * x[0])?
                .with_grad(move |x, o| o[0] = 2.0 * c * x[0]);
            if c < 0.5 {
                f
            } else {
                f.violating_b()
            }
        }
        "exp" => {
            let a = p("a");
            ScalarField::new(canon, 1, move |x| (a * x[0]).exp())?
                .with_grad(move |x, o| o[0] = a * (a * x[0]).exp())
                .violating_b()
        }
        "one_plus_half_sin" => ScalarField::new(canon, 1, |x| 1.0 + 0.5 * x[0].sin())?
            .with_grad(|x, o| o[0] = 0.5 * x[0].cos()),
        "product" => {
            let c = p("c");
            let f = ScalarField::new(canon, 2, move |x| c * x[0] * x[1])?.with_grad(move |x, o| {
                o[0] = c * x[1];
                o[1] = c * x[0];
            });
            if c.abs() < 1.0 {
                f
            } else {
                f.violating_b()
            }
        }
        _ => unreachable!("entry names are matched above"),
    };
    Ok(field)
}

/// Every catalog field with its default parameters.
pub fn field_catalog() -> Vec<ScalarField> {
    field_entries()
        .iter()
        .map(|e| parse_field(e.name).expect("defaults are valid"))
        .collect()
}

fn check_dims(f: &ScalarField, quad: &GaussianQuadrature) -> Result<()> {
    if quad.dim() != f.dim() {
        return Err(Error::invalid(format!(
            "quadrature dimension {} does not match field dimension {}",
            quad.dim(),
            f.dim()
        )));
    }
    Ok(())
}

/// `∫ f(a x + s y) γ(dy)`.
fn gaussian_smooth(f: &ScalarField, a: f64, s: f64, x: &[f64], quad: &GaussianQuadrature) -> f64 {
    let mut z = vec![0.0; x.len()];
    quad.expectation(|y| {
        for j in 0..z.len() {
            z[j] = a * x[j] + s * y[j];
        }
        f.value(&z)
    })
}

/// `(Q_t f)(x) = ∫ f(e^{−t} x + √(1 − e^{−2t}) y) γ(dy)`; `Q_0 f = f` exactly.
pub fn ou_apply(f: &ScalarField, t: f64, x: &[f64], quad: &GaussianQuadrature) -> Result<f64> {
    check_dims(f, quad)?;
    if !(t >= 0.0 && t.is_finite()) {
        return Err(Error::invalid(format!(
            "semigroup time must be finite and ≥ 0, got {t}"
        )));
    }
    if x.len() != f.dim() {
        return Err(Error::invalid("point dimension does not match the field"));
    }
    if t == 0.0 {
        return Ok(f.value(x));
    }
    Ok(gaussian_smooth(
        f,
        (-t).exp(),
        (-(-2.0 * t).exp_m1()).sqrt(),
        x,
        quad,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EhcReport {
    pub t: f64,
    /// `log ‖exp(Q_t f)‖_{L^{e^{2t}}(γ)}`
    pub log_lhs: f64,
    /// `log ‖e^f‖_{L¹(γ)}`
    pub log_rhs: f64,
    pub lhs_norm: f64,
    pub rhs_norm: f64,
    /// `rhs_norm − lhs_norm`
    pub deficit: f64,
}

/// Exponential hypercontractivity `‖exp(Q_t f)‖_{L^{e^{2t}}(γ)} ≤ ‖e^f‖_{L¹(γ)}`,
/// both sides by Laplace-centred quadrature in the log domain.
pub fn ehc_check(f: &ScalarField, t: f64, quad: &GaussianQuadrature) -> Result<EhcReport> {
    check_dims(f, quad)?;
    if !f.satisfies_b() {
        return Err(Error::ContractViolation(format!(
            "{} does not have e^f ∈ L¹(γ)",
            f.spec()
        )));
    }
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::invalid(format!(
            "hypercontractivity time must be positive, got {t}"
        )));
    }
    let p = (2.0 * t).exp();
    let (a, s) = ((-t).exp(), (-(-2.0 * t).exp_m1()).sqrt());
    let log_lhs = quad.log_expectation_exp_adaptive(|x| p * gaussian_smooth(f, a, s, x, quad))? / p;
    let log_rhs = quad.log_expectation_exp_adaptive(|x| f.value(x))?;
    if !(log_lhs.is_finite() && log_rhs.is_finite()) {
        return Err(Error::numeric(
            None,
            format!("non-finite norm for {}; assumption (B) fails", f.spec()),
        ));
    }
    let (lhs_norm, rhs_norm) = (log_lhs.exp(), log_rhs.exp());
    Ok(EhcReport {
        t,
        log_lhs,
        log_rhs,
        lhs_norm,
        rhs_norm,
        deficit: rhs_norm - lhs_norm,
    })
}

/// `g(t, x) = E[f(x + B_1 − B_t)] = ∫ f(x + √(1 − t) y) γ(dy)`; `g(1, x) = f(x)` exactly.
pub fn conditional_g(f: &ScalarField, t: f64, x: &[f64], quad: &GaussianQuadrature) -> Result<f64> {
    check_dims(f, quad)?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!(
            "conditioning time must lie in [0, 1], got {t}"
        )));
    }
    if t == 1.0 {
        return Ok(f.value(x));
    }
    Ok(gaussian_smooth(f, 1.0, (1.0 - t).sqrt(), x, quad))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RehcReport {
    pub t: f64,
    /// `t · log E[exp(g(t, B_t) / t)]` by Monte Carlo over `B_t`.
    pub lhs: EstimatorReport,
    /// `log E[e^{f(B_1)}]` by quadrature.
    pub rhs: EstimatorReport,
    pub slack: f64,
    pub slack_se: f64,
}

/// Conditional form `t · log E[exp(E[f(B_1) | F_t] / t)] ≤ log E[e^{f(B_1)}]`.
///
/// The inner conditional expectation is `g(t, B_t)` by quadrature; the outer
/// expectation is Monte Carlo over `base`, which needs nodes at `t` and `1`.
pub fn rehc_check(f: &ScalarField, t: f64, base: &dyn PathSource) -> Result<RehcReport> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::invalid(format!("t must lie in (0, 1], got {t}")));
    }
    if base.dim() != f.dim() {
        return Err(Error::invalid("path dimension does not match the field"));
    }
    let grid = base.grid();
    let kt = grid
        .index_of(t)
        .ok_or_else(|| Error::invalid(format!("time {t} is not a grid node")))?;
    grid.index_of(1.0)
        .ok_or_else(|| Error::invalid("time 1 is not a grid node"))?;
    let quad = GaussianQuadrature::standard(f.dim())?;
    let parts = map_chunks(base, |chunk| {
        if chunk.kind() != PathKind::Brownian {
            return Err(Error::invalid(
                "hypercontractivity is checked on Brownian paths",
            ));
        }
        let vals = (0..chunk.n_paths())
            .map(|p| conditional_g(f, t, chunk.at(p, kt), &quad).map(|g| g / t))
            .collect::<Result<Vec<f64>>>()?;
        LogMeanExp::from_slice(&vals)
    })?;
    let mut acc = LogMeanExp::default();
    for part in &parts {
        acc.merge(part);
    }
    let (value, se) = acc.finish()?;
    let lhs = EstimatorReport {
        value: t * value,
        std_error: t * se,
        n_samples: acc.count() as usize,
        seed: Some(base.seed()),
        method: Method::MonteCarlo,
    };
    let rhs = EstimatorReport {
        value: quad.log_expectation_exp_adaptive(|x| f.value(x))?,
        std_error: 0.0,
        n_samples: quad.len(),
        seed: None,
        method: Method::Quadrature,
    };
    Ok(RehcReport {
        t,
        slack: rhs.value - lhs.value,
        slack_se: combined_se(lhs.std_error, rhs.std_error),
        lhs,
        rhs,
    })
}

/// Uniform grid on `[0, 1]` merged with its image under `s ↦ t s`, marks `{t, 1}`.
pub fn rehc_grid(steps: usize, t: f64) -> Result<TimeGrid> {
    if steps == 0 {
        return Err(Error::invalid("steps must be positive"));
    }
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::invalid(format!("t must lie in (0, 1], got {t}")));
    }
    let uniform: Vec<f64> = (0..=steps).map(|k| k as f64 / steps as f64).collect();
    let mut nodes: Vec<f64> = uniform
        .iter()
        .chain(uniform.iter().map(|s| t * s).collect::<Vec<_>>().iter())
        .copied()
        .collect();
    nodes.sort_by(f64::total_cmp);
    nodes.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    let marks: &[f64] = if t < 1.0 { &[t, 1.0] } else { &[1.0] };
    TimeGrid::from_nodes(nodes, marks)
}

/// `W_s = t^{−1/2} B_{t s}` on the nodes `s` of the base grid whose image `t s`
/// is also a node. With a [`rehc_grid`] this keeps every uniform node.
pub fn rescale_path(base: &PathBatch, t: f64) -> Result<PathBatch> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::invalid(format!("t must lie in (0, 1], got {t}")));
    }
    let grid = base.grid();
    if (grid.horizon() - 1.0).abs() > 1e-12 {
        return Err(Error::invalid("rescaling needs a grid on [0, 1]"));
    }
    if t == 1.0 {
        return Ok(base.clone());
    }
    let pairs: Vec<(f64, usize)> = grid
        .nodes()
        .iter()
        .filter_map(|&s| grid.index_of(t * s).map(|k| (s, k)))
        .collect();
    if pairs.len() < 2 || (pairs.last().unwrap().0 - 1.0).abs() > 1e-12 {
        return Err(Error::invalid(format!(
            "grid does not contain the image of its nodes under s ↦ {t}s"
        )));
    }
    let out_grid = Arc::new(TimeGrid::from_nodes(
        pairs.iter().map(|p| p.0).collect(),
        &[],
    )?);
    let d = base.dim();
    let scale = t.sqrt().recip();
    let mut values = Vec::with_capacity(base.n_paths() * pairs.len() * d);
    for p in 0..base.n_paths() {
        for &(_, k) in &pairs {
            values.extend(base.at(p, k).iter().map(|v| scale * v));
        }
    }
    PathBatch::from_values(out_grid, d, values, base.seed(), PathKind::Brownian)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LsiReport {
    /// `∫ f² log|f| dγ`
    pub lhs: f64,
    /// `‖∇f‖²_{L²(γ)} + ‖f‖²_{L²(γ)} log ‖f‖_{L²(γ)}`
    pub rhs: f64,
    pub deficit: f64,
}

/// Gaussian log-Sobolev inequality by quadrature, with `f² log|f| = 0` at `f = 0`.
pub fn lsi_check(f: &ScalarField, quad: &GaussianQuadrature) -> Result<LsiReport> {
    check_dims(f, quad)?;
    if !f.has_grad() {
        return Err(Error::unsupported(format!("{} has no gradient", f.spec())));
    }
    let mut g = vec![0.0; f.dim()];
    let lhs = quad.expectation(|x| {
        let v = f.value(x);
        if v == 0.0 {
            0.0
        } else {
            v * v * v.abs().ln()
        }
    });
    let energy = quad.expectation(|x| {
        f.gradient(x, &mut g);
        g.iter().map(|v| v * v).sum()
    });
    let norm_sq = quad.expectation(|x| f.value(x).powi(2));
    let entropy_term = if norm_sq == 0.0 {
        0.0
    } else {
        0.5 * norm_sq * norm_sq.ln()
    };
    let rhs = energy + entropy_term;
    if !(lhs.is_finite() && rhs.is_finite()) {
        return Err(Error::numeric(
            None,
            format!("non-finite log-Sobolev integrals for {}", f.spec()),
        ));
    }
    Ok(LsiReport {
        lhs,
        rhs,
        deficit: rhs - lhs,
    })
}
