//! Concrete drift policies and the serializable policy spec used by configs.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::follmer::{DriftForm, FollmerPolicy};
use crate::functionals::CylinderFunctional;
use crate::params::SpecString;
use crate::paths::{AffineDrift, DriftPolicy, TimeGrid};

fn identity_gain(d: usize, g: f64) -> Vec<f64> {
    let mut a = vec![0.0; d * d];
    for i in 0..d {
        a[i * d + i] = g;
    }
    a
}

#[derive(Debug, Clone)]
pub struct ZeroPolicy {
    dim: usize,
}

impl ZeroPolicy {
    pub fn new(dim: usize) -> Self {
        ZeroPolicy { dim }
    }
}

impl DriftPolicy for ZeroPolicy {
    fn dim(&self) -> usize {
        self.dim
    }
    fn drift(&self, _grid: &TimeGrid, _k: usize, _history: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn sup_bound(&self) -> Option<f64> {
        Some(0.0)
    }
    fn affine(&self, _grid: &TimeGrid, _k: usize) -> Option<AffineDrift> {
        Some(AffineDrift {
            gain: vec![0.0; self.dim * self.dim],
            offset: vec![0.0; self.dim],
        })
    }
    fn label(&self) -> String {
        "zero".into()
    }
}

/// Deterministic drift `v_t = a` for `t` below the cutoff.
#[derive(Debug, Clone)]
pub struct ConstantPolicy {
    value: Vec<f64>,
    cutoff: Option<f64>,
}

impl ConstantPolicy {
    pub fn new(value: Vec<f64>) -> Self {
        ConstantPolicy {
            value,
            cutoff: None,
        }
    }

    pub fn with_cutoff(mut self, cutoff: f64) -> Self {
        self.cutoff = Some(cutoff);
        self
    }

    fn active(&self, t: f64) -> bool {
        self.cutoff.is_none_or(|c| t < c)
    }
}

impl DriftPolicy for ConstantPolicy {
    fn dim(&self) -> usize {
        self.value.len()
    }
    fn drift(&self, grid: &TimeGrid, k: usize, _history: &[f64], out: &mut [f64]) {
        if self.active(grid.time(k)) {
            out.copy_from_slice(&self.value);
        } else {
            out.fill(0.0);
        }
    }
    fn sup_bound(&self) -> Option<f64> {
        Some(self.value.iter().map(|v| v * v).sum::<f64>().sqrt())
    }
    fn cutoff(&self) -> Option<f64> {
        self.cutoff
    }
    fn affine(&self, grid: &TimeGrid, k: usize) -> Option<AffineDrift> {
        let d = self.value.len();
        let offset = if self.active(grid.time(k)) {
            self.value.clone()
        } else {
            vec![0.0; d]
        };
        Some(AffineDrift {
            gain: vec![0.0; d * d],
            offset,
        })
    }
    fn label(&self) -> String {
        format!("constant{:?}", self.value)
    }
}

/// Open-loop drift equal to `values[i]` on `[knots[i-1], knots[i])`, zero after the last knot.
#[derive(Debug, Clone)]
pub struct PiecewiseConstant {
    knots: Vec<f64>,
    values: Vec<Vec<f64>>,
}

impl PiecewiseConstant {
    pub fn new(knots: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Self> {
        if knots.is_empty() || knots.len() != values.len() {
            return Err(Error::invalid("need one value per knot"));
        }
        if knots.windows(2).any(|w| w[1] <= w[0]) || knots[0] <= 0.0 {
            return Err(Error::invalid(
                "knots must be positive and strictly increasing",
            ));
        }
        let d = values[0].len();
        if d == 0 || values.iter().any(|v| v.len() != d) {
            return Err(Error::invalid("values must share one dimension"));
        }
        Ok(PiecewiseConstant { knots, values })
    }

    fn value_at(&self, t: f64) -> Option<&[f64]> {
        let i = self.knots.partition_point(|&k| k <= t);
        self.values.get(i).map(Vec::as_slice)
    }
}

impl DriftPolicy for PiecewiseConstant {
    fn dim(&self) -> usize {
        self.values[0].len()
    }
    fn drift(&self, grid: &TimeGrid, k: usize, _history: &[f64], out: &mut [f64]) {
        match self.value_at(grid.time(k)) {
            Some(v) => out.copy_from_slice(v),
            None => out.fill(0.0),
        }
    }
    fn sup_bound(&self) -> Option<f64> {
        self.values
            .iter()
            .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
            .reduce(f64::max)
    }
    fn cutoff(&self) -> Option<f64> {
        self.knots.last().copied()
    }
    fn affine(&self, grid: &TimeGrid, k: usize) -> Option<AffineDrift> {
        let d = self.dim();
        Some(AffineDrift {
            gain: vec![0.0; d * d],
            offset: self
                .value_at(grid.time(k))
                .map_or_else(|| vec![0.0; d], <[f64]>::to_vec),
        })
    }
    fn label(&self) -> String {
        format!("piecewise_constant(knots={:?})", self.knots)
    }
}

/// Markov feedback `v(t, x) = g(t) · x + b` with a scalar time-dependent gain.
#[derive(Clone)]
pub struct AffineFeedback {
    dim: usize,
    gain: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    offset: Vec<f64>,
    cutoff: Option<f64>,
    label: String,
}

impl fmt::Debug for AffineFeedback {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AffineFeedback")
            .field("label", &self.label)
            .finish()
    }
}

impl AffineFeedback {
    pub fn new(
        dim: usize,
        gain: impl Fn(f64) -> f64 + Send + Sync + 'static,
        offset: Vec<f64>,
        label: impl Into<String>,
    ) -> Self {
        assert_eq!(offset.len(), dim);
        AffineFeedback {
            dim,
            gain: Arc::new(gain),
            offset,
            cutoff: None,
            label: label.into(),
        }
    }

    /// `v(t, x) = rate · x`; `rate = -1` gives the Ornstein–Uhlenbeck feedback.
    pub fn ou(dim: usize, rate: f64) -> Self {
        Self::new(
            dim,
            move |_| rate,
            vec![0.0; dim],
            format!("linear_feedback(a={rate})"),
        )
    }

    pub fn with_cutoff(mut self, cutoff: f64) -> Self {
        self.cutoff = Some(cutoff);
        self
    }

    fn active(&self, t: f64) -> bool {
        self.cutoff.is_none_or(|c| t < c)
    }
}

impl DriftPolicy for AffineFeedback {
    fn dim(&self) -> usize {
        self.dim
    }
    fn drift(&self, grid: &TimeGrid, k: usize, history: &[f64], out: &mut [f64]) {
        let t = grid.time(k);
        if !self.active(t) {
            out.fill(0.0);
            return;
        }
        let g = (self.gain)(t);
        let x = &history[k * self.dim..];
        for j in 0..self.dim {
            out[j] = g * x[j] + self.offset[j];
        }
    }
    fn cutoff(&self) -> Option<f64> {
        self.cutoff
    }
    fn affine(&self, grid: &TimeGrid, k: usize) -> Option<AffineDrift> {
        let t = grid.time(k);
        Some(if self.active(t) {
            AffineDrift {
                gain: identity_gain(self.dim, (self.gain)(t)),
                offset: self.offset.clone(),
            }
        } else {
            AffineDrift {
                gain: vec![0.0; self.dim * self.dim],
                offset: vec![0.0; self.dim],
            }
        })
    }
    fn label(&self) -> String {
        self.label.clone()
    }
}

/// Radially clamps an inner policy to `|v| ≤ bound`.
#[derive(Debug, Clone)]
pub struct Clamped<P> {
    inner: P,
    bound: f64,
}

impl<P: DriftPolicy> Clamped<P> {
    pub fn new(inner: P, bound: f64) -> Result<Self> {
        if !(bound.is_finite() && bound >= 0.0) {
            return Err(Error::invalid(format!(
                "clamp must be finite and non-negative, got {bound}"
            )));
        }
        Ok(Clamped { inner, bound })
    }
}

/// Scales `v` onto the ball of radius `bound`; returns the pre-clamp norm.
pub(crate) fn clamp_radial(v: &mut [f64], bound: f64) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > bound {
        let s = bound / norm;
        v.iter_mut().for_each(|x| *x *= s);
    }
    norm
}

impl<P: DriftPolicy> DriftPolicy for Clamped<P> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn drift(&self, grid: &TimeGrid, k: usize, history: &[f64], out: &mut [f64]) {
        self.inner.drift(grid, k, history, out);
        clamp_radial(out, self.bound);
    }
    fn sup_bound(&self) -> Option<f64> {
        Some(
            self.inner
                .sup_bound()
                .map_or(self.bound, |b| b.min(self.bound)),
        )
    }
    fn cutoff(&self) -> Option<f64> {
        self.inner.cutoff()
    }
    fn label(&self) -> String {
        format!("clamp({}, {})", self.inner.label(), self.bound)
    }
}

/// Serializable description of a policy, as written in configs and on the command line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicySpec {
    Zero,
    Constant {
        value: Vec<f64>,
    },
    /// `v = a x + b` in every coordinate.
    LinearFeedback {
        a: f64,
        b: f64,
    },
    /// The functional's known optimal drift.
    Oracle,
    Follmer {
        form: DriftForm,
    },
}

impl PolicySpec {
    pub fn parse(s: &str) -> Result<Self> {
        let spec = SpecString::parse(s)?;
        match spec.name.as_str() {
            "zero" => Ok(PolicySpec::Zero),
            "constant" => {
                spec.expect_keys(&[])?;
                if spec.positional.is_empty() {
                    return Err(Error::invalid(
                        "constant policy needs a value, e.g. constant:1",
                    ));
                }
                Ok(PolicySpec::Constant {
                    value: spec.positional.clone(),
                })
            }
            "linear_feedback" | "ou" => {
                spec.expect_keys(&["a", "b"])?;
                Ok(PolicySpec::LinearFeedback {
                    a: spec.get("a", -1.0),
                    b: spec.get("b", 0.0),
                })
            }
            "oracle" => Ok(PolicySpec::Oracle),
            "follmer" => {
                spec.expect_keys(&["form"])?;
                let form = match spec.flags.get("form") {
                    None => DriftForm::Auto,
                    Some(s) => s.parse()?,
                };
                Ok(PolicySpec::Follmer { form })
            }
            other => Err(Error::invalid(format!("unknown policy {other:?}"))),
        }
    }

    /// Builds the policy for a functional of dimension `dim`.
    pub fn build(&self, functional: &CylinderFunctional) -> Result<Arc<dyn DriftPolicy>> {
        let d = functional.dim();
        Ok(match self {
            PolicySpec::Zero => Arc::new(ZeroPolicy::new(d)),
            PolicySpec::Constant { value } => {
                let v = match value.len() {
                    1 => vec![value[0]; d],
                    n if n == d => value.clone(),
                    n => {
                        return Err(Error::invalid(format!(
                            "constant of length {n} for dimension {d}"
                        )))
                    }
                };
                Arc::new(ConstantPolicy::new(v))
            }
            PolicySpec::LinearFeedback { a, b } => {
                let a = *a;
                Arc::new(AffineFeedback::new(
                    d,
                    move |_| a,
                    vec![*b; d],
                    format!("linear_feedback(a={a}, b={b})"),
                ))
            }
            PolicySpec::Oracle => functional
                .oracle()
                .and_then(|o| o.optimal_drift.as_ref())
                .ok_or_else(|| {
                    Error::unsupported(format!("{} has no oracle policy", functional.spec()))
                })?
                .policy(d)?,
            PolicySpec::Follmer { form } => {
                Arc::new(FollmerPolicy::new(functional.clone(), *form)?)
            }
        })
    }

    pub const NAMES: [&'static str; 5] =
        ["zero", "constant", "linear_feedback", "oracle", "follmer"];
}
