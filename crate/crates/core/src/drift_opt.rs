//! Parametric drift families and stochastic ascent on the control objective
//! `E[F(X) − ½ Σ|v_k|² Δt_k]`.
//!
//! Every family is linear in its parameters before the optional radial clamp,
//! so the pathwise gradient only needs `∂v/∂x` and a sparse `∂v/∂θ`.

use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::functionals::CylinderFunctional;
use crate::params::SpecString;
use crate::paths::{
    sample_brownian, AffineDrift, BrownianStream, DriftPolicy, PathBatch, TimeGrid,
};
use crate::policy::clamp_radial;
use crate::quadrature::MAX_DIM;
use crate::rng::{derive_seed, rng_for, stream};
use crate::stats::{EstimatorReport, Method};
use crate::variational::{estimate_lhs_quadrature, estimate_rhs, GapReport};

const HORIZON_TOL: f64 = 1e-12;
const GRAD_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FamilyKind {
    /// `v = b`
    Constant,
    /// `v = b_p` on the `p`-th of `pieces` equal time slices.
    PiecewiseConstant { pieces: usize },
    /// `v = A_p x + b_p` on the `p`-th time slice.
    LinearFeedback { pieces: usize },
    /// `d = 1`: bilinear interpolation of a `t_knots × x_knots` table over
    /// `[0, T] × [−x_range, x_range]`, constant in `x` outside the range.
    GridFeedback {
        t_knots: usize,
        x_knots: usize,
        x_range: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyFamily {
    pub kind: FamilyKind,
    pub dim: usize,
    pub horizon: f64,
    /// Radial bound `|v| ≤ clamp` applied to every member.
    pub clamp: Option<f64>,
}

impl PolicyFamily {
    pub fn new(kind: FamilyKind, dim: usize, horizon: f64, clamp: Option<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("dimension must be at least 1"));
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::invalid(format!(
                "family horizon must be positive, got {horizon}"
            )));
        }
        if let Some(c) = clamp {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::invalid(format!(
                    "clamp must be finite and positive, got {c}"
                )));
            }
        }
        match kind {
            FamilyKind::PiecewiseConstant { pieces } | FamilyKind::LinearFeedback { pieces }
                if pieces == 0 =>
            {
                return Err(Error::invalid(
                    "a piecewise family needs at least one piece",
                ))
            }
            FamilyKind::GridFeedback {
                t_knots,
                x_knots,
                x_range,
            } => {
                if dim != 1 {
                    return Err(Error::invalid("grid feedback is defined for d = 1 only"));
                }
                if t_knots < 2 || x_knots < 2 || !(x_range.is_finite() && x_range > 0.0) {
                    return Err(Error::invalid(
                        "grid feedback needs ≥ 2 knots per axis and a positive range",
                    ));
                }
            }
            _ => {}
        }
        Ok(PolicyFamily {
            kind,
            dim,
            horizon,
            clamp,
        })
    }

    /// `constant`, `piecewise_constant:pieces=8`, `linear_feedback:pieces=10`,
    /// `grid_feedback:t_knots=6,x_knots=13,x_range=4`; each accepts `clamp=…`.
    pub fn parse(s: &str, dim: usize, horizon: f64) -> Result<Self> {
        let spec = SpecString::parse(s)?;
        let clamp = spec.named.get("clamp").copied();
        let kind = match spec.name.as_str() {
            "constant" => {
                spec.expect_keys(&["clamp"])?;
                FamilyKind::Constant
            }
            "piecewise_constant" => {
                spec.expect_keys(&["pieces", "clamp"])?;
                FamilyKind::PiecewiseConstant {
                    pieces: spec.get_usize("pieces", 8)?,
                }
            }
            "linear_feedback" => {
                spec.expect_keys(&["pieces", "clamp"])?;
                FamilyKind::LinearFeedback {
                    pieces: spec.get_usize("pieces", 10)?,
                }
            }
            "grid_feedback" => {
                spec.expect_keys(&["t_knots", "x_knots", "x_range", "clamp"])?;
                FamilyKind::GridFeedback {
                    t_knots: spec.get_usize("t_knots", 6)?,
                    x_knots: spec.get_usize("x_knots", 13)?,
                    x_range: spec.get("x_range", 4.0),
                }
            }
            other => return Err(Error::invalid(format!("unknown policy family {other:?}"))),
        };
        Self::new(kind, dim, horizon, clamp)
    }

    pub const NAMES: [&'static str; 4] = [
        "constant",
        "piecewise_constant",
        "linear_feedback",
        "grid_feedback",
    ];

    pub fn n_params(&self) -> usize {
        let d = self.dim;
        match self.kind {
            FamilyKind::Constant => d,
            FamilyKind::PiecewiseConstant { pieces } => pieces * d,
            FamilyKind::LinearFeedback { pieces } => pieces * (d * d + d),
            FamilyKind::GridFeedback {
                t_knots, x_knots, ..
            } => t_knots * x_knots,
        }
    }

    pub fn instantiate(&self, theta: Vec<f64>) -> Result<ParametricPolicy> {
        if theta.len() != self.n_params() {
            return Err(Error::invalid(format!(
                "family has {} parameters, got {}",
                self.n_params(),
                theta.len()
            )));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("parameters must be finite"));
        }
        Ok(ParametricPolicy {
            family: self.clone(),
            theta,
        })
    }

    fn piece(&self, t: f64, pieces: usize) -> usize {
        ((t / self.horizon * pieces as f64).floor().max(0.0) as usize).min(pieces - 1)
    }

    /// Unclamped drift at `(t, x)`. `dx` receives `∂v/∂x` (`d × d`, row-major)
    /// and `dtheta` the non-zero `(parameter, coordinate, ∂v_coordinate/∂θ)`.
    fn raw(
        &self,
        theta: &[f64],
        t: f64,
        x: &[f64],
        v: &mut [f64],
        dx: Option<&mut [f64]>,
        dtheta: Option<&mut Vec<(usize, usize, f64)>>,
    ) {
        let d = self.dim;
        let mut dx = dx;
        if let Some(g) = dx.as_deref_mut() {
            g.fill(0.0);
        }
        let mut dtheta = dtheta;
        if let Some(s) = dtheta.as_deref_mut() {
            s.clear();
        }
        match self.kind {
            FamilyKind::Constant => {
                v.copy_from_slice(theta);
                if let Some(s) = dtheta {
                    s.extend((0..d).map(|j| (j, j, 1.0)));
                }
            }
            FamilyKind::PiecewiseConstant { pieces } => {
                let base = self.piece(t, pieces) * d;
                v.copy_from_slice(&theta[base..base + d]);
                if let Some(s) = dtheta {
                    s.extend((0..d).map(|j| (base + j, j, 1.0)));
                }
            }
            FamilyKind::LinearFeedback { pieces } => {
                let base = self.piece(t, pieces) * (d * d + d);
                let (a, b) = theta[base..base + d * d + d].split_at(d * d);
                for j in 0..d {
                    v[j] = b[j] + (0..d).map(|l| a[j * d + l] * x[l]).sum::<f64>();
                }
                if let Some(g) = dx {
                    g.copy_from_slice(a);
                }
                if let Some(s) = dtheta {
                    for j in 0..d {
                        for l in 0..d {
                            s.push((base + j * d + l, j, x[l]));
                        }
                        s.push((base + d * d + j, j, 1.0));
                    }
                }
            }
            FamilyKind::GridFeedback {
                t_knots,
                x_knots,
                x_range,
            } => {
                let (ti, tw) = locate(t / self.horizon, t_knots);
                let xs = (x[0] + x_range) / (2.0 * x_range);
                let inside = (0.0..=1.0).contains(&xs);
                let (xi, xw) = locate(xs, x_knots);
                let idx = |a: usize, b: usize| a * x_knots + b;
                let corners = [
                    (idx(ti, xi), (1.0 - tw) * (1.0 - xw)),
                    (idx(ti, xi + 1), (1.0 - tw) * xw),
                    (idx(ti + 1, xi), tw * (1.0 - xw)),
                    (idx(ti + 1, xi + 1), tw * xw),
                ];
                v[0] = corners.iter().map(|&(k, w)| w * theta[k]).sum();
                if let Some(g) = dx {
                    if inside {
                        let slope = (1.0 - tw) * (theta[idx(ti, xi + 1)] - theta[idx(ti, xi)])
                            + tw * (theta[idx(ti + 1, xi + 1)] - theta[idx(ti + 1, xi)]);
                        g[0] = slope * (x_knots - 1) as f64 / (2.0 * x_range);
                    }
                }
                if let Some(s) = dtheta {
                    s.extend(
                        corners
                            .iter()
                            .filter(|c| c.1 != 0.0)
                            .map(|&(k, w)| (k, 0, w)),
                    );
                }
            }
        }
    }

    fn is_affine(&self) -> bool {
        self.clamp.is_none() && !matches!(self.kind, FamilyKind::GridFeedback { .. })
    }
}

/// Cell index and fractional position of `s ∈ [0, 1]` on `n` uniform knots.
fn locate(s: f64, n: usize) -> (usize, f64) {
    let pos = s.clamp(0.0, 1.0) * (n - 1) as f64;
    let i = (pos.floor() as usize).min(n - 2);
    (i, pos - i as f64)
}

/// One member of a [`PolicyFamily`]. Zero from the family horizon on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParametricPolicy {
    pub family: PolicyFamily,
    pub theta: Vec<f64>,
}

impl DriftPolicy for ParametricPolicy {
    fn dim(&self) -> usize {
        self.family.dim
    }
    fn drift(&self, grid: &TimeGrid, k: usize, history: &[f64], out: &mut [f64]) {
        let d = self.family.dim;
        self.family.raw(
            &self.theta,
            grid.time(k),
            &history[k * d..(k + 1) * d],
            out,
            None,
            None,
        );
        if let Some(c) = self.family.clamp {
            clamp_radial(out, c);
        }
    }
    fn sup_bound(&self) -> Option<f64> {
        self.family.clamp
    }
    fn cutoff(&self) -> Option<f64> {
        Some(self.family.horizon)
    }
    fn affine(&self, grid: &TimeGrid, k: usize) -> Option<AffineDrift> {
        if !self.family.is_affine() {
            return None;
        }
        let d = self.family.dim;
        let zero = vec![0.0; d];
        let mut offset = vec![0.0; d];
        let mut gain = vec![0.0; d * d];
        self.family.raw(
            &self.theta,
            grid.time(k),
            &zero,
            &mut offset,
            Some(&mut gain),
            None,
        );
        Some(AffineDrift { gain, offset })
    }
    fn label(&self) -> String {
        format!(
            "{:?}{}",
            self.family.kind,
            self.family
                .clamp
                .map_or(String::new(), |c| format!(" clamp {c}"))
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptConfig {
    pub iters: usize,
    /// Training paths per iteration, fresh each iteration.
    pub batch: usize,
    pub lr: f64,
    /// Geometric decay of the step size per iteration.
    pub decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Held-out paths, shared by every evaluation.
    pub heldout: usize,
    pub eval_every: usize,
    /// Initial perturbation size of the finite-difference fallback.
    pub spsa_c: f64,
    pub seed: u64,
}

impl Default for OptConfig {
    fn default() -> Self {
        OptConfig {
            iters: 300,
            batch: 1024,
            lr: 0.05,
            decay: 0.995,
            beta1: 0.9,
            beta2: 0.999,
            heldout: 20_000,
            eval_every: 25,
            spsa_c: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMethod {
    /// Adjoint of the Euler recursion; exact for the discretized objective.
    Pathwise,
    /// Simultaneous-perturbation finite differences, used when `f` has no gradient.
    Spsa,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iteration: usize,
    /// Training-batch objective at the parameters before the step.
    pub objective: f64,
    pub step_size: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeldoutRecord {
    /// Number of completed steps.
    pub iteration: usize,
    pub objective: EstimatorReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptTrace {
    pub family: PolicyFamily,
    pub config: OptConfig,
    pub n_params: usize,
    pub gradient: GradientMethod,
    pub heldout_seed: u64,
    pub iterations: Vec<IterRecord>,
    pub heldout: Vec<HeldoutRecord>,
    pub best_iteration: usize,
    pub best_theta: Vec<f64>,
    pub final_theta: Vec<f64>,
}

impl OptTrace {
    pub fn initial_objective(&self) -> &EstimatorReport {
        &self.heldout[0].objective
    }

    pub fn best_objective(&self) -> &EstimatorReport {
        &self
            .heldout
            .iter()
            .find(|h| h.iteration == self.best_iteration)
            .expect("best iteration was evaluated")
            .objective
    }
}

/// Objective and gradient on one batch by the adjoint method.
fn pathwise_gradient(
    functional: &CylinderFunctional,
    family: &PolicyFamily,
    theta: &[f64],
    batch: &PathBatch,
    mark_nodes: &[usize],
) -> (f64, Vec<f64>) {
    let grid = batch.grid();
    let d = family.dim;
    let p = family.n_params();
    let steps = grid.steps();
    let active = grid
        .nodes()
        .partition_point(|&t| t < family.horizon - HORIZON_TOL)
        .min(steps);
    let n_in = functional.n_inputs();

    // Fixed-size chunks summed in order keep the result independent of the thread count.
    let n_paths = batch.n_paths();
    let per_path = |(mut obj, mut grad): (f64, Vec<f64>), path: usize| {
        let b = batch.path(path);
        let mut x = vec![0.0; grid.len() * d];
        let mut v = vec![0.0; steps * d];
        let mut acc = vec![0.0; d];
        let mut cost = 0.0;
        for k in 0..steps {
            let vk = &mut v[k * d..(k + 1) * d];
            if k < active {
                family.raw(theta, grid.time(k), &x[k * d..(k + 1) * d], vk, None, None);
                if let Some(c) = family.clamp {
                    clamp_radial(vk, c);
                }
            }
            let dt = grid.dt(k);
            for j in 0..d {
                cost += vk[j] * vk[j] * dt;
                acc[j] += vk[j] * dt;
                x[(k + 1) * d + j] = b[(k + 1) * d + j] + acc[j];
            }
        }
        let mut input = vec![0.0; n_in];
        for (i, &node) in mark_nodes.iter().enumerate() {
            input[i * d..(i + 1) * d].copy_from_slice(&x[node * d..(node + 1) * d]);
        }
        obj += functional.value(&input) - 0.5 * cost;

        let mut fgrad = vec![0.0; n_in];
        functional.gradient(&input, &mut fgrad);
        // λ_k = ∂J/∂X_k, swept backwards.
        let mut lambda = vec![0.0; d];
        let add_marks = |k: usize, lambda: &mut [f64]| {
            for (i, &node) in mark_nodes.iter().enumerate() {
                if node == k {
                    for j in 0..d {
                        lambda[j] += fgrad[i * d + j];
                    }
                }
            }
        };
        add_marks(steps, &mut lambda);
        let mut raw = vec![0.0; d];
        let mut rx = vec![0.0; d * d];
        let mut rtheta = Vec::new();
        let mut jac = vec![0.0; d * d];
        let mut gx = vec![0.0; d * d];
        let mut coef = vec![0.0; d];
        for k in (0..steps).rev() {
            if k < active {
                let dt = grid.dt(k);
                let xk = &x[k * d..(k + 1) * d];
                family.raw(
                    theta,
                    grid.time(k),
                    xk,
                    &mut raw,
                    Some(&mut rx),
                    Some(&mut rtheta),
                );
                clamp_jacobian(&raw, family.clamp, &mut jac);
                for r in 0..d {
                    for c in 0..d {
                        gx[r * d + c] = (0..d).map(|l| jac[r * d + l] * rx[l * d + c]).sum();
                    }
                }
                let vk = &v[k * d..(k + 1) * d];
                // coef = (λ_{k+1} − v_k)ᵀ J Δt
                for c in 0..d {
                    coef[c] = dt
                        * (0..d)
                            .map(|r| (lambda[r] - vk[r]) * jac[r * d + c])
                            .sum::<f64>();
                }
                for &(idx, coord, w) in &rtheta {
                    grad[idx] += coef[coord] * w;
                }
                let mut next = lambda.clone();
                for c in 0..d {
                    next[c] += dt
                        * (0..d)
                            .map(|r| (lambda[r] - vk[r]) * gx[r * d + c])
                            .sum::<f64>();
                }
                lambda = next;
            }
            add_marks(k, &mut lambda);
        }
        (obj, grad)
    };
    let parts: Vec<(f64, Vec<f64>)> = (0..n_paths.div_ceil(GRAD_CHUNK))
        .into_par_iter()
        .map(|c| {
            (c * GRAD_CHUNK..((c + 1) * GRAD_CHUNK).min(n_paths))
                .fold((0.0, vec![0.0; p]), per_path)
        })
        .collect();
    let (mut obj, mut grad) = (0.0, vec![0.0; p]);
    for (o, g) in parts {
        obj += o;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    let n = n_paths as f64;
    (obj / n, grad.into_iter().map(|g| g / n).collect())
}

/// Jacobian of the radial clamp at `r`, row-major.
fn clamp_jacobian(r: &[f64], clamp: Option<f64>, jac: &mut [f64]) {
    let d = r.len();
    jac.fill(0.0);
    let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
    match clamp {
        Some(c) if norm > c => {
            let s = c / norm;
            for i in 0..d {
                for j in 0..d {
                    let delta = if i == j { 1.0 } else { 0.0 };
                    jac[i * d + j] = s * (delta - r[i] * r[j] / (norm * norm));
                }
            }
        }
        _ => {
            for i in 0..d {
                jac[i * d + i] = 1.0;
            }
        }
    }
}

fn rhs_value(
    functional: &CylinderFunctional,
    family: &PolicyFamily,
    theta: &[f64],
    batch: &PathBatch,
) -> Result<f64> {
    let policy = family.instantiate(theta.to_vec())?;
    Ok(estimate_rhs(functional, &policy, batch)?.value)
}

/// Maximizes the control objective over `family`, starting from `θ = 0`.
///
/// Returns the member with the best held-out objective among the evaluations
/// (the initial point included) and the full trace.
pub fn optimize(
    functional: &CylinderFunctional,
    family: &PolicyFamily,
    grid: Arc<TimeGrid>,
    config: &OptConfig,
) -> Result<(ParametricPolicy, OptTrace)> {
    if family.dim != functional.dim() {
        return Err(Error::invalid(format!(
            "family dimension {} does not match functional dimension {}",
            family.dim,
            functional.dim()
        )));
    }
    if (family.horizon - grid.horizon()).abs() > HORIZON_TOL * grid.horizon().max(1.0) {
        return Err(Error::invalid(format!(
            "family horizon {} does not match grid horizon {}",
            family.horizon,
            grid.horizon()
        )));
    }
    if config.iters == 0 || config.batch == 0 || config.heldout == 0 || config.eval_every == 0 {
        return Err(Error::invalid(
            "iters, batch, heldout and eval_every must be positive",
        ));
    }
    let mark_nodes = functional.mark_nodes(&grid)?;
    let d = family.dim;
    let p = family.n_params();
    let gradient = if functional.has_grad() {
        GradientMethod::Pathwise
    } else {
        GradientMethod::Spsa
    };
    let heldout_seed = derive_seed(config.seed, stream::HELDOUT, 0);
    let heldout = BrownianStream::new(grid.clone(), d, config.heldout, heldout_seed)?;

    let mut theta = vec![0.0; p];
    let mut trace = OptTrace {
        family: family.clone(),
        config: config.clone(),
        n_params: p,
        gradient,
        heldout_seed,
        iterations: Vec::with_capacity(config.iters),
        heldout: Vec::new(),
        best_iteration: 0,
        best_theta: theta.clone(),
        final_theta: theta.clone(),
    };
    let evaluate_heldout = |theta: &[f64], iteration: usize, trace: &mut OptTrace| -> Result<()> {
        let policy = family.instantiate(theta.to_vec())?;
        let objective = estimate_rhs(functional, &policy, &heldout)?;
        if !objective.value.is_finite() {
            return Err(Error::Diverged {
                iteration,
                trace: Box::new(trace.clone()),
            });
        }
        let better = trace.heldout.is_empty() || objective.value > trace.best_objective().value;
        trace.heldout.push(HeldoutRecord {
            iteration,
            objective,
        });
        if better {
            trace.best_iteration = iteration;
            trace.best_theta = theta.to_vec();
        }
        Ok(())
    };
    evaluate_heldout(&theta, 0, &mut trace)?;

    let (mut m1, mut m2) = (vec![0.0; p], vec![0.0; p]);
    for it in 0..config.iters {
        let batch = sample_brownian(
            grid.clone(),
            d,
            config.batch,
            derive_seed(config.seed, stream::TRAIN, it as u64),
        )?;
        let (objective, grad) = match gradient {
            GradientMethod::Pathwise => {
                pathwise_gradient(functional, family, &theta, &batch, &mark_nodes)
            }
            GradientMethod::Spsa => {
                let mut rng = rng_for(config.seed, stream::SPSA, it as u64);
                let delta: Vec<f64> = (0..p)
                    .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
                    .collect();
                let c = config.spsa_c / ((it + 1) as f64).powf(0.101);
                let plus: Vec<f64> = theta.iter().zip(&delta).map(|(t, s)| t + c * s).collect();
                let minus: Vec<f64> = theta.iter().zip(&delta).map(|(t, s)| t - c * s).collect();
                let jp = rhs_value(functional, family, &plus, &batch)?;
                let jm = rhs_value(functional, family, &minus, &batch)?;
                (
                    0.5 * (jp + jm),
                    delta.iter().map(|s| (jp - jm) / (2.0 * c) * s).collect(),
                )
            }
        };
        let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !objective.is_finite() || !grad_norm.is_finite() {
            trace.final_theta = theta.clone();
            return Err(Error::Diverged {
                iteration: it,
                trace: Box::new(trace),
            });
        }
        let step_size = config.lr * config.decay.powi(it as i32);
        let t = (it + 1) as i32;
        for i in 0..p {
            m1[i] = config.beta1 * m1[i] + (1.0 - config.beta1) * grad[i];
            m2[i] = config.beta2 * m2[i] + (1.0 - config.beta2) * grad[i] * grad[i];
            let mh = m1[i] / (1.0 - config.beta1.powi(t));
            let vh = m2[i] / (1.0 - config.beta2.powi(t));
            theta[i] += step_size * mh / (vh.sqrt() + 1e-8);
        }
        trace.iterations.push(IterRecord {
            iteration: it,
            objective,
            step_size,
            grad_norm,
        });
        if (it + 1) % config.eval_every == 0 || it + 1 == config.iters {
            evaluate_heldout(&theta, it + 1, &mut trace)?;
        }
    }
    trace.final_theta = theta;
    let best = family.instantiate(trace.best_theta.clone())?;
    Ok((best, trace))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleComparison {
    pub policy: GapReport,
    /// Gap of the functional's known optimal drift on the same base paths.
    pub oracle: Option<GapReport>,
}

/// Gap of `policy` against the closed-form (or quadrature) left-hand side,
/// and of the oracle policy when the functional has one.
pub fn compare_to_oracle(
    functional: &CylinderFunctional,
    policy: &dyn DriftPolicy,
    base: &dyn crate::paths::PathSource,
) -> Result<OracleComparison> {
    let lhs = match functional.log_mgf() {
        Some(v) => EstimatorReport::exact(v, Method::ClosedForm),
        None if functional.n_inputs() <= MAX_DIM => estimate_lhs_quadrature(functional)?,
        None => {
            return Err(Error::unsupported(format!(
                "{} has neither a closed-form nor a quadrature left-hand side",
                functional.spec()
            )))
        }
    };
    let gap = GapReport::new(lhs.clone(), estimate_rhs(functional, policy, base)?);
    let oracle = match functional.oracle().and_then(|o| o.optimal_drift.as_ref()) {
        Some(od) => {
            let p = od.policy(functional.dim())?;
            Some(GapReport::new(lhs, estimate_rhs(functional, &p, base)?))
        }
        None => None,
    };
    Ok(OracleComparison {
        policy: gap,
        oracle,
    })
}

/// A random clamped member of a random family, reproducible from `(seed, index)`.
pub fn random_clamped_policy(dim: usize, horizon: f64, seed: u64, index: u64) -> ParametricPolicy {
    let mut rng = rng_for(seed, stream::RANDOM_POLICY, index);
    let n_kinds = if dim == 1 { 4 } else { 3 };
    let kind = match rng.random_range(0..n_kinds) {
        0 => FamilyKind::Constant,
        1 => FamilyKind::PiecewiseConstant {
            pieces: rng.random_range(1..=8),
        },
        2 => FamilyKind::LinearFeedback {
            pieces: rng.random_range(1..=4),
        },
        _ => FamilyKind::GridFeedback {
            t_knots: rng.random_range(2..=5),
            x_knots: rng.random_range(2..=7),
            x_range: rng.random_range(1.0..4.0),
        },
    };
    let clamp = rng.random_range(0.5..3.0);
    let family = PolicyFamily::new(kind, dim, horizon, Some(clamp)).expect("valid random family");
    let theta = (0..family.n_params())
        .map(|_| rng.random_range(-2.0..2.0))
        .collect();
    family.instantiate(theta).expect("finite parameters")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::functionals::{bounded_smooth, linear, parse_functional, quadratic, zero};
    use crate::paths::PathSource;
    use proptest::prelude::*;
    use rand::Rng;

    fn grid(steps: usize) -> Arc<TimeGrid> {
        Arc::new(TimeGrid::new(1.0, steps, &[]).unwrap())
    }

    fn fd_gradient(
        f: &CylinderFunctional,
        fam: &PolicyFamily,
        theta: &[f64],
        batch: &PathBatch,
    ) -> Vec<f64> {
        (0..theta.len())
            .map(|i| {
                let h = 1e-6;
                let mut a = theta.to_vec();
                let mut b = theta.to_vec();
                a[i] += h;
                b[i] -= h;
                (rhs_value(f, fam, &a, batch).unwrap() - rhs_value(f, fam, &b, batch).unwrap())
                    / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn adjoint_gradient_matches_finite_differences() {
        let g = grid(16);
        let batch = sample_brownian(g.clone(), 1, 64, 1).unwrap();
        let q = quadratic(0.25, 1.0, 1).unwrap();
        let s = bounded_smooth(1.0, 1).unwrap();
        let two = parse_functional("two_mark:a1=0.7,a2=-0.4,t1=0.5,t2=1").unwrap();
        let g2 = Arc::new(TimeGrid::new(1.0, 16, &[0.5]).unwrap());
        let batch2 = sample_brownian(g2, 1, 64, 2).unwrap();
        for (fam, f, b) in [
            ("constant", &q, &batch),
            ("piecewise_constant:pieces=3", &s, &batch),
            ("linear_feedback:pieces=4", &q, &batch),
            ("linear_feedback:pieces=2,clamp=0.8", &s, &batch),
            ("grid_feedback:t_knots=3,x_knots=5,x_range=1.5", &q, &batch),
            ("linear_feedback:pieces=3", &two, &batch2),
        ] {
            let fam = PolicyFamily::parse(fam, 1, 1.0).unwrap();
            let theta: Vec<f64> = (0..fam.n_params())
                .map(|i| 0.3 * ((i * 7 % 5) as f64 - 2.0) / 2.0)
                .collect();
            let marks = f.mark_nodes(b.grid()).unwrap();
            let (obj, grad) = pathwise_gradient(f, &fam, &theta, b, &marks);
            assert!((obj - rhs_value(f, &fam, &theta, b).unwrap()).abs() < 1e-12);
            let fd = fd_gradient(f, &fam, &theta, b);
            for (a, e) in grad.iter().zip(&fd) {
                assert!(
                    (a - e).abs() < 1e-6 * (1.0 + e.abs()),
                    "{:?}: {grad:?} vs {fd:?}",
                    fam.kind
                );
            }
        }
    }

    #[test]
    fn adjoint_gradient_in_two_dimensions() {
        let g = grid(12);
        let batch = sample_brownian(g, 2, 32, 3).unwrap();
        let f = quadratic(0.2, 1.0, 2).unwrap();
        for s in [
            "linear_feedback:pieces=2",
            "linear_feedback:pieces=2,clamp=0.5",
            "piecewise_constant:pieces=2",
        ] {
            let fam = PolicyFamily::parse(s, 2, 1.0).unwrap();
            let theta: Vec<f64> = (0..fam.n_params())
                .map(|i| 0.4 * (((i * 3) % 7) as f64 - 3.0) / 3.0)
                .collect();
            let marks = f.mark_nodes(batch.grid()).unwrap();
            let (_, grad) = pathwise_gradient(&f, &fam, &theta, &batch, &marks);
            let fd = fd_gradient(&f, &fam, &theta, &batch);
            for (a, e) in grad.iter().zip(&fd) {
                assert!(
                    (a - e).abs() < 1e-6 * (1.0 + e.abs()),
                    "{s}: {grad:?} vs {fd:?}"
                );
            }
        }
    }

    #[test]
    fn affine_form_matches_the_drift() {
        let fam = PolicyFamily::parse("linear_feedback:pieces=3", 2, 1.0).unwrap();
        let p = fam
            .instantiate((0..fam.n_params()).map(|i| i as f64 * 0.1 - 0.5).collect())
            .unwrap();
        let g = TimeGrid::new(1.0, 9, &[]).unwrap();
        let hist = vec![0.3; 2 * g.len()];
        for k in 0..g.steps() {
            let a = p.affine(&g, k).unwrap();
            let mut v = [0.0; 2];
            p.drift(&g, k, &hist[..(k + 1) * 2], &mut v);
            for j in 0..2 {
                let want = a.offset[j] + 0.3 * (a.gain[j * 2] + a.gain[j * 2 + 1]);
                assert!((v[j] - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn family_errors() {
        assert!(PolicyFamily::parse("grid_feedback", 2, 1.0).is_err());
        assert!(PolicyFamily::parse("nope", 1, 1.0).is_err());
        assert!(PolicyFamily::parse("constant:clamp=-1", 1, 1.0).is_err());
        let fam = PolicyFamily::parse("constant", 1, 2.0).unwrap();
        let f = linear(1.0, 1.0, 1).unwrap();
        assert!(matches!(
            optimize(&f, &fam, grid(10), &OptConfig::default()),
            Err(Error::InvalidArgument(_))
        ));
        let fam = PolicyFamily::parse("constant", 1, 1.0).unwrap();
        let off = Arc::new(TimeGrid::new(1.0, 10, &[]).unwrap());
        let f = linear(1.0, 0.55, 1).unwrap();
        assert!(matches!(
            optimize(&f, &fam, off, &OptConfig::default()),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn linear_functional_constant_family() {
        let f = linear(1.0, 1.0, 1).unwrap();
        let fam = PolicyFamily::parse("constant", 1, 1.0).unwrap();
        let (p, trace) = optimize(&f, &fam, grid(50), &OptConfig::default()).unwrap();
        assert!((p.theta[0] - 1.0).abs() < 0.02, "{:?}", p.theta);
        let best = trace.best_objective();
        assert!(
            (best.value - 0.5).abs() < 0.01 + 3.0 * best.std_error,
            "{best:?}"
        );
        assert!(best.value >= trace.initial_objective().value + 0.5 - 0.02);
    }

    #[test]
    fn zero_functional_stays_near_zero_drift() {
        let f = zero(1.0, 1).unwrap();
        let fam = PolicyFamily::parse("piecewise_constant:pieces=4,clamp=2", 1, 1.0).unwrap();
        let cfg = OptConfig {
            iters: 100,
            ..OptConfig::default()
        };
        let (p, trace) = optimize(&f, &fam, grid(20), &cfg).unwrap();
        assert!(p.theta.iter().all(|t| t.abs() < 0.05), "{:?}", p.theta);
        assert!(trace.best_objective().value.abs() < 1e-2);
    }

    #[test]
    fn spsa_fallback_improves_the_objective() {
        let lin = linear(1.0, 1.0, 1).unwrap();
        let no_grad =
            CylinderFunctional::new("linear_no_grad", 1, vec![1.0], move |x| lin.value(x)).unwrap();
        let fam = PolicyFamily::parse("constant", 1, 1.0).unwrap();
        let cfg = OptConfig {
            iters: 200,
            ..OptConfig::default()
        };
        let (p, trace) = optimize(&no_grad, &fam, grid(20), &cfg).unwrap();
        assert_eq!(trace.gradient, GradientMethod::Spsa);
        assert!((p.theta[0] - 1.0).abs() < 0.1, "{:?}", p.theta);
    }

    #[test]
    fn optimizer_is_deterministic() {
        let f = quadratic(0.25, 1.0, 1).unwrap();
        let fam = PolicyFamily::parse("linear_feedback:pieces=2", 1, 1.0).unwrap();
        let cfg = OptConfig {
            iters: 20,
            batch: 256,
            heldout: 2000,
            eval_every: 5,
            seed: 9,
            ..OptConfig::default()
        };
        let a = optimize(&f, &fam, grid(20), &cfg).unwrap().1;
        let b = optimize(&f, &fam, grid(20), &cfg).unwrap().1;
        assert_eq!(a, b);
    }

    #[test]
    fn divergent_objective_aborts_with_a_trace() {
        let f = CylinderFunctional::new("blows_up", 1, vec![1.0], |x| {
            if x[0] > 0.5 {
                f64::INFINITY
            } else {
                0.0
            }
        })
        .unwrap()
        .with_grad(|_, o| o.fill(0.0));
        let fam = PolicyFamily::parse("constant", 1, 1.0).unwrap();
        let cfg = OptConfig {
            iters: 5,
            batch: 64,
            heldout: 256,
            ..OptConfig::default()
        };
        match optimize(&f, &fam, grid(4), &cfg) {
            Err(Error::Diverged { iteration, trace }) => {
                assert_eq!(iteration, 0);
                assert!(trace.heldout.is_empty());
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn comparison_with_the_oracle() {
        let base = BrownianStream::new(grid(400), 1, 50_000, 4).unwrap();
        let q = quadratic(0.25, 1.0, 1).unwrap();
        let r = compare_to_oracle(&q, &crate::policy::ZeroPolicy::new(1), &base).unwrap();
        let o = r.oracle.unwrap();
        assert!(o.gap <= 0.005 + 3.0 * o.gap_se, "{o:?}");
        assert!(r.policy.gap > o.gap);
        let z = zero(1.0, 1).unwrap();
        let r = compare_to_oracle(&z, &crate::policy::ZeroPolicy::new(1), &base).unwrap();
        assert_eq!(r.policy.gap, 0.0);
        assert_eq!(base.n_paths(), 50_000);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn clamped_members_respect_the_clamp(seed in 0u64..1000, index in 0u64..1000, d in 1usize..3) {
            let p = random_clamped_policy(d, 1.0, seed, index);
            let bound = p.sup_bound().unwrap();
            let g = TimeGrid::new(1.0, 8, &[]).unwrap();
            let mut rng = rng_for(seed, 1, index);
            let hist: Vec<f64> = (0..g.len() * d).map(|_| rng.random_range(-10.0..10.0)).collect();
            let mut v = vec![0.0; d];
            for k in 0..g.steps() {
                p.drift(&g, k, &hist[..(k + 1) * d], &mut v);
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                prop_assert!(n <= bound * (1.0 + 1e-12));
            }
        }
    }
}
