//! Exact Gaussian laws of path values at mark times, for Brownian motion and
//! for the Euler scheme driven by an affine feedback policy.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::paths::{DriftPolicy, TimeGrid};

/// Law of the stacked mark vector `(X(t_1), …, X(t_m))`, mark-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianLaw {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianLaw {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Sub-law of the listed coordinates.
    pub fn select(&self, idx: &[usize]) -> GaussianLaw {
        let n = idx.len();
        GaussianLaw {
            mean: DVector::from_fn(n, |i, _| self.mean[idx[i]]),
            cov: DMatrix::from_fn(n, n, |i, j| self.cov[(idx[i], idx[j])]),
        }
    }
}

/// `Cov(B(s)_i, B(t)_j) = min(s, t) δ_ij`.
pub fn brownian_marks_law(marks: &[f64], d: usize) -> GaussianLaw {
    let n = marks.len() * d;
    GaussianLaw {
        mean: DVector::zeros(n),
        cov: DMatrix::from_fn(n, n, |a, b| {
            if a % d == b % d {
                marks[a / d].min(marks[b / d])
            } else {
                0.0
            }
        }),
    }
}

/// Law of the Euler chain `X_{k+1} = (I + A_k Δt) X_k + b_k Δt + ΔB_k` at the marks.
///
/// Errors with `Unsupported` when the policy has no affine form at some node.
pub fn drifted_marks_law(
    policy: &dyn DriftPolicy,
    grid: &TimeGrid,
    marks: &[f64],
) -> Result<GaussianLaw> {
    let d = policy.dim();
    let mark_nodes: Vec<usize> = marks
        .iter()
        .map(|&t| {
            grid.index_of(t)
                .ok_or_else(|| Error::invalid(format!("mark {t} is not a grid node")))
        })
        .collect::<Result<_>>()?;
    let active_until = match policy.cutoff() {
        Some(c) => grid.nodes().partition_point(|&t| t < c).min(grid.steps()),
        None => grid.steps(),
    };
    let last = *mark_nodes.last().unwrap_or(&0);

    let n = marks.len() * d;
    let mut law = GaussianLaw {
        mean: DVector::zeros(n),
        cov: DMatrix::zeros(n, n),
    };
    let mut m = DVector::<f64>::zeros(d);
    let mut p = DMatrix::<f64>::zeros(d, d);
    // Cov(X at recorded mark j, X_k)
    let mut cross: Vec<(usize, DMatrix<f64>)> = Vec::new();

    let mut record =
        |k: usize, m: &DVector<f64>, p: &DMatrix<f64>, cross: &mut Vec<(usize, DMatrix<f64>)>| {
            for (i, _) in mark_nodes.iter().enumerate().filter(|(_, &node)| node == k) {
                law.mean.rows_mut(i * d, d).copy_from(m);
                law.cov.view_mut((i * d, i * d), (d, d)).copy_from(p);
                for (j, c) in cross.iter() {
                    law.cov.view_mut((j * d, i * d), (d, d)).copy_from(c);
                    law.cov
                        .view_mut((i * d, j * d), (d, d))
                        .copy_from(&c.transpose());
                }
                cross.push((i, p.clone()));
            }
        };
    record(0, &m, &p, &mut cross);

    for k in 0..last {
        let dt = grid.dt(k);
        let (gain, offset) = if k < active_until {
            let a = policy.affine(grid, k).ok_or_else(|| {
                Error::unsupported(format!("policy {} is not affine", policy.label()))
            })?;
            (
                DMatrix::from_row_slice(d, d, &a.gain),
                DVector::from_column_slice(&a.offset),
            )
        } else {
            (DMatrix::zeros(d, d), DVector::zeros(d))
        };
        let step = DMatrix::identity(d, d) + gain * dt;
        m = &step * &m + offset * dt;
        p = &step * &p * step.transpose() + DMatrix::identity(d, d) * dt;
        for (_, c) in cross.iter_mut() {
            *c = &*c * step.transpose();
        }
        record(k + 1, &m, &p, &mut cross);
    }
    Ok(law)
}

/// `KL(p ‖ q)` for non-degenerate Gaussian laws.
pub fn kl(p: &GaussianLaw, q: &GaussianLaw) -> Result<f64> {
    let n = p.dim();
    if q.dim() != n {
        return Err(Error::invalid("KL between laws of different dimension"));
    }
    let cq = q
        .cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::numeric(None, "reference covariance is not positive definite"))?;
    let cp = p
        .cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::numeric(None, "covariance is not positive definite"))?;
    let trace = cq.solve(&p.cov).trace();
    let diff = &q.mean - &p.mean;
    let maha = diff.dot(&cq.solve(&diff));
    let logdet = |l: &DMatrix<f64>| 2.0 * l.diagonal().iter().map(|x| x.ln()).sum::<f64>();
    Ok(0.5 * (trace + maha - n as f64 + logdet(&cq.l()) - logdet(&cp.l())))
}

/// `KL(law of the drifted marks ‖ law of the Brownian marks)`. Marks at time
/// zero are dropped: both laws put a point mass at the origin there.
pub fn marginal_entropy(policy: &dyn DriftPolicy, grid: &TimeGrid, marks: &[f64]) -> Result<f64> {
    let d = policy.dim();
    let drifted = drifted_marks_law(policy, grid, marks)?;
    let brownian = brownian_marks_law(marks, d);
    let keep: Vec<usize> = (0..marks.len() * d)
        .filter(|&a| marks[a / d] > 0.0)
        .collect();
    if keep.is_empty() {
        return Ok(0.0);
    }
    kl(&drifted.select(&keep), &brownian.select(&keep)).map(|h| h.max(0.0))
}
