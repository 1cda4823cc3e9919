//! Gauss–Hermite quadrature for the standard Gaussian measure on `R^d`, `d ≤ 3`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Default rule order: 64 nodes in one dimension, 32 per axis otherwise.
pub fn default_order(dim: usize) -> usize {
    if dim <= 1 {
        64
    } else {
        32
    }
}

pub const MAX_DIM: usize = 3;

/// One-dimensional rule for `N(0, 1)`: `E[g(Z)] ≈ Σ w_i g(x_i)`, weights sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussHermite {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussHermite {
    /// Nodes by Newton iteration on the orthonormal Hermite recurrence, then
    /// rescaled from the weight `e^{-x²}` to the standard normal density.
    pub fn new(order: usize) -> Result<Self> {
        if order == 0 || order > 400 {
            return Err(Error::invalid(format!(
                "Gauss–Hermite order {order} not in 1..=400"
            )));
        }
        const PIM4: f64 = 0.751_125_544_464_942_5; // π^{-1/4}
        let n = order;
        let nf = n as f64;
        let mut x = vec![0.0; n];
        let mut w = vec![0.0; n];
        let mut z = 0.0f64;
        for i in 0..n.div_ceil(2) {
            z = match i {
                0 => (2.0 * nf + 1.0).sqrt() - 1.855_75 * (2.0 * nf + 1.0).powf(-0.166_67),
                1 => z - 1.14 * nf.powf(0.426) / z,
                2 => 1.86 * z - 0.86 * x[0],
                3 => 1.91 * z - 0.91 * x[1],
                _ => 2.0 * z - x[i - 2],
            };
            let mut pp = 0.0;
            let mut converged = false;
            for _ in 0..100 {
                let mut p1 = PIM4;
                let mut p2 = 0.0;
                for j in 0..n {
                    let p3 = p2;
                    p2 = p1;
                    let jf = j as f64;
                    p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
                }
                pp = (2.0 * nf).sqrt() * p2;
                let z1 = z;
                z = z1 - p1 / pp;
                if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                    converged = true;
                    break;
                }
            }
            if !converged {
                return Err(Error::numeric(
                    None,
                    format!("Gauss–Hermite root {i} of order {n} did not converge"),
                ));
            }
            x[i] = z;
            x[n - 1 - i] = -z;
            w[i] = 2.0 / (pp * pp);
            w[n - 1 - i] = w[i];
        }
        if n % 2 == 1 {
            x[n / 2] = 0.0;
        }
        let inv_sqrt_pi = 1.0 / std::f64::consts::PI.sqrt();
        let mut pairs: Vec<(f64, f64)> = x
            .iter()
            .zip(&w)
            .map(|(&xi, &wi)| (xi * std::f64::consts::SQRT_2, wi * inv_sqrt_pi))
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let total: f64 = pairs.iter().map(|p| p.1).sum();
        Ok(GaussHermite {
            nodes: pairs.iter().map(|p| p.0).collect(),
            weights: pairs.iter().map(|p| p.1 / total).collect(),
        })
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn order(&self) -> usize {
        self.nodes.len()
    }
}

/// Tensor-product rule for `γ = N(0, I_d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianQuadrature {
    dim: usize,
    order: usize,
    points: Vec<f64>,
    weights: Vec<f64>,
    /// Whether a point lies on the outermost node of some axis.
    outer: Vec<bool>,
}

impl GaussianQuadrature {
    pub fn new(dim: usize, order: usize) -> Result<Self> {
        if dim == 0 || dim > MAX_DIM {
            return Err(Error::unsupported(format!(
                "tensor quadrature supports 1..={MAX_DIM} dimensions, got {dim}"
            )));
        }
        let rule = GaussHermite::new(order)?;
        let n = order.pow(dim as u32);
        let mut points = Vec::with_capacity(n * dim);
        let mut weights = Vec::with_capacity(n);
        let mut outer = Vec::with_capacity(n);
        let mut idx = vec![0usize; dim];
        for _ in 0..n {
            let mut w = 1.0;
            let mut edge = false;
            for &i in &idx {
                points.push(rule.nodes[i]);
                w *= rule.weights[i];
                edge |= i == 0 || i == order - 1;
            }
            weights.push(w);
            outer.push(edge);
            for a in (0..dim).rev() {
                idx[a] += 1;
                if idx[a] < order {
                    break;
                }
                idx[a] = 0;
            }
        }
        Ok(GaussianQuadrature {
            dim,
            order,
            points,
            weights,
            outer,
        })
    }

    /// Rule with [`default_order`] for `dim`.
    pub fn standard(dim: usize) -> Result<Self> {
        Self::new(dim, default_order(dim))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    #[inline]
    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub(crate) fn is_outer(&self, i: usize) -> bool {
        self.outer[i]
    }

    pub fn expectation(&self, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
        (0..self.len())
            .map(|i| self.weights[i] * f(self.point(i)))
            .sum()
    }

    /// `log ∫ e^{h} dγ` with max-shifting.
    ///
    /// Fails when a term is NaN or `+inf`, or when more than a `1e-6` share of
    /// the mass sits on the outermost nodes, which means the integrand does not
    /// decay inside the rule's range (typically `e^h ∉ L¹(γ)`).
    pub fn log_expectation_exp(&self, mut h: impl FnMut(&[f64]) -> f64) -> Result<f64> {
        let vals: Vec<f64> = (0..self.len()).map(|i| h(self.point(i))).collect();
        self.log_sum_weighted(&vals, |i| self.weights[i].ln())
    }

    fn log_sum_weighted(&self, vals: &[f64], log_w: impl Fn(usize) -> f64) -> Result<f64> {
        let mut shift = f64::NEG_INFINITY;
        for (i, &v) in vals.iter().enumerate() {
            if v.is_nan() || v == f64::INFINITY {
                return Err(Error::numeric(
                    None,
                    format!("integrand is {v} at quadrature point {i}"),
                ));
            }
            shift = shift.max(v + log_w(i));
        }
        if shift == f64::NEG_INFINITY {
            return Ok(f64::NEG_INFINITY);
        }
        let (mut total, mut edge) = (0.0, 0.0);
        for (i, &v) in vals.iter().enumerate() {
            let term = (v + log_w(i) - shift).exp();
            total += term;
            if self.outer[i] {
                edge += term;
            }
        }
        if edge > 1e-6 * total {
            return Err(Error::numeric(
                None,
                format!("{:.2e} of the mass lies on the outermost nodes; the exponential moment looks infinite", edge / total),
            ));
        }
        Ok(shift + total.ln())
    }

    /// `log ∫ e^{h} dγ` with the rule recentred at the mode of `h(y) − |y|²/2`
    /// and scaled by the inverse Hessian there. Exact for quadratic `h`; falls
    /// back to the plain rule when the mode search fails.
    pub fn log_expectation_exp_adaptive(&self, h: impl Fn(&[f64]) -> f64) -> Result<f64> {
        let d = self.dim;
        let phi = |y: &[f64]| h(y) - 0.5 * y.iter().map(|v| v * v).sum::<f64>();
        let Some((mode, scale)) = laplace_frame(d, &phi, self) else {
            return self.log_expectation_exp(&h);
        };
        let log_det = scale.determinant().abs().ln();
        let mut y = vec![0.0; d];
        let vals: Vec<f64> = (0..self.len())
            .map(|i| {
                let z = DVector::from_column_slice(self.point(i));
                let shifted = &mode + &scale * &z;
                y.copy_from_slice(shifted.as_slice());
                phi(&y) + 0.5 * z.norm_squared()
            })
            .collect();
        Ok(log_det + self.log_sum_weighted(&vals, |i| self.weights[i].ln())?)
    }
}

/// Mode and Cholesky-based scale of `phi` by damped Newton with central differences.
fn laplace_frame(
    d: usize,
    phi: &dyn Fn(&[f64]) -> f64,
    quad: &GaussianQuadrature,
) -> Option<(DVector<f64>, DMatrix<f64>)> {
    let start = (0..quad.len())
        .map(|i| (i, phi(quad.point(i))))
        .filter(|(_, v)| v.is_finite())
        .max_by(|a, b| a.1.total_cmp(&b.1))?
        .0;
    let mut y = DVector::from_column_slice(quad.point(start));
    let eval = |v: &DVector<f64>| phi(v.as_slice());
    let mut fy = eval(&y);
    let mut hess = DMatrix::zeros(d, d);
    for _ in 0..60 {
        let eps = 1e-4 * (1.0 + y.norm());
        let (g, h) = fd_grad_hess(&eval, &y, fy, eps);
        hess = h;
        let neg = -&hess;
        let chol = neg.clone().cholesky()?;
        let step = chol.solve(&g);
        let mut alpha = 1.0;
        let mut moved = false;
        while alpha > 1e-6 {
            let cand = &y + &step * alpha;
            let fc = eval(&cand);
            if fc.is_finite() && fc >= fy - 1e-12 * fy.abs().max(1.0) {
                moved = true;
                let done = (&cand - &y).norm() < 1e-10 * (1.0 + y.norm());
                y = cand;
                fy = fc;
                if done {
                    let neg = -fd_grad_hess(&eval, &y, fy, eps).1;
                    let chol = neg.cholesky()?;
                    let l_inv_t = chol.l().transpose().try_inverse()?;
                    return Some((y, l_inv_t));
                }
                break;
            }
            alpha *= 0.5;
        }
        if !moved {
            break;
        }
    }
    let chol = (-hess).cholesky()?;
    let l_inv_t = chol.l().transpose().try_inverse()?;
    Some((y, l_inv_t))
}

fn fd_grad_hess(
    f: &dyn Fn(&DVector<f64>) -> f64,
    y: &DVector<f64>,
    fy: f64,
    eps: f64,
) -> (DVector<f64>, DMatrix<f64>) {
    let d = y.len();
    let mut g = DVector::zeros(d);
    let mut h = DMatrix::zeros(d, d);
    let shifted = |i: usize, si: f64, j: usize, sj: f64| {
        let mut v = y.clone();
        v[i] += si;
        v[j] += sj;
        f(&v)
    };
    for i in 0..d {
        let fp = shifted(i, eps, i, 0.0);
        let fm = shifted(i, -eps, i, 0.0);
        g[i] = (fp - fm) / (2.0 * eps);
        h[(i, i)] = (fp - 2.0 * fy + fm) / (eps * eps);
        for j in 0..i {
            let v = (shifted(i, eps, j, eps) - shifted(i, eps, j, -eps) - shifted(i, -eps, j, eps)
                + shifted(i, -eps, j, -eps))
                / (4.0 * eps * eps);
            h[(i, j)] = v;
            h[(j, i)] = v;
        }
    }
    (g, h)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn double_factorial_moment(k: u32) -> f64 {
        if k % 2 == 1 {
            return 0.0;
        }
        (1..k).step_by(2).map(f64::from).product()
    }

    #[test]
    fn weights_sum_to_one() {
        for order in [1, 2, 5, 32, 64, 128] {
            let r = GaussHermite::new(order).unwrap();
            let s: f64 = r.weights().iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "order {order}: {s}");
            assert!(r.nodes().windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn integrates_gaussian_moments_exactly() {
        for order in [8, 32, 64] {
            let q = GaussianQuadrature::new(1, order).unwrap();
            for k in 0..=8u32 {
                let m = q.expectation(|x| x[0].powi(k as i32));
                let exact = double_factorial_moment(k);
                assert!(
                    (m - exact).abs() < 1e-10 * exact.max(1.0),
                    "order {order}, k {k}: {m}"
                );
            }
        }
        let q = GaussianQuadrature::standard(3).unwrap();
        let m = q.expectation(|x| x[0].powi(2) * x[1].powi(4) * x[2].powi(2));
        assert!((m - 3.0).abs() < 1e-10);
        assert!((q.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gaussian_mgf() {
        let q = GaussianQuadrature::standard(1).unwrap();
        let v = q.log_expectation_exp(|x| x[0]).unwrap();
        assert!((v - 0.5).abs() < 1e-12);
        let v = q.log_expectation_exp(|x| 0.25 * x[0] * x[0]).unwrap();
        assert!((v + 0.5 * 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn divergent_exponential_moment_is_detected() {
        let q = GaussianQuadrature::standard(1).unwrap();
        assert!(matches!(
            q.log_expectation_exp(|x| 0.6 * x[0] * x[0]),
            Err(Error::NumericFailure { .. })
        ));
    }

    #[test]
    fn adaptive_rule_handles_far_modes() {
        let q = GaussianQuadrature::standard(1).unwrap();
        // E exp(20 Z) = e^{200}; the plain rule cannot reach a mode at 20.
        let v = q.log_expectation_exp_adaptive(|x| 20.0 * x[0]).unwrap();
        assert!((v - 200.0).abs() < 1e-9, "{v}");
        let q2 = GaussianQuadrature::standard(2).unwrap();
        let v = q2
            .log_expectation_exp_adaptive(|x| 5.0 * x[0] - 3.0 * x[1])
            .unwrap();
        assert!((v - 17.0).abs() < 1e-9, "{v}");
        let v = q.log_expectation_exp_adaptive(|x| x[0].sin()).unwrap();
        let plain = q.log_expectation_exp(|x| x[0].sin()).unwrap();
        assert!((v - plain).abs() < 1e-12);
    }

    #[test]
    fn more_than_three_dimensions_is_unsupported() {
        assert!(matches!(
            GaussianQuadrature::new(4, 4),
            Err(Error::Unsupported(_))
        ));
    }
}
