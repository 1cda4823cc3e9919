//! Streaming moment accumulators and the report type shared by every estimator.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    MonteCarlo,
    ImportanceSampling,
    Quadrature,
    ClosedForm,
}

impl Method {
    pub fn is_deterministic(self) -> bool {
        matches!(self, Method::Quadrature | Method::ClosedForm)
    }
}

/// Value, standard error and provenance of one estimated quantity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorReport {
    pub value: f64,
    pub std_error: f64,
    pub n_samples: usize,
    pub seed: Option<u64>,
    pub method: Method,
}

impl EstimatorReport {
    pub fn exact(value: f64, method: Method) -> Self {
        EstimatorReport {
            value,
            std_error: 0.0,
            n_samples: 0,
            seed: None,
            method,
        }
    }

    pub fn from_moments(m: &Moments, seed: Option<u64>, method: Method) -> Self {
        EstimatorReport {
            value: m.mean(),
            std_error: m.std_error(),
            n_samples: m.count() as usize,
            seed,
            method,
        }
    }
}

/// Mean and centred second moment, mergeable in a fixed order.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Moments {
    n: f64,
    mean: f64,
    m2: f64,
}

impl Moments {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_slice(xs: &[f64]) -> Self {
        let mut m = Self::new();
        for &x in xs {
            m.push(x);
        }
        m
    }

    #[inline]
    pub fn push(&mut self, x: f64) {
        self.n += 1.0;
        let delta = x - self.mean;
        self.mean += delta / self.n;
        self.m2 += delta * (x - self.mean);
    }

    pub fn merge(&mut self, other: &Moments) {
        if other.n == 0.0 {
            return;
        }
        if self.n == 0.0 {
            *self = *other;
            return;
        }
        let n = self.n + other.n;
        let delta = other.mean - self.mean;
        self.mean += delta * other.n / n;
        self.m2 += other.m2 + delta * delta * self.n * other.n / n;
        self.n = n;
    }

    pub fn count(&self) -> u64 {
        self.n as u64
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance; zero for fewer than two samples.
    pub fn variance(&self) -> f64 {
        if self.n < 2.0 {
            0.0
        } else {
            (self.m2 / (self.n - 1.0)).max(0.0)
        }
    }

    pub fn std_error(&self) -> f64 {
        if self.n < 2.0 {
            0.0
        } else {
            (self.variance() / self.n).sqrt()
        }
    }

    fn scale(&mut self, factor: f64) {
        self.mean *= factor;
        self.m2 *= factor * factor;
    }
}

/// Accumulates `exp(x)` in a max-shifted domain so that `log mean exp(x)`
/// stays finite when individual terms over- or underflow.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogMeanExp {
    shift: f64,
    moments: Moments,
}

impl Default for LogMeanExp {
    fn default() -> Self {
        LogMeanExp {
            shift: f64::NEG_INFINITY,
            moments: Moments::new(),
        }
    }
}

impl LogMeanExp {
    /// Accumulates one chunk. `-inf` entries count as zero terms; NaN or `+inf` is an error.
    pub fn from_slice(xs: &[f64]) -> Result<Self> {
        let mut shift = f64::NEG_INFINITY;
        for &x in xs {
            if x.is_nan() || x == f64::INFINITY {
                return Err(Error::numeric(None, format!("log-sum-exp input {x}")));
            }
            shift = shift.max(x);
        }
        let mut moments = Moments::new();
        if shift == f64::NEG_INFINITY {
            for _ in xs {
                moments.push(0.0);
            }
        } else {
            for &x in xs {
                moments.push((x - shift).exp());
            }
        }
        Ok(LogMeanExp { shift, moments })
    }

    pub fn merge(&mut self, other: &LogMeanExp) {
        if other.moments.n == 0.0 {
            return;
        }
        if self.moments.n == 0.0 {
            *self = *other;
            return;
        }
        let shift = self.shift.max(other.shift);
        let mut a = self.moments;
        let mut b = other.moments;
        if shift > f64::NEG_INFINITY {
            a.scale((self.shift - shift).exp());
            b.scale((other.shift - shift).exp());
        }
        a.merge(&b);
        self.shift = shift;
        self.moments = a;
    }

    pub fn count(&self) -> u64 {
        self.moments.count()
    }

    /// `log((1/n) Σ exp(x_i))` and its delta-method standard error.
    pub fn finish(&self) -> Result<(f64, f64)> {
        if self.moments.n == 0.0 {
            return Err(Error::numeric(None, "log-mean-exp of an empty sample"));
        }
        let mean = self.moments.mean();
        if self.shift == f64::NEG_INFINITY || mean <= 0.0 {
            return Err(Error::numeric(
                None,
                "every exp term is zero (all inputs -inf)",
            ));
        }
        let value = self.shift + mean.ln();
        let se = self.moments.std_error() / mean;
        Ok((value, se))
    }
}

/// Standard error of a difference of two estimates assumed independent.
pub fn combined_se(a: f64, b: f64) -> f64 {
    (a * a + b * b).sqrt()
}

/// Two-sample Kolmogorov–Smirnov statistic and its asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut stat) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        stat = stat.max((i as f64 / n - j as f64 / m).abs());
    }
    let en = (n * m / (n + m)).sqrt();
    let lambda = (en + 0.12 + 0.11 / en) * stat;
    (stat, kolmogorov_q(lambda))
}

/// `P(K > λ)` for the Kolmogorov distribution.
fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let term = 2.0 * (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-12 {
            break;
        }
    }
    sum.clamp(0.0, 1.0)
}
