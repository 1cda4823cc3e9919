//! Time grids, Brownian path batches and drifted paths.
//!
//! Paths are stored at grid nodes only, row-major as `path × node × coordinate`.
//! Large batches are never materialized by the estimators: they consume a
//! [`PathSource`], which hands out deterministic fixed-size chunks.

use std::borrow::Cow;
use std::sync::Arc;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_for, stream};
use crate::stats::{EstimatorReport, Method, Moments};

/// Paths per chunk of a [`BrownianStream`]. Fixed so that results never
/// depend on the thread count.
pub const CHUNK_PATHS: usize = 4096;

const NODE_TOL: f64 = 1e-12;

/// Nodes `0 = t_0 < t_1 < … < t_K = T` plus the node indices of the mark times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    nodes: Vec<f64>,
    mark_indices: Vec<usize>,
}

impl TimeGrid {
    /// Uniform grid with `steps` intervals on `[0, horizon]`, refined so every
    /// mark time is a node.
    pub fn new(horizon: f64, steps: usize, mark_times: &[f64]) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::invalid(format!(
                "horizon must be positive, got {horizon}"
            )));
        }
        if steps == 0 {
            return Err(Error::invalid("grid needs at least one step"));
        }
        let mut nodes: Vec<f64> = (0..=steps)
            .map(|k| horizon * k as f64 / steps as f64)
            .collect();
        nodes[steps] = horizon;
        Self::refined(nodes, mark_times)
    }

    /// Grid from explicit nodes (strictly increasing, starting at zero).
    pub fn from_nodes(nodes: Vec<f64>, mark_times: &[f64]) -> Result<Self> {
        if nodes.len() < 2 {
            return Err(Error::invalid("grid needs at least two nodes"));
        }
        if nodes[0] != 0.0 {
            return Err(Error::invalid("first grid node must be 0"));
        }
        if nodes.iter().any(|t| !t.is_finite()) || nodes.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid(
                "grid nodes must be finite and strictly increasing",
            ));
        }
        Self::refined(nodes, mark_times)
    }

    fn refined(mut nodes: Vec<f64>, mark_times: &[f64]) -> Result<Self> {
        let horizon = *nodes.last().expect("non-empty");
        let tol = NODE_TOL * horizon.max(1.0);
        for (i, &m) in mark_times.iter().enumerate() {
            if !m.is_finite() || m < 0.0 || m > horizon + tol {
                return Err(Error::invalid(format!(
                    "mark time {m} outside [0, {horizon}]"
                )));
            }
            if i > 0 && m <= mark_times[i - 1] {
                return Err(Error::invalid("mark times must be strictly increasing"));
            }
        }
        for &m in mark_times {
            let pos = nodes.partition_point(|&t| t < m - tol);
            let present = pos < nodes.len() && (nodes[pos] - m).abs() <= tol;
            if !present {
                nodes.insert(pos, m);
            }
        }
        let mut grid = TimeGrid {
            nodes,
            mark_indices: Vec::with_capacity(mark_times.len()),
        };
        for &m in mark_times {
            let k = grid.index_of(m).expect("mark was inserted");
            grid.mark_indices.push(k);
        }
        Ok(grid)
    }

    /// A copy of this grid with extra mark times inserted.
    pub fn with_marks(&self, extra: &[f64]) -> Result<Self> {
        let mut marks: Vec<f64> = self.mark_times();
        marks.extend_from_slice(extra);
        marks.sort_by(f64::total_cmp);
        marks.dedup_by(|a, b| (*a - *b).abs() <= NODE_TOL * self.horizon().max(1.0));
        Self::refined(self.nodes.clone(), &marks)
    }

    pub fn horizon(&self) -> f64 {
        *self.nodes.last().expect("non-empty")
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// Number of nodes, `K + 1`.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn steps(&self) -> usize {
        self.nodes.len() - 1
    }

    #[inline]
    pub fn time(&self, k: usize) -> f64 {
        self.nodes[k]
    }

    #[inline]
    pub fn dt(&self, k: usize) -> f64 {
        self.nodes[k + 1] - self.nodes[k]
    }

    pub fn mark_indices(&self) -> &[usize] {
        &self.mark_indices
    }

    pub fn mark_times(&self) -> Vec<f64> {
        self.mark_indices.iter().map(|&k| self.nodes[k]).collect()
    }

    /// Index of the node equal to `t` up to a relative 1e-12.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let tol = NODE_TOL * self.horizon().max(1.0);
        let pos = self.nodes.partition_point(|&s| s < t - tol);
        (pos < self.nodes.len() && (self.nodes[pos] - t).abs() <= tol).then_some(pos)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathKind {
    Brownian,
    Drifted,
}

/// A batch of `d`-dimensional paths sampled at the nodes of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBatch {
    grid: Arc<TimeGrid>,
    dim: usize,
    n_paths: usize,
    values: Vec<f64>,
    seed: u64,
    kind: PathKind,
}

impl PathBatch {
    /// Wraps raw values. Every path must start at the origin and every value be finite.
    pub fn from_values(
        grid: Arc<TimeGrid>,
        dim: usize,
        values: Vec<f64>,
        seed: u64,
        kind: PathKind,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("dimension must be at least 1"));
        }
        let stride = grid.len() * dim;
        if !values.len().is_multiple_of(stride) {
            return Err(Error::invalid("value count is not a whole number of paths"));
        }
        let n_paths = values.len() / stride;
        for p in 0..n_paths {
            if values[p * stride..p * stride + dim]
                .iter()
                .any(|&v| v != 0.0)
            {
                return Err(Error::invalid(format!(
                    "path {p} does not start at the origin"
                )));
            }
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(None, "non-finite path value"));
        }
        Ok(PathBatch {
            grid,
            dim,
            n_paths,
            values,
            seed,
            kind,
        })
    }

    pub fn grid(&self) -> &Arc<TimeGrid> {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn kind(&self) -> PathKind {
        self.kind
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn stride(&self) -> usize {
        self.grid.len() * self.dim
    }

    /// All node values of path `p`, `nodes × d`.
    #[inline]
    pub fn path(&self, p: usize) -> &[f64] {
        let s = self.stride();
        &self.values[p * s..(p + 1) * s]
    }

    /// Value of path `p` at node `k`.
    #[inline]
    pub fn at(&self, p: usize, k: usize) -> &[f64] {
        let base = p * self.stride() + k * self.dim;
        &self.values[base..base + self.dim]
    }

    /// Concatenates chunks that share a grid, dimension and kind.
    pub fn concat(parts: &[PathBatch]) -> Result<PathBatch> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("nothing to concatenate"))?;
        let mut values = Vec::with_capacity(parts.iter().map(|p| p.values.len()).sum());
        for p in parts {
            if p.grid != first.grid || p.dim != first.dim || p.kind != first.kind {
                return Err(Error::invalid("chunks disagree on grid, dimension or kind"));
            }
            values.extend_from_slice(&p.values);
        }
        Ok(PathBatch {
            grid: first.grid.clone(),
            dim: first.dim,
            n_paths: values.len() / first.stride(),
            values,
            seed: first.seed,
            kind: first.kind,
        })
    }
}

/// Something that yields Brownian paths chunk by chunk.
///
/// Estimators accept a `&dyn PathSource` so that the same code runs on a small
/// materialized [`PathBatch`] and on a million-path [`BrownianStream`]. Two
/// calls with the same source see the same numbers (common random numbers).
pub trait PathSource: Sync {
    fn grid(&self) -> &Arc<TimeGrid>;
    fn dim(&self) -> usize;
    fn n_paths(&self) -> usize;
    fn seed(&self) -> u64;
    fn n_chunks(&self) -> usize;
    fn chunk(&self, i: usize) -> Cow<'_, PathBatch>;
}

impl PathSource for PathBatch {
    fn grid(&self) -> &Arc<TimeGrid> {
        &self.grid
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn n_paths(&self) -> usize {
        self.n_paths
    }
    fn seed(&self) -> u64 {
        self.seed
    }
    fn n_chunks(&self) -> usize {
        1
    }
    fn chunk(&self, _i: usize) -> Cow<'_, PathBatch> {
        Cow::Borrowed(self)
    }
}

/// Lazily generated Brownian paths; chunk `i` is seeded by `(seed, i)` only.
#[derive(Debug, Clone)]
pub struct BrownianStream {
    grid: Arc<TimeGrid>,
    dim: usize,
    n_paths: usize,
    seed: u64,
}

impl BrownianStream {
    pub fn new(grid: Arc<TimeGrid>, dim: usize, n_paths: usize, seed: u64) -> Result<Self> {
        if n_paths == 0 {
            return Err(Error::invalid("batch must contain at least one path"));
        }
        if dim == 0 {
            return Err(Error::invalid("dimension must be at least 1"));
        }
        Ok(BrownianStream {
            grid,
            dim,
            n_paths,
            seed,
        })
    }

    pub fn materialize(&self) -> PathBatch {
        let chunks: Vec<PathBatch> = (0..self.n_chunks())
            .into_par_iter()
            .map(|i| self.generate(i))
            .collect();
        PathBatch::concat(&chunks).expect("chunks share a layout")
    }

    fn generate(&self, i: usize) -> PathBatch {
        let start = i * CHUNK_PATHS;
        let n = CHUNK_PATHS.min(self.n_paths - start);
        let d = self.dim;
        let grid = &self.grid;
        let stride = grid.len() * d;
        let sqrt_dt: Vec<f64> = (0..grid.steps()).map(|k| grid.dt(k).sqrt()).collect();
        let mut rng = rng_for(self.seed, stream::PATHS, i as u64);
        let mut values = vec![0.0; n * stride];
        for path in values.chunks_exact_mut(stride) {
            for (k, s) in sqrt_dt.iter().enumerate() {
                for j in 0..d {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    path[(k + 1) * d + j] = path[k * d + j] + s * z;
                }
            }
        }
        PathBatch {
            grid: self.grid.clone(),
            dim: d,
            n_paths: n,
            values,
            seed: self.seed,
            kind: PathKind::Brownian,
        }
    }
}

impl PathSource for BrownianStream {
    fn grid(&self) -> &Arc<TimeGrid> {
        &self.grid
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn n_paths(&self) -> usize {
        self.n_paths
    }
    fn seed(&self) -> u64 {
        self.seed
    }
    fn n_chunks(&self) -> usize {
        self.n_paths.div_ceil(CHUNK_PATHS)
    }
    fn chunk(&self, i: usize) -> Cow<'_, PathBatch> {
        Cow::Owned(self.generate(i))
    }
}

/// Materialized Brownian batch; identical to concatenating the chunks of the
/// equivalent [`BrownianStream`].
pub fn sample_brownian(
    grid: Arc<TimeGrid>,
    dim: usize,
    batch: usize,
    seed: u64,
) -> Result<PathBatch> {
    Ok(BrownianStream::new(grid, dim, batch, seed)?.materialize())
}

/// Runs `f` on every chunk in parallel and returns the results in chunk order.
pub(crate) fn map_chunks<T, F>(src: &dyn PathSource, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&PathBatch) -> Result<T> + Sync + Send,
{
    (0..src.n_chunks())
        .into_par_iter()
        .map(|i| f(&src.chunk(i)))
        .collect()
}

/// Affine form `v = gain · x + offset` of a Markov feedback drift at one node.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineDrift {
    /// `d × d`, row-major.
    pub gain: Vec<f64>,
    pub offset: Vec<f64>,
}

/// An adapted drift `v(t_k, X_0, …, X_k)`.
///
/// Adaptedness is structural: [`DriftPolicy::drift`] receives only the
/// history up to and including node `k`, as `(k + 1) × d` values.
pub trait DriftPolicy: Send + Sync {
    fn dim(&self) -> usize;

    fn drift(&self, grid: &TimeGrid, k: usize, history: &[f64], out: &mut [f64]);

    /// Almost-sure bound on `|v_t|`, if the policy is bounded.
    fn sup_bound(&self) -> Option<f64> {
        None
    }

    /// Time after which the drift is zero. `None` declares the drift zero
    /// beyond the horizon of whatever grid it is run on.
    fn cutoff(&self) -> Option<f64> {
        None
    }

    /// Affine feedback form at node `k`, for policies whose drifted law is Gaussian.
    fn affine(&self, _grid: &TimeGrid, _k: usize) -> Option<AffineDrift> {
        None
    }

    fn label(&self) -> String;
}

impl<P: DriftPolicy + ?Sized> DriftPolicy for Arc<P> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn drift(&self, grid: &TimeGrid, k: usize, history: &[f64], out: &mut [f64]) {
        (**self).drift(grid, k, history, out)
    }
    fn sup_bound(&self) -> Option<f64> {
        (**self).sup_bound()
    }
    fn cutoff(&self) -> Option<f64> {
        (**self).cutoff()
    }
    fn affine(&self, grid: &TimeGrid, k: usize) -> Option<AffineDrift> {
        (**self).affine(grid, k)
    }
    fn label(&self) -> String {
        (**self).label()
    }
}

/// A policy whose support ends after the grid horizon cannot be integrated on it.
pub fn check_support(policy: &dyn DriftPolicy, grid: &TimeGrid) -> Result<()> {
    match policy.cutoff() {
        Some(k) if k > grid.horizon() * (1.0 + NODE_TOL) => Err(Error::ContractViolation(format!(
            "policy {} is non-zero until {k}, beyond the grid horizon {}",
            policy.label(),
            grid.horizon()
        ))),
        _ => Ok(()),
    }
}

/// Drifted paths together with the per-path control cost and Itô sum.
#[derive(Debug, Clone)]
pub struct Driven {
    pub paths: PathBatch,
    /// `Σ_k |v_k|² Δt_k`
    pub action: Vec<f64>,
    /// `Σ_k v_k · (B_{k+1} − B_k)`
    pub ito: Vec<f64>,
}

/// Explicit Euler scheme with left-endpoint drift, evaluated along the drifted path.
///
/// The drift integral is accumulated separately and added to the Brownian
/// value, which is the same recursion as `X_{k+1} = X_k + v_k Δt_k + ΔB_k`
/// but keeps a zero drift bitwise-exact.
pub fn drive(base: &PathBatch, policy: &dyn DriftPolicy) -> Result<Driven> {
    if base.kind != PathKind::Brownian {
        return Err(Error::invalid("drift must be applied to a Brownian batch"));
    }
    if policy.dim() != base.dim {
        return Err(Error::invalid(format!(
            "policy dimension {} does not match path dimension {}",
            policy.dim(),
            base.dim
        )));
    }
    let grid = &*base.grid;
    let d = base.dim;
    let stride = base.stride();
    let steps = grid.steps();
    let active_until = match policy.cutoff() {
        Some(c) => grid.nodes().partition_point(|&t| t < c).min(steps),
        None => steps,
    };

    let mut values = vec![0.0; base.values.len()];
    let mut action = vec![0.0; base.n_paths];
    let mut ito = vec![0.0; base.n_paths];

    values
        .par_chunks_mut(stride)
        .zip(action.par_iter_mut())
        .zip(ito.par_iter_mut())
        .enumerate()
        .try_for_each(|(p, ((x, act), sum_db))| -> Result<()> {
            let b = base.path(p);
            let mut v = vec![0.0; d];
            let mut acc = vec![0.0; d];
            for k in 0..steps {
                let dt = grid.dt(k);
                if k < active_until {
                    policy.drift(grid, k, &x[..(k + 1) * d], &mut v);
                    if let Some(j) = v.iter().position(|c| !c.is_finite()) {
                        return Err(Error::numeric(
                            Some(k),
                            format!(
                                "policy {} returned {} in coordinate {j}",
                                policy.label(),
                                v[j]
                            ),
                        ));
                    }
                } else {
                    v.fill(0.0);
                }
                for j in 0..d {
                    let db = b[(k + 1) * d + j] - b[k * d + j];
                    *sum_db += v[j] * db;
                    *act += v[j] * v[j] * dt;
                    acc[j] += v[j] * dt;
                    x[(k + 1) * d + j] = b[(k + 1) * d + j] + acc[j];
                }
            }
            Ok(())
        })?;

    Ok(Driven {
        paths: PathBatch {
            grid: base.grid.clone(),
            dim: d,
            n_paths: base.n_paths,
            values,
            seed: base.seed,
            kind: PathKind::Drifted,
        },
        action,
        ito,
    })
}

pub fn apply_drift(base: &PathBatch, policy: &dyn DriftPolicy) -> Result<PathBatch> {
    Ok(drive(base, policy)?.paths)
}

/// Per-path log Girsanov weight `−Σ v·ΔB − ½ Σ |v|² Δt`. Averages of
/// `g(X) · exp(weight)` estimate `E[g(B)]`.
pub fn girsanov_log_weight(policy: &dyn DriftPolicy, base: &PathBatch) -> Result<Vec<f64>> {
    let driven = drive(base, policy)?;
    Ok(log_weights(&driven))
}

pub(crate) fn log_weights(driven: &Driven) -> Vec<f64> {
    driven
        .ito
        .iter()
        .zip(&driven.action)
        .map(|(i, a)| -i - 0.5 * a)
        .collect()
}

/// Monte Carlo estimate of `E Σ_k |v_k|² Δt_k`, the squared action norm
/// truncated at the grid horizon.
pub fn action_norm_sq(policy: &dyn DriftPolicy, base: &dyn PathSource) -> Result<EstimatorReport> {
    check_support(policy, base.grid())?;
    let parts = map_chunks(base, |chunk| {
        Ok(Moments::from_slice(&drive(chunk, policy)?.action))
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{AffineFeedback, ConstantPolicy, ZeroPolicy};
    use std::sync::Mutex;

    fn grid(steps: usize) -> Arc<TimeGrid> {
        Arc::new(TimeGrid::new(1.0, steps, &[]).unwrap())
    }

    #[test]
    fn uniform_grid() {
        let g = TimeGrid::new(1.0, 4, &[]).unwrap();
        assert_eq!(g.nodes(), &[0.0, 0.25, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn marks_are_inserted_as_nodes() {
        let g = TimeGrid::new(1.0, 2, &[0.3]).unwrap();
        assert_eq!(g.nodes(), &[0.0, 0.3, 0.5, 1.0]);
        assert_eq!(g.mark_indices(), &[1]);
        let g = TimeGrid::new(1.0, 1, &[0.0]).unwrap();
        assert_eq!(g.nodes(), &[0.0, 1.0]);
        assert_eq!(g.mark_indices(), &[0]);
    }

    #[test]
    fn bad_marks_are_rejected() {
        assert!(matches!(
            TimeGrid::new(1.0, 4, &[0.5, 0.2]),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            TimeGrid::new(1.0, 4, &[1.5]),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            TimeGrid::new(1.0, 4, &[-0.1]),
            Err(Error::InvalidArgument(_))
        ));
        assert!(TimeGrid::new(0.0, 4, &[]).is_err());
        assert!(TimeGrid::new(1.0, 0, &[]).is_err());
    }

    #[test]
    fn paths_start_at_origin_and_are_deterministic() {
        let g = grid(8);
        let a = sample_brownian(g.clone(), 2, 5000, 11).unwrap();
        let b = sample_brownian(g, 2, 5000, 11).unwrap();
        assert_eq!(a.values(), b.values());
        for p in 0..a.n_paths() {
            assert_eq!(a.at(p, 0), &[0.0, 0.0]);
        }
    }

    #[test]
    fn stream_chunks_match_materialized_batch() {
        let g = grid(3);
        let s = BrownianStream::new(g, 1, CHUNK_PATHS + 17, 3).unwrap();
        let all = s.materialize();
        let second = s.chunk(1);
        assert_eq!(second.n_paths(), 17);
        assert_eq!(all.path(CHUNK_PATHS), second.path(0));
    }

    #[test]
    fn terminal_second_moment() {
        let n = 1_000_000;
        let b = BrownianStream::new(grid(1), 1, n, 2024).unwrap();
        let m = map_chunks(&b, |c| {
            Ok(Moments::from_slice(
                &(0..c.n_paths())
                    .map(|p| c.at(p, 1)[0].powi(2))
                    .collect::<Vec<_>>(),
            ))
        })
        .unwrap();
        let mut acc = Moments::new();
        m.iter().for_each(|x| acc.merge(x));
        let band = 3.0 * (2.0 / n as f64).sqrt();
        assert!(
            (acc.mean() - 1.0).abs() < band,
            "E[w(1)^2] = {}",
            acc.mean()
        );
    }

    #[test]
    fn covariance_of_half_and_one() {
        let n = 1_000_000;
        let b = BrownianStream::new(grid(2), 1, n, 99).unwrap();
        let parts = map_chunks(&b, |c| {
            Ok((0..c.n_paths())
                .map(|p| c.at(p, 1)[0] * c.at(p, 2)[0])
                .collect::<Vec<_>>())
        })
        .unwrap();
        let m = Moments::from_slice(&parts.concat());
        assert!(
            (m.mean() - 0.5).abs() < 3.0 * m.std_error(),
            "cov {} ± {}",
            m.mean(),
            m.std_error()
        );
    }

    #[test]
    fn zero_policy_is_bitwise_identity() {
        let base = sample_brownian(grid(50), 2, 300, 5).unwrap();
        let x = apply_drift(&base, &ZeroPolicy::new(2)).unwrap();
        assert_eq!(x.values(), base.values());
        assert_eq!(x.kind(), PathKind::Drifted);
        assert!(girsanov_log_weight(&ZeroPolicy::new(2), &base)
            .unwrap()
            .iter()
            .all(|&w| w == 0.0));
    }

    #[test]
    fn drifting_a_drifted_batch_is_rejected() {
        let base = sample_brownian(grid(4), 1, 10, 5).unwrap();
        let x = apply_drift(&base, &ZeroPolicy::new(1)).unwrap();
        assert!(matches!(
            apply_drift(&x, &ZeroPolicy::new(1)),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn constant_drift_shifts_the_terminal_mean() {
        let base = sample_brownian(grid(20), 1, 200_000, 8).unwrap();
        let x = apply_drift(&base, &ConstantPolicy::new(vec![1.0])).unwrap();
        let m = Moments::from_slice(&(0..x.n_paths()).map(|p| x.at(p, 20)[0]).collect::<Vec<_>>());
        assert!((m.mean() - 1.0).abs() < 3.0 * m.std_error());
    }

    /// Discrete OU variance from the exact recursion of the Euler chain
    /// `v ← v (1 − Δt)² + Δt`, the fine-grid oracle for the feedback case.
    fn euler_ou_variance(steps: usize) -> f64 {
        let dt = 1.0 / steps as f64;
        (0..steps).fold(0.0, |v, _| v * (1.0 - dt).powi(2) + dt)
    }

    #[test]
    fn ou_feedback_terminal_variance() {
        let steps = 200;
        let base = sample_brownian(grid(steps), 1, 400_000, 21).unwrap();
        let x = apply_drift(&base, &AffineFeedback::ou(1, -1.0)).unwrap();
        let xs: Vec<f64> = (0..x.n_paths()).map(|p| x.at(p, steps)[0]).collect();
        let sq = Moments::from_slice(&xs.iter().map(|v| v * v).collect::<Vec<_>>());
        let continuum = (1.0 - (-2.0f64).exp()) / 2.0;
        let bias = (euler_ou_variance(steps) - continuum).abs();
        assert!(bias < 2e-3);
        assert!(
            (sq.mean() - continuum).abs() < 3.0 * sq.std_error() + bias,
            "{}",
            sq.mean()
        );
    }

    #[test]
    fn action_norm_cases() {
        let g = grid(100);
        let base = BrownianStream::new(g.clone(), 1, 200_000, 4).unwrap();
        let zero = action_norm_sq(&ZeroPolicy::new(1), &base).unwrap();
        assert_eq!((zero.value, zero.std_error), (0.0, 0.0));

        let one = action_norm_sq(&ConstantPolicy::new(vec![1.0]), &base).unwrap();
        assert!((one.value - 1.0).abs() < 1e-12);
        assert_eq!(one.std_error, 0.0);

        let ou = action_norm_sq(&AffineFeedback::ou(1, -1.0), &base).unwrap();
        // Oracle: ∫_0^1 E[X_t^2] dt for the Euler chain, left-endpoint sum.
        let dt = 0.01;
        let (mut v, mut integral) = (0.0, 0.0);
        for _ in 0..100 {
            integral += v * dt;
            v = v * (1.0f64 - dt).powi(2) + dt;
        }
        let continuum = ((-2.0f64).exp() + 1.0) / 4.0;
        assert!((integral - continuum).abs() < 5e-3);
        assert!(
            (ou.value - integral).abs() < 3.0 * ou.std_error,
            "{} vs {}",
            ou.value,
            integral
        );
    }

    #[test]
    fn cutoff_beyond_horizon_is_a_contract_violation() {
        let base = sample_brownian(grid(4), 1, 10, 1).unwrap();
        let p = ConstantPolicy::new(vec![1.0]).with_cutoff(2.0);
        assert!(matches!(
            action_norm_sq(&p, &base),
            Err(Error::ContractViolation(_))
        ));
    }

    #[test]
    fn girsanov_weights_for_constant_drift() {
        let base = BrownianStream::new(grid(10), 1, 1_000_000, 77).unwrap();
        let policy = ConstantPolicy::new(vec![1.0]);
        let parts = map_chunks(&base, |c| {
            let w = girsanov_log_weight(&policy, c)?;
            Ok((
                Moments::from_slice(&w),
                Moments::from_slice(&w.iter().map(|x| x.exp()).collect::<Vec<_>>()),
            ))
        })
        .unwrap();
        let (mut w, mut ew) = (Moments::new(), Moments::new());
        for (a, b) in &parts {
            w.merge(a);
            ew.merge(b);
        }
        assert!((ew.mean() - 1.0).abs() < 3.0 * ew.std_error());
        assert!((w.mean() + 0.5).abs() < 3.0 * w.std_error());
    }

    struct Recorder {
        seen: Mutex<Vec<(usize, usize)>>,
    }

    impl DriftPolicy for Recorder {
        fn dim(&self) -> usize {
            1
        }
        fn drift(&self, _grid: &TimeGrid, k: usize, history: &[f64], out: &mut [f64]) {
            self.seen.lock().unwrap().push((k, history.len()));
            out[0] = history[k].sin();
        }
        fn label(&self) -> String {
            "recorder".into()
        }
    }

    #[test]
    fn policies_never_see_the_future() {
        let base = sample_brownian(grid(16), 1, 8, 2).unwrap();
        let rec = Recorder {
            seen: Mutex::new(Vec::new()),
        };
        apply_drift(&base, &rec).unwrap();
        let seen = rec.seen.into_inner().unwrap();
        assert_eq!(seen.len(), 8 * 16);
        assert!(seen.iter().all(|&(k, len)| len == k + 1));
    }

    struct Exploding;
    impl DriftPolicy for Exploding {
        fn dim(&self) -> usize {
            1
        }
        fn drift(&self, _grid: &TimeGrid, k: usize, _h: &[f64], out: &mut [f64]) {
            out[0] = if k == 3 { f64::NAN } else { 0.0 };
        }
        fn label(&self) -> String {
            "exploding".into()
        }
    }

    #[test]
    fn non_finite_drift_reports_its_node() {
        let base = sample_brownian(grid(8), 1, 4, 2).unwrap();
        match apply_drift(&base, &Exploding) {
            Err(Error::NumericFailure { node: Some(3), .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn results_do_not_depend_on_thread_count() {
        let g = grid(20);
        let base = BrownianStream::new(g, 1, 3 * CHUNK_PATHS + 5, 9).unwrap();
        let policy = AffineFeedback::ou(1, -1.0);
        let one = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let four = rayon::ThreadPoolBuilder::new()
            .num_threads(4)
            .build()
            .unwrap();
        let a = one.install(|| action_norm_sq(&policy, &base).unwrap());
        let b = four.install(|| action_norm_sq(&policy, &base).unwrap());
        assert_eq!(a, b);
    }
}
