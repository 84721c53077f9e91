//! Fixed-step numerical kernels: uniform time grids, sampled paths with
//! piecewise-linear dense output, classical RK4, cumulative trapezoid
//! quadrature and symmetric positive definite solves.
//!
//! Everything here is deterministic and allocation-light; the grids used by
//! the reconstruction code are short (a few hundred nodes per window), so no
//! attempt is made at adaptivity.

use std::ops::{Add, Mul};

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform grid `t_start + i·h`, `i = 0..=n_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    t_start: f64,
    t_end: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(t_start: f64, t_end: f64, n_steps: usize) -> Result<Self> {
        if !(t_start.is_finite() && t_end.is_finite()) {
            return Err(Error::InvalidGrid("non-finite endpoint".into()));
        }
        if t_end <= t_start {
            return Err(Error::InvalidGrid(format!(
                "t_end ({t_end}) must exceed t_start ({t_start})"
            )));
        }
        if n_steps < 2 {
            return Err(Error::InvalidGrid(format!(
                "n_steps must be at least 2, got {n_steps}"
            )));
        }
        Ok(Self {
            t_start,
            t_end,
            n_steps,
        })
    }

    pub fn t_start(&self) -> f64 {
        self.t_start
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_nodes(&self) -> usize {
        self.n_steps + 1
    }

    pub fn step(&self) -> f64 {
        (self.t_end - self.t_start) / self.n_steps as f64
    }

    /// Node time, computed by multiplication so there is no drift; the last
    /// node is `t_end` exactly.
    pub fn node(&self, i: usize) -> f64 {
        if i >= self.n_steps {
            self.t_end
        } else {
            self.t_start + i as f64 * self.step()
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.n_steps).map(move |i| self.node(i))
    }

    /// Index of the node closest to `t` (clamped to the grid).
    pub fn nearest_node(&self, t: f64) -> usize {
        let s = ((t - self.t_start) / self.step()).round();
        if s <= 0.0 {
            0
        } else {
            (s as usize).min(self.n_steps)
        }
    }

    /// Sub-grid `[t_start, node(k)]` sharing this grid's nodes.
    pub fn prefix(&self, k: usize) -> Result<Self> {
        if k < 2 || k > self.n_steps {
            return Err(Error::InvalidGrid(format!(
                "prefix end node {k} outside 2..={}",
                self.n_steps
            )));
        }
        Ok(Self {
            t_start: self.t_start,
            t_end: self.node(k),
            n_steps: k,
        })
    }

    /// Same span with twice the number of steps.
    pub fn refined(&self) -> Self {
        Self {
            n_steps: 2 * self.n_steps,
            ..*self
        }
    }

    /// Interval index and weight of `t` for linear interpolation.
    fn locate(&self, t: f64) -> (usize, f64) {
        let s = (t - self.t_start) / self.step();
        if s <= 0.0 {
            return (0, 0.0);
        }
        let i = s.floor() as usize;
        if i >= self.n_steps {
            return (self.n_steps - 1, 1.0);
        }
        (i, s - i as f64)
    }
}

/// Vector-valued path sampled on a [`TimeGrid`].
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    grid: TimeGrid,
    values: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn new(grid: TimeGrid, values: Vec<DVector<f64>>) -> Result<Self> {
        if values.len() != grid.n_nodes() {
            return Err(Error::Dimension(format!(
                "trajectory has {} samples for {} grid nodes",
                values.len(),
                grid.n_nodes()
            )));
        }
        let dim = values[0].len();
        if let Some(i) = values.iter().position(|v| v.len() != dim) {
            return Err(Error::Dimension(format!(
                "sample {i} has dimension {} (expected {dim})",
                values[i].len()
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn from_fn(grid: TimeGrid, mut f: impl FnMut(f64) -> DVector<f64>) -> Result<Self> {
        let values = grid.nodes().map(&mut f).collect();
        Self::new(grid, values)
    }

    pub fn constant(grid: TimeGrid, value: DVector<f64>) -> Self {
        Self {
            grid,
            values: vec![value; grid.n_nodes()],
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.values[0].len()
    }

    pub fn values(&self) -> &[DVector<f64>] {
        &self.values
    }

    pub fn value(&self, i: usize) -> &DVector<f64> {
        &self.values[i]
    }

    pub fn first(&self) -> &DVector<f64> {
        &self.values[0]
    }

    pub fn last(&self) -> &DVector<f64> {
        &self.values[self.values.len() - 1]
    }

    /// Piecewise-linear evaluation, exact at nodes, clamped outside the span.
    pub fn at(&self, t: f64) -> DVector<f64> {
        let (i, w) = self.grid.locate(t);
        if w == 0.0 {
            return self.values[i].clone();
        }
        if w == 1.0 {
            return self.values[i + 1].clone();
        }
        &self.values[i] * (1.0 - w) + &self.values[i + 1] * w
    }

    /// Component `c` at time `t`.
    pub fn component_at(&self, c: usize, t: f64) -> f64 {
        let (i, w) = self.grid.locate(t);
        let a = self.values[i][c];
        if w == 0.0 {
            return a;
        }
        let b = self.values[i + 1][c];
        if w == 1.0 {
            return b;
        }
        a * (1.0 - w) + b * w
    }

    /// Max of the Euclidean norm over the nodes lying in `[a, b]`.
    pub fn sup_norm_on(&self, a: f64, b: f64) -> f64 {
        self.grid
            .nodes()
            .zip(&self.values)
            .filter(|(t, _)| *t >= a && *t <= b)
            .map(|(_, v)| v.norm())
            .fold(0.0, f64::max)
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    /// Node-wise sup distance; both paths must share the grid.
    pub fn sup_distance(&self, other: &Trajectory) -> f64 {
        debug_assert_eq!(self.grid, other.grid);
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    /// Samples this path on another grid by linear interpolation.
    pub fn resample(&self, grid: TimeGrid) -> Trajectory {
        Trajectory {
            grid,
            values: grid.nodes().map(|t| self.at(t)).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(&DVector<f64>) -> DVector<f64>) -> Trajectory {
        Trajectory {
            grid: self.grid,
            values: self.values.iter().map(f).collect(),
        }
    }

    pub fn truncate(&self, k: usize) -> Result<Trajectory> {
        let grid = self.grid.prefix(k)?;
        Ok(Trajectory {
            grid,
            values: self.values[..=k].to_vec(),
        })
    }
}

/// Matrix-valued path sampled on a [`TimeGrid`].
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixPath {
    grid: TimeGrid,
    values: Vec<DMatrix<f64>>,
}

impl MatrixPath {
    pub fn new(grid: TimeGrid, values: Vec<DMatrix<f64>>) -> Result<Self> {
        if values.len() != grid.n_nodes() {
            return Err(Error::Dimension(format!(
                "matrix path has {} samples for {} grid nodes",
                values.len(),
                grid.n_nodes()
            )));
        }
        let shape = values[0].shape();
        if let Some(i) = values.iter().position(|m| m.shape() != shape) {
            return Err(Error::Dimension(format!(
                "sample {i} has shape {:?} (expected {shape:?})",
                values[i].shape()
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn values(&self) -> &[DMatrix<f64>] {
        &self.values
    }

    pub fn value(&self, i: usize) -> &DMatrix<f64> {
        &self.values[i]
    }

    pub fn last(&self) -> &DMatrix<f64> {
        &self.values[self.values.len() - 1]
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values[0].shape()
    }
}

fn rk4_path<T, F>(
    mut rhs: F,
    init: T,
    grid: &TimeGrid,
    finite: impl Fn(&T) -> bool,
) -> Result<Vec<T>>
where
    T: Clone + Add<T, Output = T> + Mul<f64, Output = T>,
    F: FnMut(f64, &T) -> Result<T>,
{
    let h = grid.step();
    let mut out = Vec::with_capacity(grid.n_nodes());
    if !finite(&init) {
        return Err(Error::IntegrationDiverged {
            node: 0,
            t: grid.t_start(),
        });
    }
    out.push(init);
    for i in 0..grid.n_steps() {
        let t = grid.node(i);
        let x = &out[i];
        let k1 = rhs(t, x)?;
        let k2 = rhs(t + 0.5 * h, &(x.clone() + k1.clone() * (0.5 * h)))?;
        let k3 = rhs(t + 0.5 * h, &(x.clone() + k2.clone() * (0.5 * h)))?;
        let k4 = rhs(t + h, &(x.clone() + k3.clone() * h))?;
        let next = x.clone() + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        if !finite(&next) {
            return Err(Error::IntegrationDiverged {
                node: i + 1,
                t: grid.node(i + 1),
            });
        }
        out.push(next);
    }
    Ok(out)
}

/// Classical fourth-order Runge–Kutta on the grid; node 0 is `x_init`.
pub fn integrate_ode<F>(rhs: F, x_init: DVector<f64>, grid: &TimeGrid) -> Result<Trajectory>
where
    F: FnMut(f64, &DVector<f64>) -> Result<DVector<f64>>,
{
    let values = rk4_path(rhs, x_init, grid, |v: &DVector<f64>| {
        v.iter().all(|x| x.is_finite())
    })?;
    Trajectory::new(*grid, values)
}

/// RK4 for a matrix-valued state.
pub fn integrate_matrix_ode<F>(rhs: F, init: DMatrix<f64>, grid: &TimeGrid) -> Result<MatrixPath>
where
    F: FnMut(f64, &DMatrix<f64>) -> Result<DMatrix<f64>>,
{
    let values = rk4_path(rhs, init, grid, |m: &DMatrix<f64>| {
        m.iter().all(|x| x.is_finite())
    })?;
    MatrixPath::new(*grid, values)
}

/// Cumulative composite trapezoid of a sampled sequence with step `h`.
/// The first entry is the zero of the sample's shape.
pub fn cumulative_trapezoid(samples: &[DMatrix<f64>], h: f64) -> Result<Vec<DMatrix<f64>>> {
    let Some(first) = samples.first() else {
        return Ok(Vec::new());
    };
    let (r, c) = first.shape();
    let mut out = Vec::with_capacity(samples.len());
    let mut acc = DMatrix::zeros(r, c);
    for (i, s) in samples.iter().enumerate() {
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "quadrature integrand",
                node: i,
            });
        }
        if i > 0 {
            acc += (&samples[i - 1] + s) * (0.5 * h);
        }
        out.push(acc.clone());
    }
    Ok(out)
}

/// Cumulative trapezoid of a vector path.
pub fn quadrature(path: &Trajectory) -> Result<Trajectory> {
    let h = path.grid.step();
    let dim = path.dim();
    let mut acc = DVector::zeros(dim);
    let mut out = Vec::with_capacity(path.values.len());
    for (i, v) in path.values.iter().enumerate() {
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                what: "quadrature integrand",
                node: i,
            });
        }
        if i > 0 {
            acc += (&path.values[i - 1] + v) * (0.5 * h);
        }
        out.push(acc.clone());
    }
    Trajectory::new(path.grid, out)
}

/// Cumulative trapezoid of a matrix path.
pub fn quadrature_matrix(path: &MatrixPath) -> Result<MatrixPath> {
    let values = cumulative_trapezoid(&path.values, path.grid.step())?;
    MatrixPath::new(path.grid, values)
}

/// Outcome of [`solve_spd`].
#[derive(Debug, Clone, PartialEq)]
pub struct SpdSolution {
    pub solution: DMatrix<f64>,
    /// Condition estimate of the diagonally equilibrated matrix, from the
    /// Cholesky factor's diagonal.
    pub condition: f64,
    pub jittered: bool,
}

/// Solves `M·S = B` for symmetric positive definite `M` by Cholesky.
///
/// `M` is first equilibrated with `D = diag(M_ii)^{-1/2}`, which leaves the
/// Gramians met here (entries scaling like `Δ^{i+j-1}`) with an O(1)
/// condition number. On factorization failure a single retry adds
/// `1e-12·trace/n` to the diagonal; the result must then pass a backward
/// error check or the matrix is reported singular.
pub fn solve_spd(m: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<SpdSolution> {
    let n = m.nrows();
    if m.ncols() != n || b.nrows() != n {
        return Err(Error::Dimension(format!(
            "solve_spd: matrix {:?}, rhs {:?}",
            m.shape(),
            b.shape()
        )));
    }
    if m.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "solve_spd input",
            node: 0,
        });
    }
    // A positive definite matrix has a strictly positive diagonal.
    if (0..n).any(|i| !(m[(i, i)] > 0.0)) {
        return Err(Error::GramianSingular { jitter: 0.0 });
    }
    let scale = DVector::from_fn(n, |i, _| 1.0 / m[(i, i)].sqrt());
    let mut scaled = DMatrix::from_fn(n, n, |i, j| {
        0.5 * (m[(i, j)] + m[(j, i)]) * scale[i] * scale[j]
    });
    let mut jittered = false;
    let chol = match Cholesky::new(scaled.clone()) {
        Some(c) => c,
        None => {
            let jitter = 1e-12 * scaled.trace() / n as f64;
            for i in 0..n {
                scaled[(i, i)] += jitter;
            }
            jittered = true;
            Cholesky::new(scaled.clone()).ok_or(Error::GramianSingular { jitter })?
        }
    };
    let rhs = DMatrix::from_fn(b.nrows(), b.ncols(), |i, j| b[(i, j)] * scale[i]);
    let scaled_sol = chol.solve(&rhs);
    let solution = DMatrix::from_fn(b.nrows(), b.ncols(), |i, j| scaled_sol[(i, j)] * scale[i]);

    let l = chol.l_dirty();
    let (mut dmin, mut dmax) = (f64::INFINITY, 0.0_f64);
    for i in 0..n {
        let d = l[(i, i)].abs();
        dmin = dmin.min(d);
        dmax = dmax.max(d);
    }
    let condition = (dmax / dmin).powi(2);

    let residual = (m * &solution - b).norm();
    let bound = 1e-10 * (m.norm() * solution.norm() + b.norm());
    if !(residual <= bound) || solution.iter().any(|v| !v.is_finite()) {
        return Err(Error::GramianSingular {
            jitter: if jittered {
                1e-12 * scaled.trace() / n as f64
            } else {
                0.0
            },
        });
    }
    Ok(SpdSolution {
        solution,
        condition,
        jittered,
    })
}

/// Vector convenience wrapper around [`solve_spd`].
pub fn solve_spd_vec(m: &DMatrix<f64>, b: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
    let rhs = DMatrix::from_column_slice(b.len(), 1, b.as_slice());
    let s = solve_spd(m, &rhs)?;
    Ok((
        DVector::from_column_slice(s.solution.as_slice()),
        s.condition,
    ))
}
