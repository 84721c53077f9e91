//! Reconstruction of the initial state and trajectory from a recorded
//! output window.
//!
//! Over a window `[t0, T]` the fundamental matrix `Φ(t,t0)` of `A(t,y(t),u(t))`
//! and the observability Gramian `Ψ(t) = ∫ Φ'C'CΦ` turn the output record into
//! a linear least-squares problem for `x(t0)`. The nonlinear drift enters
//! through the correction map
//!
//! ```text
//! G(ρ) = ∫_{t0}^{ρ} Φ(t0,s) f(s, y(s), d(s), u(s)) ds
//! Ξ(t) = ∫_{t0}^{t} Φ'(ρ,t0) C'C Φ(ρ,t0) G(ρ) dρ
//! ```
//!
//! and the operator
//!
//! ```text
//! F_T(d)(t) = Φ(t,t0) [ Ψ(T)^{-1} ( ∫_{t0}^{T} Φ'C' y − Ξ(T; d) ) + G(t; d) ]
//! ```
//!
//! has the true state trajectory as a fixed point. On short windows it is a
//! contraction on bounded sets, which is what the estimators iterate.
//!
//! All integrals are cumulative trapezoid sums on the window grid; `Φ(t0,s)`
//! is obtained per node by an LU solve of `Φ(s,t0)`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    cumulative_trapezoid, integrate_matrix_ode, solve_spd_vec, MatrixPath, TimeGrid, Trajectory,
};
use crate::system::{simulate_truth, InputSignal, SystemModel};

/// Default relative threshold for the persistence-of-excitation check.
pub const PE_EPS_REL: f64 = 1e-10;

/// `Φ(t,t0)` on the grid, integrated column-wise by RK4 with the measured
/// output frozen into `A`. Node 0 is the identity exactly.
pub fn fundamental_matrix(
    model: &SystemModel,
    y: &Trajectory,
    u: &InputSignal,
    grid: &TimeGrid,
) -> Result<MatrixPath> {
    let n = model.n();
    integrate_matrix_ode(
        |t, phi| Ok(model.a(t, &y.at(t), &u.at(t)?)? * phi),
        DMatrix::identity(n, n),
        grid,
    )
}

fn gramian_integrand(
    model: &SystemModel,
    u: &InputSignal,
    t: f64,
    phi: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let cphi = model.c(t, &u.at(t)?)? * phi;
    Ok(cphi.transpose() * cphi)
}

/// `Ψ(t) = ∫_{t0}^{t} Φ'C'CΦ`, cumulative trapezoid, symmetrized after each
/// accumulation.
pub fn gramian_psi(phi: &MatrixPath, model: &SystemModel, u: &InputSignal) -> Result<MatrixPath> {
    let grid = *phi.grid();
    let w = grid
        .nodes()
        .zip(phi.values())
        .map(|(t, p)| gramian_integrand(model, u, t, p))
        .collect::<Result<Vec<_>>>()?;
    let h = grid.step();
    let n = model.n();
    let mut acc = DMatrix::zeros(n, n);
    let mut out = Vec::with_capacity(w.len());
    out.push(acc.clone());
    for i in 1..w.len() {
        acc += (&w[i - 1] + &w[i]) * (0.5 * h);
        acc = (&acc + acc.transpose()) * 0.5;
        out.push(acc.clone());
    }
    MatrixPath::new(grid, out)
}

fn invert_path(phi: &MatrixPath) -> Result<Vec<DMatrix<f64>>> {
    phi.values()
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let n = p.nrows();
            p.clone()
                .lu()
                .solve(&DMatrix::identity(n, n))
                .filter(|inv| inv.iter().all(|v| v.is_finite()))
                .ok_or(Error::SingularFundamental { node: i })
        })
        .collect()
}

fn sample_on(d: &Trajectory, grid: &TimeGrid, count: usize) -> Vec<DVector<f64>> {
    if d.grid() == grid {
        d.values()[..count].to_vec()
    } else {
        grid.nodes().take(count).map(|t| d.at(t)).collect()
    }
}

/// Correction map `Ξ(t; t0, y, d, u)` on the whole grid of `phi`.
pub fn xi_map(
    phi: &MatrixPath,
    model: &SystemModel,
    y: &Trajectory,
    d: &Trajectory,
    u: &InputSignal,
) -> Result<Trajectory> {
    let grid = *phi.grid();
    let inv = invert_path(phi)?;
    let count = grid.n_nodes();
    let dv = sample_on(d, &grid, count);
    let yv = sample_on(y, &grid, count);
    let mut g_int = Vec::with_capacity(count);
    let mut w = Vec::with_capacity(count);
    for (i, t) in grid.nodes().enumerate() {
        let uv = u.at(t)?;
        g_int.push(column(&(&inv[i] * model.f(t, &yv[i], &dv[i], &uv)?)));
        w.push(gramian_integrand(model, u, t, phi.value(i))?);
    }
    let g = cumulative_trapezoid(&g_int, grid.step())?;
    let weighted: Vec<_> = w.iter().zip(&g).map(|(w, g)| w * g).collect();
    let xi = cumulative_trapezoid(&weighted, grid.step())?;
    Trajectory::new(grid, xi.into_iter().map(to_vector).collect())
}

fn column(v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(v.len(), 1, v.as_slice())
}

fn to_vector(m: DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

/// Φ, Ψ and the per-node quantities every reconstruction on one window
/// needs, evaluated once for a fixed output record.
#[derive(Debug, Clone)]
pub struct GramianBundle {
    model: SystemModel,
    input: InputSignal,
    grid: TimeGrid,
    y: Trajectory,
    phi: MatrixPath,
    phi_inv: Vec<DMatrix<f64>>,
    psi: MatrixPath,
    weight: Vec<DMatrix<f64>>,
    /// `∫ Φ'C'y` up to each node.
    output_moment: Vec<DVector<f64>>,
    inputs: Vec<DVector<f64>>,
    min_eig: Trajectory,
    scaled_min_eig: Vec<f64>,
}

impl GramianBundle {
    /// Builds the bundle on the grid of `y`.
    pub fn new(model: &SystemModel, y: &Trajectory, u: &InputSignal) -> Result<Self> {
        if y.dim() != model.k() {
            return Err(Error::Dimension(format!(
                "output record has dimension {} for k = {}",
                y.dim(),
                model.k()
            )));
        }
        let grid = *y.grid();
        let phi = fundamental_matrix(model, y, u, &grid)?;
        let psi = gramian_psi(&phi, model, u)?;
        let phi_inv = invert_path(&phi)?;
        let inputs = grid.nodes().map(|t| u.at(t)).collect::<Result<Vec<_>>>()?;
        let mut weight = Vec::with_capacity(grid.n_nodes());
        let mut moment_int = Vec::with_capacity(grid.n_nodes());
        for (i, t) in grid.nodes().enumerate() {
            let c = model.c(t, &inputs[i])?;
            let ct_phi = (c * phi.value(i)).transpose();
            weight.push(&ct_phi * ct_phi.transpose());
            moment_int.push(column(&(&ct_phi * y.value(i))));
        }
        let output_moment = cumulative_trapezoid(&moment_int, grid.step())?
            .into_iter()
            .map(to_vector)
            .collect();

        let mut raw = Vec::with_capacity(grid.n_nodes());
        let mut scaled = Vec::with_capacity(grid.n_nodes());
        for p in psi.values() {
            let (lo, s) = eigen_summary(p);
            raw.push(DVector::from_element(1, lo));
            scaled.push(s);
        }
        let min_eig = Trajectory::new(grid, raw)?;

        Ok(Self {
            model: model.clone(),
            input: u.clone(),
            grid,
            y: y.clone(),
            phi,
            phi_inv,
            psi,
            weight,
            output_moment,
            inputs,
            min_eig,
            scaled_min_eig: scaled,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn phi(&self) -> &MatrixPath {
        &self.phi
    }

    pub fn psi(&self) -> &MatrixPath {
        &self.psi
    }

    pub fn output(&self) -> &Trajectory {
        &self.y
    }

    pub fn model(&self) -> &SystemModel {
        &self.model
    }

    pub fn input(&self) -> &InputSignal {
        &self.input
    }

    /// Smallest eigenvalue of `Ψ(t)` per node.
    pub fn min_eig(&self) -> &Trajectory {
        &self.min_eig
    }

    /// Smallest eigenvalue of the unit-diagonal rescaling
    /// `diag(Ψ)^{-1/2} Ψ diag(Ψ)^{-1/2}` per node (0 when a diagonal entry
    /// vanishes).
    pub fn scaled_min_eig(&self) -> &[f64] {
        &self.scaled_min_eig
    }

    pub fn last_node(&self) -> usize {
        self.grid.n_steps()
    }

    fn check_node(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.grid.n_steps() {
            return Err(Error::InvalidArgument(format!(
                "window end node {k} outside 1..={}",
                self.grid.n_steps()
            )));
        }
        Ok(())
    }

    /// `G(t_i; d)` for `i = 0..=k`.
    fn drift_integral(&self, d: &[DVector<f64>], k: usize) -> Result<Vec<DMatrix<f64>>> {
        let mut integrand = Vec::with_capacity(k + 1);
        for (i, t) in self.grid.nodes().take(k + 1).enumerate() {
            let fv = self.model.f(t, self.y.value(i), &d[i], &self.inputs[i])?;
            integrand.push(column(&(&self.phi_inv[i] * fv)));
        }
        cumulative_trapezoid(&integrand, self.grid.step())
    }

    /// Same as [`Self::drift_integral`] for the difference `f(d1) − f(d2)`,
    /// which avoids cancellation between two large integrals.
    fn drift_integral_diff(
        &self,
        d1: &[DVector<f64>],
        d2: &[DVector<f64>],
        k: usize,
    ) -> Result<Vec<DMatrix<f64>>> {
        let mut integrand = Vec::with_capacity(k + 1);
        for (i, t) in self.grid.nodes().take(k + 1).enumerate() {
            let y = self.y.value(i);
            let u = &self.inputs[i];
            let df = self.model.f(t, y, &d1[i], u)? - self.model.f(t, y, &d2[i], u)?;
            integrand.push(column(&(&self.phi_inv[i] * df)));
        }
        cumulative_trapezoid(&integrand, self.grid.step())
    }

    fn xi_from(&self, g: &[DMatrix<f64>]) -> Result<Vec<DMatrix<f64>>> {
        let weighted: Vec<_> = g.iter().zip(&self.weight).map(|(g, w)| w * g).collect();
        cumulative_trapezoid(&weighted, self.grid.step())
    }

    /// `Ξ(t_i; d)` for every node of the window.
    pub fn xi(&self, d: &Trajectory) -> Result<Trajectory> {
        let k = self.last_node();
        let dv = sample_on(d, &self.grid, k + 1);
        let xi = self.xi_from(&self.drift_integral(&dv, k)?)?;
        Trajectory::new(self.grid, xi.into_iter().map(to_vector).collect())
    }

    /// Initial state from the window ending at node `k`, with `d` standing in
    /// for the unknown trajectory inside the correction term. Exact (up to
    /// quadrature) when `f` does not depend on the state.
    pub fn one_shot_initial_state(&self, d: &Trajectory, k: usize) -> Result<DVector<f64>> {
        self.check_node(k)?;
        let dv = sample_on(d, &self.grid, k + 1);
        let g = self.drift_integral(&dv, k)?;
        let xi = self.xi_from(&g)?;
        let rhs = &self.output_moment[k] - to_vector(xi[k].clone());
        Ok(solve_spd_vec(self.psi.value(k), &rhs)?.0)
    }

    /// Applies the operator on `[t0, t_k]`.
    pub fn apply(&self, z: &Trajectory, k: usize) -> Result<MapOutput> {
        self.check_node(k)?;
        let zv = sample_on(z, &self.grid, k + 1);
        let g = self.drift_integral(&zv, k)?;
        let xi = self.xi_from(&g)?;
        let rhs = &self.output_moment[k] - to_vector(xi[k].clone());
        let (x0, condition) = solve_spd_vec(self.psi.value(k), &rhs)?;
        let values = (0..=k)
            .map(|i| self.phi.value(i) * (&x0 + to_vector(g[i].clone())))
            .collect();
        let grid = if k == self.last_node() {
            self.grid
        } else {
            self.grid.prefix(k)?
        };
        Ok(MapOutput {
            trajectory: Trajectory::new(grid, values)?,
            initial_state: x0,
            condition,
        })
    }

    /// `F_T(d1) − F_T(d2)` on `[t0, t_k]`, computed from the difference of
    /// the drift terms.
    pub fn apply_difference(
        &self,
        d1: &Trajectory,
        d2: &Trajectory,
        k: usize,
    ) -> Result<Vec<DVector<f64>>> {
        self.check_node(k)?;
        let a = sample_on(d1, &self.grid, k + 1);
        let b = sample_on(d2, &self.grid, k + 1);
        self.difference_from_samples(&a, &b, k)
    }

    fn difference_from_samples(
        &self,
        a: &[DVector<f64>],
        b: &[DVector<f64>],
        k: usize,
    ) -> Result<Vec<DVector<f64>>> {
        let g = self.drift_integral_diff(a, b, k)?;
        let xi = self.xi_from(&g)?;
        let (dx0, _) = solve_spd_vec(self.psi.value(k), &(-to_vector(xi[k].clone())))?;
        Ok((0..=k)
            .map(|i| self.phi.value(i) * (&dx0 + to_vector(g[i].clone())))
            .collect())
    }

    /// Largest observed ratio `‖F(d1) − F(d2)‖ / ‖d1 − d2‖` over random
    /// pairs of piecewise-linear trajectories bounded by `radius`.
    ///
    /// Pairs cycle through four families: independent interior paths,
    /// nearby constant paths on the sphere, radial perturbations of a
    /// boundary path, and independent boundary paths. Each pair draws from
    /// its own ChaCha stream so the result is independent of scheduling.
    pub fn contraction_modulus(
        &self,
        k: usize,
        radius: f64,
        ell_target: f64,
        n_pairs: usize,
        seed: u64,
    ) -> Result<ContractionReport> {
        self.check_node(k)?;
        if n_pairs < 32 {
            return Err(Error::InvalidArgument(format!(
                "contraction_modulus needs at least 32 pairs, got {n_pairs}"
            )));
        }
        let n = self.model.n();
        let times: Vec<f64> = self.grid.nodes().take(k + 1).collect();
        let ratios = (0..n_pairs)
            .into_par_iter()
            .map(|p| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(p as u64);
                let (d1, d2) = random_pair(&mut rng, p, n, radius, &times);
                let denom = d1
                    .iter()
                    .zip(&d2)
                    .map(|(a, b)| (a - b).norm())
                    .fold(0.0, f64::max);
                if denom == 0.0 {
                    return Ok(0.0);
                }
                let diff = self.difference_from_samples(&d1, &d2, k)?;
                Ok(diff.iter().map(|v| v.norm()).fold(0.0, f64::max) / denom)
            })
            .collect::<Result<Vec<f64>>>()?;
        let ell_measured = ratios.into_iter().fold(0.0, f64::max);
        Ok(ContractionReport {
            t: self.grid.node(k),
            radius,
            ell_target,
            ell_measured,
            n_pairs,
            pass: ell_measured <= ell_target,
        })
    }
}

/// Result of one operator application.
#[derive(Debug, Clone, PartialEq)]
pub struct MapOutput {
    pub trajectory: Trajectory,
    /// `Ψ(T)^{-1}(∫Φ'C'y − Ξ(T))`, i.e. the value at `t0`.
    pub initial_state: DVector<f64>,
    /// Condition estimate of the Gramian solve.
    pub condition: f64,
}

fn eigen_summary(p: &DMatrix<f64>) -> (f64, f64) {
    let n = p.nrows();
    let raw = SymmetricEigen::new(p.clone()).eigenvalues.min();
    if (0..n).any(|i| !(p[(i, i)] > 0.0)) {
        return (raw, 0.0);
    }
    let scaled = DMatrix::from_fn(n, n, |i, j| p[(i, j)] / (p[(i, i)] * p[(j, j)]).sqrt());
    (raw, SymmetricEigen::new(scaled).eigenvalues.min())
}

const PATH_KNOTS: usize = 8;

fn random_pair(
    rng: &mut ChaCha8Rng,
    p: usize,
    n: usize,
    radius: f64,
    times: &[f64],
) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
    let ball = |rng: &mut ChaCha8Rng| -> DVector<f64> {
        loop {
            let v = DVector::from_fn(n, |_, _| rng.random_range(-1.0..=1.0));
            let norm = v.norm();
            if norm > 1e-9 && norm <= 1.0 {
                return v * radius;
            }
        }
    };
    let sphere = |rng: &mut ChaCha8Rng| -> DVector<f64> {
        let v = ball(rng);
        let norm = v.norm();
        v * (radius / norm)
    };
    let knots = |rng: &mut ChaCha8Rng, on_sphere: bool| -> Vec<DVector<f64>> {
        (0..PATH_KNOTS)
            .map(|_| if on_sphere { sphere(rng) } else { ball(rng) })
            .collect()
    };
    let (k1, k2) = match p % 4 {
        0 => (knots(rng, false), knots(rng, false)),
        1 => {
            let a = sphere(rng);
            let mut b = &a + ball(rng) * 0.05;
            let norm = b.norm();
            if norm > radius {
                b *= radius / norm;
            }
            (vec![a; PATH_KNOTS], vec![b; PATH_KNOTS])
        }
        2 => {
            let a = knots(rng, true);
            let b = a
                .iter()
                .map(|v| v * (1.0 - 0.05 * rng.random_range(0.0..=1.0)))
                .collect();
            (a, b)
        }
        _ => (knots(rng, true), knots(rng, true)),
    };
    (piecewise_linear(&k1, times), piecewise_linear(&k2, times))
}

/// Interpolates equally spaced knots over the sample times. Linear
/// interpolation between points of a ball stays in the ball.
fn piecewise_linear(knots: &[DVector<f64>], times: &[f64]) -> Vec<DVector<f64>> {
    let t0 = times[0];
    let span = times[times.len() - 1] - t0;
    let segs = (knots.len() - 1) as f64;
    times
        .iter()
        .map(|t| {
            let s = ((t - t0) / span * segs).clamp(0.0, segs);
            let i = (s.floor() as usize).min(knots.len() - 2);
            let w = s - i as f64;
            &knots[i] * (1.0 - w) + &knots[i + 1] * w
        })
        .collect()
}

/// Persistence-of-excitation verdict per node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeReport {
    /// Nodes `0..n−1` are exempt and always reported as passing.
    pub node_pass: Vec<bool>,
    pub first_failure: Option<usize>,
    pub pass: bool,
    pub min_scaled_eig: f64,
}

/// Node `t > t0` passes when `Ψ(t)` has a positive diagonal and the
/// smallest eigenvalue of its unit-diagonal rescaling exceeds `eps_rel`.
///
/// Rescaling makes the test invariant to the `Δt^{i+j−1}` growth of the
/// Gramian entries, so short windows are not rejected for being short.
/// The trapezoid sum at node `i` has rank at most `i + 1`, so nodes below
/// `n − 1` cannot be full rank and are exempt.
pub fn check_pe(bundle: &GramianBundle, eps_rel: f64) -> PeReport {
    let exempt = bundle.model.n().saturating_sub(1).max(1);
    let mut node_pass = Vec::with_capacity(bundle.grid.n_nodes());
    let mut first_failure = None;
    let mut min_scaled = f64::INFINITY;
    for (i, s) in bundle.scaled_min_eig.iter().enumerate() {
        if i < exempt {
            node_pass.push(true);
            continue;
        }
        min_scaled = min_scaled.min(*s);
        let ok = *s > eps_rel;
        if !ok && first_failure.is_none() {
            first_failure = Some(i);
        }
        node_pass.push(ok);
    }
    PeReport {
        pass: first_failure.is_none(),
        node_pass,
        first_failure,
        min_scaled_eig: min_scaled,
    }
}

/// Free-function form of [`GramianBundle::one_shot_initial_state`].
pub fn one_shot_initial_state(
    bundle: &GramianBundle,
    d: &Trajectory,
    t_eval: usize,
) -> Result<DVector<f64>> {
    bundle.one_shot_initial_state(d, t_eval)
}

/// `F_T(z)` on `[t0, t_k]`.
pub fn fixed_point_map(bundle: &GramianBundle, z: &Trajectory, k: usize) -> Result<Trajectory> {
    Ok(bundle.apply(z, k)?.trajectory)
}

/// Contraction measurement of `F_T` at window end node `k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContractionReport {
    /// Window end time.
    pub t: f64,
    pub radius: f64,
    pub ell_target: f64,
    pub ell_measured: f64,
    pub n_pairs: usize,
    pub pass: bool,
}

/// Where window output samples come from.
pub trait OutputSource: Send + Sync {
    /// Output samples on `grid`.
    fn sample(&self, grid: &TimeGrid) -> Result<Trajectory>;
    /// Narrowest window width the source can resolve.
    fn min_window(&self) -> f64;
    /// Snaps a candidate window end to a time the source can represent.
    fn snap(&self, t: f64) -> f64 {
        t
    }
}

/// A fixed output record, resampled by linear interpolation. Windows end on
/// record nodes, at least two record steps from the start.
#[derive(Debug, Clone)]
pub struct RecordedOutput {
    record: Trajectory,
}

impl RecordedOutput {
    pub fn new(record: Trajectory) -> Self {
        Self { record }
    }

    pub fn record(&self) -> &Trajectory {
        &self.record
    }
}

impl OutputSource for RecordedOutput {
    fn sample(&self, grid: &TimeGrid) -> Result<Trajectory> {
        Ok(self.record.resample(*grid))
    }

    fn min_window(&self) -> f64 {
        4.0 * self.record.grid().step()
    }

    fn snap(&self, t: f64) -> f64 {
        let g = self.record.grid();
        g.node(g.nearest_node(t).max(2))
    }
}

/// Output of a simulated plant, integrated on each requested grid so every
/// window is sampled at its own resolution.
#[derive(Debug, Clone)]
pub struct SimulatedOutput {
    model: SystemModel,
    x0: DVector<f64>,
    t0: f64,
    input: InputSignal,
}

impl SimulatedOutput {
    pub fn new(model: SystemModel, x0: DVector<f64>, t0: f64, input: InputSignal) -> Self {
        Self {
            model,
            x0,
            t0,
            input,
        }
    }

    /// State and output on `grid`, integrating from `t0` first when the
    /// grid starts later.
    pub fn truth(&self, grid: &TimeGrid) -> Result<(Trajectory, Trajectory)> {
        let start = if grid.t_start() > self.t0 {
            let lead = TimeGrid::new(self.t0, grid.t_start(), 4 * grid.n_steps())?;
            simulate_truth(&self.model, &self.x0, &self.input, &lead)?
                .0
                .last()
                .clone()
        } else {
            self.x0.clone()
        };
        simulate_truth(&self.model, &start, &self.input, grid)
    }
}

impl OutputSource for SimulatedOutput {
    fn sample(&self, grid: &TimeGrid) -> Result<Trajectory> {
        Ok(self.truth(grid)?.1)
    }

    fn min_window(&self) -> f64 {
        1e-12 * self.t0.abs().max(1.0)
    }
}

/// Everything needed to build reconstruction windows `[t0, T]` on demand.
#[derive(Clone)]
pub struct WindowProblem {
    pub model: SystemModel,
    pub input: InputSignal,
    pub source: Arc<dyn OutputSource>,
    pub t0: f64,
    /// Steps per window grid.
    pub window_steps: usize,
    pub n_pairs: usize,
    pub seed: u64,
    pub pe_eps_rel: f64,
}

impl std::fmt::Debug for WindowProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("WindowProblem")
            .field("model", &self.model)
            .field("t0", &self.t0)
            .field("window_steps", &self.window_steps)
            .field("n_pairs", &self.n_pairs)
            .field("seed", &self.seed)
            .finish()
    }
}

impl WindowProblem {
    /// Reconstruction bundle on `[t0, t_end]`.
    pub fn window(&self, t_end: f64) -> Result<GramianBundle> {
        let grid = TimeGrid::new(self.t0, t_end, self.window_steps)?;
        let y = self.source.sample(&grid)?;
        GramianBundle::new(&self.model, &y, &self.input)
    }
}

/// Outcome of [`find_contraction_time`].
#[derive(Debug, Clone)]
pub struct ContractionSearch {
    /// Window end `T`.
    pub t: f64,
    /// Index `j` of the accepted candidate `t0 + γ^j (t_hi − t0)`.
    pub index: u32,
    pub bundle: GramianBundle,
    pub report: ContractionReport,
    pub pe: PeReport,
}

/// Geometric search `T_j = t0 + γ^j (t_hi − t0)`, `j = first_index, …`, for
/// the first window on which the Gramian passes the PE check and the
/// measured contraction modulus is at most `ell`.
pub fn find_contraction_time(
    problem: &WindowProblem,
    radius: f64,
    ell: f64,
    t_hi: f64,
    gamma: f64,
    first_index: u32,
) -> Result<ContractionSearch> {
    if !(ell > 0.0 && ell <= 0.5) {
        return Err(Error::InvalidArgument(format!(
            "contraction target must lie in (0, 1/2], got {ell}"
        )));
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "shrink factor must lie in (0, 1), got {gamma}"
        )));
    }
    if !(t_hi > problem.t0) {
        return Err(Error::InvalidArgument("t_hi must exceed t0".into()));
    }
    let min_width = problem.source.min_window();
    let mut j = first_index;
    loop {
        let candidate = problem.t0 + gamma.powi(j as i32) * (t_hi - problem.t0);
        let t = problem.source.snap(candidate);
        if t - problem.t0 < min_width {
            return Err(Error::GridTooCoarse { min_width });
        }
        let bundle = problem.window(t)?;
        let pe = check_pe(&bundle, problem.pe_eps_rel);
        if pe.pass {
            let report = bundle.contraction_modulus(
                bundle.last_node(),
                radius,
                ell,
                problem.n_pairs,
                problem.seed,
            )?;
            log::debug!(
                "T candidate j={j} t={t:e}: ell_measured={:.4} (target {ell})",
                report.ell_measured
            );
            if report.pass {
                return Ok(ContractionSearch {
                    t,
                    index: j,
                    bundle,
                    report,
                    pe,
                });
            }
        } else {
            log::debug!("T candidate j={j} t={t:e}: PE check failed");
        }
        j += 1;
    }
}
