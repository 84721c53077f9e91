//! Hybrid reset observer.
//!
//! A copy of the plant, driven by the measured output, is integrated over
//! windows `[t0 + νσ, t0 + (ν+1)σ)` and re-initialised at each window start
//! to `m_ν = ω_ν(ξ_ν)`: the estimate `ξ_ν` of `x(t0)` pushed forward through
//! the `ν` preceding windows. Later estimates are certified to tighter
//! contraction targets `ℓ_ν`, so the reset errors decay.

use std::sync::Arc;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{forward_propagate, iterate_step, EstimatorConfig};
use crate::numerics::{TimeGrid, Trajectory};
use crate::reconstruction::{find_contraction_time, SimulatedOutput, WindowProblem};
use crate::system::{estimate_lipschitz, simulate_truth, InputSignal, LipschitzBox, SystemModel};

const MAX_INNER_ITERATIONS: usize = 200;

/// Reset instants and the contraction targets attached to them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResetSchedule {
    pub t0: f64,
    pub sigma: f64,
    pub n_resets: usize,
    pub q: f64,
    pub c_global: f64,
    /// `ℓ_ν`, `ν = 0..=n_resets`.
    pub ell_seq: Vec<f64>,
    /// `C_ν = exp(σC)^{ν+1}`, `ν = 0..=n_resets + 2`.
    pub c_seq: Vec<f64>,
}

impl ResetSchedule {
    /// `ℓ_ν = min(1/2, q^ν / C_{ν+2})` with `q = 1/2`.
    pub fn new(t0: f64, sigma: f64, n_resets: usize, c_global: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "reset period must be positive, got {sigma}"
            )));
        }
        if !(c_global >= 0.0 && c_global.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "Lipschitz constant must be non-negative, got {c_global}"
            )));
        }
        if n_resets == 0 {
            return Err(Error::InvalidArgument("n_resets must be positive".into()));
        }
        let q: f64 = 0.5;
        let growth = (sigma * c_global).exp();
        let c_seq: Vec<f64> = (0..=n_resets + 2)
            .map(|nu| growth.powi(nu as i32 + 1))
            .collect();
        let ell_seq = (0..=n_resets)
            .map(|nu| (q.powi(nu as i32) / c_seq[nu + 2]).min(0.5))
            .collect();
        Ok(Self {
            t0,
            sigma,
            n_resets,
            q,
            c_global,
            ell_seq,
            c_seq,
        })
    }

    pub fn reset_time(&self, nu: usize) -> f64 {
        self.t0 + nu as f64 * self.sigma
    }

    /// `ℓ_{ν−1} C_ν` for `ν ≥ 1`.
    pub fn trend(&self, nu: usize) -> f64 {
        assert!(
            nu >= 1 && nu <= self.n_resets,
            "trend index {nu} out of range"
        );
        self.ell_seq[nu - 1] * self.c_seq[nu]
    }

    /// First `ν` from which the trend is below one and keeps decreasing.
    pub fn decay_onset(&self) -> Option<usize> {
        let trend: Vec<f64> = (1..=self.n_resets).map(|nu| self.trend(nu)).collect();
        (0..trend.len())
            .find(|&i| trend[i] < 1.0 && trend[i..].windows(2).all(|w| w[1] < w[0]))
            .map(|i| i + 1)
    }
}

/// Outcome of the global Lipschitz check on `f`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LipschitzStatus {
    pub sampled_inner: f64,
    pub sampled_outer: f64,
    /// The sampled constant stopped growing between the two balls.
    pub verified: bool,
    pub overridden: bool,
    /// Constant used for the schedule.
    pub constant: f64,
}

/// Samples the Lipschitz constant of `f` on the box and on the same box
/// with a four times larger state ball. Growth beyond 10% means `f` is not
/// globally Lipschitz as far as the samples can tell.
pub fn check_global_lipschitz(
    model: &SystemModel,
    bx: &LipschitzBox,
    samples: usize,
    seed: u64,
    override_constant: Option<f64>,
) -> Result<LipschitzStatus> {
    let inner = estimate_lipschitz(model, bx, samples, seed)?;
    let outer_box = LipschitzBox {
        radius: 4.0 * bx.radius,
        ..bx.clone()
    };
    let outer = estimate_lipschitz(model, &outer_box, samples, seed)?;
    let verified = outer <= 1.1 * inner;
    let (constant, overridden) = match override_constant {
        Some(c) => (c, true),
        None => (outer, false),
    };
    Ok(LipschitzStatus {
        sampled_inner: inner,
        sampled_outer: outer,
        verified,
        overridden,
        constant,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObserverOptions {
    /// Observer integration steps per reset period.
    pub steps_per_window: usize,
    /// Steps per reconstruction window grid.
    pub window_steps: usize,
    pub radius: f64,
    pub z_init: DVector<f64>,
    pub estimator: EstimatorConfig,
    pub n_pairs: usize,
    pub seed: u64,
    pub pe_eps_rel: f64,
    /// Test hook: every estimate is the true initial state.
    pub perfect_estimates: bool,
}

/// How `ξ_ν` was obtained.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowEstimate {
    pub nu: usize,
    pub radius: f64,
    /// Window end `t_ν`.
    pub t: f64,
    pub search_index: u32,
    pub ell_target: f64,
    /// Sampled modulus of a single application of `F_{t_ν}`.
    pub ell_measured: f64,
    pub iterations: usize,
    /// `ell_measured^iterations`, the certified modulus of the composite map.
    pub ell_certified: f64,
    pub pe_pass: bool,
    pub estimate: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResetRecord {
    pub nu: usize,
    pub t: f64,
    pub m: DVector<f64>,
    /// Observer state just before the reset.
    pub pre_reset: Option<DVector<f64>>,
    pub error: f64,
    /// `ℓ_{ν−1} C_ν`, absent at `ν = 0`.
    pub trend: Option<f64>,
    /// `ℓ_{ν−1} C_ν |ξ_0 − x0|`.
    pub bound: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ObserverTrace {
    pub grid: TimeGrid,
    /// Observer path, right-continuous at the resets.
    pub xhat: Trajectory,
    pub truth: Trajectory,
    pub output: Trajectory,
    pub resets: Vec<ResetRecord>,
    pub errors_at_resets: Vec<f64>,
    /// `sup |x̂ − x|` over each window `[t0 + νσ, t0 + (ν+1)σ]`.
    pub window_max_errors: Vec<f64>,
    pub estimates: Vec<WindowEstimate>,
    /// Windows whose estimation failed; the previous estimate was kept.
    pub failures: Vec<(usize, String)>,
}

/// `m_ν = ω_ν(ξ_ν)`: each `ξ_ν` is carried across the `ν` preceding windows
/// by the output-driven copy of the dynamics.
pub fn build_reset_values(
    model: &SystemModel,
    y: &Trajectory,
    u: &InputSignal,
    schedule: &ResetSchedule,
    xi_seq: &[DVector<f64>],
    steps_per_window: usize,
) -> Result<Vec<DVector<f64>>> {
    if xi_seq.len() < schedule.n_resets + 1 {
        return Err(Error::InvalidArgument(format!(
            "need {} estimates, got {}",
            schedule.n_resets + 1,
            xi_seq.len()
        )));
    }
    let grids = window_grids(schedule, steps_per_window)?;
    let mut m = Vec::with_capacity(schedule.n_resets + 1);
    for (nu, xi) in xi_seq.iter().take(schedule.n_resets + 1).enumerate() {
        let mut w = xi.clone();
        for g in &grids[..nu] {
            w = forward_propagate(model, &w, u, y, g)?.last().clone();
        }
        m.push(w);
    }
    Ok(m)
}

fn window_grids(schedule: &ResetSchedule, steps: usize) -> Result<Vec<TimeGrid>> {
    (0..=schedule.n_resets)
        .map(|nu| TimeGrid::new(schedule.reset_time(nu), schedule.reset_time(nu + 1), steps))
        .collect()
}

/// Estimates `ξ_1 … ξ_N` of `x(t0)`.
///
/// Window `ν` is searched at radius `R_ν = max(R_{ν−1}, |ξ_{ν−1}| + 2)`,
/// strictly inside window `ν − 1`. The map `F_{t_ν}` is then applied until
/// the composite modulus `ell_measured^K` reaches `ℓ_ν`, continuing from
/// the previous iterate.
fn window_estimates(
    problem: &WindowProblem,
    schedule: &ResetSchedule,
    opts: &ObserverOptions,
    failures: &mut Vec<(usize, String)>,
) -> Result<Vec<WindowEstimate>> {
    let cfg = &opts.estimator;
    let linear = problem.model.is_linear();
    let t_hi = problem.t0 + cfg.t_hi;
    let mut out = Vec::with_capacity(schedule.n_resets);
    let mut radius = opts.radius;
    let mut prev = opts.z_init.clone();
    let mut z: Option<Trajectory> = None;
    let mut next_index = 0;
    for nu in 1..=schedule.n_resets {
        radius = radius.max(prev.norm() + 2.0);
        let ell_target = schedule.ell_seq[nu];
        let search =
            match find_contraction_time(problem, radius, cfg.ell, t_hi, cfg.gamma, next_index) {
                Ok(s) => s,
                Err(e) => {
                    log::warn!("window {nu}: estimation failed: {e}");
                    failures.push((nu, e.to_string()));
                    out.push(WindowEstimate {
                        nu,
                        radius,
                        t: f64::NAN,
                        search_index: next_index,
                        ell_target,
                        ell_measured: f64::NAN,
                        iterations: 0,
                        ell_certified: f64::NAN,
                        pe_pass: false,
                        estimate: prev.clone(),
                    });
                    continue;
                }
            };
        next_index = search.index + 1;
        let lambda = search.report.ell_measured;
        let iterations = if lambda <= 0.0 || linear {
            1
        } else {
            ((ell_target.ln() / lambda.ln()).ceil() as usize).clamp(1, MAX_INNER_ITERATIONS)
        };
        let mut current = match z.take() {
            Some(t) => t,
            None => Trajectory::constant(*search.bundle.grid(), opts.z_init.clone()),
        };
        let mut initial_state = prev.clone();
        for _ in 0..iterations {
            let step = iterate_step(&search.bundle, &current)?;
            initial_state = step.initial_state;
            current = step.trajectory;
        }
        let estimate = if linear {
            initial_state
        } else {
            current.last().clone()
        };
        log::info!(
            "window {nu}: R = {radius}, t = {:e}, K = {iterations}, xi = {:?}",
            search.t,
            estimate.as_slice()
        );
        out.push(WindowEstimate {
            nu,
            radius,
            t: search.t,
            search_index: search.index,
            ell_target,
            ell_measured: lambda,
            iterations,
            ell_certified: lambda.powi(iterations as i32),
            pe_pass: search.pe.pass,
            estimate: estimate.clone(),
        });
        prev = estimate;
        z = Some(current);
    }
    Ok(out)
}

/// Simulates the plant from `x0_true`, estimates `ξ_ν` from its output,
/// and integrates the reset observer over `n_resets + 1` periods.
pub fn run_hybrid_observer(
    model: &SystemModel,
    x0_true: &DVector<f64>,
    u: &InputSignal,
    schedule: &ResetSchedule,
    opts: &ObserverOptions,
) -> Result<ObserverTrace> {
    opts.estimator.validate()?;
    if opts.steps_per_window < 2 {
        return Err(Error::InvalidArgument(
            "steps_per_window must be at least 2".into(),
        ));
    }
    let n_windows = schedule.n_resets + 1;
    let t_end = schedule.reset_time(n_windows);
    let s = opts.steps_per_window;
    let grid = TimeGrid::new(schedule.t0, t_end, s * n_windows)?;
    let record_grid = TimeGrid::new(schedule.t0, t_end, 2 * s * n_windows)?;
    let (x_fine, y_fine) = simulate_truth(model, x0_true, u, &record_grid)?;
    let truth = Trajectory::new(
        grid,
        (0..=grid.n_steps())
            .map(|i| x_fine.value(2 * i).clone())
            .collect(),
    )?;
    let output = Trajectory::new(
        grid,
        (0..=grid.n_steps())
            .map(|i| y_fine.value(2 * i).clone())
            .collect(),
    )?;

    let mut failures = Vec::new();
    let (xi_seq, estimates) = if opts.perfect_estimates {
        (vec![x0_true.clone(); n_windows], Vec::new())
    } else {
        let problem = WindowProblem {
            model: model.clone(),
            input: u.clone(),
            source: Arc::new(SimulatedOutput::new(
                model.clone(),
                x0_true.clone(),
                schedule.t0,
                u.clone(),
            )),
            t0: schedule.t0,
            window_steps: opts.window_steps,
            n_pairs: opts.n_pairs,
            seed: opts.seed,
            pe_eps_rel: opts.pe_eps_rel,
        };
        let est = window_estimates(&problem, schedule, opts, &mut failures)?;
        let mut xi = vec![opts.z_init.clone()];
        xi.extend(est.iter().map(|e| e.estimate.clone()));
        (xi, est)
    };

    let m = build_reset_values(model, &y_fine, u, schedule, &xi_seq, s)?;
    let grids = window_grids(schedule, s)?;
    let e0 = (&xi_seq[0] - x0_true).norm();

    let mut values: Vec<DVector<f64>> = Vec::with_capacity(grid.n_nodes());
    let mut resets = Vec::with_capacity(n_windows);
    let mut window_max_errors = Vec::with_capacity(n_windows);
    for (nu, g) in grids.iter().enumerate() {
        let path = forward_propagate(model, &m[nu], u, &y_fine, g)?;
        let pre_reset = values.pop();
        let offset = nu * s;
        let mut worst = 0.0_f64;
        for (i, v) in path.values().iter().enumerate() {
            worst = worst.max((v - truth.value(offset + i)).norm());
        }
        values.extend(path.values().iter().cloned());
        window_max_errors.push(worst);
        let error = (&m[nu] - truth.value(offset)).norm();
        let trend = (nu >= 1).then(|| schedule.trend(nu));
        resets.push(ResetRecord {
            nu,
            t: schedule.reset_time(nu),
            m: m[nu].clone(),
            pre_reset,
            error,
            trend,
            bound: trend.map(|c| c * e0),
        });
    }
    let xhat = Trajectory::new(grid, values)?;
    let errors_at_resets = resets.iter().map(|r| r.error).collect();
    Ok(ObserverTrace {
        grid,
        xhat,
        truth,
        output,
        resets,
        errors_at_resets,
        window_max_errors,
        estimates,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reconstruction::PE_EPS_REL;
    use crate::system::{build_triangular, TriangularSpec};
    use nalgebra::{dmatrix, dvector};
    use proptest::prelude::*;

    fn triangular(n: usize, a: &[&str], f: &[&str]) -> SystemModel {
        build_triangular(TriangularSpec::parse(n, 1, a, f).unwrap()).unwrap()
    }

    fn saturated() -> SystemModel {
        triangular(2, &["u1"], &["0", "y - sat(x2)^3"])
    }

    fn one() -> InputSignal {
        InputSignal::constant(&[1.0])
    }

    fn options(n: usize) -> ObserverOptions {
        ObserverOptions {
            steps_per_window: 500,
            window_steps: 256,
            radius: 3.0,
            z_init: DVector::zeros(n),
            estimator: EstimatorConfig {
                gamma: 0.5,
                t_hi: 2.5e-3,
                ..Default::default()
            },
            n_pairs: 64,
            seed: 7,
            pe_eps_rel: PE_EPS_REL,
            perfect_estimates: false,
        }
    }

    fn saturated_trace() -> (ResetSchedule, ObserverTrace) {
        let sched = ResetSchedule::new(0.0, 0.5, 8, 3.0).unwrap();
        let trace = run_hybrid_observer(
            &saturated(),
            &dvector![2.0, 0.0],
            &one(),
            &sched,
            &options(2),
        )
        .unwrap();
        (sched, trace)
    }

    #[test]
    fn schedule_rejects_bad_arguments() {
        assert!(ResetSchedule::new(0.0, 0.0, 4, 1.0).is_err());
        assert!(ResetSchedule::new(0.0, 0.5, 4, -1.0).is_err());
        assert!(ResetSchedule::new(0.0, 0.5, 0, 1.0).is_err());
    }

    #[test]
    fn schedule_values() {
        let s = ResetSchedule::new(1.0, 0.5, 4, 2.0).unwrap();
        let e = 1f64.exp();
        assert!((s.c_seq[0] - e).abs() < 1e-12);
        assert!((s.c_seq[3] - e.powi(4)).abs() < 1e-9);
        assert!((s.ell_seq[1] - 0.5 / e.powi(4)).abs() < 1e-15);
        assert_eq!(s.reset_time(3), 2.5);
        assert!((s.trend(2) - s.ell_seq[1] * e.powi(3)).abs() < 1e-15);
    }

    #[test]
    fn trend_decreases_below_one() {
        let s = ResetSchedule::new(0.0, 0.5, 8, 3.0).unwrap();
        assert_eq!(s.decay_onset(), Some(1));
        for nu in 1..8 {
            assert!(s.trend(nu + 1) < s.trend(nu));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn schedule_invariants(sigma in 0.01f64..2.0, c in 0.01f64..5.0, n in 1usize..20) {
            let s = ResetSchedule::new(0.0, sigma, n, c).unwrap();
            for w in s.ell_seq.windows(2) {
                prop_assert!(w[1] < w[0]);
            }
            for l in &s.ell_seq {
                prop_assert!(*l > 0.0 && *l <= 0.5);
            }
            for nu in 1..=n {
                prop_assert!(s.trend(nu) <= 0.5f64.powi(nu as i32 - 1));
            }
        }
    }

    #[test]
    fn global_lipschitz_check_separates_cubic_from_saturated() {
        let bx = LipschitzBox {
            t: (0.0, 1.0),
            y: (-3.0, 3.0),
            radius: 3.0,
            u: vec![(1.0, 1.0)],
        };
        let cubic = triangular(2, &["u1"], &["0", "x1 - x2^3"]);
        let st = check_global_lipschitz(&cubic, &bx, 400, 3, None).unwrap();
        assert!(!st.verified, "{st:?}");
        let st = check_global_lipschitz(&saturated(), &bx, 400, 3, None).unwrap();
        assert!(st.verified, "{st:?}");
        let st = check_global_lipschitz(&saturated(), &bx, 400, 3, Some(3.0)).unwrap();
        assert!(st.overridden && st.constant == 3.0);
    }

    #[test]
    fn perfect_estimates_track_truth() {
        let sched = ResetSchedule::new(0.0, 0.5, 4, 3.0).unwrap();
        let mut opts = options(2);
        opts.perfect_estimates = true;
        let trace =
            run_hybrid_observer(&saturated(), &dvector![2.0, 0.0], &one(), &sched, &opts).unwrap();
        let worst = trace.window_max_errors.iter().cloned().fold(0.0, f64::max);
        assert!(worst < 1e-6, "{worst}");
    }

    #[test]
    fn perfect_estimates_on_smooth_plant_are_exact() {
        let m = triangular(2, &["u1"], &["0", "-x2"]);
        let sched = ResetSchedule::new(0.0, 0.5, 4, 1.0).unwrap();
        let mut opts = options(2);
        opts.perfect_estimates = true;
        let trace = run_hybrid_observer(&m, &dvector![1.0, -1.0], &one(), &sched, &opts).unwrap();
        let worst = trace.window_max_errors.iter().cloned().fold(0.0, f64::max);
        assert!(worst < 1e-10, "{worst}");
    }

    #[test]
    fn linear_chain_is_dead_beat() {
        let m = triangular(2, &["1"], &["0", "0"]);
        let sched = ResetSchedule::new(0.0, 0.5, 3, 1.0).unwrap();
        let trace =
            run_hybrid_observer(&m, &dvector![1.0, 2.0], &one(), &sched, &options(2)).unwrap();
        assert!(trace.failures.is_empty(), "{:?}", trace.failures);
        assert!(trace.errors_at_resets[1] < 1e-6);
        for e in &trace.estimates {
            assert_eq!(e.iterations, 1);
        }
    }

    #[test]
    fn linear_reset_values_are_propagated_estimates() {
        let m = triangular(2, &["1"], &["0", "0"]);
        let sched = ResetSchedule::new(0.0, 0.25, 3, 1.0).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 800).unwrap();
        let (_, y) = simulate_truth(&m, &dvector![0.0, 0.0], &one(), &grid).unwrap();
        let xi: Vec<DVector<f64>> = (0..4).map(|k| dvector![k as f64, 1.0 - k as f64]).collect();
        let got = build_reset_values(&m, &y, &one(), &sched, &xi, 400).unwrap();
        for (nu, (m_nu, xi_nu)) in got.iter().zip(&xi).enumerate() {
            let s = nu as f64 * 0.25;
            let phi = dmatrix![1.0, s; 0.0, 1.0];
            assert!((m_nu - phi * xi_nu).norm() < 1e-12, "nu {nu}");
        }
    }

    #[test]
    fn reset_values_need_enough_estimates() {
        let m = triangular(2, &["1"], &["0", "0"]);
        let sched = ResetSchedule::new(0.0, 0.25, 3, 1.0).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 8).unwrap();
        let y = Trajectory::constant(grid, dvector![0.0]);
        assert!(build_reset_values(&m, &y, &one(), &sched, &[dvector![0.0, 0.0]], 4).is_err());
    }

    #[test]
    fn saturated_plant_errors_decay() {
        let (_, trace) = saturated_trace();
        assert!(trace.failures.is_empty(), "{:?}", trace.failures);
        let e = &trace.errors_at_resets;
        assert_eq!(e.len(), 9);
        for w in e[2..].windows(2) {
            assert!(w[1] < w[0], "{e:?}");
        }
        assert!(*e.last().unwrap() < 1e-3);
    }

    #[test]
    fn saturated_plant_respects_trend_bound() {
        let (_, trace) = saturated_trace();
        let h = trace.grid.step();
        for r in &trace.resets[1..] {
            let bound = r.bound.unwrap();
            assert!(r.error <= bound, "reset {}: {} > {bound}", r.nu, r.error);
            assert!(
                trace.window_max_errors[r.nu] <= bound + 10.0 * h * h,
                "window {}: {} > {bound}",
                r.nu,
                trace.window_max_errors[r.nu]
            );
        }
    }

    #[test]
    fn observer_is_right_continuous_at_resets() {
        let (sched, trace) = saturated_trace();
        for r in &trace.resets {
            let k = trace.grid.nearest_node(sched.reset_time(r.nu));
            assert_eq!(trace.xhat.value(k), &r.m);
        }
        for r in &trace.resets[1..] {
            assert!(r.pre_reset.is_some());
        }
    }

    #[test]
    fn estimates_meet_their_targets() {
        let (_, trace) = saturated_trace();
        for e in &trace.estimates {
            assert!(e.pe_pass);
            assert!(e.ell_certified <= e.ell_target, "{e:?}");
        }
        for w in trace.estimates.windows(2) {
            assert!(w[1].t < w[0].t);
        }
    }
}
