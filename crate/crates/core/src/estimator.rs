//! Iterative estimation of `x(t0)` from an output record.
//!
//! Case I assumes a known bound `|x0| < R`: the radius doubles every step,
//! the window `[t0, t_ν]` shrinks so that `F_{t_ν}` stays a contraction on
//! the ball of radius `R_ν`, and `ξ_ν` is read off the newest iterate at
//! `t_ν`. Case II runs one Case I branch per hypothesised bound `i = 1, 2, …`
//! and keeps the diagonal `ξ_ν^ν`.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{integrate_ode, TimeGrid, Trajectory};
use crate::reconstruction::{
    find_contraction_time, ContractionSearch, GramianBundle, MapOutput, WindowProblem,
};
use crate::system::{InputSignal, SystemModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Case {
    #[serde(rename = "I")]
    I,
    #[serde(rename = "II")]
    II,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    /// Contraction target, in `(0, 1/2]`.
    pub ell: f64,
    /// Maximum number of estimates (Case I) or branches (Case II).
    pub n_iters: usize,
    /// Two consecutive deltas below this declare convergence.
    pub tol_abs: f64,
    /// Widest window end tried by the search.
    pub t_hi: f64,
    /// Geometric shrink factor of the window search.
    pub gamma: f64,
    /// Window shrinks allowed per step after a failed a-posteriori check.
    pub max_retries: u32,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            ell: 0.5,
            n_iters: 15,
            tol_abs: 1e-5,
            t_hi: 1e-2,
            gamma: 0.25,
            max_retries: 3,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ell > 0.0 && self.ell <= 0.5) {
            return Err(Error::InvalidArgument(format!(
                "ell must lie in (0, 1/2], got {}",
                self.ell
            )));
        }
        if self.n_iters == 0 {
            return Err(Error::InvalidArgument("n_iters must be positive".into()));
        }
        if !(self.tol_abs > 0.0) {
            return Err(Error::InvalidArgument("tol_abs must be positive".into()));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "gamma must lie in (0, 1), got {}",
                self.gamma
            )));
        }
        Ok(())
    }
}

/// Per-step evidence that the window was contractive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepCertificate {
    /// Index `j` of the accepted window `t0 + γ^j (t_hi − t0)`.
    pub search_index: u32,
    /// Sampled modulus of `F_{t_ν}` on the ball of radius `R_ν`.
    pub ell_measured: f64,
    /// `‖F(z_ν) − F(z_{ν−1})‖ / ‖z_ν − z_{ν−1}‖` on `[t0, t_ν]`; absent on
    /// the first step or when the iterates agree to rounding.
    pub realized_ratio: Option<f64>,
    pub retries: u32,
    /// Condition estimate of the Gramian solve.
    pub condition: f64,
    pub pe_min_scaled_eig: f64,
    /// `‖z_ν‖` on `[t0, t_ν]`.
    pub iterate_sup: f64,
    pub within_radius: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub nu: usize,
    pub radius: f64,
    pub t: f64,
    pub estimate: DVector<f64>,
    /// `|ξ_ν − ξ_{ν−1}|`, absent for the first estimate.
    pub delta: Option<f64>,
    pub certificate: StepCertificate,
}

/// Full record of one estimation run.
#[derive(Debug, Clone)]
pub struct EstimationRun {
    pub case: Case,
    pub ell: f64,
    pub steps: Vec<StepRecord>,
    /// `z_{ν+1} = F_{t_ν}(z_ν)` on `[t0, t_ν]`, one per step.
    pub iterates: Vec<Trajectory>,
    pub converged: bool,
    /// The map did not depend on the iterate, so the first estimate is exact.
    pub dead_beat: bool,
    pub final_estimate: DVector<f64>,
    /// Case II diagonal indices whose branch failed.
    pub gaps: Vec<usize>,
    pub failure: Option<Error>,
}

impl EstimationRun {
    pub fn radii(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.radius).collect()
    }

    pub fn times(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.t).collect()
    }

    pub fn estimates(&self) -> Vec<DVector<f64>> {
        self.steps.iter().map(|s| s.estimate.clone()).collect()
    }

    pub fn certificates(&self) -> Vec<&StepCertificate> {
        self.steps.iter().map(|s| &s.certificate).collect()
    }

    pub fn sequence(&self) -> EstimateSequence {
        EstimateSequence::new(self.estimates())
    }
}

/// `ξ_1, ξ_2, …` with successive distances.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateSequence {
    pub values: Vec<DVector<f64>>,
    pub deltas: Vec<f64>,
}

impl EstimateSequence {
    pub fn new(values: Vec<DVector<f64>>) -> Self {
        let deltas = values.windows(2).map(|w| (&w[1] - &w[0]).norm()).collect();
        Self { values, deltas }
    }

    /// Largest ratio `delta_{k+1} / delta_k` over the last `count` ratios.
    pub fn tail_ratio(&self, count: usize) -> Option<f64> {
        if self.deltas.len() < count + 1 {
            return None;
        }
        let d = &self.deltas[self.deltas.len() - count - 1..];
        Some(
            d.windows(2)
                .map(|w| if w[0] > 0.0 { w[1] / w[0] } else { 0.0 })
                .fold(0.0, f64::max),
        )
    }
}

/// Applies `F_T` with `T` the end of `bundle`, after restricting `z_prev` to
/// the (shorter) window.
pub fn iterate_step(bundle: &GramianBundle, z_prev: &Trajectory) -> Result<MapOutput> {
    let g = bundle.grid();
    let span = z_prev.grid();
    let slack = 1e-12 * (g.t_end() - g.t_start()).abs().max(g.t_end().abs());
    if span.t_start() > g.t_start() + slack || span.t_end() < g.t_end() - slack {
        return Err(Error::InvalidArgument(format!(
            "previous iterate on [{}, {}] does not cover the window [{}, {}]",
            span.t_start(),
            span.t_end(),
            g.t_start(),
            g.t_end()
        )));
    }
    bundle.apply(z_prev, bundle.last_node())
}

/// Integrates `ẋ = A(t,y,u)x + f(t,y,x,u)` from `xi` with the measured `y`.
///
/// A record at twice the density of `grid` puts every RK4 stage on a record
/// node, so no interpolation error enters.
pub fn forward_propagate(
    model: &SystemModel,
    xi: &DVector<f64>,
    u: &InputSignal,
    y: &Trajectory,
    grid: &TimeGrid,
) -> Result<Trajectory> {
    if xi.len() != model.n() {
        return Err(Error::Dimension(format!(
            "initial state has length {} for n = {}",
            xi.len(),
            model.n()
        )));
    }
    integrate_ode(
        |t, x| model.rhs_with_output(t, &y.at(t), x, &u.at(t)?),
        xi.clone(),
        grid,
    )
}

/// Ratio below which iterates are treated as identical.
const REALIZED_FLOOR: f64 = 1e-12;

struct Chain {
    steps: Vec<StepRecord>,
    iterates: Vec<Trajectory>,
    converged: bool,
    dead_beat: bool,
    failure: Option<Error>,
}

fn realized_ratio(
    bundle: &GramianBundle,
    z: &Trajectory,
    z_older: &Trajectory,
) -> Result<Option<f64>> {
    let k = bundle.last_node();
    let grid = *bundle.grid();
    let a = z.resample(grid);
    let b = z_older.resample(grid);
    let denom = a.sup_distance(&b);
    if denom <= REALIZED_FLOOR * (1.0 + a.sup_norm()) {
        return Ok(None);
    }
    let diff = bundle.apply_difference(&a, &b, k)?;
    Ok(Some(
        diff.iter().map(|v| v.norm()).fold(0.0, f64::max) / denom,
    ))
}

fn certificate(
    search: &ContractionSearch,
    out: &MapOutput,
    z: &Trajectory,
    radius: f64,
    realized: Option<f64>,
    retries: u32,
) -> StepCertificate {
    let g = search.bundle.grid();
    let sup = z.resample(*g).sup_norm();
    StepCertificate {
        search_index: search.index,
        ell_measured: search.report.ell_measured,
        realized_ratio: realized,
        retries,
        condition: out.condition,
        pe_min_scaled_eig: search.pe.min_scaled_eig,
        iterate_sup: sup,
        within_radius: sup <= radius,
    }
}

/// One Case I chain. `tol` of `None` runs all `n_iters` steps.
fn run_chain(
    problem: &WindowProblem,
    radius: f64,
    z_init: &DVector<f64>,
    cfg: &EstimatorConfig,
    n_iters: usize,
    tol: Option<f64>,
) -> Chain {
    let mut chain = Chain {
        steps: Vec::new(),
        iterates: Vec::new(),
        converged: false,
        dead_beat: false,
        failure: None,
    };
    if let Err(e) = chain_body(problem, radius, z_init, cfg, n_iters, tol, &mut chain) {
        log::warn!("estimation stopped: {e}");
        chain.failure = Some(e);
    }
    chain
}

fn chain_body(
    problem: &WindowProblem,
    radius: f64,
    z_init: &DVector<f64>,
    cfg: &EstimatorConfig,
    n_iters: usize,
    tol: Option<f64>,
    chain: &mut Chain,
) -> Result<()> {
    if z_init.len() != problem.model.n() {
        return Err(Error::Dimension(format!(
            "z_init has length {} for n = {}",
            z_init.len(),
            problem.model.n()
        )));
    }
    let linear = problem.model.is_linear();
    let t_hi = problem.t0 + cfg.t_hi;
    let mut r = radius;
    let mut search = find_contraction_time(problem, r, cfg.ell, t_hi, cfg.gamma, 0)?;
    let mut z = Trajectory::constant(*search.bundle.grid(), z_init.clone());
    let mut z_older: Option<Trajectory> = None;
    let mut below = 0;

    for nu in 1..=n_iters {
        let mut retries = 0;
        let (out, realized) = loop {
            let out = iterate_step(&search.bundle, &z)?;
            let realized = match &z_older {
                Some(old) if !linear => realized_ratio(&search.bundle, &z, old)?,
                _ => None,
            };
            match realized {
                Some(rho) if rho > cfg.ell => {
                    if retries == cfg.max_retries {
                        return Err(Error::InvalidArgument(format!(
                            "step {nu}: realized contraction ratio {rho:.3} exceeds {} \
                             after {retries} window shrinks (t = {:e})",
                            cfg.ell, search.t
                        )));
                    }
                    retries += 1;
                    log::warn!(
                        "step {nu}: realized ratio {rho:.3} > {}; shrinking window",
                        cfg.ell
                    );
                    search = find_contraction_time(
                        problem,
                        r,
                        cfg.ell,
                        t_hi,
                        cfg.gamma,
                        search.index + 1,
                    )?;
                }
                _ => break (out, realized),
            }
        };

        let estimate = if linear {
            out.initial_state.clone()
        } else {
            out.trajectory.last().clone()
        };
        let delta = chain.steps.last().map(|s| (&estimate - &s.estimate).norm());
        log::info!(
            "step {nu}: R = {r}, t = {:e}, xi = {:?}, delta = {:?}",
            search.t,
            estimate.as_slice(),
            delta
        );
        chain.steps.push(StepRecord {
            nu,
            radius: r,
            t: search.t,
            estimate,
            delta,
            certificate: certificate(&search, &out, &z, r, realized, retries),
        });
        chain.iterates.push(out.trajectory.clone());

        if linear {
            chain.dead_beat = true;
            chain.converged = true;
            return Ok(());
        }
        if let (Some(tol), Some(d)) = (tol, delta) {
            below = if d < tol { below + 1 } else { 0 };
            if below >= 2 {
                chain.converged = true;
                return Ok(());
            }
        }
        if nu == n_iters {
            break;
        }
        z_older = Some(std::mem::replace(&mut z, out.trajectory));
        r *= 2.0;
        search = find_contraction_time(problem, r, cfg.ell, t_hi, cfg.gamma, search.index + 1)?;
    }
    Ok(())
}

/// Case I: known bound `|x0| < radius`, `z_1 ≡ z_init`.
pub fn estimate_known_bound(
    problem: &WindowProblem,
    radius: f64,
    z_init: &DVector<f64>,
    cfg: &EstimatorConfig,
) -> Result<EstimationRun> {
    cfg.validate()?;
    if !(radius > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "radius must be positive, got {radius}"
        )));
    }
    if z_init.norm() >= radius {
        log::warn!(
            "|z_init| = {} is not inside the ball of radius {radius}",
            z_init.norm()
        );
    }
    let chain = run_chain(problem, radius, z_init, cfg, cfg.n_iters, Some(cfg.tol_abs));
    let final_estimate = chain
        .steps
        .last()
        .map(|s| s.estimate.clone())
        .unwrap_or_else(|| z_init.clone());
    Ok(EstimationRun {
        case: Case::I,
        ell: cfg.ell,
        steps: chain.steps,
        iterates: chain.iterates,
        converged: chain.converged,
        dead_beat: chain.dead_beat,
        final_estimate,
        gaps: Vec::new(),
        failure: chain.failure,
    })
}

/// Case II: branch `i` assumes `|x0| < i`, starts from `z ≡ 0` and runs `i`
/// steps; the run keeps `ξ_ν^ν`. Branches run in parallel.
pub fn estimate_general(problem: &WindowProblem, cfg: &EstimatorConfig) -> Result<EstimationRun> {
    cfg.validate()?;
    let n = problem.model.n();
    let zero = DVector::zeros(n);
    let branches: Vec<Chain> = (1..=cfg.n_iters)
        .into_par_iter()
        .map(|i| run_chain(problem, i as f64, &zero, cfg, i, None))
        .collect();

    let mut steps = Vec::new();
    let mut iterates = Vec::new();
    let mut gaps = Vec::new();
    let mut dead_beat = false;
    let mut failure = None;
    for (i, branch) in branches.into_iter().enumerate() {
        let nu = i + 1;
        let pick = if branch.dead_beat {
            dead_beat = true;
            0
        } else {
            nu - 1
        };
        match (branch.steps.get(pick), branch.iterates.get(pick)) {
            (Some(s), Some(z)) => {
                let mut s = s.clone();
                s.nu = nu;
                s.delta = steps
                    .last()
                    .map(|p: &StepRecord| (&s.estimate - &p.estimate).norm());
                steps.push(s);
                iterates.push(z.clone());
            }
            _ => {
                log::warn!("Case II branch {nu} failed: {:?}", branch.failure);
                gaps.push(nu);
                if failure.is_none() {
                    failure = branch.failure;
                }
            }
        }
    }
    let deltas: Vec<f64> = steps.iter().filter_map(|s| s.delta).collect();
    let converged = dead_beat
        || (deltas.len() >= 2 && deltas[deltas.len() - 2..].iter().all(|d| *d < cfg.tol_abs));
    let final_estimate = steps
        .last()
        .map(|s| s.estimate.clone())
        .unwrap_or_else(|| zero.clone());
    if !gaps.is_empty() && steps.is_empty() {
        return Err(failure.unwrap_or(Error::InvalidArgument("every branch failed".into())));
    }
    Ok(EstimationRun {
        case: Case::II,
        ell: cfg.ell,
        steps,
        iterates,
        converged,
        dead_beat,
        final_estimate,
        gaps,
        failure,
    })
}
