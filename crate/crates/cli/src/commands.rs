//! The four subcommands. Each builds a [`Report`] in memory; writing it to
//! disk is a separate step so tests can inspect results directly.

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DVector;
use obsv_core::estimator::{estimate_general, estimate_known_bound, Case, EstimationRun};
use obsv_core::hybrid::{
    check_global_lipschitz, run_hybrid_observer, LipschitzStatus, ObserverOptions, ObserverTrace,
    ResetSchedule,
};
use obsv_core::numerics::Trajectory;
use obsv_core::reconstruction::check_pe;
use obsv_core::system::{
    check_h2, estimate_lipschitz, simulate_truth, InputSignal, LipschitzBox, H2_THRESHOLD,
};

use crate::output::{num, opt, write_atomic, Csv};
use crate::scenario::ScenarioConfig;
use crate::summary::{
    finite, to_json, CheckReport, EstimateReport, IterationRow, ObserverReport, ResetEntry,
    ResetsDocument, RunSummary, Timing, WindowEstimateEntry, WindowFailure,
};
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Check,
    Estimate,
    Observe,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Check => "check",
            Command::Estimate => "estimate",
            Command::Observe => "observe",
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Overrides `estimator.seed`.
    pub seed: Option<u64>,
    /// Treat an unverified global Lipschitz bound as a failed verdict.
    pub strict: bool,
    pub timings: bool,
}

/// How a command ended once its outputs exist.
#[derive(Debug, Clone, PartialEq)]
pub enum Status {
    Ok,
    Numerical(String),
    Verdict(String),
}

#[derive(Debug, Clone)]
pub struct Report {
    pub summary: RunSummary,
    /// File name and contents, `summary.json` last.
    pub files: Vec<(String, String)>,
    pub status: Status,
}

impl Report {
    pub fn file(&self, name: &str) -> Option<&str> {
        self.files
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, c)| c.as_str())
    }

    pub fn write(&self, dir: &Path) -> std::io::Result<Vec<PathBuf>> {
        self.files
            .iter()
            .map(|(name, contents)| write_atomic(dir, name, contents.as_bytes()))
            .collect()
    }

    /// Process exit code for this outcome.
    pub fn exit_code(&self) -> i32 {
        match self.status {
            Status::Ok => 0,
            Status::Numerical(_) => 3,
            Status::Verdict(_) => 4,
        }
    }
}

struct Clock {
    enabled: bool,
    start: Instant,
    phases: Vec<Timing>,
}

impl Clock {
    fn new(enabled: bool) -> Self {
        Clock {
            enabled,
            start: Instant::now(),
            phases: Vec::new(),
        }
    }

    fn lap(&mut self, phase: &str) {
        let now = Instant::now();
        let seconds = (now - self.start).as_secs_f64();
        log::info!("{phase}: {seconds:.3} s");
        self.phases.push(Timing {
            phase: phase.to_string(),
            seconds,
        });
        self.start = now;
    }

    fn finish(self) -> Option<Vec<Timing>> {
        self.enabled.then_some(self.phases)
    }
}

pub fn run(command: Command, cfg: &ScenarioConfig, opts: &RunOptions) -> Result<Report, CliError> {
    let seed = opts.seed.unwrap_or(cfg.estimator.seed);
    let mut summary = RunSummary::new(&cfg.name, command.name(), seed);
    let mut clock = Clock::new(opts.timings);
    let (mut files, status) = match command {
        Command::Simulate => simulate(cfg)?,
        Command::Check => check(cfg, seed, &mut summary)?,
        Command::Estimate => estimate(cfg, seed, &mut summary)?,
        Command::Observe => observe(cfg, seed, opts.strict, &mut summary)?,
    };
    clock.lap(command.name());
    summary.timings = clock.finish();
    files.push(("summary.json".to_string(), to_json(&summary)));
    Ok(Report {
        summary,
        files,
        status,
    })
}

type Files = Vec<(String, String)>;

fn numbered(prefix: &str, count: usize) -> impl Iterator<Item = String> + '_ {
    (1..=count).map(move |i| format!("{prefix}{i}"))
}

fn simulate(cfg: &ScenarioConfig) -> Result<(Files, Status), CliError> {
    let model = cfg.model()?;
    let u = cfg.input_signal()?;
    let grid = cfg.truth_grid()?;
    let (x, y) = simulate_truth(&model, &cfg.x0(), &u, &grid)?;
    let mut header = vec!["t".to_string()];
    header.extend(numbered("x", model.n()));
    header.extend(numbered("y", model.k()));
    header.extend(numbered("u", model.m()));
    let mut csv = Csv::new(&header);
    for (i, t) in grid.nodes().enumerate() {
        let mut row = vec![num(t)];
        row.extend(x.value(i).iter().map(|v| num(*v)));
        row.extend(y.value(i).iter().map(|v| num(*v)));
        row.extend(u.at(t)?.iter().map(|v| num(*v)));
        csv.row(row);
    }
    Ok((vec![("truth.csv".into(), csv.into_string())], Status::Ok))
}

/// Sampling box spanning the simulated output and inputs over `[t0, t1]`.
fn sampling_box(
    cfg: &ScenarioConfig,
    t1: f64,
    radius: f64,
) -> Result<(LipschitzBox, Trajectory), CliError> {
    let model = cfg.model()?;
    let u = cfg.input_signal()?;
    let t0 = cfg.truth.t0;
    let steps = cfg.truth.steps.max(64);
    let grid = obsv_core::numerics::TimeGrid::new(t0, t1, steps)?;
    let (x, y) = simulate_truth(&model, &cfg.x0(), &u, &grid)?;
    let mut y_lo = f64::INFINITY;
    let mut y_hi = f64::NEG_INFINITY;
    for v in y.values() {
        y_lo = y_lo.min(v[0]);
        y_hi = y_hi.max(v[0]);
    }
    let u_ranges = input_ranges(&u, &grid)?;
    Ok((
        LipschitzBox {
            t: (t0, t1),
            y: (y_lo, y_hi),
            radius,
            u: u_ranges,
        },
        x,
    ))
}

fn input_ranges(
    u: &InputSignal,
    grid: &obsv_core::numerics::TimeGrid,
) -> Result<Vec<(f64, f64)>, CliError> {
    let mut ranges = vec![(f64::INFINITY, f64::NEG_INFINITY); u.dim()];
    for t in grid.nodes() {
        for (r, v) in ranges.iter_mut().zip(u.at(t)?.iter()) {
            r.0 = r.0.min(*v);
            r.1 = r.1.max(*v);
        }
    }
    Ok(ranges)
}

const LIPSCHITZ_SAMPLES: usize = 400;

fn check(
    cfg: &ScenarioConfig,
    seed: u64,
    summary: &mut RunSummary,
) -> Result<(Files, Status), CliError> {
    let model = cfg.model()?;
    let u = cfg.input_signal()?;
    let t0 = cfg.truth.t0;
    let x0 = cfg.x0();
    let y0 = model.c(t0, &u.at(t0)?)? * &x0;
    let h2 = check_h2(&model, t0, y0[0], &u.at(t0)?, H2_THRESHOLD)?;

    let problem = cfg.problem(seed)?;
    let e = &cfg.estimator;
    let bundle = problem.window(t0 + e.t_hi)?;
    let pe = check_pe(&bundle, e.pe_eps_rel);
    let contraction = if pe.pass {
        Some(bundle.contraction_modulus(bundle.last_node(), e.radius, e.ell, e.n_pairs, seed)?)
    } else {
        None
    };
    let (bx, _) = sampling_box(cfg, cfg.truth.t_end, e.radius)?;
    let lipschitz_c = estimate_lipschitz(&model, &bx, LIPSCHITZ_SAMPLES, seed)?;

    let contraction_pass = contraction.is_some_and(|c| c.pass);
    summary.verdicts.h2 = Some(h2.pass);
    summary.verdicts.pe = Some(pe.pass);
    summary.verdicts.contraction = Some(contraction_pass);
    summary.check = Some(CheckReport {
        h2_product: h2.product,
        pe_min_scaled_eig: pe.min_scaled_eig,
        pe_first_failure: pe.first_failure,
        lipschitz_c,
        contraction,
    });
    let status = if !h2.pass {
        Status::Verdict(format!("H2: coefficient product {} vanishes", h2.product))
    } else if !pe.pass {
        Status::Verdict(format!(
            "PE: Gramian not positive definite (first failing node {:?})",
            pe.first_failure
        ))
    } else if !contraction_pass {
        let m = contraction.map(|c| c.ell_measured).unwrap_or(f64::NAN);
        Status::Verdict(format!(
            "contraction: measured modulus {m} exceeds {} at t_hi",
            e.ell
        ))
    } else {
        Status::Ok
    };
    Ok((Vec::new(), status))
}

/// Smallest integer strictly above `|x0|`.
fn bound_index(x0: &DVector<f64>) -> usize {
    x0.norm().floor() as usize + 1
}

fn estimate(
    cfg: &ScenarioConfig,
    seed: u64,
    summary: &mut RunSummary,
) -> Result<(Files, Status), CliError> {
    let problem = cfg.problem(seed)?;
    let ecfg = cfg.estimator_config();
    let run = match cfg.estimator.case {
        Case::I => estimate_known_bound(&problem, cfg.estimator.radius, &cfg.z_init(), &ecfg)?,
        Case::II => estimate_general(&problem, &ecfg)?,
    };
    let x0 = cfg.x0();
    summary.iterations = iteration_rows(&run, &x0);
    summary.verdicts.converged = Some(run.converged);
    summary.estimate = Some(EstimateReport {
        case: run.case,
        converged: run.converged,
        dead_beat: run.dead_beat,
        final_estimate: run.final_estimate.iter().copied().collect(),
        final_error: (&run.final_estimate - &x0).norm(),
        gaps: run.gaps.clone(),
        failure: run.failure.as_ref().map(|e| e.to_string()),
    });

    let n = x0.len();
    let mut header = vec!["nu".to_string(), "radius".into(), "t".into()];
    header.extend(numbered("xi", n));
    header.extend([
        "delta".into(),
        "contraction_ratio".into(),
        "realized_ratio".into(),
    ]);
    header.extend(numbered("e", n));
    header.extend(["error".into(), "bound".into()]);
    let mut csv = Csv::new(&header);
    for row in &summary.iterations {
        let mut cells = vec![row.nu.to_string(), num(row.radius), num(row.t)];
        cells.extend(row.xi.iter().map(|v| num(*v)));
        cells.extend([
            opt(row.delta),
            num(row.contraction_ratio),
            opt(row.realized_ratio),
        ]);
        cells.extend(row.xi.iter().zip(x0.iter()).map(|(a, b)| num(a - b)));
        cells.extend([opt(row.error), opt(row.bound)]);
        csv.row(cells);
    }

    let status = match (&run.failure, run.converged) {
        (Some(e), _) if run.steps.is_empty() || run.case == Case::I => {
            Status::Numerical(format!("estimator failed: {e}"))
        }
        (Some(e), _) => Status::Numerical(format!("branches {:?} failed: {e}", run.gaps)),
        (None, false) => Status::Verdict(format!(
            "converged: no two consecutive deltas below {} in {} steps",
            ecfg.tol_abs,
            run.steps.len()
        )),
        (None, true) => Status::Ok,
    };
    Ok((vec![("estimates.csv".into(), csv.into_string())], status))
}

fn iteration_rows(run: &EstimationRun, x0: &DVector<f64>) -> Vec<IterationRow> {
    let k = bound_index(x0);
    run.steps
        .iter()
        .map(|s| IterationRow {
            nu: s.nu,
            radius: s.radius,
            t: s.t,
            xi: s.estimate.iter().copied().collect(),
            delta: s.delta,
            contraction_ratio: s.certificate.ell_measured,
            realized_ratio: s.certificate.realized_ratio,
            error: Some((&s.estimate - x0).norm()),
            bound: (run.case == Case::II && s.nu > k)
                .then(|| run.ell.powi(s.nu as i32 - 1) * (s.nu + k) as f64),
        })
        .collect()
}

fn observe(
    cfg: &ScenarioConfig,
    seed: u64,
    strict: bool,
    summary: &mut RunSummary,
) -> Result<(Files, Status), CliError> {
    let o = cfg
        .observer
        .as_ref()
        .ok_or_else(|| CliError::Config("observer: section required for observe".into()))?;
    let model = cfg.model()?;
    let u = cfg.input_signal()?;
    let t0 = cfg.truth.t0;
    let horizon = t0 + (o.n_resets + 1) as f64 * o.sigma;

    let (probe, x) = sampling_box(cfg, horizon, 1.0)?;
    let bx = LipschitzBox {
        radius: cfg.estimator.radius + x.sup_norm(),
        ..probe
    };
    let lipschitz = check_global_lipschitz(&model, &bx, o.lipschitz_samples, seed, o.lipschitz)?;
    summary.verdicts.lipschitz_verified = Some(lipschitz.verified);
    if !lipschitz.verified && !lipschitz.overridden {
        let msg = format!(
            "lipschitz: sampled constant grows from {} to {} on a 4x larger ball; \
             f does not look globally Lipschitz",
            lipschitz.sampled_inner, lipschitz.sampled_outer
        );
        if strict {
            return Ok((Vec::new(), Status::Verdict(msg)));
        }
        log::warn!("{msg}");
    }

    let schedule = ResetSchedule::new(t0, o.sigma, o.n_resets, lipschitz.constant)?;
    let opts = ObserverOptions {
        steps_per_window: o.steps_per_window,
        window_steps: o.window_steps,
        radius: cfg.estimator.radius,
        z_init: cfg.z_init(),
        estimator: cfg.estimator_config(),
        n_pairs: cfg.estimator.n_pairs,
        seed,
        pe_eps_rel: cfg.estimator.pe_eps_rel,
        perfect_estimates: false,
    };
    let x0 = cfg.x0();
    let trace = run_hybrid_observer(&model, &x0, &u, &schedule, &opts)?;

    summary.iterations = observer_rows(&trace, &x0);
    let failures: Vec<WindowFailure> = trace
        .failures
        .iter()
        .map(|(nu, message)| WindowFailure {
            nu: *nu,
            message: message.clone(),
        })
        .collect();
    summary.observer = Some(ObserverReport {
        sigma: o.sigma,
        n_resets: o.n_resets,
        errors_at_resets: trace.errors_at_resets.clone(),
        window_max_errors: trace.window_max_errors.clone(),
        final_error: *trace.errors_at_resets.last().unwrap_or(&f64::NAN),
        lipschitz,
        failures: failures.clone(),
    });

    let files = vec![
        ("observer.csv".to_string(), observer_csv(&trace)),
        (
            "resets.json".to_string(),
            to_json(&resets_document(cfg, &schedule, &trace, &x0, &lipschitz)),
        ),
    ];
    let status = if failures.is_empty() {
        Status::Ok
    } else {
        Status::Numerical(format!(
            "estimation failed on windows {:?}",
            failures.iter().map(|f| f.nu).collect::<Vec<_>>()
        ))
    };
    Ok((files, status))
}

fn observer_rows(trace: &ObserverTrace, x0: &DVector<f64>) -> Vec<IterationRow> {
    let mut rows: Vec<IterationRow> = Vec::new();
    for e in trace.estimates.iter().filter(|e| e.t.is_finite()) {
        let xi: Vec<f64> = e.estimate.iter().copied().collect();
        let delta = rows.last().map(|p| {
            p.xi.iter()
                .zip(&xi)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        });
        rows.push(IterationRow {
            nu: e.nu,
            radius: e.radius,
            t: e.t,
            xi,
            delta,
            contraction_ratio: e.ell_measured,
            realized_ratio: None,
            error: Some((&e.estimate - x0).norm()),
            bound: None,
        });
    }
    rows
}

fn observer_csv(trace: &ObserverTrace) -> String {
    let n = trace.truth.dim();
    let mut header = vec!["t".to_string()];
    header.extend(numbered("xhat", n));
    header.extend(numbered("x", n));
    header.push("error".into());
    let mut csv = Csv::new(&header);
    for (i, t) in trace.grid.nodes().enumerate() {
        let xh = trace.xhat.value(i);
        let x = trace.truth.value(i);
        let mut row = vec![num(t)];
        row.extend(xh.iter().map(|v| num(*v)));
        row.extend(x.iter().map(|v| num(*v)));
        row.push(num((xh - x).norm()));
        csv.row(row);
    }
    csv.into_string()
}

fn resets_document(
    cfg: &ScenarioConfig,
    schedule: &ResetSchedule,
    trace: &ObserverTrace,
    x0: &DVector<f64>,
    lipschitz: &LipschitzStatus,
) -> ResetsDocument {
    let resets = trace
        .resets
        .iter()
        .map(|r| {
            let estimate =
                trace
                    .estimates
                    .iter()
                    .find(|e| e.nu == r.nu)
                    .map(|e| WindowEstimateEntry {
                        t: finite(e.t),
                        radius: e.radius,
                        search_index: e.search_index,
                        ell_target: e.ell_target,
                        ell_measured: finite(e.ell_measured),
                        iterations: e.iterations,
                        ell_certified: finite(e.ell_certified),
                        pe_pass: e.pe_pass,
                        xi: e.estimate.iter().copied().collect(),
                    });
            ResetEntry {
                nu: r.nu,
                t: r.t,
                m: r.m.iter().copied().collect(),
                pre_reset: r.pre_reset.as_ref().map(|p| p.iter().copied().collect()),
                error: r.error,
                window_max_error: trace.window_max_errors[r.nu],
                trend: r.trend,
                bound: r.bound,
                estimate,
            }
        })
        .collect();
    ResetsDocument {
        schema_version: crate::summary::SCHEMA_VERSION,
        scenario: cfg.name.clone(),
        t0: schedule.t0,
        sigma: schedule.sigma,
        n_resets: schedule.n_resets,
        c_global: lipschitz.constant,
        q: schedule.q,
        ell_seq: schedule.ell_seq.clone(),
        c_seq: schedule.c_seq.clone(),
        initial_error: (&cfg.z_init() - x0).norm(),
        resets,
    }
}
