use std::sync::Arc;

use nalgebra::{dvector, DVector};
use obsv_core::estimator::{estimate_known_bound, EstimatorConfig};
use obsv_core::numerics::TimeGrid;
use obsv_core::reconstruction::{RecordedOutput, SimulatedOutput, WindowProblem, PE_EPS_REL};
use obsv_core::system::{
    build_triangular, simulate_truth, InputSignal, SystemModel, TriangularSpec,
};
use obsv_core::Error;

fn model(n: usize, a: &[&str], f: &[&str]) -> SystemModel {
    build_triangular(TriangularSpec::parse(n, 1, a, f).unwrap()).unwrap()
}

fn problem(
    m: &SystemModel,
    source: Arc<dyn obsv_core::reconstruction::OutputSource>,
    u: &InputSignal,
) -> WindowProblem {
    WindowProblem {
        model: m.clone(),
        input: u.clone(),
        source,
        t0: 0.0,
        window_steps: 128,
        n_pairs: 64,
        seed: 2,
        pe_eps_rel: PE_EPS_REL,
    }
}

#[test]
fn recorded_output_estimation_stops_at_record_resolution() {
    let m = model(2, &["u1"], &["0", "x1 - x2^3"]);
    let u = InputSignal::constant(&[1.0]);
    let x0 = dvector![2.0, 0.0];
    let record = TimeGrid::new(0.0, 2e-2, 20_000).unwrap();
    let (_, y) = simulate_truth(&m, &x0, &u, &record).unwrap();
    let p = problem(&m, Arc::new(RecordedOutput::new(y)), &u);
    let cfg = EstimatorConfig {
        tol_abs: 1e-9,
        ..Default::default()
    };
    let run = estimate_known_bound(&p, 3.0, &dvector![0.0, 1.0], &cfg).unwrap();
    assert!(
        matches!(run.failure, Some(Error::GridTooCoarse { .. })),
        "{:?}",
        run.failure
    );
    assert!(run.steps.len() >= 4);
    for s in &run.steps {
        let snapped = s.t / record.step();
        assert!((snapped - snapped.round()).abs() < 1e-6);
    }
    let best = run
        .estimates()
        .iter()
        .map(|xi| (xi - &x0).norm())
        .fold(f64::INFINITY, f64::min);
    assert!(best < 1e-3, "{best}");
}

#[test]
fn three_state_nonlinear_chain_error_decreases() {
    let m = model(3, &["1", "1"], &["0", "0", "-x3 + sin(x2)"]);
    let u = InputSignal::constant(&[0.0]);
    let x0 = dvector![1.0, -0.5, 0.3];
    let p = problem(
        &m,
        Arc::new(SimulatedOutput::new(m.clone(), x0.clone(), 0.0, u.clone())),
        &u,
    );
    let cfg = EstimatorConfig {
        n_iters: 5,
        ..Default::default()
    };
    let run = estimate_known_bound(&p, 3.0, &DVector::zeros(3), &cfg).unwrap();
    assert!(run.failure.is_none(), "{:?}", run.failure);
    assert_eq!(run.steps.len(), 5);
    let err: Vec<f64> = run.estimates().iter().map(|xi| (xi - &x0).norm()).collect();
    for w in err.windows(2) {
        assert!(w[1] < w[0], "{err:?}");
    }
    assert!(err[4] < 2e-4, "{err:?}");
}

#[test]
fn time_varying_input_is_tracked() {
    let m = model(2, &["u1"], &["0", "-x1 + cos(t)"]);
    let u = InputSignal::expressions(vec![
        obsv_core::expression::Expr::parse("2 + sin(5*t)").unwrap()
    ])
    .unwrap();
    let x0 = dvector![0.5, 1.5];
    let p = problem(
        &m,
        Arc::new(SimulatedOutput::new(m.clone(), x0.clone(), 0.0, u.clone())),
        &u,
    );
    let run =
        estimate_known_bound(&p, 3.0, &DVector::zeros(2), &EstimatorConfig::default()).unwrap();
    assert!(run.dead_beat);
    assert!((&run.final_estimate - &x0).norm() < 1e-8);
}
