//! Scenario files.
//!
//! A scenario is a TOML document describing one plant, its input, the true
//! initial state used to synthesise the output, and the estimator and
//! observer settings. See `docs/scenario.md` for the field reference.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::DVector;
use obsv_core::estimator::{Case, EstimatorConfig};
use obsv_core::expression::Expr;
use obsv_core::numerics::TimeGrid;
use obsv_core::reconstruction::{SimulatedOutput, WindowProblem};
use obsv_core::system::{build_triangular, InputSignal, SystemModel, TriangularSpec};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Smallest number of grid steps accepted for a reconstruction window.
pub const MIN_WINDOW_STEPS: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub system: SystemSection,
    pub input: InputSpec,
    pub truth: TruthSection,
    pub estimator: EstimatorSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observer: Option<ObserverSection>,
    /// Default output directory, relative to the working directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outputs: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    pub n: usize,
    #[serde(default = "default_m")]
    pub m: usize,
    /// `a_2 .. a_n`.
    #[serde(default)]
    pub a: Vec<String>,
    /// `f_1 .. f_n`.
    pub f: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum InputSpec {
    Constant {
        values: Vec<f64>,
    },
    Expressions {
        exprs: Vec<String>,
    },
    /// Piecewise constant: `values[i]` holds from `breakpoints[i]`.
    Table {
        breakpoints: Vec<f64>,
        values: Vec<Vec<f64>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthSection {
    pub x0: Vec<f64>,
    #[serde(default)]
    pub t0: f64,
    pub t_end: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorSection {
    pub case: Case,
    /// Known bound `R` on `|x0|` (Case I) and base radius of the observer.
    pub radius: f64,
    #[serde(default = "default_ell")]
    pub ell: f64,
    #[serde(default = "default_n_iters")]
    pub n_iters: usize,
    /// Constant first iterate; zero when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z_init: Option<Vec<f64>>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_t_hi")]
    pub t_hi: f64,
    #[serde(default = "default_tol")]
    pub tol_abs: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_window_steps")]
    pub window_steps: usize,
    #[serde(default = "default_pairs")]
    pub n_pairs: usize,
    #[serde(default = "default_pe_eps")]
    pub pe_eps_rel: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObserverSection {
    pub sigma: f64,
    pub n_resets: usize,
    /// Certified global Lipschitz constant; sampled when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lipschitz: Option<f64>,
    #[serde(default = "default_lipschitz_samples")]
    pub lipschitz_samples: usize,
    #[serde(default = "default_steps_per_window")]
    pub steps_per_window: usize,
    #[serde(default = "default_observer_window_steps")]
    pub window_steps: usize,
}

fn default_m() -> usize {
    1
}
fn default_ell() -> f64 {
    0.5
}
fn default_n_iters() -> usize {
    15
}
fn default_gamma() -> f64 {
    0.25
}
fn default_t_hi() -> f64 {
    1e-2
}
fn default_tol() -> f64 {
    1e-5
}
fn default_retries() -> u32 {
    3
}
fn default_window_steps() -> usize {
    128
}
fn default_pairs() -> usize {
    64
}
fn default_pe_eps() -> f64 {
    obsv_core::reconstruction::PE_EPS_REL
}
fn default_lipschitz_samples() -> usize {
    400
}
fn default_steps_per_window() -> usize {
    500
}
fn default_observer_window_steps() -> usize {
    256
}

fn config(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl ScenarioConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config(format!("cannot read {}: {e}", path.display())))?;
        let cfg = Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let n = self.system.n;
        if self.name.trim().is_empty() {
            return Err(config("name: must not be empty"));
        }
        if self.truth.x0.len() != n {
            return Err(config(format!(
                "truth.x0: expected {n} components, got {}",
                self.truth.x0.len()
            )));
        }
        if !(self.truth.t_end > self.truth.t0) {
            return Err(config("truth.t_end: must exceed truth.t0"));
        }
        if self.truth.steps < 2 {
            return Err(config("truth.steps: must be at least 2"));
        }
        let e = &self.estimator;
        if !(e.ell > 0.0 && e.ell <= 0.5) {
            return Err(config(format!(
                "estimator.ell: must lie in (0, 0.5], got {}",
                e.ell
            )));
        }
        if !(e.radius > 0.0) {
            return Err(config("estimator.radius: must be positive"));
        }
        if !(e.t_hi > 0.0) {
            return Err(config("estimator.t_hi: must be positive"));
        }
        if !(e.gamma > 0.0 && e.gamma < 1.0) {
            return Err(config("estimator.gamma: must lie in (0, 1)"));
        }
        if e.n_iters == 0 {
            return Err(config("estimator.n_iters: must be positive"));
        }
        if e.window_steps < MIN_WINDOW_STEPS {
            return Err(config(format!(
                "estimator.window_steps: need at least {MIN_WINDOW_STEPS} steps per window, got {}",
                e.window_steps
            )));
        }
        if e.n_pairs < 32 {
            return Err(config("estimator.n_pairs: must be at least 32"));
        }
        if let Some(z) = &e.z_init {
            if z.len() != n {
                return Err(config(format!(
                    "estimator.z_init: expected {n} components, got {}",
                    z.len()
                )));
            }
        }
        if let Some(o) = &self.observer {
            if !(o.sigma > 0.0) {
                return Err(config("observer.sigma: must be positive"));
            }
            if o.n_resets == 0 {
                return Err(config("observer.n_resets: must be positive"));
            }
            if o.steps_per_window < 2 {
                return Err(config("observer.steps_per_window: must be at least 2"));
            }
            if o.window_steps < MIN_WINDOW_STEPS {
                return Err(config(format!(
                    "observer.window_steps: need at least {MIN_WINDOW_STEPS} steps per window"
                )));
            }
            if let Some(c) = o.lipschitz {
                if !(c >= 0.0) {
                    return Err(config("observer.lipschitz: must be non-negative"));
                }
            }
        }
        let input = self.input_signal()?;
        if input.dim() != self.system.m {
            return Err(config(format!(
                "input: expected {} channels, got {}",
                self.system.m,
                input.dim()
            )));
        }
        self.model()?;
        Ok(())
    }

    pub fn model(&self) -> Result<SystemModel, CliError> {
        let a: Vec<&str> = self.system.a.iter().map(String::as_str).collect();
        let f: Vec<&str> = self.system.f.iter().map(String::as_str).collect();
        let spec = TriangularSpec::parse(self.system.n, self.system.m, &a, &f)
            .map_err(|e| config(format!("system: {e}")))?;
        build_triangular(spec).map_err(|e| config(format!("system: {e}")))
    }

    pub fn input_signal(&self) -> Result<InputSignal, CliError> {
        match &self.input {
            InputSpec::Constant { values } => Ok(InputSignal::constant(values)),
            InputSpec::Expressions { exprs } => {
                let parsed = exprs
                    .iter()
                    .enumerate()
                    .map(|(i, s)| {
                        Expr::parse(s).map_err(|e| config(format!("input.exprs[{i}]: {e}")))
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                InputSignal::expressions(parsed).map_err(|e| config(format!("input: {e}")))
            }
            InputSpec::Table {
                breakpoints,
                values,
            } => InputSignal::table(breakpoints.clone(), values.clone())
                .map_err(|e| config(format!("input: {e}"))),
        }
    }

    pub fn x0(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.truth.x0)
    }

    pub fn z_init(&self) -> DVector<f64> {
        match &self.estimator.z_init {
            Some(z) => DVector::from_column_slice(z),
            None => DVector::zeros(self.system.n),
        }
    }

    pub fn truth_grid(&self) -> Result<TimeGrid, CliError> {
        TimeGrid::new(self.truth.t0, self.truth.t_end, self.truth.steps)
            .map_err(|e| config(format!("truth: {e}")))
    }

    pub fn estimator_config(&self) -> EstimatorConfig {
        let e = &self.estimator;
        EstimatorConfig {
            ell: e.ell,
            n_iters: e.n_iters,
            tol_abs: e.tol_abs,
            t_hi: e.t_hi,
            gamma: e.gamma,
            max_retries: e.max_retries,
        }
    }

    /// Reconstruction problem whose output is synthesised from `truth.x0`.
    pub fn problem(&self, seed: u64) -> Result<WindowProblem, CliError> {
        let model = self.model()?;
        let input = self.input_signal()?;
        Ok(WindowProblem {
            source: Arc::new(SimulatedOutput::new(
                model.clone(),
                self.x0(),
                self.truth.t0,
                input.clone(),
            )),
            model,
            input,
            t0: self.truth.t0,
            window_steps: self.estimator.window_steps,
            n_pairs: self.estimator.n_pairs,
            seed,
            pe_eps_rel: self.estimator.pe_eps_rel,
        })
    }

    pub fn output_dir(&self, over: Option<&Path>) -> PathBuf {
        match (over, &self.outputs) {
            (Some(p), _) => p.to_path_buf(),
            (None, Some(p)) => p.clone(),
            (None, None) => PathBuf::from("out").join(&self.name),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const PLANAR: &str = r#"
name = "planar"

[system]
n = 2
a = ["u1"]
f = ["0", "x1 - x2^3"]

[input]
kind = "constant"
values = [1.0]

[truth]
x0 = [2.0, 0.0]
t_end = 1.0
steps = 1000

[estimator]
case = "I"
radius = 3.0
z_init = [0.0, 1.0]
"#;

    #[test]
    fn parses_with_defaults() {
        let cfg = ScenarioConfig::parse(PLANAR).unwrap();
        assert_eq!(cfg.system.m, 1);
        assert_eq!(cfg.estimator.case, Case::I);
        assert_eq!(cfg.estimator.ell, 0.5);
        assert_eq!(cfg.estimator.window_steps, 128);
        assert!(cfg.observer.is_none());
        assert_eq!(cfg.z_init(), DVector::from_column_slice(&[0.0, 1.0]));
        assert_eq!(cfg.output_dir(None), PathBuf::from("out/planar"));
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = ScenarioConfig::parse(PLANAR).unwrap();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(ScenarioConfig::parse(&text).unwrap(), cfg);
    }

    fn broken(from: &str, to: &str) -> String {
        let err = ScenarioConfig::parse(&PLANAR.replace(from, to)).unwrap_err();
        assert!(matches!(err, CliError::Config(_)));
        err.to_string()
    }

    #[test]
    fn reports_the_offending_field() {
        assert!(broken("x0 = [2.0, 0.0]", "x0 = [2.0]").contains("truth.x0"));
        assert!(broken("radius = 3.0", "radius = 3.0\nell = 0.7").contains("estimator.ell"));
        assert!(broken("z_init = [0.0, 1.0]", "z_init = [0.0]").contains("z_init"));
        assert!(broken("\"x1 - x2^3\"", "\"x1 - q\"").contains("system"));
        assert!(broken("values = [1.0]", "values = [1.0, 2.0]").contains("input"));
        assert!(broken("radius = 3.0", "radius = 3.0\nwindow_steps = 16").contains("window_steps"));
    }

    #[test]
    fn toml_errors_carry_a_line() {
        let msg = broken("steps = 1000", "steps = \"many\"");
        assert!(msg.contains("line"), "{msg}");
        let msg = broken("steps = 1000", "steps = 1000\nbogus = 1");
        assert!(msg.contains("bogus"), "{msg}");
    }

    #[test]
    fn expression_and_table_inputs() {
        let cfg = ScenarioConfig::parse(&PLANAR.replace(
            "kind = \"constant\"\nvalues = [1.0]",
            "kind = \"expressions\"\nexprs = [\"1 + sin(t)\"]",
        ))
        .unwrap();
        let u = cfg.input_signal().unwrap();
        assert!((u.at(0.5).unwrap()[0] - (1.0 + 0.5f64.sin())).abs() < 1e-15);

        let cfg = ScenarioConfig::parse(&PLANAR.replace(
            "kind = \"constant\"\nvalues = [1.0]",
            "kind = \"table\"\nbreakpoints = [0.0, 0.5]\nvalues = [[1.0], [2.0]]",
        ))
        .unwrap();
        assert_eq!(cfg.input_signal().unwrap().at(0.75).unwrap()[0], 2.0);
    }
}
