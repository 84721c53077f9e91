//! JSON documents written next to the CSV traces.
//!
//! Field order is fixed by the struct declarations and floats are printed in
//! shortest round-trip form, so a given run always produces the same bytes.

use obsv_core::estimator::Case;
use obsv_core::hybrid::LipschitzStatus;
use obsv_core::reconstruction::ContractionReport;
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub scenario: String,
    pub command: String,
    pub seed: u64,
    pub iterations: Vec<IterationRow>,
    pub verdicts: Verdicts,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub check: Option<CheckReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimate: Option<EstimateReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observer: Option<ObserverReport>,
    /// Wall-clock seconds per phase; only present with `--timings`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings: Option<Vec<Timing>>,
}

impl RunSummary {
    pub fn new(scenario: &str, command: &str, seed: u64) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            scenario: scenario.to_string(),
            command: command.to_string(),
            seed,
            iterations: Vec::new(),
            verdicts: Verdicts::default(),
            check: None,
            estimate: None,
            observer: None,
            timings: None,
        }
    }
}

/// One estimate `ξ_ν`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRow {
    pub nu: usize,
    pub radius: f64,
    pub t: f64,
    pub xi: Vec<f64>,
    pub delta: Option<f64>,
    /// Sampled modulus of the window map.
    pub contraction_ratio: f64,
    /// Observed ratio between consecutive iterate differences.
    pub realized_ratio: Option<f64>,
    /// `|ξ_ν − x0|` against the scenario's true initial state.
    pub error: Option<f64>,
    /// Diagonal-scheme bound, Case II only.
    pub bound: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Verdicts {
    pub h2: Option<bool>,
    pub pe: Option<bool>,
    pub contraction: Option<bool>,
    pub converged: Option<bool>,
    pub lipschitz_verified: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub h2_product: f64,
    pub pe_min_scaled_eig: f64,
    pub pe_first_failure: Option<usize>,
    pub lipschitz_c: f64,
    /// Absent when the Gramian at `t_hi` is singular.
    pub contraction: Option<ContractionReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub case: Case,
    pub converged: bool,
    pub dead_beat: bool,
    pub final_estimate: Vec<f64>,
    pub final_error: f64,
    pub gaps: Vec<usize>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObserverReport {
    pub sigma: f64,
    pub n_resets: usize,
    pub errors_at_resets: Vec<f64>,
    pub window_max_errors: Vec<f64>,
    pub final_error: f64,
    pub lipschitz: LipschitzStatus,
    pub failures: Vec<WindowFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowFailure {
    pub nu: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub phase: String,
    pub seconds: f64,
}

/// Contents of `resets.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResetsDocument {
    pub schema_version: u32,
    pub scenario: String,
    pub t0: f64,
    pub sigma: f64,
    pub n_resets: usize,
    pub c_global: f64,
    pub q: f64,
    pub ell_seq: Vec<f64>,
    pub c_seq: Vec<f64>,
    /// `|ξ_0 − x0|`.
    pub initial_error: f64,
    pub resets: Vec<ResetEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResetEntry {
    pub nu: usize,
    pub t: f64,
    pub m: Vec<f64>,
    pub pre_reset: Option<Vec<f64>>,
    pub error: f64,
    pub window_max_error: f64,
    /// `ℓ_{ν−1} C_ν`.
    pub trend: Option<f64>,
    pub bound: Option<f64>,
    pub estimate: Option<WindowEstimateEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowEstimateEntry {
    pub t: Option<f64>,
    pub radius: f64,
    pub search_index: u32,
    pub ell_target: f64,
    pub ell_measured: Option<f64>,
    pub iterations: usize,
    pub ell_certified: Option<f64>,
    pub pe_pass: bool,
    pub xi: Vec<f64>,
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("summary types always serialize");
    s.push('\n');
    s
}

/// `None` for NaN, which JSON cannot carry.
pub fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}
