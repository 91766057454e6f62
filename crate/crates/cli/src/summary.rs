//! JSON artifacts. Every document carries a schema version; none carries a
//! timestamp, so identical seeds produce byte-identical files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const SCHEMA_VERSION: u32 = 1;

/// Result document of a self-consistent solve.
#[derive(Debug, Serialize, Deserialize)]
pub struct SolveSummary {
    pub schema_version: u32,
    pub kind: String,
    pub converged: bool,
    pub iterations: usize,
    pub cost: f64,
    pub cost_stderr: f64,
    pub cost_kernel_term: f64,
    pub cost_log_weight_term: f64,
    pub final_residual_corr: f64,
    pub final_residual_mean: f64,
    pub ess_low_fraction: f64,
    #[serde(skip_deserializing)]
    pub config: Option<RunConfig>,
}

/// Result document of a quenched oracle run.
#[derive(Debug, Serialize, Deserialize)]
pub struct OracleSummary {
    pub schema_version: u32,
    pub kind: String,
    pub mode: String,
    pub agents: usize,
    pub instances: usize,
    pub refused: usize,
    pub cost: f64,
    pub cost_stderr: f64,
    pub per_instance: Vec<f64>,
    #[serde(skip_deserializing)]
    pub config: Option<RunConfig>,
}

/// Report of a solve-vs-oracle comparison.
#[derive(Debug, Serialize, Deserialize)]
pub struct CompareReport {
    pub schema_version: u32,
    pub kind: String,
    pub cost_solve: f64,
    pub cost_oracle: f64,
    pub difference: f64,
    pub solve_stderr: f64,
    pub oracle_stderr: f64,
    /// `finite_size_coeff / agents`, the documented finite-population
    /// allowance added to the statistical tolerance.
    pub finite_size_allowance: f64,
    pub finite_size_coeff: f64,
    pub combined_tolerance: f64,
    pub pass: bool,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> std::io::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("cannot parse {}: {e}", path.display()))
}
