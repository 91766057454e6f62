//! Run configuration: a flat key-value file with dotted sections.
//!
//! One file describes one run; flags only carry paths and verbosity, so the
//! file plus the seed reproduces the run exactly. Unknown keys are rejected
//! rather than silently ignored.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use mfoc_core::model::{
    ModelParams, SpaceGrid, TimeGrid, DEFAULT_HALF_WIDTH, DEFAULT_SPACE_NODES, DEFAULT_TIME_STEPS,
};
use mfoc_core::oracle::OracleMode;
use mfoc_core::solver::SolverConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}:{line}: expected `key = value`, got {text:?}")]
    Syntax {
        path: String,
        line: usize,
        text: String,
    },
    #[error("{key}: duplicate key")]
    Duplicate { key: String },
    #[error("{key}: unknown key")]
    Unknown { key: String },
    #[error("{key}: {message}")]
    Value { key: String, message: String },
    #[error("missing required key {key}")]
    Missing { key: String },
}

/// Model block of the configuration.
#[derive(Debug, Clone, Serialize)]
pub struct ModelSection {
    pub coupling: f64,
    pub potential: Vec<f64>,
    pub terminal: Vec<f64>,
    pub horizon: f64,
}

/// Grid block of the configuration.
#[derive(Debug, Clone, Serialize)]
pub struct GridSection {
    pub time_steps: usize,
    pub half_width: f64,
    pub space_nodes: usize,
}

/// Solver block of the configuration.
#[derive(Debug, Clone, Serialize)]
pub struct SolverSection {
    pub n_outer: usize,
    pub n_inner: usize,
    pub n_paths: usize,
    pub damping: f64,
    pub tol: f64,
    pub window: usize,
    pub max_iter: usize,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub refine_outer: Option<usize>,
}

/// Oracle block of the configuration.
#[derive(Debug, Clone, Serialize)]
pub struct OracleSection {
    pub agents: usize,
    pub instances: usize,
    pub mode: String,
    pub n_paths: usize,
}

/// Fully validated run configuration.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub model: ModelSection,
    pub grid: GridSection,
    pub solver: SolverSection,
    pub oracle: OracleSection,
    pub output_dir: String,
}

impl RunConfig {
    /// Typed model parameters; validation already happened at load time.
    pub fn model_params(&self) -> ModelParams {
        ModelParams::new(
            self.model.coupling,
            self.model.potential.clone(),
            self.model.terminal.clone(),
            self.model.horizon,
        )
        .expect("validated at load")
    }

    pub fn space_grid(&self) -> SpaceGrid {
        SpaceGrid::new(self.grid.half_width, self.grid.space_nodes).expect("validated at load")
    }

    pub fn time_grid(&self) -> TimeGrid {
        TimeGrid::new(self.model.horizon, self.grid.time_steps).expect("validated at load")
    }

    pub fn solver_config(&self) -> SolverConfig {
        SolverConfig {
            n_outer: self.solver.n_outer,
            n_inner: self.solver.n_inner,
            n_paths: self.solver.n_paths,
            damping: self.solver.damping,
            tol: self.solver.tol,
            window: self.solver.window,
            max_iter: self.solver.max_iter,
            seed: self.solver.seed,
            refine_outer: self.solver.refine_outer,
        }
    }

    pub fn oracle_mode(&self) -> OracleMode {
        match self.oracle.mode.as_str() {
            "riccati" => OracleMode::Riccati,
            _ => OracleMode::FeynmanKac,
        }
    }

    /// The effective configuration in the same flat format it was read from.
    pub fn to_flat_string(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "model.coupling = {}", self.model.coupling);
        let _ = writeln!(out, "model.potential = {}", join(&self.model.potential));
        let _ = writeln!(out, "model.terminal = {}", join(&self.model.terminal));
        let _ = writeln!(out, "model.horizon = {}", self.model.horizon);
        let _ = writeln!(out, "grid.time_steps = {}", self.grid.time_steps);
        let _ = writeln!(out, "grid.half_width = {}", self.grid.half_width);
        let _ = writeln!(out, "grid.space_nodes = {}", self.grid.space_nodes);
        let _ = writeln!(out, "solver.n_outer = {}", self.solver.n_outer);
        let _ = writeln!(out, "solver.n_inner = {}", self.solver.n_inner);
        let _ = writeln!(out, "solver.n_paths = {}", self.solver.n_paths);
        let _ = writeln!(out, "solver.damping = {}", self.solver.damping);
        let _ = writeln!(out, "solver.tol = {}", self.solver.tol);
        let _ = writeln!(out, "solver.window = {}", self.solver.window);
        let _ = writeln!(out, "solver.max_iter = {}", self.solver.max_iter);
        let _ = writeln!(out, "solver.seed = {}", self.solver.seed);
        if let Some(r) = self.solver.refine_outer {
            let _ = writeln!(out, "solver.refine_outer = {r}");
        }
        let _ = writeln!(out, "oracle.agents = {}", self.oracle.agents);
        let _ = writeln!(out, "oracle.instances = {}", self.oracle.instances);
        let _ = writeln!(out, "oracle.mode = {}", self.oracle.mode);
        let _ = writeln!(out, "oracle.n_paths = {}", self.oracle.n_paths);
        let _ = writeln!(out, "output.dir = {}", self.output_dir);
        out
    }
}

fn join(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

/// Reads, parses and validates a configuration file, filling documented
/// defaults for every omitted optional key.
pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.display().to_string(),
        source,
    })?;
    parse_config(&text, &path.display().to_string())
}

pub fn parse_config(text: &str, origin: &str) -> Result<RunConfig, ConfigError> {
    let mut map: BTreeMap<String, String> = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(ConfigError::Syntax {
                path: origin.to_string(),
                line: idx + 1,
                text: raw.trim().to_string(),
            });
        };
        let key = key.trim().to_string();
        if map
            .insert(key.clone(), value.trim().to_string())
            .is_some()
        {
            return Err(ConfigError::Duplicate { key });
        }
    }

    let mut map = KeyMap { map };

    let model = ModelSection {
        coupling: map.require_f64("model.coupling")?,
        potential: map
            .take_f64_list("model.potential")?
            .unwrap_or_else(|| vec![0.0, 0.0, 0.5, 0.0, 1.0 / 24.0]),
        terminal: map
            .take_f64_list("model.terminal")?
            .unwrap_or_else(|| vec![0.5, -1.0, 0.5]),
        horizon: map.require_f64("model.horizon")?,
    };
    let grid = GridSection {
        time_steps: map.take_usize("grid.time_steps")?.unwrap_or(DEFAULT_TIME_STEPS),
        half_width: map.take_f64("grid.half_width")?.unwrap_or(DEFAULT_HALF_WIDTH),
        space_nodes: map
            .take_usize("grid.space_nodes")?
            .unwrap_or(DEFAULT_SPACE_NODES),
    };
    let solver_defaults = SolverConfig::default();
    let solver = SolverSection {
        n_outer: map.take_usize("solver.n_outer")?.unwrap_or(solver_defaults.n_outer),
        n_inner: map.take_usize("solver.n_inner")?.unwrap_or(solver_defaults.n_inner),
        n_paths: map.take_usize("solver.n_paths")?.unwrap_or(solver_defaults.n_paths),
        damping: map.take_f64("solver.damping")?.unwrap_or(solver_defaults.damping),
        tol: map.take_f64("solver.tol")?.unwrap_or(solver_defaults.tol),
        window: map.take_usize("solver.window")?.unwrap_or(solver_defaults.window),
        max_iter: map.take_usize("solver.max_iter")?.unwrap_or(solver_defaults.max_iter),
        seed: map.take_u64("solver.seed")?.unwrap_or(solver_defaults.seed),
        refine_outer: map.take_usize("solver.refine_outer")?,
    };
    let oracle = OracleSection {
        agents: map.take_usize("oracle.agents")?.unwrap_or(8),
        instances: map.take_usize("oracle.instances")?.unwrap_or(8),
        mode: map.take_string("oracle.mode")?.unwrap_or_else(|| "riccati".into()),
        n_paths: map.take_usize("oracle.n_paths")?.unwrap_or(10_000),
    };
    let output_dir = map.take_string("output.dir")?.unwrap_or_else(|| ".".into());

    if let Some(key) = map.map.keys().next() {
        return Err(ConfigError::Unknown { key: key.clone() });
    }

    let cfg = RunConfig {
        model,
        grid,
        solver,
        oracle,
        output_dir,
    };
    validate(&cfg)?;
    Ok(cfg)
}

/// Re-validates every constraint of the underlying modules, reporting the
/// offending key path.
fn validate(cfg: &RunConfig) -> Result<(), ConfigError> {
    let key = |k: &str, message: String| ConfigError::Value {
        key: k.into(),
        message,
    };
    ModelParams::new(
        cfg.model.coupling,
        cfg.model.potential.clone(),
        cfg.model.terminal.clone(),
        cfg.model.horizon,
    )
    .map_err(|e| key("model", e.to_string()))?;
    SpaceGrid::new(cfg.grid.half_width, cfg.grid.space_nodes)
        .map_err(|e| key("grid.space_nodes", e.to_string()))?;
    TimeGrid::new(cfg.model.horizon, cfg.grid.time_steps)
        .map_err(|e| key("grid.time_steps", e.to_string()))?;
    cfg.solver_config()
        .validate()
        .map_err(|e| key("solver", e.to_string()))?;
    match cfg.oracle.mode.as_str() {
        "riccati" | "feynman-kac" => {}
        other => {
            return Err(key(
                "oracle.mode",
                format!("must be `riccati` or `feynman-kac`, got {other:?}"),
            ));
        }
    }
    if cfg.oracle.mode == "riccati" {
        let params = cfg.model_params();
        if params.quadratic_potential().is_none() || params.quadratic_terminal().is_none() {
            return Err(key(
                "oracle.mode",
                "riccati requires an at-most-quadratic potential and terminal cost".into(),
            ));
        }
    }
    if cfg.oracle.agents < 2 {
        return Err(key("oracle.agents", "at least 2 agents required".into()));
    }
    if cfg.oracle.instances < 4 {
        return Err(key("oracle.instances", "at least 4 instances required".into()));
    }
    Ok(())
}

struct KeyMap {
    map: BTreeMap<String, String>,
}

impl KeyMap {
    fn take_string(&mut self, key: &str) -> Result<Option<String>, ConfigError> {
        Ok(self.map.remove(key))
    }

    fn take_f64(&mut self, key: &str) -> Result<Option<f64>, ConfigError> {
        self.map
            .remove(key)
            .map(|v| {
                v.parse::<f64>().map_err(|e| ConfigError::Value {
                    key: key.into(),
                    message: format!("expected a number, got {v:?} ({e})"),
                })
            })
            .transpose()
    }

    fn require_f64(&mut self, key: &str) -> Result<f64, ConfigError> {
        self.take_f64(key)?
            .ok_or_else(|| ConfigError::Missing { key: key.into() })
    }

    fn take_usize(&mut self, key: &str) -> Result<Option<usize>, ConfigError> {
        self.map
            .remove(key)
            .map(|v| {
                v.parse::<usize>().map_err(|e| ConfigError::Value {
                    key: key.into(),
                    message: format!("expected a non-negative integer, got {v:?} ({e})"),
                })
            })
            .transpose()
    }

    fn take_u64(&mut self, key: &str) -> Result<Option<u64>, ConfigError> {
        self.map
            .remove(key)
            .map(|v| {
                v.parse::<u64>().map_err(|e| ConfigError::Value {
                    key: key.into(),
                    message: format!("expected a non-negative integer, got {v:?} ({e})"),
                })
            })
            .transpose()
    }

    fn take_f64_list(&mut self, key: &str) -> Result<Option<Vec<f64>>, ConfigError> {
        self.map
            .remove(key)
            .map(|v| {
                v.split(',')
                    .map(|tok| {
                        tok.trim().parse::<f64>().map_err(|e| ConfigError::Value {
                            key: key.into(),
                            message: format!("expected numbers, got {tok:?} ({e})"),
                        })
                    })
                    .collect()
            })
            .transpose()
    }
}
