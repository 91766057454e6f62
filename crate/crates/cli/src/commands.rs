//! Subcommand implementations and artifact emission.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use mfoc_core::fields::FieldPath;
use mfoc_core::pde::{
    cole_hopf, drift_from_value, solve_density_forward, solve_weight_backward,
    DEFAULT_DRIFT_CAP, DEFAULT_FLOOR_FRACTION,
};
use mfoc_core::solver::{solve_self_consistent, SolverState};
use mfoc_core::oracle::quenched_average;
use rand::SeedableRng as _;

use crate::config::RunConfig;
use crate::summary::{
    read_json, write_json, CompareReport, OracleSummary, SolveSummary, SCHEMA_VERSION,
};

/// Exit codes shared by all subcommands.
pub const EXIT_OK: u8 = 0;
pub const EXIT_FATAL: u8 = 1;
pub const EXIT_NOT_CONVERGED: u8 = 2;
pub const EXIT_COMPARE_FAILED: u8 = 3;

pub const OUTPUT_ROOT_ENV: &str = "MFOC_OUTPUT_ROOT";

/// Resolves the output directory: flag over config, and relative paths hang
/// off `MFOC_OUTPUT_ROOT` when it is set. The directory is created.
pub fn resolve_output_dir(cfg: &RunConfig, flag: Option<&Path>) -> Result<PathBuf, String> {
    let dir = flag
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
    let dir = if dir.is_relative() {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) => PathBuf::from(root).join(dir),
            None => dir,
        }
    } else {
        dir
    };
    std::fs::create_dir_all(&dir)
        .map_err(|e| format!("cannot create output directory {}: {e}", dir.display()))?;
    Ok(dir)
}

fn echo_config(cfg: &RunConfig, dir: &Path) -> Result<(), String> {
    std::fs::write(dir.join("config.echo.cfg"), cfg.to_flat_string())
        .map_err(|e| format!("cannot write config echo: {e}"))
}

fn write_trace(state: &SolverState, path: &Path) -> Result<(), String> {
    let mut out = String::from(
        "iteration,residual_corr,residual_mean,ess_min,ess_mean,ess_low_fraction,\
         clipped_inner,clipped_outer,running_cost\n",
    );
    for (i, s) in state.history.iter().enumerate() {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            i + 1,
            s.residual_corr,
            s.residual_mean,
            s.ess_min,
            s.ess_mean,
            s.ess_low_fraction,
            s.clipped_inner,
            s.clipped_outer,
            s.running_cost
        );
    }
    std::fs::write(path, out).map_err(|e| format!("cannot write trace: {e}"))
}

/// Plot-ready profile: time, mean path, and the kernel diagonals.
fn write_profile(state: &SolverState, path: &Path) -> Result<(), String> {
    let tg = state.corr.grid();
    let mut out = String::from("time,mean,corr_diag,mean_corr_diag\n");
    for i in 0..tg.len() {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            tg.node(i),
            state.mean_path[i],
            state.corr.at(i, i),
            state.mean_corr.at(i, i)
        );
    }
    std::fs::write(path, out).map_err(|e| format!("cannot write profile: {e}"))
}

/// Runs the self-consistent solve and writes D.csv, F.csv, trace.csv,
/// profile.csv and summary.json. Exit 2 flags non-convergence; artifacts are
/// written either way.
pub fn cmd_solve(cfg: &RunConfig, out_flag: Option<&Path>) -> Result<u8, String> {
    let dir = resolve_output_dir(cfg, out_flag)?;
    echo_config(cfg, &dir)?;

    let params = cfg.model_params();
    let state = solve_self_consistent(
        &params,
        &cfg.space_grid(),
        &cfg.time_grid(),
        &cfg.solver_config(),
    )
    .map_err(|e| e.to_string())?;

    state
        .corr
        .write_csv(&dir.join("D.csv"))
        .map_err(|e| e.to_string())?;
    state
        .mean_corr
        .write_csv(&dir.join("F.csv"))
        .map_err(|e| e.to_string())?;
    write_trace(&state, &dir.join("trace.csv"))?;
    write_profile(&state, &dir.join("profile.csv"))?;

    let last = state.history.last();
    let summary = SolveSummary {
        schema_version: SCHEMA_VERSION,
        kind: "self-consistent-solve".into(),
        converged: state.converged,
        iterations: state.iterations,
        cost: state.cost.total,
        cost_stderr: state.cost.stderr,
        cost_kernel_term: state.cost.kernel_term,
        cost_log_weight_term: state.cost.log_weight_term,
        final_residual_corr: last.map_or(f64::NAN, |s| s.residual_corr),
        final_residual_mean: last.map_or(f64::NAN, |s| s.residual_mean),
        ess_low_fraction: last.map_or(f64::NAN, |s| s.ess_low_fraction),
        config: Some(cfg.clone()),
    };
    write_json(&dir.join("summary.json"), &summary).map_err(|e| e.to_string())?;

    println!(
        "cost per agent: {} +- {} ({} iterations, converged: {})",
        state.cost.total, state.cost.stderr, state.iterations, state.converged
    );
    Ok(if state.converged {
        EXIT_OK
    } else {
        EXIT_NOT_CONVERGED
    })
}

/// Runs the quenched disorder average and writes oracle.json plus a
/// per-instance CSV table.
pub fn cmd_oracle(cfg: &RunConfig, out_flag: Option<&Path>) -> Result<u8, String> {
    let dir = resolve_output_dir(cfg, out_flag)?;
    echo_config(cfg, &dir)?;

    let params = cfg.model_params();
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(cfg.solver.seed);
    let est = quenched_average(
        &params,
        cfg.oracle.agents,
        cfg.oracle.instances,
        cfg.oracle_mode(),
        cfg.oracle.n_paths,
        &cfg.time_grid(),
        &mut rng,
    )
    .map_err(|e| e.to_string())?;

    let mut table = String::from("instance,cost_per_agent\n");
    for (i, c) in est.per_instance.iter().enumerate() {
        let _ = writeln!(table, "{i},{c}");
    }
    std::fs::write(dir.join("instances.csv"), table)
        .map_err(|e| format!("cannot write instances.csv: {e}"))?;

    let summary = OracleSummary {
        schema_version: SCHEMA_VERSION,
        kind: "quenched-oracle".into(),
        mode: cfg.oracle.mode.clone(),
        agents: cfg.oracle.agents,
        instances: est.per_instance.len(),
        refused: est.refused,
        cost: est.mean,
        cost_stderr: est.stderr,
        per_instance: est.per_instance.clone(),
        config: Some(cfg.clone()),
    };
    write_json(&dir.join("oracle.json"), &summary).map_err(|e| e.to_string())?;

    println!(
        "quenched cost per agent: {} +- {} over {} instances ({} refused)",
        est.mean,
        est.stderr,
        est.per_instance.len(),
        est.refused
    );
    Ok(EXIT_OK)
}

/// Compares a solve summary with an oracle summary. The tolerance is the sum
/// of both standard errors plus `finite_size_coeff / agents`.
pub fn cmd_compare(
    solve_path: &Path,
    oracle_path: &Path,
    finite_size_coeff: f64,
    out_dir: Option<&Path>,
) -> Result<u8, String> {
    let solve: SolveSummary = read_json(solve_path)?;
    let oracle: OracleSummary = read_json(oracle_path)?;
    if solve.kind != "self-consistent-solve" {
        return Err(format!("{} is not a solve summary", solve_path.display()));
    }
    if oracle.kind != "quenched-oracle" {
        return Err(format!("{} is not an oracle summary", oracle_path.display()));
    }
    if oracle.agents == 0 {
        return Err("oracle summary reports zero agents".into());
    }

    let difference = (solve.cost - oracle.cost).abs();
    let allowance = finite_size_coeff / oracle.agents as f64;
    let tolerance = solve.cost_stderr + oracle.cost_stderr + allowance;
    let pass = difference <= tolerance;

    let report = CompareReport {
        schema_version: SCHEMA_VERSION,
        kind: "solve-oracle-comparison".into(),
        cost_solve: solve.cost,
        cost_oracle: oracle.cost,
        difference,
        solve_stderr: solve.cost_stderr,
        oracle_stderr: oracle.cost_stderr,
        finite_size_allowance: allowance,
        finite_size_coeff,
        combined_tolerance: tolerance,
        pass,
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)
            .map_err(|e| format!("cannot create output directory {}: {e}", dir.display()))?;
        write_json(&dir.join("compare.json"), &report).map_err(|e| e.to_string())?;
    }

    println!("solve cost:  {} +- {}", report.cost_solve, report.solve_stderr);
    println!("oracle cost: {} +- {}", report.cost_oracle, report.oracle_stderr);
    println!(
        "difference {} vs tolerance {} (stderr sum + {}/{} agents)",
        report.difference, report.combined_tolerance, finite_size_coeff, oracle.agents
    );
    println!("result: {}", if pass { "PASS" } else { "FAIL" });
    Ok(if pass { EXIT_OK } else { EXIT_COMPARE_FAILED })
}

/// Zero-field single-agent solve: writes the value-function slices and the
/// cost at the start point; `dump_fields` also writes the weight function
/// and the forward density.
pub fn cmd_single_agent(
    cfg: &RunConfig,
    out_flag: Option<&Path>,
    dump_fields: bool,
) -> Result<u8, String> {
    let dir = resolve_output_dir(cfg, out_flag)?;
    echo_config(cfg, &dir)?;

    let params = cfg.model_params();
    let space = cfg.space_grid();
    let time = cfg.time_grid();
    let drive = FieldPath::zeros(time);
    let weight = solve_weight_backward(&params, &drive, &space).map_err(|e| e.to_string())?;
    let value = cole_hopf(&weight, DEFAULT_FLOOR_FRACTION).map_err(|e| e.to_string())?;
    let cost = -weight.at_origin().ln();

    value
        .cost()
        .write_csv(&dir.join("value.csv"))
        .map_err(|e| e.to_string())?;
    if dump_fields {
        weight
            .write_csv(&dir.join("weight.csv"))
            .map_err(|e| e.to_string())?;
        let drift = drift_from_value(&value, DEFAULT_DRIFT_CAP);
        let fp = solve_density_forward(&drift, space.center(), 0).map_err(|e| e.to_string())?;
        fp.density
            .write_csv(&dir.join("density.csv"))
            .map_err(|e| e.to_string())?;
    }

    #[derive(serde::Serialize)]
    struct SingleAgentSummary<'a> {
        schema_version: u32,
        kind: &'a str,
        cost: f64,
        config: &'a RunConfig,
    }
    write_json(
        &dir.join("single_agent.json"),
        &SingleAgentSummary {
            schema_version: SCHEMA_VERSION,
            kind: "single-agent",
            cost,
            config: cfg,
        },
    )
    .map_err(|e| e.to_string())?;

    println!("single-agent cost: {cost}");
    Ok(EXIT_OK)
}
