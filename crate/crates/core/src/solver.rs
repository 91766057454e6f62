//! Self-consistent iteration of the two-time kernels and the optimal cost.
//!
//! One iteration draws outer-field paths from the mean kernel and, for each,
//! an inner-field population from the difference kernel; the population
//! observables regenerate both kernels. Updates are damped with a fixed
//! factor and convergence is declared on a windowed average of the kernel
//! residuals, so a single lucky noisy iterate cannot stop the loop.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use crate::agent::{member_observables, population_average};
use crate::error::{Error, Result};
use crate::fields::{psd_project, FieldPath, TwoTimeKernel, DEFAULT_JITTER};
use crate::model::{ModelParams, SpaceGrid, TimeGrid};
use crate::seeds;

const INIT_STREAM: u64 = 0x494e_4954; // "INIT"
const ITER_STREAM: u64 = 0x4954_4552; // "ITER"
const REFINE_STREAM: u64 = 0x5245_4649; // "REFI"

/// Sampling and iteration controls of the self-consistent loop.
#[derive(Debug, Clone)]
pub struct SolverConfig {
    /// Outer-field samples per iteration.
    pub n_outer: usize,
    /// Inner-field samples per outer sample.
    pub n_inner: usize,
    /// Trajectories per inner sample for the correlation estimate.
    pub n_paths: usize,
    /// Damping factor in (0, 1]; 1 replaces the kernels outright.
    pub damping: f64,
    /// Convergence tolerance on the windowed kernel residual.
    pub tol: f64,
    /// Number of trailing iterations averaged by the convergence test.
    pub window: usize,
    pub max_iter: usize,
    pub seed: u64,
    /// Optional frozen-kernel evaluation pass with this many outer samples,
    /// run after convergence to refine the cost error bar.
    pub refine_outer: Option<usize>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            n_outer: 32,
            n_inner: 32,
            n_paths: 2000,
            damping: 0.5,
            tol: 1e-3,
            window: 5,
            max_iter: 50,
            seed: 1,
            refine_outer: None,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let positives = [
            ("n_outer", self.n_outer),
            ("n_inner", self.n_inner),
            ("n_paths", self.n_paths),
            ("window", self.window),
            ("max_iter", self.max_iter),
        ];
        for (name, v) in positives {
            if v == 0 {
                return Err(Error::InvalidParameter(format!("{name} must be positive")));
            }
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "damping must lie in (0, 1], got {}",
                self.damping
            )));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "tol must be > 0, got {}",
                self.tol
            )));
        }
        if let Some(r) = self.refine_outer {
            if r < 2 {
                return Err(Error::InvalidParameter(
                    "refine_outer must be at least 2".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Per-iteration record kept in the solver trace.
#[derive(Debug, Clone)]
pub struct IterationStats {
    /// Max-norm change of the correlation kernel after damping.
    pub residual_corr: f64,
    /// Max-norm change of the mean kernel after damping.
    pub residual_mean: f64,
    pub ess_min: f64,
    pub ess_mean: f64,
    /// Fraction of outer samples whose population ESS fell below
    /// 0.1 * n_inner.
    pub ess_low_fraction: f64,
    /// Spectral mass clipped from the inner-field covariance.
    pub clipped_inner: f64,
    /// Spectral mass clipped from the outer-field covariance.
    pub clipped_outer: f64,
    /// Cost evaluated with the current kernels and this iteration's samples.
    pub running_cost: f64,
}

/// Optimal cost with its decomposition and sampling error.
#[derive(Debug, Clone, Copy)]
pub struct CostEstimate {
    /// Quadratic kernel term plus the log-normalization term.
    pub total: f64,
    /// (coupling^2 / 4) * double integral of corr^2 - mean_corr^2.
    pub kernel_term: f64,
    /// Minus the average log-normalization over outer samples.
    pub log_weight_term: f64,
    /// Standard error from the outer-sample spread of the log-normalization.
    pub stderr: f64,
}

/// Full state of a self-consistency run.
#[derive(Debug, Clone)]
pub struct SolverState {
    /// Population-averaged two-time second moment kernel.
    pub corr: TwoTimeKernel,
    /// Covariance kernel of the population mean paths.
    pub mean_corr: TwoTimeKernel,
    /// Mean path averaged over outer samples in the final iteration.
    pub mean_path: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub history: Vec<IterationStats>,
    pub cost: CostEstimate,
    /// Log-normalizations per outer sample backing the cost estimate.
    pub log_norms: Vec<f64>,
}

/// Raw kernel estimate produced by one sampling sweep.
#[derive(Debug, Clone)]
pub struct KernelEstimate {
    pub corr: TwoTimeKernel,
    pub mean_corr: TwoTimeKernel,
    pub mean_path: DVector<f64>,
    pub log_norms: Vec<f64>,
    pub ess: Vec<f64>,
    pub clipped_inner: f64,
    pub clipped_outer: f64,
}

/// Starting kernels from a single zero-field solve: the correlation kernel of
/// the decoupled agent and the outer product of its mean path.
pub fn initialize_kernels(
    params: &ModelParams,
    space: &SpaceGrid,
    time: &TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Result<(TwoTimeKernel, TwoTimeKernel)> {
    let mut rng = ChaCha12Rng::seed_from_u64(seeds::derive(seed, &[INIT_STREAM]));
    let zero = FieldPath::zeros(time.clone());
    let sample = member_observables(params, &zero, &zero, space, n_paths, &mut rng)?;
    let corr = TwoTimeKernel::new(time.clone(), symmetrize(sample.corr.clone()))?;
    let mean_corr = TwoTimeKernel::new(time.clone(), &sample.mean * sample.mean.transpose())?;
    Ok((corr, mean_corr))
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    let t = m.transpose();
    (m + t) * 0.5
}

/// One sampling sweep: draws `n_outer` outer fields from the mean kernel and
/// `n_inner` inner fields each from the difference kernel, and averages the
/// population observables into new kernel estimates.
pub fn estimate_kernels(
    corr: &TwoTimeKernel,
    mean_corr: &TwoTimeKernel,
    params: &ModelParams,
    space: &SpaceGrid,
    cfg: &SolverConfig,
    sweep_index: u64,
    n_outer: usize,
) -> Result<KernelEstimate> {
    let time = corr.grid().clone();
    let inner_kernel = corr.difference(mean_corr)?;
    let inner_factor = psd_project(&inner_kernel, DEFAULT_JITTER)?;
    let outer_factor = psd_project(mean_corr, DEFAULT_JITTER)?;
    for (name, f) in [("inner", &inner_factor), ("outer", &outer_factor)] {
        if f.clipped_mass() > 0.1 {
            log::warn!(
                "sweep {sweep_index}: {name} covariance lost {:.1}% spectral mass to \
                 PSD repair; the kernels are far from consistent",
                100.0 * f.clipped_mass()
            );
        }
    }

    struct OuterResult {
        mean: DVector<f64>,
        corr: DMatrix<f64>,
        log_norm: f64,
        ess: f64,
    }

    let results: Vec<Result<OuterResult>> = (0..n_outer)
        .into_par_iter()
        .map(|j| {
            let mut rng = ChaCha12Rng::seed_from_u64(seeds::derive(
                cfg.seed,
                &[ITER_STREAM, sweep_index, j as u64],
            ));
            let outer = outer_factor.sample(&mut rng);
            let mut samples = Vec::with_capacity(cfg.n_inner);
            for _ in 0..cfg.n_inner {
                let inner = inner_factor.sample(&mut rng);
                samples.push(member_observables(
                    params,
                    &inner,
                    &outer,
                    space,
                    cfg.n_paths,
                    &mut rng,
                )?);
            }
            let pop = population_average(&samples)?;
            Ok(OuterResult {
                mean: pop.mean.clone(),
                corr: pop.corr,
                log_norm: pop.normalization.ln(),
                ess: pop.ess,
            })
        })
        .collect();

    let nodes = time.len();
    let mut corr_acc = DMatrix::zeros(nodes, nodes);
    let mut mean_acc = DMatrix::zeros(nodes, nodes);
    let mut mean_path = DVector::zeros(nodes);
    let mut log_norms = Vec::with_capacity(n_outer);
    let mut ess = Vec::with_capacity(n_outer);
    for r in results {
        let r = r?;
        corr_acc += &r.corr;
        mean_acc += &r.mean * r.mean.transpose();
        mean_path += &r.mean;
        log_norms.push(r.log_norm);
        ess.push(r.ess);
    }
    let scale = 1.0 / n_outer as f64;
    corr_acc *= scale;
    mean_acc *= scale;
    mean_path *= scale;

    Ok(KernelEstimate {
        corr: TwoTimeKernel::new(time.clone(), symmetrize(corr_acc))?,
        mean_corr: TwoTimeKernel::new(time, symmetrize(mean_acc))?,
        mean_path,
        log_norms,
        ess,
        clipped_inner: inner_factor.clipped_mass(),
        clipped_outer: outer_factor.clipped_mass(),
    })
}

/// Damped kernel update `(1 - damping) * old + damping * estimate`,
/// symmetrized exactly.
pub fn damped_update(
    old: &TwoTimeKernel,
    estimate: &TwoTimeKernel,
    damping: f64,
) -> Result<TwoTimeKernel> {
    if old.grid() != estimate.grid() {
        return Err(Error::GridMismatch(
            "damped update across different time grids".into(),
        ));
    }
    let blended = old.values() * (1.0 - damping) + estimate.values() * damping;
    TwoTimeKernel::new(old.grid().clone(), symmetrize(blended))
}

/// True once the mean of the last `window` residuals drops below `tol`.
/// Returns false with fewer than `window` entries.
pub fn check_convergence(residuals: &[f64], tol: f64, window: usize) -> bool {
    if window == 0 || residuals.len() < window {
        return false;
    }
    let tail = &residuals[residuals.len() - window..];
    tail.iter().sum::<f64>() / (window as f64) < tol
}

/// Optimal cost from converged kernels and log-normalization samples:
/// a double trapezoid quadrature of the squared-kernel difference, scaled by
/// coupling^2 / 4, minus the average log-normalization.
pub fn evaluate_cost(
    corr: &TwoTimeKernel,
    mean_corr: &TwoTimeKernel,
    log_norms: &[f64],
    params: &ModelParams,
) -> Result<CostEstimate> {
    if corr.grid() != mean_corr.grid() {
        return Err(Error::GridMismatch(
            "cost evaluation across different time grids".into(),
        ));
    }
    if log_norms.is_empty() {
        return Err(Error::InvalidParameter(
            "cost evaluation needs at least one log-normalization sample".into(),
        ));
    }
    let time = corr.grid();
    let nodes = time.len();
    let dt = time.dt();
    let mut quad = 0.0;
    for i in 0..nodes {
        let wi = if i == 0 || i == nodes - 1 { 0.5 } else { 1.0 };
        for j in 0..nodes {
            let wj = if j == 0 || j == nodes - 1 { 0.5 } else { 1.0 };
            let d = corr.at(i, j);
            let f = mean_corr.at(i, j);
            quad += wi * wj * (d * d - f * f);
        }
    }
    let kernel_term = 0.25 * params.coupling * params.coupling * quad * dt * dt;

    let n = log_norms.len() as f64;
    let mean = log_norms.iter().sum::<f64>() / n;
    let stderr = if log_norms.len() > 1 {
        let var = log_norms.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    Ok(CostEstimate {
        total: kernel_term - mean,
        kernel_term,
        log_weight_term: -mean,
        stderr,
    })
}

/// Full self-consistency run: initialize, iterate with damping until the
/// windowed residual converges or `max_iter` is hit, then evaluate the cost
/// from the final iteration's samples (or a frozen-kernel refinement pass).
///
/// A non-converged run is not an error; it is returned with
/// `converged = false` so callers can decide.
pub fn solve_self_consistent(
    params: &ModelParams,
    space: &SpaceGrid,
    time: &TimeGrid,
    cfg: &SolverConfig,
) -> Result<SolverState> {
    cfg.validate()?;
    let (mut corr, mut mean_corr) =
        initialize_kernels(params, space, time, cfg.n_paths, cfg.seed)?;

    let mut history: Vec<IterationStats> = Vec::new();
    let mut residuals: Vec<f64> = Vec::new();
    let mut converged = false;
    let mut log_norms: Vec<f64> = Vec::new();
    let mut mean_path = DVector::zeros(time.len());
    let mut iterations = 0;

    for sweep in 1..=cfg.max_iter {
        let est = estimate_kernels(
            &corr,
            &mean_corr,
            params,
            space,
            cfg,
            sweep as u64,
            cfg.n_outer,
        )?;
        let new_corr = damped_update(&corr, &est.corr, cfg.damping)?;
        let new_mean = damped_update(&mean_corr, &est.mean_corr, cfg.damping)?;
        let residual_corr = new_corr.max_distance(&corr);
        let residual_mean = new_mean.max_distance(&mean_corr);
        corr = new_corr;
        mean_corr = new_mean;
        iterations = sweep;

        let running = evaluate_cost(&corr, &mean_corr, &est.log_norms, params)?;
        let n_outer = est.ess.len() as f64;
        let low = 0.1 * cfg.n_inner as f64;
        history.push(IterationStats {
            residual_corr,
            residual_mean,
            ess_min: est.ess.iter().cloned().fold(f64::INFINITY, f64::min),
            ess_mean: est.ess.iter().sum::<f64>() / n_outer,
            ess_low_fraction: est.ess.iter().filter(|&&e| e < low).count() as f64 / n_outer,
            clipped_inner: est.clipped_inner,
            clipped_outer: est.clipped_outer,
            running_cost: running.total,
        });
        residuals.push(residual_corr.max(residual_mean));
        log_norms = est.log_norms;
        mean_path = est.mean_path;

        if check_convergence(&residuals, cfg.tol, cfg.window) {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!(
            "self-consistent loop did not converge in {} iterations \
             (last residual {:.3e})",
            iterations,
            residuals.last().copied().unwrap_or(f64::NAN)
        );
    }

    // Optional refinement: re-sample the log-normalizations with frozen
    // kernels and a larger outer ensemble for a tighter error bar.
    if let Some(n_refine) = cfg.refine_outer {
        let est = estimate_kernels(
            &corr,
            &mean_corr,
            params,
            space,
            cfg,
            seeds::derive(cfg.seed, &[REFINE_STREAM]),
            n_refine,
        )?;
        log_norms = est.log_norms;
        mean_path = est.mean_path;
    }

    let cost = evaluate_cost(&corr, &mean_corr, &log_norms, params)?;
    Ok(SolverState {
        corr,
        mean_corr,
        mean_path,
        iterations,
        converged,
        history,
        cost,
        log_norms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DEFAULT_SPACE_NODES, DEFAULT_TIME_STEPS};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn grids() -> (SpaceGrid, TimeGrid) {
        (
            SpaceGrid::new(6.0, DEFAULT_SPACE_NODES).unwrap(),
            TimeGrid::new(1.0, DEFAULT_TIME_STEPS).unwrap(),
        )
    }

    #[test]
    fn initial_kernels_vanish_at_time_zero() {
        let params = ModelParams::default_quartic(0.0);
        let (sg, tg) = grids();
        let (corr, mean_corr) = initialize_kernels(&params, &sg, &tg, 800, 7).unwrap();
        for j in 0..tg.len() {
            assert_eq!(corr.at(0, j), 0.0);
            assert_eq!(corr.at(j, 0), 0.0);
            assert_eq!(mean_corr.at(0, j), 0.0);
        }
        // Diagonal of a second-moment kernel is non-negative.
        for i in 0..tg.len() {
            assert!(corr.at(i, i) >= 0.0);
        }
    }

    #[test]
    fn symmetric_model_starts_with_zero_mean_kernel() {
        let params =
            ModelParams::new(0.0, vec![0.0, 0.0, 0.5], vec![0.0, 0.0, 0.5], 1.0).unwrap();
        let (sg, tg) = grids();
        let (_, mean_corr) = initialize_kernels(&params, &sg, &tg, 800, 3).unwrap();
        assert!(mean_corr.max_abs() <= 1e-18, "{}", mean_corr.max_abs());
    }

    #[test]
    fn damped_update_rules() {
        let tg = TimeGrid::new(1.0, 4).unwrap();
        let old = TwoTimeKernel::zeros(tg.clone());
        let est = TwoTimeKernel::from_fn(tg, |s, t| 1.0 + s + t);
        let full = damped_update(&old, &est, 1.0).unwrap();
        assert_eq!(full.values(), est.values());
        let half = damped_update(&old, &est, 0.5).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                assert_abs_diff_eq!(half.at(i, j), 0.5 * est.at(i, j), epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn convergence_window_rules() {
        assert!(check_convergence(&[1e-5, 1e-5, 1e-5], 1e-4, 3));
        assert!(!check_convergence(&[1.0, 1e-5, 1e-5], 1e-4, 3));
        assert!(!check_convergence(&[1e-5, 1e-5], 1e-4, 3));
    }

    #[test]
    fn cost_kernel_term_vanishes_when_kernels_match() {
        let params = ModelParams::default_quartic(0.7);
        let tg = TimeGrid::new(1.0, 8).unwrap();
        let k = TwoTimeKernel::from_fn(tg, |s, t| 0.3 + s * t);
        let cost = evaluate_cost(&k, &k, &[0.5, 0.5], &params).unwrap();
        assert_eq!(cost.kernel_term, 0.0);
        assert_abs_diff_eq!(cost.total, -0.5, epsilon = 1e-15);
        assert_eq!(cost.stderr, 0.0);
    }

    #[test]
    fn decoupled_cost_matches_single_agent_solve() {
        // At zero coupling the cost is the negative log weight of the
        // decoupled agent, whatever the kernels do.
        let params = ModelParams::default_quartic(0.0);
        let (sg, tg) = grids();
        let cfg = SolverConfig {
            n_outer: 2,
            n_inner: 2,
            n_paths: 500,
            window: 1,
            tol: 5e-2,
            max_iter: 4,
            seed: 11,
            ..SolverConfig::default()
        };
        let state = solve_self_consistent(&params, &sg, &tg, &cfg).unwrap();
        assert!(state.converged);
        assert!(state.iterations <= 2, "iterations {}", state.iterations);

        let weight = crate::pde::solve_weight_backward(
            &params,
            &FieldPath::zeros(tg.clone()),
            &sg,
        )
        .unwrap();
        let single = -weight.at_origin().ln();
        let rel = (state.cost.total - single).abs() / single.abs();
        assert!(rel <= 1e-12, "relative gap {rel}");
        assert_eq!(state.cost.kernel_term, 0.0);
        assert_eq!(state.cost.stderr, 0.0);
    }

    #[test]
    fn solver_is_seed_deterministic() {
        let params = ModelParams::quadratic(0.2);
        let (sg, tg) = (
            SpaceGrid::new(6.0, 121).unwrap(),
            TimeGrid::new(1.0, 16).unwrap(),
        );
        let cfg = SolverConfig {
            n_outer: 3,
            n_inner: 3,
            n_paths: 500,
            max_iter: 3,
            window: 2,
            tol: 1e-6,
            seed: 99,
            ..SolverConfig::default()
        };
        let a = solve_self_consistent(&params, &sg, &tg, &cfg).unwrap();
        let b = solve_self_consistent(&params, &sg, &tg, &cfg).unwrap();
        assert_eq!(a.corr.values(), b.corr.values());
        assert_eq!(a.mean_corr.values(), b.mean_corr.values());
        assert_eq!(a.cost.total, b.cost.total);
        assert_eq!(a.log_norms, b.log_norms);
    }

    #[test]
    fn kernels_keep_zero_first_row_through_iterations() {
        let params = ModelParams::quadratic(0.3);
        let (sg, tg) = (
            SpaceGrid::new(6.0, 121).unwrap(),
            TimeGrid::new(1.0, 16).unwrap(),
        );
        let cfg = SolverConfig {
            n_outer: 2,
            n_inner: 4,
            n_paths: 500,
            max_iter: 3,
            window: 3,
            tol: 1e-9,
            seed: 5,
            ..SolverConfig::default()
        };
        let state = solve_self_consistent(&params, &sg, &tg, &cfg).unwrap();
        for j in 0..tg.len() {
            assert_eq!(state.corr.at(0, j), 0.0);
            assert_eq!(state.mean_corr.at(0, j), 0.0);
        }
        for i in 0..tg.len() {
            assert!(state.corr.at(i, i) >= 0.0);
        }
        assert!(!state.converged);
        assert_eq!(state.history.len(), 3);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = SolverConfig::default();
        cfg.damping = 1.5;
        assert!(cfg.validate().is_err());
        cfg.damping = 0.5;
        cfg.n_outer = 0;
        assert!(cfg.validate().is_err());
        cfg.n_outer = 8;
        cfg.tol = 0.0;
        assert!(cfg.validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        /// Damped updates are symmetric to machine precision for any blend.
        #[test]
        fn damped_update_symmetric(seed in 0u64..500, damping in 0.05f64..1.0) {
            use rand::Rng as _;
            use rand::SeedableRng as _;
            let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
            let tg = TimeGrid::new(1.0, 6).unwrap();
            let n = tg.len();
            let a = DMatrix::from_fn(n, n, |_, _| rng.gen::<f64>() - 0.5);
            let old = TwoTimeKernel::new(tg.clone(), symmetrize(a)).unwrap();
            let b = DMatrix::from_fn(n, n, |_, _| rng.gen::<f64>() - 0.5);
            let est = TwoTimeKernel::new(tg, symmetrize(b)).unwrap();
            let blended = damped_update(&old, &est, damping).unwrap();
            for i in 0..n {
                for j in 0..n {
                    prop_assert_eq!(blended.at(i, j), blended.at(j, i));
                }
            }
        }
    }
}
