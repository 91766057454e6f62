//! Finite-population ground truth.
//!
//! For quadratic models the optimal cost of one disorder instance is exact:
//! the cost-to-go is a quadratic form whose coefficients obey matrix Riccati
//! ODEs integrated backward with RK4. For general potentials the cost is
//! estimated by plain Feynman-Kac Monte Carlo over free Brownian bundles,
//! with a jackknife error for the nonlinearity of the log. Quenched averages
//! run independent instances and report the disorder spread.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{ModelParams, TimeGrid};
use crate::seeds;

/// One realization of the random pairwise couplings: a symmetric matrix with
/// zero diagonal and entries of standard deviation `coupling / sqrt(n)`.
#[derive(Debug, Clone)]
pub struct DisorderInstance {
    couplings: DMatrix<f64>,
}

impl DisorderInstance {
    pub fn agents(&self) -> usize {
        self.couplings.nrows()
    }

    pub fn couplings(&self) -> &DMatrix<f64> {
        &self.couplings
    }
}

/// Draws a disorder instance; each unordered pair carries one Gaussian.
pub fn sample_disorder<R: Rng + ?Sized>(
    agents: usize,
    coupling: f64,
    rng: &mut R,
) -> Result<DisorderInstance> {
    if agents < 2 {
        return Err(Error::InvalidParameter(format!(
            "disorder needs at least 2 agents, got {agents}"
        )));
    }
    if !(coupling >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "coupling must be >= 0, got {coupling}"
        )));
    }
    let scale = coupling / (agents as f64).sqrt();
    let mut m = DMatrix::zeros(agents, agents);
    for i in 0..agents {
        for j in 0..i {
            let z: f64 = rng.sample(StandardNormal);
            m[(i, j)] = scale * z;
            m[(j, i)] = scale * z;
        }
    }
    Ok(DisorderInstance { couplings: m })
}

/// Exact cost-to-go of a quadratic model: quadratic, linear and scalar
/// coefficient paths along the time grid, plus the optimal cost at the
/// all-zero start.
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    /// Quadratic coefficient matrix at each time node.
    pub quadratic: Vec<DMatrix<f64>>,
    /// Linear coefficient vector at each time node.
    pub linear: Vec<DVector<f64>>,
    /// Scalar term at each time node; `scalar[0]` is the total optimal cost.
    pub scalar: Vec<f64>,
}

impl RiccatiSolution {
    /// Total optimal cost from the all-zero start.
    pub fn cost(&self) -> f64 {
        self.scalar[0]
    }

    pub fn cost_per_agent(&self) -> f64 {
        self.cost() / self.quadratic[0].nrows() as f64
    }

    /// Largest asymmetry of the quadratic coefficient over the whole path.
    pub fn max_asymmetry(&self) -> f64 {
        self.quadratic
            .iter()
            .map(|p| {
                let mut max = 0.0f64;
                for i in 0..p.nrows() {
                    for j in 0..i {
                        max = max.max((p[(i, j)] - p[(j, i)]).abs());
                    }
                }
                max
            })
            .fold(0.0, f64::max)
    }
}

fn symmetrize_mut(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Solves the coupled Riccati system backward along the grid with RK4.
///
/// Requires an at-most-quadratic potential and terminal cost. The total
/// curvature (twice the quadratic potential coefficient plus the couplings)
/// must be positive definite; otherwise the quadratic model is unconfined,
/// its cost is unbounded below, and the instance is refused.
pub fn riccati_solve(
    instance: &DisorderInstance,
    params: &ModelParams,
    time: &TimeGrid,
) -> Result<RiccatiSolution> {
    let pot = params.quadratic_potential().ok_or_else(|| {
        Error::InvalidParameter("Riccati oracle requires an at-most-quadratic potential".into())
    })?;
    let term = params.quadratic_terminal().ok_or_else(|| {
        Error::InvalidParameter("Riccati oracle requires an at-most-quadratic terminal cost".into())
    })?;
    if (time.horizon() - params.horizon).abs() > 1e-12 * params.horizon {
        return Err(Error::GridMismatch(format!(
            "time grid horizon {} != model horizon {}",
            time.horizon(),
            params.horizon
        )));
    }
    let n = instance.agents();
    let nf = n as f64;

    // Running cost (1/2) x^T A x + b^T x + n*c0 with A = 2*pot2*I + couplings.
    let mut curvature = instance.couplings.clone();
    for i in 0..n {
        curvature[(i, i)] += 2.0 * pot[2];
    }
    if curvature.clone().cholesky().is_none() {
        return Err(Error::NotPositiveDefinite);
    }
    let linear_running = DVector::from_element(n, pot[1]);
    let constant_running = nf * pot[0];

    let steps = time.steps();
    let dt = time.dt();
    let mut quadratic = vec![DMatrix::zeros(n, n); steps + 1];
    let mut linear = vec![DVector::zeros(n); steps + 1];
    let mut scalar = vec![0.0; steps + 1];
    quadratic[steps] = DMatrix::from_diagonal_element(n, n, 2.0 * term[2]);
    linear[steps] = DVector::from_element(n, term[1]);
    scalar[steps] = nf * term[0];

    // Backward derivatives: P' = P^2 - A, q' = P q - b,
    // r' = |q|^2 / 2 - tr(P) / 2 - n c0.
    let deriv = |p: &DMatrix<f64>, q: &DVector<f64>| {
        let mut dp = p * p - &curvature;
        symmetrize_mut(&mut dp);
        let dq = p * q - &linear_running;
        let dr = 0.5 * q.dot(q) - 0.5 * p.trace() - constant_running;
        (dp, dq, dr)
    };

    let h = -dt; // integrating backward in time
    for i in (0..steps).rev() {
        let p0 = quadratic[i + 1].clone();
        let q0 = linear[i + 1].clone();
        let r0 = scalar[i + 1];

        let (k1p, k1q, k1r) = deriv(&p0, &q0);
        let (k2p, k2q, k2r) = deriv(&(&p0 + &k1p * (h / 2.0)), &(&q0 + &k1q * (h / 2.0)));
        let (k3p, k3q, k3r) = deriv(&(&p0 + &k2p * (h / 2.0)), &(&q0 + &k2q * (h / 2.0)));
        let (k4p, k4q, k4r) = deriv(&(&p0 + &k3p * h), &(&q0 + &k3q * h));

        let mut p_new = &p0 + (k1p + k2p * 2.0 + k3p * 2.0 + k4p) * (h / 6.0);
        symmetrize_mut(&mut p_new);
        quadratic[i] = p_new;
        linear[i] = &q0 + (k1q + k2q * 2.0 + k3q * 2.0 + k4q) * (h / 6.0);
        scalar[i] = r0 + (k1r + 2.0 * k2r + 2.0 * k3r + k4r) * (h / 6.0);
    }

    Ok(RiccatiSolution {
        quadratic,
        linear,
        scalar,
    })
}

/// Feynman-Kac estimate of the per-agent cost of one instance.
#[derive(Debug, Clone, Copy)]
pub struct FkEstimate {
    /// Minus the per-agent log of the mean path weight.
    pub cost_per_agent: f64,
    /// Jackknife (leave-one-out) error of the log.
    pub stderr: f64,
}

/// Plain Monte Carlo over free Brownian bundles: each path of the whole
/// population is weighted by `exp(-int V dt - sum terminal)` with the full
/// interacting potential. The log of the mean weight is debiased and errored
/// by jackknife. Weights are combined in log space, so individual underflow
/// is harmless; only a fully degenerate ensemble is fatal.
pub fn feynman_kac_cost<R: Rng + ?Sized>(
    instance: &DisorderInstance,
    params: &ModelParams,
    time: &TimeGrid,
    n_paths: usize,
    rng: &mut R,
) -> Result<FkEstimate> {
    if n_paths < 1000 {
        return Err(Error::InvalidParameter(format!(
            "population Feynman-Kac needs at least 1000 paths, got {n_paths}"
        )));
    }
    if (time.horizon() - params.horizon).abs() > 1e-12 * params.horizon {
        return Err(Error::GridMismatch(format!(
            "time grid horizon {} != model horizon {}",
            time.horizon(),
            params.horizon
        )));
    }
    let n = instance.agents();
    let nf = n as f64;
    let steps = time.steps();
    let dt = time.dt();
    let sqrt_dt = dt.sqrt();

    let potential = |x: &DVector<f64>| -> f64 {
        let mut v: f64 = x.iter().map(|&xi| params.potential_at(xi)).sum();
        // Couplings have zero diagonal, so the quadratic form counts each
        // unordered pair twice.
        v += 0.5 * (&instance.couplings * x).dot(x);
        v
    };

    let mut log_weights = Vec::with_capacity(n_paths);
    let mut x = DVector::zeros(n);
    for _ in 0..n_paths {
        x.fill(0.0);
        let mut running = potential(&x);
        let mut action = 0.0;
        for _ in 0..steps {
            for xi in x.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *xi += sqrt_dt * z;
            }
            let next = potential(&x);
            action += 0.5 * dt * (running + next);
            running = next;
        }
        let terminal: f64 = x.iter().map(|&xi| params.terminal_at(xi)).sum();
        log_weights.push(-action - terminal);
    }

    let max_log = log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max_log.is_finite() {
        return Err(Error::PathWeightUnderflow);
    }
    let shifted: Vec<f64> = log_weights.iter().map(|lw| (lw - max_log).exp()).collect();
    let total: f64 = shifted.iter().sum();
    let count = n_paths as f64;
    if !(total > 0.0) {
        return Err(Error::PathWeightUnderflow);
    }
    let cost = -(max_log + (total / count).ln()) / nf;

    // Jackknife over leave-one-out means of the weights.
    let mut jack_sum = 0.0;
    let mut jack_sq = 0.0;
    for &w in &shifted {
        let rest = ((total - w) / (count - 1.0)).max(f64::MIN_POSITIVE);
        let theta = -(max_log + rest.ln()) / nf;
        jack_sum += theta;
        jack_sq += theta * theta;
    }
    let jack_mean = jack_sum / count;
    let jack_var = ((jack_sq - count * jack_mean * jack_mean) * (count - 1.0) / count).max(0.0);
    Ok(FkEstimate {
        cost_per_agent: cost,
        stderr: jack_var.sqrt(),
    })
}

/// How each disorder instance is solved in a quenched average.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleMode {
    /// Exact matrix Riccati integration; quadratic models only.
    Riccati,
    /// Monte Carlo path estimate; any confining potential.
    FeynmanKac,
}

/// Disorder average of the per-agent cost.
#[derive(Debug, Clone)]
pub struct QuenchedEstimate {
    pub per_instance: Vec<f64>,
    pub mean: f64,
    /// Standard error over instances (disorder spread only).
    pub stderr: f64,
    /// Instances refused for an indefinite curvature and resampled.
    pub refused: usize,
}

/// Averages the per-agent cost over independent disorder instances.
///
/// Refused instances (indefinite curvature in Riccati mode) are resampled
/// and counted; more than 20% refusals is fatal because the quadratic family
/// is then genuinely unconfined at this coupling.
pub fn quenched_average<R: Rng + ?Sized>(
    params: &ModelParams,
    agents: usize,
    n_instances: usize,
    mode: OracleMode,
    n_paths: usize,
    time: &TimeGrid,
    rng: &mut R,
) -> Result<QuenchedEstimate> {
    if n_instances < 4 {
        return Err(Error::InvalidParameter(format!(
            "quenched average needs at least 4 instances, got {n_instances}"
        )));
    }
    if mode == OracleMode::Riccati && params.quadratic_potential().is_none() {
        return Err(Error::InvalidParameter(
            "Riccati oracle requires an at-most-quadratic potential; \
             use the feynman-kac mode"
                .into(),
        ));
    }
    let master: u64 = rng.gen();

    let mut per_instance = Vec::with_capacity(n_instances);
    let mut refused = 0usize;
    let mut attempt = 0u64;
    while per_instance.len() < n_instances {
        let missing = n_instances - per_instance.len();
        let batch: Vec<u64> = (0..missing as u64).map(|k| attempt + k).collect();
        attempt += missing as u64;

        let results: Vec<Result<f64>> = batch
            .into_par_iter()
            .map(|tag| {
                let mut local =
                    ChaCha12Rng::seed_from_u64(seeds::derive(master, &[tag]));
                let instance = sample_disorder(agents, params.coupling, &mut local)?;
                match mode {
                    OracleMode::Riccati => {
                        riccati_solve(&instance, params, time).map(|s| s.cost_per_agent())
                    }
                    OracleMode::FeynmanKac => {
                        feynman_kac_cost(&instance, params, time, n_paths, &mut local)
                            .map(|e| e.cost_per_agent)
                    }
                }
            })
            .collect();

        for r in results {
            match r {
                Ok(cost) => per_instance.push(cost),
                Err(Error::NotPositiveDefinite) => refused += 1,
                Err(e) => return Err(e),
            }
        }
        if refused > 0 {
            log::warn!("{refused}/{attempt} disorder instances refused so far");
        }
        if attempt >= 10 && (refused as f64) > 0.2 * attempt as f64 {
            return Err(Error::TooManyRefusals {
                refused,
                attempted: attempt as usize,
            });
        }
    }

    let n = per_instance.len() as f64;
    let mean = per_instance.iter().sum::<f64>() / n;
    let var = per_instance
        .iter()
        .map(|c| (c - mean) * (c - mean))
        .sum::<f64>()
        / (n - 1.0);
    Ok(QuenchedEstimate {
        per_instance,
        mean,
        stderr: (var / n).sqrt(),
        refused,
    })
}
