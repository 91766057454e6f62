//! One-dimensional PDE and SDE kernels for the representative agent.
//!
//! The backward weight function is solved as a linear PDE and the value
//! function recovered by a Cole-Hopf transformation instead of discretizing
//! the nonlinear backward equation directly; the transformation is exact and
//! the linear solve is unconditionally stable. The forward density uses the
//! Chang-Cooper flux discretization with zero-flux boundaries, which keeps
//! the density non-negative and conserves mass exactly in flux form.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::fields::FieldPath;
use crate::model::{ModelParams, SpaceGrid, TimeGrid};

/// Nodes where the weight function falls below `floor_fraction * max` are
/// masked out of the value function and the drift.
pub const DEFAULT_FLOOR_FRACTION: f64 = 1e-12;

/// Drift magnitude cap. Near masked regions finite differences of the log
/// weight diverge; the cap bounds them without affecting the bulk.
pub const DEFAULT_DRIFT_CAP: f64 = 50.0;

/// A density run aborts if its mass drifts further than this from one.
pub const MASS_ABORT_LIMIT: f64 = 1e-6;

/// Scalar field over (time x space) grid nodes, stored row-major by time.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    space: SpaceGrid,
    time: TimeGrid,
    values: Vec<f64>,
}

impl GridFunction {
    pub fn zeros(space: SpaceGrid, time: TimeGrid) -> Self {
        let len = space.len() * time.len();
        Self {
            space,
            time,
            values: vec![0.0; len],
        }
    }

    pub fn space(&self) -> &SpaceGrid {
        &self.space
    }

    pub fn time(&self) -> &TimeGrid {
        &self.time
    }

    #[inline]
    pub fn at(&self, time_index: usize, space_index: usize) -> f64 {
        self.values[time_index * self.space.len() + space_index]
    }

    #[inline]
    pub fn set(&mut self, time_index: usize, space_index: usize, value: f64) {
        self.values[time_index * self.space.len() + space_index] = value;
    }

    pub fn row(&self, time_index: usize) -> &[f64] {
        let n = self.space.len();
        &self.values[time_index * n..(time_index + 1) * n]
    }

    pub fn row_mut(&mut self, time_index: usize) -> &mut [f64] {
        let n = self.space.len();
        &mut self.values[time_index * n..(time_index + 1) * n]
    }

    /// Value at the start point (t = 0, x = 0).
    pub fn at_origin(&self) -> f64 {
        self.at(0, self.space.center())
    }

    /// CSV dump: header row holds the space nodes, then one row per time
    /// node with the time value in the first column.
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        use std::fmt::Write as _;
        let mut out = String::from("time");
        for x in self.space.nodes() {
            let _ = write!(out, ",{x}");
        }
        out.push('\n');
        for i in 0..self.time.len() {
            let _ = write!(out, "{}", self.time.node(i));
            for v in self.row(i) {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Solves the tridiagonal system in place; `diag` and `rhs` are clobbered.
/// Standard Thomas elimination, valid for the diagonally dominant systems
/// assembled here.
fn thomas_solve(lower: &[f64], diag: &mut [f64], upper: &[f64], rhs: &mut [f64]) {
    let n = diag.len();
    for k in 1..n {
        let w = lower[k] / diag[k - 1];
        diag[k] -= w * upper[k - 1];
        rhs[k] -= w * rhs[k - 1];
    }
    rhs[n - 1] /= diag[n - 1];
    for k in (0..n - 1).rev() {
        rhs[k] = (rhs[k] - upper[k] * rhs[k + 1]) / diag[k];
    }
}

/// Backward Crank-Nicolson solve of the linear weight equation
/// `-dw/dt = [ -potential(x) - drive(t) x + (1/2) d^2/dx^2 ] w`
/// from `w(x, horizon) = exp(-terminal(x))`, with Dirichlet zero boundaries.
///
/// Every interior value must stay strictly positive; a non-positive value
/// aborts the solve, signalling a domain too small or a time step too coarse.
pub fn solve_weight_backward(
    params: &ModelParams,
    drive: &FieldPath,
    space: &SpaceGrid,
) -> Result<GridFunction> {
    let time = drive.grid().clone();
    if (time.horizon() - params.horizon).abs() > 1e-12 * params.horizon {
        return Err(Error::GridMismatch(format!(
            "drive horizon {} != model horizon {}",
            time.horizon(),
            params.horizon
        )));
    }
    let n = space.len();
    let steps = time.steps();
    let dt = time.dt();
    let dx = space.dx();
    let beta = dt / (4.0 * dx * dx);

    let xs = space.nodes();
    let local: Vec<f64> = xs.iter().map(|&x| params.potential_at(x)).collect();

    let mut weight = GridFunction::zeros(space.clone(), time.clone());
    {
        let terminal = params.terminal_weight(space);
        let row = weight.row_mut(steps);
        for k in 1..n - 1 {
            row[k] = terminal[k];
        }
    }
    check_positive(&weight, steps, n)?;

    // Interior unknowns k = 1..n-2; Dirichlet zeros contribute nothing.
    let m = n - 2;
    let lower = vec![-beta; m];
    let upper = vec![-beta; m];
    let mut diag = vec![0.0; m];
    let mut rhs = vec![0.0; m];

    for i in (0..steps).rev() {
        let g_new = drive.at(i);
        let g_old = drive.at(i + 1);
        {
            let prev = weight.row(i + 1);
            for k in 1..n - 1 {
                let v_old = local[k] + g_old * xs[k];
                rhs[k - 1] = prev[k] * (1.0 - 2.0 * beta - 0.5 * dt * v_old)
                    + beta * (prev[k - 1] + prev[k + 1]);
            }
        }
        for k in 1..n - 1 {
            let v_new = local[k] + g_new * xs[k];
            diag[k - 1] = 1.0 + 2.0 * beta + 0.5 * dt * v_new;
        }
        thomas_solve(&lower, &mut diag, &upper, &mut rhs);
        weight.row_mut(i)[1..n - 1].copy_from_slice(&rhs);
        check_positive(&weight, i, n)?;
    }
    Ok(weight)
}

fn check_positive(weight: &GridFunction, time_index: usize, n: usize) -> Result<()> {
    let row = weight.row(time_index);
    for (k, &v) in row.iter().enumerate().take(n - 1).skip(1) {
        if !(v > 0.0) {
            return Err(Error::NonPositiveWeight {
                time_index,
                space_index: k,
                value: v,
            });
        }
    }
    Ok(())
}

/// Value function `-ln w` with an out-of-domain mask where the weight is at
/// or below the floor.
#[derive(Debug, Clone)]
pub struct ValueFunction {
    cost: GridFunction,
    mask: Vec<bool>,
    masked_count: usize,
    floor: f64,
}

impl ValueFunction {
    pub fn cost(&self) -> &GridFunction {
        &self.cost
    }

    #[inline]
    pub fn is_masked(&self, time_index: usize, space_index: usize) -> bool {
        self.mask[time_index * self.cost.space().len() + space_index]
    }

    pub fn masked_count(&self) -> usize {
        self.masked_count
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }
}

/// Logarithmic transformation of the weight function.
///
/// The floor is `floor_fraction` times the global maximum of the weight;
/// nodes at or below it are masked rather than propagated as huge costs.
/// A masked start point is fatal because the sample weight is undefined.
pub fn cole_hopf(weight: &GridFunction, floor_fraction: f64) -> Result<ValueFunction> {
    let n = weight.space().len();
    let rows = weight.time().len();
    let max = weight
        .values
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let floor = floor_fraction * max;
    if !(weight.at_origin() > floor) {
        return Err(Error::WeightUnderflow { floor });
    }
    let mut cost = GridFunction::zeros(weight.space().clone(), weight.time().clone());
    let mut mask = vec![false; rows * n];
    let mut masked_count = 0;
    for i in 0..rows {
        let src = weight.row(i);
        let dst = cost.row_mut(i);
        for k in 0..n {
            if src[k] > floor {
                dst[k] = -src[k].ln();
            } else {
                dst[k] = f64::INFINITY;
                mask[i * n + k] = true;
                masked_count += 1;
            }
        }
    }
    Ok(ValueFunction {
        cost,
        mask,
        masked_count,
        floor,
    })
}

/// Optimal drift on the grid, capped in magnitude.
#[derive(Debug, Clone)]
pub struct DriftField {
    values: GridFunction,
    cap: f64,
}

impl DriftField {
    pub fn values(&self) -> &GridFunction {
        &self.values
    }

    pub fn cap(&self) -> f64 {
        self.cap
    }

    #[inline]
    pub fn at(&self, time_index: usize, space_index: usize) -> f64 {
        self.values.at(time_index, space_index)
    }

    pub fn row(&self, time_index: usize) -> &[f64] {
        self.values.row(time_index)
    }

    /// Linear interpolation of the drift row at position `x`.
    #[inline]
    pub fn interp(&self, time_index: usize, x: f64) -> f64 {
        let sg = self.values.space();
        let dx = sg.dx();
        let pos = (x + sg.half_width()) / dx;
        let n = sg.len();
        if pos <= 0.0 {
            return self.at(time_index, 0);
        }
        if pos >= (n - 1) as f64 {
            return self.at(time_index, n - 1);
        }
        let k = pos as usize;
        let frac = pos - k as f64;
        let row = self.row(time_index);
        row[k] * (1.0 - frac) + row[k + 1] * frac
    }
}

/// Negative space gradient of the value function: central differences in the
/// bulk, one-sided at mask edges, inward-pointing cap inside masked regions.
pub fn drift_from_value(value: &ValueFunction, cap: f64) -> DriftField {
    let space = value.cost.space().clone();
    let time = value.cost.time().clone();
    let n = space.len();
    let dx = space.dx();
    let center = space.center();
    let mut drift = GridFunction::zeros(space, time.clone());
    for i in 0..time.len() {
        let c = value.cost.row(i);
        let out = drift.row_mut(i);
        for k in 0..n {
            let u = if value.is_masked(i, k) {
                // The true drift points steeply away from the depleted
                // region; mimic it with the capped inward value.
                match k.cmp(&center) {
                    std::cmp::Ordering::Less => cap,
                    std::cmp::Ordering::Greater => -cap,
                    std::cmp::Ordering::Equal => 0.0,
                }
            } else {
                let left_ok = k > 0 && !value.is_masked(i, k - 1);
                let right_ok = k + 1 < n && !value.is_masked(i, k + 1);
                match (left_ok, right_ok) {
                    (true, true) => -(c[k + 1] - c[k - 1]) / (2.0 * dx),
                    (false, true) => -(c[k + 1] - c[k]) / dx,
                    (true, false) => -(c[k] - c[k - 1]) / dx,
                    (false, false) => 0.0,
                }
            };
            out[k] = u.clamp(-cap, cap);
        }
    }
    DriftField {
        values: drift,
        cap,
    }
}

/// Forward density with conservation diagnostics.
#[derive(Debug, Clone)]
pub struct DensitySolution {
    pub density: GridFunction,
    /// Largest deviation of the trapezoid mass from one over the run.
    pub max_mass_error: f64,
    /// Largest boundary-node mass observed; nonzero values signal that the
    /// zero-flux truncation is being felt.
    pub max_boundary_mass: f64,
}

/// Chang-Cooper interface coefficients for flux
/// `F = u * (delta * p_left + (1 - delta) * p_right) - (d / dx) (p_right - p_left)`.
/// Returns `(a, b)` with `F = a * p_left + b * p_right`; `a >= 0 >= b` for
/// every drift, which makes the implicit step an M-matrix solve.
#[inline]
fn chang_cooper_faces(u_face: f64, dx: f64, diffusion: f64) -> (f64, f64) {
    let scale = diffusion / dx;
    let w = u_face * dx / diffusion;
    if w.abs() < 1e-8 {
        // Series around the central limit.
        (scale * (1.0 + 0.5 * w), -scale * (1.0 - 0.5 * w))
    } else if w > 500.0 {
        (scale * w, 0.0)
    } else if w < -500.0 {
        (0.0, scale * w)
    } else {
        let em = (-w).exp();
        let a = scale * w / (1.0 - em);
        let b = -scale * w * em / (1.0 - em);
        (a, b)
    }
}

/// Propagates the density forward from a discrete delta at a grid node using
/// the Chang-Cooper scheme with implicit Euler steps and zero-flux
/// boundaries. Drift values for the step `[t_i, t_{i+1}]` are taken at `t_i`.
pub fn solve_density_forward(
    drift: &DriftField,
    start_space: usize,
    start_time: usize,
) -> Result<DensitySolution> {
    let space = drift.values().space().clone();
    let time = drift.values().time().clone();
    let n = space.len();
    let steps = time.steps();
    if start_time >= steps {
        return Err(Error::InvalidParameter(format!(
            "start time index {start_time} must be < {steps}"
        )));
    }
    if start_space >= n {
        return Err(Error::InvalidParameter(format!(
            "start space index {start_space} out of range"
        )));
    }
    let dt = time.dt();
    let dx = space.dx();
    let diffusion = 0.5;

    let mut density = GridFunction::zeros(space, time.clone());
    density.set(start_time, start_space, 1.0 / dx);

    let mut lower = vec![0.0; n];
    let mut upper = vec![0.0; n];
    let mut diag = vec![0.0; n];
    let mut rhs = vec![0.0; n];
    let mut faces_a = vec![0.0; n - 1];
    let mut faces_b = vec![0.0; n - 1];

    let mut max_mass_error = 0.0f64;
    let mut max_boundary_mass = boundary_mass(density.row(start_time), dx);

    for i in start_time..steps {
        let u = drift.row(i);
        for k in 0..n - 1 {
            let (a, b) = chang_cooper_faces(0.5 * (u[k] + u[k + 1]), dx, diffusion);
            faces_a[k] = a;
            faces_b[k] = b;
        }
        let r = dt / dx;
        for k in 0..n {
            let flux_out_right = if k + 1 < n { faces_a[k] } else { 0.0 };
            let flux_in_left = if k > 0 { faces_b[k - 1] } else { 0.0 };
            diag[k] = 1.0 + r * (flux_out_right - flux_in_left);
            lower[k] = if k > 0 { -r * faces_a[k - 1] } else { 0.0 };
            upper[k] = if k + 1 < n { r * faces_b[k] } else { 0.0 };
        }
        rhs.copy_from_slice(density.row(i));
        thomas_solve(&lower, &mut diag, &upper, &mut rhs);
        density.row_mut(i + 1).copy_from_slice(&rhs);

        let mass = trapezoid(density.row(i + 1), dx);
        let err = (mass - 1.0).abs();
        max_mass_error = max_mass_error.max(err);
        if err > MASS_ABORT_LIMIT {
            return Err(Error::MassDrift {
                step: i + 1,
                error: err,
                limit: MASS_ABORT_LIMIT,
            });
        }
        max_boundary_mass = max_boundary_mass.max(boundary_mass(density.row(i + 1), dx));
    }
    if max_boundary_mass > 1e-8 {
        log::warn!(
            "density boundary mass {max_boundary_mass:e} exceeds 1e-8; \
             the truncated domain may be too small"
        );
    }
    Ok(DensitySolution {
        density,
        max_mass_error,
        max_boundary_mass,
    })
}

fn boundary_mass(row: &[f64], dx: f64) -> f64 {
    0.5 * dx * (row[0] + row[row.len() - 1])
}

fn trapezoid(row: &[f64], dx: f64) -> f64 {
    let n = row.len();
    let inner: f64 = row[1..n - 1].iter().sum();
    dx * (inner + 0.5 * (row[0] + row[n - 1]))
}

/// Trapezoid quadrature of `x^power * density(x, t_i)`.
pub fn density_moment(density: &GridFunction, time_index: usize, power: u32) -> f64 {
    let sg = density.space();
    let dx = sg.dx();
    let row = density.row(time_index);
    let n = row.len();
    let mut sum = 0.5 * (sg.node(0).powi(power as i32) * row[0]
        + sg.node(n - 1).powi(power as i32) * row[n - 1]);
    for k in 1..n - 1 {
        sum += sg.node(k).powi(power as i32) * row[k];
    }
    sum * dx
}

/// Reconstructs the unnormalized propagator of the weighted process from the
/// controlled density and the weight function:
/// `rho(x, t) = density(x, t) * weight(start) / weight(x, t)`.
///
/// Masked weight nodes contribute nothing; rows before the start time are
/// zero. Fails if the anchor node itself is masked.
pub fn weighted_propagator(
    density: &GridFunction,
    weight: &GridFunction,
    start_space: usize,
    start_time: usize,
    floor_fraction: f64,
) -> Result<GridFunction> {
    if density.space() != weight.space() || density.time() != weight.time() {
        return Err(Error::GridMismatch(
            "density and weight on different grids".into(),
        ));
    }
    let n = density.space().len();
    let rows = density.time().len();
    let max = weight
        .values
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let floor = floor_fraction * max;
    let anchor = weight.at(start_time, start_space);
    if !(anchor > floor) {
        return Err(Error::WeightUnderflow { floor });
    }
    let mut out = GridFunction::zeros(density.space().clone(), density.time().clone());
    for i in start_time..rows {
        let d = density.row(i);
        let w = weight.row(i);
        let dst = out.row_mut(i);
        for k in 0..n {
            if w[k] > floor {
                dst[k] = d[k] * anchor / w[k];
            }
        }
    }
    Ok(out)
}

/// Feynman-Kac Monte Carlo estimate of the weight at the origin.
///
/// Simulates free Brownian paths from x = 0 and averages
/// `exp(-int [potential + drive x] dt - terminal(x(horizon)))`, the
/// reweighting form of killing at that rate (same expectation, lower
/// variance, and well-defined when the rate goes negative). The running
/// integral uses the trapezoid rule on the path nodes. Returns the mean and
/// its standard error.
pub fn feynman_kac_weight<R: Rng + ?Sized>(
    params: &ModelParams,
    drive: &FieldPath,
    n_paths: usize,
    rng: &mut R,
) -> Result<(f64, f64)> {
    if n_paths < 100 {
        return Err(Error::InvalidParameter(format!(
            "feynman-kac needs at least 100 paths, got {n_paths}"
        )));
    }
    let time = drive.grid();
    if (time.horizon() - params.horizon).abs() > 1e-12 * params.horizon {
        return Err(Error::GridMismatch(format!(
            "drive horizon {} != model horizon {}",
            time.horizon(),
            params.horizon
        )));
    }
    let steps = time.steps();
    let dt = time.dt();
    let sqrt_dt = dt.sqrt();

    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n_paths {
        let mut x = 0.0f64;
        let mut running = params.potential_at(x) + drive.at(0) * x;
        let mut action = 0.0;
        for i in 0..steps {
            let z: f64 = rng.sample(StandardNormal);
            x += sqrt_dt * z;
            let next = params.potential_at(x) + drive.at(i + 1) * x;
            action += 0.5 * dt * (running + next);
            running = next;
        }
        let w = (-action - params.terminal_at(x)).exp();
        sum += w;
        sum_sq += w * w;
    }
    let n = n_paths as f64;
    let mean = sum / n;
    let var = ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0);
    Ok((mean, (var / n).sqrt()))
}
