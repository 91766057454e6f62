//! Observables of the representative agent under one pair of field samples,
//! and their importance-weighted population averages.
//!
//! For a fixed outer field, each inner-field sample carries the weight
//! `w = weight_fn(0, 0)`; population averages are self-normalized by the mean
//! weight. The mean path is read off the forward density (low noise), while
//! the two-time correlation is estimated from an ensemble of trajectories
//! driven by the optimal drift, which has the same expectation as the
//! two-propagator integral at a fraction of the cost.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::fields::FieldPath;
use crate::model::{ModelParams, SpaceGrid};
use crate::pde::{
    cole_hopf, density_moment, drift_from_value, solve_density_forward, solve_weight_backward,
    DEFAULT_DRIFT_CAP, DEFAULT_FLOOR_FRACTION,
};

/// Health indicators of one inner-field sample.
#[derive(Debug, Clone)]
pub struct MemberDiagnostics {
    /// Grid nodes masked out of the value function.
    pub masked_nodes: usize,
    /// Largest mass deviation of the forward density.
    pub mass_error: f64,
    /// Largest boundary mass of the forward density.
    pub boundary_mass: f64,
    /// Trajectory-ensemble mean path, for cross-checking against the density.
    pub particle_mean: DVector<f64>,
    /// Standard error of the trajectory mean path.
    pub particle_mean_stderr: DVector<f64>,
    /// Standard error of the diagonal of the correlation estimate.
    pub corr_diag_stderr: DVector<f64>,
}

/// Observables of one inner-field sample at fixed outer field.
#[derive(Debug, Clone)]
pub struct MemberSample {
    /// Importance weight: the weight function at the start point.
    pub weight: f64,
    /// Mean path from the forward density.
    pub mean: DVector<f64>,
    /// Two-time correlation from the trajectory ensemble, symmetrized.
    pub corr: DMatrix<f64>,
    pub diagnostics: MemberDiagnostics,
}

/// Importance-weighted averages over an inner-field population.
#[derive(Debug, Clone)]
pub struct PopulationAverage {
    /// Weighted mean path.
    pub mean: DVector<f64>,
    /// Weighted correlation kernel.
    pub corr: DMatrix<f64>,
    /// Plain average of the weights; its log enters the optimal cost.
    pub normalization: f64,
    /// Effective sample size of the self-normalized weights.
    pub ess: f64,
}

/// Runs the full single-sample pipeline: backward weight solve, value
/// function, optimal drift, forward density for the mean path, and a
/// trajectory ensemble for the two-time correlation.
pub fn member_observables<R: Rng + ?Sized>(
    params: &ModelParams,
    inner: &FieldPath,
    outer: &FieldPath,
    space: &SpaceGrid,
    n_paths: usize,
    rng: &mut R,
) -> Result<MemberSample> {
    if n_paths < 500 {
        return Err(Error::InvalidParameter(format!(
            "correlation ensemble needs at least 500 paths, got {n_paths}"
        )));
    }
    let drive = FieldPath::combine_drive(params.coupling, inner, outer)?;
    let time = drive.grid().clone();

    let weight_fn = solve_weight_backward(params, &drive, space)?;
    let weight = weight_fn.at_origin();
    let value = cole_hopf(&weight_fn, DEFAULT_FLOOR_FRACTION)?;
    let drift = drift_from_value(&value, DEFAULT_DRIFT_CAP);

    let fp = solve_density_forward(&drift, space.center(), 0)?;
    let nodes = time.len();
    let mean = DVector::from_fn(nodes, |i, _| density_moment(&fp.density, i, 1));

    // Trajectory ensemble under the optimal drift. x(0) = 0 exactly, so the
    // first row and column of the correlation vanish identically.
    let steps = time.steps();
    let dt = time.dt();
    let sqrt_dt = dt.sqrt();
    let half_width = space.half_width();
    let mut path = vec![0.0f64; nodes];
    let mut cross = vec![0.0f64; nodes * nodes];
    let mut sum_x = vec![0.0f64; nodes];
    let mut sum_x2 = vec![0.0f64; nodes];
    let mut sum_x4 = vec![0.0f64; nodes];
    for _ in 0..n_paths {
        path[0] = 0.0;
        let mut x = 0.0f64;
        for i in 0..steps {
            let z: f64 = rng.sample(StandardNormal);
            x += drift.interp(i, x) * dt + sqrt_dt * z;
            x = x.clamp(-half_width, half_width);
            path[i + 1] = x;
        }
        for i in 0..nodes {
            let xi = path[i];
            sum_x[i] += xi;
            let xi2 = xi * xi;
            sum_x2[i] += xi2;
            sum_x4[i] += xi2 * xi2;
            let row = &mut cross[i * nodes..(i + 1) * nodes];
            for (j, &xj) in path.iter().enumerate().skip(i) {
                row[j] += xi * xj;
            }
        }
    }
    let n = n_paths as f64;
    let mut corr = DMatrix::zeros(nodes, nodes);
    for i in 0..nodes {
        for j in i..nodes {
            let v = cross[i * nodes + j] / n;
            corr[(i, j)] = v;
            corr[(j, i)] = v;
        }
    }
    let particle_mean = DVector::from_fn(nodes, |i, _| sum_x[i] / n);
    let particle_mean_stderr = DVector::from_fn(nodes, |i, _| {
        let var = ((sum_x2[i] - sum_x[i] * sum_x[i] / n) / (n - 1.0)).max(0.0);
        (var / n).sqrt()
    });
    let corr_diag_stderr = DVector::from_fn(nodes, |i, _| {
        let var = ((sum_x4[i] - sum_x2[i] * sum_x2[i] / n) / (n - 1.0)).max(0.0);
        (var / n).sqrt()
    });

    Ok(MemberSample {
        weight,
        mean,
        corr,
        diagnostics: MemberDiagnostics {
            masked_nodes: value.masked_count(),
            mass_error: fp.max_mass_error,
            boundary_mass: fp.max_boundary_mass,
            particle_mean,
            particle_mean_stderr,
            corr_diag_stderr,
        },
    })
}

/// Self-normalized importance average of a population of samples.
///
/// The small-population bias of self-normalization is monitored through the
/// effective sample size rather than corrected.
pub fn population_average(samples: &[MemberSample]) -> Result<PopulationAverage> {
    let Some(first) = samples.first() else {
        return Err(Error::InvalidParameter(
            "population average needs at least one sample".into(),
        ));
    };
    let nodes = first.mean.len();
    let mut weight_sum = 0.0;
    let mut weight_sq_sum = 0.0;
    let mut mean = DVector::zeros(nodes);
    let mut corr = DMatrix::zeros(nodes, nodes);
    for s in samples {
        weight_sum += s.weight;
        weight_sq_sum += s.weight * s.weight;
        mean.axpy(s.weight, &s.mean, 1.0);
        corr.axpy(s.weight, &s.corr, 1.0);
    }
    if !(weight_sum > 0.0) {
        return Err(Error::WeightCollapse);
    }
    mean /= weight_sum;
    corr /= weight_sum;
    Ok(PopulationAverage {
        mean,
        corr,
        normalization: weight_sum / samples.len() as f64,
        ess: weight_sum * weight_sum / weight_sq_sum,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TimeGrid;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn grids() -> (SpaceGrid, TimeGrid) {
        (
            SpaceGrid::new(6.0, 241).unwrap(),
            TimeGrid::new(1.0, 64).unwrap(),
        )
    }

    fn zero_fields(tg: &TimeGrid) -> (FieldPath, FieldPath) {
        (FieldPath::zeros(tg.clone()), FieldPath::zeros(tg.clone()))
    }

    #[test]
    fn decoupled_default_model_moves_toward_target() {
        let params = ModelParams::default_quartic(0.0);
        let (sg, tg) = grids();
        let (h, big_h) = zero_fields(&tg);
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let s = member_observables(&params, &h, &big_h, &sg, 1000, &mut rng).unwrap();
        assert_eq!(s.mean[0], 0.0);
        assert!(
            s.mean[tg.steps()] > 0.1,
            "terminal mean {} should be pulled toward 1",
            s.mean[tg.steps()]
        );
        assert!(s.weight > 0.0);
    }

    #[test]
    fn symmetric_quadratic_model_has_zero_mean() {
        let params =
            ModelParams::new(0.0, vec![0.0, 0.0, 0.5], vec![0.0, 0.0, 0.5], 1.0).unwrap();
        let (sg, tg) = grids();
        let (h, big_h) = zero_fields(&tg);
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let s = member_observables(&params, &h, &big_h, &sg, 1000, &mut rng).unwrap();
        for i in 0..tg.len() {
            // The density mean is symmetric to solver precision.
            assert_abs_diff_eq!(s.mean[i], 0.0, epsilon = 1e-10);
            // The restoring drift keeps the variance below free diffusion.
            assert!(s.corr[(i, i)] <= tg.node(i) + 3.0 * s.diagnostics.corr_diag_stderr[i] + 1e-9);
        }
    }

    #[test]
    fn correlation_diagonal_matches_density_second_moment() {
        let params = ModelParams::default_quartic(0.0);
        let (sg, tg) = grids();
        let (h, big_h) = zero_fields(&tg);
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let s = member_observables(&params, &h, &big_h, &sg, 4000, &mut rng).unwrap();

        // Independent route: second moment of the forward density.
        let drive = FieldPath::zeros(tg.clone());
        let weight = solve_weight_backward(&params, &drive, &sg).unwrap();
        let value = cole_hopf(&weight, DEFAULT_FLOOR_FRACTION).unwrap();
        let drift = drift_from_value(&value, DEFAULT_DRIFT_CAP);
        let fp = solve_density_forward(&drift, sg.center(), 0).unwrap();
        for i in [16usize, 32, 48, 64] {
            let density_m2 = density_moment(&fp.density, i, 2);
            let gap = (s.corr[(i, i)] - density_m2).abs();
            assert!(
                gap <= 3.0 * s.diagnostics.corr_diag_stderr[i] + 1e-3,
                "node {i}: particle {} vs density {density_m2}",
                s.corr[(i, i)]
            );
        }
    }

    #[test]
    fn particle_and_density_means_agree() {
        let params = ModelParams::default_quartic(0.0);
        let (sg, tg) = grids();
        let (h, big_h) = zero_fields(&tg);
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let s = member_observables(&params, &h, &big_h, &sg, 4000, &mut rng).unwrap();
        for i in (0..tg.len()).step_by(8) {
            let gap = (s.mean[i] - s.diagnostics.particle_mean[i]).abs();
            assert!(
                gap <= 3.0 * s.diagnostics.particle_mean_stderr[i] + 1e-3,
                "node {i}: density {} vs particles {}",
                s.mean[i],
                s.diagnostics.particle_mean[i]
            );
        }
    }

    #[test]
    fn second_moment_dominates_squared_mean() {
        let params = ModelParams::default_quartic(0.3);
        let (sg, tg) = grids();
        let kernel = crate::fields::TwoTimeKernel::from_fn(tg.clone(), |s, t| {
            0.2 * (s * t).sqrt() * (-(s - t).abs() / 0.3).exp()
        });
        let factor = crate::fields::psd_project(&kernel, 1e-10).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let h = factor.sample(&mut rng);
        let big_h = factor.sample(&mut rng);
        let s = member_observables(&params, &h, &big_h, &sg, 2000, &mut rng).unwrap();
        for i in 0..tg.len() {
            let tol = 3.0 * s.diagnostics.corr_diag_stderr[i] + 1e-9;
            assert!(
                s.corr[(i, i)] >= s.mean[i] * s.mean[i] - tol,
                "node {i}: corr {} vs mean^2 {}",
                s.corr[(i, i)],
                s.mean[i] * s.mean[i]
            );
        }
    }

    #[test]
    fn member_observables_is_deterministic() {
        let params = ModelParams::default_quartic(0.2);
        let (sg, tg) = grids();
        let (h, big_h) = zero_fields(&tg);
        let a = member_observables(
            &params,
            &h,
            &big_h,
            &sg,
            600,
            &mut ChaCha12Rng::seed_from_u64(9),
        )
        .unwrap();
        let b = member_observables(
            &params,
            &h,
            &big_h,
            &sg,
            600,
            &mut ChaCha12Rng::seed_from_u64(9),
        )
        .unwrap();
        assert_eq!(a.weight, b.weight);
        assert_eq!(a.mean, b.mean);
        assert_eq!(a.corr, b.corr);
    }

    #[test]
    fn rejects_small_ensemble() {
        let params = ModelParams::default_quartic(0.0);
        let (sg, tg) = grids();
        let (h, big_h) = zero_fields(&tg);
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        assert!(member_observables(&params, &h, &big_h, &sg, 100, &mut rng).is_err());
    }

    fn synthetic_sample(weight: f64, level: f64, nodes: usize) -> MemberSample {
        MemberSample {
            weight,
            mean: DVector::from_element(nodes, level),
            corr: DMatrix::from_element(nodes, nodes, level * level),
            diagnostics: MemberDiagnostics {
                masked_nodes: 0,
                mass_error: 0.0,
                boundary_mass: 0.0,
                particle_mean: DVector::zeros(nodes),
                particle_mean_stderr: DVector::zeros(nodes),
                corr_diag_stderr: DVector::zeros(nodes),
            },
        }
    }

    #[test]
    fn equal_weights_reduce_to_plain_mean() {
        let samples = vec![
            synthetic_sample(0.4, 1.0, 5),
            synthetic_sample(0.4, 3.0, 5),
        ];
        let pop = population_average(&samples).unwrap();
        assert_abs_diff_eq!(pop.mean[2], 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(pop.corr[(1, 3)], 5.0, epsilon = 1e-14);
        assert_abs_diff_eq!(pop.normalization, 0.4, epsilon = 1e-15);
        assert_abs_diff_eq!(pop.ess, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn single_sample_passes_through() {
        let samples = vec![synthetic_sample(0.7, 1.5, 4)];
        let pop = population_average(&samples).unwrap();
        assert_eq!(pop.mean[0], 1.5);
        assert_abs_diff_eq!(pop.ess, 1.0, epsilon = 1e-14);
    }

    #[test]
    fn zero_weights_collapse() {
        let samples = vec![synthetic_sample(0.0, 1.0, 3), synthetic_sample(0.0, 2.0, 3)];
        assert!(matches!(
            population_average(&samples),
            Err(Error::WeightCollapse)
        ));
        assert!(population_average(&[]).is_err());
    }

    #[test]
    fn zero_coupling_gives_equal_weights_and_full_ess() {
        // At zero coupling the drive ignores the fields, so every sample has
        // the same weight and the average is plain.
        let params = ModelParams::default_quartic(0.0);
        let (sg, tg) = grids();
        let kernel =
            crate::fields::TwoTimeKernel::from_fn(tg.clone(), |s, t| (-(s - t).abs()).exp());
        let factor = crate::fields::psd_project(&kernel, 1e-10).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let outer = FieldPath::zeros(tg.clone());
        let mut samples = Vec::new();
        for _ in 0..3 {
            let h = factor.sample(&mut rng);
            samples.push(member_observables(&params, &h, &outer, &sg, 500, &mut rng).unwrap());
        }
        let pop = population_average(&samples).unwrap();
        assert_eq!(samples[0].weight, samples[1].weight);
        assert_eq!(samples[1].weight, samples[2].weight);
        assert_abs_diff_eq!(pop.ess, 3.0, epsilon = 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        /// Weighted averages stay inside the per-sample envelope.
        #[test]
        fn weighted_average_is_bounded(
            weights in proptest::collection::vec(0.01f64..10.0, 2..6),
            levels in proptest::collection::vec(-5.0f64..5.0, 2..6),
        ) {
            let k = weights.len().min(levels.len());
            let samples: Vec<MemberSample> = (0..k)
                .map(|i| synthetic_sample(weights[i], levels[i], 3))
                .collect();
            let pop = population_average(&samples).unwrap();
            let lo = levels[..k].iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = levels[..k].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(pop.mean[0] >= lo - 1e-12 && pop.mean[0] <= hi + 1e-12);
            // Correlation entries are level^2 here.
            let lo2 = levels[..k].iter().map(|l| l * l).fold(f64::INFINITY, f64::min);
            let hi2 = levels[..k].iter().map(|l| l * l).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(pop.corr[(1, 2)] >= lo2 - 1e-12 && pop.corr[(1, 2)] <= hi2 + 1e-12);
            // Exact symmetry by construction.
            prop_assert_eq!(pop.corr[(0, 2)], pop.corr[(2, 0)]);
            prop_assert!(pop.ess >= 1.0 - 1e-12 && pop.ess <= k as f64 + 1e-12);
        }
    }
}
