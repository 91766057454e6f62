//! Two-time covariance kernels and Gaussian field sampling.
//!
//! Kernels estimated by Monte Carlo are generally indefinite, so before
//! sampling they are repaired by eigenvalue clipping. The repaired matrix is
//! factored as `R R^T`; multiplying `R` by a standard normal vector yields a
//! field path with the repaired covariance.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::TimeGrid;

/// Default relative jitter added to repaired covariances.
pub const DEFAULT_JITTER: f64 = 1e-10;

/// Symmetric kernel K(t, t') sampled on the nodes of a time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoTimeKernel {
    grid: TimeGrid,
    values: DMatrix<f64>,
}

impl TwoTimeKernel {
    /// Wraps a matrix as a kernel, checking shape, symmetry and finiteness.
    pub fn new(grid: TimeGrid, values: DMatrix<f64>) -> Result<Self> {
        let n = grid.len();
        if values.nrows() != n || values.ncols() != n {
            return Err(Error::GridMismatch(format!(
                "kernel is {}x{}, grid has {} nodes",
                values.nrows(),
                values.ncols(),
                n
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "kernel contains non-finite entries".into(),
            ));
        }
        let max_asymmetry = max_asymmetry(&values);
        let scale = values.amax().max(1.0);
        if max_asymmetry > 1e-12 * scale {
            return Err(Error::NotSymmetric { max_asymmetry });
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: TimeGrid) -> Self {
        let n = grid.len();
        Self {
            grid,
            values: DMatrix::zeros(n, n),
        }
    }

    /// Builds K(i, j) = f(t_i, t_j), symmetrized exactly.
    pub fn from_fn(grid: TimeGrid, f: impl Fn(f64, f64) -> f64) -> Self {
        let n = grid.len();
        let mut values = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = f(grid.node(i), grid.node(j));
                values[(i, j)] = v;
                values[(j, i)] = v;
            }
        }
        Self { grid, values }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[(i, j)]
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.values.amax()
    }

    /// Entrywise difference, the covariance of the inner field.
    pub fn difference(&self, other: &Self) -> Result<Self> {
        if self.grid != other.grid {
            return Err(Error::GridMismatch(
                "kernel difference across different time grids".into(),
            ));
        }
        Ok(Self {
            grid: self.grid.clone(),
            values: &self.values - &other.values,
        })
    }

    /// Max-norm distance to another kernel on the same grid.
    pub fn max_distance(&self, other: &Self) -> f64 {
        (&self.values - &other.values).amax()
    }

    /// Writes the kernel as CSV: first row the grid times, then the full
    /// symmetric matrix row by row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        write_row(&mut out, &self.grid.nodes());
        for i in 0..self.values.nrows() {
            let row: Vec<f64> = (0..self.values.ncols()).map(|j| self.values[(i, j)]).collect();
            write_row(&mut out, &row);
        }
        fs::write(path, out)?;
        Ok(())
    }

    /// Reads a kernel written by [`Self::write_csv`], reconstructing the time
    /// grid from the header row.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let name = path.display().to_string();
        let mut rows = text.lines().filter(|l| !l.trim().is_empty());
        let times = parse_row(rows.next().ok_or_else(|| Error::Parse {
            path: name.clone(),
            message: "empty file".into(),
        })?, &name)?;
        if times.len() < 3 {
            return Err(Error::Parse {
                path: name,
                message: "header must hold at least 3 time nodes".into(),
            });
        }
        let steps = times.len() - 1;
        let horizon = times[steps];
        let grid = TimeGrid::new(horizon, steps)?;
        for (i, &t) in times.iter().enumerate() {
            if (t - grid.node(i)).abs() > 1e-9 * horizon.max(1.0) {
                return Err(Error::Parse {
                    path: name,
                    message: format!("non-uniform time node {i}: {t}"),
                });
            }
        }
        let mut values = DMatrix::zeros(times.len(), times.len());
        let mut count = 0;
        for (i, line) in rows.enumerate() {
            let row = parse_row(line, &name)?;
            if i >= times.len() || row.len() != times.len() {
                return Err(Error::Parse {
                    path: name,
                    message: format!("row {i} has wrong length"),
                });
            }
            for (j, &v) in row.iter().enumerate() {
                values[(i, j)] = v;
            }
            count += 1;
        }
        if count != times.len() {
            return Err(Error::Parse {
                path: name,
                message: format!("expected {} matrix rows, found {count}", times.len()),
            });
        }
        Self::new(grid, values)
    }
}

fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut max = 0.0f64;
    for i in 0..m.nrows() {
        for j in 0..i {
            max = max.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    max
}

fn write_row(out: &mut String, row: &[f64]) {
    for (j, v) in row.iter().enumerate() {
        if j > 0 {
            out.push(',');
        }
        // `{}` prints the shortest representation that round-trips.
        let _ = write!(out, "{v}");
    }
    out.push('\n');
}

fn parse_row(line: &str, path: &str) -> Result<Vec<f64>> {
    line.split(',')
        .map(|tok| {
            tok.trim().parse::<f64>().map_err(|e| Error::Parse {
                path: path.to_string(),
                message: format!("bad float {tok:?}: {e}"),
            })
        })
        .collect()
}

/// One realization of a Gaussian field on the time grid nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldPath {
    grid: TimeGrid,
    values: DVector<f64>,
}

impl FieldPath {
    pub fn new(grid: TimeGrid, values: DVector<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "path has {} values, grid has {} nodes",
                values.len(),
                grid.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "field path contains non-finite entries".into(),
            ));
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: TimeGrid) -> Self {
        let n = grid.len();
        Self {
            grid,
            values: DVector::zeros(n),
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn at(&self, i: usize) -> f64 {
        self.values[i]
    }

    pub fn values(&self) -> &[f64] {
        self.values.as_slice()
    }

    /// coupling * (inner + outer): the linear drive entering the 1D solves.
    pub fn combine_drive(coupling: f64, inner: &FieldPath, outer: &FieldPath) -> Result<FieldPath> {
        if inner.grid != outer.grid {
            return Err(Error::GridMismatch(
                "inner and outer fields on different grids".into(),
            ));
        }
        Ok(FieldPath {
            grid: inner.grid.clone(),
            values: (&inner.values + &outer.values) * coupling,
        })
    }
}

/// Factor `R` of a PSD-repaired covariance, with repair diagnostics.
#[derive(Debug, Clone)]
pub struct CovarianceFactor {
    grid: TimeGrid,
    root: DMatrix<f64>,
    repaired: DMatrix<f64>,
    clipped_mass: f64,
}

impl CovarianceFactor {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// Matrix root `R` with `R R^T` equal to the repaired covariance.
    pub fn root(&self) -> &DMatrix<f64> {
        &self.root
    }

    /// The PSD-repaired covariance matrix itself.
    pub fn repaired(&self) -> &DMatrix<f64> {
        &self.repaired
    }

    /// Fraction of spectral mass removed by clipping:
    /// sum |negative eigenvalues| / sum |eigenvalues|.
    pub fn clipped_mass(&self) -> f64 {
        self.clipped_mass
    }

    /// Draws one field path `R z` with `z` i.i.d. standard normal.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> FieldPath {
        let n = self.root.nrows();
        let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        FieldPath {
            grid: self.grid.clone(),
            values: &self.root * z,
        }
    }
}

/// Repairs a symmetric kernel to positive semidefinite form and factors it.
///
/// Negative eigenvalues are clipped to zero and `jitter * max_eigenvalue` is
/// added to the whole spectrum. The clipped spectral mass is reported so
/// callers can tell a healthy kernel (noise-level repair) from a broken one.
pub fn psd_project(kernel: &TwoTimeKernel, jitter: f64) -> Result<CovarianceFactor> {
    let n = kernel.values.nrows();
    let eig = kernel
        .values
        .clone()
        .symmetric_eigen();

    let max_eig = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    let abs_sum: f64 = eig.eigenvalues.iter().map(|l| l.abs()).sum();
    let neg_sum: f64 = eig.eigenvalues.iter().filter(|l| **l < 0.0).map(|l| -*l).sum();
    let clipped_mass = if abs_sum > 0.0 { neg_sum / abs_sum } else { 0.0 };

    let shift = jitter * max_eig;
    let clipped = DVector::from_fn(n, |i, _| eig.eigenvalues[i].max(0.0) + shift);
    let scaled = {
        let mut m = eig.eigenvectors.clone();
        for j in 0..n {
            let s = clipped[j].sqrt();
            m.column_mut(j).scale_mut(s);
        }
        m
    };
    let repaired = {
        let mut m = eig.eigenvectors.clone();
        for j in 0..n {
            m.column_mut(j).scale_mut(clipped[j]);
        }
        let prod = &m * eig.eigenvectors.transpose();
        // Symmetrize away floating point asymmetry from the reconstruction.
        (&prod + prod.transpose()) * 0.5
    };

    Ok(CovarianceFactor {
        grid: kernel.grid.clone(),
        root: scaled,
        repaired,
        clipped_mass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn grid(steps: usize) -> TimeGrid {
        TimeGrid::new(1.0, steps).unwrap()
    }

    #[test]
    fn difference_rules() {
        let g = grid(4);
        let d = TwoTimeKernel::from_fn(g.clone(), |s, t| 1.0 + s * t);
        let z = TwoTimeKernel::zeros(g.clone());

        let dd = d.difference(&d).unwrap();
        assert_eq!(dd.max_abs(), 0.0);

        let dz = d.difference(&z).unwrap();
        assert_eq!(dz.values(), d.values());

        let f = TwoTimeKernel::from_fn(g, |s, t| (s - t).cos());
        let diff = d.difference(&f).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(diff.at(i, j), d.at(i, j) - f.at(i, j));
            }
        }

        let other = TwoTimeKernel::zeros(grid(8));
        assert!(d.difference(&other).is_err());
    }

    #[test]
    fn rejects_asymmetric() {
        let g = grid(2);
        let mut m = DMatrix::zeros(3, 3);
        m[(0, 1)] = 1.0;
        assert!(matches!(
            TwoTimeKernel::new(g, m),
            Err(Error::NotSymmetric { .. })
        ));
    }

    #[test]
    fn psd_project_identity() {
        let g = grid(3);
        let k = TwoTimeKernel::from_fn(g, |s, t| if s == t { 1.0 } else { 0.0 });
        let f = psd_project(&k, 1e-10).unwrap();
        assert_eq!(f.clipped_mass(), 0.0);
        let rec = f.root() * f.root().transpose();
        for i in 0..4 {
            for j in 0..4 {
                let expect = if i == j { 1.0 + 1e-10 } else { 0.0 };
                assert_abs_diff_eq!(rec[(i, j)], expect, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn psd_project_clips_small_negative() {
        let g = TimeGrid::new(1.0, 2).unwrap();
        let mut m = DMatrix::zeros(3, 3);
        m[(0, 0)] = 1.0;
        m[(1, 1)] = -1e-9;
        m[(2, 2)] = 1.0;
        let k = TwoTimeKernel::new(g, m).unwrap();
        let f = psd_project(&k, 0.0).unwrap();
        assert_abs_diff_eq!(f.clipped_mass(), 1e-9 / (2.0 + 1e-9), epsilon = 1e-12);
        assert!(f.repaired()[(1, 1)] >= 0.0);
    }

    #[test]
    fn psd_project_keeps_gram_matrix() {
        // A Gram matrix built by brute force is PSD; projection must keep it.
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let g = grid(8);
        let n = g.len();
        let raw = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let gram = &raw * raw.transpose();
        let k = TwoTimeKernel::new(g, gram.clone()).unwrap();
        let f = psd_project(&k, 1e-10).unwrap();
        assert!(f.clipped_mass() < 1e-12);
        let jitter_allow = 2.0 * 1e-10 * gram.symmetric_eigen().eigenvalues.amax();
        assert!((f.repaired() - &gram).amax() <= jitter_allow + 1e-10);
    }

    #[test]
    fn reconstruction_matches_repaired() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let g = grid(16);
        let n = g.len();
        let raw = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let sym = (&raw + raw.transpose()) * 0.5; // indefinite
        let k = TwoTimeKernel::new(g, sym).unwrap();
        let f = psd_project(&k, 1e-10).unwrap();
        let rec = f.root() * f.root().transpose();
        let scale = f.repaired().amax();
        assert!((rec - f.repaired()).amax() <= 1e-10 * scale.max(1.0));
        assert!(f.clipped_mass() > 0.0);
    }

    #[test]
    fn zero_kernel_samples_zero_path() {
        let g = grid(4);
        let f = psd_project(&TwoTimeKernel::zeros(g), 1e-10).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let path = f.sample(&mut rng);
        assert!(path.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let g = grid(8);
        let k = TwoTimeKernel::from_fn(g, |s, t| (-(s - t).abs()).exp());
        let f = psd_project(&k, 1e-10).unwrap();
        let a = f.sample(&mut ChaCha12Rng::seed_from_u64(42));
        let b = f.sample(&mut ChaCha12Rng::seed_from_u64(42));
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kernel.csv");
        let g = grid(6);
        let k = TwoTimeKernel::from_fn(g, |s, t| 0.3 * (-(s - t).abs() / 0.2).exp() + s * t);
        k.write_csv(&path).unwrap();
        let back = TwoTimeKernel::read_csv(&path).unwrap();
        assert_eq!(back.grid(), k.grid());
        assert_eq!(back.values(), k.values());
    }

    #[test]
    fn csv_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "0,0.5,1\n1,2\n").unwrap();
        assert!(TwoTimeKernel::read_csv(&path).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        /// Applying the projection twice moves the product by at most
        /// 2 * jitter * max eigenvalue.
        #[test]
        fn psd_project_idempotent(seed in 0u64..1000) {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let g = grid(6);
            let n = g.len();
            let raw = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
            let sym = (&raw + raw.transpose()) * 0.5;
            let k = TwoTimeKernel::new(g.clone(), sym).unwrap();
            let jitter = 1e-10;
            let once = psd_project(&k, jitter).unwrap();
            let again = psd_project(
                &TwoTimeKernel::new(g, once.repaired().clone()).unwrap(),
                jitter,
            ).unwrap();
            let max_eig = once
                .repaired()
                .clone()
                .symmetric_eigen()
                .eigenvalues
                .amax();
            let moved = (again.repaired() - once.repaired()).amax();
            prop_assert!(moved <= 2.0 * jitter * max_eig + 1e-12);
        }
    }
}
