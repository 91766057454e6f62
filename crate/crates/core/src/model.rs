//! Problem definition: model parameters, potentials, terminal cost and grids.

use nalgebra::DVector;

use crate::error::{Error, Result};

/// Physical definition of the control problem.
///
/// `potential` and `terminal` are polynomial coefficient lists ordered by
/// power. The local potential must be confining (even, strictly positive
/// leading term) or identically zero for the free case; the terminal cost
/// must be bounded below.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// Strength of the random pairwise couplings. Non-negative.
    pub coupling: f64,
    /// Coefficients of the local potential, ordered by power.
    pub potential: Vec<f64>,
    /// Coefficients of the terminal cost, ordered by power.
    pub terminal: Vec<f64>,
    /// Horizon time. Strictly positive.
    pub horizon: f64,
}

/// Index of the highest nonzero coefficient, if any.
fn leading_power(coeffs: &[f64]) -> Option<usize> {
    coeffs.iter().rposition(|&c| c != 0.0)
}

fn eval_poly(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}

impl ModelParams {
    pub fn new(
        coupling: f64,
        potential: Vec<f64>,
        terminal: Vec<f64>,
        horizon: f64,
    ) -> Result<Self> {
        if !(coupling >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "coupling must be >= 0, got {coupling}"
            )));
        }
        if !(horizon > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "horizon must be > 0, got {horizon}"
            )));
        }
        match leading_power(&potential) {
            // An identically zero potential is the free case.
            None => {}
            Some(p) if p >= 2 && p % 2 == 0 && potential[p] > 0.0 => {}
            Some(p) => {
                return Err(Error::InvalidParameter(format!(
                    "potential leading term x^{p} with coefficient {} is not confining",
                    potential[p]
                )));
            }
        }
        match leading_power(&terminal) {
            None => {}
            Some(0) => {}
            Some(p) if p % 2 == 0 && terminal[p] > 0.0 => {}
            Some(p) => {
                return Err(Error::InvalidParameter(format!(
                    "terminal cost leading term x^{p} with coefficient {} is unbounded below",
                    terminal[p]
                )));
            }
        }
        Ok(Self {
            coupling,
            potential,
            terminal,
            horizon,
        })
    }

    /// Default model: potential x^2/2 + x^4/24, terminal cost (x-1)^2/2,
    /// unit horizon.
    pub fn default_quartic(coupling: f64) -> Self {
        Self::new(
            coupling,
            vec![0.0, 0.0, 0.5, 0.0, 1.0 / 24.0],
            vec![0.5, -1.0, 0.5],
            1.0,
        )
        .expect("default parameters are valid")
    }

    /// Quadratic model: potential x^2/2, terminal cost (x-1)^2/2, unit
    /// horizon. This family has an exact finite-population Riccati solution.
    pub fn quadratic(coupling: f64) -> Self {
        Self::new(coupling, vec![0.0, 0.0, 0.5], vec![0.5, -1.0, 0.5], 1.0)
            .expect("quadratic parameters are valid")
    }

    /// Local potential at `x`.
    pub fn potential_at(&self, x: f64) -> f64 {
        eval_poly(&self.potential, x)
    }

    /// Terminal cost at `x`.
    pub fn terminal_at(&self, x: f64) -> f64 {
        eval_poly(&self.terminal, x)
    }

    /// exp(-terminal cost) on every space node; the terminal condition of the
    /// backward weight solve.
    pub fn terminal_weight(&self, grid: &SpaceGrid) -> DVector<f64> {
        DVector::from_fn(grid.len(), |k, _| (-self.terminal_at(grid.node(k))).exp())
    }

    /// Degree and coefficients (constant, linear, quadratic) if the potential
    /// is at most quadratic; `None` otherwise. Used by the Riccati oracle.
    pub fn quadratic_potential(&self) -> Option<[f64; 3]> {
        if leading_power(&self.potential).is_some_and(|p| p > 2) {
            return None;
        }
        let mut c = [0.0; 3];
        for (p, &v) in self.potential.iter().take(3).enumerate() {
            c[p] = v;
        }
        Some(c)
    }

    /// As [`Self::quadratic_potential`], for the terminal cost.
    pub fn quadratic_terminal(&self) -> Option<[f64; 3]> {
        if leading_power(&self.terminal).is_some_and(|p| p > 2) {
            return None;
        }
        let mut c = [0.0; 3];
        for (p, &v) in self.terminal.iter().take(3).enumerate() {
            c[p] = v;
        }
        Some(c)
    }
}

/// Uniform grid of `steps + 1` nodes on `[0, horizon]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "horizon must be > 0, got {horizon}"
            )));
        }
        if steps < 2 {
            return Err(Error::InvalidParameter(format!(
                "time grid needs at least 2 steps, got {steps}"
            )));
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Number of steps; the grid has `steps() + 1` nodes.
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Number of nodes.
    pub fn len(&self) -> usize {
        self.steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// Node `i`; `node(0) == 0` and `node(steps()) == horizon()` exactly.
    pub fn node(&self, i: usize) -> f64 {
        i as f64 * self.horizon / self.steps as f64
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.node(i)).collect()
    }
}

/// Uniform grid of an odd number of nodes on `[-half_width, half_width]`,
/// so that x = 0 is always a node.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceGrid {
    half_width: f64,
    nodes: usize,
}

impl SpaceGrid {
    pub fn new(half_width: f64, nodes: usize) -> Result<Self> {
        if !(half_width > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "half width must be > 0, got {half_width}"
            )));
        }
        if nodes < 3 || nodes % 2 == 0 {
            return Err(Error::InvalidParameter(format!(
                "space grid needs an odd node count >= 3, got {nodes}"
            )));
        }
        Ok(Self { half_width, nodes })
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    pub fn len(&self) -> usize {
        self.nodes
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dx(&self) -> f64 {
        2.0 * self.half_width / (self.nodes - 1) as f64
    }

    pub fn node(&self, k: usize) -> f64 {
        if k == self.center() {
            0.0
        } else {
            -self.half_width + k as f64 * 2.0 * self.half_width / (self.nodes - 1) as f64
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.nodes).map(|k| self.node(k)).collect()
    }

    /// Index of the x = 0 node.
    pub fn center(&self) -> usize {
        (self.nodes - 1) / 2
    }

    /// Index of the grid node closest to `x` (clamped to the domain).
    pub fn nearest_index(&self, x: f64) -> usize {
        let pos = (x + self.half_width) / self.dx();
        (pos.round().max(0.0) as usize).min(self.nodes - 1)
    }
}

/// Default domain half width.
pub const DEFAULT_HALF_WIDTH: f64 = 6.0;
/// Default space node count.
pub const DEFAULT_SPACE_NODES: usize = 241;
/// Default number of time steps.
pub const DEFAULT_TIME_STEPS: usize = 64;

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn default_potential_values() {
        let p = ModelParams::default_quartic(0.0);
        assert_eq!(p.potential_at(0.0), 0.0);
        assert_abs_diff_eq!(p.potential_at(1.0), 13.0 / 24.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p.potential_at(2.0), 2.0 + 16.0 / 24.0, epsilon = 1e-14);
    }

    #[test]
    fn default_terminal_values() {
        let p = ModelParams::default_quartic(0.0);
        assert_eq!(p.terminal_at(1.0), 0.0);
        assert_eq!(p.terminal_at(0.0), 0.5);
        assert_eq!(p.terminal_at(3.0), 2.0);
    }

    #[test]
    fn terminal_weight_values() {
        let p = ModelParams::default_quartic(0.0);
        let sg = SpaceGrid::new(2.0, 5).unwrap();
        let w = p.terminal_weight(&sg);
        // Nodes are -2, -1, 0, 1, 2.
        assert_abs_diff_eq!(w[3], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(w[2], (-0.5f64).exp(), epsilon = 1e-15);
        assert!(w.iter().all(|&v| v > 0.0 && v <= 1.0));

        let free = ModelParams::new(0.0, vec![], vec![], 1.0).unwrap();
        assert!(free.terminal_weight(&sg).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn rejects_invalid_parameters() {
        assert!(ModelParams::new(-0.1, vec![], vec![], 1.0).is_err());
        assert!(ModelParams::new(0.0, vec![], vec![], 0.0).is_err());
        // Odd leading power is not confining.
        assert!(ModelParams::new(0.0, vec![0.0, 1.0], vec![], 1.0).is_err());
        // Negative even leading coefficient is not confining.
        assert!(ModelParams::new(0.0, vec![0.0, 0.0, -1.0], vec![], 1.0).is_err());
        // Constant-only potential is not confining.
        assert!(ModelParams::new(0.0, vec![1.0], vec![], 1.0).is_err());
        // Terminal cost unbounded below.
        assert!(ModelParams::new(0.0, vec![], vec![0.0, -1.0, 0.0], 1.0).is_err());
        // Free potential and zero terminal cost are fine.
        assert!(ModelParams::new(0.0, vec![], vec![], 1.0).is_ok());
    }

    #[test]
    fn quadratic_views() {
        let p = ModelParams::quadratic(0.2);
        assert_eq!(p.quadratic_potential(), Some([0.0, 0.0, 0.5]));
        assert_eq!(p.quadratic_terminal(), Some([0.5, -1.0, 0.5]));
        let q = ModelParams::default_quartic(0.2);
        assert_eq!(q.quadratic_potential(), None);
        assert_eq!(q.quadratic_terminal(), Some([0.5, -1.0, 0.5]));
    }

    #[test]
    fn grids_validate() {
        assert!(TimeGrid::new(1.0, 1).is_err());
        assert!(TimeGrid::new(0.0, 8).is_err());
        assert!(SpaceGrid::new(6.0, 240).is_err());
        assert!(SpaceGrid::new(6.0, 1).is_err());
        assert!(SpaceGrid::new(-1.0, 241).is_err());
    }

    #[test]
    fn grid_endpoints_exact() {
        let tg = TimeGrid::new(0.7, 7).unwrap();
        assert_eq!(tg.node(0), 0.0);
        assert_eq!(tg.node(7), 0.7);
        let sg = SpaceGrid::new(6.0, 241).unwrap();
        assert_eq!(sg.node(0), -6.0);
        assert_eq!(sg.node(240), 6.0);
        assert_eq!(sg.node(sg.center()), 0.0);
    }

    proptest! {
        /// Any valid nonzero potential diverges far outside the domain.
        #[test]
        fn confinement_at_large_x(
            quad in 0.01f64..5.0,
            quart in proptest::option::of(0.01f64..2.0),
            lin in -3.0f64..3.0,
            half_width in 1.0f64..10.0,
        ) {
            let mut coeffs = vec![0.0, lin, quad];
            if let Some(q) = quart {
                coeffs.extend_from_slice(&[0.0, q]);
            }
            let p = ModelParams::new(0.0, coeffs, vec![], 1.0).unwrap();
            let far = 10.0 * half_width;
            prop_assert!(p.potential_at(far) > 1e3);
            prop_assert!(p.potential_at(-far) > 1e3);
        }

        #[test]
        fn space_grid_contains_zero(nodes in (1usize..200).prop_map(|k| 2 * k + 1),
                                    half_width in 0.5f64..20.0) {
            let sg = SpaceGrid::new(half_width, nodes).unwrap();
            prop_assert_eq!(sg.node(sg.center()), 0.0);
            prop_assert_eq!(sg.nearest_index(0.0), sg.center());
        }
    }
}
