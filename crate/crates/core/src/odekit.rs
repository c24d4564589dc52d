//! Fixed-step classical Runge-Kutta integration of matrix-valued ODEs.
//!
//! Terminal-value problems are handled by the substitution `y(tau) = x(T - tau)`,
//! integrating the reversed system forward and then reindexing, so every
//! solution is returned on the original grid with sample `i` at `t_i`.

use crate::error::{Error, Result};
use crate::funcalc::{MatrixFunction, Role, TimeGrid};
use crate::matcore::Mat;

pub trait OdeState: Clone {
    /// `self + h * k`.
    fn axpy(&self, h: f64, k: &Self) -> Self;
    fn is_finite(&self) -> bool;
}

impl OdeState for Mat {
    fn axpy(&self, h: f64, k: &Self) -> Self {
        Mat::axpy(self, h, k)
    }

    fn is_finite(&self) -> bool {
        Mat::is_finite(self)
    }
}

/// The stacked `2d x d` state `(phi_1; phi_2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockState {
    pub upper: Mat,
    pub lower: Mat,
}

impl OdeState for BlockState {
    fn axpy(&self, h: f64, k: &Self) -> Self {
        BlockState {
            upper: self.upper.axpy(h, &k.upper),
            lower: self.lower.axpy(h, &k.lower),
        }
    }

    fn is_finite(&self) -> bool {
        self.upper.is_finite() && self.lower.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Initial value given at `t = 0`.
    Forward,
    /// Terminal value given at `t = T`.
    Backward,
}

/// Classical RK4 on the grid. The returned vector is indexed by grid node.
pub fn rk4_integrate<S, F>(rhs: F, initial: S, direction: Direction, grid: &TimeGrid) -> Result<Vec<S>>
where
    S: OdeState,
    F: Fn(f64, &S) -> S,
{
    let n = grid.steps();
    let h = grid.dt();
    let horizon = grid.horizon();
    let f = |tau: f64, y: &S| -> S {
        match direction {
            Direction::Forward => rhs(tau, y),
            Direction::Backward => {
                let k = rhs(horizon - tau, y);
                // -k
                k.axpy(-2.0, &k)
            }
        }
    };
    let mut out = Vec::with_capacity(n + 1);
    let mut y = initial;
    out.push(y.clone());
    for i in 0..n {
        let tau = grid.time(i);
        let k1 = f(tau, &y);
        let k2 = f(tau + 0.5 * h, &y.axpy(0.5 * h, &k1));
        let k3 = f(tau + 0.5 * h, &y.axpy(0.5 * h, &k2));
        let k4 = f(tau + h, &y.axpy(h, &k3));
        y = y
            .axpy(h / 6.0, &k1)
            .axpy(h / 3.0, &k2)
            .axpy(h / 3.0, &k3)
            .axpy(h / 6.0, &k4);
        if !y.is_finite() {
            let t = match direction {
                Direction::Forward => grid.time(i + 1),
                Direction::Backward => grid.time(n - i - 1),
            };
            return Err(Error::NonFinite { t });
        }
        out.push(y.clone());
    }
    if direction == Direction::Backward {
        out.reverse();
    }
    Ok(out)
}

/// RK4 for a single matrix unknown.
pub fn rk4_solve(
    rhs: impl Fn(f64, &Mat) -> Mat,
    initial: Mat,
    direction: Direction,
    grid: &TimeGrid,
) -> Result<MatrixFunction> {
    let samples = rk4_integrate(rhs, initial, direction, grid)?;
    MatrixFunction::from_samples(*grid, samples, Role::Generic)
}

/// `(phi_1; phi_2)' = [[g11, g12], [g21, g22]] (phi_1; phi_2)` with `(phi_1, phi_2)(0) = (xi_1, xi_2)`.
#[derive(Debug, Clone)]
pub struct BlockLinearSystem {
    grid: TimeGrid,
    pub g11: MatrixFunction,
    pub g12: MatrixFunction,
    pub g21: MatrixFunction,
    pub g22: MatrixFunction,
    pub xi1: Mat,
    pub xi2: Mat,
}

impl BlockLinearSystem {
    pub fn new(
        g11: MatrixFunction,
        g12: MatrixFunction,
        g21: MatrixFunction,
        g22: MatrixFunction,
        xi1: Mat,
        xi2: Mat,
    ) -> Result<Self> {
        let grid = *g11.grid();
        for g in [&g12, &g21, &g22] {
            grid.check_same(g.grid())?;
        }
        let d = g11.dim();
        if [g12.dim(), g21.dim(), g22.dim(), xi1.dim(), xi2.dim()].iter().any(|&x| x != d) {
            return Err(Error::PreconditionViolated(
                "block system coefficients must share one dimension".into(),
            ));
        }
        Ok(Self {
            grid,
            g11,
            g12,
            g21,
            g22,
            xi1,
            xi2,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }
}

/// Solves the coupled block system forward from `t = 0`.
pub fn solve_block(sys: &BlockLinearSystem) -> Result<(MatrixFunction, MatrixFunction)> {
    let rhs = |t: f64, s: &BlockState| {
        let (g11, g12, g21, g22) = (sys.g11.eval(t), sys.g12.eval(t), sys.g21.eval(t), sys.g22.eval(t));
        BlockState {
            upper: &(&g11 * &s.upper) + &(&g12 * &s.lower),
            lower: &(&g21 * &s.upper) + &(&g22 * &s.lower),
        }
    };
    let initial = BlockState {
        upper: sys.xi1.clone(),
        lower: sys.xi2.clone(),
    };
    let states = rk4_integrate(rhs, initial, Direction::Forward, &sys.grid)?;
    let (upper, lower): (Vec<Mat>, Vec<Mat>) = states.into_iter().map(|s| (s.upper, s.lower)).unzip();
    Ok((
        MatrixFunction::from_samples(sys.grid, upper, Role::Generic)?,
        MatrixFunction::from_samples(sys.grid, lower, Role::Generic)?,
    ))
}

/// Right-hand sides of the two Gronwall estimates for a block system:
/// a bound on `sup |phi_2|` and one on `sup |phi_1 - xi_1|`.
pub fn gronwall_bounds(sys: &BlockLinearSystem) -> (f64, f64) {
    let t = sys.grid.horizon();
    let (n11, n12, n21, n22) = (
        sys.g11.sup_norm(),
        sys.g12.sup_norm(),
        sys.g21.sup_norm(),
        sys.g22.sup_norm(),
    );
    let xi_sum = sys.xi1.frob_norm() + sys.xi2.frob_norm();
    let growth = (t * (n11 + n12 + n21 + n22)).exp();
    let phi2 = sys.xi2.frob_norm() + t * xi_sum * (n21 + n22) * growth;
    let phi1_dev = t * n11 * xi_sum * growth + t * n12 * phi2;
    (phi2, phi1_dev)
}
