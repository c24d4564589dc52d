//! Matrix-valued functions of time sampled on a uniform grid over `[0, T]`.
//!
//! A [`MatrixFunction`] always carries its node samples. It may additionally
//! carry an exact evaluator (and an exact derivative) when it comes from an
//! analytic family; the ODE solvers use the exact evaluator at Runge-Kutta
//! midpoints and fall back to linear interpolation otherwise.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matcore::Mat;

pub type MatFn = Arc<dyn Fn(f64) -> Mat + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::PreconditionViolated(format!(
                "horizon must be positive and finite, got {horizon}"
            )));
        }
        if steps == 0 {
            return Err(Error::PreconditionViolated("grid needs at least one step".into()));
        }
        Ok(Self { horizon, steps })
    }

    #[inline]
    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    #[inline]
    pub fn steps(&self) -> usize {
        self.steps
    }

    #[inline]
    pub fn nodes(&self) -> usize {
        self.steps + 1
    }

    #[inline]
    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    #[inline]
    pub fn time(&self, i: usize) -> f64 {
        if i == self.steps {
            self.horizon
        } else {
            i as f64 * self.dt()
        }
    }

    /// The grid with `factor` times as many steps over the same horizon.
    pub fn refined(&self, factor: usize) -> Self {
        Self {
            horizon: self.horizon,
            steps: self.steps * factor,
        }
    }

    /// Index of the node at time `t`, if `t` is a node up to `1e-9 * dt`.
    pub fn node_index(&self, t: f64) -> Option<usize> {
        let x = t / self.dt();
        let i = x.round();
        if i < 0.0 || i > self.steps as f64 || (x - i).abs() > 1e-9 {
            return None;
        }
        Some(i as usize)
    }

    /// Composite trapezoid weights for nodes `a..=b` (empty interval gives zeros).
    pub fn trapezoid_weights(&self, a: usize, b: usize) -> Vec<f64> {
        let mut w = vec![self.dt(); b + 1 - a];
        if a == b {
            w[0] = 0.0;
        } else {
            w[0] *= 0.5;
            w[b - a] *= 0.5;
        }
        w
    }

    pub fn check_same(&self, other: &TimeGrid) -> Result<()> {
        if self != other {
            return Err(Error::GridMismatch(format!(
                "grid (T={}, n={}) vs (T={}, n={})",
                self.horizon, self.steps, other.horizon, other.steps
            )));
        }
        Ok(())
    }
}

/// What a matrix function stands for in a problem; informational only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Chi,
    Sigma,
    Gamma,
    Kappa,
    S,
    A,
    Alpha,
    Generic,
}

#[derive(Clone)]
pub struct MatrixFunction {
    grid: TimeGrid,
    dim: usize,
    samples: Vec<Mat>,
    role: Role,
    exact: Option<MatFn>,
    exact_derivative: Option<MatFn>,
}

impl fmt::Debug for MatrixFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MatrixFunction")
            .field("grid", &self.grid)
            .field("dim", &self.dim)
            .field("role", &self.role)
            .field("exact", &self.exact.is_some())
            .field("exact_derivative", &self.exact_derivative.is_some())
            .finish_non_exhaustive()
    }
}

impl MatrixFunction {
    pub fn from_samples(grid: TimeGrid, samples: Vec<Mat>, role: Role) -> Result<Self> {
        if samples.len() != grid.nodes() {
            return Err(Error::GridMismatch(format!(
                "{} samples for a grid with {} nodes",
                samples.len(),
                grid.nodes()
            )));
        }
        let dim = samples[0].dim();
        if samples.iter().any(|m| m.dim() != dim) {
            return Err(Error::Spec("samples have inconsistent dimensions".into()));
        }
        Ok(Self {
            grid,
            dim,
            samples,
            role,
            exact: None,
            exact_derivative: None,
        })
    }

    /// Samples `f` at the nodes without remembering it.
    pub fn sampled(grid: TimeGrid, f: impl Fn(f64) -> Mat, role: Role) -> Self {
        let samples: Vec<Mat> = (0..grid.nodes()).map(|i| f(grid.time(i))).collect();
        let dim = samples[0].dim();
        Self {
            grid,
            dim,
            samples,
            role,
            exact: None,
            exact_derivative: None,
        }
    }

    /// An analytic function: sampled at nodes and evaluated exactly in between.
    pub fn analytic(grid: TimeGrid, f: MatFn, derivative: Option<MatFn>, role: Role) -> Self {
        let mut out = Self::sampled(grid, |t| f(t), role);
        out.exact = Some(f);
        out.exact_derivative = derivative;
        out
    }

    pub fn constant(grid: TimeGrid, m: Mat, role: Role) -> Self {
        let d = m.dim();
        let value = m.clone();
        Self::analytic(
            grid,
            Arc::new(move |_| value.clone()),
            Some(Arc::new(move |_| Mat::zeros(d))),
            role,
        )
    }

    pub fn zeros(grid: TimeGrid, dim: usize, role: Role) -> Self {
        Self::constant(grid, Mat::zeros(dim), role)
    }

    #[inline]
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn role(&self) -> Role {
        self.role
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    /// Attaches an exact derivative, e.g. one known in closed form from the problem data.
    pub fn with_exact_derivative(mut self, derivative: MatFn) -> Self {
        self.exact_derivative = Some(derivative);
        self
    }

    #[inline]
    pub fn samples(&self) -> &[Mat] {
        &self.samples
    }

    #[inline]
    pub fn at(&self, i: usize) -> &Mat {
        &self.samples[i]
    }

    pub fn is_exact(&self) -> bool {
        self.exact.is_some()
    }

    pub fn derivative_is_exact(&self) -> bool {
        self.exact_derivative.is_some()
    }

    /// Value at time `t`: exact when available, else linear interpolation between nodes.
    pub fn eval(&self, t: f64) -> Mat {
        if let Some(f) = &self.exact {
            return f(t);
        }
        let dt = self.grid.dt();
        let x = (t / dt).clamp(0.0, self.grid.steps as f64);
        let i = (x.floor() as usize).min(self.grid.steps - 1);
        let frac = x - i as f64;
        if frac == 0.0 {
            return self.samples[i].clone();
        }
        self.samples[i].scale(1.0 - frac).axpy(frac, &self.samples[i + 1])
    }

    /// `max_i |f(t_i)|`, the grid approximation of the sup norm.
    pub fn sup_norm(&self) -> f64 {
        self.samples.iter().fold(0.0_f64, |m, s| m.max(s.frob_norm()))
    }

    /// Composite trapezoid rule over nodes `a..=b`.
    pub fn trapezoid_integral(&self, a: usize, b: usize) -> Mat {
        assert!(a <= b && b <= self.grid.steps, "invalid integration range");
        let mut acc = Mat::zeros(self.dim);
        for (w, m) in self.grid.trapezoid_weights(a, b).iter().zip(&self.samples[a..=b]) {
            acc = acc.axpy(*w, m);
        }
        acc
    }

    /// `t -> int_t^T f(u) du` by cumulative trapezoid from the right; zero at `T`.
    pub fn tail_integral(&self) -> MatrixFunction {
        let n = self.grid.steps;
        let half = 0.5 * self.grid.dt();
        let mut out = vec![Mat::zeros(self.dim); n + 1];
        for i in (0..n).rev() {
            out[i] = out[i + 1]
                .axpy(half, &self.samples[i])
                .axpy(half, &self.samples[i + 1]);
        }
        Self::from_samples(self.grid, out, Role::Generic).expect("grid-consistent samples")
    }

    /// Time derivative: exact when supplied, otherwise second-order finite differences
    /// (central inside, one-sided at the ends; exact for quadratics).
    pub fn derivative(&self) -> MatrixFunction {
        if let Some(df) = &self.exact_derivative {
            let mut out = Self::sampled(self.grid, |t| df(t), Role::Generic);
            out.exact = Some(df.clone());
            return out;
        }
        let n = self.grid.steps;
        assert!(n >= 2, "finite-difference derivative needs at least two steps");
        let inv = 1.0 / (2.0 * self.grid.dt());
        let f = &self.samples;
        let mut out = Vec::with_capacity(n + 1);
        out.push(f[0].scale(-3.0).axpy(4.0, &f[1]).axpy(-1.0, &f[2]).scale(inv));
        for i in 1..n {
            out.push((&f[i + 1] - &f[i - 1]).scale(inv));
        }
        out.push(f[n].scale(3.0).axpy(-4.0, &f[n - 1]).axpy(1.0, &f[n - 2]).scale(inv));
        Self::from_samples(self.grid, out, Role::Generic).expect("grid-consistent samples")
    }

    /// Applies a linear map `L` pointwise, to the exact evaluator and to the exact derivative.
    pub fn linear_map(&self, l: impl Fn(&Mat) -> Mat + Send + Sync + Clone + 'static) -> MatrixFunction {
        let samples = self.samples.iter().map(&l).collect();
        let exact = self.exact.as_ref().map(|f| {
            let (f, l) = (f.clone(), l.clone());
            Arc::new(move |t| l(&f(t))) as MatFn
        });
        let exact_derivative = self.exact_derivative.as_ref().map(|f| {
            let (f, l) = (f.clone(), l.clone());
            Arc::new(move |t| l(&f(t))) as MatFn
        });
        MatrixFunction {
            grid: self.grid,
            dim: self.dim,
            samples,
            role: Role::Generic,
            exact,
            exact_derivative,
        }
    }

    pub fn scaled(&self, c: f64) -> MatrixFunction {
        self.linear_map(move |m| m.scale(c)).with_role(self.role)
    }

    pub fn transpose(&self) -> MatrixFunction {
        self.linear_map(Mat::transpose)
    }

    pub fn sym_part(&self) -> MatrixFunction {
        self.linear_map(Mat::sym_part)
    }

    pub fn antisym_part(&self) -> MatrixFunction {
        self.linear_map(Mat::antisym_part)
    }

    /// Pointwise `f(self, other)` on the nodes; keeps an exact evaluator when both sides have one.
    pub fn zip_with(
        &self,
        other: &MatrixFunction,
        f: impl Fn(&Mat, &Mat) -> Mat + Send + Sync + Clone + 'static,
    ) -> Result<MatrixFunction> {
        self.grid.check_same(&other.grid)?;
        let samples = self.samples.iter().zip(&other.samples).map(|(a, b)| f(a, b)).collect();
        let exact = match (&self.exact, &other.exact) {
            (Some(a), Some(b)) => {
                let (a, b, f) = (a.clone(), b.clone(), f.clone());
                Some(Arc::new(move |t| f(&a(t), &b(t))) as MatFn)
            }
            _ => None,
        };
        let mut out = Self::from_samples(self.grid, samples, Role::Generic)?;
        out.exact = exact;
        Ok(out)
    }

    /// `self + other`, keeping exact values and exact derivatives where both sides have them.
    pub fn add(&self, other: &MatrixFunction) -> Result<MatrixFunction> {
        let mut out = self.zip_with(other, |a, b| a + b)?;
        if let (Some(da), Some(db)) = (&self.exact_derivative, &other.exact_derivative) {
            let (da, db) = (da.clone(), db.clone());
            out.exact_derivative = Some(Arc::new(move |t| &da(t) + &db(t)));
        }
        Ok(out)
    }

    pub fn sub(&self, other: &MatrixFunction) -> Result<MatrixFunction> {
        self.add(&other.scaled(-1.0))
    }

    /// `tau -> f(T - tau)`, the substitution that turns terminal-value problems into initial-value ones.
    pub fn time_reversed(&self) -> MatrixFunction {
        let horizon = self.grid.horizon;
        let samples = self.samples.iter().rev().cloned().collect();
        let exact = self.exact.as_ref().map(|f| {
            let f = f.clone();
            Arc::new(move |t: f64| f(horizon - t)) as MatFn
        });
        let exact_derivative = self.exact_derivative.as_ref().map(|f| {
            let f = f.clone();
            Arc::new(move |t: f64| f(horizon - t).scale(-1.0)) as MatFn
        });
        MatrixFunction {
            grid: self.grid,
            dim: self.dim,
            samples,
            role: self.role,
            exact,
            exact_derivative,
        }
    }

    /// Re-samples on another grid over the same horizon via [`MatrixFunction::eval`].
    pub fn resample(&self, grid: TimeGrid) -> Result<MatrixFunction> {
        if (grid.horizon - self.grid.horizon).abs() > 1e-12 * self.grid.horizon {
            return Err(Error::GridMismatch("resampling across different horizons".into()));
        }
        let mut out = Self::sampled(grid, |t| self.eval(t), self.role);
        out.exact = self.exact.clone();
        out.exact_derivative = self.exact_derivative.clone();
        Ok(out)
    }

    /// Scalar function `t -> tr f(t)` sampled on the nodes.
    pub fn traces(&self) -> Vec<f64> {
        self.samples.iter().map(Mat::trace).collect()
    }
}

/// Composite trapezoid rule for scalar node samples over the whole grid.
pub fn trapezoid_scalar(grid: &TimeGrid, values: &[f64]) -> f64 {
    debug_assert_eq!(values.len(), grid.nodes());
    let n = grid.steps();
    let inner: f64 = values[1..n].iter().sum();
    grid.dt() * (inner + 0.5 * (values[0] + values[n]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit_grid(n: usize) -> TimeGrid {
        TimeGrid::new(1.0, n).unwrap()
    }

    fn scalar_fn(grid: TimeGrid, f: impl Fn(f64) -> f64) -> MatrixFunction {
        MatrixFunction::sampled(grid, |t| Mat::scalar(1, f(t)), Role::Generic)
    }

    #[test]
    fn grid_rejects_bad_input() {
        assert!(TimeGrid::new(0.0, 10).is_err());
        assert!(TimeGrid::new(1.0, 0).is_err());
        let g = unit_grid(100);
        assert_eq!(g.nodes(), 101);
        assert_eq!(g.time(100), 1.0);
        assert_eq!(g.node_index(0.25), Some(25));
        assert_eq!(g.node_index(0.255), None);
    }

    #[test]
    fn sup_norm_examples() {
        let g = unit_grid(100);
        assert_eq!(MatrixFunction::constant(g, Mat::scalar(1, 0.3), Role::Chi).sup_norm(), 0.3);
        assert_eq!(scalar_fn(g, |t| t).sup_norm(), 1.0);
        assert_eq!(MatrixFunction::zeros(g, 2, Role::Generic).sup_norm(), 0.0);
    }

    #[test]
    fn trapezoid_examples() {
        let g = TimeGrid::new(2.0, 64).unwrap();
        let c = Mat::from_row_major(2, vec![1.0, -2.0, 0.5, 3.0]);
        let got = MatrixFunction::constant(g, c.clone(), Role::Generic).trapezoid_integral(0, 64);
        assert!((&got - &c.scale(2.0)).max_abs() < 1e-14);

        let g = unit_grid(100);
        let lin = scalar_fn(g, |t| t).trapezoid_integral(0, 100);
        assert!((lin.get(0, 0) - 0.5).abs() < 1e-15);
        let quad = scalar_fn(g, |t| t * t).trapezoid_integral(0, 100);
        // (dt^2 / 12) * max|f''| = 1e-4 / 6
        assert!((quad.get(0, 0) - 1.0 / 3.0).abs() < 2e-5);
        assert_eq!(scalar_fn(g, |t| t).trapezoid_integral(7, 7).get(0, 0), 0.0);
    }

    #[test]
    fn derivative_examples() {
        let g = unit_grid(50);
        let d = MatrixFunction::sampled(g, |_| Mat::identity(2), Role::Generic).derivative();
        assert!(d.samples().iter().all(|m| m.max_abs() == 0.0));

        let m = Mat::from_row_major(2, vec![1.0, 2.0, -3.0, 0.5]);
        let lin = MatrixFunction::sampled(g, |t| m.scale(t), Role::Generic).derivative();
        assert!(lin.samples().iter().all(|s| (s - &m).max_abs() < 1e-12));

        let g = unit_grid(100);
        let sq = scalar_fn(g, |t| t * t).derivative();
        for i in 0..=100 {
            assert!((sq.at(i).get(0, 0) - 2.0 * g.time(i)).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_derivative_takes_precedence() {
        let g = unit_grid(10);
        let f = MatrixFunction::analytic(
            g,
            Arc::new(|t: f64| Mat::scalar(1, t.sin())),
            Some(Arc::new(|t: f64| Mat::scalar(1, t.cos()))),
            Role::Sigma,
        );
        let df = f.derivative();
        assert!(df.is_exact());
        assert_eq!(df.eval(0.333).get(0, 0), 0.333_f64.cos());
    }

    #[test]
    fn tail_integral_examples() {
        let g = TimeGrid::new(1.5, 30).unwrap();
        let c = Mat::from_row_major(2, vec![0.2, 1.0, -1.0, 0.4]);
        let tail = MatrixFunction::constant(g, c.clone(), Role::Generic).tail_integral();
        for i in 0..=30 {
            assert!((tail.at(i) - &c.scale(1.5 - g.time(i))).max_abs() < 1e-14);
        }
        assert_eq!(tail.at(30).max_abs(), 0.0);

        let zero = MatrixFunction::zeros(g, 3, Role::Generic).tail_integral();
        assert!(zero.samples().iter().all(|m| m.max_abs() == 0.0));

        let g = unit_grid(10);
        let one = MatrixFunction::constant(g, Mat::scalar(1, 1.0), Role::Generic).tail_integral();
        assert!((one.at(0).get(0, 0) - 1.0).abs() < 1e-15);
        assert!((one.at(5).get(0, 0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn derivative_of_tail_is_minus_integrand() {
        let m = Mat::from_row_major(2, vec![1.0, -0.5, 0.25, 2.0]);
        let mut errs = Vec::new();
        for n in [40, 80, 160] {
            let g = unit_grid(n);
            let f = MatrixFunction::sampled(g, |t| m.scale(t.sin()), Role::Generic);
            let back = f.tail_integral().derivative();
            let err = (0..=n)
                .map(|i| (back.at(i) + f.at(i)).frob_norm())
                .fold(0.0, f64::max);
            errs.push(err * (n * n) as f64);
        }
        // err <= C dt^2 with a stable C
        assert!(errs.iter().all(|c| *c < 2.0), "{errs:?}");
    }

    #[test]
    fn interpolation_between_nodes() {
        let g = unit_grid(4);
        let f = scalar_fn(g, |t| 3.0 * t + 1.0);
        assert!((f.eval(0.3).get(0, 0) - 1.9).abs() < 1e-14);
        assert_eq!(f.eval(1.0).get(0, 0), 4.0);
        let r = f.time_reversed();
        assert!((r.eval(0.3).get(0, 0) - (3.0 * 0.7 + 1.0)).abs() < 1e-14);
    }

    proptest! {
        #[test]
        fn trapezoid_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, k in 1usize..20) {
            let g = unit_grid(37);
            let f = MatrixFunction::sampled(g, |t| Mat::from_row_major(2, vec![t, t * t, (k as f64 * t).sin(), 1.0]), Role::Generic);
            let h = MatrixFunction::sampled(g, |t| Mat::from_row_major(2, vec![(t * 3.0).cos(), -t, 2.0, t.exp()]), Role::Generic);
            let combo = f.scaled(a).add(&h.scaled(b)).unwrap();
            let lhs = combo.trapezoid_integral(3, 30);
            let rhs = f.trapezoid_integral(3, 30).scale(a).axpy(b, &h.trapezoid_integral(3, 30));
            prop_assert!((&lhs - &rhs).max_abs() <= 1e-13);
        }
    }
}
