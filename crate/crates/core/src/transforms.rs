//! Linear path transformations `w -> w - int_0^. chi(s) w(s) ds`, their explicit
//! inverse through the fundamental solution `alpha' = chi alpha, alpha(T) = I`,
//! and the smallness conditions that guarantee the whole construction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::funcalc::{MatrixFunction, Role, TimeGrid};
use crate::matcore::{k0_bound, Mat};
use crate::odekit::{rk4_solve, Direction};

/// A sampled `R^d`-valued path on the grid, starting at the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct WienerPath {
    grid: TimeGrid,
    dim: usize,
    values: Vec<f64>,
}

impl WienerPath {
    /// Node values in node-major order (`values[i * d + k]` is coordinate `k` at `t_i`).
    pub fn new(grid: TimeGrid, dim: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.nodes() * dim {
            return Err(Error::GridMismatch(format!(
                "{} path values for {} nodes in dimension {dim}",
                values.len(),
                grid.nodes()
            )));
        }
        if values[..dim].iter().any(|v| *v != 0.0) {
            return Err(Error::PreconditionViolated("paths must start at the origin".into()));
        }
        Ok(Self { grid, dim, values })
    }

    pub fn from_increments(grid: TimeGrid, dim: usize, increments: &[f64]) -> Result<Self> {
        if increments.len() != grid.steps() * dim {
            return Err(Error::GridMismatch(format!(
                "{} increments for {} steps in dimension {dim}",
                increments.len(),
                grid.steps()
            )));
        }
        let mut values = vec![0.0; grid.nodes() * dim];
        for i in 0..grid.steps() {
            for k in 0..dim {
                values[(i + 1) * dim + k] = values[i * dim + k] + increments[i * dim + k];
            }
        }
        Ok(Self { grid, dim, values })
    }

    /// The path `t -> f(t)`; `f(0)` must vanish.
    pub fn from_fn(grid: TimeGrid, dim: usize, f: impl Fn(f64) -> Vec<f64>) -> Result<Self> {
        let values = (0..grid.nodes()).flat_map(|i| f(grid.time(i))).collect();
        Self::new(grid, dim, values)
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
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn at(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn terminal(&self) -> &[f64] {
        self.at(self.grid.steps())
    }

    /// All increments `w(t_{i+1}) - w(t_i)`, step-major.
    pub fn increments(&self) -> Vec<f64> {
        let d = self.dim;
        (0..self.grid.steps() * d)
            .map(|idx| self.values[idx + d] - self.values[idx])
            .collect()
    }

    /// The path observed on every `factor`-th node.
    pub fn coarsen(&self, factor: usize) -> Result<WienerPath> {
        if factor == 0 || !self.grid.steps().is_multiple_of(factor) {
            return Err(Error::GridMismatch(format!(
                "cannot coarsen {} steps by {factor}",
                self.grid.steps()
            )));
        }
        let grid = TimeGrid::new(self.grid.horizon(), self.grid.steps() / factor)?;
        let values = (0..grid.nodes())
            .flat_map(|i| self.at(i * factor).iter().copied())
            .collect();
        Ok(WienerPath {
            grid,
            dim: self.dim,
            values,
        })
    }

    /// `self + h * other` node by node.
    pub fn axpy(&self, h: f64, other: &[f64]) -> WienerPath {
        debug_assert_eq!(other.len(), self.values.len());
        WienerPath {
            grid: self.grid,
            dim: self.dim,
            values: self.values.iter().zip(other).map(|(a, b)| a + h * b).collect(),
        }
    }

    fn check(&self, f: &MatrixFunction) -> Result<()> {
        self.grid.check_same(f.grid())?;
        if f.dim() != self.dim {
            return Err(Error::GridMismatch(format!(
                "path dimension {} vs matrix dimension {}",
                self.dim,
                f.dim()
            )));
        }
        Ok(())
    }
}

/// Running trapezoid integral of node vectors `v_i` (each of length `d`); zero at `t_0`.
pub(crate) fn cumulative_trapezoid(dt: f64, d: usize, v: &[f64]) -> Vec<f64> {
    let nodes = v.len() / d;
    let mut out = vec![0.0; v.len()];
    for i in 1..nodes {
        for k in 0..d {
            out[i * d + k] = out[(i - 1) * d + k] + 0.5 * dt * (v[(i - 1) * d + k] + v[i * d + k]);
        }
    }
    out
}

/// `(iota + F_chi)(w)`: `w(t) - int_0^t chi(s) w(s) ds` with the trapezoid rule.
pub fn forward_transform(chi: &MatrixFunction, w: &WienerPath) -> Result<WienerPath> {
    w.check(chi)?;
    let d = w.dim;
    let mut integrand = vec![0.0; w.values.len()];
    for i in 0..w.grid.nodes() {
        chi.at(i).mul_vec_into(w.at(i), &mut integrand[i * d..(i + 1) * d]);
    }
    let acc = cumulative_trapezoid(w.grid.dt(), d, &integrand);
    Ok(w.axpy(-1.0, &acc))
}

#[derive(Debug, Clone)]
pub struct AlphaSolution {
    pub alpha: MatrixFunction,
    pub min_abs_det: f64,
}

/// Backward solve of `alpha' = chi alpha`, `alpha(T) = I_d`.
pub fn solve_alpha(chi: &MatrixFunction) -> Result<AlphaSolution> {
    let d = chi.dim();
    let alpha = rk4_solve(|t, a| &chi.eval(t) * a, Mat::identity(d), Direction::Backward, chi.grid())?
        .with_role(Role::Alpha);
    let min_abs_det = alpha
        .samples()
        .iter()
        .map(|a| a.det().abs())
        .fold(f64::INFINITY, f64::min);
    Ok(AlphaSolution { alpha, min_abs_det })
}

/// Precomputed data for applying `iota + F~_chi` to many paths.
#[derive(Debug, Clone)]
pub struct InverseTransform {
    grid: TimeGrid,
    dim: usize,
    alpha: Vec<Mat>,
    alpha_inv_chi: Vec<Mat>,
}

impl InverseTransform {
    pub fn new(chi: &MatrixFunction, alpha: &MatrixFunction) -> Result<Self> {
        chi.grid().check_same(alpha.grid())?;
        let mut alpha_inv_chi = Vec::with_capacity(chi.grid().nodes());
        for (a, c) in alpha.samples().iter().zip(chi.samples()) {
            // (alpha^{-1})' = -alpha^{-1} chi
            alpha_inv_chi.push(&a.inverse()? * c);
        }
        Ok(Self {
            grid: *chi.grid(),
            dim: chi.dim(),
            alpha: alpha.samples().to_vec(),
            alpha_inv_chi,
        })
    }

    /// `w(t) + alpha(t) int_0^t alpha(s)^{-1} chi(s) w(s) ds`.
    pub fn apply(&self, w: &WienerPath) -> Result<WienerPath> {
        self.grid.check_same(&w.grid)?;
        if w.dim != self.dim {
            return Err(Error::GridMismatch("path dimension differs from transform".into()));
        }
        let d = self.dim;
        let mut integrand = vec![0.0; w.values.len()];
        for i in 0..self.grid.nodes() {
            self.alpha_inv_chi[i].mul_vec_into(w.at(i), &mut integrand[i * d..(i + 1) * d]);
        }
        let acc = cumulative_trapezoid(self.grid.dt(), d, &integrand);
        let mut shift = vec![0.0; w.values.len()];
        for i in 0..self.grid.nodes() {
            self.alpha[i].mul_vec_into(&acc[i * d..(i + 1) * d], &mut shift[i * d..(i + 1) * d]);
        }
        Ok(w.axpy(1.0, &shift))
    }
}

/// `(iota + F_chi)^{-1}(w)` through the explicit formula built on `alpha`.
pub fn inverse_transform(chi: &MatrixFunction, alpha: &MatrixFunction, w: &WienerPath) -> Result<WienerPath> {
    w.check(chi)?;
    InverseTransform::new(chi, alpha)?.apply(w)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdmissibilityPassed {
    pub horizon_chi: bool,
    pub inverse: bool,
    pub eps_1: Option<bool>,
    pub eps_2: Option<bool>,
    pub delta: Option<bool>,
}

/// Left-hand sides of the sufficient smallness conditions; each passes when below one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdmissibilityReport {
    /// `T |chi|_inf`.
    pub t_chi_norm: f64,
    /// `T sqrt(d) |chi|_inf exp(T |chi|_inf)`.
    pub inv_condition: f64,
    /// `|sigma|_inf`.
    pub eps: Option<f64>,
    /// `|sigma(T)| + |sigma'|_inf + 2 |sigma_A|_inf`.
    pub delta: Option<f64>,
    pub eps_lhs_1: Option<f64>,
    pub eps_lhs_2: Option<f64>,
    pub delta_lhs: Option<f64>,
    pub k0: f64,
    pub passed: AdmissibilityPassed,
}

impl AdmissibilityReport {
    pub fn all_passed(&self) -> bool {
        let p = &self.passed;
        p.horizon_chi
            && p.inverse
            && p.eps_1.unwrap_or(true)
            && p.eps_2.unwrap_or(true)
            && p.delta.unwrap_or(true)
    }

    /// Strict mode: any failing condition is an error.
    pub fn enforce(&self) -> Result<()> {
        if self.all_passed() {
            return Ok(());
        }
        let mut failed = Vec::new();
        let p = &self.passed;
        if !p.horizon_chi {
            failed.push(format!("T|chi| = {}", self.t_chi_norm));
        }
        if !p.inverse {
            failed.push(format!("T sqrt(d)|chi| e^(T|chi|) = {}", self.inv_condition));
        }
        for (name, ok, v) in [
            ("eps condition 1", p.eps_1, self.eps_lhs_1),
            ("eps condition 2", p.eps_2, self.eps_lhs_2),
            ("delta condition", p.delta, self.delta_lhs),
        ] {
            if ok == Some(false) {
                failed.push(format!("{name} = {}", v.unwrap_or(f64::NAN)));
            }
        }
        Err(Error::AdmissibilityStrictFail(failed.join("; ")))
    }
}

/// Evaluates every smallness condition for `chi` and, when given, `sigma`.
///
/// `sigma'` is taken from `sigma.derivative()`, which is exact for analytic input.
pub fn admissibility(chi: &MatrixFunction, sigma: Option<&MatrixFunction>) -> AdmissibilityReport {
    let t = chi.grid().horizon();
    let d = chi.dim();
    let sd = (d as f64).sqrt();
    let k0 = k0_bound(d);
    let chi_sup = chi.sup_norm();
    let t_chi_norm = t * chi_sup;
    let inv_condition = t * sd * chi_sup * (t * chi_sup).exp();

    let (mut eps, mut delta, mut eps_lhs_1, mut eps_lhs_2, mut delta_lhs) = (None, None, None, None, None);
    if let Some(sigma) = sigma {
        let e = sigma.sup_norm();
        let growth = (t * (sd + 2.0 * e + e * e)).exp();
        eps_lhs_1 = Some(2.0 * e * t * sd * (1.0 + t * sd * (1.0 + e)) * growth);
        eps_lhs_2 = Some(e * t * (1.0 + t * sd * k0 * (1.0 + e) * growth));
        eps = Some(e);
        if sigma.grid().steps() >= 2 || sigma.derivative_is_exact() {
            let n = sigma.grid().steps();
            let dl = sigma.at(n).frob_norm() + sigma.derivative().sup_norm() + 2.0 * sigma.antisym_part().sup_norm();
            delta_lhs = Some(dl * t * (2.0 * sd).max(k0) * (1.0 + t * (sd + dl) * (t * (sd + dl)).exp()));
            delta = Some(dl);
        }
    }
    let below = |v: Option<f64>| v.map(|x| x < 1.0);
    AdmissibilityReport {
        t_chi_norm,
        inv_condition,
        eps,
        delta,
        eps_lhs_1,
        eps_lhs_2,
        delta_lhs,
        k0,
        passed: AdmissibilityPassed {
            horizon_chi: t_chi_norm < 1.0,
            inverse: inv_condition < 1.0,
            eps_1: below(eps_lhs_1),
            eps_2: below(eps_lhs_2),
            delta: below(delta_lhs),
        },
    }
}
