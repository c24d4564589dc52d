//! Conditional expectation of `e^{p_sigma}` given the terminal-time value of the
//! path at a grid node, through the Gaussian law of the transformed path.

use std::f64::consts::PI;
use std::num::NonZeroUsize;

use gauss_quad::GaussHermite;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::error::{Error, Result};
use crate::funcalc::MatrixFunction;
use crate::matcore::Mat;

/// `v_t = int_0^t (alpha(t) alpha(s)^{-1}) (alpha(t) alpha(s)^{-1})^T ds` at a node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Covariance {
    pub t_index: usize,
    pub t: f64,
    pub matrix: Mat,
    /// Lower Cholesky factor of `matrix`.
    pub chol: Mat,
}

fn cholesky(m: &Mat) -> Result<Mat> {
    let d = m.dim();
    let mut l = Mat::zeros(d);
    for j in 0..d {
        let mut diag = m.get(j, j);
        for k in 0..j {
            diag -= l.get(j, k) * l.get(j, k);
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return Err(Error::NotPositiveDefinite);
        }
        let ljj = diag.sqrt();
        l.set(j, j, ljj);
        for i in j + 1..d {
            let mut v = m.get(i, j);
            for k in 0..j {
                v -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, v / ljj);
        }
    }
    Ok(l)
}

impl Covariance {
    pub fn from_matrix(t_index: usize, t: f64, matrix: Mat) -> Result<Self> {
        if (&matrix - &matrix.transpose()).max_abs() > 1e-12 * matrix.max_abs().max(1.0) {
            return Err(Error::NotPositiveDefinite);
        }
        let chol = cholesky(&matrix)?;
        Ok(Self { t_index, t, matrix, chol })
    }

    pub fn log_det(&self) -> f64 {
        (0..self.chol.dim()).map(|i| 2.0 * self.chol.get(i, i).ln()).sum()
    }

    /// `x^T v^{-1} x` by forward substitution with the Cholesky factor.
    pub fn inv_quad(&self, x: &[f64]) -> f64 {
        let d = self.chol.dim();
        let mut y = vec![0.0; d];
        for i in 0..d {
            let mut v = x[i];
            for (k, yk) in y.iter().enumerate().take(i) {
                v -= self.chol.get(i, k) * yk;
            }
            y[i] = v / self.chol.get(i, i);
        }
        y.iter().map(|v| v * v).sum()
    }

    /// Centered Gaussian density with this covariance.
    pub fn density(&self, x: &[f64]) -> f64 {
        let d = self.chol.dim() as f64;
        (-0.5 * (d * (2.0 * PI).ln() + self.log_det() + self.inv_quad(x))).exp()
    }
}

/// Trapezoid quadrature of the covariance over `[0, t_{t_index}]`.
pub fn covariance(alpha: &MatrixFunction, t_index: usize) -> Result<Covariance> {
    let grid = alpha.grid();
    if t_index == 0 || t_index > grid.steps() {
        return Err(Error::PreconditionViolated(format!(
            "covariance needs a node index in 1..={}, got {t_index}",
            grid.steps()
        )));
    }
    let at = alpha.at(t_index);
    let weights = grid.trapezoid_weights(0, t_index);
    let mut v = Mat::zeros(alpha.dim());
    for (s, w) in weights.iter().enumerate() {
        let m = at * &alpha.at(s).inverse()?;
        v = v.axpy(*w, &(&m * &m.transpose()));
    }
    Covariance::from_matrix(t_index, grid.time(t_index), v.sym_part())
}

/// `prefactor * g_v(x) * (2 pi t)^{d/2} * e^{|x|^2 / (2t)}`, evaluated in log space.
pub fn cond_exp(prefactor: f64, v: &Covariance, t: f64, x: &[f64]) -> Result<f64> {
    let d = v.chol.dim();
    if x.len() != d {
        return Err(Error::PreconditionViolated(format!("point has {} coordinates, expected {d}", x.len())));
    }
    if !(t > 0.0) {
        return Err(Error::PreconditionViolated("conditioning time must be positive".into()));
    }
    let x2: f64 = x.iter().map(|a| a * a).sum();
    let log = 0.5 * d as f64 * t.ln() - 0.5 * v.log_det() - 0.5 * v.inv_quad(x) + x2 / (2.0 * t);
    Ok(prefactor * log.exp())
}

/// `int h(x) N(0, t I_d)(dx)` by a tensorised Gauss-Hermite rule with `nodes` points per axis.
pub fn gauss_hermite_expectation(nodes: usize, d: usize, t: f64, mut h: impl FnMut(&[f64]) -> f64) -> f64 {
    let rule = GaussHermite::new(NonZeroUsize::new(nodes.max(1)).expect("nonzero"));
    let pairs = rule.as_node_weight_pairs();
    let scale = (2.0 * t).sqrt();
    let norm = PI.sqrt().powi(d as i32);
    let mut idx = vec![0usize; d];
    let mut x = vec![0.0; d];
    let mut acc = 0.0;
    loop {
        let mut w = 1.0;
        for k in 0..d {
            let (node, weight) = pairs[idx[k]];
            x[k] = scale * node;
            w *= weight;
        }
        acc += w * h(&x);
        // odometer over the tensor grid
        let mut k = 0;
        while k < d {
            idx[k] += 1;
            if idx[k] < pairs.len() {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
        if k == d {
            break;
        }
    }
    acc / norm
}

/// `P(a < X <= b)` for `X ~ N(0, variance)`.
pub fn normal_interval_mass(variance: f64, a: f64, b: f64) -> f64 {
    let s = (2.0 * variance).sqrt();
    0.5 * (erf(b / s) - erf(a / s))
}
