//! Small dense square matrices.
//!
//! Everything in the crate works with `d x d` real matrices where `d` is small
//! (target `d <= 8`), so a flat row-major `Vec<f64>` with hand-written kernels
//! is all that is needed. The norm used throughout is the Frobenius norm.

use std::fmt;
use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pivots smaller than this fraction of the largest entry mark a matrix singular.
pub const PIVOT_RTOL: f64 = 1e-14;
/// Absolute determinant floor for [`Mat::inverse`].
pub const DET_FLOOR: f64 = 1e-300;

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    dim: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Mat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.rows()).finish()
    }
}

impl Mat {
    pub fn zeros(dim: usize) -> Self {
        assert!(dim >= 1, "matrix dimension must be positive");
        Self {
            dim,
            data: vec![0.0; dim * dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self::scalar(dim, 1.0)
    }

    /// `c * I_d`.
    pub fn scalar(dim: usize, c: f64) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m.data[i * dim + i] = c;
        }
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len());
        for (i, v) in values.iter().enumerate() {
            m.data[i * values.len() + i] = *v;
        }
        m
    }

    /// Builds from row-major entries. Panics unless `data.len() == dim * dim`.
    pub fn from_row_major(dim: usize, data: Vec<f64>) -> Self {
        assert!(dim >= 1, "matrix dimension must be positive");
        assert_eq!(data.len(), dim * dim, "entry count must equal dim^2");
        Self { dim, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.len();
        if dim == 0 {
            return Err(Error::Spec("matrix literal has no rows".into()));
        }
        let mut data = Vec::with_capacity(dim * dim);
        for row in rows {
            if row.len() != dim {
                return Err(Error::Spec(format!(
                    "matrix literal is not square: row of length {} in a {dim}-row matrix",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Ok(Self { dim, data })
    }

    /// Rotation by angle `a` in the plane, `[[cos a, -sin a], [sin a, cos a]]`.
    pub fn rotation(a: f64) -> Self {
        Self::from_row_major(2, vec![a.cos(), -a.sin(), a.sin(), a.cos()])
    }

    /// The planar symplectic generator `[[0, -1], [1, 0]]`.
    pub fn symplectic() -> Self {
        Self::from_row_major(2, vec![0.0, -1.0, 1.0, 0.0])
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.dim + j] = v;
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.dim).map(|r| r.to_vec()).collect()
    }

    pub fn transpose(&self) -> Self {
        let d = self.dim;
        let mut out = Self::zeros(d);
        for i in 0..d {
            for j in 0..d {
                out.data[j * d + i] = self.data[i * d + j];
            }
        }
        out
    }

    pub fn scale(&self, c: f64) -> Self {
        Self {
            dim: self.dim,
            data: self.data.iter().map(|x| c * x).collect(),
        }
    }

    /// `self + h * other`.
    pub fn axpy(&self, h: f64, other: &Mat) -> Self {
        self.check_dim(other);
        Self {
            dim: self.dim,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + h * b)
                .collect(),
        }
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.data[i * self.dim + i]).sum()
    }

    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `(m + m^T) / 2`.
    pub fn sym_part(&self) -> Self {
        let d = self.dim;
        let mut out = Self::zeros(d);
        for i in 0..d {
            for j in 0..d {
                out.data[i * d + j] = 0.5 * (self.data[i * d + j] + self.data[j * d + i]);
            }
        }
        out
    }

    /// `(m - m^T) / 2`.
    pub fn antisym_part(&self) -> Self {
        let d = self.dim;
        let mut out = Self::zeros(d);
        for i in 0..d {
            for j in 0..d {
                out.data[i * d + j] = 0.5 * (self.data[i * d + j] - self.data[j * d + i]);
            }
        }
        out
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.mul_vec_into(v, &mut out);
        out
    }

    /// `out = self * v`.
    #[inline]
    pub fn mul_vec_into(&self, v: &[f64], out: &mut [f64]) {
        let d = self.dim;
        for (i, o) in out.iter_mut().enumerate().take(d) {
            let row = &self.data[i * d..(i + 1) * d];
            *o = row.iter().zip(v).map(|(a, b)| a * b).sum();
        }
    }

    pub fn matmul(&self, other: &Mat) -> Self {
        self.check_dim(other);
        let d = self.dim;
        let mut out = Self::zeros(d);
        for i in 0..d {
            for k in 0..d {
                let a = self.data[i * d + k];
                if a == 0.0 {
                    continue;
                }
                for j in 0..d {
                    out.data[i * d + j] += a * other.data[k * d + j];
                }
            }
        }
        out
    }

    /// Determinant by LU factorisation with partial pivoting; zero for exactly singular input.
    pub fn det(&self) -> f64 {
        match self.lu() {
            Some(lu) => lu.det(),
            None => 0.0,
        }
    }

    /// Inverse by Gauss-Jordan elimination with partial pivoting.
    ///
    /// Fails with [`Error::Singular`] when `|det| < 1e-300` or any pivot falls
    /// below `1e-14` times the largest entry of the input.
    pub fn inverse(&self) -> Result<Self> {
        let d = self.dim;
        let scale = self.max_abs();
        let lu = self.lu().ok_or(Error::Singular { det: 0.0 })?;
        let det = lu.det();
        if det.abs() < DET_FLOOR || lu.min_pivot < PIVOT_RTOL * scale {
            return Err(Error::Singular { det });
        }
        let mut out = Self::zeros(d);
        let mut col = vec![0.0; d];
        for j in 0..d {
            col.iter_mut().for_each(|c| *c = 0.0);
            col[j] = 1.0;
            lu.solve_in_place(&mut col);
            for i in 0..d {
                out.data[i * d + j] = col[i];
            }
        }
        Ok(out)
    }

    fn lu(&self) -> Option<Lu> {
        let d = self.dim;
        let mut a = self.data.clone();
        let mut perm: Vec<usize> = (0..d).collect();
        let mut sign = 1.0;
        let mut min_pivot = f64::INFINITY;
        for k in 0..d {
            let (p, pv) = (k..d)
                .map(|r| (r, a[r * d + k].abs()))
                .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if pv == 0.0 {
                return None;
            }
            min_pivot = min_pivot.min(pv);
            if p != k {
                for c in 0..d {
                    a.swap(k * d + c, p * d + c);
                }
                perm.swap(k, p);
                sign = -sign;
            }
            let piv = a[k * d + k];
            for r in (k + 1)..d {
                let f = a[r * d + k] / piv;
                a[r * d + k] = f;
                for c in (k + 1)..d {
                    a[r * d + c] -= f * a[k * d + c];
                }
            }
        }
        Some(Lu {
            dim: d,
            a,
            perm,
            sign,
            min_pivot,
        })
    }

    fn check_dim(&self, other: &Mat) {
        assert_eq!(self.dim, other.dim, "matrix dimension mismatch");
    }
}

struct Lu {
    dim: usize,
    a: Vec<f64>,
    perm: Vec<usize>,
    sign: f64,
    min_pivot: f64,
}

impl Lu {
    fn det(&self) -> f64 {
        (0..self.dim).fold(self.sign, |acc, i| acc * self.a[i * self.dim + i])
    }

    fn solve_in_place(&self, b: &mut [f64]) {
        let d = self.dim;
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..d {
            for k in 0..i {
                x[i] -= self.a[i * d + k] * x[k];
            }
        }
        for i in (0..d).rev() {
            for k in (i + 1)..d {
                x[i] -= self.a[i * d + k] * x[k];
            }
            x[i] /= self.a[i * d + i];
        }
        b.copy_from_slice(&x);
    }
}

/// Upper bound `sqrt(d) + 1` for `K_0 = sup{|M^{-1}| : |M - I_d| < 1/2}` in the Frobenius norm.
///
/// Writing `M = I - E` with `|E| < 1/2`, the Neumann series gives
/// `|M^{-1}| <= |I| + sum_{n>=1} |E|^n <= sqrt(d) + 1`.
pub fn k0_bound(d: usize) -> f64 {
    assert!(d >= 1);
    (d as f64).sqrt() + 1.0
}

impl Add for &Mat {
    type Output = Mat;
    fn add(self, rhs: &Mat) -> Mat {
        self.axpy(1.0, rhs)
    }
}

impl Sub for &Mat {
    type Output = Mat;
    fn sub(self, rhs: &Mat) -> Mat {
        self.axpy(-1.0, rhs)
    }
}

impl Mul for &Mat {
    type Output = Mat;
    fn mul(self, rhs: &Mat) -> Mat {
        self.matmul(rhs)
    }
}

impl Neg for &Mat {
    type Output = Mat;
    fn neg(self) -> Mat {
        self.scale(-1.0)
    }
}

impl AddAssign<&Mat> for Mat {
    fn add_assign(&mut self, rhs: &Mat) {
        self.check_dim(rhs);
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += b;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &Mat, b: &Mat, tol: f64) -> bool {
        (a - b).frob_norm() <= tol
    }

    #[test]
    fn transpose_examples() {
        assert_eq!(Mat::identity(2).transpose(), Mat::identity(2));
        let j = Mat::symplectic();
        assert_eq!(j.transpose(), j.scale(-1.0));
        let m = Mat::from_row_major(2, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m.transpose(), Mat::from_row_major(2, vec![1.0, 3.0, 2.0, 4.0]));
    }

    #[test]
    fn det_examples() {
        for d in 1..5 {
            assert_eq!(Mat::identity(d).det(), 1.0);
        }
        let a = 0.37_f64;
        let r = Mat::from_row_major(2, vec![a.cos(), a.sin(), -a.sin(), a.cos()]);
        assert!((r.det() - 1.0).abs() < 1e-15);
        // (I + rotation(-1)) / 2 has determinant cos^2(1/2)
        let half = (&Mat::identity(2) + &Mat::rotation(-1.0)).scale(0.5);
        assert!((half.det() - 0.5_f64.cos().powi(2)).abs() < 1e-15);
        assert!((half.det() - 0.770151).abs() < 1e-6);
        assert_eq!(Mat::zeros(3).det(), 0.0);
    }

    #[test]
    fn inverse_examples() {
        assert_eq!(Mat::identity(3).inverse().unwrap(), Mat::identity(3));
        let inv = Mat::diag(&[2.0, 4.0]).inverse().unwrap();
        assert!(close(&inv, &Mat::diag(&[0.5, 0.25]), 1e-15));
        let inv = Mat::rotation(0.8).inverse().unwrap();
        assert!(close(&inv, &Mat::rotation(-0.8), 1e-14));
    }

    #[test]
    fn inverse_rejects_singular() {
        let m = Mat::from_row_major(2, vec![1.0, 2.0, 2.0, 4.0]);
        assert!(matches!(m.inverse(), Err(Error::Singular { .. })));
        let tiny = Mat::diag(&[1.0, 1e-16]);
        assert!(matches!(tiny.inverse(), Err(Error::Singular { .. })));
        assert!(matches!(Mat::zeros(2).inverse(), Err(Error::Singular { .. })));
    }

    #[test]
    fn frob_norm_examples() {
        assert!((Mat::identity(3).frob_norm() - 3f64.sqrt()).abs() < 1e-15);
        assert_eq!(Mat::zeros(2).frob_norm(), 0.0);
        assert_eq!(Mat::from_row_major(2, vec![3.0, 4.0, 0.0, 0.0]).frob_norm(), 5.0);
    }

    #[test]
    fn sym_antisym_examples() {
        let j = Mat::symplectic();
        assert_eq!(j.sym_part(), Mat::zeros(2));
        assert_eq!(j.antisym_part(), j);
        let s = Mat::from_row_major(2, vec![1.0, 2.0, 2.0, 5.0]);
        assert_eq!(s.sym_part(), s);
        assert_eq!(s.antisym_part(), Mat::zeros(2));
        let m = Mat::from_row_major(2, vec![1.0, 2.0, 0.0, 1.0]);
        assert_eq!(m.sym_part(), Mat::from_row_major(2, vec![1.0, 1.0, 1.0, 1.0]));
        assert_eq!(m.antisym_part(), Mat::from_row_major(2, vec![0.0, 1.0, -1.0, 0.0]));
    }

    #[test]
    fn k0_bound_examples() {
        assert_eq!(k0_bound(1), 2.0);
        assert!((k0_bound(2) - 2.41421).abs() < 1e-5);
        assert_eq!(k0_bound(4), 3.0);
    }

    #[test]
    fn k0_bound_dominates_sampled_inverses() {
        // |M - I| < 1/2 sampled on a few directions; the bound must dominate |M^{-1}|.
        for d in 1..4 {
            for k in 0..20 {
                let mut e = Mat::zeros(d);
                for (idx, v) in e.as_mut_slice().iter_mut().enumerate() {
                    *v = ((idx * 7 + k * 13) as f64).sin();
                }
                if e.frob_norm() == 0.0 {
                    continue;
                }
                let e = e.scale(0.4999 / e.frob_norm());
                let m = &Mat::identity(d) - &e;
                assert!(m.inverse().unwrap().frob_norm() <= k0_bound(d));
            }
        }
    }

    fn mat_strategy(d: usize) -> impl Strategy<Value = Mat> {
        proptest::collection::vec(-1.0f64..1.0, d * d).prop_map(move |v| Mat::from_row_major(d, v))
    }

    proptest! {
        #[test]
        fn inverse_is_two_sided(m in (1usize..5).prop_flat_map(mat_strategy)) {
            // shift towards the identity to stay well conditioned
            let d = m.dim();
            let m = &m.scale(0.3) + &Mat::scalar(d, 1.5);
            let inv = m.inverse().unwrap();
            prop_assert!((&(&m * &inv) - &Mat::identity(d)).frob_norm() <= 1e-10);
            prop_assert!((&(&inv * &m) - &Mat::identity(d)).frob_norm() <= 1e-10);
        }

        #[test]
        fn det_is_multiplicative(d in 2usize..4, seed in proptest::collection::vec(-1.0f64..1.0, 18)) {
            let a = Mat::from_row_major(d, seed[..d * d].to_vec());
            let b = Mat::from_row_major(d, seed[9..9 + d * d].to_vec());
            let lhs = (&a * &b).det();
            let rhs = a.det() * b.det();
            prop_assert!((lhs - rhs).abs() <= 1e-10 * rhs.abs().max(1e-3));
        }

        #[test]
        fn sym_plus_antisym_recovers(m in (1usize..5).prop_flat_map(mat_strategy)) {
            let back = &m.sym_part() + &m.antisym_part();
            prop_assert!((&back - &m).max_abs() <= 4.0 * f64::EPSILON);
            prop_assert_eq!(m.sym_part().transpose(), m.sym_part());
            prop_assert_eq!(m.antisym_part().transpose(), m.antisym_part().scale(-1.0));
        }
    }
}
