//! Square-integrable matrix kernels on `[0, T]^2` that are symmetric in the sense
//! `eta(s, t) = eta(t, s)^T`, stored on the grid through their lower triangle.
//!
//! Block `(i, j)` with `j <= i` holds `eta(t_i, t_j)`. The diagonal block holds the
//! limit from below, `lim_{s -> t_i-} eta(t_i, s)`, so that a kernel such as
//! `chi(max(s, t))` is represented without loss; the symmetric part of that block
//! is what a two-sided reading of the kernel sees on the diagonal.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::funcalc::{trapezoid_scalar, MatrixFunction, TimeGrid};
use crate::matcore::Mat;
use crate::transforms::{cumulative_trapezoid, WienerPath};

/// Paths evaluated together by [`Kernel::path_functionals_batch`].
pub const LANES: usize = 32;

#[inline]
fn tri(i: usize) -> usize {
    i * (i + 1) / 2
}

#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    grid: TimeGrid,
    dim: usize,
    data: Vec<f64>,
}

/// Serialisable form of a kernel: grid, dimension and the flattened lower triangle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelDump {
    pub horizon: f64,
    pub steps: usize,
    pub dim: usize,
    pub lower: Vec<f64>,
}

impl Kernel {
    fn block_len(&self) -> usize {
        self.dim * self.dim
    }

    fn offset(&self, i: usize, j: usize) -> usize {
        debug_assert!(j <= i);
        (tri(i) + j) * self.block_len()
    }

    pub fn zeros(grid: TimeGrid, dim: usize) -> Self {
        Self {
            grid,
            dim,
            data: vec![0.0; tri(grid.nodes()) * dim * dim],
        }
    }

    /// Samples `f(t, s)` for `s <= t`; `f(t, t)` must be the limit from below.
    pub fn from_lower_fn(grid: TimeGrid, dim: usize, f: impl Fn(f64, f64) -> Mat) -> Result<Self> {
        let mut k = Self::zeros(grid, dim);
        for i in 0..grid.nodes() {
            for j in 0..=i {
                let m = f(grid.time(i), grid.time(j));
                if m.dim() != dim {
                    return Err(Error::Spec(format!("kernel block has dimension {}, expected {dim}", m.dim())));
                }
                k.set_lower(i, j, &m);
            }
        }
        Ok(k)
    }

    /// Flattened lower triangle in row order (`(0,0), (1,0), (1,1), (2,0), ...`), each block row-major.
    pub fn from_lower_data(grid: TimeGrid, dim: usize, lower: Vec<f64>) -> Result<Self> {
        let want = tri(grid.nodes()) * dim * dim;
        if lower.len() != want {
            return Err(Error::GridMismatch(format!(
                "kernel data has {} entries, expected {want}",
                lower.len()
            )));
        }
        Ok(Self { grid, dim, data: lower })
    }

    /// `eta_chi(s, t) = chi(max(s, t))`, the kernel of `h -> <F_chi h, h>` type functionals.
    pub fn embed_chi(chi: &MatrixFunction) -> Self {
        let grid = *chi.grid();
        let mut k = Self::zeros(grid, chi.dim());
        for i in 0..grid.nodes() {
            for j in 0..=i {
                k.set_lower(i, j, chi.at(i));
            }
        }
        k
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lower_data(&self) -> &[f64] {
        &self.data
    }

    pub fn dump(&self) -> KernelDump {
        KernelDump {
            horizon: self.grid.horizon(),
            steps: self.grid.steps(),
            dim: self.dim,
            lower: self.data.clone(),
        }
    }

    pub fn load(dump: KernelDump) -> Result<Self> {
        Self::from_lower_data(TimeGrid::new(dump.horizon, dump.steps)?, dump.dim, dump.lower)
    }

    #[inline]
    pub fn lower(&self, i: usize, j: usize) -> &[f64] {
        let o = self.offset(i, j);
        &self.data[o..o + self.block_len()]
    }

    pub fn set_lower(&mut self, i: usize, j: usize, m: &Mat) {
        let o = self.offset(i, j);
        let b = self.block_len();
        self.data[o..o + b].copy_from_slice(m.as_slice());
    }

    /// `eta(t_i, t_j)` read two-sidedly; on the diagonal this is the symmetric part of the stored block.
    pub fn get(&self, i: usize, j: usize) -> Mat {
        use std::cmp::Ordering::*;
        match i.cmp(&j) {
            Greater => Mat::from_row_major(self.dim, self.lower(i, j).to_vec()),
            Less => Mat::from_row_major(self.dim, self.lower(j, i).to_vec()).transpose(),
            Equal => Mat::from_row_major(self.dim, self.lower(i, i).to_vec()).sym_part(),
        }
    }

    fn check(&self, other: &Kernel) -> Result<()> {
        self.grid.check_same(&other.grid)?;
        if self.dim != other.dim {
            return Err(Error::GridMismatch("kernels of different dimension".into()));
        }
        Ok(())
    }

    /// `self + h * other`.
    pub fn axpy(&self, h: f64, other: &Kernel) -> Result<Kernel> {
        self.check(other)?;
        Ok(Kernel {
            grid: self.grid,
            dim: self.dim,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + h * b).collect(),
        })
    }

    pub fn scaled(&self, c: f64) -> Kernel {
        Kernel {
            grid: self.grid,
            dim: self.dim,
            data: self.data.iter().map(|a| c * a).collect(),
        }
    }

    /// `L^2([0,T]^2)` norm, `2 int_0^T int_0^t |eta(t, s)|^2 ds dt` by nested trapezoids.
    pub fn l2_norm(&self) -> f64 {
        let g = self.grid;
        let b = self.block_len();
        let inner: Vec<f64> = (0..g.nodes())
            .map(|i| {
                let w = g.trapezoid_weights(0, i);
                (0..=i)
                    .map(|j| {
                        let o = self.offset(i, j);
                        w[j] * self.data[o..o + b].iter().map(|x| x * x).sum::<f64>()
                    })
                    .sum()
            })
            .collect();
        (2.0 * trapezoid_scalar(&g, &inner)).max(0.0).sqrt()
    }

    pub fn distance(&self, other: &Kernel) -> Result<f64> {
        Ok(self.axpy(-1.0, other)?.l2_norm())
    }

    /// `(s, t) -> int_{max(s,t)}^T eta(u, s)^T eta(u, t) du` for the lower triangle.
    fn tail_product(&self) -> Kernel {
        let g = self.grid;
        let d = self.dim;
        let b = self.block_len();
        let n = g.steps();
        let mut out = Kernel::zeros(g, d);
        let mut tmp = vec![0.0; b];
        for i in 0..=n {
            let w = g.trapezoid_weights(i, n);
            for j in 0..=i {
                let o = out.offset(i, j);
                for (m, wm) in (i..=n).zip(&w) {
                    if *wm == 0.0 {
                        continue;
                    }
                    // lower(m, i)^T lower(m, j)
                    let a = self.lower(m, i);
                    let c = self.lower(m, j);
                    tmp.iter_mut().for_each(|x| *x = 0.0);
                    for r in 0..d {
                        for k in 0..d {
                            let ark = a[k * d + r];
                            for col in 0..d {
                                tmp[r * d + col] += ark * c[k * d + col];
                            }
                        }
                    }
                    for (x, y) in out.data[o..o + b].iter_mut().zip(&tmp) {
                        *x += wm * y;
                    }
                }
            }
        }
        out
    }

    /// The kernel of `I - (I - K_eta)^* (I - K_eta)` restricted as in the composition
    /// `rho = eta - int_{max(s,t)}^T eta(u,s)^T eta(u,t) du`.
    pub fn compose_rho(&self) -> Kernel {
        self.axpy(-1.0, &self.tail_product()).expect("same grid")
    }

    /// Inverts [`Kernel::compose_rho`] by the fixed point `eta <- rho + tail(eta)`,
    /// a contraction when `|rho| < 1/4`.
    pub fn invert_rho(&self, tol: f64, max_iter: usize) -> Result<InvertReport> {
        let norm = self.l2_norm();
        if norm >= 0.25 {
            return Err(Error::PreconditionViolated(format!(
                "inversion needs |rho| < 1/4, got {norm}"
            )));
        }
        let mut eta = self.clone();
        let mut residual = f64::INFINITY;
        for it in 0..max_iter {
            let next = self.axpy(1.0, &eta.tail_product())?;
            // residual of the current iterate: |compose(eta) - rho| = |eta - next|
            residual = eta.distance(&next)?;
            if residual <= tol {
                return Ok(InvertReport {
                    eta,
                    iterations: it + 1,
                    residual,
                });
            }
            eta = next;
        }
        Err(Error::NoConvergence {
            residual,
            iterations: max_iter,
        })
    }

    /// Dense `N x N` block matrix of two-sided values `eta(t_i, t_j)`.
    fn dense(&self) -> Vec<f64> {
        let nn = self.grid.nodes();
        let d = self.dim;
        let mut out = vec![0.0; nn * nn * d * d];
        for i in 0..nn {
            for j in 0..nn {
                let m = self.get(i, j);
                for r in 0..d {
                    let row = (i * d + r) * nn * d + j * d;
                    out[row..row + d].copy_from_slice(&m.as_slice()[r * d..(r + 1) * d]);
                }
            }
        }
        out
    }

    /// Partial sums of the Neumann series `phi = sum_{k>=1} rho^{*k}` for the
    /// resolvent of `I - K_rho`, with trapezoid quadrature on `[0, T]`.
    pub fn resolvent_series(&self, terms: usize) -> Result<ResolventSeries> {
        let norm = self.l2_norm();
        if norm >= 1.0 / 3.0 {
            return Err(Error::PreconditionViolated(format!(
                "resolvent series needs |rho| < 1/3, got {norm}"
            )));
        }
        if terms == 0 {
            return Err(Error::PreconditionViolated("at least one term is required".into()));
        }
        let g = self.grid;
        let nn = g.nodes();
        let d = self.dim;
        let size = nn * d;
        let base = self.dense();
        let w = g.trapezoid_weights(0, g.steps());
        // right factor with quadrature weights folded into its rows
        let mut weighted = base.clone();
        for u in 0..nn {
            for r in 0..d {
                let row = (u * d + r) * size;
                weighted[row..row + size].iter_mut().for_each(|x| *x *= w[u]);
            }
        }
        let mut sum = self.clone();
        let mut term_norms = vec![norm];
        let mut power = base.clone();
        for _ in 1..terms {
            let mut next = vec![0.0; size * size];
            for r in 0..size {
                let prow = &power[r * size..(r + 1) * size];
                let nrow = &mut next[r * size..(r + 1) * size];
                for (k, p) in prow.iter().enumerate() {
                    if *p == 0.0 {
                        continue;
                    }
                    let wrow = &weighted[k * size..(k + 1) * size];
                    for (x, y) in nrow.iter_mut().zip(wrow) {
                        *x += p * y;
                    }
                }
            }
            let term = Self::lower_from_dense(g, d, &next);
            term_norms.push(term.l2_norm());
            sum = sum.axpy(1.0, &term)?;
            power = next;
        }
        let tail_bound = norm.powi(terms as i32 + 1) / (1.0 - norm);
        Ok(ResolventSeries {
            sum,
            term_norms,
            tail_bound,
        })
    }

    fn lower_from_dense(grid: TimeGrid, d: usize, dense: &[f64]) -> Kernel {
        let nn = grid.nodes();
        let size = nn * d;
        let mut k = Kernel::zeros(grid, d);
        for i in 0..nn {
            for j in 0..=i {
                let o = k.offset(i, j);
                for r in 0..d {
                    let src = (i * d + r) * size + j * d;
                    k.data[o + r * d..o + (r + 1) * d].copy_from_slice(&dense[src..src + d]);
                }
            }
        }
        k
    }

    /// `Y_i = sum_{j < i} eta(t_i, t_j) (w_{j+1} - w_j)`, the discretised inner Ito integral.
    fn inner_sums(&self, dw: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let b = d * d;
        let nn = self.grid.nodes();
        let mut y = vec![0.0; nn * d];
        for i in 1..nn {
            let row = &self.data[tri(i) * b..(tri(i) + i) * b];
            if d == 1 {
                y[i] = dot(row, &dw[..i]);
                continue;
            }
            for (j, blk) in row.chunks_exact(b).enumerate() {
                let inc = &dw[j * d..(j + 1) * d];
                for r in 0..d {
                    y[i * d + r] += blk[r * d..(r + 1) * d].iter().zip(inc).map(|(a, x)| a * x).sum::<f64>();
                }
            }
        }
        y
    }

    /// [`Kernel::inner_sums`] for `LANES` paths at once, laid out as `[node][coordinate][lane]`.
    fn inner_sums_lanes(&self, dwt: &[f64]) -> Vec<f64> {
        // same operations in the same order, only wider registers
        #[cfg(target_arch = "x86_64")]
        {
            if std::arch::is_x86_feature_detected!("avx512f") {
                return unsafe { self.inner_sums_lanes_avx512(dwt) };
            }
            if std::arch::is_x86_feature_detected!("avx2") {
                return unsafe { self.inner_sums_lanes_avx2(dwt) };
            }
        }
        self.inner_sums_lanes_generic(dwt)
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx512f")]
    unsafe fn inner_sums_lanes_avx512(&self, dwt: &[f64]) -> Vec<f64> {
        self.inner_sums_lanes_generic(dwt)
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2")]
    unsafe fn inner_sums_lanes_avx2(&self, dwt: &[f64]) -> Vec<f64> {
        self.inner_sums_lanes_generic(dwt)
    }

    #[inline(always)]
    fn inner_sums_lanes_generic(&self, dwt: &[f64]) -> Vec<f64> {
        match self.dim {
            1 => self.inner_sums_lanes_fixed::<1>(dwt),
            2 => self.inner_sums_lanes_fixed::<2>(dwt),
            3 => self.inner_sums_lanes_fixed::<3>(dwt),
            4 => self.inner_sums_lanes_fixed::<4>(dwt),
            _ => self.inner_sums_lanes_any(dwt),
        }
    }

    /// All `D` output rows at once so each increment vector is loaded once per block.
    #[inline(always)]
    fn inner_sums_lanes_fixed<const D: usize>(&self, dwt: &[f64]) -> Vec<f64> {
        let b = D * D;
        let nn = self.grid.nodes();
        let mut yt = vec![0.0; nn * D * LANES];
        for i in 1..nn {
            let row = &self.data[tri(i) * b..(tri(i) + i) * b];
            let mut acc = [[0.0f64; LANES]; D];
            for (j, blk) in row.chunks_exact(b).enumerate() {
                for c in 0..D {
                    let inc: &[f64; LANES] = dwt[(j * D + c) * LANES..(j * D + c + 1) * LANES]
                        .try_into()
                        .expect("lane width");
                    for (r, acc_r) in acc.iter_mut().enumerate() {
                        let e = blk[r * D + c];
                        for (a, x) in acc_r.iter_mut().zip(inc) {
                            *a += e * x;
                        }
                    }
                }
            }
            yt[i * D * LANES..(i + 1) * D * LANES].copy_from_slice(acc.as_flattened());
        }
        yt
    }

    #[inline(always)]
    fn inner_sums_lanes_any(&self, dwt: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let b = d * d;
        let nn = self.grid.nodes();
        let mut yt = vec![0.0; nn * d * LANES];
        for i in 1..nn {
            let row = &self.data[tri(i) * b..(tri(i) + i) * b];
            for r in 0..d {
                let mut acc = [0.0f64; LANES];
                for (j, blk) in row.chunks_exact(b).enumerate() {
                    for c in 0..d {
                        let e = blk[r * d + c];
                        let inc: &[f64; LANES] = dwt[(j * d + c) * LANES..(j * d + c + 1) * LANES]
                            .try_into()
                            .expect("lane width");
                        for (a, x) in acc.iter_mut().zip(inc) {
                            *a += e * x;
                        }
                    }
                }
                yt[(i * d + r) * LANES..(i * d + r + 1) * LANES].copy_from_slice(&acc);
            }
        }
        yt
    }

    fn check_path(&self, w: &WienerPath) -> Result<()> {
        self.grid.check_same(w.grid())?;
        if w.dim() != self.dim {
            return Err(Error::GridMismatch("path and kernel dimensions differ".into()));
        }
        Ok(())
    }

    /// All pathwise functionals of the kernel in one pass.
    pub fn path_functionals(&self, w: &WienerPath) -> Result<PathFunctionals> {
        Ok(self.path_functionals_batch(std::slice::from_ref(w))?.remove(0))
    }

    /// [`Kernel::path_functionals`] for several paths, sharing each pass over the kernel.
    pub fn path_functionals_batch(&self, ws: &[WienerPath]) -> Result<Vec<PathFunctionals>> {
        for w in ws {
            self.check_path(w)?;
        }
        let d = self.dim;
        let nn = self.grid.nodes();
        let mut out = Vec::with_capacity(ws.len());
        for group in ws.chunks(LANES) {
            let dws: Vec<Vec<f64>> = group.iter().map(WienerPath::increments).collect();
            let ys: Vec<Vec<f64>> = if group.len() == 1 {
                vec![self.inner_sums(&dws[0])]
            } else {
                // increments interleaved as [node][coordinate][lane]
                let mut dwt = vec![0.0; (nn - 1) * d * LANES];
                for (p, dw) in dws.iter().enumerate() {
                    for (k, x) in dw.iter().enumerate() {
                        dwt[k * LANES + p] = *x;
                    }
                }
                let yt = self.inner_sums_lanes(&dwt);
                (0..group.len()).map(|p| (0..nn * d).map(|k| yt[k * LANES + p]).collect()).collect()
            };
            for (y, dw) in ys.iter().zip(&dws) {
                let quad_form = y[..dw.len()].iter().zip(dw).map(|(a, b)| a * b).sum();
                let sq: Vec<f64> = y.chunks(d).map(|v| v.iter().map(|x| x * x).sum()).collect();
                let h = 0.5 * trapezoid_scalar(&self.grid, &sq);
                let mut g = cumulative_trapezoid(self.grid.dt(), d, y);
                g.iter_mut().for_each(|x| *x = -*x);
                out.push(PathFunctionals { quad_form, h, g });
            }
        }
        Ok(out)
    }

    /// `q_eta(w) = 2 int_0^T int_0^t <eta(t, s) dw(s), dw(t)>` as a forward Ito sum.
    pub fn quad_form(&self, w: &WienerPath) -> Result<f64> {
        Ok(self.path_functionals(w)?.quad_form)
    }

    /// `h_eta(w) = 1/2 int_0^T |int_0^t eta(t, s) dw(s)|^2 dt`.
    pub fn h_eta(&self, w: &WienerPath) -> Result<f64> {
        Ok(self.path_functionals(w)?.h)
    }

    /// `G_eta(w)(t) = -int_0^t int_0^u eta(u, s) dw(s) du`, node-major like a path.
    pub fn apply_g(&self, w: &WienerPath) -> Result<Vec<f64>> {
        Ok(self.path_functionals(w)?.g)
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let k = c * 4;
        acc[0] += a[k] * b[k];
        acc[1] += a[k + 1] * b[k + 1];
        acc[2] += a[k + 2] * b[k + 2];
        acc[3] += a[k + 3] * b[k + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for k in chunks * 4..a.len() {
        s += a[k] * b[k];
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathFunctionals {
    /// Forward Ito sum for `sum_i <Y_i, dw_i>` with the factor two absorbed by symmetry.
    pub quad_form: f64,
    pub h: f64,
    pub g: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct InvertReport {
    pub eta: Kernel,
    pub iterations: usize,
    pub residual: f64,
}

#[derive(Debug, Clone)]
pub struct ResolventSeries {
    pub sum: Kernel,
    pub term_norms: Vec<f64>,
    /// `|rho|^{terms+1} / (1 - |rho|)`.
    pub tail_bound: f64,
}

/// `M e^{-r (t - s)}` for `t >= s`, reflected by transposition above the diagonal.
pub fn decay_kernel(grid: TimeGrid, m: &Mat, rate: f64) -> Kernel {
    Kernel::from_lower_fn(grid, m.dim(), |t, s| m.scale((-rate * (t - s)).exp())).expect("consistent dimension")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::funcalc::Role;
    use crate::transforms::forward_transform;
    use std::sync::Arc;

    fn grid(n: usize) -> TimeGrid {
        TimeGrid::new(1.0, n).unwrap()
    }

    #[test]
    fn zero_kernel_examples() {
        let k = Kernel::zeros(grid(32), 2);
        assert_eq!(k.l2_norm(), 0.0);
        assert_eq!(k.compose_rho(), k);
        let inv = k.invert_rho(1e-12, 10).unwrap();
        assert_eq!(inv.eta, k);
        let w = WienerPath::from_fn(grid(32), 2, |t| vec![t, -t * t]).unwrap();
        let f = k.path_functionals(&w).unwrap();
        assert_eq!(f.quad_form, 0.0);
        assert_eq!(f.h, 0.0);
        assert!(f.g.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn storage_and_access() {
        let g = grid(4);
        let k = Kernel::from_lower_fn(g, 2, |t, s| Mat::from_row_major(2, vec![t, s, 1.0, t * s])).unwrap();
        assert_eq!(k.get(3, 1), Mat::from_row_major(2, vec![0.75, 0.25, 1.0, 0.1875]));
        assert_eq!(k.get(1, 3), k.get(3, 1).transpose());
        assert_eq!(k.get(2, 2), Mat::from_row_major(2, vec![0.5, 0.75, 0.75, 0.25]));
        let back = Kernel::load(k.dump()).unwrap();
        assert_eq!(back, k);
        assert!(Kernel::from_lower_data(g, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn norm_of_embedded_chi() {
        // |eta_chi|^2 = 2 int_0^T t |chi(t)|^2 dt; for chi = c: c^2 T^2 (d = 1)
        for n in [10, 40] {
            let g = grid(n);
            let c = 0.3;
            let k = Kernel::embed_chi(&MatrixFunction::constant(g, Mat::scalar(1, c), Role::Chi));
            assert!((k.l2_norm() - c).abs() < 1e-14);
        }
        let k = Kernel::embed_chi(&MatrixFunction::constant(grid(16), Mat::scalar(3, 0.1), Role::Chi));
        assert!((k.l2_norm() - 0.1 * 3f64.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn constant_kernel_norm_and_rho() {
        // eta = c on the square: |eta| = c T, rho(s,t) = c - c^2 (T - max(s,t))
        let g = grid(64);
        let c = 0.2;
        let k = Kernel::from_lower_fn(g, 1, |_, _| Mat::scalar(1, c)).unwrap();
        assert!((k.l2_norm() - c).abs() < 1e-14);
        let rho = k.compose_rho();
        for i in 0..=64 {
            for j in 0..=i {
                let want = c - c * c * (1.0 - g.time(i));
                assert!((rho.lower(i, j)[0] - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn rho_of_embedded_chi_is_sigma() {
        // compose_rho(eta_chi) = eta_sigma with sigma = chi - int_t^T chi^T chi
        let g = grid(40);
        let chi = MatrixFunction::sampled(
            g,
            |t| Mat::from_row_major(2, vec![0.2 * t, -0.1, 0.15, 0.1 * (3.0 * t).cos()]),
            Role::Chi,
        );
        let rho = Kernel::embed_chi(&chi).compose_rho();
        let tail = chi.transpose().zip_with(&chi, |a, b| a * b).unwrap().tail_integral();
        for i in 0..=40 {
            let sigma = chi.at(i) - tail.at(i);
            for j in 0..=i {
                let blk = Mat::from_row_major(2, rho.lower(i, j).to_vec());
                assert!((&blk - &sigma).max_abs() < 1e-15);
            }
        }
    }

    #[test]
    fn rho_close_to_eta_at_fourth_order() {
        let g = grid(48);
        for c in [0.05, 0.1, 0.2] {
            let k = decay_kernel(g, &Mat::scalar(2, c), 1.0);
            let rho = k.compose_rho();
            let gap = rho.distance(&k).unwrap();
            let nk = k.l2_norm();
            assert!(gap * gap <= 0.5 * nk.powi(4) + 1e-15);
            assert!(gap <= 0.5 * nk * nk);
        }
    }

    #[test]
    fn invert_round_trip() {
        let g = grid(48);
        let k = decay_kernel(g, &Mat::from_row_major(2, vec![0.1, 0.05, -0.02, 0.08]), 0.7);
        let rho = k.compose_rho();
        let rep = rho.invert_rho(1e-12, 100).unwrap();
        assert!(rep.residual <= 1e-12);
        assert!(rep.eta.distance(&k).unwrap() < 1e-10);
    }

    #[test]
    fn invert_preconditions() {
        let g = grid(16);
        let big = Kernel::from_lower_fn(g, 1, |_, _| Mat::scalar(1, 0.3)).unwrap();
        assert!(matches!(big.invert_rho(1e-12, 50), Err(Error::PreconditionViolated(_))));
        let k = Kernel::from_lower_fn(g, 1, |_, _| Mat::scalar(1, 0.2)).unwrap();
        assert!(matches!(
            k.invert_rho(1e-14, 2),
            Err(Error::NoConvergence { iterations: 2, .. })
        ));
    }

    #[test]
    fn resolvent_of_constant_kernel() {
        // rho = c on [0,1]^2: rho^{*k} = c^k, phi = c / (1 - c)
        let g = grid(20);
        let c = 0.2;
        let k = Kernel::from_lower_fn(g, 1, |_, _| Mat::scalar(1, c)).unwrap();
        let rep = k.resolvent_series(30).unwrap();
        let want = c / (1.0 - c);
        assert!((rep.sum.lower(7, 3)[0] - want).abs() < 1e-15 + rep.tail_bound);
        assert!((rep.term_norms[2] - c.powi(3)).abs() < 1e-14);
        assert!(rep.tail_bound < 1e-20);
        let big = Kernel::from_lower_fn(g, 1, |_, _| Mat::scalar(1, 0.4)).unwrap();
        assert!(big.resolvent_series(5).is_err());
    }

    #[test]
    fn resolvent_satisfies_its_equation() {
        // phi = rho + rho * phi up to the truncation tail
        let g = grid(24);
        let rho = decay_kernel(g, &Mat::from_row_major(2, vec![0.12, -0.04, 0.03, 0.09]), 1.3);
        let terms = 12;
        let phi = rho.resolvent_series(terms).unwrap();
        let longer = rho.resolvent_series(terms + 1).unwrap();
        // rho + rho*phi_terms = phi_{terms+1}
        let step = longer.sum.distance(&phi.sum).unwrap();
        assert!(step <= phi.tail_bound);
        assert!(phi.term_norms.windows(2).all(|w| w[1] <= w[0] * rho.l2_norm() * 1.01));
    }

    #[test]
    fn g_of_embedded_chi_matches_linear_transform() {
        let g = grid(50);
        let chi = MatrixFunction::analytic(
            g,
            Arc::new(|t| Mat::from_row_major(2, vec![0.3, t, -0.2 * t, 0.1])),
            None,
            Role::Chi,
        );
        let w = WienerPath::from_fn(g, 2, |t| vec![(5.0 * t).sin(), t * t - t]).unwrap();
        let k = Kernel::embed_chi(&chi);
        let gw = k.apply_g(&w).unwrap();
        let fw = forward_transform(&chi, &w).unwrap();
        for (i, x) in gw.iter().enumerate() {
            // F_chi(w) = forward(w) - w
            let want = fw.values()[i] - w.values()[i];
            assert!((x - want).abs() < 1e-13, "{i}: {x} vs {want}");
        }
    }

    #[test]
    fn path_functionals_on_simple_paths() {
        // eta = 1 (d = 1): Y_i = w_i, q = sum w_i dw_i, h = 1/2 trap(w^2), G = -int w
        let g = grid(4);
        let k = Kernel::from_lower_fn(g, 1, |_, _| Mat::scalar(1, 1.0)).unwrap();
        let w = WienerPath::new(g, 1, vec![0.0, 1.0, 3.0, 2.0, 2.0]).unwrap();
        let f = k.path_functionals(&w).unwrap();
        assert_eq!(f.quad_form, 1.0 * 2.0 + 3.0 * -1.0 + 2.0 * 0.0);
        let trap = 0.25 * (1.0 + 9.0 + 4.0 + 0.5 * 4.0);
        assert!((f.h - 0.5 * trap).abs() < 1e-15);
        assert!((f.g[4] + 0.25 * (1.0 + 3.0 + 2.0 + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn batched_functionals_match_single_path() {
        let g = grid(48);
        let m = Mat::from_row_major(2, vec![0.3, -0.2, 0.1, 0.4]);
        let k = decay_kernel(g, &m, 1.3);
        let ws: Vec<WienerPath> = (0..5)
            .map(|p| WienerPath::from_fn(g, 2, |t| vec![(3.0 * t + p as f64).sin() - (p as f64).sin(), t * t - 0.2 * p as f64 * t]).unwrap())
            .collect();
        let batch = k.path_functionals_batch(&ws).unwrap();
        for (w, b) in ws.iter().zip(&batch) {
            let one = k.path_functionals(w).unwrap();
            assert!((one.quad_form - b.quad_form).abs() < 1e-13);
            assert!((one.h - b.h).abs() < 1e-13);
            assert!(one.g.iter().zip(&b.g).all(|(x, y)| (x - y).abs() < 1e-13));
        }
    }

    #[test]
    fn lane_variants_are_bit_identical() {
        let g = grid(40);
        for d in [1, 2, 3] {
            let m = Mat::from_row_major(d, (0..d * d).map(|k| (k as f64 * 0.9).cos()).collect());
            let k = decay_kernel(g, &m, 0.9);
            let dwt: Vec<f64> = (0..40 * d * LANES).map(|i| (i as f64 * 0.37).sin() * 0.1).collect();
            let reference = k.inner_sums_lanes_any(&dwt);
            for other in [k.inner_sums_lanes_generic(&dwt), k.inner_sums_lanes(&dwt)] {
                assert!(reference.iter().zip(&other).all(|(a, b)| a.to_bits() == b.to_bits()), "d = {d}");
            }
        }
    }
}
