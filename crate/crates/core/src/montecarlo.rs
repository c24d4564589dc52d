//! Brownian path sampling, the Ito functionals `p_sigma` and `q`, streaming estimators,
//! and a common-random-numbers harness that checks the change-of-variables identities.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::funcalc::{trapezoid_scalar, MatrixFunction, TimeGrid};
use crate::kernels::Kernel;
use crate::transforms::{InverseTransform, WienerPath};

/// Paths per accumulation chunk; chunk boundaries and merge order depend only on `n_paths`.
pub const CHUNK: usize = 2048;

/// Default acceptance threshold on `|z|`.
pub const Z_THRESHOLD: f64 = 4.0;

/// Largest kernel norm the harness will verify.
pub const MAX_VERIFIED_ETA_NORM: f64 = 0.5;

/// Paths evaluated together so kernel cases reuse each pass over the kernel.
const BATCH: usize = crate::kernels::LANES;

/// Brownian path number `path_index` of the stream `seed`.
///
/// Each path owns the ChaCha stream `path_index` of the generator keyed by `seed`, and
/// draws its increments in (step, coordinate) order, so it can be regenerated alone.
pub fn sample_path(seed: u64, path_index: u64, grid: &TimeGrid, d: usize) -> WienerPath {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path_index);
    let sd = grid.dt().sqrt();
    let mut values = vec![0.0; grid.nodes() * d];
    for idx in d..values.len() {
        let z: f64 = rng.sample(StandardNormal);
        values[idx] = values[idx - d] + sd * z;
    }
    WienerPath::new(*grid, d, values).expect("consistent path")
}

fn check(f: &MatrixFunction, w: &WienerPath) -> Result<()> {
    f.grid().check_same(w.grid())?;
    if f.dim() != w.dim() {
        return Err(Error::GridMismatch("path and matrix dimensions differ".into()));
    }
    Ok(())
}

/// `p_sigma(w) = sum_i <sigma(t_i) w(t_i), w(t_{i+1}) - w(t_i)>`.
pub fn ito_p_sigma(sigma: &MatrixFunction, w: &WienerPath) -> Result<f64> {
    check(sigma, w)?;
    let d = w.dim();
    let v = w.values();
    let mut acc = 0.0;
    for i in 0..w.grid().steps() {
        let m = sigma.at(i).as_slice();
        let (wi, wn) = (&v[i * d..(i + 1) * d], &v[(i + 1) * d..(i + 2) * d]);
        for r in 0..d {
            let sw: f64 = (0..d).map(|c| m[r * d + c] * wi[c]).sum();
            acc += sw * (wn[r] - wi[r]);
        }
    }
    Ok(acc)
}

/// `q(w) = p_gamma(w) + 1/2 int <kappa w, w> dt`.
pub fn quad_q(gamma: &MatrixFunction, kappa: &MatrixFunction, w: &WienerPath) -> Result<f64> {
    check(kappa, w)?;
    let d = w.dim();
    let quad: Vec<f64> = (0..w.grid().nodes())
        .map(|i| {
            let wi = w.at(i);
            let m = kappa.at(i).as_slice();
            (0..d)
                .map(|r| wi[r] * (0..d).map(|c| m[r * d + c] * wi[c]).sum::<f64>())
                .sum()
        })
        .collect();
    Ok(ito_p_sigma(gamma, w)? + 0.5 * trapezoid_scalar(w.grid(), &quad))
}

/// Streaming mean and sum of squared deviations.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Welford {
    pub count: u64,
    pub mean: f64,
    pub m2: f64,
}

impl Welford {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn merge(&mut self, other: &Welford) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let n = (self.count + other.count) as f64;
        let delta = other.mean - self.mean;
        self.mean += delta * other.count as f64 / n;
        self.m2 += other.m2 + delta * delta * self.count as f64 * other.count as f64 / n;
        self.count += other.count;
    }

    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }

    pub fn stderr(&self) -> f64 {
        if self.count == 0 {
            return 0.0;
        }
        (self.variance() / self.count as f64).sqrt()
    }
}

/// Evaluates `k` per-path outputs for paths `0..n_paths` and accumulates each.
///
/// Chunks run on the current rayon pool; their partial accumulators are merged in
/// chunk order, so the result does not depend on the number of workers.
pub fn accumulate<F>(n_paths: usize, k: usize, per_path: F) -> Result<Vec<Welford>>
where
    F: Fn(u64, &mut [f64]) -> Result<()> + Sync,
{
    accumulate_batched(n_paths, k, 1, |first, _, out| per_path(first, out))
}

/// Like [`accumulate`], but hands out up to `batch` consecutive paths at a time.
///
/// `per_batch(first, count, out)` fills `out[p * k..(p + 1) * k]` for path `first + p`.
/// Samples are pushed in path order, so the batch size does not affect the result.
pub fn accumulate_batched<F>(n_paths: usize, k: usize, batch: usize, per_batch: F) -> Result<Vec<Welford>>
where
    F: Fn(u64, usize, &mut [f64]) -> Result<()> + Sync,
{
    let batch = batch.clamp(1, CHUNK);
    let chunks = n_paths.div_ceil(CHUNK);
    let partials: Vec<Result<Vec<Welford>>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = vec![Welford::default(); k];
            let mut out = vec![0.0; k * batch];
            let end = ((c + 1) * CHUNK).min(n_paths);
            let mut idx = c * CHUNK;
            while idx < end {
                let count = batch.min(end - idx);
                per_batch(idx as u64, count, &mut out[..count * k])?;
                for row in out[..count * k].chunks_exact(k) {
                    for (a, x) in acc.iter_mut().zip(row) {
                        a.push(*x);
                    }
                }
                idx += count;
            }
            Ok(acc)
        })
        .collect();
    let mut total = vec![Welford::default(); k];
    for p in partials {
        for (t, a) in total.iter_mut().zip(p?) {
            t.merge(&a);
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
    pub n_paths: usize,
    pub n_steps: usize,
    pub seed: u64,
}

/// Monte Carlo mean of `functional` over `n_paths` reproducible paths.
pub fn estimate(
    functional: impl Fn(&WienerPath) -> f64 + Sync,
    n_paths: usize,
    seed: u64,
    grid: &TimeGrid,
    d: usize,
) -> Result<Estimate> {
    if n_paths < 2 {
        return Err(Error::PreconditionViolated("an estimate needs at least two paths".into()));
    }
    let acc = accumulate(n_paths, 1, |idx, out| {
        out[0] = functional(&sample_path(seed, idx, grid, d));
        Ok(())
    })?;
    Ok(Estimate {
        mean: acc[0].mean,
        stderr: acc[0].stderr(),
        n_paths,
        n_steps: grid.steps(),
        seed,
    })
}

/// Bounded test functionals `f` on path space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TestFunctional {
    Constant,
    /// `cos <ell, w(T)>`.
    Cosine { ell: Vec<f64> },
    /// `cos sum_k <ell_k, w(t_k)>` with each `t_k` snapped to the nearest node.
    Cylinder { times: Vec<f64>, ell: Vec<Vec<f64>> },
}

impl TestFunctional {
    pub fn validate(&self, d: usize, horizon: f64) -> Result<()> {
        match self {
            TestFunctional::Constant => Ok(()),
            TestFunctional::Cosine { ell } if ell.len() == d => Ok(()),
            TestFunctional::Cosine { ell } => Err(Error::Spec(format!("cosine functional has {} weights, d = {d}", ell.len()))),
            TestFunctional::Cylinder { times, ell } => {
                if times.len() != ell.len() || times.is_empty() {
                    return Err(Error::Spec("cylinder functional needs one weight vector per time".into()));
                }
                if ell.iter().any(|l| l.len() != d) {
                    return Err(Error::Spec(format!("cylinder weights must have length d = {d}")));
                }
                if times.iter().any(|t| !(0.0..=horizon).contains(t)) {
                    return Err(Error::Spec("cylinder times must lie in [0, T]".into()));
                }
                Ok(())
            }
        }
    }

    pub fn name(&self) -> String {
        match self {
            TestFunctional::Constant => "constant-1".into(),
            TestFunctional::Cosine { ell } => format!("cosine{ell:?}"),
            TestFunctional::Cylinder { times, .. } => format!("cylinder@{times:?}"),
        }
    }

    pub fn eval(&self, w: &WienerPath) -> f64 {
        let dotp = |l: &[f64], x: &[f64]| l.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        match self {
            TestFunctional::Constant => 1.0,
            TestFunctional::Cosine { ell } => dotp(ell, w.terminal()).cos(),
            TestFunctional::Cylinder { times, ell } => {
                let g = w.grid();
                let arg: f64 = times
                    .iter()
                    .zip(ell)
                    .map(|(t, l)| {
                        let i = ((t / g.dt()).round() as usize).min(g.steps());
                        dotp(l, w.at(i))
                    })
                    .sum();
                arg.cos()
            }
        }
    }
}

/// Exponent on the left-hand side of the linear-transform identity.
#[derive(Debug, Clone)]
pub enum Exponent {
    Sigma(MatrixFunction),
    GammaKappa(MatrixFunction, MatrixFunction),
}

impl Exponent {
    fn eval(&self, w: &WienerPath) -> Result<f64> {
        match self {
            Exponent::Sigma(s) => ito_p_sigma(s, w),
            Exponent::GammaKappa(g, k) => quad_q(g, k, w),
        }
    }
}

/// One identity `E[L] = E[R]` discretised on a fixed grid.
#[derive(Debug, Clone)]
pub enum IdentityCase {
    /// `E[e^{exponent} f] = e^{log_prefactor} E[f o (iota + F_chi)^{-1}]`.
    LinearTransform {
        exponent: Exponent,
        inverse: InverseTransform,
        log_prefactor: f64,
    },
    /// `E[f(iota + G_eta) e^{q_rho}] = e^{|eta|^2 / 4} E[f]`.
    KernelComposition { eta: Kernel, rho: Kernel, log_rhs: f64 },
    /// `E[f(iota + G_eta) e^{q_eta - h_eta}] = E[f]`.
    KernelGirsanov { eta: Kernel },
}

fn check_eta_norm(eta: &Kernel) -> Result<f64> {
    let norm = eta.l2_norm();
    if norm > MAX_VERIFIED_ETA_NORM {
        return Err(Error::ParameterOutOfRange(format!(
            "|eta|_2 = {norm} exceeds the verified range {MAX_VERIFIED_ETA_NORM}"
        )));
    }
    Ok(norm)
}

impl IdentityCase {
    pub fn linear_transform(exponent: Exponent, chi: &MatrixFunction, alpha: &MatrixFunction, log_prefactor: f64) -> Result<Self> {
        Ok(IdentityCase::LinearTransform {
            exponent,
            inverse: InverseTransform::new(chi, alpha)?,
            log_prefactor,
        })
    }

    pub fn kernel_composition(eta: Kernel) -> Result<Self> {
        let norm = check_eta_norm(&eta)?;
        let rho = eta.compose_rho();
        Ok(IdentityCase::KernelComposition {
            eta,
            rho,
            log_rhs: 0.25 * norm * norm,
        })
    }

    pub fn kernel_girsanov(eta: Kernel) -> Result<Self> {
        check_eta_norm(&eta)?;
        Ok(IdentityCase::KernelGirsanov { eta })
    }

    pub fn name(&self) -> &'static str {
        match self {
            IdentityCase::LinearTransform { .. } => "linear-transform",
            IdentityCase::KernelComposition { .. } => "kernel-composition",
            IdentityCase::KernelGirsanov { .. } => "kernel-girsanov",
        }
    }

    /// `(L, R)` on one path.
    pub fn sides(&self, w: &WienerPath, f: &TestFunctional) -> Result<(f64, f64)> {
        Ok(self.sides_batch(std::slice::from_ref(w), f)?[0])
    }

    /// `(L, R)` on each path; kernel cases share their passes over the kernels.
    pub fn sides_batch(&self, ws: &[WienerPath], f: &TestFunctional) -> Result<Vec<(f64, f64)>> {
        match self {
            IdentityCase::LinearTransform {
                exponent,
                inverse,
                log_prefactor,
            } => ws
                .iter()
                .map(|w| {
                    let l = exponent.eval(w)?.exp() * f.eval(w);
                    let r = log_prefactor.exp() * f.eval(&inverse.apply(w)?);
                    Ok((l, r))
                })
                .collect(),
            IdentityCase::KernelComposition { eta, rho, log_rhs } => {
                let pe = eta.path_functionals_batch(ws)?;
                let pr = rho.path_functionals_batch(ws)?;
                Ok(ws
                    .iter()
                    .zip(pe.iter().zip(&pr))
                    .map(|(w, (e, r))| (f.eval(&w.axpy(1.0, &e.g)) * r.quad_form.exp(), log_rhs.exp() * f.eval(w)))
                    .collect())
            }
            IdentityCase::KernelGirsanov { eta } => {
                let pf = eta.path_functionals_batch(ws)?;
                Ok(ws
                    .iter()
                    .zip(&pf)
                    .map(|(w, p)| (f.eval(&w.axpy(1.0, &p.g)) * (p.quad_form - p.h).exp(), f.eval(w)))
                    .collect())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Richardson {
    pub fine_steps: usize,
    pub diff_fine: f64,
    pub diff_fine_stderr: f64,
    /// `2 (mean D_n - mean D_2n)`, the leading-order bias of the coarse difference.
    pub bias_estimate: f64,
    pub bias_stderr: f64,
    /// `mean(2 D_2n - D_n)`, the difference with the first-order bias removed.
    pub extrapolated: f64,
    pub extrapolated_stderr: f64,
    pub z_extrapolated: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub case: String,
    pub functional: String,
    pub n_paths: usize,
    pub n_steps: usize,
    pub seed: u64,
    pub lhs: f64,
    pub lhs_stderr: f64,
    pub rhs: f64,
    pub rhs_stderr: f64,
    /// Mean of the per-path difference `L - R` (common random numbers).
    pub diff: f64,
    pub diff_stderr: f64,
    pub z: f64,
    /// `|bias_estimate|` when a Richardson pass ran, else zero.
    pub bias_allowance: f64,
    pub richardson: Option<Richardson>,
    pub z_threshold: f64,
    pub passed: bool,
}

fn z_score(mean: f64, stderr: f64) -> f64 {
    if stderr > 0.0 {
        mean / stderr
    } else if mean == 0.0 {
        0.0
    } else {
        mean.signum() * f64::INFINITY
    }
}

/// Estimates both sides of `case` on the same paths and reports the z-score of their difference.
///
/// With `fine` (the same case on the grid refined by two), paths are drawn on the fine
/// grid and observed on the coarse one, which yields a Richardson estimate of the
/// first-order discretisation bias from common random numbers.
pub fn verify_identity(
    case: &IdentityCase,
    fine: Option<&IdentityCase>,
    f: &TestFunctional,
    grid: &TimeGrid,
    d: usize,
    n_paths: usize,
    seed: u64,
) -> Result<VerifyReport> {
    if n_paths < 2 {
        return Err(Error::PreconditionViolated("verification needs at least two paths".into()));
    }
    f.validate(d, grid.horizon())?;
    let fine_grid = grid.refined(2);
    let acc = accumulate_batched(n_paths, 6, BATCH, |first, count, out| {
        let ids = first..first + count as u64;
        match fine {
            None => {
                let ws: Vec<WienerPath> = ids.map(|i| sample_path(seed, i, grid, d)).collect();
                for (row, (l, r)) in out.chunks_exact_mut(6).zip(case.sides_batch(&ws, f)?) {
                    row[..3].copy_from_slice(&[l, r, l - r]);
                }
            }
            Some(fc) => {
                let wfs: Vec<WienerPath> = ids.map(|i| sample_path(seed, i, &fine_grid, d)).collect();
                let ws = wfs.iter().map(|w| w.coarsen(2)).collect::<Result<Vec<_>>>()?;
                let coarse = case.sides_batch(&ws, f)?;
                let fine = fc.sides_batch(&wfs, f)?;
                for (row, ((l, r), (lf, rf))) in out.chunks_exact_mut(6).zip(coarse.into_iter().zip(fine)) {
                    let (dc, df) = (l - r, lf - rf);
                    row.copy_from_slice(&[l, r, dc, df, 2.0 * df - dc, dc - df]);
                }
            }
        }
        Ok(())
    })?;
    let z = z_score(acc[2].mean, acc[2].stderr());
    let richardson = fine.map(|_| Richardson {
        fine_steps: fine_grid.steps(),
        diff_fine: acc[3].mean,
        diff_fine_stderr: acc[3].stderr(),
        bias_estimate: 2.0 * acc[5].mean,
        bias_stderr: 2.0 * acc[5].stderr(),
        extrapolated: acc[4].mean,
        extrapolated_stderr: acc[4].stderr(),
        z_extrapolated: z_score(acc[4].mean, acc[4].stderr()),
    });
    let passed = z.abs() <= Z_THRESHOLD && richardson.as_ref().is_none_or(|r| r.z_extrapolated.abs() <= Z_THRESHOLD);
    Ok(VerifyReport {
        case: case.name().into(),
        functional: f.name(),
        n_paths,
        n_steps: grid.steps(),
        seed,
        lhs: acc[0].mean,
        lhs_stderr: acc[0].stderr(),
        rhs: acc[1].mean,
        rhs_stderr: acc[1].stderr(),
        diff: acc[2].mean,
        diff_stderr: acc[2].stderr(),
        z,
        bias_allowance: richardson.as_ref().map_or(0.0, |r| r.bias_estimate.abs()),
        richardson,
        z_threshold: Z_THRESHOLD,
        passed,
    })
}
