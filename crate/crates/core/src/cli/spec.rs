//! Problem specification files and their translation into solver inputs.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::funcalc::{MatFn, MatrixFunction, Role, TimeGrid};
use crate::kernels::{decay_kernel, Kernel};
use crate::laplace::{sigma_from_chi, QuadraticProblem, Route};
use crate::matcore::Mat;
use crate::montecarlo::{Exponent, TestFunctional};
use crate::oracles::{constant_chi_prefactor, oracle_case, OracleName};

pub const MIN_STEPS: usize = 16;
pub const MAX_DIM: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum RouteChoice {
    Riccati,
    Jacobi,
    #[default]
    Both,
}

impl RouteChoice {
    pub fn routes(&self) -> Vec<Route> {
        match self {
            RouteChoice::Riccati => vec![Route::Riccati],
            RouteChoice::Jacobi => vec![Route::Jacobi],
            RouteChoice::Both => vec![Route::Riccati, Route::Jacobi],
        }
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McSpec {
    pub paths: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub functionals: Vec<TestFunctional>,
    /// Also run on the doubled grid to estimate the discretisation bias.
    #[serde(default = "default_true")]
    pub richardson: bool,
}

/// Matrix literals are lists of rows.
pub type MatrixLiteral = Vec<Vec<f64>>;

fn literal(m: &MatrixLiteral, d: usize) -> Result<Mat> {
    let mat = Mat::from_rows(m).map_err(|e| Error::Spec(e.to_string()))?;
    if mat.dim() != d {
        return Err(Error::Spec(format!("matrix literal is {0}x{0}, expected {d}x{d}", mat.dim())));
    }
    Ok(mat)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MatrixFunctionSpec {
    Constant { matrix: MatrixLiteral },
    /// One matrix per node of the spec grid.
    Samples { values: Vec<MatrixLiteral> },
    /// `a + b t`.
    Affine { a: MatrixLiteral, b: MatrixLiteral },
    /// `base + amplitude sin(omega t + phase)`.
    Harmonic {
        base: MatrixLiteral,
        amplitude: MatrixLiteral,
        omega: f64,
        #[serde(default)]
        phase: f64,
    },
}

impl MatrixFunctionSpec {
    /// Builds on `grid`; sampled input lives on `spec_grid` and is interpolated when they differ.
    pub fn build(&self, spec_grid: &TimeGrid, grid: &TimeGrid, d: usize, role: Role) -> Result<MatrixFunction> {
        match self {
            MatrixFunctionSpec::Constant { matrix } => Ok(MatrixFunction::constant(*grid, literal(matrix, d)?, role)),
            MatrixFunctionSpec::Samples { values } => {
                if values.len() != spec_grid.nodes() {
                    return Err(Error::Spec(format!(
                        "{} samples given, n_steps + 1 = {} required",
                        values.len(),
                        spec_grid.nodes()
                    )));
                }
                let samples = values.iter().map(|m| literal(m, d)).collect::<Result<Vec<_>>>()?;
                let f = MatrixFunction::from_samples(*spec_grid, samples, role)?;
                if spec_grid == grid {
                    Ok(f)
                } else {
                    Ok(f.resample(*grid)?.with_role(role))
                }
            }
            MatrixFunctionSpec::Affine { a, b } => {
                let (a, b) = (literal(a, d)?, literal(b, d)?);
                let b2 = b.clone();
                let f: MatFn = Arc::new(move |t| a.axpy(t, &b));
                let df: MatFn = Arc::new(move |_| b2.clone());
                Ok(MatrixFunction::analytic(*grid, f, Some(df), role))
            }
            MatrixFunctionSpec::Harmonic {
                base,
                amplitude,
                omega,
                phase,
            } => {
                let (base, amp) = (literal(base, d)?, literal(amplitude, d)?);
                let (w, p) = (*omega, *phase);
                let amp2 = amp.clone();
                let f: MatFn = Arc::new(move |t| base.axpy((w * t + p).sin(), &amp));
                let df: MatFn = Arc::new(move |t| amp2.scale(w * (w * t + p).cos()));
                Ok(MatrixFunction::analytic(*grid, f, Some(df), role))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelSpec {
    /// `eta(t, s) = chi(max(s, t))` (transposed above the diagonal).
    EmbedChi { chi: MatrixFunctionSpec },
    /// `M` below the diagonal, `M^T` above.
    Constant { matrix: MatrixLiteral },
    /// `M e^{-rate (t - s)}` for `t >= s`, optionally rescaled to a given `L^2` norm.
    Decay {
        matrix: MatrixLiteral,
        rate: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        target_norm: Option<f64>,
    },
    /// Flattened lower triangle on the spec grid, see [`Kernel::from_lower_data`].
    LowerSamples { lower: Vec<f64> },
}

impl KernelSpec {
    pub fn build(&self, spec_grid: &TimeGrid, grid: &TimeGrid, d: usize) -> Result<Kernel> {
        match self {
            KernelSpec::EmbedChi { chi } => Ok(Kernel::embed_chi(&chi.build(spec_grid, grid, d, Role::Chi)?)),
            KernelSpec::Constant { matrix } => {
                let m = literal(matrix, d)?;
                Kernel::from_lower_fn(*grid, d, |_, _| m.clone())
            }
            KernelSpec::Decay {
                matrix,
                rate,
                target_norm,
            } => {
                let k = decay_kernel(*grid, &literal(matrix, d)?, *rate);
                match target_norm {
                    None => Ok(k),
                    Some(target) => {
                        let norm = k.l2_norm();
                        if norm == 0.0 {
                            return Err(Error::Spec("cannot rescale a zero kernel".into()));
                        }
                        Ok(k.scaled(target / norm))
                    }
                }
            }
            KernelSpec::LowerSamples { lower } => {
                if spec_grid != grid {
                    return Err(Error::Spec(
                        "sampled kernels exist only on their own grid; disable mc.richardson".into(),
                    ));
                }
                Kernel::from_lower_data(*grid, d, lower.clone())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GammaKappaSpec {
    pub gamma: MatrixFunctionSpec,
    pub kappa: MatrixFunctionSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BuiltinSpec {
    pub name: String,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    Sigma(MatrixFunctionSpec),
    GammaKappa(GammaKappaSpec),
    Eta(KernelSpec),
    Rho(KernelSpec),
    Builtin(BuiltinSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    #[serde(rename = "T")]
    pub horizon: f64,
    pub d: usize,
    pub n_steps: usize,
    pub problem: ProblemKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mc: Option<McSpec>,
    #[serde(default)]
    pub route: RouteChoice,
    #[serde(default)]
    pub strict_admissibility: bool,
}

pub const BUILTINS: [&str; 5] = ["harmonic-oscillator", "cameron-martin", "levy-area", "ou-square", "constant-chi"];

/// A closed-form value the numerical pipeline should reproduce.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub name: String,
    pub lambda: f64,
    pub closed_form: f64,
    pub validity: String,
}

/// A quadratic exponent ready for the Laplace routes and the Monte Carlo harness.
#[derive(Debug, Clone)]
pub struct QuadraticSetup {
    pub problem: QuadraticProblem,
    /// Exponent as written in the problem (`p_sigma`, or `q` for gamma/kappa input).
    pub exponent: Exponent,
    /// A `chi` supplied directly, for which `sigma` was derived.
    pub given_chi: Option<MatrixFunction>,
    pub reference: Option<Reference>,
}

#[derive(Debug, Clone)]
pub enum BuiltProblem {
    Quadratic(QuadraticSetup),
    Kernel { kernel: Kernel, is_rho: bool },
}

impl ProblemSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let spec: ProblemSpec = serde_json::from_str(text).map_err(|e| Error::Spec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::Spec(format!("T must be positive, got {}", self.horizon)));
        }
        if self.d == 0 || self.d > MAX_DIM {
            return Err(Error::Spec(format!("d must be in 1..={MAX_DIM}, got {}", self.d)));
        }
        if self.n_steps < MIN_STEPS {
            return Err(Error::Spec(format!("n_steps must be at least {MIN_STEPS}, got {}", self.n_steps)));
        }
        if let ProblemKind::Builtin(b) = &self.problem {
            if !BUILTINS.contains(&b.name.as_str()) {
                return Err(Error::Spec(format!("unknown builtin '{}'; known: {}", b.name, BUILTINS.join(", "))));
            }
        }
        if let Some(mc) = &self.mc {
            if mc.paths < 2 {
                return Err(Error::Spec("mc.paths must be at least 2".into()));
            }
            for f in &mc.functionals {
                f.validate(self.d, self.horizon)?;
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.horizon, self.n_steps)
    }

    /// Builds the problem on the spec grid refined `refine` times.
    pub fn build(&self, refine: usize) -> Result<BuiltProblem> {
        let spec_grid = self.grid()?;
        let grid = spec_grid.refined(refine);
        let d = self.d;
        match &self.problem {
            ProblemKind::Sigma(s) => {
                let sigma = s.build(&spec_grid, &grid, d, Role::Sigma)?;
                Ok(BuiltProblem::Quadratic(QuadraticSetup {
                    exponent: Exponent::Sigma(sigma.clone()),
                    problem: QuadraticProblem::from_sigma(sigma),
                    given_chi: None,
                    reference: None,
                }))
            }
            ProblemKind::GammaKappa(gk) => {
                let gamma = gk.gamma.build(&spec_grid, &grid, d, Role::Gamma)?;
                let kappa = gk.kappa.build(&spec_grid, &grid, d, Role::Kappa)?;
                Ok(BuiltProblem::Quadratic(QuadraticSetup {
                    problem: QuadraticProblem::from_gamma_kappa(&gamma, &kappa)?,
                    exponent: Exponent::GammaKappa(gamma, kappa),
                    given_chi: None,
                    reference: None,
                }))
            }
            ProblemKind::Eta(k) => Ok(BuiltProblem::Kernel {
                kernel: k.build(&spec_grid, &grid, d)?,
                is_rho: false,
            }),
            ProblemKind::Rho(k) => Ok(BuiltProblem::Kernel {
                kernel: k.build(&spec_grid, &grid, d)?,
                is_rho: true,
            }),
            ProblemKind::Builtin(b) => build_builtin(b, &grid, d).map(BuiltProblem::Quadratic),
        }
    }
}

fn oracle_reference(name: OracleName, lambda: f64, grid: &TimeGrid, d: usize) -> Result<Reference> {
    let c = oracle_case(name, lambda, grid.horizon(), d)?;
    Ok(Reference {
        name: name.to_string(),
        lambda,
        closed_form: c.closed_form,
        validity: c.validity,
    })
}

fn build_builtin(b: &BuiltinSpec, grid: &TimeGrid, d: usize) -> Result<QuadraticSetup> {
    let l = b.lambda;
    match b.name.as_str() {
        "harmonic-oscillator" | "cameron-martin" => {
            let name: OracleName = b.name.parse()?;
            let gamma = MatrixFunction::zeros(*grid, d, Role::Gamma);
            let kappa = MatrixFunction::constant(*grid, Mat::scalar(d, -l * l), Role::Kappa);
            Ok(QuadraticSetup {
                problem: QuadraticProblem::from_gamma_kappa(&gamma, &kappa)?,
                exponent: Exponent::GammaKappa(gamma, kappa),
                given_chi: None,
                reference: Some(oracle_reference(name, l, grid, d)?),
            })
        }
        "levy-area" => {
            if d != 2 {
                return Err(Error::Spec(format!("levy-area needs d = 2, got {d}")));
            }
            let sigma = MatrixFunction::constant(*grid, Mat::symplectic().scale(0.5 * l), Role::Sigma);
            Ok(QuadraticSetup {
                exponent: Exponent::Sigma(sigma.clone()),
                problem: QuadraticProblem::from_sigma(sigma),
                given_chi: None,
                reference: Some(oracle_reference(OracleName::LevyArea, l, grid, d)?),
            })
        }
        "ou-square" => {
            let sigma = MatrixFunction::constant(*grid, Mat::scalar(d, l), Role::Sigma);
            Ok(QuadraticSetup {
                exponent: Exponent::Sigma(sigma.clone()),
                problem: QuadraticProblem::from_sigma(sigma),
                given_chi: None,
                reference: Some(oracle_reference(OracleName::OuSquare, l, grid, d)?),
            })
        }
        "constant-chi" => {
            let chi = MatrixFunction::constant(*grid, Mat::scalar(d, l), Role::Chi);
            // sigma(t) = l - l^2 (T - t), sigma' = l^2
            let sigma = sigma_from_chi(&chi).with_exact_derivative(Arc::new(move |_| Mat::scalar(d, l * l)));
            Ok(QuadraticSetup {
                exponent: Exponent::Sigma(sigma.clone()),
                problem: QuadraticProblem::from_sigma(sigma),
                given_chi: Some(chi),
                reference: Some(Reference {
                    name: "constant-chi".into(),
                    lambda: l,
                    closed_form: constant_chi_prefactor(l, grid.horizon(), d),
                    validity: "any lambda".into(),
                }),
            })
        }
        other => Err(Error::Spec(format!("unknown builtin '{other}'"))),
    }
}
