//! The subcommands. Each returns the files it wants written and a short summary;
//! a failure that should still leave its output on disk is carried in `failure`.

use serde_json::{json, Value};

use super::json;
use super::spec::{BuiltProblem, BuiltinSpec, McSpec, ProblemKind, ProblemSpec, QuadraticSetup, Reference, RouteChoice};
use crate::condexp::{covariance, cond_exp, gauss_hermite_expectation};
use crate::error::{Error, Result};
use crate::funcalc::{trapezoid_scalar, MatrixFunction};
use crate::kernels::Kernel;
use crate::laplace::{chi_consistency, LaplaceResult, Route, RouteSolution};
use crate::montecarlo::{verify_identity, IdentityCase, TestFunctional, VerifyReport, Z_THRESHOLD};
use crate::transforms::solve_alpha;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Agreement required between a deterministic prefactor and its closed form.
pub const ORACLE_TOLERANCE: f64 = 1e-6;
pub const INVERT_TOL: f64 = 1e-13;
pub const INVERT_MAX_ITER: usize = 500;
pub const RESOLVENT_TERMS: usize = 40;
/// Gauss-Hermite nodes per axis for the total-expectation check of `condexp`.
const GH_NODES: usize = 40;

#[derive(Debug, Clone, Default)]
pub struct Options {
    pub route: Option<RouteChoice>,
    pub strict: bool,
    pub seed: Option<u64>,
    pub paths: Option<usize>,
}

#[derive(Debug, Default)]
pub struct Outcome {
    /// `(suffix, bytes)`; written as `<stem>.<suffix>`.
    pub files: Vec<(String, Vec<u8>)>,
    pub summary: Vec<String>,
    pub failure: Option<Error>,
}

impl Outcome {
    fn fail(&mut self, e: Error) {
        self.failure.get_or_insert(e);
    }
}

fn quadratic(spec: &ProblemSpec, refine: usize, command: &str) -> Result<QuadraticSetup> {
    match spec.build(refine)? {
        BuiltProblem::Quadratic(q) => Ok(q),
        BuiltProblem::Kernel { .. } => Err(Error::Spec(format!(
            "{command} needs a sigma, gamma_kappa or builtin problem"
        ))),
    }
}

fn samples_json(f: &MatrixFunction) -> Value {
    Value::Array(f.samples().iter().map(|m| json!(m.as_slice())).collect())
}

fn route_json(res: &LaplaceResult, solved: &RouteSolution, reference: Option<&Reference>) -> Value {
    let diagnostics = match solved {
        RouteSolution::Riccati(r) => json!({
            "phi1_deviation": r.phi1_deviation,
            "phi1_deviation_below_half": r.phi1_deviation_below_half,
            "min_abs_det_phi1": r.min_abs_det_phi1,
            "residual_max": r.residual_max,
            "gronwall_phi2": r.gronwall_phi2,
            "gronwall_phi1_dev": r.gronwall_phi1_dev,
        }),
        RouteSolution::Jacobi(j) => json!({
            "det_a0": j.det_a0,
            "min_abs_det": j.min_abs_det,
            "sigma_prime_approximated": j.sigma_prime_approximated,
        }),
    };
    json!({
        "route": res.route,
        "prefactor": res.prefactor,
        "log_prefactor": res.log_prefactor,
        "trace_integral": res.trace_integral,
        "extra_log_factor": res.extra_log_factor,
        "reference_abs_error": reference.map(|r| (res.prefactor - r.closed_form).abs()),
        "admissibility_passed": res.diagnostics.all_passed(),
        "admissibility": res.diagnostics,
        "diagnostics": diagnostics,
        "chi": samples_json(&res.chi),
    })
}

fn routes(spec: &ProblemSpec, opts: &Options) -> Vec<Route> {
    opts.route.unwrap_or(spec.route).routes()
}

pub fn laplace(spec: &ProblemSpec, opts: &Options) -> Result<Outcome> {
    let q = quadratic(spec, 1, "laplace")?;
    let strict = opts.strict || spec.strict_admissibility;
    let mut out = Outcome::default();
    let mut entries = Vec::new();
    let (mut ric, mut jac) = (None, None);
    for route in routes(spec, opts) {
        match q.problem.solve_route(route) {
            Ok((solved, res)) => {
                entries.push(route_json(&res, &solved, q.reference.as_ref()));
                let mut line = format!("{route}: prefactor {:.12e}", res.prefactor);
                if let Some(r) = &q.reference {
                    line += &format!(" (closed form {:.12e})", r.closed_form);
                }
                out.summary.push(line);
                if strict {
                    if let Err(e) = res.diagnostics.enforce() {
                        out.fail(e);
                    }
                }
                match solved {
                    RouteSolution::Riccati(r) => ric = Some(r),
                    RouteSolution::Jacobi(j) => jac = Some(j),
                }
            }
            Err(e) => {
                out.summary.push(format!("{route}: {e}"));
                entries.push(json!({ "route": route, "error": e.to_string() }));
                out.fail(e);
            }
        }
    }
    let consistency = match (&ric, &jac) {
        (Some(r), Some(j)) => Some(chi_consistency(&q.problem.sigma, r, j)?),
        _ => None,
    };
    let doc = json!({
        "command": "laplace",
        "version": VERSION,
        "spec": spec,
        "reference": q.reference,
        "routes": entries,
        "consistency": consistency,
    });
    out.files.push(("laplace.result.json".into(), json::to_bytes(&doc)?));
    Ok(out)
}

/// `e^{extra + int tr(chi - sigma) / 2}` for a directly supplied `chi`.
fn given_chi_log_prefactor(q: &QuadraticSetup, chi: &MatrixFunction) -> Result<f64> {
    let diff = chi.sub(&q.problem.sigma)?;
    Ok(q.problem.extra_log_factor + 0.5 * trapezoid_scalar(chi.grid(), &diff.traces()))
}

/// `None` stands for the supplied `chi`.
fn linear_case(q: &QuadraticSetup, route: Option<Route>) -> Result<IdentityCase> {
    let (chi, log_prefactor) = match route {
        Some(r) => {
            let res = q.problem.solve(r)?;
            (res.chi, res.log_prefactor)
        }
        None => {
            let chi = q.given_chi.clone().expect("caller checked");
            let lp = given_chi_log_prefactor(q, &chi)?;
            (chi, lp)
        }
    };
    let alpha = solve_alpha(&chi)?.alpha;
    IdentityCase::linear_transform(q.exponent.clone(), &chi, &alpha, log_prefactor)
}

type LabelledCase = (String, IdentityCase, Option<IdentityCase>);

fn identity_cases(spec: &ProblemSpec, opts: &Options, richardson: bool) -> Result<Vec<LabelledCase>> {
    let coarse = spec.build(1)?;
    let fine = if richardson { Some(spec.build(2)?) } else { None };
    let mut cases = Vec::new();
    match (coarse, fine) {
        (BuiltProblem::Quadratic(q), fine) => {
            let fq = match fine {
                Some(BuiltProblem::Quadratic(f)) => Some(f),
                _ => None,
            };
            let mut variants: Vec<(String, Option<Route>)> =
                routes(spec, opts).into_iter().map(|r| (r.to_string(), Some(r))).collect();
            if q.given_chi.is_some() {
                variants.push(("given-chi".into(), None));
            }
            for (label, route) in variants {
                let case = linear_case(&q, route)?;
                let fine_case = fq.as_ref().map(|f| linear_case(f, route)).transpose()?;
                cases.push((label, case, fine_case));
            }
        }
        (BuiltProblem::Kernel { kernel, is_rho: false }, fine) => {
            let fk: Option<Kernel> = match fine {
                Some(BuiltProblem::Kernel { kernel, .. }) => Some(kernel),
                _ => None,
            };
            cases.push((
                "eta".into(),
                IdentityCase::kernel_composition(kernel.clone())?,
                fk.clone().map(IdentityCase::kernel_composition).transpose()?,
            ));
            cases.push((
                "eta".into(),
                IdentityCase::kernel_girsanov(kernel)?,
                fk.map(IdentityCase::kernel_girsanov).transpose()?,
            ));
        }
        (BuiltProblem::Kernel { is_rho: true, .. }, _) => {
            return Err(Error::Spec("verify needs eta rather than rho; run `kernel` to invert first".into()))
        }
    }
    Ok(cases)
}

fn report_json(label: &str, r: &VerifyReport, reference: Option<&Reference>, f: &TestFunctional) -> Value {
    // for f = 1 the left side alone estimates the closed form
    let reference_z = match (reference, f) {
        (Some(re), TestFunctional::Constant) if r.lhs_stderr > 0.0 => Some((r.lhs - re.closed_form) / r.lhs_stderr),
        _ => None,
    };
    json!({ "label": label, "report": r, "reference_z": reference_z })
}

pub fn verify(spec: &ProblemSpec, opts: &Options) -> Result<Outcome> {
    let mc: McSpec = spec.mc.clone().ok_or_else(|| Error::Spec("verify needs an mc block".into()))?;
    let n_paths = opts.paths.unwrap_or(mc.paths);
    let seed = opts.seed.unwrap_or(mc.seed);
    let functionals = if mc.functionals.is_empty() {
        vec![TestFunctional::Constant]
    } else {
        mc.functionals.clone()
    };
    let grid = spec.grid()?;
    let reference = match spec.build(1)? {
        BuiltProblem::Quadratic(q) => q.reference,
        BuiltProblem::Kernel { .. } => None,
    };
    let mut out = Outcome::default();
    let mut entries = Vec::new();
    for (label, case, fine) in identity_cases(spec, opts, mc.richardson)? {
        for f in &functionals {
            let r = verify_identity(&case, fine.as_ref(), f, &grid, spec.d, n_paths, seed)?;
            out.summary.push(format!(
                "{label} {} {}: L {:.6} R {:.6} z {:+.2}{} {}",
                r.case,
                r.functional,
                r.lhs,
                r.rhs,
                r.z,
                r.richardson
                    .as_ref()
                    .map_or(String::new(), |x| format!(" z_extrapolated {:+.2}", x.z_extrapolated)),
                if r.passed { "pass" } else { "FAIL" }
            ));
            if opts.strict && !r.passed {
                out.fail(Error::VerificationFailed(format!(
                    "{label} {} {}: |z| above {Z_THRESHOLD}",
                    r.case, r.functional
                )));
            }
            entries.push(report_json(&label, &r, reference.as_ref(), f));
        }
    }
    let doc = json!({
        "command": "verify",
        "version": VERSION,
        "spec": spec,
        "n_paths": n_paths,
        "seed": seed,
        "reference": reference,
        "reports": entries,
    });
    out.files.push(("verify.result.json".into(), json::to_bytes(&doc)?));
    Ok(out)
}

pub fn kernel(spec: &ProblemSpec, dump: bool) -> Result<Outcome> {
    let (kernel, is_rho) = match spec.build(1)? {
        BuiltProblem::Kernel { kernel, is_rho } => (kernel, is_rho),
        BuiltProblem::Quadratic(_) => return Err(Error::Spec("kernel needs an eta or rho problem".into())),
    };
    let mut out = Outcome::default();
    let (eta, rho, mut info) = if is_rho {
        let rho = kernel;
        let inv = rho.invert_rho(INVERT_TOL, INVERT_MAX_ITER)?;
        let recomposed = inv.eta.compose_rho().distance(&rho)?;
        out.summary.push(format!(
            "rho inverted in {} iterations, |eta|_2 = {:.12e}",
            inv.iterations,
            inv.eta.l2_norm()
        ));
        let info = json!({
            "inversion": {
                "iterations": inv.iterations,
                "residual": inv.residual,
                "recomposition_error": recomposed,
            }
        });
        (inv.eta, rho, info)
    } else {
        let eta = kernel;
        let rho = eta.compose_rho();
        let eta_norm = eta.l2_norm();
        let gap = rho.distance(&eta)?;
        let mut info = json!({
            "gap": gap,
            "gap_bound": 0.5 * eta_norm * eta_norm,
        });
        if rho.l2_norm() < 0.25 {
            let inv = rho.invert_rho(INVERT_TOL, INVERT_MAX_ITER)?;
            info["inversion"] = json!({
                "iterations": inv.iterations,
                "residual": inv.residual,
                "round_trip_error": inv.eta.distance(&eta)?,
            });
        }
        out.summary.push(format!("|eta|_2 = {eta_norm:.12e}, |rho|_2 = {:.12e}", rho.l2_norm()));
        (eta, rho, info)
    };
    if rho.l2_norm() < 1.0 / 3.0 {
        let series = rho.resolvent_series(RESOLVENT_TERMS)?;
        info["resolvent"] = json!({
            "terms": RESOLVENT_TERMS,
            "term_norms": series.term_norms,
            "tail_bound": series.tail_bound,
            "sum_norm": series.sum.l2_norm(),
        });
    }
    let doc = json!({
        "command": "kernel",
        "version": VERSION,
        "spec": spec,
        "eta_norm": eta.l2_norm(),
        "rho_norm": rho.l2_norm(),
        "details": info,
    });
    out.files.push(("kernel.result.json".into(), json::to_bytes(&doc)?));
    if dump {
        out.files.push(("kernel.eta.csv".into(), kernel_csv(&eta).into_bytes()));
        out.files.push(("kernel.rho.csv".into(), kernel_csv(&rho).into_bytes()));
    }
    Ok(out)
}

/// Lower triangle as CSV: `i,j,t_i,t_j` then the block entries row-major.
pub fn kernel_csv(k: &Kernel) -> String {
    let d = k.dim();
    let g = k.grid();
    let mut header = vec!["i".to_string(), "j".into(), "t_i".into(), "t_j".into()];
    for r in 0..d {
        for c in 0..d {
            header.push(format!("e{r}{c}"));
        }
    }
    let mut out = header.join(",") + "\n";
    for i in 0..g.nodes() {
        for j in 0..=i {
            let vals: Vec<String> = k.lower(i, j).iter().map(|v| format!("{v:.16e}")).collect();
            out += &format!("{i},{j},{:.16e},{:.16e},{}\n", g.time(i), g.time(j), vals.join(","));
        }
    }
    out
}

/// Points as `x1,x2;y1,y2;...`.
pub fn parse_points(text: &str, d: usize) -> Result<Vec<Vec<f64>>> {
    text.split(';')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|p| {
            let x = p
                .split(',')
                .map(|c| c.trim().parse::<f64>().map_err(|e| Error::Spec(format!("bad coordinate '{c}': {e}"))))
                .collect::<Result<Vec<_>>>()?;
            if x.len() != d {
                return Err(Error::Spec(format!("point '{p}' has {} coordinates, d = {d}", x.len())));
            }
            Ok(x)
        })
        .collect()
}

pub fn condexp(spec: &ProblemSpec, opts: &Options, time: f64, xs: &str) -> Result<Outcome> {
    let q = quadratic(spec, 1, "condexp")?;
    let route = match opts.route.unwrap_or(spec.route) {
        RouteChoice::Jacobi => Route::Jacobi,
        _ => Route::Riccati,
    };
    let grid = spec.grid()?;
    let idx = grid
        .node_index(time)
        .filter(|&i| i > 0)
        .ok_or_else(|| Error::Spec(format!("--time {time} is not a positive grid node")))?;
    let points = parse_points(xs, spec.d)?;
    let res = q.problem.solve(route)?;
    let mut out = Outcome::default();
    if opts.strict || spec.strict_admissibility {
        if let Err(e) = res.diagnostics.enforce() {
            out.fail(e);
        }
    }
    let alpha = solve_alpha(&res.chi)?.alpha;
    let v = covariance(&alpha, idx)?;
    let t = grid.time(idx);
    let mut csv = String::new();
    let header: Vec<String> = (1..=spec.d).map(|k| format!("x{k}")).collect();
    csv += &format!("{},cond_exp\n", header.join(","));
    for x in &points {
        let value = cond_exp(res.prefactor, &v, t, x)?;
        let coords: Vec<String> = x.iter().map(|c| format!("{c:.16e}")).collect();
        csv += &format!("{},{value:.16e}\n", coords.join(","));
    }
    out.files.push(("condexp.csv".into(), csv.into_bytes()));
    out.summary.push(format!("{route}: prefactor {:.12e}, {} points at t = {t}", res.prefactor, points.len()));
    if spec.d <= 3 {
        let mut err = None;
        let total = gauss_hermite_expectation(GH_NODES, spec.d, t, |x| {
            cond_exp(res.prefactor, &v, t, x).unwrap_or_else(|e| {
                err.get_or_insert(e);
                f64::NAN
            })
        });
        if let Some(e) = err {
            return Err(e);
        }
        out.summary.push(format!("Gauss-Hermite total {total:.12e}"));
    }
    Ok(out)
}

/// Builtin cases checked by `oracle-compare`: `(name, lambda, d)` with `T = 1`.
pub const ORACLE_TABLE: [(&str, f64, usize); 8] = [
    ("harmonic-oscillator", 1.0, 1),
    ("harmonic-oscillator", 1.0, 2),
    ("cameron-martin", 0.5, 1),
    ("levy-area", 1.0, 2),
    ("levy-area", 2.0, 2),
    ("ou-square", 0.5, 1),
    ("ou-square", -1.0, 1),
    ("constant-chi", 0.2, 2),
];

pub fn oracle_compare(n_steps: usize, mc: Option<(usize, u64)>, opts: &Options) -> Result<Outcome> {
    let mut out = Outcome::default();
    let mut entries = Vec::new();
    for (name, lambda, d) in ORACLE_TABLE {
        let spec = ProblemSpec {
            horizon: 1.0,
            d,
            n_steps,
            problem: ProblemKind::Builtin(BuiltinSpec {
                name: name.into(),
                lambda,
            }),
            mc: mc.map(|(paths, seed)| McSpec {
                paths,
                seed,
                functionals: vec![],
                richardson: false,
            }),
            route: opts.route.unwrap_or_default(),
            strict_admissibility: false,
        };
        spec.validate()?;
        let q = quadratic(&spec, 1, "oracle-compare")?;
        let reference = q.reference.clone().expect("builtins carry a reference");
        let mut route_entries = Vec::new();
        for route in routes(&spec, opts) {
            let entry = match q.problem.solve(route) {
                Ok(res) => {
                    let err = (res.prefactor - reference.closed_form).abs();
                    let pass = err <= ORACLE_TOLERANCE;
                    out.summary.push(format!(
                        "{name} lambda={lambda} d={d} {route}: {:.12e} vs {:.12e} |err| {err:.2e} {}",
                        res.prefactor,
                        reference.closed_form,
                        if pass { "pass" } else { "FAIL" }
                    ));
                    if opts.strict && !pass {
                        out.fail(Error::VerificationFailed(format!("{name} {route}: |err| = {err:e}")));
                    }
                    json!({ "route": route, "prefactor": res.prefactor, "abs_error": err, "passed": pass })
                }
                Err(e) => {
                    out.summary.push(format!("{name} lambda={lambda} d={d} {route}: {e}"));
                    out.fail(e.clone());
                    json!({ "route": route, "error": e.to_string() })
                }
            };
            route_entries.push(entry);
        }
        let mc_entry = match mc {
            Some(_) => {
                let mc_opts = Options {
                    route: Some(RouteChoice::Riccati),
                    ..opts.clone()
                };
                let sub = verify(&spec, &mc_opts)?;
                if let Some(e) = sub.failure {
                    out.fail(e);
                }
                out.summary.extend(sub.summary.into_iter().map(|s| format!("{name} lambda={lambda} d={d} mc {s}")));
                let doc: Value = serde_json::from_slice(&sub.files[0].1).map_err(|e| Error::Spec(e.to_string()))?;
                Some(doc["reports"].clone())
            }
            None => None,
        };
        entries.push(json!({
            "name": name,
            "lambda": lambda,
            "d": d,
            "T": 1.0,
            "closed_form": reference.closed_form,
            "validity": reference.validity,
            "routes": route_entries,
            "monte_carlo": mc_entry,
        }));
    }
    let doc = json!({
        "command": "oracle-compare",
        "version": VERSION,
        "n_steps": n_steps,
        "tolerance": ORACLE_TOLERANCE,
        "cases": entries,
    });
    out.files.push(("oracle-compare.result.json".into(), json::to_bytes(&doc)?));
    Ok(out)
}
