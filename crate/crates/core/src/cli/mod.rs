//! Command-line front end.

pub mod commands;
pub mod json;
pub mod spec;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use commands::{Options, Outcome};
use spec::{ProblemSpec, RouteChoice};

pub const OUT_DIR_ENV: &str = "WIENER_QUAD_OUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "wiener-quad", version, about = "Wiener integrals of exponentiated quadratic functionals")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Worker threads for Monte Carlo; results do not depend on it.
    #[arg(long, global = true)]
    pub workers: Option<usize>,

    /// Output directory (default: $WIENER_QUAD_OUT_DIR, else the current directory).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SpecArgs {
    /// Problem specification (JSON).
    pub spec: PathBuf,

    /// Overrides the route given in the spec.
    #[arg(long, value_enum)]
    pub route: Option<RouteChoice>,

    /// Fail on admissibility violations (and on Monte Carlo z-scores above threshold).
    #[arg(long)]
    pub strict: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the Riccati and/or Jacobi route and report prefactor, chi and diagnostics.
    Laplace(SpecArgs),
    /// Monte Carlo check of the transformation identities.
    Verify {
        #[command(flatten)]
        args: SpecArgs,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        paths: Option<usize>,
    },
    /// Kernel composition, inversion and resolvent series for an eta or rho problem.
    Kernel {
        spec: PathBuf,
        /// Also write both kernels as lower-triangle CSV tables.
        #[arg(long)]
        dump: bool,
    },
    /// Conditional expectation given the path value at a node, as CSV.
    Condexp {
        #[command(flatten)]
        args: SpecArgs,
        #[arg(long)]
        time: f64,
        /// Points `x1,x2;y1,y2;...`.
        #[arg(long, allow_hyphen_values = true)]
        xs: String,
    },
    /// Compare the builtin closed forms against the numerical routes.
    OracleCompare {
        #[arg(long, default_value_t = 2000)]
        n_steps: usize,
        #[arg(long)]
        route: Option<RouteChoice>,
        /// Add a Monte Carlo estimate with this many paths.
        #[arg(long)]
        paths: Option<usize>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        strict: bool,
    },
}

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Spec(_) | Error::ParameterOutOfRange(_) => 2,
        Error::ConjugatePoint { .. } | Error::NegativeDeterminant(_) | Error::Singular { .. } => 3,
        Error::AdmissibilityStrictFail(_) => 4,
        Error::VerificationFailed(_) => 5,
        Error::NoConvergence { .. } => 6,
        _ => 1,
    }
}

/// `problem.spec.json` and `problem.json` both give `problem`.
pub fn stem(path: &Path) -> String {
    let name = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = name.strip_suffix(".json").unwrap_or(&name);
    name.strip_suffix(".spec").unwrap_or(name).to_string()
}

fn load(path: &Path) -> Result<ProblemSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Spec(format!("cannot read {}: {e}", path.display())))?;
    ProblemSpec::parse(&text)
}

fn out_dir(cli: &Cli) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."))
}

fn options(args: &SpecArgs) -> Options {
    Options {
        route: args.route,
        strict: args.strict,
        ..Options::default()
    }
}

fn execute(cli: &Cli) -> Result<()> {
    let (stem, outcome): (String, Outcome) = match &cli.command {
        Command::Laplace(args) => (stem(&args.spec), commands::laplace(&load(&args.spec)?, &options(args))?),
        Command::Verify { args, seed, paths } => {
            let opts = Options {
                seed: *seed,
                paths: *paths,
                ..options(args)
            };
            (stem(&args.spec), commands::verify(&load(&args.spec)?, &opts)?)
        }
        Command::Kernel { spec, dump } => (stem(spec), commands::kernel(&load(spec)?, *dump)?),
        Command::Condexp { args, time, xs } => (
            stem(&args.spec),
            commands::condexp(&load(&args.spec)?, &options(args), *time, xs)?,
        ),
        Command::OracleCompare {
            n_steps,
            route,
            paths,
            seed,
            strict,
        } => {
            let opts = Options {
                route: *route,
                strict: *strict,
                ..Options::default()
            };
            ("oracles".into(), commands::oracle_compare(*n_steps, paths.map(|p| (p, *seed)), &opts)?)
        }
    };
    let dir = out_dir(cli);
    std::fs::create_dir_all(&dir).map_err(|e| Error::Spec(format!("cannot create {}: {e}", dir.display())))?;
    for line in &outcome.summary {
        println!("{line}");
    }
    for (suffix, bytes) in &outcome.files {
        let path = dir.join(format!("{stem}.{suffix}"));
        std::fs::write(&path, bytes).map_err(|e| Error::Spec(format!("cannot write {}: {e}", path.display())))?;
        println!("wrote {}", path.display());
    }
    match outcome.failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    match cli.workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::Spec(format!("cannot start {n} workers: {e}")))?
            .install(|| execute(cli)),
        None => execute(cli),
    }
}
