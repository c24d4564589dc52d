//! Numerical evaluation of Wiener integrals of exponentiated quadratic functionals.

pub mod cli;
pub mod condexp;
pub mod error;
pub mod funcalc;
pub mod kernels;
pub mod laplace;
pub mod matcore;
pub mod montecarlo;
pub mod odekit;
pub mod oracles;
pub mod transforms;

pub use error::{Error, Result};
pub use funcalc::{MatrixFunction, Role, TimeGrid};
pub use kernels::Kernel;
pub use laplace::{LaplaceResult, QuadraticProblem, Route};
pub use matcore::Mat;
pub use transforms::WienerPath;
