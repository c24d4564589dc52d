//! Closed-form values for classical quadratic functionals of Brownian motion.
//! Derivations are in `docs/oracles.md`.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `E[exp(-(lambda^2 / 2) int_0^T w^2 dt)] = (cosh lambda T)^{-1/2}` for scalar `w`.
pub fn cameron_martin(lambda: f64, horizon: f64) -> f64 {
    (lambda * horizon).cosh().powf(-0.5)
}

/// `E[exp(lambda * Area)] = 1 / cos(lambda T / 2)` for planar `w`, `|lambda| T < pi`.
pub fn levy_area(lambda: f64, horizon: f64) -> Result<f64> {
    if lambda.abs() * horizon >= PI {
        return Err(Error::ParameterOutOfRange(format!(
            "Levy area needs |lambda| T < pi, got {}",
            lambda.abs() * horizon
        )));
    }
    Ok(1.0 / (0.5 * lambda * horizon).cos())
}

/// `E[exp(lambda (w(T)^2 - T) / 2)] = e^{-lambda T / 2} (1 - lambda T)^{-1/2}`, `lambda T < 1`.
pub fn ou_square(lambda: f64, horizon: f64) -> Result<f64> {
    if lambda * horizon >= 1.0 {
        return Err(Error::ParameterOutOfRange(format!(
            "ou-square needs lambda T < 1, got {}",
            lambda * horizon
        )));
    }
    Ok((-0.5 * lambda * horizon).exp() / (1.0 - lambda * horizon).sqrt())
}

/// Prefactor `exp(int tr(chi - sigma) / 2)` for `chi = lambda I_d`: `exp(d lambda^2 T^2 / 4)`.
pub fn constant_chi_prefactor(lambda: f64, horizon: f64, d: usize) -> f64 {
    (0.25 * d as f64 * lambda * lambda * horizon * horizon).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleName {
    CameronMartin,
    HarmonicOscillator,
    LevyArea,
    OuSquare,
}

impl OracleName {
    pub const ALL: [OracleName; 4] = [
        OracleName::CameronMartin,
        OracleName::HarmonicOscillator,
        OracleName::LevyArea,
        OracleName::OuSquare,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            OracleName::CameronMartin => "cameron-martin",
            OracleName::HarmonicOscillator => "harmonic-oscillator",
            OracleName::LevyArea => "levy-area",
            OracleName::OuSquare => "ou-square",
        }
    }

    pub fn validity(&self) -> &'static str {
        match self {
            OracleName::CameronMartin | OracleName::HarmonicOscillator => "T > 0",
            OracleName::LevyArea => "|lambda| T < pi, d = 2",
            OracleName::OuSquare => "lambda T < 1",
        }
    }
}

impl fmt::Display for OracleName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OracleName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OracleName::ALL
            .into_iter()
            .find(|o| o.as_str() == s)
            .ok_or_else(|| Error::Spec(format!("unknown oracle '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleCase {
    pub name: OracleName,
    pub lambda: f64,
    pub horizon: f64,
    pub dim: usize,
    pub closed_form: f64,
    pub validity: String,
}

/// The closed form for `d` independent coordinates (a `d`-th power), except the
/// Levy area which is intrinsically planar.
pub fn oracle_case(name: OracleName, lambda: f64, horizon: f64, dim: usize) -> Result<OracleCase> {
    if !(horizon > 0.0) || dim == 0 {
        return Err(Error::ParameterOutOfRange("oracles need T > 0 and d >= 1".into()));
    }
    let closed_form = match name {
        OracleName::CameronMartin | OracleName::HarmonicOscillator => cameron_martin(lambda, horizon).powi(dim as i32),
        OracleName::OuSquare => ou_square(lambda, horizon)?.powi(dim as i32),
        OracleName::LevyArea => {
            if dim != 2 {
                return Err(Error::ParameterOutOfRange(format!("levy-area is planar, got d = {dim}")));
            }
            levy_area(lambda, horizon)?
        }
    };
    Ok(OracleCase {
        name,
        lambda,
        horizon,
        dim,
        closed_form,
        validity: name.validity().into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cameron_martin_values() {
        assert_eq!(cameron_martin(0.0, 1.0), 1.0);
        assert!((cameron_martin(1.0, 1.0) - 0.8050181821945921).abs() < 1e-15);
        assert_eq!(cameron_martin(-0.7, 2.0), cameron_martin(0.7, 2.0));
    }

    #[test]
    fn levy_area_values() {
        assert_eq!(levy_area(0.0, 1.0).unwrap(), 1.0);
        assert!((levy_area(1.0, 1.0).unwrap() - 1.139494).abs() < 1e-6);
        assert!((levy_area(3.0, 1.0).unwrap() - 14.1368).abs() < 1e-4);
        let mut prev = 1.0;
        for k in 1..30 {
            let v = levy_area(0.1 * k as f64, 1.0).unwrap();
            assert!(v > prev);
            prev = v;
        }
        assert!(matches!(levy_area(PI, 1.0), Err(Error::ParameterOutOfRange(_))));
        assert!(matches!(levy_area(-2.0, 2.0), Err(Error::ParameterOutOfRange(_))));
    }

    #[test]
    fn ou_square_values() {
        assert_eq!(ou_square(0.0, 1.0).unwrap(), 1.0);
        assert!((ou_square(0.5, 1.0).unwrap() - 1.1013906298063676).abs() < 1e-15);
        assert!((ou_square(-1.0, 1.0).unwrap() - 1.165821).abs() < 1e-6);
        assert!(ou_square(1.0, 1.0).is_err());
    }

    #[test]
    fn ou_square_matches_gaussian_integral() {
        // E[e^{a Z^2}] = (1 - 2a)^{-1/2} for Z ~ N(0, 1), with a Z^2 = lambda w(T)^2 / 2
        let (l, t) = (0.3f64, 1.7f64);
        let a = l * t / 2.0;
        let want = (-l * t / 2.0).exp() * (1.0 - 2.0 * a).powf(-0.5);
        assert!((ou_square(l, t).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn cases_and_names() {
        for o in OracleName::ALL {
            assert_eq!(o.as_str().parse::<OracleName>().unwrap(), o);
        }
        assert!("nope".parse::<OracleName>().is_err());
        let c = oracle_case(OracleName::HarmonicOscillator, 1.0, 1.0, 2).unwrap();
        assert!((c.closed_form - 1.0f64.cosh().recip()).abs() < 1e-15);
        assert!(oracle_case(OracleName::LevyArea, 1.0, 1.0, 3).is_err());
        assert!((constant_chi_prefactor(0.2, 1.0, 1) - 0.01f64.exp()).abs() < 1e-15);
    }
}
