use proptest::prelude::*;

use wiener_quad::cli::json;
use wiener_quad::cli::spec::{BuiltProblem, BuiltinSpec, MatrixFunctionSpec, McSpec, ProblemKind, ProblemSpec, RouteChoice};
use wiener_quad::oracles::ou_square;
use wiener_quad::{Mat, Route};

fn matrix(d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-3.0f64..3.0, d), d)
}

fn problem(d: usize) -> impl Strategy<Value = ProblemKind> {
    prop_oneof![
        (0usize..5, -2.0f64..2.0).prop_map(|(k, lambda)| {
            let name = ["harmonic-oscillator", "cameron-martin", "levy-area", "ou-square", "constant-chi"][k];
            ProblemKind::Builtin(BuiltinSpec { name: name.into(), lambda })
        }),
        matrix(d).prop_map(|matrix| ProblemKind::Sigma(MatrixFunctionSpec::Constant { matrix })),
        (matrix(d), matrix(d)).prop_map(|(a, b)| ProblemKind::Sigma(MatrixFunctionSpec::Affine { a, b })),
    ]
}

fn spec() -> impl Strategy<Value = ProblemSpec> {
    (1usize..4).prop_flat_map(|d| {
        (
            0.1f64..5.0,
            16usize..5000,
            problem(d),
            prop::option::of((2usize..1_000_000, any::<u64>(), any::<bool>())),
            0usize..3,
            any::<bool>(),
        )
            .prop_map(move |(horizon, n_steps, problem, mc, route, strict)| ProblemSpec {
                horizon,
                d,
                n_steps,
                problem,
                mc: mc.map(|(paths, seed, richardson)| McSpec {
                    paths,
                    seed,
                    functionals: Vec::new(),
                    richardson,
                }),
                route: [RouteChoice::Riccati, RouteChoice::Jacobi, RouteChoice::Both][route],
                strict_admissibility: strict,
            })
    })
}

proptest! {
    #[test]
    fn spec_survives_serialisation(s in spec()) {
        let text = json::to_string(&s).unwrap();
        let back: ProblemSpec = serde_json::from_str(&text).unwrap();
        prop_assert_eq!(&back, &s);
        // serialising again gives the same bytes
        prop_assert_eq!(json::to_string(&back).unwrap(), text);
    }

    #[test]
    fn floats_round_trip_through_output_format(x in any::<f64>().prop_filter("finite", |x| x.is_finite())) {
        let text = json::to_string(&vec![x]).unwrap();
        let back: Vec<f64> = serde_json::from_str(&text).unwrap();
        prop_assert_eq!(back[0].to_bits(), x.to_bits());
    }

    #[test]
    fn determinant_is_multiplicative(a in matrix(3), b in matrix(3)) {
        let (a, b) = (Mat::from_rows(&a).unwrap(), Mat::from_rows(&b).unwrap());
        let lhs = a.matmul(&b).det();
        let rhs = a.det() * b.det();
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + rhs.abs()));
    }

    #[test]
    fn inverse_of_diagonally_dominant(a in matrix(4)) {
        let mut m = Mat::from_rows(&a).unwrap();
        for i in 0..4 {
            m.set(i, i, m.get(i, i) + 13.0);
        }
        let r = &m.matmul(&m.inverse().unwrap()) - &Mat::identity(4);
        prop_assert!(r.max_abs() < 1e-13);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn ou_square_prefactor_matches_closed_form(lambda in -2.0f64..0.6, horizon in 0.5f64..1.0) {
        let text = format!(
            r#"{{"T": {horizon}, "d": 1, "n_steps": 400, "problem": {{"builtin": {{"name": "ou-square", "lambda": {lambda}}}}}}}"#
        );
        let BuiltProblem::Quadratic(q) = ProblemSpec::parse(&text).unwrap().build(1).unwrap() else {
            panic!("quadratic problem expected");
        };
        let want = ou_square(lambda, horizon).unwrap();
        for route in [Route::Riccati, Route::Jacobi] {
            let got = q.problem.solve(route).unwrap().prefactor;
            prop_assert!((got - want).abs() < 1e-5 * want, "{route}: {got} vs {want}");
        }
    }
}
