//! Invariants of the Morrey machinery, the simulator and the grid semigroup.

use std::sync::Arc;

use proptest::prelude::*;

use morrey_lab::fields::{
    example_coefficients, CoefficientSet, Dilated, ExampleParams, RadialPowerBump, ScalarField, Scaled,
};
use morrey_lab::morrey::{ball_avg_norm, morrey_norm, Ball, SearchBudget};
use morrey_lab::sde::{euler_maruyama, SimConfig};
use morrey_lab::semigroup::{evolve, maximum_principle_violation, DriftScheme, GridFunction, GridSpec, Operator};

fn inverse_distance() -> Arc<dyn ScalarField> {
    Arc::new(RadialPowerBump::inverse_distance(3))
}

fn small_budget() -> SearchBudget {
    SearchBudget {
        levels: 6,
        max_lattice: 27,
        ..SearchBudget::default()
    }
}

fn center() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-0.8f64..0.8, 3)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 8, ..ProptestConfig::default() })]

    #[test]
    fn morrey_norm_is_homogeneous(c in 0.1f64..5.0) {
        let base = morrey_norm(inverse_distance().as_ref(), 2.5, 1.0, &small_budget()).unwrap().value;
        let scaled = Scaled { inner: inverse_distance(), factor: -c };
        let v = morrey_norm(&scaled, 2.5, 1.0, &small_budget()).unwrap().value;
        prop_assert!((v - c * base).abs() <= 1e-9 * c * base, "{} vs {}", v, c * base);
    }

    #[test]
    fn ball_averages_increase_with_the_exponent(c in center(), r in 0.05f64..1.0, q in 1.0f64..2.5, dq in 0.05f64..0.45) {
        let ball = Ball::new(c, r).unwrap();
        let f = inverse_distance();
        let lo = ball_avg_norm(f.as_ref(), &ball, q).unwrap();
        let hi = ball_avg_norm(f.as_ref(), &ball, q + dq).unwrap();
        prop_assert!(hi >= lo * (1.0 - 1e-9), "q={} {} > q={} {}", q, lo, q + dq, hi);
    }

    #[test]
    fn ball_averages_follow_dilation(c in center(), r in 0.05f64..1.0, lambda in 0.25f64..4.0, q in 1.0f64..2.9) {
        let f = inverse_distance();
        let d = Dilated { inner: f.clone(), lambda };
        let a = ball_avg_norm(f.as_ref(), &Ball::new(c.clone(), r).unwrap(), q).unwrap();
        let small: Vec<f64> = c.iter().map(|v| v / lambda).collect();
        let b = ball_avg_norm(&d, &Ball::new(small, r / lambda).unwrap(), q).unwrap();
        prop_assert!((b - lambda * a).abs() <= 1e-6 * lambda * a, "{} vs {}", b, lambda * a);
    }

    #[test]
    fn evolution_is_linear_and_monotone(beta in 0.0f64..0.6, gamma in 0.0f64..0.3, s in -2.0f64..2.0) {
        let coeffs = example_coefficients(&ExampleParams::new(1.0, beta, gamma)).unwrap();
        let spec = GridSpec::cube(1.5, 0.25).unwrap();
        let op = Operator::new(&coeffs, &spec, DriftScheme::Upwind).unwrap();
        let f = GridFunction::from_fn(&spec, |x| (-2.0 * (x[0] * x[0] + x[1] * x[1] + x[2] * x[2])).exp());
        let g = GridFunction::from_fn(&spec, |x| (-(x[0] - 0.3).powi(2) - x[1] * x[1] - x[2] * x[2]).exp());
        let dt = op.max_dt();
        let (tf, tg) = (evolve(&f, &op, 0.1, dt).unwrap(), evolve(&g, &op, 0.1, dt).unwrap());
        prop_assert!(maximum_principle_violation(&f, &tf) < 1e-12);
        let lhs = evolve(&f.combine(1.0, &g, s).unwrap(), &op, 0.1, dt).unwrap();
        let rhs = tf.combine(1.0, &tg, s).unwrap();
        prop_assert!(lhs.combine(1.0, &rhs, -1.0).unwrap().sup_abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 4, ..ProptestConfig::default() })]

    #[test]
    fn paths_do_not_depend_on_the_thread_count(seed in any::<u64>(), beta in 0.0f64..0.5) {
        let coeffs = example_coefficients(&ExampleParams::new(1.0, beta, 0.1)).unwrap();
        let cfg = SimConfig { dt: 1e-2, horizon: 0.2, n_paths: 64, master_seed: seed, ..SimConfig::default() };
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            let b = pool.install(|| euler_maruyama(&coeffs, &[0.1, 0.0, 0.0], &cfg).unwrap());
            (0..b.n_paths()).flat_map(|i| b.terminal(i).to_vec()).collect::<Vec<f64>>()
        };
        prop_assert_eq!(run(1), run(3));
    }
}

#[test]
fn repeated_runs_with_one_seed_agree() {
    let bm = CoefficientSet::brownian(3, 3).unwrap();
    let cfg = SimConfig {
        n_paths: 16,
        ..SimConfig::default()
    };
    let a = euler_maruyama(&bm, &[0.0; 3], &cfg).unwrap();
    let b = euler_maruyama(&bm, &[0.0; 3], &cfg).unwrap();
    assert_eq!(a.terminal(7), b.terminal(7));
}
