//! Library results checked against closed forms and independent quadrature.

use morrey_lab::fields::CoefficientSet;
use morrey_lab::sde::{euler_maruyama, SimConfig};
use morrey_lab::semigroup::{
    chaos_tail, feynman_kac, mollified_convergence, ChaosSpec, DriftScheme, GridFunction, GridSpec, Operator,
};

const NU: f64 = 4.0;
const P: f64 = 2.65;
/// Radial quadrature values of `I_1, I_2, I_3` for the heat semigroup and
/// `f = exp(-|x|²/2)` at `ν = 4`, `p = 2.65`.
const HEAT_CHAOS: [f64; 3] = [4.469e-3, 2.702e-4, 1.127e-5];

fn simpson(a: f64, b: f64, n: usize, f: impl Fn(f64) -> f64) -> f64 {
    let n = n + n % 2;
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

/// `g_m(r)`: the `s`-integral of the squared level-`m` chaos at radius `r`.
/// With `v = 1 + s` the heat solution is `u = v^{-3/2} e^{-r²/(2v)}`, and the
/// nested time integrals of `∂_{k_m}⋯∂_{k_1} T_s f`, summed over `k`, reduce
/// to Hermite polynomials in `x / √v` weighted by `s^{m-1}/(m-1)!`.
fn g(m: usize, r: f64) -> f64 {
    simpson(0.0, 12.0, 2400, |s| {
        let v = 1.0 + s;
        let u2 = v.powi(-3) * (-r * r / v).exp();
        let r2 = r * r;
        let poly = match m {
            1 => r2 / (v * v),
            2 => s * (r2 * r2 / v.powi(4) - 2.0 * r2 / v.powi(3) + 3.0 / (v * v)),
            3 => 0.5 * s * s * (r2 * r2 * r2 / v.powi(6) - 6.0 * r2 * r2 / v.powi(5) + 15.0 * r2 / v.powi(4)),
            _ => unreachable!(),
        };
        (-NU * s).exp() * u2 * poly
    })
}

fn heat_level(m: usize) -> f64 {
    4.0 * std::f64::consts::PI * simpson(0.0, 12.0, 1200, |r| r * r * g(m, r).powf(P))
}

#[test]
fn heat_chaos_quadrature_matches_frozen_values() {
    for m in 1..=3 {
        let v = heat_level(m);
        let want = HEAT_CHAOS[m - 1];
        assert!((v - want).abs() < 1e-3 * want, "I_{m} = {v:e}, frozen {want:e}");
    }
}

#[test]
fn grid_chaos_first_level_matches_quadrature() {
    let spec = GridSpec::cube(5.0, 0.1).unwrap();
    let f = GridFunction::from_fn(&spec, |x| (-0.5 * (x[0] * x[0] + x[1] * x[1] + x[2] * x[2])).exp());
    let bm = CoefficientSet::brownian(3, 3).unwrap();
    let op = Operator::new(&bm, &spec, DriftScheme::Upwind).unwrap();
    let mut chaos = ChaosSpec::new(NU, 1, P);
    chaos.s_nodes = (-16..=8).map(|e| 2f64.powf(e as f64 / 2.0) / NU).collect();
    let report = chaos_tail(&f, &bm, &op, &chaos).unwrap();
    let i1 = report.levels[0].value;
    let rel = (i1 - HEAT_CHAOS[0]).abs() / HEAT_CHAOS[0];
    assert!(
        rel < 0.03,
        "grid I_1 = {i1:e}, quadrature {:e}, rel {rel:.3}",
        HEAT_CHAOS[0]
    );
}

#[test]
fn feynman_kac_reproduces_the_heat_solution() {
    let bm = CoefficientSet::brownian(3, 3).unwrap();
    let f = |x: &[f64]| (-0.5 * x.iter().map(|v| v * v).sum::<f64>()).exp();
    let t = 0.5;
    let xs = vec![vec![0.0, 0.0, 0.0], vec![0.7, -0.3, 0.2], vec![1.5, 0.0, 0.0]];
    let cfg = SimConfig {
        dt: 0.05,
        n_paths: 20_000,
        master_seed: 3,
        ..SimConfig::default()
    };
    for v in feynman_kac(&f, &bm, t, &xs, &cfg).unwrap() {
        let r2: f64 = v.x.iter().map(|c| c * c).sum();
        let exact = (1.0 + t).powf(-1.5) * (-r2 / (2.0 * (1.0 + t))).exp();
        assert!(
            (v.mean - exact).abs() < 4.0 * v.se,
            "{:?}: {} vs {exact} (se {})",
            v.x,
            v.mean,
            v.se
        );
    }
}

#[test]
fn brownian_mean_exit_time_from_a_small_ball() {
    let bm = CoefficientSet::brownian(3, 3).unwrap();
    let cfg = SimConfig {
        dt: 2.5e-5,
        horizon: 0.6,
        n_paths: 4000,
        master_seed: 11,
        radii: vec![0.5],
        stop_after_exit: true,
        ..SimConfig::default()
    };
    let batch = euler_maruyama(&bm, &[0.0; 3], &cfg).unwrap();
    let taus: Vec<f64> = (0..batch.n_paths()).filter_map(|i| batch.exit(i, 0).tau).collect();
    assert_eq!(taus.len(), batch.n_paths());
    let mean = taus.iter().sum::<f64>() / taus.len() as f64;
    // E τ_R = R²/d, biased upward by the discrete monitoring.
    let want = 0.25 / 3.0;
    assert!((mean - want).abs() < 0.06 * want, "mean tau {mean} vs {want}");
}

#[test]
fn mollifying_constant_coefficients_changes_nothing() {
    let spec = GridSpec::cube(2.0, 0.25).unwrap();
    let f = GridFunction::from_fn(&spec, |x| (-(x[0] * x[0] + x[1] * x[1] + x[2] * x[2])).exp());
    let bm = CoefficientSet::brownian(3, 3).unwrap();
    let r = mollified_convergence(&f, &bm, &[2, 4, 8], 0.1, 2.0, DriftScheme::Upwind).unwrap();
    for row in &r.rows {
        assert!(row.lhs < 1e-12, "{}: {}", row.probe, row.lhs);
    }
}
