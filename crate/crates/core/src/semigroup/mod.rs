//! The semigroup `T_t f(x) = E_x f(x_t)` on a grid, by explicit finite
//! differences and by Feynman–Kac, and the operators `Q^k_t f = σ^{ik} D_i T_t f`.

use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimates::{ratio_spread, EstimateReport, LowerBoundProbe, ReportRow, Verdict};
use crate::fields::{mollify, CoefficientSet, MollifierSpec};
use crate::rng::stream_seed;
use crate::sde::{derivative_flow, simulate, FlowConfig, PathObserver, SimConfig};

mod chaos;
mod grid;
mod operator;

pub use chaos::{chaos_tail, ChaosLevel, ChaosSpec, ChaosTailReport};
pub use grid::{Boundary, GridFunction, GridSpec};
pub use operator::{evolve, DriftScheme, Operator};

/// Nonzero columns of `σ` at every grid node.
pub struct ColumnCache {
    pub cols: Vec<usize>,
    constant: bool,
    /// Node-major: `n * 3 * cols.len() + 3 * c + i`.
    data: Vec<f64>,
    spec: GridSpec,
}

impl ColumnCache {
    /// Caches the columns in `only`, or every nonzero column when `None`.
    pub fn new(coeffs: &CoefficientSet, spec: &GridSpec, only: Option<&[usize]>) -> Result<Self> {
        let (d, d1) = (coeffs.dim_d, coeffs.dim_d1);
        if d != 3 {
            return Err(Error::UnsupportedDimension(d));
        }
        if let Some(ks) = only {
            if ks.iter().any(|&k| k >= d1) {
                return Err(Error::param("k", format!("noise index must be below d1 = {d1}")));
            }
        }
        let constant = coeffs.sigma.is_constant();
        let n_nodes = if constant { 1 } else { spec.len() };
        let sigmas: Vec<Vec<f64>> = (0..n_nodes)
            .into_par_iter()
            .map(|n| {
                let mut s = vec![0.0; d * d1];
                coeffs.sigma_at(&spec.point(n), &mut s);
                s
            })
            .collect();
        let cols: Vec<usize> = match only {
            Some(ks) => ks.to_vec(),
            None => (0..d1)
                .filter(|&k| sigmas.iter().any(|s| (0..d).any(|i| s[i * d1 + k] != 0.0)))
                .collect(),
        };
        let mut data = Vec::with_capacity(n_nodes * 3 * cols.len());
        for s in &sigmas {
            for &k in &cols {
                for i in 0..3 {
                    data.push(s[i * d1 + k]);
                }
            }
        }
        Ok(Self {
            cols,
            constant,
            data,
            spec: spec.clone(),
        })
    }

    /// `σ^{ik} g_i` for cached column `c` and gradient components `grads`.
    pub fn contract(&self, c: usize, grads: &[GridFunction; 3]) -> GridFunction {
        let m = self.cols.len();
        let n = grads[0].values.len();
        let values = (0..n)
            .map(|node| {
                let o = if self.constant { 3 * c } else { node * 3 * m + 3 * c };
                self.data[o] * grads[0].values[node]
                    + self.data[o + 1] * grads[1].values[node]
                    + self.data[o + 2] * grads[2].values[node]
            })
            .collect();
        GridFunction {
            spec: self.spec.clone(),
            values,
            time: grads[0].time,
        }
    }
}

/// `Q^k_t f = σ^{ik} D_i T_t f` on the grid.
pub fn q_operator(
    k: usize,
    t: f64,
    f: &GridFunction,
    coeffs: &CoefficientSet,
    op: &Operator,
    dt: f64,
) -> Result<GridFunction> {
    if !(t > 0.0) {
        return Err(Error::param("t", "must be positive"));
    }
    let u = evolve(f, op, t, dt)?;
    let cache = ColumnCache::new(coeffs, &op.spec, Some(&[k]))?;
    Ok(cache.contract(0, &[u.partial(0), u.partial(1), u.partial(2)]))
}

struct Terminal<'a, F> {
    f: &'a F,
    last: usize,
    value: f64,
}

impl<F: Fn(&[f64]) -> f64 + Sync> PathObserver for Terminal<'_, F> {
    type Output = Option<f64>;
    fn observe(&mut self, step: usize, _t: f64, x: &[f64]) -> bool {
        if step == self.last {
            self.value = (self.f)(x);
        }
        true
    }
    fn finish(self, alive: bool) -> Self::Output {
        alive.then_some(self.value)
    }
}

/// Result of [`feynman_kac`] at one starting point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FkValue {
    pub x: Vec<f64>,
    pub mean: f64,
    pub se: f64,
    pub dead: usize,
}

/// `E_x f(x_t)` by Monte Carlo at each starting point. Point `j` uses the
/// master seed `stream_seed(config.master_seed, j)`.
pub fn feynman_kac<F>(
    f: &F,
    coeffs: &CoefficientSet,
    t: f64,
    xs: &[Vec<f64>],
    config: &SimConfig,
) -> Result<Vec<FkValue>>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let mut out = Vec::with_capacity(xs.len());
    for (j, x) in xs.iter().enumerate() {
        let cfg = SimConfig {
            horizon: t,
            master_seed: stream_seed(config.master_seed, j as u64),
            radii: Vec::new(),
            stop_after_exit: false,
            record_every: 0,
            ..config.clone()
        };
        let last = cfg.steps();
        let vals = simulate(coeffs, x, &cfg, |_| Terminal {
            f,
            last,
            value: f64::NAN,
        })?;
        let live: Vec<f64> = vals.iter().flatten().copied().collect();
        let (mean, se) = crate::stats::mean_se(&live);
        out.push(FkValue {
            x: x.clone(),
            mean,
            se,
            dead: vals.len() - live.len(),
        });
    }
    Ok(out)
}

/// Violations of `0 ≤ T_t f ≤ sup f` for nonnegative `f`, relative to `sup f`.
pub fn maximum_principle_violation(f: &GridFunction, u: &GridFunction) -> f64 {
    let sup = f.max();
    if !(sup > 0.0) {
        return 0.0;
    }
    ((-u.min()).max(0.0)).max((u.max() - sup).max(0.0)) / sup
}

/// `‖D T_t f‖_p ≤ N t^{-1/2} ‖f‖_p` over a family: per time, the fitted `N`
/// is the worst ratio over members; the check passes when those per-time
/// constants stay within `tolerance` of their midpoint.
pub fn gradient_bound_check(
    op: &Operator,
    members: &[GridFunction],
    times: &[f64],
    p: f64,
    dt: f64,
    tolerance: f64,
) -> Result<EstimateReport> {
    bound_check(op, members, times, p, dt, tolerance, BoundKind::Gradient)
}

/// `sup |T_t f| ≤ N (t ∧ 1)^{-d/(2p)} ‖f‖_p`, reported like
/// [`gradient_bound_check`].
pub fn pointwise_bound_check(
    op: &Operator,
    members: &[GridFunction],
    times: &[f64],
    p: f64,
    dt: f64,
    tolerance: f64,
) -> Result<EstimateReport> {
    bound_check(op, members, times, p, dt, tolerance, BoundKind::Pointwise)
}

#[derive(Clone, Copy, PartialEq)]
enum BoundKind {
    Gradient,
    Pointwise,
}

fn bound_check(
    op: &Operator,
    members: &[GridFunction],
    times: &[f64],
    p: f64,
    dt: f64,
    tolerance: f64,
    kind: BoundKind,
) -> Result<EstimateReport> {
    if members.is_empty() {
        return Err(Error::DegenerateFamily("empty test family".into()));
    }
    let mut per_time = vec![0.0f64; times.len()];
    let mut rows = Vec::new();
    let mut flags = Vec::new();
    for (j, f) in members.iter().enumerate() {
        let norm = f.lp_norm(p);
        if norm == 0.0 {
            continue;
        }
        let snaps = op.evolve_snapshots(f, times, dt)?;
        for (ti, u) in snaps.iter().enumerate() {
            let t = times[ti] - f.time;
            let (lhs, shape) = match kind {
                BoundKind::Gradient => (u.gradient_norm().lp_norm(p), norm / t.sqrt()),
                BoundKind::Pointwise => (u.sup_abs(), norm * t.min(1.0).powf(-3.0 / (2.0 * p))),
            };
            if u.boundary_mass_fraction() > 1e-6 {
                flags.push(format!("f{j} t={t}: boundary contamination"));
            }
            let row = ReportRow::new(format!("f{j} t={t}"), t, lhs, 0.0, shape);
            per_time[ti] = per_time[ti].max(row.ratio);
            rows.push(row);
        }
    }
    let fitted: Vec<ReportRow> = times
        .iter()
        .zip(&per_time)
        .map(|(t, n)| ReportRow::new(format!("N t={t}"), *t, *n, 0.0, 1.0))
        .collect();
    let (_, hi, spread) = ratio_spread(&fitted);
    rows.extend(fitted);
    let (name, shape) = match kind {
        BoundKind::Gradient => ("gradient_bound", "|D T_t f|_p <= N t^{-1/2} |f|_p"),
        BoundKind::Pointwise => ("pointwise_bound", "sup |T_t f| <= N (t ^ 1)^{-d/(2p)} |f|_p"),
    };
    let mut report = EstimateReport::new(name, shape, rows);
    report.fitted_constant = hi;
    report.tolerance = tolerance;
    report.metrics.insert("spread".into(), spread);
    report.flags = flags;
    report.verdict = if spread <= tolerance {
        Verdict::Pass
    } else {
        Verdict::Fail
    };
    Ok(report)
}

/// Coefficients with `σ` and `b` replaced by their mollifications at scale `n`.
pub fn mollified_coefficients(base: &CoefficientSet, n: usize, delta: f64) -> Result<CoefficientSet> {
    let spec = MollifierSpec::new(n);
    let sigma = Arc::new(mollify(base.sigma.clone(), spec)?);
    let drift = Arc::new(mollify(base.drift.clone(), spec)?);
    CoefficientSet::new(base.dim_d, base.dim_d1, sigma, drift, delta)
}

/// Sup and grid-`L_p` distances between `T_{n,t} f` for consecutive scales.
pub fn mollified_convergence(
    f: &GridFunction,
    base: &CoefficientSet,
    ns: &[usize],
    t: f64,
    p: f64,
    scheme: DriftScheme,
) -> Result<EstimateReport> {
    if ns.len() < 2 {
        return Err(Error::param("n", "need at least two mollification scales"));
    }
    let mut sols = Vec::new();
    for &n in ns {
        let c = mollified_coefficients(base, n, base.delta)?;
        let op = Operator::new(&c, &f.spec, scheme)?;
        sols.push(evolve(f, &op, t, op.max_dt())?);
    }
    let mut rows = Vec::new();
    for w in 0..ns.len() - 1 {
        let diff = sols[w + 1].combine(1.0, &sols[w], -1.0)?;
        rows.push(ReportRow::new(
            format!("sup n={}->{}", ns[w], ns[w + 1]),
            ns[w] as f64,
            diff.sup_abs(),
            0.0,
            1.0,
        ));
        rows.push(ReportRow::new(
            format!("lp n={}->{}", ns[w], ns[w + 1]),
            ns[w] as f64,
            diff.lp_norm(p),
            0.0,
            1.0,
        ));
    }
    let sups: Vec<f64> = rows.iter().step_by(2).map(|r| r.lhs).collect();
    let mut report = EstimateReport::new("mollified_convergence", "T_{n,t} f -> T_t f", rows);
    let mut min_factor = f64::INFINITY;
    for w in sups.windows(2) {
        if w[1] > 0.0 {
            min_factor = min_factor.min(w[0] / w[1]);
        }
    }
    if sups.windows(2).any(|w| w[1] > w[0]) {
        report.flags.push("non_monotone".into());
    }
    report.metrics.insert("min_reduction_factor".into(), min_factor);
    report.fitted_constant = sups.last().copied().unwrap_or(0.0);
    report.verdict = if report.flags.is_empty() {
        Verdict::Pass
    } else {
        Verdict::Inconclusive
    };
    Ok(report)
}

/// One probe of the derivative-flow lower bound for the Gaussian
/// `f(x) = exp(-|x|²/(2w²))`: samples of `η_t · ∇f(x_t)` from the flow and
/// `η · ∇T_t f(x)` from the grid.
pub fn flow_lower_bound_probe(
    coeffs: &CoefficientSet,
    op: &Operator,
    width: f64,
    x: &[f64],
    eta: &[f64],
    flow: &FlowConfig,
    label: impl Into<String>,
) -> Result<LowerBoundProbe> {
    if !(width > 0.0) {
        return Err(Error::param("width", "must be positive"));
    }
    let t = flow.sim.horizon;
    let w2 = width * width;
    let f = |y: &[f64]| (-(y[0] * y[0] + y[1] * y[1] + y[2] * y[2]) / (2.0 * w2)).exp();
    let g = GridFunction::from_fn(&op.spec, f);
    let u = evolve(&g, op, t, op.max_dt())?;
    let grad = u.gradient_at(x);
    let semigroup_derivative = (0..3).map(|i| eta[i] * grad[i]).sum();
    let batch = derivative_flow(coeffs, x, eta, flow)?;
    let last = batch.batch.times.len() - 1;
    let samples = (0..batch.batch.n_paths())
        .filter(|&i| batch.batch.alive[i])
        .map(|i| {
            let y = batch.batch.state(i, last);
            let e = batch.eta(i, last);
            let fy = f(y);
            -(0..3).map(|k| e[k] * y[k]).sum::<f64>() * fy / w2
        })
        .collect();
    Ok(LowerBoundProbe {
        label: label.into(),
        t,
        samples,
        semigroup_derivative,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gauss(x: &[f64]) -> f64 {
        (-(x[0] * x[0] + x[1] * x[1] + x[2] * x[2]) / 2.0).exp()
    }

    #[test]
    fn q_operator_matches_heat_derivative() {
        let spec = GridSpec::cube(5.0, 0.1).unwrap();
        let c = CoefficientSet::brownian(3, 12).unwrap();
        let op = Operator::new(&c, &spec, DriftScheme::Upwind).unwrap();
        let f = GridFunction::from_fn(&spec, gauss);
        let t = 0.3;
        let q0 = q_operator(0, t, &f, &c, &op, op.max_dt()).unwrap();
        let q5 = q_operator(5, t, &f, &c, &op, op.max_dt()).unwrap();
        let mut err: f64 = 0.0;
        for n in 0..spec.len() {
            let x = spec.point(n);
            let r2 = x[0] * x[0] + x[1] * x[1] + x[2] * x[2];
            let want = -x[0] * (1.0 + t).powf(-2.5) * (-r2 / (2.0 * (1.0 + t))).exp();
            err = err.max((q0.values[n] - want).abs());
        }
        assert!(err < 2e-3, "{err}");
        assert!(q5.values.iter().all(|v| *v == 0.0));
        assert!(q_operator(0, 0.0, &f, &c, &op, op.max_dt()).is_err());
    }

    #[test]
    fn constant_data_has_no_interior_gradient() {
        let spec = GridSpec::cube(3.0, 0.2).unwrap();
        let c = CoefficientSet::brownian(3, 3).unwrap();
        let op = Operator::new(&c, &spec, DriftScheme::Upwind).unwrap();
        let f = GridFunction::from_fn(&spec, |_| 2.0);
        let q = q_operator(1, 0.01, &f, &c, &op, op.max_dt()).unwrap();
        assert_eq!(q.interpolate(&[0.0, 0.0, 0.0]), 0.0);
    }

    #[test]
    fn feynman_kac_of_constant_is_exact() {
        let c = CoefficientSet::brownian(3, 3).unwrap();
        let cfg = SimConfig {
            dt: 0.01,
            n_paths: 100,
            ..SimConfig::default()
        };
        let v = feynman_kac(&|_: &[f64]| 1.5, &c, 0.2, &[vec![0.0; 3]], &cfg).unwrap();
        assert_eq!(v[0].mean, 1.5);
        assert_eq!(v[0].se, 0.0);
    }

    #[test]
    fn linearity_and_semigroup_property() {
        let spec = GridSpec::cube(3.0, 0.2).unwrap();
        let c = crate::fields::example_coefficients(&crate::fields::ExampleParams::new(1.0, 0.3, 0.1)).unwrap();
        let op = Operator::new(&c, &spec, DriftScheme::Upwind).unwrap();
        let f = GridFunction::from_fn(&spec, gauss);
        let g = GridFunction::from_fn(&spec, |x| x[0] * gauss(x));
        let dt = op.max_dt();
        let comb = f.combine(2.0, &g, -0.5).unwrap();
        let lhs = evolve(&comb, &op, 0.1, dt).unwrap();
        let rhs = evolve(&f, &op, 0.1, dt)
            .unwrap()
            .combine(2.0, &evolve(&g, &op, 0.1, dt).unwrap(), -0.5)
            .unwrap();
        for n in 0..spec.len() {
            assert!((lhs.values[n] - rhs.values[n]).abs() < 1e-12);
        }
        let s = op.max_dt() * 20.0;
        let two = evolve(&evolve(&f, &op, s, dt).unwrap(), &op, s, dt).unwrap();
        let one = evolve(&f, &op, 2.0 * s, dt).unwrap();
        for n in 0..spec.len() {
            assert!((two.values[n] - one.values[n]).abs() < 1e-12);
        }
    }

    #[test]
    fn chaos_of_zero_vanishes_and_column_order_is_irrelevant() {
        let spec = GridSpec::cube(3.0, 0.3).unwrap();
        let c = crate::fields::example_coefficients(&crate::fields::ExampleParams::new(1.0, 0.3, 0.0)).unwrap();
        let c = mollified_coefficients(&c, 4, c.delta).unwrap();
        let op = Operator::new(&c, &spec, DriftScheme::Upwind).unwrap();
        let mut cs = ChaosSpec::new(4.0, 1, 2.65);
        cs.s_nodes = vec![0.05, 0.1, 0.2];
        let z = GridFunction::zeros(&spec);
        let r = chaos_tail(&z, &c, &op, &cs).unwrap();
        assert_eq!(r.levels[0].value, 0.0);

        let f = GridFunction::from_fn(&spec, gauss);
        let base = chaos_tail(&f, &c, &op, &cs).unwrap();
        // Reverse the noise columns.
        let inner = c.sigma.clone();
        let rev = crate::fields::FnVectorField {
            dim: 3,
            out_dim: 36,
            f: move |x: &[f64], out: &mut [f64]| {
                let mut s = [0.0; 36];
                inner.eval(x, &mut s);
                for i in 0..3 {
                    for k in 0..12 {
                        out[i * 12 + k] = s[i * 12 + 11 - k];
                    }
                }
            },
        };
        let c2 = CoefficientSet::new(3, 12, Arc::new(rev), c.drift.clone(), c.delta).unwrap();
        let permuted = chaos_tail(&f, &c2, &op, &cs).unwrap();
        let (a, b) = (base.levels[0].value, permuted.levels[0].value);
        assert!((a - b).abs() < 1e-12 * a, "{a} {b}");
    }
}
