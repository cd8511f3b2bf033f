//! The pair `(x_t, η_t)`: the equation itself and its linearization in the
//! direction `η`, driven by extra independent Wiener processes
//! `B^{(0)}, …, B^{(d)}` with weight `K_0`.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use super::{SimConfig, Stepper, TrajectoryBatch};
use crate::error::{Error, Result};
use crate::fields::{CoefficientSet, ScalarField};
use crate::rng::{stream_rng, stream_seed};

#[derive(Clone)]
pub struct FlowConfig {
    pub sim: SimConfig,
    /// Bounded weight of the extra noise; `None` means `K_0 ≡ 1`.
    pub k0: Option<Arc<dyn ScalarField>>,
}

impl FlowConfig {
    pub fn new(sim: SimConfig) -> Self {
        Self { sim, k0: None }
    }

    pub fn with_k0(mut self, k0: Arc<dyn ScalarField>) -> Self {
        self.k0 = Some(k0);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DerivativeFlowBatch {
    pub batch: TrajectoryBatch,
    pub start_eta: Vec<f64>,
    /// `n_paths × times.len() × d`, same layout as the state paths.
    pub eta_paths: Vec<f64>,
}

impl DerivativeFlowBatch {
    pub fn eta(&self, path: usize, rec: usize) -> &[f64] {
        let d = self.batch.dim;
        let o = (path * self.batch.times.len() + rec) * d;
        &self.eta_paths[o..o + d]
    }
}

/// Simulates `(x, η)` on the Euler grid. The noise of path `i` is drawn in the
/// order `dw, dB^{(0)}, dB^{(1)}, …, dB^{(d)}` from stream `i`, so runs with
/// different `η` share their noise.
pub fn derivative_flow(
    coeffs: &CoefficientSet,
    start_x: &[f64],
    start_eta: &[f64],
    config: &FlowConfig,
) -> Result<DerivativeFlowBatch> {
    let sim = &config.sim;
    sim.validate()?;
    let (d, d1) = (coeffs.dim_d, coeffs.dim_d1);
    for v in [start_x, start_eta] {
        if v.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: v.len(),
            });
        }
    }
    let stepper = Stepper::new(coeffs, sim.taming);
    let sigma_constant = coeffs.sigma.is_constant();
    let record = sim.record_steps();
    let n = sim.steps();
    let dt = sim.dt;
    let sqdt = dt.sqrt();

    let out: Vec<(Vec<f64>, Vec<f64>, bool)> = (0..sim.n_paths)
        .into_par_iter()
        .map(|p| {
            let mut rng = stream_rng(sim.master_seed, p as u64);
            let mut x = start_x.to_vec();
            let mut eta = start_eta.to_vec();
            let mut dw = vec![0.0; d1];
            let mut db = vec![0.0; d * (d + 1)];
            let mut s = vec![0.0; d * d1];
            let mut b = vec![0.0; d];
            let mut ds = vec![0.0; d * d1];
            let mut s_eta = vec![0.0; d * d1];
            let mut db_eta = vec![0.0; d];
            let mut b_eta = vec![0.0; d];
            let mut xs = Vec::with_capacity(record.len() * d);
            let mut es = Vec::with_capacity(record.len() * d);
            let mut alive = true;
            let mut next = 0;
            if record[0] == 0 {
                xs.extend_from_slice(&x);
                es.extend_from_slice(&eta);
                next = 1;
            }
            for k in 1..=n {
                stepper.draw(&mut rng, sqdt, &mut dw);
                for v in db.iter_mut() {
                    *v = sqdt * rng.sample::<f64, _>(StandardNormal);
                }
                // Directional derivatives at the old point, linear in η.
                s_eta.fill(0.0);
                b_eta.fill(0.0);
                for j in 0..d {
                    if eta[j] == 0.0 {
                        continue;
                    }
                    if !sigma_constant {
                        coeffs.sigma_partial(&x, j, &mut ds);
                        for (a, v) in s_eta.iter_mut().zip(&ds) {
                            *a += eta[j] * v;
                        }
                    }
                    coeffs.drift_partial(&x, j, &mut db_eta);
                    for i in 0..d {
                        b_eta[i] += eta[j] * db_eta[i];
                    }
                }
                let k0 = config.k0.as_ref().map_or(1.0, |f| f.eval(&x));
                let mut new_eta = eta.clone();
                for i in 0..d {
                    let mut inc = b_eta[i] * dt + k0 * db[i];
                    for kk in 0..d1 {
                        inc += s_eta[i * d1 + kk] * dw[kk];
                    }
                    for kk in 0..d {
                        inc += k0 * eta[kk] * db[(kk + 1) * d + i];
                    }
                    new_eta[i] += inc;
                }
                eta = new_eta;
                stepper.advance(&mut x, &dw, dt, &mut s, &mut b);
                if !x.iter().chain(&eta).all(|v| v.is_finite()) {
                    alive = false;
                    break;
                }
                if next < record.len() && record[next] == k {
                    xs.extend_from_slice(&x);
                    es.extend_from_slice(&eta);
                    next += 1;
                }
            }
            while xs.len() < record.len() * d {
                xs.push(f64::NAN);
                es.push(f64::NAN);
            }
            (xs, es, alive)
        })
        .collect();

    let mut paths = Vec::with_capacity(out.len() * record.len() * d);
    let mut eta_paths = Vec::with_capacity(paths.capacity());
    let mut alive = Vec::with_capacity(out.len());
    for (xs, es, a) in out {
        paths.extend(xs);
        eta_paths.extend(es);
        alive.push(a);
    }
    Ok(DerivativeFlowBatch {
        batch: TrajectoryBatch {
            config: SimConfig {
                radii: Vec::new(),
                stop_after_exit: false,
                ..sim.clone()
            },
            start: start_x.to_vec(),
            dim: d,
            times: record.iter().map(|&s| s as f64 * dt).collect(),
            paths,
            seeds: (0..sim.n_paths as u64)
                .map(|i| stream_seed(sim.master_seed, i))
                .collect(),
            alive,
            exits: Vec::new(),
        },
        start_eta: start_eta.to_vec(),
        eta_paths,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{example_coefficients, mollify, ExampleParams, FnScalar, MollifierSpec};

    fn sim(n_paths: usize) -> SimConfig {
        SimConfig {
            dt: 0.01,
            horizon: 0.2,
            n_paths,
            master_seed: 11,
            record_every: 5,
            ..SimConfig::default()
        }
    }

    #[test]
    fn constant_coefficients_without_k0_freeze_eta() {
        let c = CoefficientSet::brownian(3, 3).unwrap();
        let cfg = FlowConfig::new(sim(20)).with_k0(Arc::new(FnScalar::new(3, |_: &[f64]| 0.0)));
        let f = derivative_flow(&c, &[0.0; 3], &[0.3, -1.0, 2.0], &cfg).unwrap();
        for p in 0..20 {
            for r in 0..f.batch.times.len() {
                assert_eq!(f.eta(p, r), &[0.3, -1.0, 2.0]);
            }
        }
    }

    #[test]
    fn eta_is_affine_on_shared_noise() {
        let params = ExampleParams::new(1.0, 0.3, 0.1);
        let base = example_coefficients(&params).unwrap();
        let s = Arc::new(mollify(base.sigma.clone(), MollifierSpec::new(8)).unwrap());
        let b = Arc::new(mollify(base.drift.clone(), MollifierSpec::new(8)).unwrap());
        let c = CoefficientSet::new(3, 12, s, b, base.delta).unwrap();
        let cfg = FlowConfig::new(sim(8));
        let x0 = [0.3, 0.1, -0.2];
        let run = |e: [f64; 3]| derivative_flow(&c, &x0, &e, &cfg).unwrap();
        let z = run([0.0; 3]);
        let e1 = run([1.0, 0.5, 0.0]);
        let e2 = run([-0.2, 0.0, 2.0]);
        let e12 = run([0.8, 0.5, 2.0]);
        assert_eq!(z.batch.paths, e1.batch.paths);
        for i in 0..z.eta_paths.len() {
            let lhs = e12.eta_paths[i] - z.eta_paths[i];
            let rhs = (e1.eta_paths[i] - z.eta_paths[i]) + (e2.eta_paths[i] - z.eta_paths[i]);
            assert!((lhs - rhs).abs() < 1e-10 * (1.0 + lhs.abs()), "{lhs} {rhs}");
        }
    }
}
