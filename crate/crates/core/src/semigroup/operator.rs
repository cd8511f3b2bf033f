//! Explicit finite differences for `∂_t u = (1/2) a^{ij} u_{ij} + b^i u_i`
//! with zero Dirichlet data on the box boundary.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::grid::{GridFunction, GridSpec};
use crate::error::{Error, Result};
use crate::fields::CoefficientSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftScheme {
    /// One-sided differences in the direction of the drift.
    #[default]
    Upwind,
    /// Centered where the cell Péclet number `|b_i| h / a_ii` is at most 1,
    /// upwind elsewhere; monotone either way.
    Hybrid,
}

enum Rates {
    /// Same neighbor rates at every node.
    Uniform { plus: [f64; 3], minus: [f64; 3] },
    Field {
        plus: [Vec<f64>; 3],
        minus: [Vec<f64>; 3],
        /// `a_ij / (4h²)` for `(i, j) = (0,1), (0,2), (1,2)`; absent when zero.
        cross: Option<[Vec<f64>; 3]>,
    },
}

/// The discretized generator on a fixed grid.
pub struct Operator {
    pub spec: GridSpec,
    pub delta: f64,
    pub scheme: DriftScheme,
    rates: Rates,
    /// Largest total outflow rate over interior nodes.
    max_rate: f64,
}

fn node_rates(a: &[f64], b: &[f64], h: f64, scheme: DriftScheme) -> ([f64; 3], [f64; 3]) {
    let mut plus = [0.0; 3];
    let mut minus = [0.0; 3];
    for i in 0..3 {
        let diff = a[i * 3 + i] / (2.0 * h * h);
        let centered = scheme == DriftScheme::Hybrid && b[i].abs() * h <= a[i * 3 + i];
        if centered {
            plus[i] = diff + b[i] / (2.0 * h);
            minus[i] = diff - b[i] / (2.0 * h);
        } else {
            plus[i] = diff + b[i].max(0.0) / h;
            minus[i] = diff + (-b[i]).max(0.0) / h;
        }
    }
    (plus, minus)
}

impl Operator {
    pub fn new(coeffs: &CoefficientSet, spec: &GridSpec, scheme: DriftScheme) -> Result<Self> {
        spec.validate()?;
        if coeffs.dim_d != 3 {
            return Err(Error::UnsupportedDimension(coeffs.dim_d));
        }
        let h = spec.h;
        if coeffs.sigma.is_constant() && coeffs.drift.is_constant() {
            let x = [0.0; 3];
            let a = coeffs.a_at(&x);
            let mut b = [0.0; 3];
            coeffs.drift_at(&x, &mut b);
            if a[1].abs() + a[2].abs() + a[5].abs() == 0.0 {
                let (plus, minus) = node_rates(&a, &b, h, scheme);
                let max_rate = plus.iter().chain(&minus).sum();
                return Ok(Self {
                    spec: spec.clone(),
                    delta: coeffs.delta,
                    scheme,
                    rates: Rates::Uniform { plus, minus },
                    max_rate,
                });
            }
        }
        let [nx, ny, nz] = spec.shape();
        let slab = nx * ny;
        // Per-slab coefficient evaluation, gathered in slab order.
        let per_slab: Vec<Vec<[f64; 9]>> = (0..nz)
            .into_par_iter()
            .map(|k| {
                let mut out = vec![[0.0; 9]; slab];
                if k == 0 || k == nz - 1 {
                    return out;
                }
                let mut b = [0.0; 3];
                for j in 1..ny - 1 {
                    for i in 1..nx - 1 {
                        let x = spec.coords(i, j, k);
                        let a = coeffs.a_at(&x);
                        coeffs.drift_at(&x, &mut b);
                        let (p, m) = node_rates(&a, &b, h, scheme);
                        let c = 1.0 / (4.0 * h * h);
                        out[i + nx * j] = [p[0], p[1], p[2], m[0], m[1], m[2], a[1] * c, a[2] * c, a[5] * c];
                    }
                }
                out
            })
            .collect();
        let n = spec.len();
        let mut cols: Vec<Vec<f64>> = (0..9).map(|_| Vec::with_capacity(n)).collect();
        for s in &per_slab {
            for r in s {
                for c in 0..9 {
                    cols[c].push(r[c]);
                }
            }
        }
        let mut max_rate: f64 = 0.0;
        for idx in 0..n {
            let r: f64 =
                (0..6).map(|c| cols[c][idx]).sum::<f64>() + 2.0 * (6..9).map(|c| cols[c][idx].abs()).sum::<f64>();
            max_rate = max_rate.max(r);
        }
        let has_cross = cols[6..9].iter().any(|c| c.iter().any(|v| *v != 0.0));
        let mut it = cols.into_iter();
        let mut take = || it.next().expect("nine columns");
        let plus = [take(), take(), take()];
        let minus = [take(), take(), take()];
        let cross = [take(), take(), take()];
        Ok(Self {
            spec: spec.clone(),
            delta: coeffs.delta,
            scheme,
            rates: Rates::Field {
                plus,
                minus,
                cross: has_cross.then_some(cross),
            },
            max_rate,
        })
    }

    /// Largest step accepted by [`evolve`]: the `h²δ/(2d)` bound, further
    /// reduced so the center weight of the stencil stays nonnegative.
    pub fn max_dt(&self) -> f64 {
        let cfl = self.spec.cfl_dt(self.delta);
        if self.max_rate > 0.0 {
            cfl.min(1.0 / self.max_rate)
        } else {
            cfl
        }
    }

    pub fn check_dt(&self, dt: f64) -> Result<()> {
        let bound = self.max_dt();
        if !(dt > 0.0) || dt > bound * (1.0 + 1e-12) {
            return Err(Error::Cfl { dt, bound });
        }
        Ok(())
    }

    fn step(&self, cur: &[f64], next: &mut [f64], dt: f64) {
        let [nx, ny, nz] = self.spec.shape();
        let sz = nx * ny;
        next.par_chunks_mut(sz).enumerate().for_each(|(k, out)| {
            if k == 0 || k == nz - 1 {
                out.fill(0.0);
                return;
            }
            for j in 0..ny {
                let row = &mut out[j * nx..(j + 1) * nx];
                if j == 0 || j == ny - 1 {
                    row.fill(0.0);
                    continue;
                }
                row[0] = 0.0;
                row[nx - 1] = 0.0;
                let base = k * sz + j * nx;
                match &self.rates {
                    Rates::Uniform { plus, minus } => {
                        for i in 1..nx - 1 {
                            let n = base + i;
                            let u = cur[n];
                            let acc = plus[0] * (cur[n + 1] - u)
                                + minus[0] * (cur[n - 1] - u)
                                + plus[1] * (cur[n + nx] - u)
                                + minus[1] * (cur[n - nx] - u)
                                + plus[2] * (cur[n + sz] - u)
                                + minus[2] * (cur[n - sz] - u);
                            row[i] = u + dt * acc;
                        }
                    }
                    Rates::Field { plus, minus, cross } => {
                        for i in 1..nx - 1 {
                            let n = base + i;
                            let u = cur[n];
                            let mut acc = plus[0][n] * (cur[n + 1] - u)
                                + minus[0][n] * (cur[n - 1] - u)
                                + plus[1][n] * (cur[n + nx] - u)
                                + minus[1][n] * (cur[n - nx] - u)
                                + plus[2][n] * (cur[n + sz] - u)
                                + minus[2][n] * (cur[n - sz] - u);
                            if let Some(c) = cross {
                                let mixed = |s1: usize, s2: usize| {
                                    cur[n + s1 + s2] - cur[n + s1 - s2] - cur[n - s1 + s2] + cur[n - s1 - s2]
                                };
                                acc += c[0][n] * mixed(1, nx) + c[1][n] * mixed(1, sz) + c[2][n] * mixed(nx, sz);
                            }
                            row[i] = u + dt * acc;
                        }
                    }
                }
            }
        });
    }

    /// `u(t)` at each of the increasing `times`, starting from `f` at its own
    /// time tag. Each segment uses the largest equal step not exceeding `dt`.
    pub fn evolve_snapshots(&self, f: &GridFunction, times: &[f64], dt: f64) -> Result<Vec<GridFunction>> {
        if f.spec != self.spec {
            return Err(Error::param("grid", "function and operator grids differ"));
        }
        self.check_dt(dt)?;
        let mut cur = f.values.clone();
        // Boundary data is zero.
        let [nx, ny, nz] = self.spec.shape();
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    if self.spec.is_boundary(i, j, k) {
                        cur[self.spec.index(i, j, k)] = 0.0;
                    }
                }
            }
        }
        let mut next = vec![0.0; cur.len()];
        let mut now = f.time;
        let mut out = Vec::with_capacity(times.len());
        for &t in times {
            if t < now {
                return Err(Error::param(
                    "t",
                    "snapshot times must be increasing and not before the start",
                ));
            }
            let span = t - now;
            let steps = (span / dt - 1e-9).ceil().max(0.0) as usize;
            if steps > 0 {
                let h = span / steps as f64;
                for _ in 0..steps {
                    self.step(&cur, &mut next, h);
                    std::mem::swap(&mut cur, &mut next);
                }
            }
            now = t;
            out.push(GridFunction {
                spec: self.spec.clone(),
                values: cur.clone(),
                time: t,
            });
        }
        Ok(out)
    }
}

/// `T_t f` on the grid; `f`'s time tag is taken as the start time.
pub fn evolve(f: &GridFunction, op: &Operator, t: f64, dt: f64) -> Result<GridFunction> {
    let end = f.time + t;
    Ok(op.evolve_snapshots(f, &[end], dt)?.pop().expect("one snapshot"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn heat(x: &[f64], t: f64) -> f64 {
        let r2 = x[0] * x[0] + x[1] * x[1] + x[2] * x[2];
        (1.0 + t).powf(-1.5) * (-r2 / (2.0 * (1.0 + t))).exp()
    }

    #[test]
    fn zero_stays_zero_and_cfl_is_enforced() {
        let spec = GridSpec::cube(2.0, 0.2).unwrap();
        let op = Operator::new(&CoefficientSet::brownian(3, 3).unwrap(), &spec, DriftScheme::Upwind).unwrap();
        let z = GridFunction::zeros(&spec);
        let out = evolve(&z, &op, 0.3, op.max_dt()).unwrap();
        assert!(out.values.iter().all(|v| *v == 0.0));
        assert!(matches!(
            evolve(&z, &op, 0.3, 2.0 * op.max_dt()),
            Err(Error::Cfl { .. })
        ));
    }

    #[test]
    fn coarse_heat_solution() {
        let spec = GridSpec::cube(5.0, 0.2).unwrap();
        let op = Operator::new(&CoefficientSet::brownian(3, 3).unwrap(), &spec, DriftScheme::Upwind).unwrap();
        let f = GridFunction::from_fn(&spec, |x| heat(x, 0.0));
        let u = evolve(&f, &op, 0.5, op.max_dt()).unwrap();
        let mut err: f64 = 0.0;
        for n in 0..spec.len() {
            err = err.max((u.values[n] - heat(&spec.point(n), 0.5)).abs());
        }
        assert!(err < 5e-3, "{err}");
    }

    #[test]
    fn anisotropic_constant_diffusion_with_cross_terms() {
        // a = [[1, .3, 0], [.3, 1, 0], [0, 0, 1]] via a 3x3 square root.
        let s = [
            0.9486832980505138,
            0.316227766016838,
            0.0,
            0.0,
            0.9486832980505138,
            0.0,
            0.0,
            0.0,
            1.0,
        ];
        let sig = crate::fields::ConstantField::new(3, s.to_vec());
        let c = CoefficientSet::new(
            3,
            3,
            Arc::new(sig),
            Arc::new(crate::fields::ConstantField::zero(3, 3)),
            0.6,
        )
        .unwrap();
        let a = c.a_at(&[0.0; 3]);
        assert!((a[1] - 0.3).abs() < 1e-12);
        let spec = GridSpec::cube(4.0, 0.2).unwrap();
        let op = Operator::new(&c, &spec, DriftScheme::Upwind).unwrap();
        let f = GridFunction::from_fn(&spec, |x| heat(x, 0.0));
        let t = 0.4;
        let u = evolve(&f, &op, t, op.max_dt()).unwrap();
        // Covariance I + t a.
        let m = nalgebra::Matrix3::new(
            1.0 + t * a[0],
            t * a[1],
            0.0,
            t * a[1],
            1.0 + t * a[4],
            0.0,
            0.0,
            0.0,
            1.0 + t * a[8],
        );
        let inv = m.try_inverse().unwrap();
        let det = m.determinant();
        let mut err: f64 = 0.0;
        for n in 0..spec.len() {
            let p = spec.point(n);
            let v = nalgebra::Vector3::new(p[0], p[1], p[2]);
            let want = det.powf(-0.5) * (-(v.transpose() * inv * v)[0] / 2.0).exp();
            err = err.max((u.values[n] - want).abs());
        }
        assert!(err < 5e-3, "{err}");
    }

    #[test]
    fn constant_drift_translates() {
        let mu = vec![0.5, 0.0, -0.25];
        let c = CoefficientSet::brownian(3, 3)
            .unwrap()
            .with_drift(Arc::new(crate::fields::ConstantField::new(3, mu.clone())))
            .unwrap();
        let spec = GridSpec::cube(5.0, 0.1).unwrap();
        for scheme in [DriftScheme::Upwind, DriftScheme::Hybrid] {
            let op = Operator::new(&c, &spec, scheme).unwrap();
            let f = GridFunction::from_fn(&spec, |x| heat(x, 0.0));
            let u = evolve(&f, &op, 0.3, op.max_dt()).unwrap();
            let x = [0.1, 0.2, 0.0];
            let shifted = [x[0] + 0.3 * mu[0], x[1], x[2] + 0.3 * mu[2]];
            let tol = if scheme == DriftScheme::Upwind { 2e-2 } else { 2e-3 };
            assert!((u.interpolate(&x) - heat(&shifted, 0.3)).abs() < tol);
        }
    }
}
