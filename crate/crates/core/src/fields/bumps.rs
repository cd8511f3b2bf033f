//! A field in every Morrey class `E_q` that is not in `L_p(B_1)` for `p > q`:
//! disjoint rescaled copies of `|x|^{-1} 1_{|x|<1}` marching along `e_1`
//! toward the origin.

use super::{ScalarField, SingularAtom};
use crate::error::{Error, Result};
use crate::geom::unit_sphere_area;

/// How the masses `ρ_n = r_n^{d-q}` are generated.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RadiiRule {
    /// `ρ_n = c / (n ln²(n+1))`, `c` chosen so that `Σ ρ_n = 1/2`.
    LogSquared,
    /// `ρ_n = (1 - ratio) ratio^{n-1} / 2`.
    Geometric { ratio: f64 },
    /// Explicit masses.
    Explicit { rho: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DisjointBumpParams {
    pub d: usize,
    pub q: f64,
    pub rule: RadiiRule,
    pub n_max: usize,
}

impl DisjointBumpParams {
    pub fn new(q: f64, n_max: usize) -> Self {
        Self {
            d: 3,
            q,
            rule: RadiiRule::LogSquared,
            n_max,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.d as f64 - self.q;
        if !(s > 0.0 && s <= 1.0) {
            return Err(Error::param("q", format!("need d - q in (0, 1], got {s}")));
        }
        if self.n_max == 0 {
            return Err(Error::param("n_max", "must be positive"));
        }
        if let RadiiRule::Geometric { ratio } = self.rule {
            if !(ratio > 0.0 && ratio < 1.0) {
                return Err(Error::param("ratio", "must lie in (0, 1)"));
            }
        }
        Ok(())
    }
}

fn log_squared_term(n: f64) -> f64 {
    1.0 / (n * (n + 1.0).ln().powi(2))
}

/// `c` with `Σ_{n≥1} c / (n ln²(n+1)) = 1/2`.
///
/// The series is summed directly to `10^6` and the tail is taken from the
/// antiderivative `-1/ln(x+1)` of `1/((x+1) ln²(x+1))` plus its first
/// correction.
pub fn log_squared_constant() -> f64 {
    const N: usize = 1_000_000;
    let mut s = 0.0;
    for n in (1..=N).rev() {
        s += log_squared_term(n as f64);
    }
    let a = N as f64 + 1.0;
    let l = (a + 1.0).ln();
    let tail = 1.0 / l + 1.0 / (a * l * l) + 0.5 * log_squared_term(a);
    0.5 / (s + tail)
}

fn masses(rule: &RadiiRule, n_max: usize, c: impl FnOnce() -> f64) -> Result<Vec<f64>> {
    let rho: Vec<f64> = match rule {
        RadiiRule::LogSquared => {
            let c = c();
            (1..=n_max).map(|n| c * log_squared_term(n as f64)).collect()
        }
        RadiiRule::Geometric { ratio } => (0..n_max).map(|n| 0.5 * (1.0 - ratio) * ratio.powi(n as i32)).collect(),
        RadiiRule::Explicit { rho } => rho.iter().copied().take(n_max).collect(),
    };
    let mut sum = 0.0;
    for &r in &rho {
        if !(r > 0.0) {
            return Err(Error::param("rho", "masses must be positive"));
        }
        sum += r;
        if sum > 0.5 * (1.0 + 1e-12) {
            return Err(Error::RadiiSum { sum });
        }
    }
    Ok(rho)
}

/// `Σ_{n ≤ n_max} r_n^{d-p}` and the corresponding `∫ b^p` over the unit
/// ball, by direct summation without building the field.
pub fn lp_mass_partial(params: &DisjointBumpParams, p: f64, c: Option<f64>) -> Result<(f64, f64)> {
    params.validate()?;
    let d = params.d as f64;
    if !(p < d) {
        return Err(Error::param("p", "must be below d"));
    }
    let rho = masses(&params.rule, params.n_max, || c.unwrap_or_else(log_squared_constant))?;
    let e = (d - p) / (d - params.q);
    let mut sum = 0.0;
    for r in rho.iter().rev() {
        sum += r.powf(e);
    }
    Ok((sum, unit_sphere_area(params.d) / (d - p) * sum))
}

#[derive(Debug, Clone)]
pub struct DisjointBumpField {
    pub params: DisjointBumpParams,
    pub rho: Vec<f64>,
    pub radii: Vec<f64>,
    /// `x_0 = 1, x_n = 1 - 2 Σ_{i≤n} ρ_i`.
    pub x: Vec<f64>,
    /// First coordinates of the bump centers, decreasing.
    pub centers: Vec<f64>,
}

impl DisjointBumpField {
    pub fn new(params: DisjointBumpParams) -> Result<Self> {
        Self::with_constant(params, None)
    }

    /// Like [`new`](Self::new) with a precomputed log-squared constant.
    pub fn with_constant(params: DisjointBumpParams, c: Option<f64>) -> Result<Self> {
        params.validate()?;
        let rho = masses(&params.rule, params.n_max, || c.unwrap_or_else(log_squared_constant))?;
        let s = params.d as f64 - params.q;
        let radii: Vec<f64> = rho.iter().map(|r| r.powf(1.0 / s)).collect();
        let mut x = Vec::with_capacity(rho.len() + 1);
        x.push(1.0);
        let mut acc = 0.0;
        for r in &rho {
            acc += r;
            x.push(1.0 - 2.0 * acc);
        }
        let centers = (1..x.len()).map(|n| 0.5 * (x[n] + x[n - 1])).collect();
        Ok(Self {
            params,
            rho,
            radii,
            x,
            centers,
        })
    }

    pub fn len(&self) -> usize {
        self.rho.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rho.is_empty()
    }

    pub fn center(&self, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; self.params.d];
        c[0] = self.centers[n];
        c
    }

    /// Bump whose slab `[x_n, x_{n-1})` contains the first coordinate.
    fn slab(&self, x0: f64) -> Option<usize> {
        if !(x0 < 1.0) || x0 < *self.x.last()? {
            return None;
        }
        // x is decreasing; find the first index with x[i] <= x0.
        let i = self.x.partition_point(|&v| v > x0);
        if i == 0 {
            None
        } else {
            Some(i - 1)
        }
    }

    fn locate(&self, x: &[f64]) -> Option<usize> {
        let n = self.slab(x[0])?;
        let mut r2 = (x[0] - self.centers[n]).powi(2);
        for v in &x[1..] {
            r2 += v * v;
        }
        (r2 < self.radii[n] * self.radii[n]).then_some(n)
    }

    /// `∫_{B_1} b^p` of the truncated field.
    pub fn lp_mass(&self, p: f64) -> f64 {
        let d = self.params.d as f64;
        let s: f64 = self.radii.iter().rev().map(|r| r.powf(d - p)).sum();
        unit_sphere_area(self.params.d) / (d - p) * s
    }

    /// Checks that consecutive supports are separated.
    pub fn supports_disjoint(&self) -> bool {
        (1..self.len()).all(|n| self.centers[n - 1] - self.centers[n] >= self.radii[n - 1] + self.radii[n])
    }
}

impl ScalarField for DisjointBumpField {
    fn dim(&self) -> usize {
        self.params.d
    }
    fn eval(&self, x: &[f64]) -> f64 {
        match self.locate(x) {
            Some(n) => {
                let mut r2 = (x[0] - self.centers[n]).powi(2);
                for v in &x[1..] {
                    r2 += v * v;
                }
                1.0 / r2.sqrt()
            }
            None => 0.0,
        }
    }
    fn atoms(&self) -> Vec<SingularAtom> {
        (0..self.len())
            .map(|n| SingularAtom::pure(self.center(n), self.radii[n], 1.0, 1.0))
            .collect()
    }
    fn locate_atom(&self, x: &[f64], atoms: &[SingularAtom]) -> Option<usize> {
        if atoms.len() == self.len() {
            self.locate(x)
        } else {
            atoms.iter().position(|a| crate::geom::dist(x, &a.center) < a.radius)
        }
    }
    fn exterior_vanishes(&self) -> bool {
        true
    }
    fn region(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        let d = self.params.d;
        let r1 = self.radii.first().copied().unwrap_or(0.0);
        let mut lo = vec![-r1; d];
        let mut hi = vec![r1; d];
        lo[0] = self.x.last().copied().unwrap_or(0.0);
        hi[0] = 1.0;
        Some((lo, hi))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masses_sum_to_one_half() {
        let c = log_squared_constant();
        let p = DisjointBumpParams::new(2.5, 1000);
        let f = DisjointBumpField::with_constant(p, Some(c)).unwrap();
        let s: f64 = f.rho.iter().sum();
        assert!(s < 0.5 && s > 0.4);
        assert!(f.supports_disjoint());
        assert!(f.x.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn single_bump_value() {
        let p = DisjointBumpParams {
            d: 3,
            q: 2.5,
            rule: RadiiRule::Geometric { ratio: 0.5 },
            n_max: 1,
        };
        let f = DisjointBumpField::new(p).unwrap();
        // ρ_1 = 1/4, r_1 = ρ_1^2 = 1/16, center at 3/4.
        assert!((f.radii[0] - 1.0 / 16.0).abs() < 1e-15);
        assert!((f.centers[0] - 0.75).abs() < 1e-15);
        let v = f.eval(&[0.75 + 0.01, 0.0, 0.0]);
        assert!((v - 100.0).abs() < 1e-9);
        assert_eq!(f.eval(&[0.75 + 0.07, 0.0, 0.0]), 0.0);
    }

    #[test]
    fn rejects_oversized_masses() {
        let p = DisjointBumpParams {
            d: 3,
            q: 2.5,
            rule: RadiiRule::Explicit { rho: vec![0.3, 0.3] },
            n_max: 2,
        };
        assert!(matches!(DisjointBumpField::new(p), Err(Error::RadiiSum { .. })));
    }

    #[test]
    fn rejects_q_out_of_range() {
        assert!(DisjointBumpField::new(DisjointBumpParams::new(1.5, 10)).is_err());
        assert!(DisjointBumpField::new(DisjointBumpParams::new(3.0, 10)).is_err());
    }

    #[test]
    fn locate_agrees_with_scan() {
        let f = DisjointBumpField::new(DisjointBumpParams {
            d: 3,
            q: 2.2,
            rule: RadiiRule::Geometric { ratio: 0.6 },
            n_max: 30,
        })
        .unwrap();
        let atoms = f.atoms();
        for k in 0..400 {
            let t = k as f64 / 400.0;
            let x = [t, 0.01 * (k % 7) as f64, 0.0];
            let scan = atoms.iter().position(|a| crate::geom::dist(&x, &a.center) < a.radius);
            assert_eq!(f.locate_atom(&x, &atoms), scan);
        }
    }
}
