use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    #[default]
    ZeroDirichlet,
}

/// Uniform tensor grid over a box in `ℝ³`, x-index fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
    pub h: f64,
    #[serde(default)]
    pub boundary: Boundary,
}

impl GridSpec {
    pub fn new(lo: [f64; 3], hi: [f64; 3], h: f64) -> Result<Self> {
        let s = Self {
            lo,
            hi,
            h,
            boundary: Boundary::ZeroDirichlet,
        };
        s.validate()?;
        Ok(s)
    }

    /// The cube `[-half, half]³`.
    pub fn cube(half: f64, h: f64) -> Result<Self> {
        Self::new([-half; 3], [half; 3], h)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.h > 0.0) || !self.h.is_finite() {
            return Err(Error::param("h", "must be positive"));
        }
        for k in 0..3 {
            if !(self.hi[k] - self.lo[k] >= 2.0 * self.h) {
                return Err(Error::param("box", "each side must span at least two cells"));
            }
        }
        Ok(())
    }

    pub fn shape(&self) -> [usize; 3] {
        let n = |k: usize| ((self.hi[k] - self.lo[k]) / self.h).round() as usize + 1;
        [n(0), n(1), n(2)]
    }

    pub fn len(&self) -> usize {
        self.shape().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        let [nx, ny, _] = self.shape();
        i + nx * (j + ny * k)
    }

    #[inline]
    pub fn coords(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        [
            self.lo[0] + i as f64 * self.h,
            self.lo[1] + j as f64 * self.h,
            self.lo[2] + k as f64 * self.h,
        ]
    }

    /// Coordinates of node `n`.
    pub fn point(&self, n: usize) -> [f64; 3] {
        let [nx, ny, _] = self.shape();
        self.coords(n % nx, (n / nx) % ny, n / (nx * ny))
    }

    pub fn is_boundary(&self, i: usize, j: usize, k: usize) -> bool {
        let [nx, ny, nz] = self.shape();
        i == 0 || j == 0 || k == 0 || i == nx - 1 || j == ny - 1 || k == nz - 1
    }

    /// Explicit-scheme step bound `h² δ / (2d)`.
    pub fn cfl_dt(&self, delta: f64) -> f64 {
        self.h * self.h * delta / 6.0
    }

    /// Whether `[-support, support]³` padded by `6 √(T/δ)` fits in the box.
    pub fn padding_ok(&self, support: f64, horizon: f64, delta: f64) -> bool {
        let pad = support + 6.0 * (horizon / delta).sqrt();
        (0..3).all(|k| self.lo[k] <= -pad && self.hi[k] >= pad)
    }
}

/// Values of a scalar function at the grid nodes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridFunction {
    pub spec: GridSpec,
    pub values: Vec<f64>,
    pub time: f64,
}

impl GridFunction {
    pub fn zeros(spec: &GridSpec) -> Self {
        Self {
            values: vec![0.0; spec.len()],
            spec: spec.clone(),
            time: 0.0,
        }
    }

    /// Samples `f` at interior nodes; boundary nodes are zero.
    pub fn from_fn(spec: &GridSpec, f: impl Fn(&[f64]) -> f64) -> Self {
        let [nx, ny, nz] = spec.shape();
        let mut values = vec![0.0; spec.len()];
        for k in 1..nz - 1 {
            for j in 1..ny - 1 {
                for i in 1..nx - 1 {
                    values[spec.index(i, j, k)] = f(&spec.coords(i, j, k));
                }
            }
        }
        Self {
            spec: spec.clone(),
            values,
            time: 0.0,
        }
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn sup_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `(h³ Σ |u|^p)^{1/p}`.
    pub fn lp_norm(&self, p: f64) -> f64 {
        self.lp_norm_p(p).powf(1.0 / p)
    }

    /// `h³ Σ |u|^p`.
    pub fn lp_norm_p(&self, p: f64) -> f64 {
        let h3 = self.spec.h.powi(3);
        h3 * self.values.iter().map(|v| v.abs().powf(p)).sum::<f64>()
    }

    /// `α self + β other`.
    pub fn combine(&self, alpha: f64, other: &GridFunction, beta: f64) -> Result<GridFunction> {
        if self.spec != other.spec {
            return Err(Error::param("grid", "functions live on different grids"));
        }
        Ok(GridFunction {
            spec: self.spec.clone(),
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| alpha * a + beta * b)
                .collect(),
            time: self.time,
        })
    }

    /// Centered difference along `axis`, zero on the boundary.
    pub fn partial(&self, axis: usize) -> GridFunction {
        let spec = &self.spec;
        let [nx, ny, nz] = spec.shape();
        let stride = [1, nx, nx * ny][axis];
        let inv = 0.5 / spec.h;
        let mut out = vec![0.0; self.values.len()];
        for k in 1..nz - 1 {
            for j in 1..ny - 1 {
                let base = spec.index(0, j, k);
                for i in 1..nx - 1 {
                    let n = base + i;
                    out[n] = (self.values[n + stride] - self.values[n - stride]) * inv;
                }
            }
        }
        GridFunction {
            spec: spec.clone(),
            values: out,
            time: self.time,
        }
    }

    /// Pointwise Euclidean norm of the centered-difference gradient.
    pub fn gradient_norm(&self) -> GridFunction {
        let g: Vec<GridFunction> = (0..3).map(|a| self.partial(a)).collect();
        GridFunction {
            spec: self.spec.clone(),
            values: (0..self.values.len())
                .map(|n| (g[0].values[n].powi(2) + g[1].values[n].powi(2) + g[2].values[n].powi(2)).sqrt())
                .collect(),
            time: self.time,
        }
    }

    /// Trilinear interpolation; zero outside the box.
    pub fn interpolate(&self, x: &[f64]) -> f64 {
        let spec = &self.spec;
        let shape = spec.shape();
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let s = (x[a] - spec.lo[a]) / spec.h;
            if !(s >= 0.0 && s <= (shape[a] - 1) as f64) {
                return 0.0;
            }
            let i = (s.floor() as usize).min(shape[a] - 2);
            base[a] = i;
            frac[a] = s - i as f64;
        }
        let mut v = 0.0;
        for c in 0..8 {
            let o = [c & 1, (c >> 1) & 1, (c >> 2) & 1];
            let mut w = 1.0;
            for a in 0..3 {
                w *= if o[a] == 1 { frac[a] } else { 1.0 - frac[a] };
            }
            if w != 0.0 {
                v += w * self.values[spec.index(base[0] + o[0], base[1] + o[1], base[2] + o[2])];
            }
        }
        v
    }

    /// Centered-difference gradient interpolated at `x`.
    pub fn gradient_at(&self, x: &[f64]) -> [f64; 3] {
        let h = self.spec.h;
        let mut g = [0.0; 3];
        for a in 0..3 {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[a] += h;
            xm[a] -= h;
            g[a] = (self.interpolate(&xp) - self.interpolate(&xm)) / (2.0 * h);
        }
        g
    }

    /// `Σ |u|` over nodes within `3h` of the boundary, relative to the total.
    pub fn boundary_mass_fraction(&self) -> f64 {
        let spec = &self.spec;
        let [nx, ny, nz] = spec.shape();
        let (mut edge, mut total) = (0.0, 0.0);
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let v = self.values[spec.index(i, j, k)].abs();
                    total += v;
                    let near = i <= 3 || j <= 3 || k <= 3 || i + 4 >= nx || j + 4 >= ny || k + 4 >= nz;
                    if near {
                        edge += v;
                    }
                }
            }
        }
        if total > 0.0 {
            edge / total
        } else {
            0.0
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_indexing() {
        let g = GridSpec::cube(1.0, 0.25).unwrap();
        assert_eq!(g.shape(), [9, 9, 9]);
        let n = g.index(2, 3, 4);
        assert_eq!(g.point(n), [-0.5, -0.25, 0.0]);
        assert!(GridSpec::cube(1.0, 0.0).is_err());
    }

    #[test]
    fn interpolation_is_exact_for_affine_functions() {
        let g = GridSpec::cube(1.0, 0.1).unwrap();
        let f = GridFunction::from_fn(&g, |x| 1.0 + 2.0 * x[0] - x[1] + 0.5 * x[2]);
        for x in [[0.13, -0.27, 0.55], [0.0, 0.0, 0.0], [-0.71, 0.33, 0.05]] {
            let want = 1.0 + 2.0 * x[0] - x[1] + 0.5 * x[2];
            assert!((f.interpolate(&x) - want).abs() < 1e-12);
            let gr = f.gradient_at(&x);
            assert!((gr[0] - 2.0).abs() < 1e-9 && (gr[1] + 1.0).abs() < 1e-9 && (gr[2] - 0.5).abs() < 1e-9);
        }
    }

    #[test]
    fn lp_norm_of_gaussian() {
        let g = GridSpec::cube(6.0, 0.1).unwrap();
        let f = GridFunction::from_fn(&g, |x| (-(x[0] * x[0] + x[1] * x[1] + x[2] * x[2]) / 2.0).exp());
        let want = (2.0 * std::f64::consts::PI / 2.0).powf(0.75);
        assert!((f.lp_norm(2.0) - want).abs() < 1e-8);
    }
}
