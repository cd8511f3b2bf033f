//! Mollification `f_n = f * ζ_n` with `ζ_n(x) = n^3 ζ(nx)` and the standard
//! bump `ζ(x) = C exp(1/(|x|² - 1))` on the unit ball.
//!
//! Fields of radial form `C + M ω g(|x|)` are mollified through the profile:
//! `(ω g) * ζ_n = ω G(|x|)` with
//! `G(r) = 2π ∫ ρ² g(ρ) ∫ c ζ_n(√(r² + ρ² - 2rρc)) dc dρ`,
//! tabulated once with its exact derivative and interpolated by cubic Hermite
//! segments. Other fields use a fixed polar midpoint rule over `B_{1/n}`.

use std::f64::consts::PI;
use std::sync::{Arc, OnceLock};

use super::{RadialForm, VectorField};
use crate::error::{Error, Result};
use crate::geom::{dist, norm};
use crate::quadrature::gauss_legendre_on;

/// Unnormalized bump `exp(1/(s² - 1))` for `s < 1`.
#[inline]
pub fn kernel(s: f64) -> f64 {
    if s < 1.0 {
        (1.0 / (s * s - 1.0)).exp()
    } else {
        0.0
    }
}

/// `C` making `ζ` a probability density in three dimensions.
pub fn kernel_normalization() -> f64 {
    static C: OnceLock<f64> = OnceLock::new();
    *C.get_or_init(|| {
        let mut m = 0.0;
        for k in 0..16 {
            let (a, b) = (k as f64 / 16.0, (k + 1) as f64 / 16.0);
            for (r, w) in gauss_legendre_on(32, a, b) {
                m += w * r * r * kernel(r);
            }
        }
        1.0 / (4.0 * PI * m)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MollifierSpec {
    pub n: usize,
    /// Radial midpoint nodes of the generic rule.
    pub radial_nodes: usize,
    /// Angular nodes of the generic rule: a square number, split evenly
    /// between `cos θ` and `φ`.
    pub angular_nodes: usize,
}

impl MollifierSpec {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            radial_nodes: 32,
            angular_nodes: 64,
        }
    }

    pub fn node_count(&self) -> usize {
        self.radial_nodes * self.angular_nodes
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::param("n", "mollification scale must be positive"));
        }
        let a = (self.angular_nodes as f64).sqrt().round() as usize;
        if a * a != self.angular_nodes || a == 0 || self.radial_nodes == 0 {
            return Err(Error::param("angular_nodes", "must be a positive square number"));
        }
        Ok(())
    }
}

/// Tabulated profile `G` with its derivative.
#[derive(Debug, Clone)]
pub struct RadialProfile {
    knots: Vec<f64>,
    g: Vec<f64>,
    dg: Vec<f64>,
    r_max: f64,
    /// Value beyond the table: `Some(0)` for compactly supported profiles,
    /// `None` to fall back to the unmollified profile.
    beyond: Option<f64>,
}

impl RadialProfile {
    /// Value and derivative at `r`.
    pub fn eval(&self, r: f64, form: &RadialForm) -> (f64, f64) {
        if r >= self.r_max {
            return match self.beyond {
                Some(v) => (v, 0.0),
                None => ((form.profile)(r), 0.0),
            };
        }
        let i = self.knots.partition_point(|&k| k <= r).clamp(1, self.knots.len() - 1) - 1;
        let (x0, x1) = (self.knots[i], self.knots[i + 1]);
        let h = x1 - x0;
        let t = (r - x0) / h;
        let (g0, g1, d0, d1) = (self.g[i], self.g[i + 1], self.dg[i] * h, self.dg[i + 1] * h);
        let t2 = t * t;
        let t3 = t2 * t;
        let v =
            (2.0 * t3 - 3.0 * t2 + 1.0) * g0 + (t3 - 2.0 * t2 + t) * d0 + (-2.0 * t3 + 3.0 * t2) * g1 + (t3 - t2) * d1;
        let dv = ((6.0 * t2 - 6.0 * t) * g0
            + (3.0 * t2 - 4.0 * t + 1.0) * d0
            + (-6.0 * t2 + 6.0 * t) * g1
            + (3.0 * t2 - 2.0 * t) * d1)
            / h;
        (v, dv)
    }

    pub fn knot_count(&self) -> usize {
        self.knots.len()
    }
}

/// `G(r)` and `G'(r)` by direct two-dimensional quadrature.
pub fn radial_profile_exact(form: &RadialForm, n: usize, r: f64) -> (f64, f64) {
    let nf = n as f64;
    let h = 1.0 / nf;
    let c_norm = kernel_normalization() * nf.powi(3);
    let lo = (r - h).max(0.0);
    let hi = r + h;
    let mut edges = vec![lo];
    for &b in &form.breakpoints {
        if b > lo && b < hi {
            edges.push(b);
        }
    }
    edges.push(hi);
    let (mut g, mut dg) = (0.0, 0.0);
    for w in edges.windows(2) {
        for (rho, wr) in gauss_legendre_on(48, w[0], w[1]) {
            let prof = (form.profile)(rho);
            if prof == 0.0 {
                continue;
            }
            // The kernel support is r² + ρ² - 2rρc < h².
            let c0 = if r * rho > 0.0 {
                ((r * r + rho * rho - h * h) / (2.0 * r * rho)).max(-1.0)
            } else {
                -1.0
            };
            if c0 >= 1.0 {
                continue;
            }
            let (mut ig, mut idg) = (0.0, 0.0);
            for (c, wc) in gauss_legendre_on(48, c0, 1.0) {
                let s2 = (r * r + rho * rho - 2.0 * r * rho * c).max(0.0);
                let u2 = nf * nf * s2;
                if u2 >= 1.0 {
                    continue;
                }
                let z = (1.0 / (u2 - 1.0)).exp();
                ig += wc * c * z;
                idg += wc * c * z * (-2.0 * nf * nf * (r - rho * c)) / ((u2 - 1.0) * (u2 - 1.0));
            }
            g += wr * rho * rho * prof * ig;
            dg += wr * rho * rho * prof * idg;
        }
    }
    (2.0 * PI * c_norm * g, 2.0 * PI * c_norm * dg)
}

fn tabulate(form: &RadialForm, n: usize) -> RadialProfile {
    let h = 1.0 / n as f64;
    let fine = h / 32.0;
    let coarse = h / 4.0;
    let (r_max, beyond) = match form.support {
        Some(s) => (s + h + fine, Some(0.0)),
        None => (
            16.0f64.max(form.breakpoints.iter().fold(0.0, |a: f64, b| a.max(*b)) + 4.0 * h),
            None,
        ),
    };
    let near = |r: f64| r < 3.0 * h || form.breakpoints.iter().any(|b| (r - b).abs() < 2.0 * h);
    let mut knots = vec![0.0];
    let mut r = 0.0;
    while r < r_max {
        r += if near(r) { fine } else { coarse };
        knots.push(r.min(r_max));
    }
    let (g, dg): (Vec<f64>, Vec<f64>) = knots.iter().map(|&r| radial_profile_exact(form, n, r)).unzip();
    RadialProfile {
        knots,
        g,
        dg,
        r_max,
        beyond,
    }
}

enum Mode {
    Radial { form: RadialForm, profile: RadialProfile },
    Generic { offsets: Vec<[f64; 3]>, weights: Vec<f64> },
}

/// A mollified field. Smooth, with no singular points.
pub struct MollifiedField {
    inner: Arc<dyn VectorField>,
    spec: MollifierSpec,
    mode: Mode,
}

/// Mollify `field` at scale `spec.n`, using the radial profile when the field
/// exposes one.
pub fn mollify(field: Arc<dyn VectorField>, spec: MollifierSpec) -> Result<MollifiedField> {
    spec.validate()?;
    if field.dim() != 3 {
        return Err(Error::UnsupportedDimension(field.dim()));
    }
    match field.radial() {
        Some(form) => {
            let profile = tabulate(&form, spec.n);
            Ok(MollifiedField {
                inner: field,
                spec,
                mode: Mode::Radial { form, profile },
            })
        }
        None => MollifiedField::generic(field, spec),
    }
}

impl MollifiedField {
    /// Mollify with the polar midpoint rule regardless of structure.
    pub fn generic(field: Arc<dyn VectorField>, spec: MollifierSpec) -> Result<Self> {
        spec.validate()?;
        if field.dim() != 3 {
            return Err(Error::UnsupportedDimension(field.dim()));
        }
        let h = 1.0 / spec.n as f64;
        let na = (spec.angular_nodes as f64).sqrt().round() as usize;
        let dr = h / spec.radial_nodes as f64;
        let dc = 2.0 / na as f64;
        let dphi = 2.0 * PI / na as f64;
        let mut offsets = Vec::with_capacity(spec.node_count());
        let mut weights = Vec::with_capacity(spec.node_count());
        for i in 0..spec.radial_nodes {
            let r = (i as f64 + 0.5) * dr;
            let wr = kernel(r / h) * r * r * dr;
            for a in 0..na {
                let c = -1.0 + (a as f64 + 0.5) * dc;
                let s = (1.0 - c * c).sqrt();
                for b in 0..na {
                    let phi = (b as f64 + 0.5) * dphi;
                    offsets.push([r * s * phi.cos(), r * s * phi.sin(), r * c]);
                    weights.push(wr * dc * dphi);
                }
            }
        }
        let total: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= total;
        }
        Ok(Self {
            inner: field,
            spec,
            mode: Mode::Generic { offsets, weights },
        })
    }

    pub fn spec(&self) -> MollifierSpec {
        self.spec
    }

    pub fn is_radial(&self) -> bool {
        matches!(self.mode, Mode::Radial { .. })
    }

    pub fn profile(&self) -> Option<&RadialProfile> {
        match &self.mode {
            Mode::Radial { profile, .. } => Some(profile),
            Mode::Generic { .. } => None,
        }
    }

    /// Evaluate and report whether a declared singular point of the inner
    /// field lies within the kernel support, where the fixed rule loses
    /// accuracy.
    pub fn eval_checked(&self, x: &[f64], out: &mut [f64]) -> bool {
        self.eval(x, out);
        match self.mode {
            Mode::Radial { .. } => false,
            Mode::Generic { .. } => {
                let h = 1.0 / self.spec.n as f64;
                self.inner.singular_points().iter().any(|p| dist(p, x) < h)
            }
        }
    }
}

impl VectorField for MollifiedField {
    fn dim(&self) -> usize {
        3
    }
    fn out_dim(&self) -> usize {
        self.inner.out_dim()
    }
    fn eval(&self, x: &[f64], out: &mut [f64]) {
        match &self.mode {
            Mode::Radial { form, profile } => {
                out.copy_from_slice(&form.constant);
                let r = norm(x);
                if r == 0.0 {
                    return;
                }
                let (g, _) = profile.eval(r, form);
                if g == 0.0 {
                    return;
                }
                for (o, row) in out.iter_mut().zip(form.pattern.chunks_exact(3)) {
                    *o += g * (row[0] * x[0] + row[1] * x[1] + row[2] * x[2]) / r;
                }
            }
            Mode::Generic { offsets, weights } => {
                out.fill(0.0);
                let mut buf = vec![0.0; out.len()];
                let mut y = [0.0; 3];
                for (o, w) in offsets.iter().zip(weights) {
                    for k in 0..3 {
                        y[k] = x[k] - o[k];
                    }
                    self.inner.eval(&y, &mut buf);
                    for (a, b) in out.iter_mut().zip(&buf) {
                        *a += w * b;
                    }
                }
            }
        }
    }
    fn partial(&self, x: &[f64], j: usize, out: &mut [f64]) -> bool {
        let Mode::Radial { form, profile } = &self.mode else {
            return false;
        };
        out.fill(0.0);
        let r = norm(x);
        let (g, dg) = profile.eval(r, form);
        let mut dw = [0.0; 3];
        if r < 1e-12 {
            dw[j] = dg;
        } else {
            let w = [x[0] / r, x[1] / r, x[2] / r];
            for l in 0..3 {
                let delta = if l == j { 1.0 } else { 0.0 };
                dw[l] = dg * w[j] * w[l] + g * (delta - w[l] * w[j]) / r;
            }
        }
        for (o, row) in out.iter_mut().zip(form.pattern.chunks_exact(3)) {
            *o = row[0] * dw[0] + row[1] * dw[1] + row[2] * dw[2];
        }
        true
    }
    fn is_constant(&self) -> bool {
        self.inner.is_constant()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{example_drift, example_sigma, ConstantField, ExampleParams};

    #[test]
    fn kernel_has_unit_mass() {
        // Mass of the bump from 30-digit adaptive quadrature.
        let m = 1.0 / kernel_normalization();
        assert!((m - 0.441_088_887_276_604).abs() < 1e-10, "{m}");
    }

    #[test]
    fn constants_are_preserved() {
        let c: Arc<dyn VectorField> = Arc::new(ConstantField::new(3, vec![1.5, -2.0, 0.25]));
        for m in [
            mollify(c.clone(), MollifierSpec::new(4)).unwrap(),
            MollifiedField::generic(c, MollifierSpec::new(4)).unwrap(),
        ] {
            let mut out = [0.0; 3];
            m.eval(&[0.3, 0.2, -1.0], &mut out);
            for (a, b) in out.iter().zip([1.5, -2.0, 0.25]) {
                assert!((a - b).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn radial_and_generic_agree_away_from_the_singularity() {
        let p = ExampleParams::new(1.0, 0.3, 0.1);
        let b: Arc<dyn VectorField> = Arc::new(example_drift(&p));
        let radial = mollify(b.clone(), MollifierSpec::new(8)).unwrap();
        let generic = MollifiedField::generic(b, MollifierSpec::new(8)).unwrap();
        assert!(radial.is_radial());
        for x in [[0.5, 0.1, 0.0], [0.0, -0.6, 0.3], [0.2, 0.2, 0.2]] {
            let (mut u, mut v) = ([0.0; 3], [0.0; 3]);
            radial.eval(&x, &mut u);
            generic.eval(&x, &mut v);
            for k in 0..3 {
                assert!((u[k] - v[k]).abs() < 2e-3 * norm(&u), "{x:?}: {u:?} vs {v:?}");
            }
        }
    }

    #[test]
    fn mollified_sigma_derivative_matches_differences() {
        let p = ExampleParams::new(1.0, 0.3, 0.1);
        let s: Arc<dyn VectorField> = Arc::new(example_sigma(&p));
        let m = mollify(s, MollifierSpec::new(8)).unwrap();
        let mut an = vec![0.0; 36];
        let mut fd = vec![0.0; 36];
        for x in [[0.05, 0.02, -0.03], [0.4, 0.0, 0.1], [1.5, 2.0, 0.0]] {
            for j in 0..3 {
                assert!(m.partial(&x, j, &mut an));
                crate::fields::central_difference(&m, &x, j, &mut fd);
                for k in 0..36 {
                    assert!((an[k] - fd[k]).abs() < 1e-5, "{x:?} {j} {k}: {} vs {}", an[k], fd[k]);
                }
            }
        }
    }

    #[test]
    fn mollified_drift_is_finite_at_origin() {
        let p = ExampleParams::new(1.0, 0.0, 1.0);
        let b: Arc<dyn VectorField> = Arc::new(example_drift(&p));
        for n in [2, 4, 8, 16] {
            let m = mollify(b.clone(), MollifierSpec::new(n)).unwrap();
            let mut out = [0.0; 3];
            m.eval(&[0.0; 3], &mut out);
            assert!(out.iter().all(|v| v.is_finite()));
            m.eval(&[1e-3, 0.0, 0.0], &mut out);
            assert!(out[0].is_finite() && out[0] < 0.0);
        }
    }
}
