//! The three-dimensional example with a radial singularity at the origin:
//! `σ = [αI | (β/|x|) X(x)]` and `b = -γ x/|x|² 1_{0<|x|≤1} + b̂`.

use std::sync::Arc;

use super::{CoefficientSet, RadialForm, SingularAtom, VectorField};
use crate::error::{Error, Result};
use crate::geom::norm;

const D: usize = 3;
const D1: usize = 12;

#[derive(Clone)]
pub struct ExampleParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Bounded perturbation of the drift; `None` means zero.
    pub bhat: Option<Arc<dyn VectorField>>,
}

impl std::fmt::Debug for ExampleParams {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExampleParams")
            .field("alpha", &self.alpha)
            .field("beta", &self.beta)
            .field("gamma", &self.gamma)
            .field("bhat", &self.bhat.is_some())
            .finish()
    }
}

impl ExampleParams {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Self {
        Self {
            alpha,
            beta,
            gamma,
            bhat: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::param(name, "must be a finite nonnegative number"));
            }
        }
        if self.alpha * self.alpha + self.beta * self.beta == 0.0 {
            return Err(Error::param("alpha", "alpha^2 + beta^2 must be positive"));
        }
        if let Some(b) = &self.bhat {
            if b.dim() != D || b.out_dim() != D {
                return Err(Error::DimensionMismatch {
                    expected: D,
                    got: b.out_dim(),
                });
            }
        }
        Ok(())
    }
}

/// Unit direction with the convention `0/0 = 3^{-1/2}`.
#[inline]
fn direction(x: &[f64]) -> ([f64; 3], f64) {
    let r = norm(x);
    if r == 0.0 {
        let c = 1.0 / 3f64.sqrt();
        ([c, c, c], 0.0)
    } else {
        ([x[0] / r, x[1] / r, x[2] / r], r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExampleSigma {
    pub alpha: f64,
    pub beta: f64,
}

pub fn example_sigma(params: &ExampleParams) -> ExampleSigma {
    ExampleSigma {
        alpha: params.alpha,
        beta: params.beta,
    }
}

impl VectorField for ExampleSigma {
    fn dim(&self) -> usize {
        D
    }
    fn out_dim(&self) -> usize {
        D * D1
    }
    fn eval(&self, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        let (w, _) = direction(x);
        for i in 0..D {
            out[i * D1 + i] = self.alpha;
            for l in 0..D {
                out[i * D1 + D + D * i + l] = self.beta * w[l];
            }
        }
    }
    fn partial(&self, x: &[f64], j: usize, out: &mut [f64]) -> bool {
        out.fill(0.0);
        let (w, r) = direction(x);
        if r == 0.0 || self.beta == 0.0 {
            return true;
        }
        for i in 0..D {
            for l in 0..D {
                let delta = if l == j { 1.0 } else { 0.0 };
                out[i * D1 + D + D * i + l] = self.beta * (delta - w[l] * w[j]) / r;
            }
        }
        true
    }
    fn gradient_atoms(&self) -> Vec<SingularAtom> {
        if self.beta == 0.0 {
            return Vec::new();
        }
        vec![SingularAtom::pure(
            vec![0.0; D],
            f64::INFINITY,
            1.0,
            6f64.sqrt() * self.beta,
        )]
    }
    fn radial(&self) -> Option<RadialForm> {
        let mut constant = vec![0.0; D * D1];
        let mut pattern = vec![0.0; D * D1 * D];
        for i in 0..D {
            constant[i * D1 + i] = self.alpha;
            for l in 0..D {
                pattern[(i * D1 + D + D * i + l) * D + l] = 1.0;
            }
        }
        let beta = self.beta;
        Some(RadialForm {
            constant,
            pattern,
            profile: Arc::new(move |_| beta),
            breakpoints: Vec::new(),
            support: None,
        })
    }
    fn is_constant(&self) -> bool {
        self.beta == 0.0
    }
    fn singular_points(&self) -> Vec<Vec<f64>> {
        if self.beta == 0.0 {
            Vec::new()
        } else {
            vec![vec![0.0; D]]
        }
    }
}

#[derive(Clone)]
pub struct ExampleDrift {
    pub gamma: f64,
    pub bhat: Option<Arc<dyn VectorField>>,
}

pub fn example_drift(params: &ExampleParams) -> ExampleDrift {
    ExampleDrift {
        gamma: params.gamma,
        bhat: params.bhat.clone(),
    }
}

impl VectorField for ExampleDrift {
    fn dim(&self) -> usize {
        D
    }
    fn out_dim(&self) -> usize {
        D
    }
    fn eval(&self, x: &[f64], out: &mut [f64]) {
        match &self.bhat {
            Some(b) => b.eval(x, out),
            None => out.fill(0.0),
        }
        let r2 = x[0] * x[0] + x[1] * x[1] + x[2] * x[2];
        if r2 > 0.0 && r2 <= 1.0 {
            for k in 0..D {
                out[k] -= self.gamma * x[k] / r2;
            }
        }
    }
    fn partial(&self, x: &[f64], j: usize, out: &mut [f64]) -> bool {
        match &self.bhat {
            Some(b) => {
                if !b.partial(x, j, out) {
                    super::central_difference(b.as_ref(), x, j, out);
                }
            }
            None => out.fill(0.0),
        }
        let r2 = x[0] * x[0] + x[1] * x[1] + x[2] * x[2];
        if r2 > 0.0 && r2 < 1.0 {
            for i in 0..D {
                let delta = if i == j { 1.0 } else { 0.0 };
                out[i] -= self.gamma * (delta / r2 - 2.0 * x[i] * x[j] / (r2 * r2));
            }
        }
        true
    }
    fn atoms(&self) -> Vec<SingularAtom> {
        if self.gamma == 0.0 || self.bhat.is_some() {
            return Vec::new();
        }
        vec![SingularAtom::pure(vec![0.0; D], 1.0, 1.0, self.gamma)]
    }
    fn exterior_vanishes(&self) -> bool {
        self.bhat.is_none()
    }
    fn radial(&self) -> Option<RadialForm> {
        let constant = match &self.bhat {
            None => vec![0.0; D],
            Some(b) if b.is_constant() => {
                let mut c = vec![0.0; D];
                b.eval(&[0.0; D], &mut c);
                c
            }
            Some(_) => return None,
        };
        let mut pattern = vec![0.0; D * D];
        for i in 0..D {
            pattern[i * D + i] = 1.0;
        }
        let gamma = self.gamma;
        Some(RadialForm {
            constant,
            pattern,
            profile: Arc::new(move |r| if r > 0.0 && r <= 1.0 { -gamma / r } else { 0.0 }),
            breakpoints: vec![1.0],
            support: Some(1.0),
        })
    }
    fn is_constant(&self) -> bool {
        self.gamma == 0.0 && self.bhat.as_ref().is_none_or(|b| b.is_constant())
    }
    fn singular_points(&self) -> Vec<Vec<f64>> {
        if self.gamma == 0.0 {
            Vec::new()
        } else {
            vec![vec![0.0; D]]
        }
    }
}

/// The example's coefficient set. The eigenvalues of `a` all equal
/// `α² + β²`, which fixes `δ`.
pub fn example_coefficients(params: &ExampleParams) -> Result<CoefficientSet> {
    params.validate()?;
    let s = params.alpha * params.alpha + params.beta * params.beta;
    let delta = s.min(1.0 / s);
    CoefficientSet::new(
        D,
        D1,
        Arc::new(example_sigma(params)),
        Arc::new(example_drift(params)),
        delta,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn coeffs(alpha: f64, beta: f64, gamma: f64) -> CoefficientSet {
        example_coefficients(&ExampleParams::new(alpha, beta, gamma)).unwrap()
    }

    #[test]
    fn a_is_scalar_at_unit_axis_point() {
        let a = coeffs(1.0, 0.5, 0.0).a_at(&[1.0, 0.0, 0.0]);
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.25 } else { 0.0 };
                assert!((a[i * 3 + j] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn origin_uses_the_zero_over_zero_convention() {
        let c = coeffs(1.0, 0.5, 0.0);
        let mut s = vec![0.0; 36];
        c.sigma_at(&[0.0; 3], &mut s);
        let want = 0.5 / 3f64.sqrt();
        for i in 0..3 {
            for l in 0..3 {
                assert!((s[i * 12 + 3 + 3 * i + l] - want).abs() < 1e-15);
            }
        }
        let a = c.a_at(&[0.0; 3]);
        assert!((a[0] - 1.25).abs() < 1e-15 && (a[4] - 1.25).abs() < 1e-15);
        assert!(a[1].abs() < 1e-15);
    }

    #[test]
    fn zero_beta_gives_identity_block() {
        let a = coeffs(1.0, 0.0, 0.0).a_at(&[0.3, -0.7, 2.0]);
        assert_eq!(a, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn drift_values() {
        let c = coeffs(1.0, 0.0, 1.0);
        let mut b = [0.0; 3];
        c.drift_at(&[0.5, 0.0, 0.0], &mut b);
        assert_eq!(b, [-2.0, 0.0, 0.0]);
        c.drift_at(&[2.0, 0.0, 0.0], &mut b);
        assert_eq!(b, [0.0; 3]);
        c.drift_at(&[0.0; 3], &mut b);
        assert_eq!(b, [0.0; 3]);
        let c0 = coeffs(1.0, 0.0, 0.0);
        c0.drift_at(&[0.2, 0.1, 0.0], &mut b);
        assert_eq!(b, [0.0; 3]);
    }

    #[test]
    fn grad_sigma_norm_is_root_six_beta_over_r() {
        let c = coeffs(0.7, 1.0, 0.0);
        let x = [0.3, -0.4, 1.2];
        let r = norm(&x);
        let want = 6f64.sqrt() / r;
        assert!((c.grad_sigma_norm(&x) - want).abs() < 1e-12 * want);
        assert!((c.grad_sigma_norm_fd(&x) - want).abs() < 1e-6 * want);
        assert_eq!(c.grad_sigma_norm(&[0.0; 3]), f64::INFINITY);
        assert_eq!(coeffs(1.0, 0.0, 0.3).grad_sigma_norm(&x), 0.0);
    }

    #[test]
    fn drift_partial_matches_differences() {
        let c = coeffs(1.0, 0.3, 0.4);
        let x = [0.2, 0.3, -0.1];
        let mut an = [0.0; 3];
        let mut fd = [0.0; 3];
        for j in 0..3 {
            c.drift.partial(&x, j, &mut an);
            super::super::central_difference(c.drift.as_ref(), &x, j, &mut fd);
            for k in 0..3 {
                assert!((an[k] - fd[k]).abs() < 1e-5 * an[k].abs().max(1.0));
            }
        }
    }

    #[test]
    fn nondegeneracy_is_enforced() {
        assert!(example_coefficients(&ExampleParams::new(0.0, 0.0, 1.0)).is_err());
        assert!(example_coefficients(&ExampleParams::new(-1.0, 0.0, 1.0)).is_err());
    }
}
