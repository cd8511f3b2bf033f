//! Coefficient fields: evaluation, derivatives and mollification.
//!
//! Matrix-valued fields are stored row-major, so entry `(i, k)` of a `d × d1`
//! field lives at index `i * d1 + k`.

mod bumps;
mod example;
mod mollifier;

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::geom::{dist, norm};
pub use crate::quadrature::SingularAtom;

pub use bumps::{log_squared_constant, lp_mass_partial, DisjointBumpField, DisjointBumpParams, RadiiRule};
pub use example::{example_coefficients, example_drift, example_sigma, ExampleDrift, ExampleParams, ExampleSigma};
pub use mollifier::{kernel, kernel_normalization, mollify, MollifiedField, MollifierSpec, RadialProfile};

/// `field(x) = constant + pattern · ω · profile(|x|)` with `ω = x / |x|`.
///
/// Fields of this form commute with rotations, so their mollification is again
/// of this form and reduces to a one-dimensional profile.
#[derive(Clone)]
pub struct RadialForm {
    pub constant: Vec<f64>,
    /// `out_dim × d`, row-major.
    pub pattern: Vec<f64>,
    pub profile: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    /// Radii where the profile is not smooth.
    pub breakpoints: Vec<f64>,
    /// The profile vanishes beyond this radius, if it does.
    pub support: Option<f64>,
}

impl fmt::Debug for RadialForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RadialForm")
            .field("constant", &self.constant)
            .field("pattern", &self.pattern)
            .field("breakpoints", &self.breakpoints)
            .field("support", &self.support)
            .finish_non_exhaustive()
    }
}

/// A vector or flattened matrix field on `R^d`.
pub trait VectorField: Send + Sync {
    fn dim(&self) -> usize;
    fn out_dim(&self) -> usize;
    fn eval(&self, x: &[f64], out: &mut [f64]);

    /// Writes `∂_j field(x)` into `out` and returns true, or returns false when
    /// no analytic derivative is available.
    fn partial(&self, _x: &[f64], _j: usize, _out: &mut [f64]) -> bool {
        false
    }

    /// Singular atoms of `|field|`.
    fn atoms(&self) -> Vec<SingularAtom> {
        Vec::new()
    }

    /// Singular atoms of the derivative norm `|D field|`.
    fn gradient_atoms(&self) -> Vec<SingularAtom> {
        Vec::new()
    }

    /// True when `|field|` vanishes outside its atoms.
    fn exterior_vanishes(&self) -> bool {
        false
    }

    fn radial(&self) -> Option<RadialForm> {
        None
    }

    fn is_constant(&self) -> bool {
        false
    }

    /// Points where the field is not smooth.
    fn singular_points(&self) -> Vec<Vec<f64>> {
        Vec::new()
    }
}

/// A scalar field on `R^d`, the object whose Morrey norm is computed.
pub trait ScalarField: Send + Sync {
    fn dim(&self) -> usize;
    fn eval(&self, x: &[f64]) -> f64;

    fn atoms(&self) -> Vec<SingularAtom> {
        Vec::new()
    }

    /// Index into `atoms` of the atom whose region contains `x`.
    fn locate_atom(&self, x: &[f64], atoms: &[SingularAtom]) -> Option<usize> {
        atoms.iter().position(|a| dist(x, &a.center) < a.radius)
    }

    fn exterior_vanishes(&self) -> bool {
        false
    }

    /// Bounding box outside which the field is zero or uninteresting.
    fn region(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        None
    }
}

/// Constant vector or matrix field.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantField {
    pub dim: usize,
    pub value: Vec<f64>,
}

impl ConstantField {
    pub fn new(dim: usize, value: Vec<f64>) -> Self {
        Self { dim, value }
    }

    pub fn zero(dim: usize, out_dim: usize) -> Self {
        Self::new(dim, vec![0.0; out_dim])
    }

    /// `[I | 0]` as a `d × d1` matrix.
    pub fn identity_block(d: usize, d1: usize) -> Self {
        let mut v = vec![0.0; d * d1];
        for i in 0..d {
            v[i * d1 + i] = 1.0;
        }
        Self::new(d, v)
    }
}

impl VectorField for ConstantField {
    fn dim(&self) -> usize {
        self.dim
    }
    fn out_dim(&self) -> usize {
        self.value.len()
    }
    fn eval(&self, _x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.value);
    }
    fn partial(&self, _x: &[f64], _j: usize, out: &mut [f64]) -> bool {
        out.fill(0.0);
        true
    }
    fn radial(&self) -> Option<RadialForm> {
        Some(RadialForm {
            constant: self.value.clone(),
            pattern: vec![0.0; self.value.len() * self.dim],
            profile: Arc::new(|_| 0.0),
            breakpoints: Vec::new(),
            support: Some(0.0),
        })
    }
    fn is_constant(&self) -> bool {
        true
    }
}

/// Vector field given by a closure, with an optional declared region.
pub struct FnVectorField<F> {
    pub dim: usize,
    pub out_dim: usize,
    pub f: F,
}

impl<F: Fn(&[f64], &mut [f64]) + Send + Sync> VectorField for FnVectorField<F> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn out_dim(&self) -> usize {
        self.out_dim
    }
    fn eval(&self, x: &[f64], out: &mut [f64]) {
        (self.f)(x, out)
    }
}

/// Scalar field given by a closure.
pub struct FnScalar<F> {
    pub dim: usize,
    pub f: F,
    pub region: Option<(Vec<f64>, Vec<f64>)>,
}

impl<F: Fn(&[f64]) -> f64 + Send + Sync> FnScalar<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f, region: None }
    }
}

impl<F: Fn(&[f64]) -> f64 + Send + Sync> ScalarField for FnScalar<F> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, x: &[f64]) -> f64 {
        (self.f)(x)
    }
    fn region(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        self.region.clone()
    }
}

/// Euclidean norm of a vector field.
#[derive(Clone)]
pub struct Magnitude(pub Arc<dyn VectorField>);

impl ScalarField for Magnitude {
    fn dim(&self) -> usize {
        self.0.dim()
    }
    fn eval(&self, x: &[f64]) -> f64 {
        let mut out = vec![0.0; self.0.out_dim()];
        self.0.eval(x, &mut out);
        norm(&out)
    }
    fn atoms(&self) -> Vec<SingularAtom> {
        self.0.atoms()
    }
    fn exterior_vanishes(&self) -> bool {
        self.0.exterior_vanishes()
    }
}

/// `coef · |x - center|^{-order}` on `|x - center| < radius`, zero outside.
#[derive(Debug, Clone, PartialEq)]
pub struct RadialPowerBump {
    pub center: Vec<f64>,
    pub coef: f64,
    pub order: f64,
    pub radius: f64,
}

impl RadialPowerBump {
    /// `|x|^{-1}` on the unit ball of `R^d`.
    pub fn inverse_distance(d: usize) -> Self {
        Self {
            center: vec![0.0; d],
            coef: 1.0,
            order: 1.0,
            radius: 1.0,
        }
    }
}

impl ScalarField for RadialPowerBump {
    fn dim(&self) -> usize {
        self.center.len()
    }
    fn eval(&self, x: &[f64]) -> f64 {
        let r = dist(x, &self.center);
        if r < self.radius {
            self.coef * r.powf(-self.order)
        } else {
            0.0
        }
    }
    fn atoms(&self) -> Vec<SingularAtom> {
        vec![SingularAtom::pure(
            self.center.clone(),
            self.radius,
            self.order,
            self.coef.abs(),
        )]
    }
    fn exterior_vanishes(&self) -> bool {
        true
    }
    fn region(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        if self.radius.is_finite() {
            let lo = self.center.iter().map(|c| c - self.radius).collect();
            let hi = self.center.iter().map(|c| c + self.radius).collect();
            Some((lo, hi))
        } else {
            None
        }
    }
}

/// `λ · v(λ x)`, the scaling under which Morrey norms with horizon `R0 / λ`
/// are invariant.
#[derive(Clone)]
pub struct Dilated {
    pub inner: Arc<dyn ScalarField>,
    pub lambda: f64,
}

impl ScalarField for Dilated {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn eval(&self, x: &[f64]) -> f64 {
        let y: Vec<f64> = x.iter().map(|v| v * self.lambda).collect();
        self.lambda * self.inner.eval(&y)
    }
    fn atoms(&self) -> Vec<SingularAtom> {
        let l = self.lambda;
        self.inner
            .atoms()
            .into_iter()
            .map(|a| SingularAtom {
                center: a.center.iter().map(|c| c / l).collect(),
                radius: a.radius / l,
                order: a.order,
                coef: a.coef.map(|c| c * l.powf(1.0 - a.order)),
            })
            .collect()
    }
    fn exterior_vanishes(&self) -> bool {
        self.inner.exterior_vanishes()
    }
    fn region(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        self.inner.region().map(|(lo, hi)| {
            (
                lo.iter().map(|v| v / self.lambda).collect(),
                hi.iter().map(|v| v / self.lambda).collect(),
            )
        })
    }
}

/// `c · v`.
#[derive(Clone)]
pub struct Scaled {
    pub inner: Arc<dyn ScalarField>,
    pub factor: f64,
}

impl ScalarField for Scaled {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn eval(&self, x: &[f64]) -> f64 {
        self.factor * self.inner.eval(x)
    }
    fn atoms(&self) -> Vec<SingularAtom> {
        self.inner
            .atoms()
            .into_iter()
            .map(|mut a| {
                a.coef = a.coef.map(|c| c * self.factor.abs());
                a
            })
            .collect()
    }
    fn locate_atom(&self, x: &[f64], atoms: &[SingularAtom]) -> Option<usize> {
        self.inner.locate_atom(x, atoms)
    }
    fn exterior_vanishes(&self) -> bool {
        self.inner.exterior_vanishes()
    }
    fn region(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        self.inner.region()
    }
}

/// The diffusion matrix, drift and ellipticity constant of an Itô equation.
#[derive(Clone)]
pub struct CoefficientSet {
    pub dim_d: usize,
    pub dim_d1: usize,
    pub sigma: Arc<dyn VectorField>,
    pub drift: Arc<dyn VectorField>,
    pub delta: f64,
    pub singular_points: Vec<Vec<f64>>,
}

impl fmt::Debug for CoefficientSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CoefficientSet")
            .field("dim_d", &self.dim_d)
            .field("dim_d1", &self.dim_d1)
            .field("delta", &self.delta)
            .field("singular_points", &self.singular_points)
            .finish_non_exhaustive()
    }
}

impl CoefficientSet {
    pub fn new(
        dim_d: usize,
        dim_d1: usize,
        sigma: Arc<dyn VectorField>,
        drift: Arc<dyn VectorField>,
        delta: f64,
    ) -> Result<Self> {
        if dim_d < 3 || dim_d1 < dim_d {
            return Err(Error::param(
                "dims",
                format!("need d1 >= d >= 3, got d = {dim_d}, d1 = {dim_d1}"),
            ));
        }
        if !(delta > 0.0 && delta <= 1.0) {
            return Err(Error::param("delta", "must lie in (0, 1]"));
        }
        if sigma.out_dim() != dim_d * dim_d1 || sigma.dim() != dim_d {
            return Err(Error::DimensionMismatch {
                expected: dim_d * dim_d1,
                got: sigma.out_dim(),
            });
        }
        if drift.out_dim() != dim_d || drift.dim() != dim_d {
            return Err(Error::DimensionMismatch {
                expected: dim_d,
                got: drift.out_dim(),
            });
        }
        let mut singular_points = sigma.singular_points();
        for p in drift.singular_points() {
            if !singular_points.contains(&p) {
                singular_points.push(p);
            }
        }
        Ok(Self {
            dim_d,
            dim_d1,
            sigma,
            drift,
            delta,
            singular_points,
        })
    }

    /// `σ = [I | 0]`, `b = 0`.
    pub fn brownian(d: usize, d1: usize) -> Result<Self> {
        if d1 < d {
            return Err(Error::param("dims", format!("need d1 >= d, got d = {d}, d1 = {d1}")));
        }
        Self::new(
            d,
            d1,
            Arc::new(ConstantField::identity_block(d, d1)),
            Arc::new(ConstantField::zero(d, d)),
            1.0,
        )
    }

    /// Same diffusion with a different drift.
    pub fn with_drift(&self, drift: Arc<dyn VectorField>) -> Result<Self> {
        Self::new(self.dim_d, self.dim_d1, self.sigma.clone(), drift, self.delta)
    }

    pub fn sigma_at(&self, x: &[f64], out: &mut [f64]) {
        self.sigma.eval(x, out)
    }

    pub fn drift_at(&self, x: &[f64], out: &mut [f64]) {
        self.drift.eval(x, out)
    }

    /// `a = σσ*` as a row-major `d × d` matrix.
    pub fn a_at(&self, x: &[f64]) -> Vec<f64> {
        let (d, d1) = (self.dim_d, self.dim_d1);
        let mut s = vec![0.0; d * d1];
        self.sigma.eval(x, &mut s);
        sigma_to_a(&s, d, d1)
    }

    pub fn sigma_partial(&self, x: &[f64], j: usize, out: &mut [f64]) {
        partial_or_fd(self.sigma.as_ref(), x, j, out)
    }

    pub fn drift_partial(&self, x: &[f64], j: usize, out: &mut [f64]) {
        partial_or_fd(self.drift.as_ref(), x, j, out)
    }

    pub fn is_singular(&self, x: &[f64]) -> bool {
        self.singular_points.iter().any(|p| dist(p, x) <= 1e-14)
    }

    /// `|Dσ|(x) = (Σ_{i,j,k} |∂_j σ^{ik}|²)^{1/2}`, `+∞` at singular points.
    pub fn grad_sigma_norm(&self, x: &[f64]) -> f64 {
        if self.is_singular(x) {
            return f64::INFINITY;
        }
        let mut out = vec![0.0; self.dim_d * self.dim_d1];
        let mut sum = 0.0;
        for j in 0..self.dim_d {
            self.sigma_partial(x, j, &mut out);
            sum += out.iter().map(|v| v * v).sum::<f64>();
        }
        sum.sqrt()
    }

    /// Finite-difference version of [`grad_sigma_norm`](Self::grad_sigma_norm).
    pub fn grad_sigma_norm_fd(&self, x: &[f64]) -> f64 {
        if self.is_singular(x) {
            return f64::INFINITY;
        }
        let mut out = vec![0.0; self.dim_d * self.dim_d1];
        let mut sum = 0.0;
        for j in 0..self.dim_d {
            central_difference(self.sigma.as_ref(), x, j, &mut out);
            sum += out.iter().map(|v| v * v).sum::<f64>();
        }
        sum.sqrt()
    }

    /// Extreme eigenvalues of `a(x)` over the sample points.
    pub fn eigen_range(&self, points: &[Vec<f64>]) -> (f64, f64) {
        let d = self.dim_d;
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for x in points {
            let a = DMatrix::from_row_slice(d, d, &self.a_at(x));
            for &e in SymmetricEigen::new(a).eigenvalues.iter() {
                lo = lo.min(e);
                hi = hi.max(e);
            }
        }
        (lo, hi)
    }

    /// Checks that the eigenvalues of `a` lie in `[δ, 1/δ]` at every point.
    pub fn check_ellipticity(&self, points: &[Vec<f64>]) -> Result<(f64, f64)> {
        let (lo, hi) = self.eigen_range(points);
        let tol = 1e-12;
        if lo < self.delta - tol || hi > 1.0 / self.delta + tol {
            return Err(Error::param(
                "delta",
                format!(
                    "eigenvalues of a span [{lo}, {hi}], outside [{}, {}]",
                    self.delta,
                    1.0 / self.delta
                ),
            ));
        }
        Ok((lo, hi))
    }

    /// The scalar field `|Dσ|` with its singular atoms.
    pub fn grad_sigma_field(&self) -> GradSigmaNorm {
        GradSigmaNorm(self.clone())
    }
}

pub(crate) fn sigma_to_a(s: &[f64], d: usize, d1: usize) -> Vec<f64> {
    let mut a = vec![0.0; d * d];
    for i in 0..d {
        for j in i..d {
            let v: f64 = (0..d1).map(|k| s[i * d1 + k] * s[j * d1 + k]).sum();
            a[i * d + j] = v;
            a[j * d + i] = v;
        }
    }
    a
}

/// Step used for centered differences at `x`.
pub fn fd_step(x: &[f64]) -> f64 {
    1e-5 * norm(x).max(1.0)
}

pub fn central_difference(f: &dyn VectorField, x: &[f64], j: usize, out: &mut [f64]) {
    let h = fd_step(x);
    let mut xp = x.to_vec();
    let mut xm = x.to_vec();
    xp[j] += h;
    xm[j] -= h;
    let mut fm = vec![0.0; out.len()];
    f.eval(&xp, out);
    f.eval(&xm, &mut fm);
    for (o, m) in out.iter_mut().zip(&fm) {
        *o = (*o - m) / (2.0 * h);
    }
}

fn partial_or_fd(f: &dyn VectorField, x: &[f64], j: usize, out: &mut [f64]) {
    if !f.partial(x, j, out) {
        central_difference(f, x, j, out);
    }
}

/// `|Dσ|` as a scalar field.
#[derive(Clone, Debug)]
pub struct GradSigmaNorm(pub CoefficientSet);

impl ScalarField for GradSigmaNorm {
    fn dim(&self) -> usize {
        self.0.dim_d
    }
    fn eval(&self, x: &[f64]) -> f64 {
        self.0.grad_sigma_norm(x)
    }
    fn atoms(&self) -> Vec<SingularAtom> {
        self.0.sigma.gradient_atoms()
    }
    fn exterior_vanishes(&self) -> bool {
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn brownian_set_is_identity() {
        let c = CoefficientSet::brownian(3, 12).unwrap();
        let a = c.a_at(&[0.3, 0.1, -2.0]);
        assert_eq!(a, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(c.grad_sigma_norm(&[1.0, 2.0, 3.0]), 0.0);
        assert!(c.check_ellipticity(&[vec![0.0; 3]]).is_ok());
    }

    #[test]
    fn rejects_bad_dimensions() {
        assert!(CoefficientSet::brownian(2, 12).is_err());
        assert!(CoefficientSet::brownian(3, 2).is_err());
    }

    #[test]
    fn dilation_rescales_atoms() {
        let v: Arc<dyn ScalarField> = Arc::new(RadialPowerBump::inverse_distance(3));
        let w = Dilated {
            inner: v.clone(),
            lambda: 2.0,
        };
        let x = [0.1, 0.05, 0.0];
        let a = &w.atoms()[0];
        assert!((a.radius - 0.5).abs() < 1e-15);
        // 2 v(2x) = 2 / |2x| = 1 / |x|, so the coefficient is unchanged.
        assert!((a.coef.unwrap() - 1.0).abs() < 1e-15);
        assert!((w.eval(&x) - 1.0 / norm(&x)).abs() < 1e-12);
    }
}
