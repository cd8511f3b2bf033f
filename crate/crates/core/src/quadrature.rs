//! Deterministic quadrature over balls in three dimensions.
//!
//! Integrands may carry singular atoms: regions `|x - a| < r` on which the
//! integrand behaves like `|x - a|^{-order}`. An atom whose center lies inside
//! the ball is integrated in polar coordinates around the atom, which removes
//! the singularity from the radial integral. Everything else is integrated in
//! polar coordinates around the ball center with geometrically graded radial
//! panels.

use std::f64::consts::PI;
use std::num::NonZeroUsize;

use gauss_quad::GaussLegendre;

use crate::error::{Error, Result};
use crate::geom::{dist, unit_ball_volume};
use crate::rng::{geometry_seed, splitmix64};

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    let n = NonZeroUsize::new(n.max(1)).unwrap();
    GaussLegendre::new(n).as_node_weight_pairs().to_vec()
}

/// Gauss–Legendre rule mapped to `[a, b]`.
pub fn gauss_legendre_on(n: usize, a: f64, b: f64) -> Vec<(f64, f64)> {
    let half = 0.5 * (b - a);
    let mid = 0.5 * (b + a);
    gauss_legendre(n)
        .into_iter()
        .map(|(x, w)| (mid + half * x, half * w))
        .collect()
}

/// Region on which an integrand behaves like `coef * |x - center|^{-order}`.
///
/// When `coef` is `None` the integrand is only known to be bounded by a
/// multiple of that power, so it is sampled with the singular factor removed.
#[derive(Debug, Clone, PartialEq)]
pub struct SingularAtom {
    pub center: Vec<f64>,
    pub radius: f64,
    pub order: f64,
    pub coef: Option<f64>,
}

impl SingularAtom {
    pub fn pure(center: Vec<f64>, radius: f64, order: f64, coef: f64) -> Self {
        Self {
            center,
            radius,
            order,
            coef: Some(coef),
        }
    }

    /// The atom of `|f|^q` when `self` describes `f`.
    pub fn powered(&self, q: f64) -> Self {
        Self {
            center: self.center.clone(),
            radius: self.radius,
            order: self.order * q,
            coef: self.coef.map(|c| c.abs().powf(q)),
        }
    }
}

/// Something that can be integrated over a ball.
pub trait Integrand: Sync {
    fn value(&self, x: &[f64]) -> f64;

    fn atoms(&self) -> &[SingularAtom] {
        &[]
    }

    /// Index of the atom whose region contains `x`. Atom regions are disjoint.
    fn locate_atom(&self, x: &[f64]) -> Option<usize> {
        self.atoms().iter().position(|a| dist(x, &a.center) < a.radius)
    }

    /// True when the integrand is zero outside the union of its atoms.
    fn exterior_vanishes(&self) -> bool {
        false
    }
}

impl<F: Fn(&[f64]) -> f64 + Sync> Integrand for F {
    fn value(&self, x: &[f64]) -> f64 {
        self(x)
    }
}

/// Product rule sizes: Gauss–Legendre in `cos θ`, trapezoid in `φ`, and
/// `panels` graded radial panels of `radial` Gauss–Legendre nodes each.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BallRule {
    pub theta: usize,
    pub phi: usize,
    pub radial: usize,
    pub panels: usize,
}

impl Default for BallRule {
    fn default() -> Self {
        Self {
            theta: 16,
            phi: 32,
            radial: 8,
            panels: 4,
        }
    }
}

impl BallRule {
    pub fn node_count(&self) -> usize {
        self.theta * self.phi * self.radial * self.panels
    }

    pub fn prepare(&self) -> PreparedRule {
        let mut directions = Vec::with_capacity(self.theta * self.phi);
        let dphi = 2.0 * PI / self.phi as f64;
        for (ct, wt) in gauss_legendre(self.theta) {
            let st = (1.0 - ct * ct).max(0.0).sqrt();
            for j in 0..self.phi {
                let phi = (j as f64 + 0.5) * dphi;
                directions.push(([st * phi.cos(), st * phi.sin(), ct], wt * dphi));
            }
        }
        // Panel edges 1, 1/2, 1/4, ... with the innermost panel reaching 0.
        let mut radial = Vec::with_capacity(self.radial * self.panels);
        let panels = self.panels.max(1);
        for k in 0..panels {
            let hi = 0.5f64.powi(k as i32);
            let lo = if k + 1 == panels { 0.0 } else { 0.5 * hi };
            for (r, w) in gauss_legendre_on(self.radial, lo, hi) {
                radial.push((r, w * r * r));
            }
        }
        let unit_v = gauss_legendre_on(self.radial * panels, 0.0, 1.0);
        PreparedRule {
            rule: *self,
            directions,
            radial,
            unit_v,
        }
    }
}

/// Nodes of a [`BallRule`] on the unit ball.
#[derive(Debug, Clone)]
pub struct PreparedRule {
    pub rule: BallRule,
    directions: Vec<([f64; 3], f64)>,
    radial: Vec<(f64, f64)>,
    unit_v: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BallIntegral {
    pub integral: f64,
    pub volume: f64,
    /// Nodes dropped because the integrand was not finite there.
    pub excluded: usize,
    pub flagged: bool,
}

impl BallIntegral {
    pub fn average(&self) -> f64 {
        self.integral / self.volume
    }
}

/// Integrate `f` over the ball `B_radius(center)` in `d = 3`.
pub fn integrate_ball<I: Integrand + ?Sized>(
    center: &[f64],
    radius: f64,
    f: &I,
    rule: &PreparedRule,
) -> Result<BallIntegral> {
    if center.len() != 3 {
        return Err(Error::UnsupportedDimension(center.len()));
    }
    if !(radius > 0.0) {
        return Err(Error::param("radius", "must be positive"));
    }
    let volume = unit_ball_volume(3) * radius.powi(3);
    let atoms = f.atoms();

    let mut active = Vec::new();
    let mut inactive_hit = false;
    for (i, a) in atoms.iter().enumerate() {
        let d = dist(center, &a.center);
        if d >= radius + a.radius {
            continue;
        }
        if d < radius {
            active.push(i);
        } else {
            inactive_hit = true;
        }
    }

    let mut integral = 0.0;
    let mut flagged = false;
    for &i in &active {
        let a = &atoms[i];
        let part = atom_part(center, radius, a, f, rule);
        if !part.is_finite() {
            flagged = true;
        }
        integral += part;
    }

    let mut excluded = 0;
    let skip_exterior = f.exterior_vanishes() && !inactive_hit;
    if !skip_exterior {
        let mut sum = 0.0;
        let mut w_eval = 0.0;
        let mut w_bad = 0.0;
        let mut x = [0.0; 3];
        for &(dir, wd) in &rule.directions {
            for &(r, wr) in &rule.radial {
                let rr = r * radius;
                for k in 0..3 {
                    x[k] = center[k] + rr * dir[k];
                }
                let hit = if atoms.is_empty() { None } else { f.locate_atom(&x) };
                if let Some(j) = hit {
                    if active.binary_search(&j).is_ok() {
                        continue;
                    }
                } else if f.exterior_vanishes() {
                    continue;
                }
                let w = wd * wr;
                w_eval += w;
                let v = f.value(&x);
                if v.is_finite() {
                    sum += w * v;
                } else {
                    w_bad += w;
                    excluded += 1;
                }
            }
        }
        if w_bad > 0.0 {
            flagged = true;
            if w_eval > w_bad {
                sum *= w_eval / (w_eval - w_bad);
            }
        }
        integral += sum * radius.powi(3);
    }

    Ok(BallIntegral {
        integral,
        volume,
        excluded,
        flagged,
    })
}

fn atom_part<I: Integrand + ?Sized>(center: &[f64], radius: f64, a: &SingularAtom, f: &I, rule: &PreparedRule) -> f64 {
    let e = 3.0 - a.order;
    if !(e > 0.0) {
        return f64::INFINITY;
    }
    let off = [
        a.center[0] - center[0],
        a.center[1] - center[1],
        a.center[2] - center[2],
    ];
    let off2 = off[0] * off[0] + off[1] * off[1] + off[2] * off[2];

    if let Some(c) = a.coef {
        if off2.sqrt() + a.radius <= radius {
            return c * 4.0 * PI * a.radius.powf(e) / e;
        }
    }

    let mut total = 0.0;
    let mut x = [0.0; 3];
    for &(dir, wd) in &rule.directions {
        let p = dir[0] * off[0] + dir[1] * off[1] + dir[2] * off[2];
        let disc = (p * p - off2 + radius * radius).max(0.0);
        let t_exit = -p + disc.sqrt();
        let tmax = t_exit.min(a.radius);
        if tmax <= 0.0 {
            continue;
        }
        let vmax = tmax.powf(e);
        match a.coef {
            Some(c) => total += wd * c * vmax / e,
            None => {
                let mut s = 0.0;
                for &(u, wu) in &rule.unit_v {
                    let v = u * vmax;
                    let t = v.powf(1.0 / e);
                    for k in 0..3 {
                        x[k] = a.center[k] + t * dir[k];
                    }
                    let g = f.value(&x) * t.powf(a.order);
                    if g.is_finite() {
                        s += wu * g;
                    }
                }
                total += wd * s * vmax / e;
            }
        }
    }
    total
}

/// Quasi-random points in a ball, shifted by a seed derived from the ball.
///
/// Returns `n` points of `dim_pairs` consecutive 3-vectors each, drawn from a
/// Halton sequence in `3 * dim_pairs` dimensions with a Cranley–Patterson
/// rotation.
pub fn qmc_ball_points(center: &[f64], radius: f64, n: usize, dim_pairs: usize) -> Vec<Vec<[f64; 3]>> {
    const BASES: [u8; 9] = [2, 3, 5, 7, 11, 13, 17, 19, 23];
    assert!(dim_pairs * 3 <= BASES.len());
    let mut seed = geometry_seed(center, radius);
    let mut shift = [0.0; 9];
    for s in shift.iter_mut() {
        seed = splitmix64(seed);
        *s = (seed >> 11) as f64 / (1u64 << 53) as f64;
    }
    (0..n)
        .map(|i| {
            (0..dim_pairs)
                .map(|p| {
                    let mut u = [0.0; 3];
                    for k in 0..3 {
                        let b = 3 * p + k;
                        let h = halton::number(BASES[b], i + 1) + shift[b];
                        u[k] = h - h.floor();
                    }
                    let r = radius * u[0].cbrt();
                    let ct = 2.0 * u[1] - 1.0;
                    let st = (1.0 - ct * ct).max(0.0).sqrt();
                    let phi = 2.0 * PI * u[2];
                    [
                        center[0] + r * st * phi.cos(),
                        center[1] + r * st * phi.sin(),
                        center[2] + r * ct,
                    ]
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    struct InvR {
        atoms: Vec<SingularAtom>,
    }

    impl Integrand for InvR {
        fn value(&self, x: &[f64]) -> f64 {
            let r = crate::geom::norm(x);
            if r < 1.0 {
                r.powf(-2.0)
            } else {
                0.0
            }
        }
        fn atoms(&self) -> &[SingularAtom] {
            &self.atoms
        }
        fn exterior_vanishes(&self) -> bool {
            true
        }
    }

    #[test]
    fn polynomial_moments_are_exact() {
        let rule = BallRule::default().prepare();
        let one = integrate_ball(&[0.3, -0.2, 0.1], 0.7, &|_: &[f64]| 1.0, &rule).unwrap();
        assert!((one.average() - 1.0).abs() < 1e-12);
        // Second moment of x about the center: R^2 / 5 on average.
        let c = [0.3, -0.2, 0.1];
        let m = integrate_ball(&c, 0.7, &|x: &[f64]| (x[0] - 0.3).powi(2), &rule).unwrap();
        assert!((m.average() - 0.49 / 5.0).abs() < 1e-12);
    }

    #[test]
    fn centered_pure_atom_is_closed_form() {
        let f = InvR {
            atoms: vec![SingularAtom::pure(vec![0.0; 3], 1.0, 2.0, 1.0)],
        };
        let rule = BallRule::default().prepare();
        for rho in [0.1, 0.5, 1.0] {
            let b = integrate_ball(&[0.0; 3], rho, &f, &rule).unwrap();
            // Average of |x|^{-2} over B_rho is 3 / rho^2.
            assert!((b.average() * rho * rho - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn off_center_atom_matches_sampled_atom() {
        let pure = InvR {
            atoms: vec![SingularAtom::pure(vec![0.0; 3], 1.0, 2.0, 1.0)],
        };
        let sampled = InvR {
            atoms: vec![SingularAtom {
                center: vec![0.0; 3],
                radius: 1.0,
                order: 2.0,
                coef: None,
            }],
        };
        let rule = BallRule::default().prepare();
        let c = [0.2, 0.1, 0.0];
        let a = integrate_ball(&c, 0.5, &pure, &rule).unwrap();
        let b = integrate_ball(&c, 0.5, &sampled, &rule).unwrap();
        assert!((a.integral - b.integral).abs() < 1e-10 * a.integral);
    }

    #[test]
    fn non_finite_nodes_are_excluded() {
        let rule = BallRule::default().prepare();
        let f = |x: &[f64]| if x[2] > 0.9 { f64::NAN } else { 2.0 };
        let b = integrate_ball(&[0.0; 3], 1.0, &f, &rule).unwrap();
        assert!(b.flagged && b.excluded > 0);
        assert!((b.average() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn qmc_points_stay_in_ball_and_are_reproducible() {
        let p = qmc_ball_points(&[1.0, 0.0, 0.0], 0.5, 200, 2);
        let q = qmc_ball_points(&[1.0, 0.0, 0.0], 0.5, 200, 2);
        assert_eq!(p, q);
        for pair in &p {
            for x in pair {
                assert!(dist(x, &[1.0, 0.0, 0.0]) < 0.5 + 1e-12);
            }
        }
    }

    #[test]
    fn rejects_other_dimensions() {
        let rule = BallRule::default().prepare();
        let r = integrate_ball(&[0.0; 2], 1.0, &|_: &[f64]| 1.0, &rule);
        assert!(matches!(r, Err(Error::UnsupportedDimension(2))));
    }
}
