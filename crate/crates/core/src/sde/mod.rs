//! Euler–Maruyama simulation of `dx = σ^k(x) dw^k + b(x) dt`, exit and hitting
//! times, and the coupled derivative flow.
//!
//! Every path draws from its own counter-seeded generator, so batches are
//! bit-identical whatever the number of worker threads.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::CoefficientSet;
use crate::geom::dist;
use crate::rng::{stream_rng, stream_seed};

mod flow;
mod io;

pub use flow::{derivative_flow, DerivativeFlowBatch, FlowConfig};
pub use io::{read_batch, write_batch};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub dt: f64,
    /// Horizon `T`; the step count is `round(T / dt)`.
    pub horizon: f64,
    pub n_paths: usize,
    pub master_seed: u64,
    /// Replace `b` by `b / (1 + dt |b|)`.
    pub taming: bool,
    /// Store the state every this many steps; 0 stores only the final state.
    pub record_every: usize,
    /// Radii whose exit times `τ_R` and hitting times `γ_{R/16}` are tracked.
    pub radii: Vec<f64>,
    /// Center of the tracked balls; the origin when empty.
    pub center: Vec<f64>,
    /// Stop a path once it has left every tracked ball.
    pub stop_after_exit: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            horizon: 1.0,
            n_paths: 1000,
            master_seed: 0,
            taming: false,
            record_every: 0,
            radii: Vec::new(),
            center: Vec::new(),
            stop_after_exit: false,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::param("dt", "must be positive"));
        }
        if !(self.horizon >= self.dt) || !self.horizon.is_finite() {
            return Err(Error::param("T", "must be finite and at least dt"));
        }
        if self.n_paths == 0 {
            return Err(Error::param("n_paths", "must be at least 1"));
        }
        if self.radii.iter().any(|r| !(*r > 0.0)) {
            return Err(Error::param("radii", "must be positive"));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        ((self.horizon / self.dt).round() as usize).max(1)
    }

    /// Times at which states are stored, always ending at the last step.
    pub fn record_steps(&self) -> Vec<usize> {
        let n = self.steps();
        let mut s: Vec<usize> = if self.record_every == 0 {
            Vec::new()
        } else {
            (0..=n).step_by(self.record_every).collect()
        };
        if s.last() != Some(&n) {
            s.push(n);
        }
        s
    }
}

/// Receives the state of one path at step 0 and after every step.
pub trait PathObserver: Send {
    type Output: Send;
    /// Returns `false` to stop the path.
    fn observe(&mut self, step: usize, t: f64, x: &[f64]) -> bool;
    fn finish(self, alive: bool) -> Self::Output;
}

/// Per-step coefficient evaluation shared by every simulator in the crate.
pub(crate) struct Stepper<'a> {
    pub coeffs: &'a CoefficientSet,
    /// `σ` when it is constant, with the indices of its nonzero columns.
    constant_sigma: Option<(Vec<f64>, Vec<usize>)>,
    taming: bool,
}

impl<'a> Stepper<'a> {
    pub fn new(coeffs: &'a CoefficientSet, taming: bool) -> Self {
        let (d, d1) = (coeffs.dim_d, coeffs.dim_d1);
        let constant_sigma = coeffs.sigma.is_constant().then(|| {
            let mut s = vec![0.0; d * d1];
            coeffs.sigma.eval(&vec![0.0; d], &mut s);
            let cols = (0..d1).filter(|&k| (0..d).any(|i| s[i * d1 + k] != 0.0)).collect();
            (s, cols)
        });
        Self {
            coeffs,
            constant_sigma,
            taming,
        }
    }

    /// Draws `dw` into `dw` (full length `d1`, zeros where no normal is drawn).
    pub fn draw(&self, rng: &mut ChaCha8Rng, sqdt: f64, dw: &mut [f64]) {
        match &self.constant_sigma {
            Some((_, cols)) => {
                for &k in cols {
                    dw[k] = sqdt * rng.sample::<f64, _>(StandardNormal);
                }
            }
            None => {
                for v in dw.iter_mut() {
                    *v = sqdt * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
    }

    /// `x ← x + σ(x) dw + b(x) dt`; `sigma` and `b` are scratch buffers that
    /// hold the coefficients at the old point on return.
    pub fn advance(&self, x: &mut [f64], dw: &[f64], dt: f64, sigma: &mut [f64], b: &mut [f64]) {
        let (d, d1) = (self.coeffs.dim_d, self.coeffs.dim_d1);
        match &self.constant_sigma {
            Some((s, _)) => sigma.copy_from_slice(s),
            None => self.coeffs.sigma.eval(x, sigma),
        }
        self.coeffs.drift.eval(x, b);
        if self.taming {
            let nb = crate::geom::norm(b);
            for v in b.iter_mut() {
                *v /= 1.0 + dt * nb;
            }
        }
        for i in 0..d {
            let row = &sigma[i * d1..(i + 1) * d1];
            let mut inc = b[i] * dt;
            for k in 0..d1 {
                inc += row[k] * dw[k];
            }
            x[i] += inc;
        }
    }
}

/// Runs `config.n_paths` paths, handing each to its own observer.
pub fn simulate<O, F>(coeffs: &CoefficientSet, start: &[f64], config: &SimConfig, make: F) -> Result<Vec<O::Output>>
where
    O: PathObserver,
    F: Fn(usize) -> O + Sync,
{
    config.validate()?;
    if start.len() != coeffs.dim_d {
        return Err(Error::DimensionMismatch {
            expected: coeffs.dim_d,
            got: start.len(),
        });
    }
    let stepper = Stepper::new(coeffs, config.taming);
    let (d, d1) = (coeffs.dim_d, coeffs.dim_d1);
    let n = config.steps();
    let dt = config.dt;
    let sqdt = dt.sqrt();
    Ok((0..config.n_paths)
        .into_par_iter()
        .map(|i| {
            let mut obs = make(i);
            let mut rng = stream_rng(config.master_seed, i as u64);
            let mut x = start.to_vec();
            let mut dw = vec![0.0; d1];
            let mut s = vec![0.0; d * d1];
            let mut b = vec![0.0; d];
            let mut alive = true;
            if obs.observe(0, 0.0, &x) {
                for k in 1..=n {
                    stepper.draw(&mut rng, sqdt, &mut dw);
                    stepper.advance(&mut x, &dw, dt, &mut s, &mut b);
                    if !x.iter().all(|v| v.is_finite()) {
                        alive = false;
                        break;
                    }
                    if !obs.observe(k, k as f64 * dt, &x) {
                        break;
                    }
                }
            }
            obs.finish(alive)
        })
        .collect())
}

/// Exit time `τ_R`, hitting time `γ_{R/16}` and `τ'_R = τ_R ∧ R²` of one path.
/// `None` means the event did not happen before the path stopped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExitRecord {
    pub radius: f64,
    pub tau: Option<f64>,
    pub gamma: Option<f64>,
}

impl ExitRecord {
    pub fn tau_prime(&self) -> f64 {
        let r2 = self.radius * self.radius;
        self.tau.map_or(r2, |t| t.min(r2))
    }

    pub fn censored(&self) -> bool {
        self.tau.is_none()
    }

    /// Whether the path entered `B̄_{R/16}` strictly before leaving `B_R`.
    pub fn hit_before_exit(&self) -> bool {
        match (self.gamma, self.tau) {
            (Some(g), Some(t)) => g < t,
            (Some(_), None) => true,
            _ => false,
        }
    }
}

/// Tracks exits from open balls `B_R` and entries into closed balls
/// `B̄_{R/16}` with linear interpolation in the last step.
#[derive(Debug, Clone)]
pub struct ExitTracker {
    center: Vec<f64>,
    records: Vec<ExitRecord>,
    prev: Option<(f64, f64)>,
    stop_after_exit: bool,
}

impl ExitTracker {
    pub fn new(center: Vec<f64>, radii: &[f64], stop_after_exit: bool) -> Self {
        Self {
            center,
            records: radii
                .iter()
                .map(|&radius| ExitRecord {
                    radius,
                    tau: None,
                    gamma: None,
                })
                .collect(),
            prev: None,
            stop_after_exit,
        }
    }

    /// Returns `false` once every ball has been left and stopping is enabled.
    pub fn update(&mut self, t: f64, x: &[f64]) -> bool {
        let r = if self.center.is_empty() {
            crate::geom::norm(x)
        } else {
            dist(x, &self.center)
        };
        for rec in &mut self.records {
            let inner = rec.radius / 16.0;
            match self.prev {
                None => {
                    if r >= rec.radius {
                        rec.tau = Some(t);
                    }
                    if r <= inner {
                        rec.gamma = Some(t);
                    }
                }
                Some((t0, r0)) => {
                    if rec.tau.is_none() && r >= rec.radius {
                        rec.tau = Some(t0 + (t - t0) * ((rec.radius - r0) / (r - r0)).clamp(0.0, 1.0));
                    }
                    if rec.gamma.is_none() && r <= inner {
                        rec.gamma = Some(t0 + (t - t0) * ((r0 - inner) / (r0 - r)).clamp(0.0, 1.0));
                    }
                }
            }
        }
        self.prev = Some((t, r));
        !(self.stop_after_exit && self.records.iter().all(|r| r.tau.is_some()))
    }

    pub fn records(self) -> Vec<ExitRecord> {
        self.records
    }
}

struct BatchObserver<'a> {
    record_steps: &'a [usize],
    d: usize,
    states: Vec<f64>,
    last: Vec<f64>,
    tracker: ExitTracker,
}

impl PathObserver for BatchObserver<'_> {
    type Output = (Vec<f64>, Vec<f64>, Vec<ExitRecord>, bool);

    fn observe(&mut self, step: usize, t: f64, x: &[f64]) -> bool {
        self.last.copy_from_slice(x);
        if self.record_steps.binary_search(&step).is_ok() {
            self.states.extend_from_slice(x);
        }
        self.tracker.update(t, x)
    }

    fn finish(mut self, alive: bool) -> Self::Output {
        // A stopped path keeps its last state at the remaining record times.
        let want = self.record_steps.len() * self.d;
        while self.states.len() < want {
            let fill = if alive {
                self.last.clone()
            } else {
                vec![f64::NAN; self.d]
            };
            self.states.extend_from_slice(&fill);
        }
        (self.states, self.last, self.tracker.records(), alive)
    }
}

/// Simulated ensemble with states at the recorded times.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryBatch {
    pub config: SimConfig,
    pub start: Vec<f64>,
    pub dim: usize,
    pub times: Vec<f64>,
    /// `n_paths × times.len() × dim`, row-major.
    pub paths: Vec<f64>,
    pub seeds: Vec<u64>,
    pub alive: Vec<bool>,
    /// `n_paths × config.radii.len()`.
    pub exits: Vec<ExitRecord>,
}

impl TrajectoryBatch {
    pub fn n_paths(&self) -> usize {
        self.alive.len()
    }

    pub fn state(&self, path: usize, rec: usize) -> &[f64] {
        let nt = self.times.len();
        let o = (path * nt + rec) * self.dim;
        &self.paths[o..o + self.dim]
    }

    pub fn terminal(&self, path: usize) -> &[f64] {
        self.state(path, self.times.len() - 1)
    }

    pub fn dead_count(&self) -> usize {
        self.alive.iter().filter(|a| !**a).count()
    }

    pub fn exit(&self, path: usize, radius_index: usize) -> &ExitRecord {
        &self.exits[path * self.config.radii.len() + radius_index]
    }

    /// Mean and standard error of `f` at record `rec` over live paths.
    pub fn functional(&self, rec: usize, f: impl Fn(&[f64]) -> f64) -> (f64, f64) {
        let vals: Vec<f64> = (0..self.n_paths())
            .filter(|&i| self.alive[i])
            .map(|i| f(self.state(i, rec)))
            .collect();
        crate::stats::mean_se(&vals)
    }
}

/// Simulates the batch, tracking `config.radii`.
pub fn euler_maruyama(coeffs: &CoefficientSet, start: &[f64], config: &SimConfig) -> Result<TrajectoryBatch> {
    let steps = config.record_steps();
    let d = coeffs.dim_d;
    let out = simulate(coeffs, start, config, |_| BatchObserver {
        record_steps: &steps,
        d,
        states: Vec::with_capacity(steps.len() * d),
        last: vec![0.0; d],
        tracker: ExitTracker::new(config.center.clone(), &config.radii, config.stop_after_exit),
    })?;
    let mut paths = Vec::with_capacity(out.len() * steps.len() * d);
    let mut exits = Vec::with_capacity(out.len() * config.radii.len());
    let mut alive = Vec::with_capacity(out.len());
    for (states, _, ex, a) in out {
        paths.extend(states);
        exits.extend(ex);
        alive.push(a);
    }
    Ok(TrajectoryBatch {
        config: config.clone(),
        start: start.to_vec(),
        dim: d,
        times: steps.iter().map(|&s| s as f64 * config.dt).collect(),
        paths,
        seeds: (0..config.n_paths as u64)
            .map(|i| stream_seed(config.master_seed, i))
            .collect(),
        alive,
        exits,
    })
}

/// Exit records for `radii`: the tracked ones when they match, otherwise
/// recomputed from the recorded states at their coarser resolution.
pub fn exit_and_hitting(batch: &TrajectoryBatch, radii: &[f64]) -> Result<Vec<Vec<ExitRecord>>> {
    if radii.iter().any(|r| !(*r > 0.0)) {
        return Err(Error::param("radii", "must be positive"));
    }
    let tracked = &batch.config.radii;
    let n = batch.n_paths();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut row = Vec::with_capacity(radii.len());
        let mut missing = Vec::new();
        for &r in radii {
            match tracked.iter().position(|&t| t == r) {
                Some(j) => row.push(Some(*batch.exit(i, j))),
                None => {
                    missing.push(r);
                    row.push(None);
                }
            }
        }
        if !missing.is_empty() {
            let mut tr = ExitTracker::new(batch.config.center.clone(), &missing, false);
            for (k, &t) in batch.times.iter().enumerate() {
                tr.update(t, batch.state(i, k));
            }
            let mut recs = tr.records().into_iter();
            for slot in row.iter_mut().filter(|s| s.is_none()) {
                *slot = recs.next();
            }
        }
        out.push(row.into_iter().map(|r| r.expect("filled")).collect());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn bm() -> CoefficientSet {
        CoefficientSet::brownian(3, 3).unwrap()
    }

    #[test]
    fn brownian_variance() {
        let cfg = SimConfig {
            dt: 0.01,
            horizon: 1.0,
            n_paths: 20_000,
            master_seed: 7,
            ..SimConfig::default()
        };
        let b = euler_maruyama(&bm(), &[0.0; 3], &cfg).unwrap();
        for i in 0..3 {
            let (m, se) = b.functional(0, |x| x[i] * x[i]);
            assert!((m - 1.0).abs() < 3.0 * se + 1e-3, "{m} {se}");
        }
    }

    #[test]
    fn constant_drift_mean() {
        let mu = vec![0.5, -1.0, 2.0];
        let c = bm()
            .with_drift(Arc::new(crate::fields::ConstantField::new(3, mu.clone())))
            .unwrap();
        let cfg = SimConfig {
            dt: 0.05,
            horizon: 2.0,
            n_paths: 10_000,
            master_seed: 3,
            ..SimConfig::default()
        };
        let b = euler_maruyama(&c, &[1.0, 0.0, 0.0], &cfg).unwrap();
        for i in 0..3 {
            let want = [1.0, 0.0, 0.0][i] + mu[i] * 2.0;
            let (m, se) = b.functional(0, |x| x[i]);
            assert!((m - want).abs() < 3.0 * se, "{m} {want} {se}");
        }
    }

    #[test]
    fn start_outside_ball_exits_at_zero() {
        let cfg = SimConfig {
            dt: 0.01,
            horizon: 0.1,
            n_paths: 5,
            radii: vec![0.5, 1.0],
            ..SimConfig::default()
        };
        let b = euler_maruyama(&bm(), &[1.0, 0.0, 0.0], &cfg).unwrap();
        for i in 0..5 {
            assert_eq!(b.exit(i, 0).tau, Some(0.0));
            assert_eq!(b.exit(i, 1).tau, Some(0.0));
            assert_eq!(b.exit(i, 1).tau_prime(), 0.0);
        }
    }

    #[test]
    fn stored_paths_start_at_start() {
        let cfg = SimConfig {
            dt: 0.1,
            horizon: 1.0,
            n_paths: 4,
            record_every: 2,
            ..SimConfig::default()
        };
        let b = euler_maruyama(&bm(), &[0.1, 0.2, 0.3], &cfg).unwrap();
        assert_eq!(b.times.len(), 6);
        for i in 0..4 {
            assert_eq!(b.state(i, 0), &[0.1, 0.2, 0.3]);
        }
    }

    #[test]
    fn recomputed_exits_match_tracked_on_full_records() {
        let cfg = SimConfig {
            dt: 0.01,
            horizon: 1.0,
            n_paths: 50,
            record_every: 1,
            radii: vec![0.4],
            ..SimConfig::default()
        };
        let b = euler_maruyama(&bm(), &[0.0; 3], &cfg).unwrap();
        let again = exit_and_hitting(&b, &[0.4, 0.2]).unwrap();
        for i in 0..50 {
            assert_eq!(again[i][0], *b.exit(i, 0));
            assert!(again[i][1].tau.unwrap_or(f64::INFINITY) <= again[i][0].tau.unwrap_or(f64::INFINITY));
        }
    }

    #[test]
    fn taming_bounds_the_increment() {
        let big = Arc::new(crate::fields::ConstantField::new(3, vec![1e6, 0.0, 0.0]));
        let c = bm().with_drift(big).unwrap();
        let cfg = SimConfig {
            dt: 0.01,
            horizon: 0.01,
            n_paths: 1,
            taming: true,
            ..SimConfig::default()
        };
        let b = euler_maruyama(&c, &[0.0; 3], &cfg).unwrap();
        assert!(b.terminal(0)[0] < 1.0 + 1.0);
    }
}
