use serde::Serialize;

use super::{ratio_spread, EstimateReport, ReportRow, Verdict};
use crate::error::{Error, Result};
use crate::fields::CoefficientSet;
use crate::geom::{dist, unit_ball_volume};
use crate::sde::{simulate, PathObserver, SimConfig, TrajectoryBatch};
use crate::stats::{mean_se, ols};

/// Scalar test function of `(t, x)` with a closed-form `L_p` norm.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum TestFunction {
    /// `amp · exp(-|x - c|² / (2 w²))`, constant in time.
    Gaussian { center: Vec<f64>, width: f64, amp: f64 },
    /// `amp · 1_{|x - c| < r}`, constant in time.
    Ball { center: Vec<f64>, radius: f64, amp: f64 },
}

impl TestFunction {
    pub fn gaussian(center: Vec<f64>, width: f64) -> Self {
        TestFunction::Gaussian {
            center,
            width,
            amp: 1.0,
        }
    }

    pub fn ball(center: Vec<f64>, radius: f64) -> Self {
        TestFunction::Ball {
            center,
            radius,
            amp: 1.0,
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        match self.clone() {
            TestFunction::Gaussian { center, width, amp } => TestFunction::Gaussian {
                center,
                width,
                amp: amp * c,
            },
            TestFunction::Ball { center, radius, amp } => TestFunction::Ball {
                center,
                radius,
                amp: amp * c,
            },
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            TestFunction::Gaussian { center, width, amp } => {
                amp * (-dist(x, center).powi(2) / (2.0 * width * width)).exp()
            }
            TestFunction::Ball { center, radius, amp } => {
                if dist(x, center) < *radius {
                    *amp
                } else {
                    0.0
                }
            }
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            TestFunction::Gaussian { center, .. } | TestFunction::Ball { center, .. } => center.len(),
        }
    }

    /// `‖f‖_{L_p(ℝ^d)}`.
    pub fn lp_norm(&self, p: f64) -> f64 {
        let d = self.dim() as f64;
        match self {
            TestFunction::Gaussian { width, amp, .. } => {
                amp.abs() * (2.0 * std::f64::consts::PI * width * width / p).powf(d / (2.0 * p))
            }
            TestFunction::Ball { radius, amp, .. } => {
                amp.abs() * (unit_ball_volume(self.dim()) * radius.powf(d)).powf(1.0 / p)
            }
        }
    }

    /// `‖f‖_{L_p((0,T) × ℝ^d)}`.
    pub fn lp_norm_time(&self, p: f64, horizon: f64) -> f64 {
        horizon.powf(1.0 / p) * self.lp_norm(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestFunctionFamily {
    pub members: Vec<TestFunction>,
    pub p: f64,
}

impl TestFunctionFamily {
    pub fn validate(&self) -> Result<()> {
        if self.members.is_empty() {
            return Err(Error::DegenerateFamily("empty test family".into()));
        }
        if !(self.p >= 1.0) {
            return Err(Error::param("p", "must be at least 1"));
        }
        Ok(())
    }
}

struct Occupation<'a> {
    family: &'a [TestFunction],
    dt: f64,
    last_step: usize,
    sums: Vec<f64>,
}

impl PathObserver for Occupation<'_> {
    type Output = (Vec<f64>, bool);

    fn observe(&mut self, step: usize, _t: f64, x: &[f64]) -> bool {
        // Left-endpoint sum: the state at step k weighs the interval after it.
        if step < self.last_step {
            for (s, f) in self.sums.iter_mut().zip(self.family) {
                *s += f.eval(x) * self.dt;
            }
        }
        true
    }

    fn finish(self, alive: bool) -> Self::Output {
        (self.sums, alive)
    }
}

/// `E ∫_0^T f(x_t) dt ≤ N_T ‖f‖_{L_p((0,T)×ℝ^d)}` over a test family; the
/// fitted `N_T` is the worst ratio.
pub fn admissibility_check(
    coeffs: &CoefficientSet,
    start: &[f64],
    config: &SimConfig,
    family: &TestFunctionFamily,
) -> Result<EstimateReport> {
    family.validate()?;
    let d = coeffs.dim_d as f64;
    let q_hint = d / 2.0 + 1.0;
    if !(family.p > q_hint) {
        return Err(Error::param("p", format!("must exceed d/2 + 1 = {q_hint}")));
    }
    let cfg = SimConfig {
        radii: Vec::new(),
        stop_after_exit: false,
        ..config.clone()
    };
    let steps = cfg.steps();
    let horizon = steps as f64 * cfg.dt;
    let out = simulate(coeffs, start, &cfg, |_| Occupation {
        family: &family.members,
        dt: cfg.dt,
        last_step: steps,
        sums: vec![0.0; family.members.len()],
    })?;
    let live: Vec<&Vec<f64>> = out.iter().filter(|o| o.1).map(|o| &o.0).collect();
    let dead = out.len() - live.len();
    let mut rows = Vec::new();
    for (j, f) in family.members.iter().enumerate() {
        let vals: Vec<f64> = live.iter().map(|s| s[j]).collect();
        let (m, se) = mean_se(&vals);
        rows.push(ReportRow::new(
            format!("f{j}"),
            j as f64,
            m,
            se,
            f.lp_norm_time(family.p, horizon),
        ));
    }
    let fitted = rows.iter().map(|r| r.ratio).fold(0.0, f64::max);
    let mut report = EstimateReport::new(
        "admissibility",
        "E int_0^T f(x_t) dt <= N_T |f|_{L_p((0,T) x R^d)}",
        rows,
    );
    report.fitted_constant = fitted;
    report.metrics.insert("dead_paths".into(), dead as f64);
    report.metrics.insert("horizon".into(), horizon);
    report.verdict = if dead as f64 > 0.01 * out.len() as f64 {
        report.flags.push("dead_paths".into());
        Verdict::Inconclusive
    } else {
        Verdict::Pass
    };
    Ok(report)
}

/// Thresholds of [`exit_bounds_check`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExitCheckSpec {
    /// Multiples `n` of `R²` at which `P(τ_R ≥ n R²)` is probed.
    pub n_grid: Vec<f64>,
    /// Probes with fewer surviving paths are dropped from the fit.
    pub min_count: usize,
    pub r2_min: f64,
    pub xi_min: f64,
    /// Allowed relative spread of `E τ_R / R²` across radii.
    pub mean_tolerance: f64,
}

impl Default for ExitCheckSpec {
    fn default() -> Self {
        Self {
            n_grid: vec![0.25, 0.5, 0.75, 1.0, 1.25],
            min_count: 100,
            r2_min: 0.95,
            xi_min: 0.05,
            mean_tolerance: 0.3,
        }
    }
}

/// Fitted exit-tail decay at one radius.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TailFit {
    pub radius: f64,
    /// Slope of `ln P(τ_R ≥ n R²)` in `n`.
    pub slope: f64,
    pub r_squared: f64,
    /// `1 - e^{slope}`, the per-`R²` escape probability.
    pub xi_hat: f64,
    pub mean_tau_over_r2: f64,
    pub mean_se: f64,
    pub censored: usize,
}

/// Geometric decay of `P(τ_R ≥ n R²)` and uniformity of `E τ_R / R²`.
/// `batches` pairs each radius with the index of that radius in the batch's
/// tracked radii.
pub fn exit_bounds_check(
    batches: &[(&TrajectoryBatch, usize)],
    spec: &ExitCheckSpec,
) -> Result<(EstimateReport, Vec<TailFit>)> {
    if batches.is_empty() || spec.n_grid.is_empty() {
        return Err(Error::param("radii", "need at least one radius and one probe"));
    }
    let mut rows = Vec::new();
    let mut fits = Vec::new();
    let mut flags = Vec::new();
    for &(batch, ri) in batches {
        let r = *batch
            .config
            .radii
            .get(ri)
            .ok_or_else(|| Error::param("radii", "index out of range"))?;
        let r2 = r * r;
        let taus: Vec<Option<f64>> = (0..batch.n_paths())
            .filter(|&i| batch.alive[i])
            .map(|i| batch.exit(i, ri).tau)
            .collect();
        let total = taus.len();
        let horizon = batch.config.steps() as f64 * batch.config.dt;
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for &n in &spec.n_grid {
            if n * r2 > horizon {
                flags.push(format!("R={r}: n={n} beyond horizon"));
                continue;
            }
            let count = taus.iter().filter(|t| t.is_none_or(|t| t >= n * r2)).count();
            let pr = count as f64 / total as f64;
            let se = (pr * (1.0 - pr) / total as f64).sqrt();
            rows.push(ReportRow::new(format!("R={r} n={n}"), n, pr, se, 1.0));
            if count >= spec.min_count {
                xs.push(n);
                ys.push(pr.ln());
            }
        }
        let censored = taus.iter().filter(|t| t.is_none()).count();
        let capped: Vec<f64> = taus.iter().map(|t| t.unwrap_or(horizon) / r2).collect();
        let (m, se) = mean_se(&capped);
        if censored as f64 > 0.01 * total as f64 {
            flags.push(format!("R={r}: {censored} censored paths"));
        }
        let fit = ols(&xs, &ys);
        fits.push(TailFit {
            radius: r,
            slope: fit.map_or(f64::NAN, |f| f.slope),
            r_squared: fit.map_or(f64::NAN, |f| f.r_squared),
            xi_hat: fit.map_or(f64::NAN, |f| 1.0 - f.slope.exp()),
            mean_tau_over_r2: m,
            mean_se: se,
            censored,
        });
    }
    let means: Vec<ReportRow> = fits
        .iter()
        .map(|f| {
            ReportRow::new(
                format!("R={} mean", f.radius),
                f.radius,
                f.mean_tau_over_r2,
                f.mean_se,
                1.0,
            )
        })
        .collect();
    let (_, _, spread) = ratio_spread(&means);
    rows.extend(means);
    let mut report = EstimateReport::new("exit_bounds", "P(tau_R >= n R^2) <= (1 - xi)^n; E tau_R <= N R^2", rows);
    report.fitted_constant = fits.iter().map(|f| f.mean_tau_over_r2).fold(0.0, f64::max);
    report.tolerance = spec.mean_tolerance;
    report.metrics.insert("mean_spread".into(), spread);
    for f in &fits {
        report.metrics.insert(format!("xi_hat[R={}]", f.radius), f.xi_hat);
        report.metrics.insert(format!("r_squared[R={}]", f.radius), f.r_squared);
    }
    let undetermined = fits.iter().any(|f| f.slope.is_nan());
    let tails_ok = fits
        .iter()
        .all(|f| f.r_squared >= spec.r2_min && f.xi_hat > spec.xi_min);
    let censored = fits.iter().any(|f| f.censored > 0);
    report.verdict = if undetermined {
        Verdict::Inconclusive
    } else if tails_ok && spread <= spec.mean_tolerance {
        if censored {
            Verdict::Inconclusive
        } else {
            Verdict::Pass
        }
    } else {
        Verdict::Fail
    };
    report.flags = flags;
    Ok((report, fits))
}

/// `P(τ_R > γ_{R/16}) > 0` from a start with `|x| ≤ 9R/16`.
pub fn hitting_positivity_check(batch: &TrajectoryBatch, radius_index: usize) -> Result<EstimateReport> {
    let r = *batch
        .config
        .radii
        .get(radius_index)
        .ok_or_else(|| Error::param("radii", "index out of range"))?;
    let start_r = if batch.config.center.is_empty() {
        crate::geom::norm(&batch.start)
    } else {
        dist(&batch.start, &batch.config.center)
    };
    if start_r > 9.0 * r / 16.0 {
        return Err(Error::param("start", "must satisfy |x| <= 9R/16"));
    }
    let hits: Vec<f64> = (0..batch.n_paths())
        .filter(|&i| batch.alive[i])
        .map(|i| {
            if batch.exit(i, radius_index).hit_before_exit() {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let (m, se) = mean_se(&hits);
    let mut report = EstimateReport::new(
        "hit_before_exit",
        "P_x(tau_R > gamma_{R/16}) >= xi",
        vec![ReportRow::new(format!("R={r}"), r, m, se, 1.0)],
    );
    report.fitted_constant = m;
    report.verdict = if m > 0.0 { Verdict::Pass } else { Verdict::Fail };
    Ok(report)
}

/// Laplace transform of `τ'_R = τ_R ∧ R²` against `A e^{-c √λ R}` and the
/// small-time tail `P(τ'_R ≤ t)` against `exp(-c' R² / t)`.
pub fn laplace_exit_check(
    batch: &TrajectoryBatch,
    radius_index: usize,
    lambdas: &[f64],
    small_times: &[f64],
    min_count: usize,
) -> Result<EstimateReport> {
    let r = *batch
        .config
        .radii
        .get(radius_index)
        .ok_or_else(|| Error::param("radii", "index out of range"))?;
    let r2 = r * r;
    let horizon = batch.config.steps() as f64 * batch.config.dt;
    if horizon < r2 {
        return Err(Error::param("T", "must reach R^2 so that tau' is observed"));
    }
    if lambdas.len() < 2 {
        return Err(Error::param("lambda", "need at least two values"));
    }
    let tp: Vec<f64> = (0..batch.n_paths())
        .filter(|&i| batch.alive[i])
        .map(|i| batch.exit(i, radius_index).tau_prime())
        .collect();
    let mut rows = Vec::new();
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for &l in lambdas {
        let v: Vec<f64> = tp.iter().map(|t| (-l * t).exp()).collect();
        let (m, se) = mean_se(&v);
        rows.push(ReportRow::new(format!("lambda={l}"), l, m, se, 1.0));
        xs.push(l.sqrt() * r);
        ys.push(m.ln());
    }
    let fit = ols(&xs, &ys).ok_or_else(|| Error::param("lambda", "degenerate grid"))?;
    let (mut tx, mut ty) = (Vec::new(), Vec::new());
    for &t in small_times {
        let count = tp.iter().filter(|&&s| s <= t).count();
        let pr = count as f64 / tp.len() as f64;
        let se = (pr * (1.0 - pr) / tp.len() as f64).sqrt();
        rows.push(ReportRow::new(format!("t={t}"), t, pr, se, 1.0));
        if count >= min_count && t < r2 {
            tx.push(r2 / t);
            ty.push(pr.ln());
        }
    }
    let tail = ols(&tx, &ty);
    let mut report = EstimateReport::new(
        "laplace_exit",
        "E exp(-lambda tau') <= A exp(-c sqrt(lambda) R); P(tau' <= t) <= A' exp(-c' R^2/t)",
        rows,
    );
    let c = -fit.slope;
    report.fitted_constant = c;
    report.metrics.insert("c".into(), c);
    report.metrics.insert("log_A".into(), fit.intercept);
    let mut verdict = if c > 0.0 { Verdict::Pass } else { Verdict::Fail };
    match tail {
        Some(f) => {
            report.metrics.insert("c_tail".into(), -f.slope);
            report.metrics.insert("log_A_tail".into(), f.intercept);
            if !(f.slope < 0.0) {
                verdict = verdict.and(Verdict::Fail);
            }
        }
        None => {
            report.flags.push("small_time_tail_unresolved".into());
            verdict = verdict.and(Verdict::Inconclusive);
        }
    }
    report.verdict = verdict;
    Ok(report)
}

/// `E sup_{r ∈ [s, s+h]} |x_r - x_s|^m` against `N (h^{m/2} + h^m)`; needs a
/// batch recorded at every step. Reports the fitted `N` per `m`, its spread
/// over the gaps, and the log-log exponent in `h`.
pub fn increment_moment_check(
    batch: &TrajectoryBatch,
    ms: &[f64],
    start_time: f64,
    gaps: &[f64],
    tolerance: f64,
) -> Result<EstimateReport> {
    if batch.config.record_every != 1 {
        return Err(Error::param(
            "record_every",
            "increment check needs every step recorded",
        ));
    }
    let dt = batch.config.dt;
    let s_idx = (start_time / dt).round() as usize;
    let nt = batch.times.len();
    let mut rows = Vec::new();
    let mut verdict = Verdict::Pass;
    let mut report_metrics = Vec::new();
    for &m in ms {
        let (mut lx, mut ly) = (Vec::new(), Vec::new());
        let mut block = Vec::new();
        for &h in gaps {
            let e_idx = s_idx + (h / dt).round() as usize;
            if e_idx >= nt {
                return Err(Error::param("pairs", "gap beyond the simulated horizon"));
            }
            let vals: Vec<f64> = (0..batch.n_paths())
                .filter(|&i| batch.alive[i])
                .map(|i| {
                    let xs = batch.state(i, s_idx);
                    (s_idx..=e_idx)
                        .map(|k| dist(batch.state(i, k), xs))
                        .fold(0.0, f64::max)
                        .powf(m)
                })
                .collect();
            let (mean, se) = mean_se(&vals);
            let shape = h.powf(m / 2.0) + h.powf(m);
            block.push(ReportRow::new(format!("m={m} h={h}"), h, mean, se, shape));
            if mean > 0.0 && h > 0.0 {
                lx.push(h.ln());
                ly.push(mean.ln());
            }
        }
        let (_, hi, spread) = ratio_spread(&block);
        let slope = ols(&lx, &ly).map_or(f64::NAN, |f| f.slope);
        report_metrics.push((format!("N[m={m}]"), hi));
        report_metrics.push((format!("spread[m={m}]"), spread));
        report_metrics.push((format!("exponent[m={m}]"), slope));
        if spread > tolerance {
            verdict = Verdict::Fail;
        }
        rows.extend(block);
    }
    let mut report = EstimateReport::new(
        "increment_moments",
        "E sup_{[s,t]} |x_r - x_s|^m <= N (|t-s|^{m/2} + |t-s|^m)",
        rows,
    );
    report.fitted_constant = report_metrics
        .iter()
        .filter(|(k, _)| k.starts_with("N["))
        .map(|(_, v)| *v)
        .fold(0.0, f64::max);
    report.tolerance = tolerance;
    report.metrics.extend(report_metrics);
    report.verdict = verdict;
    Ok(report)
}

/// One probe of `E|f(x_t)|` (or `|T_t f|`) for a family member.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeatProbe {
    pub t: f64,
    pub member: usize,
    pub mean: f64,
    pub se: f64,
}

/// `E|f(x_t)| ≤ N (t ∧ 1)^{-d/(2p)} ‖f‖_p`. The fitted `N` is the worst ratio;
/// the log-log slope of the family envelope `max_f E|f(x_t)| / ‖f‖_p` over
/// `t < 1` is compared with `-d/(2p)`.
pub fn heat_kernel_bound_check(
    probes: &[HeatProbe],
    family: &TestFunctionFamily,
    slope_tolerance: f64,
) -> Result<EstimateReport> {
    family.validate()?;
    let d = family.members[0].dim() as f64;
    let p = family.p;
    let expo = d / (2.0 * p);
    let mut rows = Vec::new();
    let mut times: Vec<f64> = Vec::new();
    for pr in probes {
        let f = family
            .members
            .get(pr.member)
            .ok_or_else(|| Error::param("member", "index out of range"))?;
        let norm = f.lp_norm(p);
        let shape = pr.t.min(1.0).powf(-expo) * norm;
        rows.push(ReportRow::new(
            format!("f{} t={}", pr.member, pr.t),
            pr.t,
            pr.mean.abs(),
            pr.se,
            shape,
        ));
        if !times.contains(&pr.t) {
            times.push(pr.t);
        }
    }
    times.sort_by(f64::total_cmp);
    let (mut lx, mut ly) = (Vec::new(), Vec::new());
    for &t in times.iter().filter(|&&t| t < 1.0) {
        let env = probes
            .iter()
            .filter(|pr| pr.t == t)
            .map(|pr| pr.mean.abs() / family.members[pr.member].lp_norm(p))
            .fold(0.0, f64::max);
        if env > 0.0 {
            lx.push(t.ln());
            ly.push(env.ln());
        }
    }
    let fit = ols(&lx, &ly);
    let mut report = EstimateReport::new("heat_kernel_bound", "E|f(x_t)| <= N (t ^ 1)^{-d/(2p)} |f|_p", rows);
    report.fitted_constant = report.rows.iter().map(|r| r.ratio).fold(0.0, f64::max);
    report.tolerance = slope_tolerance;
    report.metrics.insert("target_slope".into(), -expo);
    report.verdict = match fit {
        Some(f) => {
            report.metrics.insert("envelope_slope".into(), f.slope);
            if (f.slope + expo).abs() <= slope_tolerance {
                Verdict::Pass
            } else {
                Verdict::Fail
            }
        }
        None => {
            report.flags.push("too_few_small_times".into());
            Verdict::Inconclusive
        }
    };
    Ok(report)
}

/// `∫_0^∞ e^{-λt} E|f(x_t)| dt ≤ N λ^{(d+2)/(2p) - 1} ‖f‖_{L_p}` for members
/// `f_j(t, x) = g_j(x) 1_{t < T_j}`. `series[j]` holds `(t, E|g_j(x_t)|)` on a
/// grid covering `[0, T_j]`; the integral is a trapezoid rule. The envelope
/// over members is fitted in `λ` and compared with the exponent.
pub fn resolvent_check(
    series: &[Vec<(f64, f64)>],
    windows: &[f64],
    family: &TestFunctionFamily,
    lambdas: &[f64],
    slope_tolerance: f64,
) -> Result<EstimateReport> {
    family.validate()?;
    if series.len() != family.members.len() || windows.len() != series.len() {
        return Err(Error::DimensionMismatch {
            expected: family.members.len(),
            got: series.len(),
        });
    }
    let d = family.members[0].dim() as f64;
    let p = family.p;
    let expo = (d + 2.0) / (2.0 * p) - 1.0;
    let mut rows = Vec::new();
    let (mut lx, mut ly) = (Vec::new(), Vec::new());
    for &l in lambdas {
        let mut env: f64 = 0.0;
        for (j, s) in series.iter().enumerate() {
            let win = windows[j];
            let mut integral = 0.0;
            for w in s.windows(2) {
                let (t0, v0) = w[0];
                let (t1, v1) = w[1];
                if t0 >= win {
                    break;
                }
                let t1c = t1.min(win);
                let v1c = v0 + (v1 - v0) * (t1c - t0) / (t1 - t0);
                integral += 0.5 * (t1c - t0) * ((-l * t0).exp() * v0.abs() + (-l * t1c).exp() * v1c.abs());
            }
            let norm = family.members[j].lp_norm_time(p, win);
            let shape = l.powf(expo) * norm;
            let row = ReportRow::new(format!("f{j} lambda={l}"), l, integral, 0.0, shape);
            env = env.max(integral / norm);
            rows.push(row);
        }
        if env > 0.0 {
            lx.push(l.ln());
            ly.push(env.ln());
        }
    }
    let mut report = EstimateReport::new(
        "resolvent_bound",
        "int e^{-lambda t} E|f(t,x_t)| dt <= N lambda^{(d+2)/(2p)-1} |f|_p",
        rows,
    );
    report.fitted_constant = report.rows.iter().map(|r| r.ratio).fold(0.0, f64::max);
    report.tolerance = slope_tolerance;
    report.metrics.insert("target_slope".into(), expo);
    report.verdict = match ols(&lx, &ly) {
        Some(f) => {
            report.metrics.insert("envelope_slope".into(), f.slope);
            if (f.slope - expo).abs() <= slope_tolerance {
                Verdict::Pass
            } else {
                Verdict::Fail
            }
        }
        None => Verdict::Inconclusive,
    };
    Ok(report)
}

/// One configuration of the derivative-flow lower bound.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LowerBoundProbe {
    pub label: String,
    pub t: f64,
    /// Samples of `f_{(η_t)}(x_t)` over live paths.
    pub samples: Vec<f64>,
    /// `(T_t f)_{(η)}(x)`.
    pub semigroup_derivative: f64,
}

/// `E[f_{(η_t)}(x_t)]² ≥ [(T_t f)_{(η)}(x)]²` within three standard errors.
pub fn flow_lower_bound_check(probes: &[LowerBoundProbe]) -> Result<EstimateReport> {
    if probes.is_empty() {
        return Err(Error::param("probes", "need at least one probe"));
    }
    let mut rows = Vec::new();
    let mut verdict = Verdict::Pass;
    let mut margin = f64::INFINITY;
    for pr in probes {
        let sq: Vec<f64> = pr.samples.iter().map(|v| v * v).collect();
        let (m, se) = mean_se(&sq);
        let rhs = pr.semigroup_derivative * pr.semigroup_derivative;
        let row = ReportRow::new(pr.label.clone(), pr.t, m, se, rhs);
        let v = if m >= rhs - 3.0 * se {
            if rhs > 0.0 && se > rhs {
                Verdict::Inconclusive
            } else {
                Verdict::Pass
            }
        } else {
            Verdict::Fail
        };
        verdict = verdict.and(v);
        if se > 0.0 {
            margin = margin.min((m - rhs) / se);
        }
        rows.push(row);
    }
    let mut report = EstimateReport::new(
        "derivative_flow_lower_bound",
        "E[f_(eta_t)(x_t)]^2 >= [(T_t f)_(eta)(x)]^2",
        rows,
    );
    report.fitted_constant = report.rows.iter().map(|r| r.ratio).fold(f64::INFINITY, f64::min);
    report.tolerance = 3.0;
    report.metrics.insert("min_margin_in_se".into(), margin);
    report.verdict = verdict;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sde::euler_maruyama;

    fn bm() -> CoefficientSet {
        CoefficientSet::brownian(3, 3).unwrap()
    }

    #[test]
    fn gaussian_and_ball_norms() {
        let g = TestFunction::gaussian(vec![0.0; 3], 1.0);
        assert!((g.lp_norm(2.0) - std::f64::consts::PI.powf(0.75)).abs() < 1e-12);
        let b = TestFunction::ball(vec![0.0; 3], 1.0);
        assert!((b.lp_norm(1.0) - 4.0 * std::f64::consts::PI / 3.0).abs() < 1e-12);
        assert!((b.scaled(3.0).lp_norm(2.0) - 3.0 * b.lp_norm(2.0)).abs() < 1e-12);
    }

    #[test]
    fn admissibility_of_zero_and_scaled_functions() {
        let cfg = SimConfig {
            dt: 0.01,
            horizon: 0.5,
            n_paths: 500,
            master_seed: 5,
            ..SimConfig::default()
        };
        let g = TestFunction::gaussian(vec![0.0; 3], 0.5);
        let fam = TestFunctionFamily {
            members: vec![g.scaled(0.0), g.clone(), g.scaled(4.0)],
            p: 3.0,
        };
        let r = admissibility_check(&bm(), &[0.0; 3], &cfg, &fam).unwrap();
        assert_eq!(r.rows[0].lhs, 0.0);
        assert_eq!(r.rows[0].ratio, 0.0);
        assert!((r.rows[2].ratio - r.rows[1].ratio).abs() < 1e-12 * r.rows[1].ratio);
        assert!(admissibility_check(
            &bm(),
            &[0.0; 3],
            &cfg,
            &TestFunctionFamily {
                members: vec![g],
                p: 2.0
            }
        )
        .is_err());
    }

    #[test]
    fn exit_from_sphere_start_is_immediate() {
        let cfg = SimConfig {
            dt: 0.01,
            horizon: 2.0,
            n_paths: 200,
            radii: vec![1.0],
            ..SimConfig::default()
        };
        let b = euler_maruyama(&bm(), &[1.0, 0.0, 0.0], &cfg).unwrap();
        let (rep, fits) = exit_bounds_check(&[(&b, 0)], &ExitCheckSpec::default()).unwrap();
        assert_eq!(fits[0].mean_tau_over_r2, 0.0);
        let p1 = rep.rows.iter().find(|r| r.probe == "R=1 n=1").unwrap();
        assert_eq!(p1.lhs, 0.0);
    }

    #[test]
    fn laplace_transform_limits() {
        let cfg = SimConfig {
            dt: 0.001,
            horizon: 1.0,
            n_paths: 2000,
            radii: vec![1.0],
            master_seed: 9,
            ..SimConfig::default()
        };
        let b = euler_maruyama(&bm(), &[0.0; 3], &cfg).unwrap();
        let r = laplace_exit_check(&b, 0, &[1e-9, 1.0, 4.0, 16.0], &[0.05, 0.1, 1.0], 20).unwrap();
        assert!((r.rows[0].lhs - 1.0).abs() < 1e-8);
        let at_r2 = r.rows.iter().find(|x| x.probe == "t=1").unwrap();
        assert_eq!(at_r2.lhs, 1.0);
        assert!(r.metric("c").unwrap() > 0.0);
    }

    #[test]
    fn zero_gap_increment_vanishes() {
        let cfg = SimConfig {
            dt: 0.01,
            horizon: 0.2,
            n_paths: 100,
            record_every: 1,
            ..SimConfig::default()
        };
        let b = euler_maruyama(&bm(), &[0.0; 3], &cfg).unwrap();
        let r = increment_moment_check(&b, &[2.0], 0.05, &[0.0, 0.1], 1.0).unwrap();
        assert_eq!(r.rows[0].lhs, 0.0);
    }

    #[test]
    fn heat_envelope_slope_for_brownian_closed_form() {
        // E g_w(x_t) from 0 for a unit-amplitude Gaussian of width w is
        // (w²/(w²+t))^{3/2}; widths matched to √t realize the envelope.
        let times: [f64; 6] = [0.01, 0.02, 0.04, 0.08, 0.16, 0.32];
        let members: Vec<TestFunction> = times
            .iter()
            .map(|t| TestFunction::gaussian(vec![0.0; 3], t.sqrt()))
            .collect();
        let mut probes = Vec::new();
        for &t in &times {
            for (j, f) in members.iter().enumerate() {
                let TestFunction::Gaussian { width, .. } = f else {
                    unreachable!()
                };
                let w2 = width * width;
                probes.push(HeatProbe {
                    t,
                    member: j,
                    mean: (w2 / (w2 + t)).powf(1.5),
                    se: 0.0,
                });
            }
        }
        let fam = TestFunctionFamily { members, p: 2.0 };
        let r = heat_kernel_bound_check(&probes, &fam, 0.15).unwrap();
        assert_eq!(r.verdict, Verdict::Pass, "{:?}", r.metrics);
        assert!((r.metric("envelope_slope").unwrap() + 0.75).abs() < 0.02);
    }

    #[test]
    fn jensen_case_passes_and_zero_is_neutral() {
        let probes = [
            LowerBoundProbe {
                label: "zero".into(),
                t: 0.1,
                samples: vec![0.0; 10],
                semigroup_derivative: 0.0,
            },
            LowerBoundProbe {
                label: "const".into(),
                t: 0.1,
                samples: vec![1.0, 3.0, 2.0, 2.0],
                semigroup_derivative: 2.0,
            },
        ];
        let r = flow_lower_bound_check(&probes).unwrap();
        assert_eq!(r.verdict, Verdict::Pass);
        let bad = [LowerBoundProbe {
            label: "bad".into(),
            t: 0.1,
            samples: vec![0.1; 100],
            semigroup_derivative: 1.0,
        }];
        assert_eq!(flow_lower_bound_check(&bad).unwrap().verdict, Verdict::Fail);
    }
}
