use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;
use serde_json::json;

use super::config::{CoefficientSpec, ExperimentConfig, ExperimentKind, FieldSpec};
use super::svg::Plot;
use crate::error::{Error, Result};
use crate::estimates::*;
use crate::fields::*;
use crate::morrey::*;
use crate::sde::*;
use crate::semigroup::*;

/// Version of the JSON summary layout.
pub const SUMMARY_SCHEMA: u32 = 1;

pub const CSV_HEADER: [&str; 11] = [
    "config_hash",
    "seed",
    "version",
    "experiment",
    "series",
    "probe",
    "x",
    "value",
    "se",
    "bound",
    "ratio",
];

/// One CSV row before the provenance columns are attached.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Row {
    pub series: String,
    pub probe: String,
    pub x: f64,
    pub value: f64,
    pub se: f64,
    pub bound: f64,
    pub ratio: f64,
}

impl Row {
    pub fn plain(series: impl Into<String>, probe: impl Into<String>, x: f64, value: f64, se: f64) -> Self {
        Self {
            series: series.into(),
            probe: probe.into(),
            x,
            value,
            se,
            bound: 0.0,
            ratio: 0.0,
        }
    }

    fn from_report(series: &str, r: &ReportRow) -> Self {
        Self {
            series: series.to_string(),
            probe: r.probe.clone(),
            x: r.x,
            value: r.lhs,
            se: r.se,
            bound: r.shape,
            ratio: r.ratio,
        }
    }
}

struct PlotSpec {
    file: &'static str,
    title: String,
    x_label: &'static str,
    y_label: &'static str,
    log_y: bool,
    /// Every series starting with this prefix becomes one curve.
    prefix: &'static str,
}

/// What an experiment produced, before anything is written.
pub struct Outcome {
    /// `None` for experiments that only compute.
    pub verdict: Option<Verdict>,
    pub rows: Vec<Row>,
    pub reports: Vec<EstimateReport>,
    pub extra: serde_json::Value,
    plots: Vec<PlotSpec>,
}

impl Outcome {
    fn new(verdict: Option<Verdict>) -> Self {
        Self {
            verdict,
            rows: Vec::new(),
            reports: Vec::new(),
            extra: json!({}),
            plots: Vec::new(),
        }
    }

    fn push_report(&mut self, report: EstimateReport) {
        for r in &report.rows {
            self.rows.push(Row::from_report(&report.name, r));
        }
        self.verdict = Some(match self.verdict {
            Some(v) => v.and(report.verdict),
            None => report.verdict,
        });
        self.reports.push(report);
    }

    fn plot(
        &mut self,
        file: &'static str,
        title: impl Into<String>,
        x: &'static str,
        y: &'static str,
        log_y: bool,
        prefix: &'static str,
    ) {
        self.plots.push(PlotSpec {
            file,
            title: title.into(),
            x_label: x,
            y_label: y,
            log_y,
            prefix,
        });
    }
}

/// Exit status of a finished run.
pub fn exit_code(verdict: Option<Verdict>) -> i32 {
    match verdict {
        None | Some(Verdict::Pass) => 0,
        Some(Verdict::Fail) => 2,
        Some(Verdict::Inconclusive) => 3,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub version: String,
    pub experiment: String,
    pub wall_time_s: f64,
    pub seeds: Vec<u64>,
    pub workers: usize,
    pub verdict: String,
    pub exit_code: i32,
    pub outputs: Vec<PathBuf>,
}

/// Worker count from `MORREY_LAB_WORKERS`, else the number of cores.
pub fn workers_from_env() -> usize {
    std::env::var("MORREY_LAB_WORKERS")
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs the experiment on a pool of `workers` threads and writes its outputs
/// under `<output_dir>/<experiment>-<hash>/`.
pub fn run(cfg: &ExperimentConfig, workers: usize) -> Result<RunManifest> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let start = Instant::now();
    let dir = cfg
        .output_dir
        .join(format!("{}-{}", cfg.experiment.as_str(), cfg.short_hash()));
    std::fs::create_dir_all(&dir)?;
    let outcome = pool.install(|| execute(cfg, &dir))?;
    let mut outputs = write_outputs(cfg, &outcome, &dir)?;
    let manifest_path = dir.join("manifest.json");
    outputs.push(manifest_path.clone());
    let manifest = RunManifest {
        config_hash: cfg.hash(),
        version: crate::VERSION.to_string(),
        experiment: cfg.experiment.as_str().to_string(),
        wall_time_s: start.elapsed().as_secs_f64(),
        seeds: vec![cfg.params.master_seed],
        workers,
        verdict: verdict_str(outcome.verdict).to_string(),
        exit_code: exit_code(outcome.verdict),
        outputs,
    };
    std::fs::write(
        &manifest_path,
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;
    Ok(manifest)
}

fn verdict_str(v: Option<Verdict>) -> &'static str {
    v.map_or("complete", Verdict::as_str)
}

/// Writes `rows.csv`, `summary.json` and the plots; returns their paths.
fn write_outputs(cfg: &ExperimentConfig, outcome: &Outcome, dir: &Path) -> Result<Vec<PathBuf>> {
    let hash = cfg.hash();
    let seed = cfg.params.master_seed.to_string();
    let csv_path = dir.join("rows.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(csv_err)?;
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for r in &outcome.rows {
        w.write_record([
            hash.as_str(),
            seed.as_str(),
            crate::VERSION,
            cfg.experiment.as_str(),
            r.series.as_str(),
            r.probe.as_str(),
            &r.x.to_string(),
            &r.value.to_string(),
            &r.se.to_string(),
            &r.bound.to_string(),
            &r.ratio.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    let summary = json!({
        "schema_version": SUMMARY_SCHEMA,
        "experiment": cfg.experiment.as_str(),
        "config_hash": hash,
        "version": crate::VERSION,
        "seed": cfg.params.master_seed,
        "verdict": verdict_str(outcome.verdict),
        "reports": outcome.reports,
        "extra": outcome.extra,
        "config": cfg,
    });
    let summary_path = dir.join("summary.json");
    std::fs::write(
        &summary_path,
        serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )?;
    let mut out = vec![csv_path, summary_path];
    if cfg.plots {
        for spec in &outcome.plots {
            let mut series: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
            for r in outcome.rows.iter().filter(|r| r.series.starts_with(spec.prefix)) {
                match series.iter_mut().find(|(name, _)| *name == r.series) {
                    Some((_, pts)) => pts.push((r.x, r.value)),
                    None => series.push((r.series.clone(), vec![(r.x, r.value)])),
                }
            }
            let plot = Plot {
                title: &spec.title,
                x_label: spec.x_label,
                y_label: spec.y_label,
                log_y: spec.log_y,
                series,
            };
            let path = dir.join(spec.file);
            std::fs::write(&path, plot.render())?;
            out.push(path);
        }
    }
    Ok(out)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

fn gaussian(width: f64) -> impl Fn(&[f64]) -> f64 + Sync + Copy {
    let w2 = width * width;
    move |x: &[f64]| (-(x[0] * x[0] + x[1] * x[1] + x[2] * x[2]) / (2.0 * w2)).exp()
}

fn sim_config(cfg: &ExperimentConfig) -> SimConfig {
    let p = &cfg.params;
    SimConfig {
        dt: p.dt,
        horizon: p.horizon,
        n_paths: p.n_paths,
        master_seed: p.master_seed,
        taming: p.taming,
        record_every: 0,
        radii: p.radii.clone(),
        center: Vec::new(),
        stop_after_exit: false,
    }
}

fn budget(cfg: &ExperimentConfig) -> SearchBudget {
    SearchBudget {
        levels: cfg.params.levels,
        max_lattice: cfg.params.max_lattice,
        ..SearchBudget::default()
    }
}

fn point_label(x: &[f64]) -> String {
    format!("({},{},{})", x[0], x[1], x[2])
}

fn scalar_field(spec: &FieldSpec) -> Result<Arc<dyn ScalarField>> {
    Ok(match spec {
        FieldSpec::InverseDistance => Arc::new(RadialPowerBump::inverse_distance(3)),
        FieldSpec::ExampleDrift {
            alpha,
            beta,
            gamma,
            mollify,
        } => {
            let b: Arc<dyn VectorField> = Arc::new(example_drift(&ExampleParams::new(*alpha, *beta, *gamma)));
            match mollify {
                Some(n) => Arc::new(Magnitude(Arc::new(crate::fields::mollify(b, MollifierSpec::new(*n))?))),
                None => Arc::new(Magnitude(b)),
            }
        }
        FieldSpec::ExampleSigmaGradient { alpha, beta } => Arc::new(GradSigmaNorm(example_coefficients(
            &ExampleParams::new(*alpha, *beta, 0.0),
        )?)),
        FieldSpec::DisjointBumps { q, n_max } => Arc::new(DisjointBumpField::with_constant(
            DisjointBumpParams::new(*q, *n_max),
            Some(log_squared_constant()),
        )?),
    })
}

/// Runs the mapped operation without writing the standard outputs. Batch
/// files of `simulate` go to `dir`.
pub fn execute(cfg: &ExperimentConfig, dir: &Path) -> Result<Outcome> {
    match cfg.experiment {
        ExperimentKind::MorreyNorm => morrey_norm_run(cfg),
        ExperimentKind::Oscillation => oscillation_run(cfg),
        ExperimentKind::Embedding => embedding_run(cfg),
        ExperimentKind::Simulate => simulate_run(cfg, dir),
        ExperimentKind::ExitStats => exit_stats_run(cfg),
        ExperimentKind::Laplace => laplace_run(cfg),
        ExperimentKind::Increments => increments_run(cfg),
        ExperimentKind::KrylovCheck => krylov_run(cfg),
        ExperimentKind::HeatKernel => heat_kernel_run(cfg),
        ExperimentKind::Semigroup => semigroup_run(cfg),
        ExperimentKind::ChaosDecay => chaos_run(cfg),
        ExperimentKind::MollifyConvergence => mollify_run(cfg),
        ExperimentKind::Counterexample => counterexample_run(cfg),
        ExperimentKind::DerivativeFlow => derivative_flow_run(cfg),
    }
}

fn morrey_norm_run(cfg: &ExperimentConfig) -> Result<Outcome> {
    let mut out = Outcome::new(None);
    let mut summary = Vec::new();
    for spec in &cfg.fields {
        let label = spec.label();
        let field = scalar_field(spec)?;
        let rep = morrey_norm(field.as_ref(), cfg.params.q, cfg.params.r0, &budget(cfg))?;
        out.rows.push(Row::plain(
            "norm",
            format!(
                "{label} witness c={} r={}",
                point_label(&rep.witness.center),
                rep.witness.radius
            ),
            rep.witness.radius,
            rep.value,
            0.0,
        ));
        for s in &rep.samples {
            out.rows.push(Row::plain(
                format!("balls {label}"),
                format!("c={}", point_label(&s.ball.center)),
                s.ball.radius,
                s.value,
                0.0,
            ));
        }
        summary.push(json!({
            "field": label,
            "value": rep.value,
            "witness": rep.witness,
            "coarse": rep.coarse,
            "flagged": rep.flagged,
            "balls": rep.samples.len(),
        }));
    }
    out.extra = json!({ "norms": summary });
    out.plot(
        "witness_map.svg",
        format!("ball averages, q = {}", cfg.params.q),
        "radius",
        "rho^(d/q) avg |f|^q ^(1/q)",
        true,
        "balls",
    );
    Ok(out)
}

fn oscillation_run(cfg: &ExperimentConfig) -> Result<Outcome> {
    let coeffs = cfg.coefficient_set()?;
    let a = DiffusionMatrix(coeffs);
    let r = cfg.params.r0;
    let region = (vec![-1.0; 3], vec![1.0; 3]);
    let rep = sharp_oscillation(
        &a,
        r,
        cfg.params.levels,
        cfg.params.pairs,
        region,
        &[vec![0.0; 3]],
        cfg.params.max_lattice,
    )?;
    let mut out = Outcome::new(None);
    out.rows.push(Row::plain(
        "sharp",
        format!(
            "witness c={} r={}",
            point_label(&rep.witness.center),
            rep.witness.radius
        ),
        r,
        rep.value,
        0.0,
    ));
    for s in &rep.samples {
        out.rows.push(Row::plain(
            "balls",
            format!("c={}", point_label(&s.ball.center)),
            s.ball.radius,
            s.value,
            0.0,
        ));
    }
    out.extra = json!({ "value": rep.value, "witness": rep.witness });
    out.plot(
        "oscillation.svg",
        "mean oscillation of a",
        "radius",
        "osc",
        false,
        "balls",
    );
    Ok(out)
}

fn embedding_run(cfg: &ExperimentConfig) -> Result<Outcome> {
    let p = &cfg.params;
    let pp = p.p_or_default(3);
    let mut out = Outcome::new(None);
    let mut norms = Vec::new();
    for spec in &cfg.fields {
        let field = scalar_field(spec)?;
        let b_norm = morrey_norm(field.as_ref(), p.q, p.r0, &budget(cfg))?.value;
        let family: Vec<GaussianBump> = p
            .probes
            .iter()
            .flat_map(|c| {
                p.widths.iter().map(|w| GaussianBump {
                    center: c.clone(),
                    width: *w,
                })
            })
            .collect();
        let mut rep = embedding_check(
            field.as_ref(),
            b_norm,
            p.q,
            pp,
            p.r0,
            &family,
            &crate::quadrature::BallRule::default(),
            p.tolerance.unwrap_or(0.9),
        )?;
        rep.name = format!("embedding {}", spec.label());
        norms.push(json!({ "field": spec.label(), "morrey_norm": b_norm }));
        out.push_report(rep);
    }
    out.extra = json!({ "norms": norms, "p": pp });
    out.plot(
        "embedding.svg",
        "embedding constants",
        "width",
        "lhs",
        true,
        "embedding",
    );
    Ok(out)
}

fn exit_rows(out: &mut Outcome, batch: &TrajectoryBatch) {
    for (ri, r) in batch.config.radii.iter().enumerate() {
        let taus: Vec<f64> = (0..batch.n_paths())
            .filter(|&i| batch.alive[i])
            .filter_map(|i| batch.exit(i, ri).tau)
            .collect();
        let censored = (0..batch.n_paths())
            .filter(|&i| batch.alive[i] && batch.exit(i, ri).tau.is_none())
            .count();
        let (m, se) = crate::stats::mean_se(&taus);
        out.rows.push(Row::plain("exit", format!("R={r} mean tau"), *r, m, se));
        out.rows
            .push(Row::plain("exit", format!("R={r} censored"), *r, censored as f64, 0.0));
    }
}

fn simulate_run(cfg: &ExperimentConfig, dir: &Path) -> Result<Outcome> {
    let coeffs = cfg.coefficient_set()?;
    let sim = SimConfig {
        stop_after_exit: cfg.params.stop_after_exit,
        ..sim_config(cfg)
    };
    let batch = euler_maruyama(&coeffs, &cfg.params.start, &sim)?;
    let mut out = Outcome::new(None);
    exit_rows(&mut out, &batch);
    let last = batch.times.len() - 1;
    let (m2, se2) = batch.functional(last, |x| x.iter().map(|v| v * v).sum());
    out.rows
        .push(Row::plain("terminal", "E|x_T|^2", batch.times[last], m2, se2));
    if cfg.params.write_batch {
        write_batch(&batch, &dir.join("batch.bin"))?;
    }
    out.extra = json!({ "dead_paths": batch.dead_count(), "steps": sim.steps() });
    Ok(out)
}

fn exit_stats_run(cfg: &ExperimentConfig) -> Result<Outcome> {
    let coeffs = cfg.coefficient_set()?;
    let sim = SimConfig {
        stop_after_exit: true,
        ..sim_config(cfg)
    };
    let batch = euler_maruyama(&coeffs, &cfg.params.start, &sim)?;
    let spec = ExitCheckSpec {
        n_grid: cfg.params.n_grid.clone(),
        ..ExitCheckSpec::default()
    };
    let pairs: Vec<(&TrajectoryBatch, usize)> = (0..sim.radii.len()).map(|i| (&batch, i)).collect();
    let (rep, fits) = exit_bounds_check(&pairs, &spec)?;
    let mut out = Outcome::new(None);
    for r in &rep.rows {
        let series = match r.probe.split_once(" n=") {
            Some((radius, _)) => format!("tail {radius}"),
            None => "mean".to_string(),
        };
        out.rows.push(Row::from_report(&series, r));
    }
    out.verdict = Some(rep.verdict);
    out.reports.push(rep);
    let start_r = crate::geom::norm(&cfg.params.start);
    for (ri, r) in sim.radii.iter().enumerate() {
        if start_r <= 9.0 * r / 16.0 {
            let mut h = hitting_positivity_check(&batch, ri)?;
            h.name = format!("hit_before_exit R={r}");
            out.push_report(h);
        }
    }
    out.extra = json!({ "fits": fits, "dead_paths": batch.dead_count() });
    out.plot("exit_tail.svg", "P(tau_R >= n R^2)", "n", "probability", true, "tail");
    Ok(out)
}

fn laplace_run(cfg: &ExperimentConfig) -> Result<Outcome> {
    let coeffs = cfg.coefficient_set()?;
    let r = cfg.params.radii[0];
    let sim = SimConfig {
        stop_after_exit: true,
        horizon: cfg.params.horizon.max(r * r),
        radii: vec![r],
        ..sim_config(cfg)
    };
    let batch = euler_maruyama(&coeffs, &cfg.params.start, &sim)?;
    let rep = laplace_exit_check(&batch, 0, &cfg.params.lambdas, &cfg.params.small_times, 100)?;
    let mut out = Outcome::new(None);
    out.push_report(rep);
    out.plot(
        "laplace.svg",
        "exit-time transform",
        "lambda or t",
        "value",
        true,
        "laplace",
    );
    Ok(out)
}

fn increments_run(cfg: &ExperimentConfig) -> Result<Outcome> {
    let coeffs = cfg.coefficient_set()?;
    let sim = SimConfig {
        record_every: 1,
        radii: Vec::new(),
        ..sim_config(cfg)
    };
    let batch = euler_maruyama(&coeffs, &cfg.params.start, &sim)?;
    let rep = increment_moment_check(
        &batch,
        &cfg.params.moments,
        0.0,
        &cfg.params.gaps,
        cfg.params.tolerance.unwrap_or(0.3),
    )?;
    let mut out = Outcome::new(None);
    out.push_report(rep);
    out.plot(
        "increments.svg",
        "increment moments",
        "gap",
        "E sup |x_t - x_s|^m",
        true,
        "increment",
    );
    Ok(out)
}

fn test_family(cfg: &ExperimentConfig) -> TestFunctionFamily {
    let p = &cfg.params;
    TestFunctionFamily {
        members: p
            .probes
            .iter()
            .flat_map(|c| p.widths.iter().map(|w| TestFunction::gaussian(c.clone(), *w)))
            .collect(),
        p: p.p_or_default(3),
    }
}

fn krylov_run(cfg: &ExperimentConfig) -> Result<Outcome> {
    let coeffs = cfg.coefficient_set()?;
    let sim = SimConfig {
        radii: Vec::new(),
        ..sim_config(cfg)
    };
    let rep = admissibility_check(&coeffs, &cfg.params.start, &sim, &test_family(cfg))?;
    let mut out = Outcome::new(None);
    out.push_report(rep);
    Ok(out)
}

fn heat_kernel_run(cfg: &ExperimentConfig) -> Result<Outcome> {
    let coeffs = cfg.coefficient_set()?;
    let family = test_family(cfg);
    let sim = SimConfig {
        radii: Vec::new(),
        ..sim_config(cfg)
    };
    let mut probes = Vec::new();
    for (j, f) in family.members.iter().enumerate() {
        for (ti, &t) in cfg.params.times.iter().enumerate() {
            let c = SimConfig {
                horizon: t,
                dt: sim.dt.min(t / 10.0),
                master_seed: crate::rng::stream_seed(sim.master_seed, (j * 1000 + ti) as u64),
                ..sim.clone()
            };
            let v = feynman_kac(
                &|x: &[f64]| f.eval(x).abs(),
                &coeffs,
                t,
                &[cfg.params.start.clone()],
                &c,
            )?;
            probes.push(HeatProbe {
                t,
                member: j,
                mean: v[0].mean,
                se: v[0].se,
            });
        }
    }
    let rep = heat_kernel_bound_check(&probes, &family, cfg.params.tolerance.unwrap_or(0.25))?;
    let mut out = Outcome::new(None);
    out.push_report(rep);
    Ok(out)
}

/// Gaussians `exp(-|x|²/(2ε²))` with `ε² = d(1 - 1/p) t` for each `t`: the
/// member that saturates the gradient bound at time `t`.
pub fn dilation_family(spec: &GridSpec, times: &[f64], p: f64) -> Vec<GridFunction> {
    let u = 3.0 * (1.0 - 1.0 / p);
    times
        .iter()
        .map(|t| GridFunction::from_fn(spec, gaussian((u * t).sqrt())))
        .collect()
}

fn semigroup_run(cfg: &ExperimentConfig) -> Result<Outcome> {
    let p = &cfg.params;
    let pp = p.p_or_default(3);
    let coeffs = cfg.coefficient_set()?;
    let spec = cfg.grid.spec()?;
    let op = Operator::new(&coeffs, &spec, cfg.grid.scheme)?;
    let dt = op.max_dt();
    let tol = p.tolerance.unwrap_or(0.3);
    let mut out = Outcome::new(None);
    let family = dilation_family(&spec, &p.times, pp);
    out.push_report(gradient_bound_check(&op, &family, &p.times, pp, dt, tol)?);
    out.push_report(pointwise_bound_check(&op, &family, &p.times, pp, dt, tol)?);

    let f = GridFunction::from_fn(&spec, gaussian(p.width));
    let u = evolve(&f, &op, p.horizon, dt)?;
    let violation = maximum_principle_violation(&f, &u);
    let mut mp = EstimateReport::new(
        "maximum_principle",
        "0 <= T_t f <= sup f",
        vec![ReportRow::new("violation", p.horizon, violation, 0.0, 1e-6)],
    );
    mp.tolerance = 1e-6;
    mp.verdict = if violation <= 1e-6 {
        Verdict::Pass
    } else {
        Verdict::Fail
    };
    out.push_report(mp);

    if p.cross_check {
        let sim = SimConfig {
            radii: Vec::new(),
            ..sim_config(cfg)
        };
        let fk = feynman_kac(&gaussian(p.width), &coeffs, p.horizon, &p.probes, &sim)?;
        let mut rows = Vec::new();
        let mut verdict = Verdict::Pass;
        for v in &fk {
            let grid = u.interpolate(&v.x);
            let diff = (grid - v.mean).abs();
            let allowed = (3.0 * v.se).max(5e-3);
            if diff > allowed {
                verdict = Verdict::Fail;
            }
            let mut row = ReportRow::new(format!("x={}", point_label(&v.x)), v.x[0], diff, v.se, allowed);
            row.ratio = diff / allowed;
            rows.push(row);
        }
        let mut rep = EstimateReport::new("cross_method", "|evolve - feynman_kac| <= max(3 SE, 5e-3)", rows);
        rep.verdict = verdict;
        out.push_report(rep);
    }
    out.plot("gradient_bound.svg", "fitted constants", "t", "N", false, "gradient");
    Ok(out)
}

fn chaos_levels(cfg: &ExperimentConfig, h: f64) -> Result<ChaosTailReport> {
    let p = &cfg.params;
    let coeffs = cfg.coefficient_set()?;
    let spec = GridSpec::cube(cfg.grid.half, h)?;
    let op = Operator::new(&coeffs, &spec, cfg.grid.scheme)?;
    let f = GridFunction::from_fn(&spec, gaussian(p.width));
    let cs = ChaosSpec {
        nu: p.nu,
        m_max: p.m_max,
        p: p.p_or_default(3),
        s_nodes: p.s_nodes.clone(),
        dt: None,
    };
    chaos_tail(&f, &coeffs, &op, &cs)
}

fn chaos_run(cfg: &ExperimentConfig) -> Result<Outcome> {
    let mut hs = vec![cfg.grid.h];
    if cfg.params.refine {
        hs.push(cfg.grid.h / 2.0);
    }
    let mut out = Outcome::new(None);
    let mut reports = Vec::new();
    let mut verdict = Verdict::Pass;
    for &h in &hs {
        let rep = chaos_levels(cfg, h)?;
        for l in &rep.levels {
            out.rows.push(Row::plain(
                format!("chaos h={h}"),
                format!("m={}", l.m),
                l.m as f64,
                l.value,
                0.0,
            ));
        }
        for l in &rep.levels {
            out.rows.push(Row::plain(
                format!("truncation h={h}"),
                format!("m={}", l.m),
                l.m as f64,
                l.truncation,
                0.0,
            ));
        }
        out.rows
            .push(Row::plain("decay", format!("h={h}"), h, rep.decay_ratio, 0.0));
        let decreasing = rep.levels.windows(2).all(|w| w[1].value < w[0].value);
        if !(decreasing && rep.decay_ratio < 1.0) {
            verdict = Verdict::Fail;
        }
        reports.push(rep);
    }
    let mut change = None;
    if reports.len() == 2 {
        let (a, b) = (reports[0].decay_ratio, reports[1].decay_ratio);
        let c = (b - a).abs() / b.abs();
        out.rows
            .push(Row::plain("refinement", "decay_ratio relative change", hs[1], c, 0.0));
        if !(c <= cfg.params.tolerance.unwrap_or(0.15)) {
            verdict = Verdict::Fail;
        }
        change = Some(c);
    }
    out.verdict = Some(verdict);
    out.extra = json!({ "levels": reports, "refinement_change": change });
    out.plot(
        "chaos_levels.svg",
        format!("chaos levels, nu = {}", cfg.params.nu),
        "m",
        "I_m",
        true,
        "chaos",
    );
    Ok(out)
}

fn mollify_run(cfg: &ExperimentConfig) -> Result<Outcome> {
    let p = &cfg.params;
    let mut out = Outcome::new(None);
    for spec in &cfg.fields {
        if let FieldSpec::ExampleDrift { alpha, beta, gamma, .. } = spec {
            let b: Arc<dyn VectorField> = Arc::new(example_drift(&ExampleParams::new(*alpha, *beta, *gamma)));
            let (mut rep, _) = mollifier_bound_check(b, &p.ns, p.q, p.r0, &budget(cfg), p.tolerance.unwrap_or(0.25))?;
            rep.name = format!("mollifier_bound {}", spec.label());
            out.push_report(rep);
        }
    }
    if let (true, CoefficientSpec::Example { mollify: None, .. }) = (p.grid_convergence, &cfg.coefficients) {
        let base = cfg.coefficient_set()?;
        let grid = cfg.grid.spec()?;
        let f = GridFunction::from_fn(&grid, gaussian(p.width));
        out.push_report(mollified_convergence(
            &f,
            &base,
            &p.ns,
            p.horizon,
            p.p_or_default(3),
            cfg.grid.scheme,
        )?);
    }
    out.plot(
        "mollifier_bound.svg",
        "Morrey ratios under mollification",
        "n",
        "ratio",
        false,
        "mollifier",
    );
    Ok(out)
}

fn counterexample_run(cfg: &ExperimentConfig) -> Result<Outcome> {
    let p = &cfg.params;
    let c = log_squared_constant();
    let mut out = Outcome::new(None);
    let mut norms = Vec::new();
    for &n in &p.n_max {
        let field = DisjointBumpField::with_constant(DisjointBumpParams::new(p.q, n), Some(c))?;
        let rep = morrey_norm(&field, p.q, p.r0, &budget(cfg))?;
        out.rows
            .push(Row::plain("morrey", format!("N={n}"), n as f64, rep.value, 0.0));
        norms.push(rep.value);
    }
    let lp = p.q + 0.3;
    let mut masses = Vec::new();
    for &n in &p.mass_n_max {
        let (_, mass) = lp_mass_partial(&DisjointBumpParams::new(p.q, n), lp, Some(c))?;
        out.rows
            .push(Row::plain("lp_mass", format!("N={n}"), n as f64, mass, 0.0));
        masses.push(mass);
    }
    let hi = norms.iter().copied().fold(0.0, f64::max);
    let lo = norms.iter().copied().fold(f64::INFINITY, f64::min);
    let spread = (hi - lo) / (hi + lo);
    let growth = masses.last().unwrap() / masses[0];
    let ok = spread <= p.tolerance.unwrap_or(0.05) && growth >= 10.0;
    out.verdict = Some(if ok { Verdict::Pass } else { Verdict::Fail });
    out.extra = json!({ "morrey_spread": spread, "lp_mass_growth": growth, "p": lp });
    out.plot("counterexample.svg", "truncated field", "N_max", "value", true, "");
    Ok(out)
}

fn derivative_flow_run(cfg: &ExperimentConfig) -> Result<Outcome> {
    let p = &cfg.params;
    let coeffs = cfg.coefficient_set()?;
    let spec = cfg.grid.spec()?;
    let op = Operator::new(&coeffs, &spec, cfg.grid.scheme)?;
    let x = &p.probes[0];
    let mut probes = Vec::new();
    for &t in &p.times {
        for eta in &p.etas {
            let sim = SimConfig {
                horizon: t,
                radii: Vec::new(),
                ..sim_config(cfg)
            };
            let label = format!("t={t} eta={}", point_label(eta));
            probes.push(flow_lower_bound_probe(
                &coeffs,
                &op,
                p.width,
                x,
                eta,
                &FlowConfig::new(sim),
                label,
            )?);
        }
    }
    let mut out = Outcome::new(None);
    out.push_report(flow_lower_bound_check(&probes)?);
    Ok(out)
}
