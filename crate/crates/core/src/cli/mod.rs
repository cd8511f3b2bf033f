//! Batch experiment driver: `run`, `sweep` and `validate` over TOML
//! experiment files, writing CSV rows, a JSON summary, a run manifest and
//! SVG plots.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

mod config;
mod run;
mod svg;

pub use config::{
    locate_key, CoefficientSpec, ConfigError, ExperimentConfig, ExperimentKind, FieldSpec, GridConfig, Params,
};
pub use run::{
    dilation_family, execute, exit_code, run, workers_from_env, Outcome, Row, RunManifest, CSV_HEADER, SUMMARY_SCHEMA,
};
pub use svg::Plot;

#[derive(Debug, Parser)]
#[command(
    name = "morrey-lab",
    version,
    about = "Experiments on Itô equations with Morrey-class coefficients"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one experiment.
    Run {
        config: PathBuf,
        /// Overrides `output_dir` from the file.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Worker threads; defaults to MORREY_LAB_WORKERS or the core count.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Run the cartesian product of a parameter grid.
    Sweep {
        config: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Parse and validate without computing.
    Validate { config: PathBuf },
}

/// One point of a sweep.
#[derive(Debug, Clone, Serialize)]
pub struct SweepEntry {
    pub assignment: Vec<(String, String)>,
    pub config_hash: Option<String>,
    pub manifest: Option<RunManifest>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    pub entries: Vec<SweepEntry>,
    pub duplicates: usize,
    pub aggregate: PathBuf,
}

impl SweepReport {
    /// 1 if any point failed to configure or run, else the worst verdict code.
    pub fn exit_code(&self) -> i32 {
        let codes: Vec<i32> = self
            .entries
            .iter()
            .map(|e| e.manifest.as_ref().map_or(1, |m| m.exit_code))
            .collect();
        [1, 2, 3].into_iter().find(|c| codes.contains(c)).unwrap_or(0)
    }
}

fn set_path(table: &mut toml::Table, dotted: &str, value: toml::Value) -> Result<(), String> {
    let mut parts: Vec<&str> = dotted.split('.').collect();
    let last = parts.pop().ok_or("empty key")?;
    let mut t = table;
    for p in parts {
        t = t
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| format!("`{p}` in `{dotted}` is not a table"))?;
    }
    t.insert(last.to_string(), value);
    Ok(())
}

fn config_error(path: &Path, line: Option<usize>, message: impl Into<String>) -> ConfigError {
    ConfigError {
        path: Some(path.to_path_buf()),
        line,
        key: None,
        message: message.into(),
    }
}

/// Reads a grid file of the form `"section.key" = [v1, v2, …]`.
pub fn load_grid(path: &Path) -> Result<Vec<(String, Vec<toml::Value>)>, ConfigError> {
    let source = std::fs::read_to_string(path).map_err(|e| config_error(path, None, e.to_string()))?;
    let table: toml::Table = toml::from_str(&source).map_err(|e| {
        let line = e.span().map(|s| source[..s.start].matches('\n').count() + 1);
        config_error(path, line, e.message())
    })?;
    let mut axes = Vec::new();
    for (k, v) in table {
        match v {
            toml::Value::Array(vals) if !vals.is_empty() => axes.push((k, vals)),
            _ => {
                return Err(config_error(
                    path,
                    locate_key(&source, &k),
                    format!("`{k}` must map to a nonempty array"),
                ))
            }
        }
    }
    if axes.is_empty() {
        return Err(config_error(path, None, "parameter grid is empty"));
    }
    Ok(axes)
}

fn short(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Runs every distinct point of the grid. Points whose configuration hashes
/// coincide run once; a failing point is recorded and the sweep continues.
pub fn sweep(
    config_path: &Path,
    axes: &[(String, Vec<toml::Value>)],
    output: Option<&Path>,
    workers: usize,
) -> Result<SweepReport, ConfigError> {
    let source = std::fs::read_to_string(config_path).map_err(|e| config_error(config_path, None, e.to_string()))?;
    // Parse once for line-referenced errors in the base file.
    let base_cfg = ExperimentConfig::from_toml(&source).map_err(|mut e| {
        e.path = Some(config_path.to_path_buf());
        e
    })?;
    let base: toml::Table = toml::from_str(&source).map_err(|e| config_error(config_path, None, e.message()))?;
    let out_dir = output.map_or(base_cfg.output_dir.clone(), Path::to_path_buf);

    let mut combos: Vec<Vec<usize>> = vec![Vec::new()];
    for (_, vals) in axes {
        combos = combos
            .into_iter()
            .flat_map(|c| {
                (0..vals.len()).map(move |i| {
                    let mut c = c.clone();
                    c.push(i);
                    c
                })
            })
            .collect();
    }

    let mut seen = BTreeSet::new();
    let mut duplicates = 0;
    let mut entries = Vec::new();
    for combo in combos {
        let mut table = base.clone();
        let mut assignment = Vec::new();
        let mut err = None;
        for (axis, &i) in axes.iter().zip(&combo) {
            assignment.push((axis.0.clone(), short(&axis.1[i])));
            if let Err(e) = set_path(&mut table, &axis.0, axis.1[i].clone()) {
                err = Some(e);
            }
        }
        let parsed = match err {
            Some(e) => Err(e),
            None => toml::Value::Table(table)
                .try_into::<ExperimentConfig>()
                .map_err(|e| e.to_string())
                .and_then(|c| c.validate().map(|_| c).map_err(|e| e.to_string())),
        };
        let mut cfg = match parsed {
            Ok(c) => c,
            Err(e) => {
                entries.push(SweepEntry {
                    assignment,
                    config_hash: None,
                    manifest: None,
                    error: Some(e),
                });
                continue;
            }
        };
        cfg.output_dir = out_dir.clone();
        let hash = cfg.hash();
        if !seen.insert(hash.clone()) {
            duplicates += 1;
            continue;
        }
        let (manifest, error) = match run(&cfg, workers) {
            Ok(m) => (Some(m), None),
            Err(e) => (None, Some(e.to_string())),
        };
        entries.push(SweepEntry {
            assignment,
            config_hash: Some(hash),
            manifest,
            error,
        });
    }

    let aggregate = out_dir.join("sweep.csv");
    write_aggregate(&aggregate, axes, &entries).map_err(|e| config_error(&aggregate, None, e.to_string()))?;
    let report = SweepReport {
        entries,
        duplicates,
        aggregate,
    };
    std::fs::write(
        out_dir.join("sweep.json"),
        serde_json::to_string_pretty(&report).expect("sweep report serializes"),
    )
    .map_err(|e| config_error(&out_dir, None, e.to_string()))?;
    Ok(report)
}

fn write_aggregate(path: &Path, axes: &[(String, Vec<toml::Value>)], entries: &[SweepEntry]) -> std::io::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let io = |e: csv::Error| std::io::Error::other(e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    let header: Vec<&str> = axes.iter().map(|a| a.0.as_str()).chain(CSV_HEADER).collect();
    w.write_record(&header).map_err(io)?;
    for e in entries {
        let Some(m) = &e.manifest else { continue };
        let Some(rows) = m.outputs.iter().find(|p| p.ends_with("rows.csv")) else {
            continue;
        };
        let mut r = csv::Reader::from_path(rows).map_err(io)?;
        for rec in r.records() {
            let rec = rec.map_err(io)?;
            let fields: Vec<&str> = e.assignment.iter().map(|a| a.1.as_str()).chain(rec.iter()).collect();
            w.write_record(&fields).map_err(io)?;
        }
    }
    w.flush()
}

/// Entry point of the binary; returns the process exit code.
pub fn main_with_args(args: impl IntoIterator<Item = String>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match cli.command {
        Command::Validate { config } => match ExperimentConfig::load(&config) {
            Ok(cfg) => {
                println!("ok {} {}", cfg.experiment.as_str(), cfg.hash());
                0
            }
            Err(e) => {
                eprintln!("error: {e}");
                1
            }
        },
        Command::Run {
            config,
            output,
            workers,
        } => {
            let mut cfg = match ExperimentConfig::load(&config) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: {e}");
                    return 1;
                }
            };
            if let Some(o) = output {
                cfg.output_dir = o;
            }
            match run(&cfg, workers.unwrap_or_else(workers_from_env)) {
                Ok(m) => {
                    println!(
                        "{} {} {} ({:.1} s)",
                        m.experiment, m.verdict, m.config_hash, m.wall_time_s
                    );
                    for o in &m.outputs {
                        println!("  {}", o.display());
                    }
                    m.exit_code
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    1
                }
            }
        }
        Command::Sweep {
            config,
            grid,
            output,
            workers,
        } => {
            let result = load_grid(&grid).and_then(|axes| {
                sweep(
                    &config,
                    &axes,
                    output.as_deref(),
                    workers.unwrap_or_else(workers_from_env),
                )
            });
            match result {
                Ok(rep) => {
                    for e in &rep.entries {
                        let label: Vec<String> = e.assignment.iter().map(|(k, v)| format!("{k}={v}")).collect();
                        match (&e.manifest, &e.error) {
                            (Some(m), _) => println!("{} -> {}", label.join(" "), m.verdict),
                            (None, Some(err)) => println!("{} -> error: {err}", label.join(" ")),
                            _ => {}
                        }
                    }
                    if rep.duplicates > 0 {
                        println!("{} duplicate point(s) skipped", rep.duplicates);
                    }
                    println!("{}", rep.aggregate.display());
                    rep.exit_code()
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    1
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn locate_key_finds_section_entries() {
        let src = "experiment = \"simulate\"\n\n[params]\nq = 2.5\ndt = -1\n\n[grid]\nh = 0.1\n";
        assert_eq!(locate_key(src, "params.dt"), Some(5));
        assert_eq!(locate_key(src, "grid.h"), Some(8));
        assert_eq!(locate_key(src, "experiment"), Some(1));
        assert_eq!(locate_key(src, "grid"), Some(7));
    }

    #[test]
    fn invalid_parameter_reports_its_line() {
        let src = "experiment = \"simulate\"\n[params]\nn_paths = 10\ndt = -1.0\n";
        let e = ExperimentConfig::from_toml(src).unwrap_err();
        assert_eq!(e.line, Some(4));
        assert_eq!(e.key.as_deref(), Some("params.dt"));
    }

    #[test]
    fn unknown_keys_are_rejected_with_a_line() {
        let src = "experiment = \"simulate\"\n[params]\nbogus = 1\n";
        let e = ExperimentConfig::from_toml(src).unwrap_err();
        assert_eq!(e.line, Some(3));
    }

    #[test]
    fn hash_ignores_output_dir_and_tracks_parameters() {
        let a = ExperimentConfig::from_toml("experiment = \"simulate\"\noutput_dir = \"a\"\n").unwrap();
        let b = ExperimentConfig::from_toml("experiment = \"simulate\"\noutput_dir = \"b\"\n").unwrap();
        let c = ExperimentConfig::from_toml("experiment = \"simulate\"\n[params]\nmaster_seed = 1\n").unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn set_path_creates_tables() {
        let mut t = toml::Table::new();
        set_path(&mut t, "coefficients.beta", toml::Value::Float(0.3)).unwrap();
        assert_eq!(t["coefficients"]["beta"].as_float(), Some(0.3));
    }
}
