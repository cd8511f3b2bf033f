//! End-to-end runs of the `morrey-lab` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_morrey-lab"));
    c.env_remove("MORREY_LAB_WORKERS");
    c
}

fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

fn run(dir: &Path, cfg: &Path, out: &str) -> Output {
    bin()
        .args(["run", cfg.to_str().unwrap(), "--output"])
        .arg(dir.join(out))
        .output()
        .unwrap()
}

/// The single run directory below `out`.
fn run_dir(out: &Path) -> PathBuf {
    let dirs: Vec<PathBuf> = std::fs::read_dir(out)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_dir())
        .collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs[0].clone()
}

fn rows(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path)
        .unwrap()
        .records()
        .map(Result::unwrap)
        .collect()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const NORM: &str = r#"
experiment = "morrey-norm"
[[fields]]
kind = "inverse-distance"
[params]
q = 2.0
"#;

const SIMULATE: &str = r#"
experiment = "simulate"
[coefficients]
kind = "brownian"
[params]
dt = 2.5e-4
T = 3.0
n_paths = 3000
master_seed = 5
radii = [1.0]
stop_after_exit = true
"#;

const SIMULATE_EXAMPLE: &str = r#"
experiment = "simulate"
[coefficients]
kind = "example"
alpha = 1.0
beta = 0.0
gamma = 0.1
[params]
dt = 1e-3
T = 0.2
n_paths = 200
master_seed = 2
radii = [0.5]
"#;

#[test]
fn morrey_norm_of_inverse_distance_with_provenance_columns() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "norm.toml", NORM);
    let o = run(tmp.path(), &cfg, "out");
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let dir = run_dir(&tmp.path().join("out"));
    let mut r = csv::Reader::from_path(dir.join("rows.csv")).unwrap();
    let header: Vec<String> = r.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(
        header,
        [
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
            "ratio"
        ]
    );
    let recs = rows(&dir.join("rows.csv"));
    let norm = recs.iter().find(|r| &r[4] == "norm").unwrap();
    let v: f64 = norm[7].parse().unwrap();
    assert!((v - 3f64.sqrt()).abs() < 1e-3, "norm {v}");
    assert!(dir.file_name().unwrap().to_str().unwrap().starts_with("morrey-norm-"));
    assert!(dir.to_str().unwrap().contains(&norm[0][..12]));
    assert_eq!(&norm[2], env!("CARGO_PKG_VERSION"));
    for f in ["summary.json", "manifest.json"] {
        assert!(dir.join(f).exists(), "{f}");
    }
}

#[test]
fn simulate_brownian_mean_exit_time() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "sim.toml", SIMULATE);
    let o = run(tmp.path(), &cfg, "out");
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let recs = rows(&run_dir(&tmp.path().join("out")).join("rows.csv"));
    let tau = recs.iter().find(|r| &r[5] == "R=1 mean tau").unwrap();
    let m: f64 = tau[7].parse().unwrap();
    assert!((m - 1.0 / 3.0).abs() < 0.02, "mean tau {m}");
    let censored = recs.iter().find(|r| &r[5] == "R=1 censored").unwrap();
    assert_eq!(&censored[7], "0");
}

#[test]
fn configuration_errors_exit_with_one_and_name_the_line() {
    let tmp = TempDir::new().unwrap();
    let empty = write(tmp.path(), "empty.toml", "experiment = \"morrey-norm\"\n");
    let o = run(tmp.path(), &empty, "out");
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("fields"), "{}", stderr(&o));

    let bad = write(tmp.path(), "bad.toml", &SIMULATE.replace("dt = 2.5e-4", "dt = -1.0"));
    let o = run(tmp.path(), &bad, "out");
    assert_eq!(o.status.code(), Some(1));
    let msg = stderr(&o);
    assert!(msg.contains("bad.toml:6:"), "{msg}");
    assert!(msg.contains("dt"), "{msg}");
    assert!(!tmp.path().join("out").exists());

    let ok = write(tmp.path(), "ok.toml", SIMULATE);
    let o = bin().args(["validate", ok.to_str().unwrap()]).output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("ok simulate "));
}

#[test]
fn worker_count_does_not_change_the_output() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "sim.toml", SIMULATE_EXAMPLE);
    let mut bytes = Vec::new();
    for (w, out) in [("1", "a"), ("3", "b")] {
        let o = bin()
            .env("MORREY_LAB_WORKERS", w)
            .args(["run", cfg.to_str().unwrap(), "--output"])
            .arg(tmp.path().join(out))
            .output()
            .unwrap();
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        bytes.push(std::fs::read(run_dir(&tmp.path().join(out)).join("rows.csv")).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn sweep_groups_by_parameter_and_skips_duplicates() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "sim.toml", SIMULATE_EXAMPLE);
    let grid = write(
        tmp.path(),
        "grid.toml",
        "\"coefficients.beta\" = [0.0, 0.3, 0.6]\n\"params.master_seed\" = [2, 2]\n",
    );
    let o = bin()
        .args([
            "sweep",
            cfg.to_str().unwrap(),
            "--grid",
            grid.to_str().unwrap(),
            "--output",
        ])
        .arg(tmp.path().join("sweep"))
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let agg = rows(&tmp.path().join("sweep/sweep.csv"));
    let mut betas: Vec<&str> = agg.iter().map(|r| r.get(0).unwrap()).collect();
    betas.dedup();
    assert_eq!(betas.len(), 3, "{betas:?}");
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(tmp.path().join("sweep/sweep.json")).unwrap()).unwrap();
    assert_eq!(report["duplicates"], 3);
    assert_eq!(report["entries"].as_array().unwrap().len(), 3);

    // The beta = 0 point of the sweep is the plain run of the base file.
    let o = run(tmp.path(), &cfg, "single");
    assert_eq!(o.status.code(), Some(0));
    let single = run_dir(&tmp.path().join("single"));
    let name = single.file_name().unwrap();
    assert_eq!(
        std::fs::read(single.join("rows.csv")).unwrap(),
        std::fs::read(tmp.path().join("sweep").join(name).join("rows.csv")).unwrap()
    );
}

#[test]
fn failed_and_inconclusive_verdicts_have_their_own_codes() {
    let tmp = TempDir::new().unwrap();
    let strict = write(
        tmp.path(),
        "strict.toml",
        r#"
experiment = "embedding"
[[fields]]
kind = "inverse-distance"
[params]
tolerance = 1e-9
"#,
    );
    let o = run(tmp.path(), &strict, "strict");
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let short = write(
        tmp.path(),
        "short.toml",
        r#"
experiment = "exit-stats"
[coefficients]
kind = "brownian"
[params]
dt = 1e-3
T = 0.05
n_paths = 200
radii = [1.0]
"#,
    );
    let o = run(tmp.path(), &short, "short");
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}
