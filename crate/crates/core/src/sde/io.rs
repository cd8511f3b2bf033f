//! Flat binary persistence of trajectory batches with a JSON sidecar.
//!
//! Layout: the magic `MLTB0001`, then `n_paths`, `n_times`, `dim` as
//! little-endian `u64`, `dt` as `f64`, `master_seed` as `u64`, then the states
//! as little-endian `f64` in path-major order. Everything else lives in
//! `<file>.json`.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ExitRecord, SimConfig, TrajectoryBatch};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MLTB0001";

#[derive(Serialize, Deserialize)]
struct Sidecar {
    version: String,
    config: SimConfig,
    start: Vec<f64>,
    times: Vec<f64>,
    alive: Vec<bool>,
    exits: Vec<ExitRecord>,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn write_batch(batch: &TrajectoryBatch, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(MAGIC)?;
    for v in [batch.n_paths() as u64, batch.times.len() as u64, batch.dim as u64] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&batch.config.dt.to_le_bytes())?;
    w.write_all(&batch.config.master_seed.to_le_bytes())?;
    for v in &batch.paths {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    let side = Sidecar {
        version: crate::VERSION.to_string(),
        config: batch.config.clone(),
        start: batch.start.clone(),
        times: batch.times.clone(),
        alive: batch.alive.clone(),
        exits: batch.exits.clone(),
    };
    let json = serde_json::to_string_pretty(&side).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(sidecar_path(path), json)?;
    Ok(())
}

pub fn read_batch(path: &Path) -> Result<TrajectoryBatch> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = || Error::Config(format!("{}: not a trajectory batch", path.display()));
    if bytes.len() < 48 || &bytes[..8] != MAGIC {
        return Err(bad());
    }
    let word = |i: usize| u64::from_le_bytes(bytes[8 + 8 * i..16 + 8 * i].try_into().unwrap());
    let (n, nt, d) = (word(0) as usize, word(1) as usize, word(2) as usize);
    let body = &bytes[48..];
    if body.len() != n * nt * d * 8 {
        return Err(bad());
    }
    let paths = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let side: Sidecar =
        serde_json::from_str(&fs::read_to_string(sidecar_path(path))?).map_err(|e| Error::Config(e.to_string()))?;
    Ok(TrajectoryBatch {
        seeds: (0..n as u64)
            .map(|i| crate::rng::stream_seed(side.config.master_seed, i))
            .collect(),
        config: side.config,
        start: side.start,
        dim: d,
        times: side.times,
        paths,
        alive: side.alive,
        exits: side.exits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::CoefficientSet;

    #[test]
    fn round_trip() {
        let c = CoefficientSet::brownian(3, 3).unwrap();
        let cfg = SimConfig {
            dt: 0.05,
            horizon: 0.5,
            n_paths: 7,
            record_every: 2,
            radii: vec![0.3],
            ..SimConfig::default()
        };
        let b = super::super::euler_maruyama(&c, &[0.0; 3], &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("batch.bin");
        write_batch(&b, &p).unwrap();
        assert_eq!(read_batch(&p).unwrap(), b);
    }
}
