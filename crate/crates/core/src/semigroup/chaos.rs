//! Level sums of the chaos-tail criterion:
//! `I_m = ‖∫_{ℝ_+^m} e^{-ν(s_1+⋯+s_m)} Σ_k [Q^{k_m}_{s_m} ⋯ Q^{k_1}_{s_1} f]² ds‖_p^p`.
//!
//! Each `s_i` runs over a geometric grid with trapezoid weights in `ln s`,
//! plus end pieces for `[0, s_min]` and `[s_max, ∞)`. The recursion walks the
//! tree of `(s, k)` choices depth first; one evolve with snapshots serves all
//! `s` at a node of the tree.

use serde::Serialize;

use super::grid::GridFunction;
use super::operator::Operator;
use super::ColumnCache;
use crate::error::{Error, Result};
use crate::fields::CoefficientSet;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChaosSpec {
    pub nu: f64,
    pub m_max: usize,
    pub p: f64,
    /// Time nodes for each `s_i`; empty means `{2^{-7}, …, 2^2} / ν`.
    pub s_nodes: Vec<f64>,
    /// Largest PDE step; `None` uses the operator's bound.
    pub dt: Option<f64>,
}

impl ChaosSpec {
    pub fn new(nu: f64, m_max: usize, p: f64) -> Self {
        Self {
            nu,
            m_max,
            p,
            s_nodes: Vec::new(),
            dt: None,
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        if self.s_nodes.is_empty() {
            (-7..=2).map(|e| 2f64.powi(e) / self.nu).collect()
        } else {
            self.s_nodes.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.nu > 0.0) {
            return Err(Error::param("nu", "must be positive"));
        }
        if self.m_max == 0 || self.m_max > 3 {
            return Err(Error::param("m_max", "must lie in 1..=3"));
        }
        if !(self.p >= 1.0) {
            return Err(Error::param("p", "must be at least 1"));
        }
        let s = self.nodes();
        if s.len() < 2 || s[0] <= 0.0 || s.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::param("s_nodes", "need at least two increasing positive nodes"));
        }
        Ok(())
    }

    /// Weights with and without the two end pieces, already multiplied by
    /// `e^{-ν s}`.
    fn weights(&self) -> (Vec<f64>, Vec<f64>) {
        let s = self.nodes();
        let n = s.len();
        let mut core = vec![0.0; n];
        for i in 0..n - 1 {
            let du = (s[i + 1] / s[i]).ln();
            core[i] += 0.5 * du * s[i];
            core[i + 1] += 0.5 * du * s[i + 1];
        }
        let mut full = core.clone();
        full[0] += s[0];
        full[n - 1] += 1.0 / self.nu;
        let damp = |w: Vec<f64>| -> Vec<f64> { w.iter().zip(&s).map(|(w, s)| w * (-self.nu * s).exp()).collect() };
        (damp(full), damp(core))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChaosLevel {
    pub m: usize,
    pub value: f64,
    /// Relative contribution of the end pieces in `s`.
    pub truncation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChaosTailReport {
    pub nu: f64,
    pub p: f64,
    pub h: f64,
    pub levels: Vec<ChaosLevel>,
    /// `exp` of the least-squares slope of `ln I_m` in `m`.
    pub decay_ratio: f64,
    pub flags: Vec<String>,
    /// Number of grid evolutions performed.
    pub evolves: usize,
}

struct Walk<'a> {
    op: &'a Operator,
    cache: &'a ColumnCache,
    nodes: Vec<f64>,
    w_full: Vec<f64>,
    w_core: Vec<f64>,
    dt: f64,
    m_max: usize,
    acc_full: Vec<Vec<f64>>,
    acc_core: Vec<Vec<f64>>,
    evolves: usize,
}

impl Walk<'_> {
    fn visit(&mut self, g: &GridFunction, wf: f64, wc: f64, level: usize) -> Result<()> {
        let start = GridFunction { time: 0.0, ..g.clone() };
        let snaps = self.op.evolve_snapshots(&start, &self.nodes, self.dt)?;
        self.evolves += 1;
        for (si, snap) in snaps.iter().enumerate() {
            let grads = [snap.partial(0), snap.partial(1), snap.partial(2)];
            for c in 0..self.cache.cols.len() {
                let q = self.cache.contract(c, &grads);
                if q.values.iter().all(|v| *v == 0.0) {
                    continue;
                }
                let (f2, c2) = (wf * self.w_full[si], wc * self.w_core[si]);
                for (n, v) in q.values.iter().enumerate() {
                    let sq = v * v;
                    self.acc_full[level - 1][n] += f2 * sq;
                    self.acc_core[level - 1][n] += c2 * sq;
                }
                if level < self.m_max {
                    self.visit(&q, f2, c2, level + 1)?;
                }
            }
        }
        Ok(())
    }
}

pub fn chaos_tail(
    f: &GridFunction,
    coeffs: &CoefficientSet,
    op: &Operator,
    spec: &ChaosSpec,
) -> Result<ChaosTailReport> {
    spec.validate()?;
    if f.spec != op.spec {
        return Err(Error::param("grid", "function and operator grids differ"));
    }
    let cache = ColumnCache::new(coeffs, &op.spec, None)?;
    let (w_full, w_core) = spec.weights();
    let n = op.spec.len();
    let dt = spec.dt.unwrap_or_else(|| op.max_dt());
    let mut walk = Walk {
        op,
        cache: &cache,
        nodes: spec.nodes(),
        w_full,
        w_core,
        dt,
        m_max: spec.m_max,
        acc_full: vec![vec![0.0; n]; spec.m_max],
        acc_core: vec![vec![0.0; n]; spec.m_max],
        evolves: 0,
    };
    walk.visit(f, 1.0, 1.0, 1)?;
    let h3 = op.spec.h.powi(3);
    let mut levels = Vec::new();
    let mut flags = Vec::new();
    for m in 0..spec.m_max {
        let full = h3 * walk.acc_full[m].iter().map(|v| v.powf(spec.p)).sum::<f64>();
        let core = h3 * walk.acc_core[m].iter().map(|v| v.powf(spec.p)).sum::<f64>();
        let truncation = if full > 0.0 { (full - core) / full } else { 0.0 };
        if truncation > 0.1 {
            flags.push(format!("m={}: truncation {:.3}", m + 1, truncation));
        }
        levels.push(ChaosLevel {
            m: m + 1,
            value: full,
            truncation,
        });
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = levels
        .iter()
        .filter(|l| l.value > 0.0)
        .map(|l| (l.m as f64, l.value.ln()))
        .unzip();
    let decay_ratio = crate::stats::ols(&xs, &ys).map_or(f64::NAN, |fit| fit.slope.exp());
    Ok(ChaosTailReport {
        nu: spec.nu,
        p: spec.p,
        h: op.spec.h,
        levels,
        decay_ratio,
        flags,
        evolves: walk.evolves,
    })
}
