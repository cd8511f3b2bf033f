//! Statistical pass/fail reports for the quantitative bounds.
//!
//! Every check fits its constant from the data and judges stability or sign,
//! never an absolute threshold on a constant the theory leaves unspecified.
//! Margins are three standard errors throughout.

use std::collections::BTreeMap;

use serde::Serialize;

mod checks;

pub use checks::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    Inconclusive,
}

impl Verdict {
    /// Combines verdicts: any fail wins, then inconclusive.
    pub fn and(self, other: Verdict) -> Verdict {
        use Verdict::*;
        match (self, other) {
            (Fail, _) | (_, Fail) => Fail,
            (Inconclusive, _) | (_, Inconclusive) => Inconclusive,
            _ => Pass,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Pass => "pass",
            Verdict::Fail => "fail",
            Verdict::Inconclusive => "inconclusive",
        }
    }
}

/// One probed configuration: empirical left side with its standard error and
/// the bound's shape without the constant.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub probe: String,
    pub x: f64,
    pub lhs: f64,
    pub se: f64,
    pub shape: f64,
    /// `lhs / shape`, zero when the shape vanishes.
    pub ratio: f64,
}

impl ReportRow {
    pub fn new(probe: impl Into<String>, x: f64, lhs: f64, se: f64, shape: f64) -> Self {
        let ratio = if shape != 0.0 { lhs / shape } else { 0.0 };
        Self {
            probe: probe.into(),
            x,
            lhs,
            se,
            shape,
            ratio,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateReport {
    pub name: String,
    pub bound_shape: String,
    pub rows: Vec<ReportRow>,
    pub fitted_constant: f64,
    pub tolerance: f64,
    pub verdict: Verdict,
    pub flags: Vec<String>,
    pub metrics: BTreeMap<String, f64>,
}

impl EstimateReport {
    pub fn new(name: impl Into<String>, bound_shape: impl Into<String>, rows: Vec<ReportRow>) -> Self {
        Self {
            name: name.into(),
            bound_shape: bound_shape.into(),
            rows,
            fitted_constant: 0.0,
            tolerance: 0.0,
            verdict: Verdict::Inconclusive,
            flags: Vec::new(),
            metrics: BTreeMap::new(),
        }
    }

    pub fn metric(&self, key: &str) -> Option<f64> {
        self.metrics.get(key).copied()
    }

    pub fn passed(&self) -> bool {
        self.verdict == Verdict::Pass
    }
}

/// Largest and smallest ratio over rows with a positive shape, and their
/// relative spread around the midpoint `(max - min) / (max + min)`.
pub fn ratio_spread(rows: &[ReportRow]) -> (f64, f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    for r in rows.iter().filter(|r| r.shape > 0.0 && r.ratio.is_finite()) {
        lo = lo.min(r.ratio);
        hi = hi.max(r.ratio);
    }
    if !lo.is_finite() {
        return (0.0, 0.0, 0.0);
    }
    let spread = if hi + lo > 0.0 { (hi - lo) / (hi + lo) } else { 0.0 };
    (lo, hi, spread)
}
