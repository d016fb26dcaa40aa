//! Measurement probes for the near-initialization estimates.
//!
//! Each probe evaluates a left-hand quantity and the claimed right-hand
//! functional form with its absolute constant set to 1, and reports the
//! ratio. Sweeps add log-log slopes against the swept variable.

mod gradient;
mod perturb;
mod scaling;
mod separability;

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::fmt17;
use crate::linalg::loglog_slope;

pub use gradient::{gmatrix_probe, grad_lower_probe, grad_upper_probe, init_output_probe};
pub use perturb::{perturb, DirectionMode, PerturbationSpec};
pub use scaling::{scaling_probe, scaling_probe_with, semismoothness_probe, semismoothness_sweep, ScalingOptions};
pub use separability::{hidden_separability_probe, max_min_margin, MarginSearch, SeparabilityOptions};

/// Header attached to every report.
pub const SAMPLED_EVIDENCE: &str = "sampled evidence: the estimates are claimed uniformly over the tau-neighborhood; \
     these measurements cover only the sampled weights and inputs";

/// Valid names for [`ProbeKind`].
pub const PROBE_NAMES: [&str; 7] = [
    "scaling",
    "semismoothness",
    "grad-upper",
    "grad-lower",
    "init-output",
    "hidden-separability",
    "gmatrix",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeKind {
    Scaling,
    Semismoothness,
    GradUpper,
    GradLower,
    InitOutput,
    HiddenSeparability,
    Gmatrix,
}

impl ProbeKind {
    pub const ALL: [ProbeKind; 7] = [
        ProbeKind::Scaling,
        ProbeKind::Semismoothness,
        ProbeKind::GradUpper,
        ProbeKind::GradLower,
        ProbeKind::InitOutput,
        ProbeKind::HiddenSeparability,
        ProbeKind::Gmatrix,
    ];

    pub fn name(self) -> &'static str {
        PROBE_NAMES[self as usize]
    }

    /// Parses a comma-separated list; `all` selects every probe.
    pub fn parse_list(list: &str) -> Result<Vec<ProbeKind>> {
        let mut out = Vec::new();
        for raw in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            if raw == "all" {
                out.extend(Self::ALL);
                continue;
            }
            match Self::ALL.iter().find(|k| k.name() == raw) {
                Some(k) => out.push(*k),
                None => {
                    return Err(Error::Config(format!(
                        "probes: unknown probe `{raw}`; valid names are all, {}",
                        PROBE_NAMES.join(", ")
                    )))
                }
            }
        }
        if out.is_empty() {
            return Err(Error::Config("probes: empty probe list".into()));
        }
        out.sort();
        out.dedup();
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub quantity: String,
    /// Measurement coordinates such as `m`, `L`, `n`, `tau`, `layer`, `sample`.
    pub inputs: BTreeMap<String, f64>,
    pub lhs: f64,
    /// Right-hand form with constant 1; absent where it is undefined.
    pub rhs: Option<f64>,
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub quantity: String,
    pub variable: String,
    pub slope: f64,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub name: String,
    pub value: f64,
    pub source: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub max_ratio: BTreeMap<String, f64>,
    pub max_lhs: BTreeMap<String, f64>,
    pub slopes: Vec<SlopeFit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub probe: String,
    pub notes: Vec<String>,
    pub records: Vec<ProbeRecord>,
    pub summary: ProbeSummary,
    pub thresholds: Vec<Threshold>,
    /// Solver and feasibility flags, e.g. non-convergence.
    pub flags: BTreeMap<String, bool>,
}

pub(crate) fn inputs(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

impl ProbeReport {
    pub fn new(probe: &str) -> Self {
        Self {
            probe: probe.into(),
            notes: vec![SAMPLED_EVIDENCE.into()],
            records: Vec::new(),
            summary: ProbeSummary::default(),
            thresholds: Vec::new(),
            flags: BTreeMap::new(),
        }
    }

    pub fn push(&mut self, quantity: &str, inputs: BTreeMap<String, f64>, lhs: f64, rhs: Option<f64>) {
        let ratio = rhs.and_then(|r| (r > 0.0 && r.is_finite()).then(|| lhs / r));
        self.records.push(ProbeRecord { quantity: quantity.into(), inputs, lhs, rhs, ratio });
    }

    pub fn records_for<'a>(&'a self, quantity: &'a str) -> impl Iterator<Item = &'a ProbeRecord> + 'a {
        self.records.iter().filter(move |r| r.quantity == quantity)
    }

    pub fn max_lhs(&self, quantity: &str) -> Option<f64> {
        self.records_for(quantity).map(|r| r.lhs).reduce(f64::max)
    }

    pub fn max_ratio(&self, quantity: &str) -> Option<f64> {
        self.records_for(quantity).filter_map(|r| r.ratio).reduce(f64::max)
    }

    pub fn slope(&self, quantity: &str) -> Option<f64> {
        self.summary.slopes.iter().find(|s| s.quantity == quantity).map(|s| s.slope)
    }

    /// Records a slope fit when at least three positive points are available.
    pub fn fit_slope(&mut self, quantity: &str, variable: &str, xs: &[f64], ys: &[f64]) {
        let pts: Vec<(f64, f64)> = xs
            .iter()
            .zip(ys)
            .filter(|(x, y)| **x > 0.0 && **y > 0.0)
            .map(|(x, y)| (*x, *y))
            .collect();
        if pts.len() < 3 {
            return;
        }
        let (px, py): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
        if let Some(slope) = loglog_slope(&px, &py) {
            self.summary.slopes.push(SlopeFit {
                quantity: quantity.into(),
                variable: variable.into(),
                slope,
                points: px.len(),
            });
        }
    }

    /// Fills the per-quantity maxima.
    pub fn finish(mut self) -> Self {
        let mut max_ratio = BTreeMap::new();
        let mut max_lhs = BTreeMap::new();
        for r in &self.records {
            let e = max_lhs.entry(r.quantity.clone()).or_insert(f64::NEG_INFINITY);
            *e = f64::max(*e, r.lhs);
            if let Some(q) = r.ratio {
                let e = max_ratio.entry(r.quantity.clone()).or_insert(f64::NEG_INFINITY);
                *e = f64::max(*e, q);
            }
        }
        self.summary.max_ratio = max_ratio;
        self.summary.max_lhs = max_lhs;
        self
    }

    /// Summary CSV: one row per record, then one row per slope fit.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "probe,quantity,inputs,lhs,rhs,ratio,slope")?;
        let opt = |v: Option<f64>| v.map(fmt17).unwrap_or_default();
        for r in &self.records {
            let coords: Vec<String> = r.inputs.iter().map(|(k, v)| format!("{k}={}", fmt17(*v))).collect();
            writeln!(
                out,
                "{},{},{},{},{},{},",
                self.probe,
                r.quantity,
                coords.join(";"),
                fmt17(r.lhs),
                opt(r.rhs),
                opt(r.ratio)
            )?;
        }
        for s in &self.summary.slopes {
            writeln!(out, "{},{},{},,,,{}", self.probe, s.quantity, s.variable, fmt17(s.slope))?;
        }
        Ok(())
    }
}
