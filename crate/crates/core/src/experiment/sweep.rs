use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::train::{run_train, CertifyMode, TrainConfig, TrainManifest};
use super::{create_dir, load_config, load_or_regenerate, output_dir, resolve, DatasetRef, RunOptions, SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::io::{fmt17, write_json};
use crate::linalg::loglog_slope;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepScaling {
    /// Every cell uses the listed step size.
    #[default]
    Fixed,
    /// Cell step size is the listed value divided by the width.
    InverseWidth,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

/// Grid over depth, width, seed and step size; every cell is a full
/// training run with bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub schema_version: u32,
    pub train_data: PathBuf,
    #[serde(default)]
    pub test_data: Option<PathBuf>,
    pub depths: Vec<usize>,
    pub widths: Vec<usize>,
    pub seeds: Vec<u64>,
    pub step_sizes: Vec<f64>,
    #[serde(default)]
    pub step_scaling: StepScaling,
    pub iterations: usize,
    #[serde(default = "one")]
    pub record_every: usize,
    #[serde(default)]
    pub certify: CertifyMode,
    #[serde(default)]
    pub certify_features: Option<usize>,
    #[serde(default)]
    pub certify_seed: Option<u64>,
    #[serde(default = "yes")]
    pub bounds: bool,
    #[serde(default)]
    pub rademacher_draws: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_ref: Option<DatasetRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_ref: Option<DatasetRef>,
}

#[derive(Debug, Clone)]
struct Cell {
    key: String,
    base_step: f64,
    cfg: TrainConfig,
}

impl SweepConfig {
    fn cells(&self) -> Vec<Cell> {
        let mut cells = Vec::new();
        for &depth in &self.depths {
            for &width in &self.widths {
                for &seed in &self.seeds {
                    for (e, &base_step) in self.step_sizes.iter().enumerate() {
                        let step_size = match self.step_scaling {
                            StepScaling::Fixed => base_step,
                            StepScaling::InverseWidth => base_step / width as f64,
                        };
                        cells.push(Cell {
                            key: format!("L{depth:02}_m{width:06}_s{seed}_e{e:02}"),
                            base_step,
                            cfg: TrainConfig {
                                schema_version: SCHEMA_VERSION,
                                train_data: self.train_data.clone(),
                                test_data: self.test_data.clone(),
                                depth,
                                width,
                                seed,
                                step_size,
                                iterations: self.iterations,
                                record_every: self.record_every,
                                snapshot_every: None,
                                certify: self.certify,
                                certify_features: self.certify_features,
                                certify_seed: self.certify_seed,
                                bounds: self.bounds,
                                rademacher_draws: self.rademacher_draws,
                                train_ref: self.train_ref.clone(),
                                test_ref: self.test_ref.clone(),
                            },
                        });
                    }
                }
            }
        }
        cells
    }
}

/// One line of `sweep.csv`. Metrics of failed cells are `NaN` and written
/// as empty fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub key: String,
    pub depth: usize,
    pub width: usize,
    pub seed: u64,
    pub step_size: f64,
    pub effective_step_size: f64,
    pub status: String,
    pub n: usize,
    pub best_iteration: Option<usize>,
    pub tau: f64,
    pub sqrt_m_tau: f64,
    pub surrogate_error: f64,
    pub train_error: f64,
    pub test_error: f64,
    pub main_surrogate: f64,
    pub main_sample: f64,
    pub main_linearization: f64,
    pub main_total: f64,
    pub bartlett_total: f64,
    pub neyshabur_total: f64,
    pub i2: f64,
    pub mc_lower: f64,
    pub gamma: f64,
    pub message: String,
}

const SWEEP_HEADER: &str = "key,L,m,seed,step_size,effective_step_size,status,n,k_star,tau,sqrt_m_tau,\
surrogate_error,train_error,test_error,main_surrogate,main_sample,main_linearization,main_total,\
bartlett_total,neyshabur_total,i2,mc_lower,gamma,message";

impl SweepRow {
    fn failed(cell: &Cell, n: usize, status: &str, message: String) -> Self {
        let nan = f64::NAN;
        Self {
            key: cell.key.clone(),
            depth: cell.cfg.depth,
            width: cell.cfg.width,
            seed: cell.cfg.seed,
            step_size: cell.base_step,
            effective_step_size: cell.cfg.step_size,
            status: status.into(),
            n,
            best_iteration: None,
            tau: nan,
            sqrt_m_tau: nan,
            surrogate_error: nan,
            train_error: nan,
            test_error: nan,
            main_surrogate: nan,
            main_sample: nan,
            main_linearization: nan,
            main_total: nan,
            bartlett_total: nan,
            neyshabur_total: nan,
            i2: nan,
            mc_lower: nan,
            gamma: nan,
            message,
        }
    }

    fn from_manifest(cell: &Cell, n: usize, m: &TrainManifest) -> Self {
        let mut row = Self::failed(cell, n, "ok", String::new());
        let Some(best) = &m.best else { return row };
        let bound = |name: &str| m.bounds.iter().find(|b| b.bound_name == name);
        row.best_iteration = m.best_iteration;
        row.tau = best.max_distance;
        row.sqrt_m_tau = (cell.cfg.width as f64).sqrt() * best.max_distance;
        row.surrogate_error = best.surrogate_error;
        row.train_error = best.train_error;
        row.test_error = best.test_error.unwrap_or(f64::NAN);
        if let Some(b) = bound("main") {
            row.main_surrogate = b.term("surrogate").unwrap_or(f64::NAN);
            row.main_sample = b.term("sample").unwrap_or(f64::NAN);
            row.main_linearization = b.term("linearization").unwrap_or(f64::NAN);
            row.main_total = b.total;
        }
        row.bartlett_total = bound("bartlett").map_or(f64::NAN, |b| b.total);
        row.neyshabur_total = bound("neyshabur").map_or(f64::NAN, |b| b.total);
        if let Some(r) = &m.rademacher {
            row.i2 = r.i2;
            row.mc_lower = r.mc_lower.unwrap_or(f64::NAN);
        }
        row.gamma = m.certificate.as_ref().map_or(f64::NAN, |c| c.gamma);
        row
    }

    fn csv_line(&self) -> String {
        let f = |x: f64| if x.is_finite() { fmt17(x) } else { String::new() };
        let fields = [
            self.key.clone(),
            self.depth.to_string(),
            self.width.to_string(),
            self.seed.to_string(),
            f(self.step_size),
            f(self.effective_step_size),
            self.status.clone(),
            self.n.to_string(),
            self.best_iteration.map(|k| k.to_string()).unwrap_or_default(),
            f(self.tau),
            f(self.sqrt_m_tau),
            f(self.surrogate_error),
            f(self.train_error),
            f(self.test_error),
            f(self.main_surrogate),
            f(self.main_sample),
            f(self.main_linearization),
            f(self.main_total),
            f(self.bartlett_total),
            f(self.neyshabur_total),
            f(self.i2),
            f(self.mc_lower),
            f(self.gamma),
            self.message.replace([',', '\n'], ";"),
        ];
        fields.join(",")
    }
}

/// Log-log slope of one sweep metric against width within a group of
/// cells sharing depth, seed and step size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSlope {
    pub depth: usize,
    pub seed: u64,
    pub step_size: f64,
    pub quantity: String,
    pub variable: String,
    pub slope: f64,
    pub points: usize,
}

/// Slopes of `tau`, `sqrt_m_tau`, the main-bound gap and the two spectral
/// bounds against `m`, for every group with at least two successful widths.
pub fn fit_sweep_slopes(rows: &[SweepRow]) -> Vec<SweepSlope> {
    type Metric = fn(&SweepRow) -> f64;
    let metrics: [(&str, Metric); 6] = [
        ("tau", |r| r.tau),
        ("sqrt_m_tau", |r| r.sqrt_m_tau),
        ("surrogate_error", |r| r.surrogate_error),
        ("main_gap", |r| r.main_sample + r.main_linearization),
        ("bartlett_total", |r| r.bartlett_total),
        ("neyshabur_total", |r| r.neyshabur_total),
    ];
    let mut groups: BTreeMap<(usize, u64, u64), Vec<&SweepRow>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.status == "ok") {
        groups.entry((r.depth, r.seed, r.step_size.to_bits())).or_default().push(r);
    }
    let mut out = Vec::new();
    for ((depth, seed, step_bits), group) in groups {
        for (name, metric) in metrics {
            let (xs, ys): (Vec<f64>, Vec<f64>) = group
                .iter()
                .map(|r| (r.width as f64, metric(r)))
                .filter(|(_, y)| y.is_finite() && *y > 0.0)
                .unzip();
            if let Some(slope) = loglog_slope(&xs, &ys) {
                out.push(SweepSlope {
                    depth,
                    seed,
                    step_size: f64::from_bits(step_bits),
                    quantity: name.into(),
                    variable: "m".into(),
                    slope,
                    points: xs.len(),
                });
            }
        }
    }
    out
}

#[derive(Serialize)]
struct SweepManifest<'a> {
    schema_version: u32,
    command: &'static str,
    config: &'a SweepConfig,
    cells: Vec<(String, String)>,
    slopes: &'a [SweepSlope],
}

/// Runs every grid cell into `cells/<key>/` and writes `sweep.csv`,
/// `slopes.csv` and `manifest.json`. Failed cells are recorded and skipped.
pub fn cmd_sweep(config: &Path, opts: &RunOptions) -> Result<PathBuf> {
    let (mut cfg, base): (SweepConfig, _) = load_config(config, "sweep")?;
    cfg.train_data = resolve(&base, &cfg.train_data)?;
    if let Some(t) = &cfg.test_data {
        cfg.test_data = Some(resolve(&base, t)?);
    }
    if let Some(seed) = opts.seed_override {
        cfg.seeds = vec![seed];
    }
    if cfg.depths.is_empty() || cfg.widths.is_empty() || cfg.seeds.is_empty() || cfg.step_sizes.is_empty() {
        return Err(Error::Config("sweep grid is empty: depths, widths, seeds and step_sizes need values".into()));
    }
    let train = load_or_regenerate(&cfg.train_data, cfg.train_ref.as_ref())?;
    cfg.train_ref = Some(DatasetRef::of(&cfg.train_data, &train));
    if let Some(t) = &cfg.test_data {
        let test = load_or_regenerate(t, cfg.test_ref.as_ref())?;
        cfg.test_ref = Some(DatasetRef::of(t, &test));
    }
    let n = train.data.len();
    let out = output_dir(opts, config);
    create_dir(&out.join("cells"))?;

    let cells = cfg.cells();
    let rows: Vec<SweepRow> = cells
        .par_iter()
        .map(|cell| {
            let dir = out.join("cells").join(&cell.key);
            let result = create_dir(&dir).and_then(|_| run_train(&cell.cfg, &dir));
            match result {
                Ok(m) => SweepRow::from_manifest(cell, n, &m),
                Err(e) => {
                    let status = match e {
                        Error::Diverged { .. } => "diverged",
                        Error::Infeasible(_) => "infeasible",
                        _ => "error",
                    };
                    SweepRow::failed(cell, n, status, e.to_string())
                }
            }
        })
        .collect();

    let mut csv = File::create(out.join("sweep.csv"))?;
    writeln!(csv, "{SWEEP_HEADER}")?;
    for r in &rows {
        writeln!(csv, "{}", r.csv_line())?;
    }
    let slopes = fit_sweep_slopes(&rows);
    let mut sc = File::create(out.join("slopes.csv"))?;
    writeln!(sc, "L,seed,step_size,quantity,variable,slope,points")?;
    for s in &slopes {
        writeln!(sc, "{},{},{},{},{},{},{}", s.depth, s.seed, fmt17(s.step_size), s.quantity, s.variable, fmt17(s.slope), s.points)?;
    }
    let manifest = SweepManifest {
        schema_version: SCHEMA_VERSION,
        command: "sweep",
        config: &cfg,
        cells: rows.iter().map(|r| (r.key.clone(), r.status.clone())).collect(),
        slopes: &slopes,
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(out)
}
