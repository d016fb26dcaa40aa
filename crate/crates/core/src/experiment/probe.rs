use std::fs::File;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::train::TrainManifest;
use super::{create_dir, load_config, resolve, RunOptions, SCHEMA_VERSION};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::io::{load_weights, write_json};
use crate::linalg::SpectralOptions;
use crate::network::{forward_batch, Weights};
use crate::probes::{
    gmatrix_probe, grad_lower_probe, grad_upper_probe, hidden_separability_probe, init_output_probe,
    scaling_probe_with, semismoothness_sweep, DirectionMode, PerturbationSpec, ProbeKind, ProbeReport,
    ScalingOptions, SeparabilityOptions,
};
use crate::training::loss_derivative;

/// Which stored weights the non-initialization probes evaluate.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IterateChoice {
    Init,
    #[default]
    Best,
    Final,
}

fn default_taus() -> Vec<f64> {
    vec![1e-3, 3e-3, 1e-2, 3e-2, 1e-1]
}

fn gaussian() -> DirectionMode {
    DirectionMode::Gaussian
}

fn four() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub schema_version: u32,
    /// Run directory; the positional argument takes precedence.
    #[serde(default)]
    pub run: Option<PathBuf>,
    /// Comma-separated probe names or `all`; `--probes` takes precedence.
    #[serde(default)]
    pub probes: Option<String>,
    #[serde(default = "default_taus")]
    pub taus: Vec<f64>,
    #[serde(default = "gaussian")]
    pub direction: DirectionMode,
    #[serde(default)]
    pub iterate: IterateChoice,
    /// Margin for grad-lower, hidden-separability and gmatrix; defaults to
    /// the run's certificate, then the generator's ground truth.
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default = "four")]
    pub operator_norm_samples: usize,
    /// Probe only the first samples of the training set.
    #[serde(default)]
    pub max_samples: Option<usize>,
    #[serde(default)]
    pub separability_iterations: Option<usize>,
    #[serde(default)]
    pub separability_restarts: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            run: None,
            probes: None,
            taus: default_taus(),
            direction: DirectionMode::Gaussian,
            iterate: IterateChoice::Best,
            gamma: None,
            operator_norm_samples: 4,
            max_samples: None,
            separability_iterations: None,
            separability_restarts: None,
            seed: 0,
        }
    }
}

#[derive(Serialize)]
struct ProbeManifest<'a> {
    schema_version: u32,
    command: &'static str,
    config: &'a ProbeConfig,
    iteration: usize,
    reports: Vec<String>,
}

struct Context<'a> {
    cfg: &'a ProbeConfig,
    manifest: &'a TrainManifest,
    w0: Weights,
    w: Weights,
    data: Dataset,
}

impl Context<'_> {
    fn gamma(&self) -> Result<f64> {
        let certified = self.manifest.certificate.as_ref().map(|c| c.gamma);
        let truth = self.manifest.config.train_ref.as_ref().and_then(|r| r.provenance.ground_truth_margin);
        [self.cfg.gamma, certified, truth]
            .into_iter()
            .flatten()
            .find(|g| *g > 0.0)
            .ok_or_else(|| {
                Error::Input("gamma: no positive margin available; set gamma in the probe config or certify the run".into())
            })
    }

    fn run(&self, kind: ProbeKind) -> Result<ProbeReport> {
        let cfg = self.cfg;
        let template = PerturbationSpec { tau: 0.0, mode: cfg.direction, layers: None, direction: 0 };
        match kind {
            ProbeKind::Scaling => {
                let specs: Vec<_> = cfg.taus.iter().map(|&tau| PerturbationSpec { tau, ..template.clone() }).collect();
                let opts = ScalingOptions {
                    operator_norm_samples: cfg.operator_norm_samples,
                    spectral: SpectralOptions::default(),
                };
                scaling_probe_with(&self.w0, &specs, &self.data, opts)
            }
            ProbeKind::Semismoothness => semismoothness_sweep(&self.w0, &self.data, &cfg.taus, &template),
            ProbeKind::GradUpper => grad_upper_probe(&self.w, &self.data),
            ProbeKind::GradLower => grad_lower_probe(&self.w, &self.w0, &self.data, self.gamma()?),
            ProbeKind::InitOutput => init_output_probe(&self.w0, &self.data),
            ProbeKind::HiddenSeparability => {
                let mut opts = SeparabilityOptions { seed: cfg.seed, ..Default::default() };
                if let Some(i) = cfg.separability_iterations {
                    opts.iterations = i;
                }
                if let Some(r) = cfg.separability_restarts {
                    opts.restarts = r;
                }
                hidden_separability_probe(&self.w0, &self.data, self.gamma()?, opts)
            }
            ProbeKind::Gmatrix => {
                let out = forward_batch(&self.w, self.data.inputs())?.outputs;
                let a: Vec<f64> = (0..self.data.len())
                    .map(|i| -loss_derivative(self.data.label(i) * out[i]))
                    .collect();
                gmatrix_probe(&self.w0, &self.data, &a, self.gamma()?)
            }
        }
    }
}

/// Runs the requested probes against a training run. Reports go to
/// `--out`, or `<run>/probes` by default.
pub fn cmd_probe(run: Option<&Path>, config: Option<&Path>, probes: Option<&str>, opts: &RunOptions) -> Result<PathBuf> {
    let (mut cfg, base) = match config {
        Some(p) => load_config::<ProbeConfig>(p, "probe")?,
        None => (ProbeConfig::default(), PathBuf::new()),
    };
    let run = match (run, &cfg.run) {
        (Some(r), _) => std::path::absolute(r)?,
        (None, Some(r)) => resolve(&base, r)?,
        (None, None) => return Err(Error::Config("run: no run directory given".into())),
    };
    cfg.run = Some(run.clone());
    let list = probes.map(str::to_string).or_else(|| cfg.probes.clone()).unwrap_or_else(|| "all".into());
    let kinds = ProbeKind::parse_list(&list)?;
    cfg.probes = Some(list);
    if let Some(seed) = opts.seed_override {
        cfg.seed = seed;
    }
    if cfg.taus.iter().any(|t| !(*t >= 0.0) || !t.is_finite()) {
        return Err(Error::Config("taus: radii must be finite and nonnegative".into()));
    }

    let manifest = TrainManifest::read(&run)?;
    let w0 = load_weights(&run.join(&manifest.weights.init))?;
    let (iteration, file) = match cfg.iterate {
        IterateChoice::Init => (0, Some(&manifest.weights.init)),
        IterateChoice::Best => (manifest.best_iteration.unwrap_or(0), manifest.weights.best.as_ref()),
        IterateChoice::Final => (manifest.config.iterations, manifest.weights.last.as_ref()),
    };
    let file = file.ok_or_else(|| Error::Input(format!("run {} has no stored {:?} weights", run.display(), cfg.iterate)))?;
    let w = load_weights(&run.join(file))?;
    let mut data = manifest.train_set()?.data;
    if let Some(k) = cfg.max_samples {
        if k == 0 {
            return Err(Error::Config("max_samples: must be at least 1".into()));
        }
        let idx: Vec<usize> = (0..k.min(data.len())).collect();
        data = data.subset(&idx);
    }

    let out = opts.out.clone().unwrap_or_else(|| run.join("probes"));
    create_dir(&out)?;
    let ctx = Context { cfg: &cfg, manifest: &manifest, w0, w, data };
    let mut names = Vec::new();
    for kind in kinds {
        let mut report = ctx.run(kind)?;
        report.notes.push(format!("weights: {:?} iterate, k = {iteration}", cfg.iterate).to_lowercase());
        write_json(&out.join(format!("{}.json", kind.name())), &report)?;
        report.write_csv(File::create(out.join(format!("{}.csv", kind.name())))?)?;
        names.push(kind.name().to_string());
    }
    let m = ProbeManifest { schema_version: SCHEMA_VERSION, command: "probe", config: &cfg, iteration, reports: names };
    write_json(&out.join("manifest.json"), &m)?;
    Ok(out)
}
