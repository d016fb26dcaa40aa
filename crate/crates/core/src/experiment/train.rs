use std::fs::File;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{create_dir, load_config, load_or_regenerate, output_dir, resolve, DatasetRef, RunOptions, SCHEMA_VERSION};
use crate::bounds::{bartlett_bound, main_bound, neyshabur_bound, rademacher_i1, rademacher_i2, rademacher_mc_lower, BoundReport};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::forge::LabeledSet;
use crate::io::{read_json, save_weights, write_json, LAYOUT_VERSION};
use crate::kernel::{conjugate_kernel_gram, kernel_margin, random_feature_margin, MarginCertificate};
use crate::network::{he_init, NetworkConfig, Weights};
use crate::training::{evaluate, gd_train, TrainingConfig, TrajectoryRecord};

/// Margin certificate recorded with a run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CertifyMode {
    #[default]
    None,
    /// The generator's ground-truth margin.
    Generator,
    RandomFeatureLp,
    ConjugateKernel,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub schema_version: u32,
    pub train_data: PathBuf,
    #[serde(default)]
    pub test_data: Option<PathBuf>,
    pub depth: usize,
    pub width: usize,
    pub seed: u64,
    pub step_size: f64,
    pub iterations: usize,
    #[serde(default = "one")]
    pub record_every: usize,
    #[serde(default)]
    pub snapshot_every: Option<usize>,
    #[serde(default)]
    pub certify: CertifyMode,
    /// Feature count for `random-feature-lp`; defaults to the teacher's.
    #[serde(default)]
    pub certify_features: Option<usize>,
    /// Feature seed for `random-feature-lp`; defaults to the generator seed.
    #[serde(default)]
    pub certify_seed: Option<u64>,
    #[serde(default = "yes")]
    pub bounds: bool,
    /// Monte-Carlo Rademacher draws at the best iterate; 0 skips the estimate.
    #[serde(default)]
    pub rademacher_draws: usize,
    /// Filled in manifests so a missing dataset can be regenerated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_ref: Option<DatasetRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_ref: Option<DatasetRef>,
}

impl TrainConfig {
    pub fn training(&self) -> TrainingConfig {
        TrainingConfig {
            step_size: self.step_size,
            iterations: self.iterations,
            record_every: self.record_every,
            snapshot_every: self.snapshot_every,
        }
    }

    fn resolved(mut self, base: &Path) -> Result<Self> {
        self.train_data = resolve(base, &self.train_data)?;
        if let Some(t) = &self.test_data {
            self.test_data = Some(resolve(base, t)?);
        }
        Ok(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterateMetrics {
    pub iteration: usize,
    pub loss: f64,
    pub surrogate_error: f64,
    pub train_error: f64,
    pub distances: Vec<f64>,
    pub max_distance: f64,
    pub test_error: Option<f64>,
    pub test_surrogate_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RademacherSummary {
    pub tau: f64,
    pub i1: f64,
    pub i2: f64,
    pub draws: usize,
    pub mc_lower: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightFiles {
    pub init: String,
    pub best: Option<String>,
    #[serde(rename = "final")]
    pub last: Option<String>,
    pub snapshots: Vec<(usize, String)>,
}

/// Contents of a training run's `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainManifest {
    pub schema_version: u32,
    pub command: String,
    pub layout_version: u32,
    pub config: TrainConfig,
    pub network: NetworkConfig,
    pub status: String,
    pub last_finite: Option<usize>,
    pub best_iteration: Option<usize>,
    pub best: Option<IterateMetrics>,
    #[serde(rename = "final")]
    pub last: Option<IterateMetrics>,
    pub certificate: Option<MarginCertificate>,
    pub bounds: Vec<BoundReport>,
    pub rademacher: Option<RademacherSummary>,
    pub weights: WeightFiles,
}

impl TrainManifest {
    pub fn read(run: &Path) -> Result<Self> {
        let path = run.join("manifest.json");
        if !path.exists() {
            return Err(Error::Input(format!("{} is not a run directory (no manifest.json)", run.display())));
        }
        let m: Self = read_json(&path)?;
        if m.command != "train" {
            return Err(Error::Input(format!("{} was not written by `train`", path.display())));
        }
        Ok(m)
    }

    pub fn train_set(&self) -> Result<LabeledSet> {
        load_or_regenerate(&self.config.train_data, self.config.train_ref.as_ref())
    }
}

fn metrics(
    iteration: usize,
    w: &Weights,
    w0: &Weights,
    train: &Dataset,
    test: Option<&Dataset>,
) -> Result<IterateMetrics> {
    let ev = evaluate(w, train)?;
    let distances = w.distances(w0);
    let test_ev = test.map(|t| evaluate(w, t)).transpose()?;
    Ok(IterateMetrics {
        iteration,
        loss: crate::training::empirical_loss(w, train)?,
        surrogate_error: ev.surrogate_error,
        train_error: ev.classification_error,
        max_distance: distances.iter().copied().fold(0.0, f64::max),
        distances,
        test_error: test_ev.map(|e| e.classification_error),
        test_surrogate_error: test_ev.map(|e| e.surrogate_error),
    })
}

fn certify(cfg: &TrainConfig, train: &LabeledSet) -> Result<Option<MarginCertificate>> {
    let spec = &train.provenance.spec;
    Ok(match cfg.certify {
        CertifyMode::None => None,
        CertifyMode::Generator => {
            let g = train.provenance.ground_truth_margin.ok_or_else(|| {
                Error::Config("certify: the training data records no ground-truth margin".into())
            })?;
            Some(MarginCertificate::ground_truth(g))
        }
        CertifyMode::RandomFeatureLp => {
            let n = cfg.certify_features.or(spec.features).unwrap_or(400);
            Some(random_feature_margin(&train.data, n, cfg.certify_seed.unwrap_or(spec.seed))?)
        }
        CertifyMode::ConjugateKernel => {
            let gram = conjugate_kernel_gram(&train.data, cfg.depth.saturating_sub(1))?;
            Some(kernel_margin(&gram, train.data.labels())?)
        }
    })
}

fn write_trajectory(out: &Path, t: &TrajectoryRecord) -> Result<()> {
    t.write_csv(File::create(out.join("trajectory.csv"))?)?;
    t.write_timing_csv(File::create(out.join("timing.csv"))?)
}

/// Runs one training job into `out` and returns its manifest.
pub(crate) fn run_train(cfg: &TrainConfig, out: &Path) -> Result<TrainManifest> {
    let train = load_or_regenerate(&cfg.train_data, cfg.train_ref.as_ref())?;
    let test = match &cfg.test_data {
        Some(p) => Some(load_or_regenerate(p, cfg.test_ref.as_ref())?),
        None => None,
    };
    let mut cfg = cfg.clone();
    cfg.train_ref = Some(DatasetRef::of(&cfg.train_data, &train));
    cfg.test_ref = match (&cfg.test_data, &test) {
        (Some(p), Some(t)) => Some(DatasetRef::of(p, t)),
        _ => None,
    };
    if cfg.depth == 0 {
        return Err(Error::Config("depth: must be at least 1".into()));
    }
    let network = NetworkConfig::uniform(train.data.dim(), cfg.depth, cfg.width, cfg.seed)?;
    let training = cfg.training();
    training.validate()?;
    create_dir(&out.join("weights"))?;

    let w0 = he_init(&network)?;
    save_weights(&w0, &out.join("weights/init.bin"))?;
    let mut manifest = TrainManifest {
        schema_version: SCHEMA_VERSION,
        command: "train".into(),
        layout_version: LAYOUT_VERSION,
        config: cfg.clone(),
        network,
        status: "ok".into(),
        last_finite: None,
        best_iteration: None,
        best: None,
        last: None,
        certificate: None,
        bounds: Vec::new(),
        rademacher: None,
        weights: WeightFiles { init: "weights/init.bin".into(), best: None, last: None, snapshots: Vec::new() },
    };

    let outcome = match gd_train(&w0, &train.data, &training) {
        Ok(o) => o,
        Err(Error::Diverged { last_finite, trajectory }) => {
            write_trajectory(out, &trajectory)?;
            manifest.status = "diverged".into();
            manifest.last_finite = Some(last_finite);
            write_json(&out.join("manifest.json"), &manifest)?;
            return Err(Error::Diverged { last_finite, trajectory });
        }
        Err(e) => return Err(e),
    };
    write_trajectory(out, &outcome.trajectory)?;
    save_weights(&outcome.best, &out.join("weights/best.bin"))?;
    save_weights(&outcome.final_weights, &out.join("weights/final.bin"))?;
    manifest.weights.best = Some("weights/best.bin".into());
    manifest.weights.last = Some("weights/final.bin".into());
    if !outcome.snapshots.is_empty() {
        create_dir(&out.join("snapshots"))?;
    }
    for (k, w) in &outcome.snapshots {
        let name = format!("snapshots/k{k:08}.bin");
        save_weights(w, &out.join(&name))?;
        manifest.weights.snapshots.push((*k, name));
    }

    let test_data = test.as_ref().map(|t| &t.data);
    let best = metrics(outcome.best_iteration, &outcome.best, &w0, &train.data, test_data)?;
    manifest.last = Some(metrics(cfg.iterations, &outcome.final_weights, &w0, &train.data, test_data)?);
    manifest.best_iteration = Some(outcome.best_iteration);
    manifest.certificate = certify(&cfg, &train)?;

    if cfg.bounds {
        let attach = |b: BoundReport| match best.test_error {
            Some(e) => b.with_test_error(e),
            None => b,
        };
        manifest.bounds = vec![
            attach(main_bound(&outcome.best, &w0, &train.data)?),
            attach(bartlett_bound(&outcome.best, &w0, &train.data)?),
            attach(neyshabur_bound(&outcome.best, &w0, &train.data)?),
        ];
        let tau = best.max_distance;
        manifest.rademacher = Some(RademacherSummary {
            tau,
            i1: rademacher_i1(&w0, tau),
            i2: rademacher_i2(&w0, &train.data, tau)?,
            draws: cfg.rademacher_draws,
            mc_lower: match cfg.rademacher_draws {
                0 => None,
                d => Some(rademacher_mc_lower(&w0, &train.data, tau, d)?),
            },
        });
    }
    manifest.best = Some(best);
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Trains per the config and writes the run directory.
pub fn cmd_train(config: &Path, opts: &RunOptions) -> Result<PathBuf> {
    let (cfg, base): (TrainConfig, _) = load_config(config, "train")?;
    let mut cfg = cfg.resolved(&base)?;
    if let Some(seed) = opts.seed_override {
        cfg.seed = seed;
    }
    let out = output_dir(opts, config);
    create_dir(&out)?;
    run_train(&cfg, &out)?;
    Ok(out)
}
