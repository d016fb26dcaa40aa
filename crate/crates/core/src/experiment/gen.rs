use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{create_dir, load_config, output_dir, DatasetRef, RunOptions, SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::forge::{self, GeneratorKind, GeneratorSpec};
use crate::io::write_json;

/// `gen` config: a generator spec plus an optional train/test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub schema_version: u32,
    /// `linear-margin`, `random-relu-teacher` or `separated-arbitrary-labels`.
    pub kind: String,
    pub n: usize,
    pub d: usize,
    #[serde(default)]
    pub gamma0: Option<f64>,
    #[serde(default)]
    pub phi: Option<f64>,
    #[serde(default)]
    pub features: Option<usize>,
    pub seed: u64,
    /// Share of samples in `train.csv`; the rest go to `test.csv`.
    #[serde(default)]
    pub train_fraction: Option<f64>,
    /// Defaults to `seed`.
    #[serde(default)]
    pub split_seed: Option<u64>,
}

impl GenConfig {
    pub fn spec(&self) -> Result<GeneratorSpec> {
        let kind: GeneratorKind = self.kind.parse()?;
        let spec = GeneratorSpec {
            kind,
            n: self.n,
            d: self.d,
            gamma0: self.gamma0,
            phi: self.phi,
            features: self.features,
            seed: self.seed,
        };
        spec.validate()?;
        if let Some(f) = self.train_fraction {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::Config(format!("train_fraction: must lie in (0, 1), got {f}")));
            }
        }
        Ok(spec)
    }
}

#[derive(Serialize)]
struct GenManifest<'a> {
    schema_version: u32,
    command: &'static str,
    config: &'a GenConfig,
    datasets: BTreeMap<&'static str, DatasetRef>,
}

/// Writes `dataset.csv` (and `train.csv`/`test.csv` when splitting) plus
/// `manifest.json`. Returns the output directory.
pub fn cmd_gen(config: &Path, opts: &RunOptions) -> Result<PathBuf> {
    let (mut cfg, _): (GenConfig, _) = load_config(config, "gen")?;
    if let Some(seed) = opts.seed_override {
        cfg.seed = seed;
    }
    let spec = cfg.spec()?;
    let out = output_dir(opts, config);
    create_dir(&out)?;
    let full = forge::generate(&spec)?;
    let mut datasets = BTreeMap::new();
    let mut save = |name: &'static str, set: &forge::LabeledSet| -> Result<()> {
        let file = format!("{name}.csv");
        forge::save_dataset(set, &out.join(&file))?;
        datasets.insert(name, DatasetRef::of(Path::new(&file), set));
        Ok(())
    };
    save("dataset", &full)?;
    if let Some(fraction) = cfg.train_fraction {
        let (train, test) = forge::split(&full, fraction, cfg.split_seed.unwrap_or(cfg.seed))?;
        save("train", &train)?;
        save("test", &test)?;
    }
    let manifest = GenManifest { schema_version: SCHEMA_VERSION, command: "gen", config: &cfg, datasets };
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(out)
}
