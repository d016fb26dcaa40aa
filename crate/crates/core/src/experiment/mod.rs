//! Config-driven commands behind the `overparam` binary.
//!
//! Every command reads one config file (TOML, `schema_version = 1`) or the
//! `manifest.json` of an earlier run of the same command, and writes a
//! manifest that embeds the fully resolved config.

mod gen;
mod probe;
mod sweep;
mod train;

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forge::{self, LabeledSet};
use crate::io::hex64;

pub use gen::{cmd_gen, GenConfig};
pub use probe::{cmd_probe, IterateChoice, ProbeConfig};
pub use sweep::{cmd_sweep, fit_sweep_slopes, SweepConfig, SweepRow};
pub use train::{cmd_train, CertifyMode, TrainConfig};

pub const SCHEMA_VERSION: u32 = 1;
/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "OVERPARAM_OUT";

/// Options shared by every command.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub seed_override: Option<u64>,
}

/// Output directory: `--out`, else `$OVERPARAM_OUT/<config stem>`, else
/// `runs/<config stem>`.
pub fn output_dir(opts: &RunOptions, config: &Path) -> PathBuf {
    if let Some(out) = &opts.out {
        return out.clone();
    }
    let stem = config.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
    let root = std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
    root.join(stem)
}

#[derive(Deserialize)]
struct ManifestHead {
    command: String,
    config: serde_json::Value,
}

/// Reads a TOML config, or the embedded config of a `.json` manifest.
/// Relative paths inside a TOML config are resolved against its directory
/// by the caller through the returned base.
pub fn load_config<T: DeserializeOwned>(path: &Path, command: &str) -> Result<(T, PathBuf)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    if path.extension().is_some_and(|e| e == "json") {
        let head: ManifestHead = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: not a run manifest: {e}", path.display())))?;
        if head.command != command {
            return Err(Error::Config(format!(
                "{}: manifest was written by `{}`, not `{command}`",
                path.display(),
                head.command
            )));
        }
        let cfg = serde_json::from_value(head.config).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        return Ok((cfg, base));
    }
    let value: toml::Table = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    match value.get("schema_version").and_then(toml::Value::as_integer) {
        Some(v) if v == SCHEMA_VERSION as i64 => {}
        Some(v) => return Err(Error::Config(format!("schema_version: unsupported version {v}"))),
        None => return Err(Error::Config("schema_version: missing (expected 1)".into())),
    }
    let cfg = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok((cfg, base))
}

/// Absolute form of `p`, taken relative to `base` when relative.
pub(crate) fn resolve(base: &Path, p: &Path) -> Result<PathBuf> {
    let joined = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    Ok(std::path::absolute(joined)?)
}

/// A dataset reference recorded in manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRef {
    pub path: PathBuf,
    pub hash: String,
    pub n: usize,
    pub d: usize,
    pub provenance: forge::Provenance,
}

impl DatasetRef {
    pub fn of(path: &Path, set: &LabeledSet) -> Self {
        Self {
            path: path.to_path_buf(),
            hash: hex64(set.hash()),
            n: set.data.len(),
            d: set.data.dim(),
            provenance: set.provenance.clone(),
        }
    }
}

/// Loads a dataset file. When the file is gone, regenerates it from the
/// recorded provenance and checks the hash.
pub fn load_or_regenerate(path: &Path, expected: Option<&DatasetRef>) -> Result<LabeledSet> {
    if path.exists() {
        let set = forge::load_dataset(path)?;
        if let Some(r) = expected {
            if hex64(set.hash()) != r.hash {
                return Err(Error::Input(format!(
                    "{}: dataset hash {} differs from recorded {}",
                    path.display(),
                    hex64(set.hash()),
                    r.hash
                )));
            }
        }
        return Ok(set);
    }
    let Some(r) = expected else {
        return Err(Error::Input(format!("dataset {} does not exist", path.display())));
    };
    let full = forge::generate(&r.provenance.spec)?;
    let set = match &r.provenance.split {
        None => full,
        Some(s) => {
            let (train, test) = forge::split(&full, s.fraction, s.seed)?;
            if s.part == "train" {
                train
            } else {
                test
            }
        }
    };
    if hex64(set.hash()) != r.hash {
        return Err(Error::Input(format!(
            "dataset {} is missing and regeneration gave hash {} instead of {}",
            path.display(),
            hex64(set.hash()),
            r.hash
        )));
    }
    Ok(set)
}

pub(crate) fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}
