#![allow(dead_code)]

use std::path::PathBuf;

use ndarray::Array2;
use overparam::forge::{generate, split, GeneratorKind, GeneratorSpec, LabeledSet};
use overparam::network::{he_init, NetworkConfig, Weights};
use overparam::{Dataset, TrainingConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

#[derive(Debug, Deserialize)]
pub struct Calibration {
    pub version: u32,
    pub data: DataFixture,
    pub train: TrainFixture,
    pub measured: toml::Table,
    pub bands: Bands,
}

#[derive(Debug, Deserialize)]
pub struct DataFixture {
    pub d: usize,
    pub features: usize,
    pub gamma0: f64,
    pub seed: u64,
    pub n_total: usize,
    pub n_train: usize,
    pub split_seed: u64,
}

#[derive(Debug, Deserialize)]
pub struct TrainFixture {
    pub depth: usize,
    pub width: usize,
    pub network_seed: u64,
    pub step_scale: f64,
    pub iterations: usize,
    pub certify_features: usize,
    pub certify_seed: u64,
}

#[derive(Debug, Deserialize)]
pub struct Bands {
    pub flip_slope: [f64; 2],
    pub semismoothness_slope_min: f64,
    pub grad_ratio_spread_max: f64,
    pub b_hat_floor_factor: f64,
    pub rademacher_b_hat_ratio_max: f64,
    pub matched_surrogate_tolerance: f64,
    pub active_fraction: [f64; 2],
    pub hidden_margin_factor: f64,
    pub width_slope_difference: [f64; 2],
    pub random_feature_stability: f64,
    pub init_output_max: f64,
    pub gmatrix_ratio_min: f64,
}

impl Calibration {
    pub fn measured(&self, key: &str) -> f64 {
        self.measured[key].as_float().unwrap_or_else(|| panic!("measured.{key} is not a float"))
    }

    pub fn spec(&self) -> GeneratorSpec {
        GeneratorSpec {
            kind: GeneratorKind::RandomReluTeacher,
            n: self.data.n_total,
            d: self.data.d,
            gamma0: Some(self.data.gamma0),
            phi: None,
            features: Some(self.data.features),
            seed: self.data.seed,
        }
    }

    /// Train and test halves of the reference dataset.
    pub fn datasets(&self) -> (LabeledSet, LabeledSet) {
        let full = generate(&self.spec()).expect("fixture generates");
        let fraction = self.data.n_train as f64 / self.data.n_total as f64;
        split(&full, fraction, self.data.split_seed).expect("fixture splits")
    }

    pub fn network(&self, depth: usize, width: usize) -> Weights {
        he_init(&NetworkConfig::uniform(self.data.d, depth, width, self.train.network_seed).unwrap()).unwrap()
    }

    pub fn training(&self, width: usize) -> TrainingConfig {
        TrainingConfig {
            step_size: self.train.step_scale / width as f64,
            iterations: self.train.iterations,
            record_every: 1,
            snapshot_every: None,
        }
    }
}

pub fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn calibration() -> Calibration {
    let text = std::fs::read_to_string(fixture_dir().join("calibration.toml")).expect("calibration fixture");
    toml::from_str(&text).expect("calibration fixture parses")
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut impl Rng) -> f64 {
    rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng)
}

pub fn unit_rows(rng: &mut impl Rng, n: usize, d: usize) -> Array2<f64> {
    let mut x = Array2::from_shape_simple_fn((n, d), || gaussian(rng));
    for mut row in x.rows_mut() {
        let norm = row.dot(&row).sqrt();
        row /= norm;
    }
    x
}

pub fn random_dataset(rng: &mut impl Rng, n: usize, d: usize) -> Dataset {
    let x = unit_rows(rng, n, d);
    let labels = (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
    Dataset::new(x, labels).unwrap()
}

/// Weights with i.i.d. Gaussian entries of the given scale and the
/// standard output vector.
pub fn random_weights(rng: &mut impl Rng, d: usize, widths: &[usize], scale: f64) -> Weights {
    let cfg = NetworkConfig::new(d, widths.to_vec(), 0).unwrap();
    let mut dims = vec![d];
    dims.extend_from_slice(widths);
    let layers = dims
        .windows(2)
        .map(|w| Array2::from_shape_simple_fn((w[0], w[1]), || scale * gaussian(rng)))
        .collect();
    Weights::from_parts(cfg, layers, overparam::network::output_vector(*widths.last().unwrap())).unwrap()
}

pub fn assert_close(a: f64, b: f64, rel: f64) {
    let scale = a.abs().max(b.abs()).max(f64::MIN_POSITIVE);
    assert!((a - b).abs() <= rel * scale, "{a} vs {b} differ beyond relative {rel}");
}
