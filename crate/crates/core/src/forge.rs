//! Synthetic datasets with ground-truth margins, splitting, and the dataset
//! file format.
//!
//! A dataset file holds one line of JSON provenance followed by one CSV row
//! per sample: the label (`1` or `-1`) and the coordinates, each with 17
//! significant digits.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::io::{fmt17, fnv1a, hex64, to_json_line};
use crate::kernel::{relu_feature_directions, relu_features};
use crate::rng::{self, Domain};

/// Candidates drawn per parallel chunk.
const CHUNK: usize = 4096;

/// Rejection sampling gives up below this acceptance rate.
pub const MIN_ACCEPTANCE: f64 = 1e-3;

/// Candidates inspected before a low acceptance rate counts as sustained.
const ACCEPTANCE_WINDOW: usize = 100_000;

/// Attempts allowed to the greedy packing.
pub const MAX_PACKING_ATTEMPTS: usize = 1_000_000;

/// Monte Carlo samples used to set the default teacher margin.
pub const QUANTILE_SAMPLES: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorKind {
    LinearMargin,
    RandomReluTeacher,
    #[serde(rename = "separated-arbitrary-labels", alias = "separated-arbitrary")]
    SeparatedArbitrary,
}

impl std::str::FromStr for GeneratorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear-margin" => Ok(Self::LinearMargin),
            "random-relu-teacher" => Ok(Self::RandomReluTeacher),
            "separated-arbitrary-labels" | "separated-arbitrary" => Ok(Self::SeparatedArbitrary),
            other => Err(Error::Config(format!(
                "kind: unknown generator `{other}` (expected linear-margin, random-relu-teacher, or separated-arbitrary-labels)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub kind: GeneratorKind,
    pub n: usize,
    pub d: usize,
    /// Margin target. For the teacher kind `None` selects the median of `|f̂|`.
    #[serde(default)]
    pub gamma0: Option<f64>,
    /// Minimum pairwise distance for the separated kind.
    #[serde(default)]
    pub phi: Option<f64>,
    /// Teacher feature count `N`.
    #[serde(default)]
    pub features: Option<usize>,
    pub seed: u64,
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("n: must be positive".into()));
        }
        if self.d == 0 {
            return Err(Error::Config("d: must be positive".into()));
        }
        match self.kind {
            GeneratorKind::LinearMargin => {
                let g = self.gamma0.ok_or_else(|| Error::Config("gamma0: required for linear-margin".into()))?;
                if !(0.0..1.0).contains(&g) {
                    return Err(Error::Config(format!("gamma0: must lie in [0, 1), got {g}")));
                }
            }
            GeneratorKind::RandomReluTeacher => {
                if self.features.unwrap_or(0) == 0 {
                    return Err(Error::Config("features: required and positive for random-relu-teacher".into()));
                }
                if let Some(g) = self.gamma0 {
                    if !(g > 0.0) {
                        return Err(Error::Config(format!("gamma0: must be positive, got {g}")));
                    }
                }
            }
            GeneratorKind::SeparatedArbitrary => {
                let phi = self.phi.ok_or_else(|| Error::Config("phi: required for separated-arbitrary-labels".into()))?;
                if !(0.0..=2.0).contains(&phi) {
                    return Err(Error::Config(format!("phi: must lie in [0, 2], got {phi}")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub fraction: f64,
    pub seed: u64,
    pub part: String,
    pub parent_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub spec: GeneratorSpec,
    /// `min_i y_i g(x_i)` for the ground-truth separator `g`.
    pub ground_truth_margin: Option<f64>,
    /// Margin target actually enforced (the resolved default for teachers).
    pub gamma0: Option<f64>,
    pub min_pairwise_distance: Option<f64>,
    pub teacher_hash: Option<String>,
    pub candidates: usize,
    pub acceptance_rate: f64,
    #[serde(default)]
    pub split: Option<SplitInfo>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub data: Dataset,
    pub provenance: Provenance,
}

impl LabeledSet {
    pub fn hash(&self) -> u64 {
        dataset_hash(&self.data)
    }
}

fn sphere_candidate(seed: u64, index: usize, dim: usize) -> Array1<f64> {
    let mut r = rng::stream(seed, Domain::Candidate, index as u64);
    Array1::from(rng::unit_sphere(&mut r, dim))
}

struct Accepted {
    rows: Vec<Array1<f64>>,
    labels: Vec<f64>,
    scores: Vec<f64>,
    candidates: usize,
}

/// Rejection sampling from the sphere. `judge` maps a candidate to its
/// signed score `s`; the label is `sign(s)` and the candidate is kept when
/// `|s| ≥ threshold`.
fn rejection_sample<J>(seed: u64, n: usize, dim: usize, threshold: f64, judge: &J) -> Result<Accepted>
where
    J: Fn(ArrayView1<f64>) -> f64 + Sync,
{
    let cap = ACCEPTANCE_WINDOW.max(n.saturating_mul((1.0 / MIN_ACCEPTANCE) as usize));
    let mut acc = Accepted { rows: Vec::with_capacity(n), labels: Vec::with_capacity(n), scores: Vec::new(), candidates: 0 };
    let mut start = 0;
    while acc.rows.len() < n {
        let chunk: Vec<Option<(Array1<f64>, f64)>> = (start..start + CHUNK)
            .into_par_iter()
            .map(|c| {
                let x = sphere_candidate(seed, c, dim);
                let s = judge(x.view());
                (s.abs() >= threshold).then_some((x, s))
            })
            .collect();
        for (k, item) in chunk.into_iter().enumerate() {
            if acc.rows.len() == n {
                break;
            }
            acc.candidates = start + k + 1;
            if let Some((x, s)) = item {
                acc.labels.push(if s >= 0.0 { 1.0 } else { -1.0 });
                acc.scores.push(s.abs());
                acc.rows.push(x);
            }
        }
        start += CHUNK;
        let rate = acc.rows.len() as f64 / acc.candidates as f64;
        if acc.rows.len() < n && acc.candidates >= ACCEPTANCE_WINDOW && rate < MIN_ACCEPTANCE {
            return Err(Error::Infeasible(format!(
                "margin {threshold} accepted {} of {} candidates; choose a smaller gamma0",
                acc.rows.len(),
                acc.candidates
            )));
        }
        if acc.rows.len() < n && acc.candidates >= cap {
            return Err(Error::Infeasible(format!(
                "margin {threshold} produced only {} of {n} samples in {cap} candidates",
                acc.rows.len()
            )));
        }
    }
    Ok(acc)
}

fn stack(rows: &[Array1<f64>], dim: usize) -> Array2<f64> {
    let mut m = Array2::zeros((rows.len(), dim));
    for (mut dst, src) in m.axis_iter_mut(Axis(0)).zip(rows) {
        dst.assign(src);
    }
    m
}

/// Hidden unit normal `w*` of the linear-margin generator.
pub fn linear_separator(seed: u64, dim: usize) -> Array1<f64> {
    let mut r = rng::stream(seed, Domain::Hidden, 0);
    Array1::from(rng::unit_sphere(&mut r, dim))
}

/// Uniform sphere samples labelled by a hidden halfspace, keeping only
/// points at distance at least `γ₀` from its boundary.
pub fn gen_linear_margin(spec: &GeneratorSpec) -> Result<LabeledSet> {
    if spec.kind != GeneratorKind::LinearMargin {
        return Err(Error::Config("kind: expected linear-margin".into()));
    }
    spec.validate()?;
    let gamma0 = spec.gamma0.expect("validated");
    let w = linear_separator(spec.seed, spec.d);
    let acc = rejection_sample(spec.seed, spec.n, spec.d, gamma0, &|x| w.dot(&x))?;
    finish_margin_set(spec, acc, Some(gamma0), None)
}

fn finish_margin_set(spec: &GeneratorSpec, acc: Accepted, gamma0: Option<f64>, teacher_hash: Option<String>) -> Result<LabeledSet> {
    let margin = acc.scores.iter().copied().fold(f64::INFINITY, f64::min);
    let rate = acc.rows.len() as f64 / acc.candidates.max(1) as f64;
    let data = Dataset::new(stack(&acc.rows, spec.d), acc.labels)?;
    Ok(LabeledSet {
        data,
        provenance: Provenance {
            spec: spec.clone(),
            ground_truth_margin: Some(margin),
            gamma0,
            min_pairwise_distance: None,
            teacher_hash,
            candidates: acc.candidates,
            acceptance_rate: rate,
            split: None,
        },
    })
}

/// Finite random ReLU feature teacher `f̂(x) = (1/N) Σ_j c_j σ(ū_jᵀx)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReluTeacher {
    pub seed: u64,
    /// `ū_1..ū_N` as rows.
    pub directions: Array2<f64>,
    /// `c_j ∈ {±1}`.
    pub coefficients: Array1<f64>,
}

impl ReluTeacher {
    /// Directions come from the same streams as the random-feature
    /// certifier, so certifying with the teacher's seed and `N` reuses its
    /// features.
    pub fn new(seed: u64, features: usize, dim: usize) -> Self {
        let directions = relu_feature_directions(seed, features, dim);
        let mut r = rng::stream(seed, Domain::Teacher, 0);
        let coefficients = Array1::from_iter((0..features).map(|_| if r.random::<bool>() { 1.0 } else { -1.0 }));
        Self { seed, directions, coefficients }
    }

    pub fn features(&self) -> usize {
        self.coefficients.len()
    }

    pub fn eval(&self, x: ArrayView1<f64>) -> f64 {
        let pre = self.directions.dot(&x);
        pre.iter().zip(&self.coefficients).map(|(z, c)| c * z.max(0.0)).sum::<f64>() / self.features() as f64
    }

    pub fn eval_batch(&self, inputs: ArrayView2<f64>) -> Array1<f64> {
        relu_features(inputs, self.directions.view()).dot(&self.coefficients) / self.features() as f64
    }

    pub fn hash(&self) -> u64 {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&self.seed.to_le_bytes());
        for v in self.directions.iter().chain(self.coefficients.iter()) {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fnv1a(&bytes)
    }

    /// Empirical quantiles of `|f̂(x)|` over `samples` uniform sphere points
    /// drawn from `stream_seed`.
    pub fn abs_output_quantiles(&self, samples: usize, stream_seed: u64, probs: &[f64]) -> Vec<f64> {
        let mut r = rng::stream(stream_seed, Domain::Quantiles, 0);
        let dim = self.directions.ncols();
        let rows: Vec<Array1<f64>> = (0..samples).map(|_| Array1::from(rng::unit_sphere(&mut r, dim))).collect();
        let mut vals: Vec<f64> = self.eval_batch(stack(&rows, dim).view()).iter().map(|v| v.abs()).collect();
        vals.sort_by(f64::total_cmp);
        probs.iter().map(|&p| quantile_sorted(&vals, p)).collect()
    }

    /// Median of `|f̂|` over [`QUANTILE_SAMPLES`] sphere points.
    pub fn default_margin(&self) -> f64 {
        self.abs_output_quantiles(QUANTILE_SAMPLES, self.seed, &[0.5])[0]
    }
}

/// Linear-interpolation quantile of sorted values.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Sphere samples labelled by a random ReLU feature teacher, keeping only
/// points with `|f̂(x)| ≥ γ₀`.
pub fn gen_random_relu_teacher(spec: &GeneratorSpec) -> Result<LabeledSet> {
    if spec.kind != GeneratorKind::RandomReluTeacher {
        return Err(Error::Config("kind: expected random-relu-teacher".into()));
    }
    spec.validate()?;
    let teacher = ReluTeacher::new(spec.seed, spec.features.expect("validated"), spec.d);
    let gamma0 = spec.gamma0.unwrap_or_else(|| teacher.default_margin());
    let acc = rejection_sample(spec.seed, spec.n, spec.d, gamma0, &|x| teacher.eval(x)).map_err(|e| match e {
        Error::Infeasible(msg) => {
            let q = teacher.abs_output_quantiles(QUANTILE_SAMPLES, spec.seed, &[0.5, 0.9, 0.99]);
            Error::Infeasible(format!(
                "{msg}; |f̂| quantiles 50%/90%/99% are {:.4e}/{:.4e}/{:.4e}",
                q[0], q[1], q[2]
            ))
        }
        other => other,
    })?;
    finish_margin_set(spec, acc, Some(gamma0), Some(hex64(teacher.hash())))
}

/// Greedy packing on the sphere with pairwise distances at least `φ` and
/// i.i.d. uniform labels.
pub fn gen_separated_arbitrary(spec: &GeneratorSpec) -> Result<LabeledSet> {
    if spec.kind != GeneratorKind::SeparatedArbitrary {
        return Err(Error::Config("kind: expected separated-arbitrary-labels".into()));
    }
    spec.validate()?;
    let phi = spec.phi.expect("validated");
    let phi_sq = phi * phi;
    let mut rows: Vec<Array1<f64>> = Vec::with_capacity(spec.n);
    let mut min_dist_sq = f64::INFINITY;
    let mut attempts = 0;
    while rows.len() < spec.n {
        if attempts >= MAX_PACKING_ATTEMPTS {
            return Err(Error::Infeasible(format!(
                "packing with phi = {phi} placed {} of {} points in {attempts} attempts",
                rows.len(),
                spec.n
            )));
        }
        let x = sphere_candidate(spec.seed, attempts, spec.d);
        attempts += 1;
        let nearest = rows
            .iter()
            .map(|r| {
                let diff = r - &x;
                diff.dot(&diff)
            })
            .fold(f64::INFINITY, f64::min);
        if nearest >= phi_sq {
            min_dist_sq = min_dist_sq.min(nearest);
            rows.push(x);
        }
    }
    let mut r = rng::stream(spec.seed, Domain::Labels, 0);
    let labels: Vec<f64> = (0..spec.n).map(|_| if r.random::<bool>() { 1.0 } else { -1.0 }).collect();
    let data = Dataset::new(stack(&rows, spec.d), labels)?;
    Ok(LabeledSet {
        data,
        provenance: Provenance {
            spec: spec.clone(),
            ground_truth_margin: None,
            gamma0: None,
            min_pairwise_distance: min_dist_sq.is_finite().then(|| min_dist_sq.sqrt()),
            teacher_hash: None,
            candidates: attempts,
            acceptance_rate: spec.n as f64 / attempts as f64,
            split: None,
        },
    })
}

pub fn generate(spec: &GeneratorSpec) -> Result<LabeledSet> {
    match spec.kind {
        GeneratorKind::LinearMargin => gen_linear_margin(spec),
        GeneratorKind::RandomReluTeacher => gen_random_relu_teacher(spec),
        GeneratorKind::SeparatedArbitrary => gen_separated_arbitrary(spec),
    }
}

/// Index sets of a seeded random split with `round(fraction · n)` training
/// samples, each sorted ascending.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Input(format!("split fraction must lie in (0, 1), got {fraction}")));
    }
    let k = (fraction * n as f64).round() as usize;
    if k == 0 || k == n {
        return Err(Error::Input(format!("splitting {n} samples at {fraction} leaves one side empty")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, Domain::Split, 0));
    let mut train = idx[..k].to_vec();
    let mut test = idx[k..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

pub fn split(set: &LabeledSet, fraction: f64, seed: u64) -> Result<(LabeledSet, LabeledSet)> {
    let (train, test) = split_indices(set.data.len(), fraction, seed)?;
    let parent = hex64(set.hash());
    let part = |idx: &[usize], name: &str| {
        let mut provenance = set.provenance.clone();
        provenance.split = Some(SplitInfo { fraction, seed, part: name.into(), parent_hash: parent.clone() });
        LabeledSet { data: set.data.subset(idx), provenance }
    };
    Ok((part(&train, "train"), part(&test, "test")))
}

fn label_token(y: f64) -> &'static str {
    if y > 0.0 {
        "1"
    } else {
        "-1"
    }
}

/// Canonical sample rows, one line per sample.
pub fn canonical_rows(data: &Dataset) -> String {
    let mut out = String::new();
    for i in 0..data.len() {
        out.push_str(label_token(data.label(i)));
        for v in data.input(i) {
            out.push(',');
            out.push_str(&fmt17(*v));
        }
        out.push('\n');
    }
    out
}

/// FNV-1a over [`canonical_rows`].
pub fn dataset_hash(data: &Dataset) -> u64 {
    fnv1a(canonical_rows(data).as_bytes())
}

#[derive(Serialize, Deserialize)]
struct FileHeader {
    hash: String,
    n: usize,
    d: usize,
    provenance: Provenance,
}

pub fn write_dataset<W: Write>(set: &LabeledSet, mut out: W) -> Result<()> {
    let rows = canonical_rows(&set.data);
    let header = FileHeader {
        hash: hex64(fnv1a(rows.as_bytes())),
        n: set.data.len(),
        d: set.data.dim(),
        provenance: set.provenance.clone(),
    };
    writeln!(out, "{}", to_json_line(&header)?)?;
    out.write_all(rows.as_bytes())?;
    out.flush()?;
    Ok(())
}

pub fn read_dataset<R: Read>(input: R) -> Result<LabeledSet> {
    let mut lines = BufReader::new(input).lines();
    let header = lines.next().ok_or_else(|| Error::Format("dataset file is empty".into()))??;
    let header: FileHeader = serde_json::from_str(&header)?;
    let mut flat = Vec::with_capacity(header.n * header.d);
    let mut labels = Vec::with_capacity(header.n);
    for (k, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let y = match fields.next() {
            Some("1") => 1.0,
            Some("-1") => -1.0,
            other => return Err(Error::Format(format!("row {k}: bad label {other:?}"))),
        };
        let before = flat.len();
        for f in fields {
            flat.push(f.parse::<f64>().map_err(|e| Error::Format(format!("row {k}: {e}")))?);
        }
        if flat.len() - before != header.d {
            return Err(Error::Format(format!("row {k}: expected {} coordinates", header.d)));
        }
        labels.push(y);
    }
    if labels.len() != header.n {
        return Err(Error::Format(format!("expected {} rows, found {}", header.n, labels.len())));
    }
    let inputs = Array2::from_shape_vec((header.n, header.d), flat).map_err(|e| Error::Format(e.to_string()))?;
    let data = Dataset::new(inputs, labels)?;
    if hex64(dataset_hash(&data)) != header.hash {
        return Err(Error::Format("dataset hash does not match its header".into()));
    }
    Ok(LabeledSet { data, provenance: header.provenance })
}

pub fn save_dataset(set: &LabeledSet, path: &Path) -> Result<()> {
    write_dataset(set, std::io::BufWriter::new(std::fs::File::create(path)?))
}

pub fn load_dataset(path: &Path) -> Result<LabeledSet> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Input(format!("cannot open dataset {}: {e}", path.display())))?;
    read_dataset(file)
}
