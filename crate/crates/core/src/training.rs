//! Cross-entropy empirical risk, surrogate error, and full-batch gradient
//! descent from Gaussian initialization with best-iterate selection.

use std::io::Write;
use std::time::Instant;

use ndarray::{s, Array1};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::io::fmt17;
use crate::linalg::tree_reduce;
use crate::network::{forward_batch, weighted_gradient, GradientSet, Weights};

/// Samples per block of the deterministic reduction tree.
pub const BLOCK_SIZE: usize = 256;

/// Training aborts once the empirical loss exceeds this value.
pub const DIVERGENCE_LOSS: f64 = 1e6;

/// `ℓ(z) = log(1 + exp(-z))`, evaluated without overflow on either side.
pub fn loss(z: f64) -> f64 {
    if z < 0.0 {
        -z + z.exp().ln_1p()
    } else {
        (-z).exp().ln_1p()
    }
}

/// `ℓ'(z) = -1 / (1 + exp(z))`.
pub fn loss_derivative(z: f64) -> f64 {
    if z > 0.0 {
        let e = (-z).exp();
        -e / (1.0 + e)
    } else {
        -1.0 / (1.0 + z.exp())
    }
}

/// Aggregates of one pass over a dataset at fixed weights.
#[derive(Debug, Clone)]
pub(crate) struct Pass {
    pub loss_sum: f64,
    pub surrogate_sum: f64,
    pub errors: usize,
    pub n: usize,
    pub grad: Option<GradientSet>,
}

impl Pass {
    pub fn loss(&self) -> f64 {
        self.loss_sum / self.n as f64
    }
    pub fn surrogate(&self) -> f64 {
        self.surrogate_sum / self.n as f64
    }
    pub fn error_rate(&self) -> f64 {
        self.errors as f64 / self.n as f64
    }

    fn combine(mut a: Pass, b: Pass) -> Pass {
        a.loss_sum += b.loss_sum;
        a.surrogate_sum += b.surrogate_sum;
        a.errors += b.errors;
        a.n += b.n;
        a.grad = match (a.grad, b.grad) {
            (Some(mut x), Some(y)) => {
                x.add_assign(&y);
                Some(x)
            }
            (x, y) => x.or(y),
        };
        a
    }
}

/// Loss, surrogate, error count, and optionally `Σ_i c_i ∇f(x_i)` with
/// `c_i = coeff(i, y_i f(x_i))`, blocked and reduced along a fixed tree.
pub(crate) fn pass_with<C>(w: &Weights, data: &Dataset, coeff: Option<&C>) -> Result<Pass>
where
    C: Fn(usize, f64) -> f64 + Sync,
{
    data.require_nonempty()?;
    let n = data.len();
    let blocks = n.div_ceil(BLOCK_SIZE);
    let leaf = |b: usize| -> Result<Pass> {
        let lo = b * BLOCK_SIZE;
        let hi = ((b + 1) * BLOCK_SIZE).min(n);
        let trace = forward_batch(w, data.inputs().slice(s![lo..hi, ..]))?;
        let mut p = Pass { loss_sum: 0.0, surrogate_sum: 0.0, errors: 0, n: hi - lo, grad: None };
        let mut coeffs = Array1::zeros(hi - lo);
        for (k, i) in (lo..hi).enumerate() {
            let y = data.label(i);
            let z = y * trace.outputs[k];
            p.loss_sum += loss(z);
            p.surrogate_sum += -loss_derivative(z);
            if z <= 0.0 {
                p.errors += 1;
            }
            if let Some(c) = coeff {
                coeffs[k] = c(i, z);
            }
        }
        if coeff.is_some() {
            p.grad = Some(weighted_gradient(w, &trace, coeffs.view()));
        }
        Ok(p)
    };
    let combine = |a: Result<Pass>, b: Result<Pass>| -> Result<Pass> { Ok(Pass::combine(a?, b?)) };
    tree_reduce(blocks, &leaf, &combine).expect("dataset is nonempty")
}

pub(crate) fn pass(w: &Weights, data: &Dataset, with_grad: bool) -> Result<Pass> {
    let n = data.len() as f64;
    let coeff = |i: usize, z: f64| loss_derivative(z) * data.label(i) / n;
    pass_with(w, data, if with_grad { Some(&coeff) } else { None })
}

/// `L_S(W) = (1/n) Σ ℓ(y_i f(x_i))`.
pub fn empirical_loss(w: &Weights, data: &Dataset) -> Result<f64> {
    Ok(pass(w, data, false)?.loss())
}

/// `E_S(W) = -(1/n) Σ ℓ'(y_i f(x_i))`.
pub fn surrogate_error(w: &Weights, data: &Dataset) -> Result<f64> {
    Ok(pass(w, data, false)?.surrogate())
}

/// `∇_{W_l} L_S(W)` for every layer.
pub fn loss_gradient(w: &Weights, data: &Dataset) -> Result<GradientSet> {
    Ok(pass(w, data, true)?.grad.expect("gradient requested"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Fraction of samples with `y f(x) <= 0`; ties count as errors.
    pub classification_error: f64,
    /// Plug-in estimate of the population surrogate error.
    pub surrogate_error: f64,
}

pub fn evaluate(w: &Weights, data: &Dataset) -> Result<Evaluation> {
    let p = pass(w, data, false)?;
    Ok(Evaluation {
        classification_error: p.error_rate(),
        surrogate_error: p.surrogate(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub step_size: f64,
    pub iterations: usize,
    pub record_every: usize,
    /// Keep a weight snapshot every this many iterations; `None` keeps only
    /// the initial, best, and final weights.
    #[serde(default)]
    pub snapshot_every: Option<usize>,
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size >= 0.0) || !self.step_size.is_finite() {
            return Err(Error::Config(format!("step_size must be nonnegative, got {}", self.step_size)));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if self.record_every == 0 {
            return Err(Error::Config("record_every must be at least 1".into()));
        }
        if self.snapshot_every == Some(0) {
            return Err(Error::Config("snapshot_every must be at least 1".into()));
        }
        Ok(())
    }
}

/// Step size `c · L^{-3} B^2 / m` matching the scaling of the convergence
/// guarantee. Never applied implicitly.
pub fn suggested_step_size(depth: usize, width: usize, b: f64, constant: f64) -> f64 {
    constant * b * b / ((depth as f64).powi(3) * width as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub iteration: usize,
    pub loss: f64,
    pub surrogate_error: f64,
    pub train_error: f64,
    /// `||W_l^{(k)} - W_l^{(0)}||_F` per layer.
    pub distances: Vec<f64>,
    /// `||∇_{W_l} L_S(W^{(k)})||_F` per layer.
    pub grad_norms: Vec<f64>,
    /// Wall-clock seconds since training started. Not written to the
    /// trajectory CSV, which must be reproducible bit for bit.
    #[serde(skip)]
    pub elapsed_secs: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub rows: Vec<TrajectoryRow>,
}

impl TrajectoryRecord {
    pub fn depth(&self) -> usize {
        self.rows.first().map_or(0, |r| r.distances.len())
    }

    pub fn max_distance(&self) -> f64 {
        self.rows
            .iter()
            .flat_map(|r| r.distances.iter().copied())
            .fold(0.0, f64::max)
    }

    pub fn row(&self, iteration: usize) -> Option<&TrajectoryRow> {
        self.rows.iter().find(|r| r.iteration == iteration)
    }

    pub fn csv_header(depth: usize) -> String {
        let mut h = String::from("iteration,loss,surrogate_error,train_error");
        for l in 1..=depth {
            h.push_str(&format!(",dist_{l}"));
        }
        for l in 1..=depth {
            h.push_str(&format!(",grad_norm_{l}"));
        }
        h
    }

    /// One row per recorded iteration; floats with 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{}", Self::csv_header(self.depth()))?;
        for r in &self.rows {
            let mut line = format!(
                "{},{},{},{}",
                r.iteration,
                fmt17(r.loss),
                fmt17(r.surrogate_error),
                fmt17(r.train_error)
            );
            for v in r.distances.iter().chain(&r.grad_norms) {
                line.push(',');
                line.push_str(&fmt17(*v));
            }
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    /// Wall-clock timing, kept apart from the reproducible trajectory.
    pub fn write_timing_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "iteration,elapsed_secs")?;
        for r in &self.rows {
            writeln!(out, "{},{}", r.iteration, r.elapsed_secs)?;
        }
        Ok(())
    }

    /// Parses the CSV written by [`TrajectoryRecord::write_csv`].
    pub fn read_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Format("empty trajectory".into()))?;
        let cols = header.split(',').count();
        if cols < 4 || (cols - 4) % 2 != 0 {
            return Err(Error::Format("unexpected trajectory header".into()));
        }
        let depth = (cols - 4) / 2;
        let mut rows = Vec::new();
        for line in lines.filter(|l| !l.is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != cols {
                return Err(Error::Format(format!("row has {} fields, expected {cols}", f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Format(e.to_string()));
            rows.push(TrajectoryRow {
                iteration: f[0].parse().map_err(|_| Error::Format("bad iteration".into()))?,
                loss: num(f[1])?,
                surrogate_error: num(f[2])?,
                train_error: num(f[3])?,
                distances: f[4..4 + depth].iter().map(|s| num(s)).collect::<Result<_>>()?,
                grad_norms: f[4 + depth..].iter().map(|s| num(s)).collect::<Result<_>>()?,
                elapsed_secs: 0.0,
            });
        }
        Ok(Self { rows })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub initial: Weights,
    /// `W^{(k*)}`.
    pub best: Weights,
    pub best_iteration: usize,
    pub final_weights: Weights,
    pub trajectory: TrajectoryRecord,
    /// Intermediate snapshots `(k, W^{(k)})` when requested.
    pub snapshots: Vec<(usize, Weights)>,
}

/// Full-batch gradient descent: `W^{(k)} = W^{(k-1)} - η ∇L_S(W^{(k-1)})`
/// for all layers at once, `k = 1..K`.
///
/// `k*` is the smallest index in `0..K-1` minimizing `E_S`. Iterations that
/// are multiples of `record_every`, and `K` itself, are recorded.
pub fn gd_train(w0: &Weights, data: &Dataset, cfg: &TrainingConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    data.require_nonempty()?;
    if data.dim() != w0.config().input_dim {
        return Err(Error::Input("dataset dimension differs from network input".into()));
    }
    let start = Instant::now();
    let mut w = w0.clone();
    let mut trajectory = TrajectoryRecord::default();
    let mut snapshots = Vec::new();
    let mut best: Option<(usize, f64, Weights)> = None;

    for k in 0..=cfg.iterations {
        let healthy = w.is_finite();
        let p = if healthy { pass(&w, data, true).ok() } else { None };
        let p = match p {
            Some(p) if p.loss().is_finite() && p.loss() <= DIVERGENCE_LOSS => p,
            _ => {
                return Err(Error::Diverged {
                    last_finite: k.saturating_sub(1),
                    trajectory: Box::new(trajectory),
                })
            }
        };
        let grad = p.grad.as_ref().expect("gradient requested");
        if k % cfg.record_every == 0 || k == cfg.iterations {
            trajectory.rows.push(TrajectoryRow {
                iteration: k,
                loss: p.loss(),
                surrogate_error: p.surrogate(),
                train_error: p.error_rate(),
                distances: w.distances(w0),
                grad_norms: grad.frobenius_norms(),
                elapsed_secs: start.elapsed().as_secs_f64(),
            });
        }
        if let Some(every) = cfg.snapshot_every {
            if k % every == 0 && k > 0 && k < cfg.iterations {
                snapshots.push((k, w.clone()));
            }
        }
        if k == cfg.iterations {
            break;
        }
        let es = p.surrogate();
        if best.as_ref().is_none_or(|(_, b, _)| es < *b) {
            best = Some((k, es, w.clone()));
        }
        if cfg.step_size != 0.0 {
            w.add_scaled(-cfg.step_size, &grad.grads);
        }
    }
    let (best_iteration, _, best) = best.expect("at least one iteration");
    Ok(TrainOutcome {
        initial: w0.clone(),
        best,
        best_iteration,
        final_weights: w,
        trajectory,
        snapshots,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{he_init, NetworkConfig};
    use ndarray::{array, Array2};

    fn toy_data() -> Dataset {
        let rows: Vec<Vec<f64>> = (0..12)
            .map(|i| {
                let t = i as f64 * 0.5;
                let v = [t.cos(), t.sin(), 0.3];
                let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                v.iter().map(|x| x / n).collect()
            })
            .collect();
        let labels = rows.iter().map(|r| if r[0] > 0.0 { 1.0 } else { -1.0 }).collect();
        Dataset::from_rows(&rows, labels).unwrap()
    }

    #[test]
    fn loss_values_at_zero() {
        assert!((loss(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((loss_derivative(0.0) + 0.5).abs() < 1e-15);
    }

    #[test]
    fn loss_is_finite_far_from_zero() {
        let big = loss(-745.0);
        assert!(big.is_finite());
        // log(1 + e^745) = 745 + log(1 + e^-745), and e^-745 is below f64 resolution of 745
        assert_eq!(big, 745.0);
        assert!(loss(745.0) >= 0.0 && loss(745.0) < 1e-300);
        assert!((loss_derivative(-745.0) + 1.0).abs() < 1e-15);
    }

    #[test]
    fn derivative_dominates_indicator() {
        for z in [-10.0, -0.1, 0.0, 0.1, 10.0] {
            let ind = if z < 0.0 { 1.0 } else { 0.0 };
            assert!(-2.0 * loss_derivative(z) >= ind);
            let d = loss_derivative(z);
            assert!(d < 0.0 && d > -1.0);
        }
    }

    #[test]
    fn zero_network_has_log2_loss_and_half_surrogate() {
        let data = toy_data();
        let mut w = he_init(&NetworkConfig::uniform(3, 2, 8, 1).unwrap()).unwrap();
        w.layers_mut()[0].fill(0.0);
        assert!((empirical_loss(&w, &data).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!((surrogate_error(&w, &data).unwrap() - 0.5).abs() < 1e-15);
        let ev = evaluate(&w, &data).unwrap();
        assert_eq!(ev.classification_error, 1.0);
        assert_eq!(ev.surrogate_error, 0.5);
    }

    #[test]
    fn single_sample_loss_by_hand() {
        // d=2, L=1, m=2: f(x) = relu(x_1) - relu(-x_2) for W = I-like
        let cfg = NetworkConfig::new(2, vec![2], 0).unwrap();
        let w = Weights::from_parts(cfg, vec![array![[1.0, 0.0], [0.0, 1.0]]], array![1.0, -1.0]).unwrap();
        let data = Dataset::from_rows(&[vec![1.0, 0.0]], vec![1.0]).unwrap();
        let expect = (1.0 + (-1.0f64).exp()).ln();
        assert!((empirical_loss(&w, &data).unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn empty_dataset_is_an_input_error() {
        let w = he_init(&NetworkConfig::uniform(3, 1, 4, 1).unwrap()).unwrap();
        let empty = Dataset::new(Array2::zeros((0, 3)), vec![]).unwrap();
        assert!(matches!(empirical_loss(&w, &empty), Err(Error::Input(_))));
        assert!(matches!(surrogate_error(&w, &empty), Err(Error::Input(_))));
        assert!(matches!(evaluate(&w, &empty), Err(Error::Input(_))));
    }

    #[test]
    fn zero_step_keeps_initial_weights() {
        let data = toy_data();
        let w0 = he_init(&NetworkConfig::uniform(3, 2, 16, 4).unwrap()).unwrap();
        let cfg = TrainingConfig { step_size: 0.0, iterations: 5, record_every: 1, snapshot_every: None };
        let out = gd_train(&w0, &data, &cfg).unwrap();
        assert_eq!(out.final_weights, w0);
        assert_eq!(out.best_iteration, 0);
        assert!(out.trajectory.rows.iter().all(|r| r.distances.iter().all(|&d| d == 0.0)));
    }

    #[test]
    fn one_iteration_records_both_ends() {
        let data = toy_data();
        let w0 = he_init(&NetworkConfig::uniform(3, 2, 16, 4).unwrap()).unwrap();
        let cfg = TrainingConfig { step_size: 0.01, iterations: 1, record_every: 7, snapshot_every: None };
        let out = gd_train(&w0, &data, &cfg).unwrap();
        let ks: Vec<usize> = out.trajectory.rows.iter().map(|r| r.iteration).collect();
        assert_eq!(ks, vec![0, 1]);
        let g = loss_gradient(&w0, &data).unwrap();
        let mut expect = w0.clone();
        expect.add_scaled(-0.01, &g.grads);
        assert_eq!(out.final_weights, expect);
    }

    #[test]
    fn huge_step_reports_divergence() {
        let data = toy_data();
        let w0 = he_init(&NetworkConfig::uniform(3, 2, 16, 4).unwrap()).unwrap();
        let cfg = TrainingConfig { step_size: 1e12, iterations: 50, record_every: 1, snapshot_every: None };
        match gd_train(&w0, &data, &cfg) {
            Err(Error::Diverged { last_finite, trajectory }) => {
                assert_eq!(trajectory.rows.len(), last_finite + 1);
                assert!(trajectory.rows.iter().all(|r| r.loss.is_finite()));
            }
            other => panic!("expected divergence, got {:?}", other.map(|o| o.best_iteration)),
        }
    }

    #[test]
    fn invalid_training_config() {
        let bad = TrainingConfig { step_size: -1.0, iterations: 1, record_every: 1, snapshot_every: None };
        assert!(bad.validate().is_err());
        let bad = TrainingConfig { step_size: 1.0, iterations: 0, record_every: 1, snapshot_every: None };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn trajectory_csv_round_trip() {
        let data = toy_data();
        let w0 = he_init(&NetworkConfig::uniform(3, 2, 8, 2).unwrap()).unwrap();
        let cfg = TrainingConfig { step_size: 0.05, iterations: 4, record_every: 2, snapshot_every: None };
        let out = gd_train(&w0, &data, &cfg).unwrap();
        let mut buf = Vec::new();
        out.trajectory.write_csv(&mut buf).unwrap();
        let back = TrajectoryRecord::read_csv(std::str::from_utf8(&buf).unwrap()).unwrap();
        let mut expect = out.trajectory.clone();
        expect.rows.iter_mut().for_each(|r| r.elapsed_secs = 0.0);
        assert_eq!(back, expect);
    }

    #[test]
    fn suggested_step_scaling() {
        let a = suggested_step_size(2, 512, 0.5, 1.0);
        assert!((a - 0.25 / (8.0 * 512.0)).abs() < 1e-18);
        assert!((suggested_step_size(2, 1024, 0.5, 1.0) * 2.0 - a).abs() < 1e-18);
    }
}
