//! Generalization bound evaluation with every unknown constant set to 1.
//!
//! Bounds are compared by how they scale with `m`, `n`, `L` and `τ`; no
//! total here is a valid bound on its own.

use ndarray::{Array1, Array2};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{column_norm_sum, frobenius, gaussian_direction, spectral_norm, Dense, SpectralOptions};
use crate::network::{forward_batch, per_sample_gradient_norms, weighted_gradient, Weights};
use crate::rng::{self, Domain};
use crate::training::surrogate_error;

/// Attached to the spectral bounds, which are stated for a margin loss.
pub const SURROGATE_PAIRING_NOTE: &str = "spectral bounds are paired with the surrogate error instead of \
     their original ramp margin loss; compare scaling only";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub n: usize,
    /// Smallest hidden width.
    pub m: usize,
    #[serde(rename = "L")]
    pub depth: usize,
    /// `max_l ‖W_l - W_l^(0)‖_F`.
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundTerm {
    pub name: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub bound_name: String,
    pub inputs: BoundInputs,
    pub terms: Vec<BoundTerm>,
    pub total: f64,
    pub surrogate_error: f64,
    pub test_error: Option<f64>,
    pub note: Option<String>,
}

impl BoundReport {
    pub fn term(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|t| t.name == name).map(|t| t.value)
    }

    pub fn with_test_error(mut self, err: f64) -> Self {
        self.test_error = Some(err);
        self
    }

    /// Sum of the terms that depend on `τ`; zero at initialization.
    pub fn gap(&self) -> f64 {
        self.terms.iter().filter(|t| t.name != "surrogate").map(|t| t.value).sum()
    }
}

fn term(name: &str, value: f64) -> BoundTerm {
    BoundTerm { name: name.into(), value }
}

fn check_pair(w: &Weights, w0: &Weights, data: &Dataset) -> Result<()> {
    if !w.same_architecture(w0) {
        return Err(Error::Input("weights and initialization differ in architecture".into()));
    }
    if data.dim() != w.config().input_dim {
        return Err(Error::Input(format!("data dimension {} but network expects {}", data.dim(), w.config().input_dim)));
    }
    data.require_nonempty()
}

fn bound_inputs(w: &Weights, w0: &Weights, data: &Dataset) -> BoundInputs {
    BoundInputs {
        n: data.len(),
        m: w.config().min_width(),
        depth: w.depth(),
        tau: w.distances(w0).into_iter().fold(0.0, f64::max),
    }
}

/// `2 E_S(W) + L τ √(m/n) + L⁴ √(m log m) τ^{4/3}`.
pub fn main_bound(w: &Weights, w0: &Weights, data: &Dataset) -> Result<BoundReport> {
    check_pair(w, w0, data)?;
    let inputs = bound_inputs(w, w0, data);
    if inputs.m < 2 {
        return Err(Error::Input(format!("width {} leaves log m degenerate; need m >= 2", inputs.m)));
    }
    let es = surrogate_error(w, data)?;
    let (l, m, n, tau) = (inputs.depth as f64, inputs.m as f64, inputs.n as f64, inputs.tau);
    let terms = vec![
        term("surrogate", 2.0 * es),
        term("sample", l * tau * (m / n).sqrt()),
        term("linearization", l.powi(4) * (m * m.ln()).sqrt() * tau.powf(4.0 / 3.0)),
    ];
    let total = terms.iter().map(|t| t.value).sum();
    Ok(BoundReport {
        bound_name: "main".into(),
        inputs,
        terms,
        total,
        surrogate_error: es,
        test_error: None,
        note: None,
    })
}

/// `L⁴ √(m log m) τ^{4/3}`, the semi-smoothness bound on the linearization part.
pub fn rademacher_i1(w0: &Weights, tau: f64) -> f64 {
    let (l, m) = (w0.depth() as f64, w0.config().min_width() as f64);
    l.powi(4) * (m * m.ln()).sqrt() * tau.powf(4.0 / 3.0)
}

/// `(τ/n) Σ_l √(Σ_i ‖∇_{W_l} f_{W^(0)}(x_i)‖²_F)`.
pub fn rademacher_i2(w0: &Weights, data: &Dataset, tau: f64) -> Result<f64> {
    data.require_nonempty()?;
    let trace = forward_batch(w0, data.inputs())?;
    let norms = per_sample_gradient_norms(w0, &trace);
    let sum: f64 = norms.columns().into_iter().map(|c| c.dot(&c).sqrt()).sum();
    Ok(tau / data.len() as f64 * sum)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RademacherOptions {
    pub restarts: usize,
    pub steps: usize,
    pub seed: u64,
}

impl Default for RademacherOptions {
    fn default() -> Self {
        Self { restarts: 3, steps: 200, seed: 0 }
    }
}

/// Monte-Carlo lower estimate of the empirical Rademacher complexity of the
/// `τ`-neighborhood.
pub fn rademacher_mc_lower(w0: &Weights, data: &Dataset, tau: f64, draws: usize) -> Result<f64> {
    let opts = RademacherOptions { seed: w0.config().master_seed, ..Default::default() };
    Ok(rademacher_mc_sweep(w0, data, &[tau], draws, opts)?[0])
}

/// [`rademacher_mc_lower`] over several radii with one shared draw set.
///
/// Radii are visited in increasing order and each draw carries its best
/// point forward, so the estimates are nondecreasing in `τ`.
pub fn rademacher_mc_sweep(
    w0: &Weights,
    data: &Dataset,
    taus: &[f64],
    draws: usize,
    opts: RademacherOptions,
) -> Result<Vec<f64>> {
    if draws == 0 {
        return Err(Error::Input("need at least one Rademacher draw".into()));
    }
    if let Some(t) = taus.iter().find(|t| !(**t >= 0.0) || !t.is_finite()) {
        return Err(Error::Input(format!("radius must be nonnegative, got {t}")));
    }
    data.require_nonempty()?;
    let mut order: Vec<usize> = (0..taus.len()).collect();
    order.sort_by(|&a, &b| taus[a].total_cmp(&taus[b]));
    let per_draw: Vec<Vec<f64>> = (0..draws)
        .into_par_iter()
        .map(|d| draw_sweep(w0, data, taus, &order, d as u64, opts))
        .collect::<Result<_>>()?;
    let mut out = vec![0.0; taus.len()];
    for row in &per_draw {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Ok(out.into_iter().map(|v| v / draws as f64).collect())
}

fn correlation(w: &Weights, data: &Dataset, xi: &Array1<f64>) -> Result<f64> {
    let trace = forward_batch(w, data.inputs())?;
    Ok(trace.outputs.dot(xi))
}

fn project(w: &mut Weights, w0: &Weights, tau: f64) {
    for (wl, w0l) in w.layers_mut().iter_mut().zip(w0.layers()) {
        let mut d = &*wl - w0l;
        let f = frobenius(d.view());
        if f > tau {
            d *= tau / f;
            *wl = w0l + &d;
        }
    }
}

fn draw_sweep(w0: &Weights, data: &Dataset, taus: &[f64], order: &[usize], draw: u64, opts: RademacherOptions) -> Result<Vec<f64>> {
    let n = data.len();
    let mut g = rng::stream(opts.seed, Domain::Rademacher, draw << 32);
    let xi = Array1::from_shape_fn(n, |_| if g.random_bool(0.5) { 1.0 / n as f64 } else { -1.0 / n as f64 });
    let directions: Vec<Vec<Array2<f64>>> = (1..opts.restarts)
        .map(|r| {
            w0.layers()
                .iter()
                .enumerate()
                .map(|(l, wl)| {
                    let idx = (draw << 32) | ((r as u64) << 16) | (l as u64 + 1);
                    gaussian_direction(wl.nrows(), wl.ncols(), 1.0, &mut rng::stream(opts.seed, Domain::Rademacher, idx))
                })
                .collect()
        })
        .collect();
    let mut best_w = w0.clone();
    let mut best = correlation(w0, data, &xi)?;
    let mut out = vec![0.0; taus.len()];
    for &k in order {
        let tau = taus[k];
        let mut starts = vec![best_w.clone()];
        for dirs in &directions {
            let mut s = w0.clone();
            s.add_scaled(tau, dirs);
            starts.push(s);
        }
        for mut w in starts {
            if tau > 0.0 {
                for t in 0..opts.steps {
                    let trace = forward_batch(&w, data.inputs())?;
                    let value = trace.outputs.dot(&xi);
                    if value > best {
                        best = value;
                        best_w = w.clone();
                    }
                    let grad = weighted_gradient(&w, &trace, xi.view());
                    let step = tau / ((t + 1) as f64).sqrt();
                    for (wl, gl) in w.layers_mut().iter_mut().zip(&grad.grads) {
                        let f = frobenius(gl.view());
                        if f > 0.0 {
                            wl.scaled_add(step / f, gl);
                        }
                    }
                    project(&mut w, w0, tau);
                }
            }
            let value = correlation(&w, data, &xi)?;
            if value > best {
                best = value;
                best_w = w;
            }
        }
        out[k] = best;
    }
    Ok(out)
}

fn spectral_norms(w: &Weights) -> Result<Vec<f64>> {
    let opts = SpectralOptions { rel_tol: 1e-12, ..SpectralOptions::default() };
    w.layers()
        .iter()
        .map(|wl| spectral_norm(&Dense(wl.view()), opts).map(|e| e.value))
        .collect()
}

fn spectral_report(name: &str, w: &Weights, w0: &Weights, data: &Dataset, terms: Vec<BoundTerm>) -> Result<BoundReport> {
    let total = terms.iter().map(|t| t.value).product();
    Ok(BoundReport {
        bound_name: name.into(),
        inputs: bound_inputs(w, w0, data),
        terms,
        total,
        surrogate_error: surrogate_error(w, data)?,
        test_error: None,
        note: Some(SURROGATE_PAIRING_NOTE.into()),
    })
}

/// `(‖v‖/√n) Π‖W_l‖₂ [Σ_l ‖(W_l - W_l^(0))ᵀ‖_{2,1}^{2/3} / ‖W_l‖₂^{2/3}]^{3/2}`.
pub fn bartlett_bound(w: &Weights, w0: &Weights, data: &Dataset) -> Result<BoundReport> {
    check_pair(w, w0, data)?;
    let norms = spectral_norms(w)?;
    let mut bracket = 0.0;
    for ((wl, w0l), s) in w.layers().iter().zip(w0.layers()).zip(&norms) {
        let diff = column_norm_sum((wl - w0l).view());
        if diff > 0.0 {
            bracket += (diff / s).powf(2.0 / 3.0);
        }
    }
    let prefactor = frobenius_vec(w.output()) / (data.len() as f64).sqrt();
    let terms = vec![
        term("prefactor", prefactor),
        term("spectral_product", norms.iter().product()),
        term("complexity", bracket.powf(1.5)),
    ];
    spectral_report("bartlett", w, w0, data, terms)
}

/// `(L‖v‖/√n) Π‖W_l‖₂ [Σ_l m ‖W_l - W_l^(0)‖²_F / ‖W_l‖₂²]^{1/2}`.
pub fn neyshabur_bound(w: &Weights, w0: &Weights, data: &Dataset) -> Result<BoundReport> {
    check_pair(w, w0, data)?;
    let norms = spectral_norms(w)?;
    let m = w.config().min_width() as f64;
    let mut bracket = 0.0;
    for ((wl, w0l), s) in w.layers().iter().zip(w0.layers()).zip(&norms) {
        let diff = frobenius((wl - w0l).view());
        if diff > 0.0 {
            bracket += m * diff * diff / (s * s);
        }
    }
    let prefactor = w.depth() as f64 * frobenius_vec(w.output()) / (data.len() as f64).sqrt();
    let terms = vec![
        term("prefactor", prefactor),
        term("spectral_product", norms.iter().product()),
        term("complexity", bracket.sqrt()),
    ];
    spectral_report("neyshabur", w, w0, data, terms)
}

fn frobenius_vec(v: &Array1<f64>) -> f64 {
    v.dot(v).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{he_init, NetworkConfig};
    use ndarray::array;

    fn tiny() -> (Weights, Dataset) {
        let cfg = NetworkConfig::new(2, vec![2], 1).unwrap();
        let w = Weights::from_parts(cfg, vec![array![[1.0, -0.5], [0.5, 2.0]]], array![1.0, -1.0]).unwrap();
        let s = 0.5f64.sqrt();
        let d = Dataset::from_rows(&[vec![1.0, 0.0], vec![s, s]], vec![1.0, -1.0]).unwrap();
        (w, d)
    }

    #[test]
    fn zero_radius_identities() {
        let (w, d) = tiny();
        let b = main_bound(&w, &w, &d).unwrap();
        assert_eq!(b.inputs.tau, 0.0);
        assert_eq!(b.gap(), 0.0);
        assert_eq!(b.total, 2.0 * b.surrogate_error);
        assert_eq!(bartlett_bound(&w, &w, &d).unwrap().total, 0.0);
        assert_eq!(neyshabur_bound(&w, &w, &d).unwrap().total, 0.0);
        assert_eq!(rademacher_i2(&w, &d, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn i2_hand_value() {
        // x1 = e1: pre-activations (1, -0.5) so only unit 1 fires; grad = e1 e1ᵀ v_1
        // x2 = (s, s): pre-activations (1.5s, 1.5s), both fire; grad = x2 vᵀ, norm ‖x2‖‖v‖ = √2
        let (w, d) = tiny();
        let expect = 0.3 / 2.0 * (1.0f64 + 2.0).sqrt();
        assert!((rademacher_i2(&w, &d, 0.3).unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn mc_estimate_at_zero_is_init_correlation() {
        let (w, d) = tiny();
        let est = rademacher_mc_sweep(&w, &d, &[0.0], 1, RademacherOptions::default()).unwrap()[0];
        let out = forward_batch(&w, d.inputs()).unwrap().outputs;
        let signed = [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)];
        assert!(signed.iter().any(|(a, b)| (est - (a * out[0] + b * out[1]) / 2.0).abs() < 1e-15));
        assert!(rademacher_mc_sweep(&w, &d, &[0.1], 0, RademacherOptions::default()).is_err());
    }

    #[test]
    fn mc_sweep_monotone() {
        let w = he_init(&NetworkConfig::uniform(2, 2, 8, 2).unwrap()).unwrap();
        let (_, d) = tiny();
        let opts = RademacherOptions { steps: 30, ..Default::default() };
        let taus = [0.3, 0.0, 0.1, 1.0];
        let v = rademacher_mc_sweep(&w, &d, &taus, 3, opts).unwrap();
        assert!(v[1] <= v[2] && v[2] <= v[0] && v[0] <= v[3]);
    }

    #[test]
    fn degenerate_width_rejected() {
        let cfg = NetworkConfig::new(2, vec![1, 2], 1).unwrap();
        let w = he_init(&cfg).unwrap();
        let (_, d) = tiny();
        assert!(main_bound(&w, &w, &d).is_err());
    }
}
