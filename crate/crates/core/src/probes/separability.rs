use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::{inputs, ProbeReport};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::kernel::{solve_hard_margin_dual, DualOptions};
use crate::network::{forward_batch, Weights};
use crate::rng::{self, unit_sphere, Domain};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeparabilityOptions {
    /// Subgradient steps per start.
    pub iterations: usize,
    /// Random starts in addition to the dual and class-mean starts.
    pub restarts: usize,
    /// Sweep cap for the linear-kernel dual warm start.
    pub dual_sweeps: usize,
    pub seed: u64,
}

impl Default for SeparabilityOptions {
    fn default() -> Self {
        Self { iterations: 2000, restarts: 3, dual_sweeps: 2000, seed: 0 }
    }
}

/// Best unit direction found for `max_{‖u‖=1} min_i y_i uᵀ x_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginSearch {
    pub margin: f64,
    pub direction: Vec<f64>,
    /// Dual bound `1/sqrt(2D)`; only finite on separable data.
    pub upper_bound: Option<f64>,
    pub converged: bool,
}

impl MarginSearch {
    pub fn separable(&self) -> bool {
        self.margin > 0.0
    }
}

fn normalize(u: &mut Array1<f64>) -> bool {
    let n = u.dot(u).sqrt();
    if n > 0.0 && n.is_finite() {
        *u /= n;
        true
    } else {
        false
    }
}

fn min_margin(z: &Array2<f64>, u: &Array1<f64>) -> (f64, usize) {
    z.dot(u)
        .iter()
        .enumerate()
        .fold((f64::INFINITY, 0), |(best, at), (i, &v)| if v < best { (v, i) } else { (best, at) })
}

/// Max-min margin over the unit sphere. The hard-margin dual on the
/// linear kernel is solved first; when it converges its direction is
/// optimal. Otherwise projected subgradient ascent refines it and the
/// class-mean and random starts.
pub fn max_min_margin(x: ArrayView2<f64>, labels: &[f64], opts: SeparabilityOptions) -> Result<MarginSearch> {
    if x.nrows() != labels.len() {
        return Err(Error::Input(format!("{} rows but {} labels", x.nrows(), labels.len())));
    }
    if labels.is_empty() || x.ncols() == 0 {
        return Err(Error::Input("margin search needs at least one sample and one feature".into()));
    }
    let mut z = x.to_owned();
    for (mut row, &y) in z.axis_iter_mut(Axis(0)).zip(labels) {
        row *= y;
    }
    let gram = x.dot(&x.t());
    let dual = solve_hard_margin_dual(
        gram.view(),
        labels,
        DualOptions { max_sweeps: opts.dual_sweeps, ..DualOptions::default() },
    );
    let diverged = !dual.converged && (dual.alpha.sum() > 1e15 || !dual.alpha.iter().all(|v| v.is_finite()));
    let upper = dual.margin_upper_bound();
    let upper_bound = upper.is_finite().then_some(upper);

    let mut starts = Vec::new();
    let mut u = z.t().dot(&dual.alpha);
    let dual_ok = dual.alpha.iter().all(|v| v.is_finite()) && normalize(&mut u);
    if dual_ok {
        starts.push(u);
    }
    let mut best = match starts.first() {
        Some(u) => (min_margin(&z, u).0, u.clone()),
        None => (f64::NEG_INFINITY, Array1::zeros(x.ncols())),
    };
    if dual.converged && dual_ok {
        return Ok(MarginSearch { margin: best.0, direction: best.1.to_vec(), upper_bound, converged: true });
    }

    let mut mean = z.mean_axis(Axis(0)).expect("nonempty");
    if normalize(&mut mean) {
        starts.push(mean);
    }
    for r in 0..opts.restarts {
        let mut g = rng::stream(opts.seed, Domain::MarginRestart, r as u64);
        starts.push(Array1::from(unit_sphere(&mut g, x.ncols())));
    }
    for mut u in starts {
        for t in 0..opts.iterations {
            let (m, i) = min_margin(&z, &u);
            if m > best.0 {
                best = (m, u.clone());
            }
            let step = 1.0 / ((t + 1) as f64).sqrt();
            u.scaled_add(step, &z.row(i));
            if !normalize(&mut u) {
                break;
            }
        }
        let (m, _) = min_margin(&z, &u);
        if m > best.0 {
            best = (m, u);
        }
    }
    Ok(MarginSearch {
        margin: best.0,
        direction: best.1.to_vec(),
        upper_bound,
        converged: diverged && best.0 <= 0.0,
    })
}

/// Max-min margin of the hidden representations `x^(0)_l`, `l = 0..L`,
/// against `2^{-(l+1)} γ`.
pub fn hidden_separability_probe(
    w0: &Weights,
    data: &Dataset,
    gamma: f64,
    opts: SeparabilityOptions,
) -> Result<ProbeReport> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::Input(format!("gamma must be positive, got {gamma}")));
    }
    data.require_nonempty()?;
    let mut report = ProbeReport::new("hidden-separability");
    let trace = forward_batch(w0, data.inputs())?;
    for (l, x) in trace.layer_outputs.iter().enumerate() {
        let search = max_min_margin(x.view(), data.labels(), opts)?;
        let at = inputs(&[("gamma", gamma), ("layer", l as f64), ("m", x.ncols() as f64), ("n", data.len() as f64)]);
        let rhs = 0.5f64.powi(l as i32 + 1) * gamma;
        report.push("hidden_margin", at.clone(), search.margin, Some(rhs));
        if let Some(ub) = search.upper_bound {
            report.push("hidden_margin_upper_bound", at, ub, Some(rhs));
        }
        report.flags.insert(format!("layer_{l}_separable"), search.separable());
        report.flags.insert(format!("layer_{l}_converged"), search.converged);
    }
    Ok(report.finish())
}
