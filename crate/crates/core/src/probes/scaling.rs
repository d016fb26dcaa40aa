use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Axis, Zip};

use super::{inputs, perturb, PerturbationSpec, ProbeReport};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{norm2, spectral_norm, Dense, SpectralOptions};
use crate::network::{batch_backprop, batch_sensitivities, forward, forward_batch, BatchTrace, MaskedProduct, Weights};
use crate::training::{loss_derivative, pass};

#[derive(Debug, Clone, Copy)]
pub struct ScalingOptions {
    /// Samples whose masked-product operator norms are estimated; the
    /// estimate costs a Krylov solve per sample and layer.
    pub operator_norm_samples: usize,
    pub spectral: SpectralOptions,
}

impl Default for ScalingOptions {
    fn default() -> Self {
        Self { operator_norm_samples: 4, spectral: SpectralOptions::default() }
    }
}

fn m_log_m(m: usize) -> f64 {
    let m = m as f64;
    (m * m.ln()).sqrt()
}

fn spectral_norms(mats: &[Array2<f64>], opts: SpectralOptions) -> Result<Vec<f64>> {
    mats.iter().map(|d| Ok(spectral_norm(&Dense(d.view()), opts)?.value)).collect()
}

/// Items evaluated at a single point `W̃`: weight and hidden norms, masked
/// product operator norms, and the output-row norms `‖g_{l-1}‖`.
fn tilde_items(
    report: &mut ProbeReport,
    w: &Weights,
    trace: &BatchTrace,
    data: &Dataset,
    point: f64,
    tau: f64,
    opts: &ScalingOptions,
) -> Result<()> {
    let depth = w.depth();
    let lf = depth as f64;
    let m = w.config().min_width();
    let norms = spectral_norms(w.layers(), opts.spectral)?;
    for (l, s) in norms.iter().enumerate() {
        report.push("weight_spectral_norm", inputs(&[("layer", (l + 1) as f64), ("point", point), ("tau", tau)]), *s, Some(1.0));
    }
    let gs = batch_sensitivities(w, trace);
    for i in 0..trace.len() {
        for l in 1..=depth {
            let h = norm2(trace.layer_outputs[l].row(i));
            let at = inputs(&[("layer", l as f64), ("point", point), ("sample", i as f64), ("tau", tau)]);
            report.push("hidden_norm", at.clone(), h, Some(1.0));
            report.push("output_row_norm", at, norm2(gs[l - 1].row(i)), Some((m as f64).sqrt()));
        }
    }
    for i in 0..opts.operator_norm_samples.min(data.len()) {
        let single = forward(w, data.input(i))?;
        for l in 1..=depth {
            let op = MaskedProduct { weights: w, trace: &single, from: l };
            let est = spectral_norm(&op, opts.spectral)?;
            report.push(
                "masked_product_norm",
                inputs(&[("layer", l as f64), ("point", point), ("sample", i as f64), ("tau", tau)]),
                est.value,
                Some(lf),
            );
        }
    }
    Ok(())
}

pub fn scaling_probe(w0: &Weights, perturbations: &[PerturbationSpec], data: &Dataset) -> Result<ProbeReport> {
    scaling_probe_with(w0, perturbations, data, ScalingOptions::default())
}

/// Scaling properties at `W̃ = W^(0)` and at each perturbed `Ŵ`, plus the
/// difference items between the pair `(W^(0), Ŵ)`.
pub fn scaling_probe_with(
    w0: &Weights,
    perturbations: &[PerturbationSpec],
    data: &Dataset,
    opts: ScalingOptions,
) -> Result<ProbeReport> {
    data.require_nonempty()?;
    let mut report = ProbeReport::new("scaling");
    let depth = w0.depth();
    let lf = depth as f64;
    let m = w0.config().min_width();
    let mf = m as f64;
    let base = forward_batch(w0, data.inputs())?;
    let g0 = batch_sensitivities(w0, &base);
    tilde_items(&mut report, w0, &base, data, 0.0, 0.0, &opts)?;

    let mut by_tau: BTreeMap<u64, (f64, f64, f64, usize)> = BTreeMap::new();
    for (p, spec) in perturbations.iter().enumerate() {
        let tau = spec.tau;
        let w_hat = perturb(w0, spec, data)?;
        let hat = forward_batch(&w_hat, data.inputs())?;
        let diffs: Vec<Array2<f64>> = w_hat.layers().iter().zip(w0.layers()).map(|(a, b)| a - b).collect();
        let diff_norms = spectral_norms(&diffs, opts.spectral)?;
        let point = (p + 1) as f64;
        tilde_items(&mut report, &w_hat, &hat, data, point, tau, &opts)?;

        let flips_rhs = lf.powf(4.0 / 3.0) * tau.powf(2.0 / 3.0) * mf;
        let sparse_rhs = lf.powf(2.0 / 3.0) * tau.powf(1.0 / 3.0) * m_log_m(m);
        let entry = by_tau.entry(tau.to_bits()).or_insert((tau, 0.0, 0.0, 0));
        for i in 0..data.len() {
            let mut cumulative = 0.0;
            for l in 1..=depth {
                cumulative += diff_norms[l - 1];
                let at = inputs(&[("layer", l as f64), ("point", point), ("sample", i as f64), ("tau", tau)]);
                let xh = hat.layer_outputs[l].row(i);
                let xt = base.layer_outputs[l].row(i);
                let diff = norm2((&xh - &xt).view());
                report.push("hidden_difference", at.clone(), diff, Some(lf.sqrt() * cumulative));

                let g = g0[l].row(i);
                let mut flips = 0usize;
                let mut sparse_sq = 0.0;
                for j in 0..xh.len() {
                    if (xh[j] > 0.0) != (xt[j] > 0.0) {
                        flips += 1;
                        sparse_sq += g[j] * g[j];
                    }
                }
                report.push("pattern_flips", at.clone(), flips as f64, Some(flips_rhs));
                report.push("sparse_output_row", at, sparse_sq.sqrt(), Some(sparse_rhs));
                entry.1 += flips as f64;
                entry.2 += diff;
                entry.3 += 1;
            }
        }
    }
    let (mut taus, mut flips, mut diffs) = (Vec::new(), Vec::new(), Vec::new());
    for (tau, f, d, count) in by_tau.into_values() {
        taus.push(tau);
        flips.push(f / count as f64);
        diffs.push(d / count as f64);
    }
    report.fit_slope("pattern_flips", "tau", &taus, &flips);
    report.fit_slope("hidden_difference", "tau", &taus, &diffs);
    Ok(report.finish())
}

/// Output and loss linearization residuals between `W̃` and `Ŵ`.
///
/// `τ` is taken as `max_l ‖Ŵ_l - W̃_l‖_F`, the smallest radius of a ball
/// around `W̃` containing `Ŵ`.
pub fn semismoothness_probe(w_tilde: &Weights, w_hat: &Weights, data: &Dataset) -> Result<ProbeReport> {
    let mut report = ProbeReport::new("semismoothness");
    semismoothness_into(&mut report, w_tilde, w_hat, data, SpectralOptions::default())?;
    Ok(report.finish())
}

fn semismoothness_into(
    report: &mut ProbeReport,
    w_tilde: &Weights,
    w_hat: &Weights,
    data: &Dataset,
    spectral: SpectralOptions,
) -> Result<f64> {
    if !w_tilde.same_architecture(w_hat) {
        return Err(Error::Input("semismoothness probe needs weights of one architecture".into()));
    }
    data.require_nonempty()?;
    let depth = w_tilde.depth();
    let lf = depth as f64;
    let m = w_tilde.config().min_width();
    let n = data.len();
    let tilde = forward_batch(w_tilde, data.inputs())?;
    let hat = forward_batch(w_hat, data.inputs())?;
    let diffs: Vec<Array2<f64>> = w_hat.layers().iter().zip(w_tilde.layers()).map(|(a, b)| a - b).collect();
    let tau = diffs.iter().map(|d| crate::linalg::frobenius(d.view())).fold(0.0, f64::max);
    let spec_norms = spectral_norms(&diffs, spectral)?;
    let spec_sum: f64 = spec_norms.iter().sum();
    let spec_sq: f64 = spec_norms.iter().map(|s| s * s).sum();

    let ones = Array1::ones(n);
    let deltas = batch_backprop(w_tilde, &tilde, ones.view());
    let mut linear = Array1::<f64>::zeros(n);
    for l in 1..=depth {
        let moved = tilde.layer_outputs[l - 1].dot(&diffs[l - 1]);
        let per_sample = (&moved * &deltas[l - 1]).sum_axis(Axis(1));
        linear += &per_sample;
    }
    let coef = lf * lf * tau.powf(1.0 / 3.0) * m_log_m(m);
    let out_rhs = coef * spec_sum;
    let mut worst: f64 = 0.0;
    Zip::indexed(&linear).for_each(|i, &lin| {
        let residual = (hat.outputs[i] - (tilde.outputs[i] + lin)).abs();
        worst = worst.max(residual);
        report.push("output_residual", inputs(&[("sample", i as f64), ("tau", tau)]), residual, Some(out_rhs));
    });

    let p_tilde = pass(w_tilde, data, false)?;
    let p_hat = pass(w_hat, data, false)?;
    let mut first_order = 0.0;
    for i in 0..n {
        let y = data.label(i);
        first_order += loss_derivative(y * tilde.outputs[i]) * y * linear[i];
    }
    first_order /= n as f64;
    let loss_residual = p_hat.loss() - p_tilde.loss() - first_order;
    let loss_rhs = coef * spec_sum * p_tilde.surrogate() + m as f64 * lf.powi(3) * spec_sq;
    report.push("loss_residual", inputs(&[("tau", tau)]), loss_residual, Some(loss_rhs));
    Ok(worst)
}

/// Residuals for `Ŵ` on the `τ`-sphere along a fixed direction, for each
/// radius, with the slope of the maximum output residual against `τ`.
pub fn semismoothness_sweep(
    w0: &Weights,
    data: &Dataset,
    taus: &[f64],
    template: &PerturbationSpec,
) -> Result<ProbeReport> {
    let mut report = ProbeReport::new("semismoothness");
    let mut worst = Vec::with_capacity(taus.len());
    for &tau in taus {
        let spec = PerturbationSpec { tau, ..template.clone() };
        let w_hat = perturb(w0, &spec, data)?;
        worst.push(semismoothness_into(&mut report, w0, &w_hat, data, SpectralOptions::default())?);
    }
    for (&tau, &r) in taus.iter().zip(&worst) {
        report.push("max_output_residual", inputs(&[("tau", tau)]), r, None);
    }
    report.fit_slope("max_output_residual", "tau", taus, &worst);
    Ok(report.finish())
}
