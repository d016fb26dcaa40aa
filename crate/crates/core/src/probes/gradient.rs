use ndarray::{Array2, Axis};

use super::{inputs, ProbeReport, Threshold};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::linalg::frobenius;
use crate::network::{forward_batch, per_sample_gradient_norms, Weights};
use crate::training::{loss_derivative, pass};

/// The active-fraction floor `1/(2√2)`.
pub const ACTIVE_FRACTION_FLOOR: f64 = 0.353_553_390_593_273_8;

/// Output-gradient norms against `√m` and loss-gradient norms against
/// `√m · E_S`, per layer, with `m` the smallest width.
pub fn grad_upper_probe(w: &Weights, data: &Dataset) -> Result<ProbeReport> {
    data.require_nonempty()?;
    let mut report = ProbeReport::new("grad-upper");
    let (depth, n) = (w.depth(), data.len());
    let m = w.config().min_width() as f64;
    let base = [("L", depth as f64), ("m", m), ("n", n as f64)];
    let trace = forward_batch(w, data.inputs())?;
    let norms = per_sample_gradient_norms(w, &trace);
    for i in 0..n {
        for l in 1..=depth {
            let mut at = inputs(&base);
            at.extend(inputs(&[("layer", l as f64), ("sample", i as f64)]));
            report.push("output_gradient", at, norms[[i, l - 1]], Some(m.sqrt()));
        }
    }
    let p = pass(w, data, true)?;
    let grads = p.grad.as_ref().expect("gradient requested");
    let es = p.surrogate();
    let weights: Vec<f64> = (0..n)
        .map(|i| -loss_derivative(data.label(i) * trace.outputs[i]) / n as f64)
        .collect();
    for l in 1..=depth {
        let g = frobenius(grads.grads[l - 1].view());
        let mut at = inputs(&base);
        at.extend(inputs(&[("layer", l as f64), ("surrogate_error", es)]));
        report.push("loss_gradient", at.clone(), g, Some(m.sqrt() * es));
        let triangle: f64 = (0..n).map(|i| weights[i] * norms[[i, l - 1]]).sum();
        report.push("loss_gradient_triangle", at, g, Some(triangle));
    }
    Ok(report.finish())
}

/// `B̂ = ‖∇_{W_L} L_S‖_F / (√m E_S)` against `2^{-L} γ` and `γ`, plus the
/// norm of the init-pattern surrogate
/// `Ḡ = (1/n) Σ ℓ'(y_i f(x_i)) y_i x^(0)_{L-1,i} (v ⊙ Σ^(0)_L(x_i))ᵀ`.
pub fn grad_lower_probe(w: &Weights, w0: &Weights, data: &Dataset, gamma: f64) -> Result<ProbeReport> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::Input(format!("gamma must be positive, got {gamma}")));
    }
    if !w.same_architecture(w0) {
        return Err(Error::Input("weights and initialization differ in architecture".into()));
    }
    data.require_nonempty()?;
    let mut report = ProbeReport::new("grad-lower");
    let (depth, n) = (w.depth(), data.len());
    let m = w.config().min_width() as f64;
    let p = pass(w, data, true)?;
    let es = p.surrogate();
    let g_last = frobenius(p.grad.as_ref().expect("gradient requested").grads[depth - 1].view());
    let b_hat = g_last / (m.sqrt() * es);
    let at = inputs(&[("L", depth as f64), ("gamma", gamma), ("m", m), ("n", n as f64), ("surrogate_error", es)]);
    report.push("last_layer_gradient", at.clone(), g_last, Some(m.sqrt() * es));
    report.push("b_hat_random_feature", at.clone(), b_hat, Some(0.5f64.powi(depth as i32) * gamma));
    report.push("b_hat_conjugate_kernel", at.clone(), b_hat, Some(gamma));

    let now = forward_batch(w, data.inputs())?;
    let init = forward_batch(w0, data.inputs())?;
    let v = w0.output();
    let last = &init.layer_outputs[depth];
    let mut masked = Array2::<f64>::zeros(last.dim());
    for i in 0..n {
        let y = data.label(i);
        let c = loss_derivative(y * now.outputs[i]) * y / n as f64;
        for j in 0..last.ncols() {
            if last[[i, j]] > 0.0 {
                masked[[i, j]] = c * v[j];
            }
        }
    }
    let g_bar = init.layer_outputs[depth - 1].t().dot(&masked);
    report.push("g_bar", at, frobenius(g_bar.view()), Some(m.sqrt() * es));
    Ok(report.finish())
}

/// `max_i |f(x_i)|` against `√(log n)`; for a single sample only the raw
/// value is reported.
pub fn init_output_probe(w0: &Weights, data: &Dataset) -> Result<ProbeReport> {
    data.require_nonempty()?;
    let mut report = ProbeReport::new("init-output");
    let trace = forward_batch(w0, data.inputs())?;
    let n = data.len();
    let abs = trace.outputs.mapv(f64::abs);
    let max = abs.iter().copied().fold(0.0, f64::max);
    let at = inputs(&[("L", w0.depth() as f64), ("m", w0.config().min_width() as f64), ("n", n as f64)]);
    let rhs = (n > 1).then(|| (n as f64).ln().sqrt());
    report.push("max_abs_output", at.clone(), max, rhs);
    report.push("mean_abs_output", at, abs.mean().unwrap_or(0.0), None);
    Ok(report.finish())
}

/// `Σ_j ‖(1/n) Σ_i a_i y_i σ'(w_{L,j}ᵀ x_{L-1,i}) x_{L-1,i}‖²` at
/// initialization against `4^{-L}/8 · m_L · γ² · (mean a)²`, and the
/// per-sample active fractions of layer `L` against `1/(2√2)`.
pub fn gmatrix_probe(w0: &Weights, data: &Dataset, a: &[f64], gamma: f64) -> Result<ProbeReport> {
    data.require_nonempty()?;
    if a.len() != data.len() {
        return Err(Error::Input(format!("{} weights for {} samples", a.len(), data.len())));
    }
    if let Some(i) = a.iter().position(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::Input(format!("a[{i}] = {} is not positive", a[i])));
    }
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::Input(format!("gamma must be positive, got {gamma}")));
    }
    let mut report = ProbeReport::new("gmatrix");
    let (depth, n) = (w0.depth(), data.len());
    let trace = forward_batch(w0, data.inputs())?;
    let last = &trace.layer_outputs[depth];
    let m_last = last.ncols();
    let mut masked = Array2::<f64>::zeros(last.dim());
    for (i, mut row) in masked.axis_iter_mut(Axis(0)).enumerate() {
        let c = a[i] * data.label(i) / n as f64;
        for (j, x) in row.iter_mut().enumerate() {
            if last[[i, j]] > 0.0 {
                *x = c;
            }
        }
    }
    let g = trace.layer_outputs[depth - 1].t().dot(&masked);
    let lhs = g.iter().map(|v| v * v).sum::<f64>();
    let mean_a = a.iter().sum::<f64>() / n as f64;
    let rhs = 0.25f64.powi(depth as i32) / 8.0 * m_last as f64 * gamma * gamma * mean_a * mean_a;
    report.push(
        "gmatrix",
        inputs(&[("L", depth as f64), ("gamma", gamma), ("m", m_last as f64), ("n", n as f64)]),
        lhs,
        Some(rhs),
    );
    for i in 0..n {
        let active = last.row(i).iter().filter(|&&v| v > 0.0).count();
        report.push(
            "active_fraction",
            inputs(&[("m", m_last as f64), ("sample", i as f64)]),
            active as f64 / m_last as f64,
            Some(ACTIVE_FRACTION_FLOOR),
        );
    }
    report.thresholds.push(Threshold {
        name: "active_fraction_floor".into(),
        value: ACTIVE_FRACTION_FLOOR,
        source: "analytic constant of the active-fraction step".into(),
    });
    Ok(report.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::norm2;
    use crate::network::{forward, he_init, network_gradient, NetworkConfig};

    fn one_sample() -> Dataset {
        Dataset::from_rows(&[vec![0.6, 0.0, 0.8]], vec![1.0]).unwrap()
    }

    #[test]
    fn single_sample_b_hat_closed_form() {
        let w = he_init(&NetworkConfig::uniform(3, 2, 32, 8).unwrap()).unwrap();
        let s = one_sample();
        let r = grad_lower_probe(&w, &w, &s, 0.1).unwrap();
        let t = forward(&w, s.input(0)).unwrap();
        let masked: f64 = t.pattern(2).iter().by_vals().filter(|b| *b).count() as f64;
        let expect = norm2(t.layer_outputs[1].view()) * masked.sqrt() / 32f64.sqrt();
        let got = r.records_for("b_hat_random_feature").next().unwrap().lhs;
        assert!((got - expect).abs() <= 1e-12 * expect);
    }

    #[test]
    fn rank_one_norm_identity() {
        let w = he_init(&NetworkConfig::uniform(3, 3, 16, 4).unwrap()).unwrap();
        let s = one_sample();
        let r = grad_upper_probe(&w, &s).unwrap();
        let g = network_gradient(&w, &forward(&w, s.input(0)).unwrap()).unwrap();
        for (l, rec) in r.records_for("output_gradient").enumerate() {
            let direct = frobenius(g.grads[l].view());
            assert!((rec.lhs - direct).abs() <= 1e-12 * direct.max(1e-300));
        }
        for rec in r.records_for("loss_gradient_triangle") {
            assert!(rec.ratio.unwrap() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn gmatrix_single_sample() {
        let w = he_init(&NetworkConfig::uniform(3, 2, 16, 4).unwrap()).unwrap();
        let s = one_sample();
        let r = gmatrix_probe(&w, &s, &[1.0], 0.5).unwrap();
        let t = forward(&w, s.input(0)).unwrap();
        let count = t.pattern(2).count_ones() as f64;
        let x = norm2(t.layer_outputs[1].view());
        let lhs = r.records_for("gmatrix").next().unwrap().lhs;
        assert!((lhs - count * x * x).abs() <= 1e-12 * lhs.max(1e-300));
        let frac = r.records_for("active_fraction").next().unwrap().lhs;
        assert_eq!(frac, t.active_fraction(2));
    }

    #[test]
    fn invalid_arguments() {
        let w = he_init(&NetworkConfig::uniform(3, 2, 16, 4).unwrap()).unwrap();
        let s = one_sample();
        assert!(grad_lower_probe(&w, &w, &s, 0.0).is_err());
        assert!(gmatrix_probe(&w, &s, &[0.0], 0.5).is_err());
        assert!(gmatrix_probe(&w, &s, &[1.0, 1.0], 0.5).is_err());
    }

    #[test]
    fn init_output_single_sample_has_no_ratio() {
        let w = he_init(&NetworkConfig::uniform(3, 2, 16, 4).unwrap()).unwrap();
        let r = init_output_probe(&w, &one_sample()).unwrap();
        let rec = r.records_for("max_abs_output").next().unwrap();
        assert!(rec.rhs.is_none() && rec.ratio.is_none());
    }
}
