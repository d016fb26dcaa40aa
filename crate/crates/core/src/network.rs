//! Bias-free deep ReLU networks in matrix-product form.
//!
//! The network maps `x -> v^T σ(W_L^T σ(... σ(W_1^T x)))` where each
//! `W_l` has shape `m_{l-1} x m_l`, `m_0 = d`, and the output vector `v`
//! is fixed to half `+1` and half `-1` entries. With the binary activation
//! patterns `Σ_l(x)` the output and its gradients are products of masked
//! matrices:
//!
//! ```text
//! f(x)          = v^T [Π_{r=1..L} Σ_r W_r^T] x
//! ∇_{W_l} f(x)  = x_{l-1} v^T [Π_{r=l+1..L} Σ_r W_r^T] Σ_l
//! ```
//!
//! Patterns are packed bit vectors and the products are only ever applied
//! to vectors, right to left.

use bitvec::prelude::*;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{frobenius, LinearOperator};
use crate::rng::{self, Domain};

pub type Pattern = BitVec<u64, Lsb0>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub input_dim: usize,
    /// Hidden widths `m_1..m_L`; the depth is `widths.len()`.
    pub widths: Vec<usize>,
    pub master_seed: u64,
}

impl NetworkConfig {
    pub fn new(input_dim: usize, widths: Vec<usize>, master_seed: u64) -> Result<Self> {
        let c = Self { input_dim, widths, master_seed };
        c.validate()?;
        Ok(c)
    }

    /// Uniform width `m` across `depth` layers.
    pub fn uniform(input_dim: usize, depth: usize, width: usize, master_seed: u64) -> Result<Self> {
        Self::new(input_dim, vec![width; depth], master_seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be positive".into()));
        }
        if self.widths.is_empty() {
            return Err(Error::Config("depth must be at least 1".into()));
        }
        if let Some(l) = self.widths.iter().position(|&m| m == 0) {
            return Err(Error::Config(format!("width of layer {} must be positive", l + 1)));
        }
        let last = *self.widths.last().unwrap();
        if last % 2 != 0 {
            return Err(Error::Config(format!(
                "last hidden width must be even for the balanced output vector, got {last}"
            )));
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.widths.len()
    }

    /// `m_l` for `l = 0..=L`, with `m_0 = d`.
    pub fn dim(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input_dim
        } else {
            self.widths[layer - 1]
        }
    }

    pub fn min_width(&self) -> usize {
        *self.widths.iter().min().unwrap()
    }

    pub fn max_width(&self) -> usize {
        *self.widths.iter().max().unwrap()
    }

    /// `M/m`, reported but never enforced.
    pub fn width_ratio(&self) -> f64 {
        self.max_width() as f64 / self.min_width() as f64
    }
}

/// Trainable matrices `W_1..W_L` plus the fixed output vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    config: NetworkConfig,
    layers: Vec<Array2<f64>>,
    output: Array1<f64>,
}

/// The balanced output vector: first half `+1`, second half `-1`.
pub fn output_vector(width: usize) -> Array1<f64> {
    Array1::from_shape_fn(width, |j| if j < width / 2 { 1.0 } else { -1.0 })
}

impl Weights {
    pub fn from_parts(config: NetworkConfig, layers: Vec<Array2<f64>>, output: Array1<f64>) -> Result<Self> {
        config.validate()?;
        if layers.len() != config.depth() {
            return Err(Error::Input(format!(
                "expected {} layer matrices, got {}",
                config.depth(),
                layers.len()
            )));
        }
        for (l, w) in layers.iter().enumerate() {
            let want = (config.dim(l), config.dim(l + 1));
            if w.dim() != want {
                return Err(Error::Input(format!(
                    "layer {} has shape {:?}, expected {:?}",
                    l + 1,
                    w.dim(),
                    want
                )));
            }
        }
        let m_last = config.dim(config.depth());
        if output.len() != m_last {
            return Err(Error::Input("output vector length differs from last width".into()));
        }
        let plus = output.iter().filter(|&&v| v == 1.0).count();
        let minus = output.iter().filter(|&&v| v == -1.0).count();
        if plus != m_last / 2 || minus != m_last / 2 {
            return Err(Error::Input("output vector must hold m_L/2 entries of +1 and of -1".into()));
        }
        Ok(Self { config, layers, output })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[Array2<f64>] {
        &self.layers
    }

    /// `W_l` for `l` in `1..=L`.
    pub fn layer(&self, l: usize) -> &Array2<f64> {
        &self.layers[l - 1]
    }

    pub fn layers_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.layers
    }

    pub fn output(&self) -> &Array1<f64> {
        &self.output
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|w| w.iter().all(|v| v.is_finite()))
    }

    /// Per-layer Frobenius distance `||W_l - W'_l||_F`.
    pub fn distances(&self, other: &Weights) -> Vec<f64> {
        self.layers
            .iter()
            .zip(&other.layers)
            .map(|(a, b)| frobenius((a - b).view()))
            .collect()
    }

    pub fn frobenius_norms(&self) -> Vec<f64> {
        self.layers.iter().map(|w| frobenius(w.view())).collect()
    }

    /// `W_l += alpha * D_l` for every layer.
    pub fn add_scaled(&mut self, alpha: f64, delta: &[Array2<f64>]) {
        for (w, d) in self.layers.iter_mut().zip(delta) {
            w.scaled_add(alpha, d);
        }
    }

    pub fn same_architecture(&self, other: &Weights) -> bool {
        self.config.input_dim == other.config.input_dim && self.config.widths == other.config.widths
    }
}

/// Gaussian initialization with entries of `W_l` drawn from `N(0, 2/m_l)`.
///
/// Layer `l` draws from its own stream keyed by `(master_seed, l)`, filling
/// the matrix in row-major order.
pub fn he_init(config: &NetworkConfig) -> Result<Weights> {
    config.validate()?;
    let layers = (1..=config.depth())
        .map(|l| {
            let (rows, cols) = (config.dim(l - 1), config.dim(l));
            let std = (2.0 / cols as f64).sqrt();
            let mut r = rng::stream(config.master_seed, Domain::LayerInit, l as u64);
            let mut data = vec![0.0; rows * cols];
            rng::fill_normal(&mut r, &mut data);
            data.iter_mut().for_each(|v| *v *= std);
            Array2::from_shape_vec((rows, cols), data).expect("shape matches buffer")
        })
        .collect();
    let output = output_vector(config.dim(config.depth()));
    Weights::from_parts(config.clone(), layers, output)
}

#[inline]
fn relu(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        0.0
    }
}

/// Hidden outputs, activation patterns, and the output for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// `x_0..x_L`, where `x_0` is the input.
    pub layer_outputs: Vec<Array1<f64>>,
    /// `Σ_1..Σ_L` as bit vectors; bit `j` of layer `l` is `1{w_{l,j}^T x_{l-1} > 0}`.
    pub patterns: Vec<Pattern>,
    pub output: f64,
}

impl ForwardTrace {
    pub fn depth(&self) -> usize {
        self.patterns.len()
    }

    /// Pattern of layer `l` in `1..=L`.
    pub fn pattern(&self, l: usize) -> &Pattern {
        &self.patterns[l - 1]
    }

    /// Fraction of active units in layer `l`.
    pub fn active_fraction(&self, l: usize) -> f64 {
        let p = self.pattern(l);
        p.count_ones() as f64 / p.len() as f64
    }
}

fn check_finite(x: ArrayView1<f64>) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric("input contains non-finite entries".into()))
    }
}

pub fn forward(w: &Weights, x: ArrayView1<f64>) -> Result<ForwardTrace> {
    if x.len() != w.config.input_dim {
        return Err(Error::Input(format!(
            "input has dimension {}, network expects {}",
            x.len(),
            w.config.input_dim
        )));
    }
    check_finite(x)?;
    let mut outputs = Vec::with_capacity(w.depth() + 1);
    let mut patterns = Vec::with_capacity(w.depth());
    outputs.push(x.to_owned());
    for wl in &w.layers {
        let pre = wl.t().dot(outputs.last().unwrap());
        let pattern: Pattern = pre.iter().map(|&z| z > 0.0).collect();
        outputs.push(pre.mapv(relu));
        patterns.push(pattern);
    }
    let output = w.output.dot(outputs.last().unwrap());
    if !output.is_finite() {
        return Err(Error::Numeric("network output is not finite".into()));
    }
    Ok(ForwardTrace { layer_outputs: outputs, patterns, output })
}

fn mask(values: &mut Array1<f64>, pattern: &Pattern) {
    for (v, bit) in values.iter_mut().zip(pattern.iter()) {
        if !*bit {
            *v = 0.0;
        }
    }
}

/// Backward sensitivities `g_0..g_L` of the output.
///
/// `g_L = v` and `g_{l-1} = W_l Σ_l g_l`, so `g_l^T = v^T Π_{r=l+1..L} Σ_r W_r^T`
/// (unmasked) and the gradient row vector of layer `l` is `Σ_l g_l`.
pub fn sensitivities(w: &Weights, trace: &ForwardTrace) -> Vec<Array1<f64>> {
    let depth = w.depth();
    let mut gs = vec![Array1::zeros(0); depth + 1];
    gs[depth] = w.output.clone();
    for l in (1..=depth).rev() {
        let mut delta = gs[l].clone();
        mask(&mut delta, trace.pattern(l));
        gs[l - 1] = w.layer(l).dot(&delta);
    }
    gs
}

/// Masked sensitivities `δ_l = Σ_l g_l` for `l = 1..=L` (index `l - 1`).
pub fn backprop_rows(w: &Weights, trace: &ForwardTrace) -> Vec<Array1<f64>> {
    let depth = w.depth();
    let mut deltas: Vec<Array1<f64>> = vec![Array1::zeros(0); depth];
    let mut delta = w.output.clone();
    for l in (1..=depth).rev() {
        mask(&mut delta, trace.pattern(l));
        let next = if l > 1 { w.layer(l).dot(&delta) } else { Array1::zeros(0) };
        deltas[l - 1] = std::mem::replace(&mut delta, next);
    }
    deltas
}

/// Per-layer gradients `∇_{W_l} f`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub grads: Vec<Array2<f64>>,
}

impl GradientSet {
    pub fn zeros_like(w: &Weights) -> Self {
        Self {
            grads: w.layers.iter().map(|m| Array2::zeros(m.dim())).collect(),
        }
    }

    pub fn frobenius_norms(&self) -> Vec<f64> {
        self.grads.iter().map(|g| frobenius(g.view())).collect()
    }

    pub fn add_assign(&mut self, other: &GradientSet) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            *a += b;
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in &mut self.grads {
            *g *= c;
        }
    }
}

fn outer(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    let col = a.insert_axis(Axis(1));
    let row = b.insert_axis(Axis(0));
    col.dot(&row)
}

/// Exact gradient of the output with respect to every `W_l`.
///
/// Verifies one layer of the trace against the weights first (the layer is
/// picked from the trace contents) and fails with [`Error::StaleTrace`] when
/// they disagree.
pub fn network_gradient(w: &Weights, trace: &ForwardTrace) -> Result<GradientSet> {
    if trace.depth() != w.depth() || trace.layer_outputs[0].len() != w.config.input_dim {
        return Err(Error::Input("trace does not match the network architecture".into()));
    }
    let ones: usize = trace.patterns.iter().map(|p| p.count_ones()).sum();
    let l = 1 + ones % w.depth();
    let pre = w.layer(l).t().dot(&trace.layer_outputs[l - 1]);
    let consistent = pre
        .iter()
        .zip(trace.pattern(l).iter())
        .all(|(&z, bit)| (z > 0.0) == *bit);
    if !consistent {
        return Err(Error::StaleTrace { layer: l });
    }
    let deltas = backprop_rows(w, trace);
    Ok(GradientSet {
        grads: (1..=w.depth())
            .map(|l| outer(trace.layer_outputs[l - 1].view(), deltas[l - 1].view()))
            .collect(),
    })
}

/// Hidden outputs for a batch of inputs, one row per sample.
#[derive(Debug, Clone)]
pub struct BatchTrace {
    /// `X_0..X_L`, each of shape `n x m_l`.
    pub layer_outputs: Vec<Array2<f64>>,
    pub outputs: Array1<f64>,
}

impl BatchTrace {
    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }

    /// Whether unit `j` of layer `l` is active for sample `i`.
    pub fn active(&self, l: usize, i: usize, j: usize) -> bool {
        self.layer_outputs[l][[i, j]] > 0.0
    }

    /// Pattern of sample `i` at layer `l`.
    pub fn pattern(&self, l: usize, i: usize) -> Pattern {
        self.layer_outputs[l].row(i).iter().map(|&v| v > 0.0).collect()
    }
}

pub fn forward_batch(w: &Weights, inputs: ArrayView2<f64>) -> Result<BatchTrace> {
    if inputs.ncols() != w.config.input_dim {
        return Err(Error::Input(format!(
            "inputs have dimension {}, network expects {}",
            inputs.ncols(),
            w.config.input_dim
        )));
    }
    if inputs.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("input contains non-finite entries".into()));
    }
    let mut outs = Vec::with_capacity(w.depth() + 1);
    outs.push(inputs.to_owned());
    for wl in &w.layers {
        let mut next = outs.last().unwrap().dot(wl);
        next.mapv_inplace(relu);
        outs.push(next);
    }
    let outputs = outs.last().unwrap().dot(&w.output);
    if outputs.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("network output is not finite".into()));
    }
    Ok(BatchTrace { layer_outputs: outs, outputs })
}

/// Masked sensitivity rows `Δ_l` (shape `n x m_l`) with row `i` scaled by
/// `row_scale[i]`.
pub fn batch_backprop(w: &Weights, trace: &BatchTrace, row_scale: ArrayView1<f64>) -> Vec<Array2<f64>> {
    let depth = w.depth();
    let n = trace.len();
    let mut deltas = Vec::with_capacity(depth);
    let mut delta = Array2::from_shape_fn((n, w.output.len()), |(i, j)| row_scale[i] * w.output[j]);
    for l in (1..=depth).rev() {
        Zip::from(&mut delta)
            .and(&trace.layer_outputs[l])
            .for_each(|d, &x| {
                if x <= 0.0 {
                    *d = 0.0;
                }
            });
        let next = if l > 1 { delta.dot(&w.layer(l).t()) } else { Array2::zeros((0, 0)) };
        deltas.push(std::mem::replace(&mut delta, next));
    }
    deltas.reverse();
    deltas
}

/// Unmasked sensitivities `G_0..G_L`, one row per sample, with row `i` of
/// `G_l` equal to `g_l` for input `i` and `G_L` holding `v` in every row.
pub fn batch_sensitivities(w: &Weights, trace: &BatchTrace) -> Vec<Array2<f64>> {
    let ones = Array1::ones(trace.len());
    let deltas = batch_backprop(w, trace, ones.view());
    let mut gs: Vec<Array2<f64>> = (0..w.depth()).map(|l| deltas[l].dot(&w.layer(l + 1).t())).collect();
    gs.push(Array2::from_shape_fn((trace.len(), w.output.len()), |(_, j)| w.output[j]));
    gs
}

/// Per-sample gradient norms `‖∇_{W_l} f(x_i)‖_F = ‖x_{l-1,i}‖ ‖Δ_{l,i}‖`,
/// shape `n x L`.
pub fn per_sample_gradient_norms(w: &Weights, trace: &BatchTrace) -> Array2<f64> {
    let ones = Array1::ones(trace.len());
    let deltas = batch_backprop(w, trace, ones.view());
    Array2::from_shape_fn((trace.len(), w.depth()), |(i, l)| {
        let x = trace.layer_outputs[l].row(i);
        let d = deltas[l].row(i);
        (x.dot(&x) * d.dot(&d)).sqrt()
    })
}

/// `Σ_i c_i ∇_{W_l} f(x_i)` for every layer.
pub fn weighted_gradient(w: &Weights, trace: &BatchTrace, coeffs: ArrayView1<f64>) -> GradientSet {
    let deltas = batch_backprop(w, trace, coeffs);
    GradientSet {
        grads: (1..=w.depth())
            .map(|l| trace.layer_outputs[l - 1].t().dot(&deltas[l - 1]))
            .collect(),
    }
}

/// The masked product `Π_{r=from..L} Σ_r W_r^T` for one input, as an operator
/// from `R^{m_{from-1}}` to `R^{m_L}`.
pub struct MaskedProduct<'a> {
    pub weights: &'a Weights,
    pub trace: &'a ForwardTrace,
    pub from: usize,
}

impl LinearOperator for MaskedProduct<'_> {
    fn input_dim(&self) -> usize {
        self.weights.config.dim(self.from - 1)
    }

    fn output_dim(&self) -> usize {
        self.weights.config.dim(self.weights.depth())
    }

    fn apply(&self, x: ArrayView1<f64>) -> Array1<f64> {
        let mut h = x.to_owned();
        for l in self.from..=self.weights.depth() {
            h = self.weights.layer(l).t().dot(&h);
            mask(&mut h, self.trace.pattern(l));
        }
        h
    }

    fn apply_transpose(&self, y: ArrayView1<f64>) -> Array1<f64> {
        let mut h = y.to_owned();
        for l in (self.from..=self.weights.depth()).rev() {
            mask(&mut h, self.trace.pattern(l));
            h = self.weights.layer(l).dot(&h);
        }
        h
    }
}
