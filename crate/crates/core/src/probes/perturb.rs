use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{frobenius, gaussian_direction};
use crate::network::Weights;
use crate::rng::{self, Domain};
use crate::training::loss_gradient;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DirectionMode {
    /// Gaussian matrix rescaled to Frobenius norm `τ`.
    Gaussian,
    /// Normalized negative loss gradient at the base weights.
    GradientAligned,
}

/// A point `Ŵ` on the boundary of the `τ`-ball around base weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub tau: f64,
    pub mode: DirectionMode,
    /// Perturbed layers, 1-based. `None` perturbs every layer.
    #[serde(default)]
    pub layers: Option<Vec<usize>>,
    /// Selects the random direction; equal values give the same direction
    /// at every radius.
    #[serde(default)]
    pub direction: u64,
}

impl PerturbationSpec {
    pub fn gaussian(tau: f64) -> Self {
        Self { tau, mode: DirectionMode::Gaussian, layers: None, direction: 0 }
    }

    pub fn gradient_aligned(tau: f64) -> Self {
        Self { tau, mode: DirectionMode::GradientAligned, layers: None, direction: 0 }
    }

    pub fn only_layers(mut self, layers: Vec<usize>) -> Self {
        self.layers = Some(layers);
        self
    }

    pub fn flagged(&self, l: usize) -> bool {
        self.layers.as_ref().is_none_or(|ls| ls.contains(&l))
    }

    pub fn validate(&self, depth: usize) -> Result<()> {
        if !(self.tau >= 0.0) || !self.tau.is_finite() {
            return Err(Error::Input(format!("perturbation radius must be nonnegative, got {}", self.tau)));
        }
        if let Some(ls) = &self.layers {
            if let Some(bad) = ls.iter().find(|&&l| l == 0 || l > depth) {
                return Err(Error::Input(format!("perturbation layer {bad} outside 1..={depth}")));
            }
        }
        Ok(())
    }
}

fn rescale_into_ball(d: &mut Array2<f64>, tau: f64) {
    let f = frobenius(d.view());
    if f > tau && f > 0.0 {
        *d *= tau / f;
    }
}

/// `Ŵ_l = W_l + D_l` with `‖D_l‖_F = τ` on flagged layers and `D_l = 0`
/// elsewhere.
pub fn perturb(base: &Weights, spec: &PerturbationSpec, data: &Dataset) -> Result<Weights> {
    spec.validate(base.depth())?;
    let grad = match spec.mode {
        DirectionMode::GradientAligned if spec.tau > 0.0 => Some(loss_gradient(base, data)?),
        _ => None,
    };
    let seed = base.config().master_seed;
    let mut deltas = Vec::with_capacity(base.depth());
    for l in 1..=base.depth() {
        let (rows, cols) = base.layer(l).dim();
        if !spec.flagged(l) || spec.tau == 0.0 {
            deltas.push(Array2::zeros((rows, cols)));
            continue;
        }
        let aligned = grad.as_ref().and_then(|g| {
            let gl = &g.grads[l - 1];
            let f = frobenius(gl.view());
            (f > 0.0).then(|| gl * (-spec.tau / f))
        });
        let mut d = match aligned {
            Some(d) => d,
            None => {
                let mut r = rng::stream(seed, Domain::Perturbation, (spec.direction << 16) | l as u64);
                gaussian_direction(rows, cols, spec.tau, &mut r)
            }
        };
        rescale_into_ball(&mut d, spec.tau);
        deltas.push(d);
    }
    let mut out = base.clone();
    out.add_scaled(1.0, &deltas);
    Ok(out)
}
