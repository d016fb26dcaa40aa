//! Margin certificates for the two data assumptions: separability in the
//! conjugate-kernel RKHS and separability by random ReLU features.
//!
//! The kernel recursion starts from `κ^(0)(x, x') = <x, x'>` and applies the
//! Gaussian ReLU moment
//!
//! ```text
//! κ^(l+1)(x, x') = sqrt(ab) / (2π) · (sin θ + (π - θ) cos θ),
//! a = κ^(l)(x, x), b = κ^(l)(x', x'), θ = arccos(κ^(l)(x, x') / sqrt(ab))
//! ```
//!
//! with no renormalization, so the diagonal halves at every level.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::rng::{self, Domain};

/// Relative PSD tolerance: the smallest eigenvalue may reach
/// `-PSD_TOL * trace / n`.
pub const PSD_TOL: f64 = 1e-8;

/// `E[σ(u)σ(v)]` for centred Gaussians with variances `a`, `b` and
/// covariance `c`.
pub fn relu_moment(a: f64, b: f64, c: f64) -> Result<f64> {
    if !(a > 0.0) || !(b > 0.0) {
        return Err(Error::Input(format!("degenerate kernel variances a = {a}, b = {b}")));
    }
    let s = (a * b).sqrt();
    let rho = (c / s).clamp(-1.0, 1.0);
    let theta = rho.acos();
    Ok(s / (2.0 * std::f64::consts::PI) * (theta.sin() + (std::f64::consts::PI - theta) * rho))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelGram {
    pub matrix: Array2<f64>,
    /// Number of recursion steps applied to the linear kernel.
    pub depth: usize,
    /// Mean of `κ^(l)(x_i, x_i)` over samples for `l = 0..=depth`.
    pub diag_profile: Vec<f64>,
    /// Diagnostic variant multiplying every level by 2. Never valid for
    /// certifying the assumption.
    pub scaled: bool,
}

impl KernelGram {
    /// Wraps an explicit symmetric matrix.
    pub fn from_matrix(matrix: Array2<f64>, depth: usize) -> Result<Self> {
        let n = matrix.nrows();
        if matrix.ncols() != n {
            return Err(Error::Input("Gram matrix must be square".into()));
        }
        for i in 0..n {
            for j in 0..i {
                let (a, b) = (matrix[[i, j]], matrix[[j, i]]);
                if (a - b).abs() > 1e-12 * (1.0 + a.abs().max(b.abs())) {
                    return Err(Error::Input(format!("Gram matrix is not symmetric at ({i}, {j})")));
                }
            }
        }
        let diag = matrix.diag().mean().unwrap_or(0.0);
        Ok(Self { matrix, depth, diag_profile: vec![diag], scaled: false })
    }

    pub fn len(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.nrows() == 0
    }

    /// Whether `K + PSD_TOL·(trace/n)·I` admits a Cholesky factorization.
    pub fn is_psd(&self) -> bool {
        let n = self.len();
        if n == 0 {
            return true;
        }
        let shift = PSD_TOL * self.matrix.diag().sum().abs() / n as f64;
        cholesky_succeeds(self.matrix.view(), shift.max(f64::MIN_POSITIVE))
    }
}

fn cholesky_succeeds(a: ArrayView2<f64>, shift: f64) -> bool {
    let n = a.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let row_j = l.row(j);
        let d = a[[j, j]] + shift - row_j.slice(ndarray::s![..j]).dot(&row_j.slice(ndarray::s![..j]));
        if !(d > 0.0) {
            return false;
        }
        let d = d.sqrt();
        l[[j, j]] = d;
        for i in j + 1..n {
            let s = a[[i, j]] - l.row(i).slice(ndarray::s![..j]).dot(&l.row(j).slice(ndarray::s![..j]));
            l[[i, j]] = s / d;
        }
    }
    true
}

/// Gram matrix of `κ^(depth)` on the dataset inputs.
pub fn conjugate_kernel_gram(data: &Dataset, depth: usize) -> Result<KernelGram> {
    gram_with(data.inputs(), depth, false)
}

/// Same recursion with each level multiplied by 2, for diagnostics only.
pub fn conjugate_kernel_gram_scaled(data: &Dataset, depth: usize) -> Result<KernelGram> {
    gram_with(data.inputs(), depth, true)
}

fn gram_with(x: ArrayView2<f64>, depth: usize, scaled: bool) -> Result<KernelGram> {
    let n = x.nrows();
    let mut k = x.dot(&x.t());
    symmetrize(&mut k);
    let mut profile = vec![k.diag().mean().unwrap_or(0.0)];
    let factor = if scaled { 2.0 } else { 1.0 };
    for _ in 0..depth {
        let prev = &k;
        let rows: Vec<Result<Vec<f64>>> = (0..n)
            .into_par_iter()
            .map(|i| {
                (0..=i)
                    .map(|j| Ok(factor * relu_moment(prev[[i, i]], prev[[j, j]], prev[[i, j]])?))
                    .collect()
            })
            .collect();
        let mut next = Array2::zeros((n, n));
        for (i, row) in rows.into_iter().enumerate() {
            for (j, v) in row?.into_iter().enumerate() {
                next[[i, j]] = v;
                next[[j, i]] = v;
            }
        }
        k = next;
        profile.push(k.diag().mean().unwrap_or(0.0));
    }
    Ok(KernelGram { matrix: k, depth, diag_profile: profile, scaled })
}

fn symmetrize(k: &mut Array2<f64>) {
    let n = k.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (k[[i, j]] + k[[j, i]]);
            k[[i, j]] = v;
            k[[j, i]] = v;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Certifier {
    ConjugateKernel,
    RandomFeatureLp,
    GeneratorGroundTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginCertificate {
    /// Margin achieved by an explicit feasible separator. Nonpositive when
    /// the data are not separable.
    pub gamma: f64,
    pub certifier: Certifier,
    pub iterations: usize,
    /// Dual upper bound on the optimal margin, when available.
    pub upper_bound: Option<f64>,
    pub converged: bool,
    pub infeasible: bool,
    pub feature_count: Option<usize>,
}

impl MarginCertificate {
    pub fn ground_truth(gamma: f64) -> Self {
        Self {
            gamma,
            certifier: Certifier::GeneratorGroundTruth,
            iterations: 0,
            upper_bound: Some(gamma),
            converged: true,
            infeasible: gamma <= 0.0,
            feature_count: None,
        }
    }

    pub fn gap(&self) -> Option<f64> {
        self.upper_bound.map(|u| u - self.gamma)
    }
}

/// Settings for the hard-margin dual solver.
#[derive(Debug, Clone, Copy)]
pub struct DualOptions {
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for DualOptions {
    fn default() -> Self {
        Self { tol: 1e-8, max_sweeps: 100_000 }
    }
}

/// Outcome of dual coordinate ascent on
/// `max Σα - ½ αᵀQα, α ≥ 0, Q_ij = y_i y_j K_ij`.
#[derive(Debug, Clone)]
pub struct DualSolution {
    pub alpha: Array1<f64>,
    /// `Qα`, the margins of the unnormalized separator.
    pub margins: Array1<f64>,
    pub sweeps: usize,
    pub converged: bool,
}

impl DualSolution {
    /// `αᵀQα`, the squared RKHS norm of the separator.
    pub fn norm_sq(&self) -> f64 {
        self.alpha.dot(&self.margins)
    }

    pub fn dual_value(&self) -> f64 {
        self.alpha.sum() - 0.5 * self.norm_sq()
    }

    /// `min_i (Qα)_i / sqrt(αᵀQα)`: margin of the normalized separator.
    pub fn primal_margin(&self) -> f64 {
        let norm = self.norm_sq().max(0.0).sqrt();
        let min = self.margins.iter().copied().fold(f64::INFINITY, f64::min);
        if norm > 0.0 {
            min / norm
        } else {
            f64::NEG_INFINITY
        }
    }

    /// `1 / sqrt(2 D(α))`, valid because every dual value bounds
    /// `½‖f*‖² = 1/(2γ*²)` from below.
    pub fn margin_upper_bound(&self) -> f64 {
        let d = self.dual_value();
        if d > 0.0 {
            (0.5 / d).sqrt()
        } else {
            f64::INFINITY
        }
    }
}

/// Cyclic coordinate ascent with exact line search on each coordinate.
pub fn solve_hard_margin_dual(k: ArrayView2<f64>, labels: &[f64], opts: DualOptions) -> DualSolution {
    let n = labels.len();
    let q = Array2::from_shape_fn((n, n), |(i, j)| labels[i] * labels[j] * k[[i, j]]);
    let mut alpha = Array1::<f64>::zeros(n);
    let mut qa = Array1::<f64>::zeros(n);
    let mut sweeps = 0;
    let mut converged = false;
    while sweeps < opts.max_sweeps {
        sweeps += 1;
        let mut worst: f64 = 0.0;
        for i in 0..n {
            let qii = q[[i, i]];
            if qii <= 0.0 {
                continue;
            }
            let grad = 1.0 - qa[i];
            let pg = if alpha[i] > 0.0 { grad } else { grad.max(0.0) };
            worst = worst.max(pg.abs());
            let new = (alpha[i] + grad / qii).max(0.0);
            let step = new - alpha[i];
            if step != 0.0 {
                alpha[i] = new;
                qa.scaled_add(step, &q.row(i));
            }
        }
        if worst <= opts.tol {
            converged = true;
            break;
        }
        // an unbounded dual means no separator exists
        if alpha.sum() > 1e15 || !alpha.iter().all(|v| v.is_finite()) {
            break;
        }
    }
    DualSolution { alpha, margins: qa, sweeps, converged }
}

/// Largest margin `γ` with `y_i f(x_i) ≥ γ` and `‖f‖_H ≤ 1`.
pub fn kernel_margin(gram: &KernelGram, labels: &[f64]) -> Result<MarginCertificate> {
    kernel_margin_with(gram, labels, DualOptions::default())
}

pub fn kernel_margin_with(gram: &KernelGram, labels: &[f64], opts: DualOptions) -> Result<MarginCertificate> {
    if labels.len() != gram.len() {
        return Err(Error::Input("label count differs from Gram size".into()));
    }
    if labels.is_empty() {
        return Err(Error::Input("dataset is empty".into()));
    }
    if !gram.is_psd() {
        return Err(Error::Input("Gram matrix is indefinite beyond tolerance".into()));
    }
    let sol = solve_hard_margin_dual(gram.matrix.view(), labels, opts);
    let gamma = sol.primal_margin();
    let infeasible = !(gamma > 0.0);
    Ok(MarginCertificate {
        gamma: if gamma.is_finite() { gamma } else { 0.0 },
        certifier: Certifier::ConjugateKernel,
        iterations: sol.sweeps,
        upper_bound: if infeasible { Some(0.0) } else { Some(sol.margin_upper_bound()) },
        converged: sol.converged,
        infeasible,
        feature_count: None,
    })
}

/// Directions `ū_1..ū_N` with i.i.d. standard normal entries, one stream per
/// feature. Shape `N x d`.
pub fn relu_feature_directions(seed: u64, count: usize, dim: usize) -> Array2<f64> {
    let mut u = Array2::zeros((count, dim));
    for (j, mut row) in u.axis_iter_mut(Axis(0)).enumerate() {
        let mut r = rng::stream(seed, Domain::RandomFeatures, j as u64);
        let mut buf = vec![0.0; dim];
        rng::fill_normal(&mut r, &mut buf);
        row.assign(&ArrayView1::from(&buf));
    }
    u
}

/// `Φ_ij = σ(ū_jᵀ x_i)`, shape `n x N`.
pub fn relu_features(inputs: ArrayView2<f64>, directions: ArrayView2<f64>) -> Array2<f64> {
    inputs.dot(&directions.t()).mapv(|z| z.max(0.0))
}

#[derive(Debug, Clone, Copy)]
pub struct LpOptions {
    pub iterations: usize,
    /// Iterations without improvement before the Polyak target gap halves.
    pub patience: usize,
}

impl Default for LpOptions {
    fn default() -> Self {
        Self { iterations: 20_000, patience: 100 }
    }
}

/// Solution of `max_c min_i y_i (Φc)_i / N` over `|c_j| ≤ 1`.
#[derive(Debug, Clone)]
pub struct BoxLpSolution {
    pub coefficients: Array1<f64>,
    pub margin: f64,
    /// `min_p ‖Aᵀp‖_1` over a few candidate distributions `p` on the
    /// constraints; every such value bounds the optimum from above.
    pub upper_bound: f64,
}

/// Projected subgradient ascent with a Polyak step towards a moving target
/// level and averaging over the second half of the run.
pub fn solve_box_lp(a: ArrayView2<f64>, opts: LpOptions) -> BoxLpSolution {
    let (n, p) = a.dim();
    let eval = |c: &Array1<f64>| -> (f64, usize) {
        let m = a.dot(c);
        let mut best = (f64::INFINITY, 0);
        for (i, &v) in m.iter().enumerate() {
            if v < best.0 {
                best = (v, i);
            }
        }
        best
    };
    let row_norm_sq: Vec<f64> = a.axis_iter(Axis(0)).map(|r| r.dot(&r)).collect();
    let scale = a.axis_iter(Axis(0)).map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).fold(f64::INFINITY, f64::min);

    let mut c = Array1::<f64>::zeros(p);
    let mut best_c = c.clone();
    let mut best = eval(&c).0;
    let mut gap = if scale.is_finite() && scale > 0.0 { scale } else { 1.0 };
    let mut stale = 0;
    let mut avg = Array1::<f64>::zeros(p);
    let mut avg_count = 0usize;
    let mut active = vec![0usize; n];
    for k in 0..opts.iterations {
        let (h, i) = eval(&c);
        if k >= opts.iterations / 2 {
            active[i] += 1;
        }
        if h > best {
            best = h;
            best_c.assign(&c);
            stale = 0;
        } else {
            stale += 1;
            if stale >= opts.patience {
                gap *= 0.5;
                stale = 0;
            }
        }
        if row_norm_sq[i] == 0.0 {
            break;
        }
        let step = (best + gap - h) / row_norm_sq[i];
        c.scaled_add(step, &a.row(i));
        c.mapv_inplace(|v| v.clamp(-1.0, 1.0));
        if k >= opts.iterations / 2 {
            avg += &c;
            avg_count += 1;
        }
    }
    if avg_count > 0 {
        avg /= avg_count as f64;
        let h = eval(&avg).0;
        if h > best {
            best = h;
            best_c = avg;
        }
    }
    let upper = dual_bound(a, &best_c, &active);
    BoxLpSolution { coefficients: best_c, margin: best, upper_bound: upper }
}

/// Weak duality for the box LP: `max_c min_i (Ac)_i ≤ ‖Aᵀp‖_1` for every
/// probability vector `p`. Candidates are the active-constraint frequencies
/// and softmin weights of the final margins at several temperatures.
fn dual_bound(a: ArrayView2<f64>, c: &Array1<f64>, active: &[usize]) -> f64 {
    let value = |p: &Array1<f64>| a.t().dot(p).iter().map(|v| v.abs()).sum::<f64>();
    let mut best = f64::INFINITY;
    let total: usize = active.iter().sum();
    if total > 0 {
        best = value(&Array1::from_iter(active.iter().map(|&k| k as f64 / total as f64)));
    }
    let m = a.dot(c);
    let lo = m.iter().copied().fold(f64::INFINITY, f64::min);
    let spread = m.iter().map(|v| v - lo).fold(0.0, f64::max);
    if spread > 0.0 {
        for e in 0..=12 {
            let beta = 2f64.powi(e) / spread;
            let w = m.mapv(|v| (-beta * (v - lo)).exp());
            best = best.min(value(&(&w / w.sum())));
        }
    }
    best
}

/// Margin certified by `N` random ReLU features drawn from `seed`.
pub fn random_feature_margin(data: &Dataset, features: usize, seed: u64) -> Result<MarginCertificate> {
    random_feature_margin_with(data, features, seed, LpOptions::default())
}

pub fn random_feature_margin_with(
    data: &Dataset,
    features: usize,
    seed: u64,
    opts: LpOptions,
) -> Result<MarginCertificate> {
    if features == 0 {
        return Err(Error::Input("feature count must be at least 1".into()));
    }
    data.require_nonempty()?;
    let u = relu_feature_directions(seed, features, data.dim());
    let mut a = relu_features(data.inputs(), u.view());
    let inv_n = 1.0 / features as f64;
    for (mut row, &y) in a.axis_iter_mut(Axis(0)).zip(data.labels()) {
        row *= y * inv_n;
    }
    let sol = solve_box_lp(a.view(), opts);
    let gamma = sol.margin.max(0.0);
    Ok(MarginCertificate {
        gamma,
        certifier: Certifier::RandomFeatureLp,
        iterations: opts.iterations,
        upper_bound: Some(sol.upper_bound.max(gamma)),
        converged: sol.upper_bound - gamma <= 1e-3 * sol.upper_bound.abs().max(1e-12),
        infeasible: gamma <= 0.0,
        feature_count: Some(features),
    })
}

/// Certificates for each feature count, sharing one seed so that the first
/// `N` directions coincide across counts.
pub fn random_feature_margin_sweep(data: &Dataset, counts: &[usize], seed: u64) -> Result<Vec<MarginCertificate>> {
    counts.iter().map(|&n| random_feature_margin(data, n, seed)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn unit_rows(rows: &[Vec<f64>]) -> Dataset {
        let rows: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| {
                let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                r.iter().map(|v| v / n).collect()
            })
            .collect();
        let labels = (0..rows.len()).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        Dataset::from_rows(&rows, labels).unwrap()
    }

    #[test]
    fn first_level_closed_forms() {
        assert!((relu_moment(1.0, 1.0, 1.0).unwrap() - 0.5).abs() < 1e-15);
        let orth = relu_moment(1.0, 1.0, 0.0).unwrap();
        assert!((orth - 1.0 / (2.0 * std::f64::consts::PI)).abs() < 1e-15);
        assert_eq!(relu_moment(1.0, 1.0, -1.0).unwrap().abs() < 1e-15, true);
        assert!(relu_moment(0.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn rho_is_clamped() {
        let a = relu_moment(1.0, 1.0, 1.0 + 1e-15).unwrap();
        assert!(a.is_finite());
    }

    #[test]
    fn gram_diagonal_halves_per_level() {
        let data = unit_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![1.0, 1.0, 1.0]]);
        let g = conjugate_kernel_gram(&data, 4).unwrap();
        for (l, d) in g.diag_profile.iter().enumerate() {
            assert!((d - 0.5f64.powi(l as i32)).abs() < 1e-12);
        }
        assert!(g.is_psd());
        let s = conjugate_kernel_gram_scaled(&data, 4).unwrap();
        assert!((s.diag_profile[4] - 1.0).abs() < 1e-12);
        assert!(s.scaled);
    }

    #[test]
    fn two_point_margin() {
        let c = 0.7;
        let g = KernelGram::from_matrix(array![[c, 0.0], [0.0, c]], 0).unwrap();
        let cert = kernel_margin(&g, &[1.0, -1.0]).unwrap();
        assert!((cert.gamma - (c / 2.0).sqrt()).abs() < 1e-10);
        assert!(cert.converged && !cert.infeasible);
    }

    #[test]
    fn conflicting_duplicates_are_infeasible() {
        let g = KernelGram::from_matrix(array![[1.0, 1.0, 0.2], [1.0, 1.0, 0.2], [0.2, 0.2, 1.0]], 0).unwrap();
        let cert = kernel_margin_with(&g, &[1.0, -1.0, 1.0], DualOptions { tol: 1e-8, max_sweeps: 2000 }).unwrap();
        assert!(cert.infeasible);
        assert!(cert.gamma <= 0.0);
    }

    #[test]
    fn indefinite_gram_is_rejected() {
        let g = KernelGram::from_matrix(array![[1.0, 2.0], [2.0, 1.0]], 0).unwrap();
        assert!(matches!(kernel_margin(&g, &[1.0, -1.0]), Err(Error::Input(_))));
        assert!(KernelGram::from_matrix(array![[1.0, 0.5], [0.4, 1.0]], 0).is_err());
    }

    #[test]
    fn box_lp_on_a_single_constraint() {
        // max_c min(a c) with one row: the optimum is ‖a‖_1 at c = sign(a)
        let a = array![[0.5, -0.25, 0.25]];
        let sol = solve_box_lp(a.view(), LpOptions { iterations: 200, patience: 10 });
        assert!((sol.margin - 1.0).abs() < 1e-12);
        assert!((sol.upper_bound - 1.0).abs() < 1e-12);
    }

    #[test]
    fn feature_margin_is_nonnegative() {
        let data = unit_rows(&[vec![1.0, 0.2], vec![0.9, 0.3], vec![-0.5, 1.0]]);
        let cert = random_feature_margin(&data, 8, 3).unwrap();
        assert!(cert.gamma >= 0.0);
        assert_eq!(cert.feature_count, Some(8));
        assert!(cert.upper_bound.unwrap() >= cert.gamma);
    }
}
