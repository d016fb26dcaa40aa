//! Dense helpers and matrix-free spectral norm estimation.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::rng::{self, Domain};

/// A linear map known only through its action and the action of its transpose.
pub trait LinearOperator {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn apply(&self, x: ArrayView1<f64>) -> Array1<f64>;
    fn apply_transpose(&self, y: ArrayView1<f64>) -> Array1<f64>;
}

/// `x -> A x` for an explicit matrix.
pub struct Dense<'a>(pub ArrayView2<'a, f64>);

impl LinearOperator for Dense<'_> {
    fn input_dim(&self) -> usize {
        self.0.ncols()
    }
    fn output_dim(&self) -> usize {
        self.0.nrows()
    }
    fn apply(&self, x: ArrayView1<f64>) -> Array1<f64> {
        self.0.dot(&x)
    }
    fn apply_transpose(&self, y: ArrayView1<f64>) -> Array1<f64> {
        self.0.t().dot(&y)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SpectralOptions {
    pub max_iter: usize,
    pub rel_tol: f64,
    pub seed: u64,
}

impl Default for SpectralOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            rel_tol: 1e-6,
            seed: 0x5eed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralEstimate {
    pub value: f64,
    pub iterations: usize,
}

pub fn norm2(x: ArrayView1<f64>) -> f64 {
    x.dot(&x).sqrt()
}

pub fn frobenius(a: ArrayView2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Sum over columns of their Euclidean norms.
///
/// For `A^T` this is the sum over rows of `A^T`, the (2,1) norm used in
/// spectrally normalized margin bounds.
pub fn column_norm_sum(a: ArrayView2<f64>) -> f64 {
    a.columns().into_iter().map(norm2).sum()
}

fn start_vector(dim: usize, seed: u64) -> Array1<f64> {
    let mut r = rng::stream(seed, Domain::Spectral, dim as u64);
    Array1::from(rng::unit_sphere(&mut r, dim))
}

/// Largest singular value by power iteration on `A^T A`.
///
/// Stops once the estimate changes by less than `rel_tol` relative.
pub fn power_iteration<O: LinearOperator + ?Sized>(
    op: &O,
    opts: SpectralOptions,
) -> Result<SpectralEstimate> {
    if op.input_dim() == 0 || op.output_dim() == 0 {
        return Ok(SpectralEstimate { value: 0.0, iterations: 0 });
    }
    let mut v = start_vector(op.input_dim(), opts.seed);
    let mut prev = 0.0;
    for it in 1..=opts.max_iter {
        let av = op.apply(v.view());
        let sigma = norm2(av.view());
        if sigma == 0.0 {
            return Ok(SpectralEstimate { value: 0.0, iterations: it });
        }
        if it > 1 && (sigma - prev).abs() <= opts.rel_tol * sigma {
            return Ok(SpectralEstimate { value: sigma, iterations: it });
        }
        prev = sigma;
        let mut w = op.apply_transpose(av.view());
        let wn = norm2(w.view());
        if wn == 0.0 {
            return Ok(SpectralEstimate { value: sigma, iterations: it });
        }
        w /= wn;
        v = w;
    }
    Err(Error::NoConvergence {
        what: "power iteration",
        iterations: opts.max_iter,
    })
}

/// Largest singular value by Golub-Kahan-Lanczos bidiagonalization with full
/// reorthogonalization.
///
/// Uses the same stopping rule as [`power_iteration`] on the top Ritz value
/// but converges in far fewer products when the leading singular values are
/// clustered, as they are for wide Gaussian matrices.
pub fn spectral_norm<O: LinearOperator + ?Sized>(
    op: &O,
    opts: SpectralOptions,
) -> Result<SpectralEstimate> {
    let (n_in, n_out) = (op.input_dim(), op.output_dim());
    if n_in == 0 || n_out == 0 {
        return Ok(SpectralEstimate { value: 0.0, iterations: 0 });
    }
    let max_rank = n_in.min(n_out);
    let mut vs: Vec<Array1<f64>> = vec![start_vector(n_in, opts.seed)];
    let mut us: Vec<Array1<f64>> = Vec::new();
    let mut alphas: Vec<f64> = Vec::new();
    let mut betas: Vec<f64> = Vec::new();
    let mut prev = 0.0;
    for it in 1..=opts.max_iter {
        let j = it - 1;
        let mut u = op.apply(vs[j].view());
        if j > 0 {
            u.scaled_add(-betas[j - 1], &us[j - 1]);
        }
        reorthogonalize(&mut u, &us);
        let alpha = norm2(u.view());
        alphas.push(alpha);
        let breakdown_u = alpha <= 1e-300;
        if !breakdown_u {
            u /= alpha;
        }
        us.push(u);

        let sigma = top_singular_bidiagonal(&alphas, &betas);
        let done = breakdown_u || it >= max_rank;
        if done || (it > 1 && (sigma - prev).abs() <= opts.rel_tol * sigma) {
            return Ok(SpectralEstimate { value: sigma, iterations: it });
        }
        prev = sigma;

        let mut v = op.apply_transpose(us[j].view());
        v.scaled_add(-alpha, &vs[j]);
        reorthogonalize(&mut v, &vs);
        let beta = norm2(v.view());
        betas.push(beta);
        if beta <= 1e-300 {
            return Ok(SpectralEstimate { value: sigma, iterations: it });
        }
        v /= beta;
        vs.push(v);
    }
    Err(Error::NoConvergence {
        what: "spectral norm (Lanczos)",
        iterations: opts.max_iter,
    })
}

fn reorthogonalize(x: &mut Array1<f64>, basis: &[Array1<f64>]) {
    // two passes of classical Gram-Schmidt
    for _ in 0..2 {
        for b in basis {
            let c = x.dot(b);
            x.scaled_add(-c, b);
        }
    }
}

/// Largest singular value of the upper bidiagonal matrix with diagonal
/// `alphas` and superdiagonal `betas`, via bisection on `B^T B`.
fn top_singular_bidiagonal(alphas: &[f64], betas: &[f64]) -> f64 {
    let k = alphas.len();
    let diag: Vec<f64> = (0..k)
        .map(|i| alphas[i] * alphas[i] + if i > 0 { betas[i - 1] * betas[i - 1] } else { 0.0 })
        .collect();
    let off: Vec<f64> = (0..k.saturating_sub(1)).map(|i| alphas[i] * betas[i]).collect();
    largest_tridiagonal_eigenvalue(&diag, &off).max(0.0).sqrt()
}

/// Largest eigenvalue of a symmetric tridiagonal matrix by Sturm bisection.
pub(crate) fn largest_tridiagonal_eigenvalue(diag: &[f64], off: &[f64]) -> f64 {
    let k = diag.len();
    if k == 0 {
        return 0.0;
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..k {
        let r = if i > 0 { off[i - 1].abs() } else { 0.0 } + if i + 1 < k { off[i].abs() } else { 0.0 };
        lo = lo.min(diag[i] - r);
        hi = hi.max(diag[i] + r);
    }
    // number of eigenvalues strictly below x
    let count_below = |x: f64| -> usize {
        let mut count = 0;
        let mut q = diag[0] - x;
        if q < 0.0 {
            count += 1;
        }
        for i in 1..k {
            let denom = if q == 0.0 { f64::EPSILON * (off[i - 1].abs() + 1e-300) } else { q };
            q = diag[i] - x - off[i - 1] * off[i - 1] / denom;
            if q < 0.0 {
                count += 1;
            }
        }
        count
    };
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if count_below(mid) == k {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo <= 1e-15 * hi.abs().max(lo.abs()) {
            break;
        }
    }
    hi
}

/// Least-squares slope of `log y` against `log x`.
///
/// Returns `None` with fewer than two usable points or when a coordinate is
/// not strictly positive.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    if xs.iter().chain(ys).any(|v| !(*v > 0.0) || !v.is_finite()) {
        return None;
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    if sxx == 0.0 {
        return None;
    }
    Some(sxy / sxx)
}

/// Evaluates `leaf` on each index of `0..n` and combines results along a
/// balanced binary tree whose shape depends only on `n`.
///
/// The two halves of every node run through `rayon::join`, so the result is
/// bit-identical for any worker count.
pub fn tree_reduce<T, L, C>(n: usize, leaf: &L, combine: &C) -> Option<T>
where
    T: Send,
    L: Fn(usize) -> T + Sync,
    C: Fn(T, T) -> T + Sync,
{
    fn go<T: Send, L: Fn(usize) -> T + Sync, C: Fn(T, T) -> T + Sync>(
        lo: usize,
        hi: usize,
        leaf: &L,
        combine: &C,
    ) -> T {
        if hi - lo == 1 {
            return leaf(lo);
        }
        let mid = lo + (hi - lo) / 2;
        let (a, b) = rayon::join(|| go(lo, mid, leaf, combine), || go(mid, hi, leaf, combine));
        combine(a, b)
    }
    if n == 0 {
        None
    } else {
        Some(go(0, n, leaf, combine))
    }
}

/// Matrix with i.i.d. standard normal entries scaled to a given Frobenius norm.
pub fn gaussian_direction(rows: usize, cols: usize, radius: f64, rng: &mut impl rand::Rng) -> Array2<f64> {
    let mut data = vec![0.0; rows * cols];
    rng::fill_normal(rng, &mut data);
    let mut m = Array2::from_shape_vec((rows, cols), data).expect("shape matches buffer");
    let f = frobenius(m.view());
    if f > 0.0 {
        m *= radius / f;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn spectral_norm_of_diagonal() {
        let a = array![[3.0, 0.0, 0.0], [0.0, -5.0, 0.0], [0.0, 0.0, 1.0]];
        let s = spectral_norm(&Dense(a.view()), SpectralOptions::default()).unwrap();
        assert!((s.value - 5.0).abs() < 1e-10);
        let p = power_iteration(&Dense(a.view()), SpectralOptions::default()).unwrap();
        assert!((p.value - 5.0).abs() < 1e-5);
    }

    #[test]
    fn spectral_norm_rectangular_rank_one() {
        let u = array![1.0, 2.0];
        let v = array![3.0, 0.0, 4.0];
        let a = u.view().insert_axis(ndarray::Axis(1)).dot(&v.view().insert_axis(ndarray::Axis(0)));
        let s = spectral_norm(&Dense(a.view()), SpectralOptions::default()).unwrap();
        assert!((s.value - 5.0 * 5f64.sqrt()).abs() < 1e-10);
    }

    #[test]
    fn zero_operator_has_zero_norm() {
        let a = Array2::<f64>::zeros((4, 3));
        assert_eq!(spectral_norm(&Dense(a.view()), SpectralOptions::default()).unwrap().value, 0.0);
        assert_eq!(power_iteration(&Dense(a.view()), SpectralOptions::default()).unwrap().value, 0.0);
    }

    #[test]
    fn power_iteration_reports_iteration_cap() {
        // two nearly equal singular values make the power method crawl
        let a = array![[1.0, 0.0], [0.0, 1.0 - 1e-9]];
        let opts = SpectralOptions { max_iter: 3, rel_tol: 1e-30, seed: 1 };
        match power_iteration(&Dense(a.view()), opts) {
            Err(Error::NoConvergence { iterations, .. }) => assert_eq!(iterations, 3),
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn tridiagonal_bisection() {
        // [[2,1],[1,2]] has eigenvalues 1 and 3
        assert!((largest_tridiagonal_eigenvalue(&[2.0, 2.0], &[1.0]) - 3.0).abs() < 1e-12);
        assert!((largest_tridiagonal_eigenvalue(&[4.0], &[]) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn slope_of_exact_power_law() {
        let xs = [1.0, 2.0, 4.0, 8.0, 16.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(-0.75)).collect();
        assert!((loglog_slope(&xs, &ys).unwrap() + 0.75).abs() < 1e-6);
        assert!(loglog_slope(&[1.0], &[1.0]).is_none());
        assert!(loglog_slope(&[1.0, 2.0], &[0.0, 1.0]).is_none());
    }

    #[test]
    fn tree_reduce_fixed_shape() {
        let vals: Vec<f64> = (0..37).map(|i| 1.0 / (i as f64 + 1.0)).collect();
        let leaf = |i: usize| vals[i];
        let add = |a: f64, b: f64| a + b;
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| tree_reduce(vals.len(), &leaf, &add)).unwrap();
        let b = four.install(|| tree_reduce(vals.len(), &leaf, &add)).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert!(tree_reduce(0, &leaf, &add).is_none());
    }

    #[test]
    fn column_norm_sum_matches_hand_value() {
        let a = array![[3.0, 0.0], [4.0, 1.0]];
        assert!((column_norm_sum(a.view()) - 6.0).abs() < 1e-15);
    }
}
