//! Deterministic random streams.
//!
//! Every consumer of randomness draws from its own ChaCha20 stream keyed by
//! `(master_seed, domain)` and selected by an index. Streams are independent,
//! so adding a layer, a restart, or a candidate never shifts the draws of
//! another consumer.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

/// Consumer domains. The discriminant is mixed into the key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    LayerInit = 1,
    Perturbation = 2,
    Candidate = 3,
    Teacher = 4,
    Labels = 5,
    Split = 6,
    MarginRestart = 7,
    Rademacher = 8,
    RandomFeatures = 9,
    Spectral = 10,
    Quantiles = 11,
    Hidden = 12,
}

/// Stream `index` of `domain` under `seed`.
pub fn stream(seed: u64, domain: Domain, index: u64) -> ChaCha20Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(domain as u64).to_le_bytes());
    let mut rng = ChaCha20Rng::from_seed(key);
    rng.set_stream(index);
    rng
}

/// Fills `out` with i.i.d. standard normal draws.
pub fn fill_normal<R: rand::Rng + ?Sized>(rng: &mut R, out: &mut [f64]) {
    for x in out.iter_mut() {
        *x = StandardNormal.sample(rng);
    }
}

/// Samples a point uniformly from the unit sphere in `dim` dimensions.
pub fn unit_sphere<R: rand::Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let mut v = vec![0.0; dim];
        fill_normal(rng, &mut v);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            v.iter_mut().for_each(|x| *x /= norm);
            return v;
        }
    }
}
