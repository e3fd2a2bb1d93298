use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::offlog::{ol_exp, CorrelationMatrix, HollowMatrix};
use crate::symkernel::SymmetricMatrix;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_symmetric(r: &mut impl Rng, n: usize, scale: f64) -> SymmetricMatrix {
    let m = DMatrix::from_fn(n, n, |_, _| scale * r.random_range(-1.0..1.0));
    SymmetricMatrix::new(m).unwrap()
}

pub fn random_hollow(r: &mut impl Rng, n: usize, scale: f64) -> HollowMatrix {
    crate::pipeline::synth::random_hollow(r, n, scale)
}

pub fn random_correlation(r: &mut impl Rng, n: usize) -> CorrelationMatrix {
    ol_exp(&random_hollow(r, n, 1.0 / (n as f64).sqrt())).unwrap()
}

pub fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}
