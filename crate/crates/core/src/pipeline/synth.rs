//! Seeded synthetic correlation data.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::offlog::{ol_exp, CorrelationMatrix, HollowMatrix, OffLog};
use crate::regression::Trajectory;
use crate::symkernel::SymmetricMatrix;

/// Hollow matrix with independent `N(0, scale²)` off-diagonal entries.
pub fn random_hollow(r: &mut impl Rng, n: usize, scale: f64) -> HollowMatrix {
    let mut a = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let x: f64 = r.sample(StandardNormal);
            a[(i, j)] = scale * x;
            a[(j, i)] = scale * x;
        }
    }
    HollowMatrix::new(SymmetricMatrix::new(a).expect("finite")).expect("hollow by construction")
}

/// `ol_exp` of a random hollow matrix with entry scale `1/√n`.
pub fn random_correlation(r: &mut impl Rng, n: usize) -> Result<CorrelationMatrix> {
    ol_exp(&random_hollow(r, n, 1.0 / (n as f64).sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub n: usize,
    pub len: usize,
    /// Amplitude of the slow oscillation around the base point; 0 gives a
    /// constant path.
    pub smoothness: f64,
    /// Amplitude of independent per-point perturbations.
    pub noise: f64,
    /// Entry scale of the base point and of each component, in units of `1/√n`.
    pub amplitude: f64,
    /// Number of sinusoidal harmonics.
    pub harmonics: usize,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(n: usize, len: usize, smoothness: f64, seed: u64) -> Self {
        Self {
            n,
            len,
            smoothness,
            noise: 0.0,
            amplitude: 0.5,
            harmonics: 3,
            seed,
        }
    }
}

/// Path in `Hol(n)`: base point plus `smoothness · Σ_h (A_h sin 2πhu + B_h cos 2πhu)/h`
/// over `u ∈ [0, 1]`, plus `noise` times independent hollow perturbations,
/// mapped to correlation matrices with `ol_exp`. Timestamps are `0, …, len−1`.
pub fn synthesize_hollow_path(spec: &SynthSpec) -> Result<Vec<HollowMatrix>> {
    if spec.n < 1 || spec.len < 2 {
        return Err(Error::InvalidArgument(format!(
            "synthetic trajectory needs n ≥ 1 and at least 2 points (n = {}, T = {})",
            spec.n, spec.len
        )));
    }
    if !(spec.smoothness.is_finite() && spec.noise.is_finite() && spec.amplitude.is_finite()) {
        return Err(Error::InvalidArgument("non-finite synthesis parameter".into()));
    }
    let mut r = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n;
    let scale = spec.amplitude / (n as f64).sqrt();
    let base = random_hollow(&mut r, n, scale);
    let waves: Vec<(HollowMatrix, HollowMatrix)> = (0..spec.harmonics)
        .map(|_| (random_hollow(&mut r, n, scale), random_hollow(&mut r, n, scale)))
        .collect();
    let mut path = Vec::with_capacity(spec.len);
    for t in 0..spec.len {
        let u = t as f64 / (spec.len - 1) as f64;
        let mut acc = base.as_symmetric().clone();
        for (h, (a, b)) in waves.iter().enumerate() {
            let k = (h + 1) as f64;
            let w = 2.0 * PI * k * u;
            acc = acc.lin_comb(1.0, a.as_symmetric(), spec.smoothness * w.sin() / k);
            acc = acc.lin_comb(1.0, b.as_symmetric(), spec.smoothness * w.cos() / k);
        }
        if spec.noise != 0.0 {
            let e = random_hollow(&mut r, n, scale);
            acc = acc.lin_comb(1.0, e.as_symmetric(), spec.noise);
        }
        path.push(HollowMatrix::off(acc));
    }
    Ok(path)
}

pub fn synthesize_trajectory(spec: &SynthSpec) -> Result<Trajectory<CorrelationMatrix>> {
    let path = synthesize_hollow_path(spec)?;
    Trajectory::indexed(OffLog::default().exp_many(&path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::SpaceElement;

    fn mean_step(traj: &Trajectory<CorrelationMatrix>) -> f64 {
        let v = traj.values();
        v.windows(2).map(|w| (w[1].as_matrix() - w[0].as_matrix()).norm()).sum::<f64>() / (v.len() - 1) as f64
    }

    #[test]
    fn zero_smoothness_is_constant() {
        let traj = synthesize_trajectory(&SynthSpec::new(5, 10, 0.0, 1)).unwrap();
        for c in traj.values() {
            assert_eq!(c.as_matrix(), traj.values()[0].as_matrix());
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let mut spec = SynthSpec::new(6, 20, 1.0, 42);
        spec.noise = 0.1;
        let a = synthesize_trajectory(&spec).unwrap();
        let b = synthesize_trajectory(&spec).unwrap();
        assert_eq!(a, b);
        spec.seed = 43;
        assert_ne!(a, synthesize_trajectory(&spec).unwrap());
    }

    #[test]
    fn outputs_are_valid_for_many_seeds() {
        for seed in 0..100 {
            let mut spec = SynthSpec::new(4, 8, 1.0, seed);
            spec.noise = 0.2;
            let traj = synthesize_trajectory(&spec).unwrap();
            for c in traj.values() {
                assert!(CorrelationMatrix::from_symmetric(c.as_symmetric().clone()).is_ok());
            }
        }
    }

    #[test]
    fn roughness_grows_with_noise() {
        let mut last = 0.0;
        for noise in [0.0, 0.05, 0.1, 0.2, 0.4] {
            let mut spec = SynthSpec::new(6, 60, 1.0, 7);
            spec.noise = noise;
            let step = mean_step(&synthesize_trajectory(&spec).unwrap());
            assert!(step > last);
            last = step;
        }
    }

    #[test]
    fn rejects_bad_spec() {
        assert!(synthesize_trajectory(&SynthSpec::new(3, 1, 1.0, 0)).is_err());
        assert!(synthesize_trajectory(&SynthSpec::new(0, 5, 1.0, 0)).is_err());
    }
}
