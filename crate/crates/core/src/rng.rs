//! Reproducible per-path random streams.
//!
//! Every path of an ensemble owns a ChaCha8 stream keyed by a seed derived
//! from `(master_seed, path_index)`, so results do not depend on the order
//! in which paths are scheduled.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
const UNIFORM_TAG: u64 = 0xD1B5_4A32_D192_ED03;

/// SplitMix64 finalizer. A bijection on `u64`.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of path `index` under `master`. Distinct indices give distinct seeds.
pub fn path_seed(master: u64, index: u64) -> u64 {
    mix64(master.wrapping_add(GOLDEN_GAMMA.wrapping_mul(index.wrapping_add(1))))
}

/// Derives an independent master seed for a named sub-experiment.
pub fn derive_seed(master: u64, tag: &str) -> u64 {
    let mut h = mix64(master ^ 0x5851_F42D_4C95_7F2D);
    for b in tag.bytes() {
        h = mix64(h ^ u64::from(b));
    }
    h
}

pub fn stream(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Source of standard normal variates driving a simulation.
///
/// Simulations draw unit normals and scale them by `sqrt(dt)` themselves.
pub trait NoiseSource {
    fn next_normal(&mut self) -> f64;

    /// A uniform variate on `[0, 1)`, used for within-step hitting tests.
    /// Deterministic sources return 1, which never triggers a hit.
    fn next_uniform(&mut self) -> f64 {
        1.0
    }
}

/// Gaussian noise from a seeded stream. Uniforms come from a second stream
/// so that the sequence of normals does not depend on how many uniforms a
/// simulation happens to draw.
#[derive(Debug, Clone)]
pub struct GaussianNoise {
    rng: ChaCha8Rng,
    uniforms: ChaCha8Rng,
}

impl GaussianNoise {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: stream(seed),
            uniforms: stream(mix64(seed ^ UNIFORM_TAG)),
        }
    }
}

impl NoiseSource for GaussianNoise {
    #[inline]
    fn next_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    #[inline]
    fn next_uniform(&mut self) -> f64 {
        self.uniforms.gen()
    }
}

/// Normals for steps of size `2h` assembled from pairs of steps of size `h`
/// of another source: `(z1 + z2) / √2` coordinate by coordinate. A coarse run
/// driven this way follows the Brownian path of the fine run. Every step must
/// draw exactly `per_step` normals.
#[derive(Debug, Clone)]
pub struct CoarsenedNoise<N> {
    inner: N,
    buf: Vec<f64>,
    pos: usize,
}

impl<N: NoiseSource> CoarsenedNoise<N> {
    pub fn new(inner: N, per_step: usize) -> Self {
        assert!(per_step > 0, "a step draws at least one normal");
        Self {
            inner,
            buf: vec![0.0; per_step],
            pos: per_step,
        }
    }
}

impl<N: NoiseSource> NoiseSource for CoarsenedNoise<N> {
    fn next_normal(&mut self) -> f64 {
        if self.pos == self.buf.len() {
            for b in self.buf.iter_mut() {
                *b = self.inner.next_normal();
            }
            for b in self.buf.iter_mut() {
                *b = (*b + self.inner.next_normal()) * std::f64::consts::FRAC_1_SQRT_2;
            }
            self.pos = 0;
        }
        let v = self.buf[self.pos];
        self.pos += 1;
        v
    }

    fn next_uniform(&mut self) -> f64 {
        self.inner.next_uniform()
    }
}

/// Zero increments: the simulation follows its drift ODE.
#[derive(Debug, Clone, Copy, Default)]
pub struct FrozenNoise;

impl NoiseSource for FrozenNoise {
    #[inline]
    fn next_normal(&mut self) -> f64 {
        0.0
    }
}

/// Replays a recorded sequence of normals, then zeros.
#[derive(Debug, Clone)]
pub struct ReplayNoise {
    values: Vec<f64>,
    pos: usize,
}

impl ReplayNoise {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values, pos: 0 }
    }

    pub fn consumed(&self) -> usize {
        self.pos
    }
}

impl NoiseSource for ReplayNoise {
    fn next_normal(&mut self) -> f64 {
        let v = self.values.get(self.pos).copied().unwrap_or(0.0);
        self.pos += 1;
        v
    }
}
