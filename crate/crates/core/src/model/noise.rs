use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Source of the ε in reparameterized draws `mean + std ⊙ ε`.
pub trait NoiseSource {
    fn standard_normal(&mut self, n: usize) -> Vec<f64>;
}

/// ε ≡ 0: every draw equals its mean.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroNoise;

impl NoiseSource for ZeroNoise {
    fn standard_normal(&mut self, n: usize) -> Vec<f64> {
        vec![0.0; n]
    }
}

#[derive(Clone, Debug)]
pub struct SeededNoise(pub ChaCha8Rng);

impl SeededNoise {
    pub fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }
}

impl NoiseSource for SeededNoise {
    fn standard_normal(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.0.sample(StandardNormal)).collect()
    }
}

impl NoiseSource for ChaCha8Rng {
    fn standard_normal(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.sample(StandardNormal)).collect()
    }
}

impl<N: NoiseSource + ?Sized> NoiseSource for &mut N {
    fn standard_normal(&mut self, n: usize) -> Vec<f64> {
        (**self).standard_normal(n)
    }
}
