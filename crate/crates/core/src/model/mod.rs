//! The hierarchical Transformer-VAE.
//!
//! Three levels of latent variables. Inference runs deepest level first
//! (z3, then z2 given z3, then z1 given z2 and z3); generation runs the other
//! way (z1 standard normal, z2 given z1, z3 given z1 and z2, then tokens).
//!
//! Global LV index convention, used everywhere downstream: level-1 LVs are
//! `0..n1`, level-2 LVs `n1..n1+n2`, level-3 LVs follow.

mod attention;
mod config;
mod hvae;
mod layers;
mod noise;

pub use attention::{extract_attention, AttentionRecord, ExtractedAttention, LevelAttention};
pub use config::{ModelConfig, Precision};
pub use hvae::{ElboTerms, HierarchicalVae, PosteriorGraph};
pub use noise::{NoiseSource, SeededNoise, ZeroNoise};

use crate::tensor::{Scalar, Tensor};

/// Diagonal Gaussian parameters for the LVs of one level, `[n_k, z_size]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParams<T> {
    pub means: Tensor<T>,
    pub stds: Tensor<T>,
}

impl<T: Scalar> GaussianParams<T> {
    pub fn standard(rows: usize, cols: usize) -> Self {
        Self {
            means: Tensor::zeros(rows, cols),
            stds: Tensor::filled(rows, cols, T::ONE),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentLevel<T> {
    pub posterior: GaussianParams<T>,
    pub prior: Option<GaussianParams<T>>,
    /// Reparameterized draws, `[n_k, z_size]`.
    pub values: Tensor<T>,
}

/// Posterior, prior and sampled values of all three levels; `levels[0]` is z1.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentHierarchy<T> {
    pub levels: [LatentLevel<T>; 3],
}

/// Smallest floor added to every standard deviation.
pub const STD_FLOOR: f64 = 1e-6;
