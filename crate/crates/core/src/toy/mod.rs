//! Deterministic toy multimodal decoder.
//!
//! A pre-norm transformer (RMS norm, causal multi-head attention, ReLU
//! feed-forward) over `n_visual` image embeddings followed by text tokens.
//! All arithmetic is `f32` with sequential dot products, and weights come from
//! one SplitMix64 stream drawn in this order, each matrix row-major with rows
//! indexed by output unit:
//!
//! 1. token embedding, `vocab_size x d_model`
//! 2. position embedding, `max_positions x d_model` (learned positions only)
//! 3. per layer: `W_q`, `W_k`, `W_v`, `W_o` (`d x d`), `W_in` (`4d x d`),
//!    `W_out` (`d x 4d`)
//! 4. unembedding, `vocab_size x d_model`
//!
//! Every draw is uniform in `[-0.08, 0.08)`. There is no final norm, so the
//! output logits are exactly the projection of the last hidden state.

pub mod fixture;
mod model;
mod plant;
mod rng;
mod vocab;

pub use model::{ToyModel, ToySession};
pub use plant::{plant_objects, PlantSpec};
pub use rng::SplitMix64;
pub use vocab::{ToyVocab, EOS};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const WEIGHT_SCALE: f32 = 0.08;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionEncoding {
    Learned,
    Rope,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub n_visual: usize,
    pub seed: u64,
    pub positions: PositionEncoding,
    pub max_positions: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            n_layers: 6,
            d_model: 32,
            n_heads: 4,
            vocab_size: 64,
            n_visual: 16,
            seed: 0,
            positions: PositionEncoding::Learned,
            max_positions: 256,
        }
    }
}

impl ToyConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self { seed, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("vocab_size", self.vocab_size),
            ("n_visual", self.n_visual),
            ("max_positions", self.max_positions),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.positions == PositionEncoding::Rope && (self.d_model / self.n_heads) % 2 != 0 {
            return Err(Error::Config("rotary positions need an even head dimension".into()));
        }
        if self.max_positions <= self.n_visual {
            return Err(Error::Config("max_positions must exceed n_visual".into()));
        }
        Ok(())
    }
}

/// Builds the seeded toy backend.
pub fn build_toy(config: ToyConfig) -> Result<ToyModel> {
    ToyModel::new(config)
}

/// Noise image: `n_visual x d_model` embeddings uniform in `[-1, 1)`.
pub fn synth_image(config: &ToyConfig, seed: u64) -> Matrix {
    let mut rng = SplitMix64::new(seed);
    let data = rng.fill(config.n_visual * config.d_model, 1.0);
    Matrix::from_vec(config.n_visual, config.d_model, data).expect("shape by construction")
}
