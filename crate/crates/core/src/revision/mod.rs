//! Early-layer logit revision.
//!
//! A decoding step gives final-layer logits `z_final` and the last-position
//! hidden state of every recorded intermediate layer. Revision then:
//!
//! 1. keeps a candidate set `C` from `z_final` (nucleus, then capped at `k`);
//! 2. scores each layer `l` by `max_{c in C} sas(l, c)`, where the style-aware
//!    score averages the probability of `c` over the visual positions where it
//!    is highest (a [`SasTable`] precomputed once per image);
//! 3. picks the best layer `l*` with confidence `gamma` and adds
//!    `alpha * gamma * z_l*` to `z_final` on `C` only.

mod candidates;
mod params;
mod sas;
mod select;

pub use candidates::{filter_candidates, CandidateSet};
pub use params::{LayerPreset, LayerSpec, SaverParams};
pub use sas::{build_sas_table, SasScorer, SasTable};
pub use select::{revise_logits, select_layer, LayerChoice};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Static architecture of a layered decoder.
///
/// Hidden states are indexed `0..=n_layers`: index 0 is the input embedding,
/// index `n_layers` the final layer whose projection gives the output logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub n_layers: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    pub n_visual: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("vocab_size", self.vocab_size),
            ("n_visual", self.n_visual),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

/// Output embedding, `vocab_size x d_model`; row `r` belongs to token `r`.
#[derive(Debug, Clone, PartialEq)]
pub struct Unembedding {
    matrix: Matrix,
}

impl Unembedding {
    pub fn new(matrix: Matrix) -> Result<Self> {
        if matrix.rows() == 0 || matrix.cols() == 0 {
            return Err(Error::Argument("unembedding must be non-empty".into()));
        }
        if !matrix.is_finite() {
            return Err(Error::Argument("unembedding has non-finite entries".into()));
        }
        Ok(Self { matrix })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn vocab_size(&self) -> usize {
        self.matrix.rows()
    }

    pub fn d_model(&self) -> usize {
        self.matrix.cols()
    }
}

/// Max-subtracted softmax, evaluated in `f64`.
pub fn softmax<T: Copy + Into<f64>>(logits: &[T]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::Argument("softmax of an empty vector".into()));
    }
    let mut max = f64::NEG_INFINITY;
    for &v in logits {
        let v: f64 = v.into();
        if v.is_nan() {
            return Err(Error::Argument("softmax input contains NaN".into()));
        }
        if v > max {
            max = v;
        }
    }
    if !max.is_finite() {
        return Err(Error::Argument("softmax input has no finite maximum".into()));
    }
    let exps: Vec<f64> = logits.iter().map(|&v| (v.into() - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Log-softmax in `f64`; same stabilization as [`softmax`].
pub fn log_softmax<T: Copy + Into<f64>>(logits: &[T]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::Argument("log_softmax of an empty vector".into()));
    }
    let xs: Vec<f64> = logits.iter().map(|&v| v.into()).collect();
    if xs.iter().any(|v| v.is_nan()) {
        return Err(Error::Argument("log_softmax input contains NaN".into()));
    }
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + xs.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(xs.into_iter().map(|v| v - lse).collect())
}

/// Logit-lens projection of one hidden state: `out[r] = dot(W_U[r], h)`.
pub fn project_hidden(hidden: &[f32], unembedding: &Unembedding) -> Result<Vec<f32>> {
    if hidden.len() != unembedding.d_model() {
        return Err(Error::shape(
            format!("hidden state of length {}", unembedding.d_model()),
            format!("length {}", hidden.len()),
        ));
    }
    unembedding.matrix.matvec(hidden)
}
