use serde::{Deserialize, Serialize};

use super::ToyModel;
use crate::error::{Error, Result};
use crate::revision::Unembedding;

/// Logit margin of the grounded token at fully planted visual positions.
pub(crate) const VISUAL_MARGIN: f64 = 10.0;
/// Logit the grounded token receives from the text position's own evidence.
pub(crate) const TEXT_GROUNDING: f64 = 8.0;
/// How far the final layer's prior pushes the distractor past the grounded token.
pub(crate) const PRIOR_MARGIN: f64 = 2.0;

/// An object that is in the image (`grounded_token`) and a plausible one that
/// is not (`distractor_token`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantSpec {
    pub grounded_token: u32,
    pub distractor_token: u32,
    /// Mixing weight of the grounded direction into the visual embeddings.
    pub strength: f64,
    /// Generation step at which the final layer prefers the distractor.
    #[serde(default)]
    pub designated_step: usize,
    /// Visual positions that receive the grounded direction; all when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<Vec<usize>>,
}

impl PlantSpec {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        let (g, d) = (self.grounded_token as usize, self.distractor_token as usize);
        if g >= vocab_size || d >= vocab_size {
            return Err(Error::Argument(format!(
                "planted tokens ({g}, {d}) must be below vocab_size {vocab_size}"
            )));
        }
        if g == d {
            return Err(Error::Argument("grounded and distractor tokens must differ".into()));
        }
        if !(0.0..=1.0).contains(&self.strength) {
            return Err(Error::Argument(format!("strength must lie in [0, 1], got {}", self.strength)));
        }
        Ok(())
    }
}

/// Precomputed injection vectors for a [`PlantSpec`].
#[derive(Debug, Clone)]
pub(crate) struct PlantState {
    pub spec: PlantSpec,
    /// Added (scaled by strength) to every visual embedding.
    pub visual_target: Vec<f32>,
    /// Added to the input embedding of the designated text position.
    pub grounding: Vec<f32>,
    /// Added to the final hidden state of the designated text position.
    pub prior: Vec<f32>,
}

impl PlantState {
    pub fn new(spec: PlantSpec, unembedding: &Unembedding) -> Self {
        let m = unembedding.matrix();
        let g: Vec<f64> = m.row(spec.grounded_token as usize).iter().map(|&v| v as f64).collect();
        let d: Vec<f64> = m.row(spec.distractor_token as usize).iter().map(|&v| v as f64).collect();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let (gg, dd, gd) = (dot(&g, &g), dot(&d, &d), dot(&g, &d));
        let det = gg * dd - gd * gd;
        // dual basis of span{g, d}: g.u_g = 1, d.u_g = 0 and vice versa
        let u_g: Vec<f64> = g.iter().zip(&d).map(|(a, b)| (dd * a - gd * b) / det).collect();
        let u_d: Vec<f64> = g.iter().zip(&d).map(|(a, b)| (gg * b - gd * a) / det).collect();
        let scale = |v: &[f64], s: f64| v.iter().map(|x| (x * s) as f32).collect::<Vec<f32>>();
        Self {
            visual_target: g.iter().map(|x| (x * VISUAL_MARGIN / gg) as f32).collect(),
            grounding: scale(&u_g, TEXT_GROUNDING),
            prior: scale(&u_d, TEXT_GROUNDING + PRIOR_MARGIN),
            spec,
        }
    }
}

/// Returns a copy of `backend` with the fixture planted.
///
/// Visual embeddings become `(1 - s) * v + s * G`, where `G` is the grounded
/// token's unembedding row scaled to a logit of 10, so early-layer scores
/// favour the grounded token. At the designated step the text position
/// carries evidence for the grounded token, and the final layer adds a prior
/// that puts the distractor 2 logits ahead of it, so plain greedy decoding
/// names the distractor.
pub fn plant_objects(backend: &ToyModel, spec: PlantSpec) -> Result<ToyModel> {
    spec.validate(backend.config().vocab_size)?;
    let n_visual = backend.config().n_visual;
    if let Some(&bad) = spec.region.iter().flatten().find(|&&r| r >= n_visual) {
        return Err(Error::Argument(format!("region position {bad} outside {n_visual} visual positions")));
    }
    let state = PlantState::new(spec, backend.unembedding_ref());
    Ok(backend.with_plant(Some(state)))
}
