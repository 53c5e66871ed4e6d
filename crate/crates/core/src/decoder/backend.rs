use std::collections::BTreeMap;

use crate::error::Result;
use crate::revision::{ModelDims, Unembedding};
use crate::tensor::Matrix;

/// What a backend receives as the image.
#[derive(Debug, Clone, PartialEq)]
pub enum VisualInput {
    /// `n_visual x d_model` embeddings placed before the prompt.
    Embeddings(Matrix),
    /// Opaque reference resolved by an external process (usually a path).
    ImageRef(String),
}

/// Model outputs at the last position of the sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    /// Final-layer logits.
    pub final_logits: Vec<f32>,
    /// Last-position hidden state of each recorded intermediate layer.
    pub early_hidden: BTreeMap<usize, Vec<f32>>,
}

/// A layered decoder exposing its intermediate hidden states.
///
/// `prefill` consumes the image and prompt and returns the outputs that
/// predict the first generated token; each `step` appends one token and
/// returns the outputs predicting the next. Visual-position hidden states
/// never change after prefill.
pub trait ModelBackend {
    type Session;

    fn dims(&self) -> ModelDims;

    fn unembedding(&self) -> &Unembedding;

    /// Intermediate layers whose hidden states the backend reports.
    fn recorded_layers(&self) -> Vec<usize>;

    fn prefill(&self, prompt: &[u32], visual: &VisualInput) -> Result<(Self::Session, StepOutput)>;

    fn step(&self, session: &mut Self::Session, token: u32) -> Result<StepOutput>;

    /// `n_visual x d_model` hidden states at `layer`.
    fn visual_hidden(&self, session: &Self::Session, layer: usize) -> Result<Matrix>;

    /// Independent copy of a session, used to branch beams.
    fn fork(&self, session: &Self::Session) -> Result<Self::Session>;
}

impl<B: ModelBackend + ?Sized> ModelBackend for &B {
    type Session = B::Session;

    fn dims(&self) -> ModelDims {
        (**self).dims()
    }
    fn unembedding(&self) -> &Unembedding {
        (**self).unembedding()
    }
    fn recorded_layers(&self) -> Vec<usize> {
        (**self).recorded_layers()
    }
    fn prefill(&self, prompt: &[u32], visual: &VisualInput) -> Result<(Self::Session, StepOutput)> {
        (**self).prefill(prompt, visual)
    }
    fn step(&self, session: &mut Self::Session, token: u32) -> Result<StepOutput> {
        (**self).step(session, token)
    }
    fn visual_hidden(&self, session: &Self::Session, layer: usize) -> Result<Matrix> {
        (**self).visual_hidden(session, layer)
    }
    fn fork(&self, session: &Self::Session) -> Result<Self::Session> {
        (**self).fork(session)
    }
}
