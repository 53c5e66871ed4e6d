//! Autoregressive decoding over a [`ModelBackend`]: baseline greedy, revised
//! single-path decoding, beam search over either score, and teacher-forced
//! replay of recorded traces.

mod backend;
mod beam;
mod replay;

pub use backend::{ModelBackend, StepOutput, VisualInput};
pub use beam::{beam_decode, Beam, BeamOutput};
pub use replay::replay;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::bridge::trace::{TraceFile, TraceHeader, TraceStep};
use crate::error::{Error, Result};
use crate::revision::{
    build_sas_table, filter_candidates, project_hidden, revise_logits, CandidateSet, LayerChoice, SaverParams,
    SasScorer, SasTable, Unembedding,
};
use crate::tensor::{argmax, Matrix};

/// Search and revision settings for one generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeParams {
    /// Revision settings; `None` decodes from the raw final-layer logits.
    pub saver: Option<SaverParams>,
    pub max_new_tokens: usize,
    pub beam_width: usize,
    /// Divides the logits before beam scoring. 0 leaves scores untouched;
    /// single-path decoding is always argmax.
    pub temperature: f64,
    /// CTRL-style penalty over previously generated tokens; 1.0 disables it.
    pub repetition_penalty: f64,
    pub eos_token: Option<u32>,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self {
            saver: None,
            max_new_tokens: 64,
            beam_width: 1,
            temperature: 0.0,
            repetition_penalty: 1.0,
            eos_token: None,
        }
    }
}

impl DecodeParams {
    pub fn with_saver(saver: SaverParams) -> Self {
        Self {
            saver: Some(saver),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_new_tokens == 0 {
            return Err(Error::Argument("max_new_tokens must be at least 1".into()));
        }
        if self.beam_width == 0 {
            return Err(Error::Argument("beam_width must be at least 1".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::Argument(format!("temperature must be >= 0, got {}", self.temperature)));
        }
        if !(self.repetition_penalty > 0.0 && self.repetition_penalty.is_finite()) {
            return Err(Error::Argument(format!(
                "repetition_penalty must be > 0, got {}",
                self.repetition_penalty
            )));
        }
        if let Some(s) = &self.saver {
            s.validate()?;
        }
        Ok(())
    }
}

/// Per-step diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step_index: usize,
    pub candidate_ids: Vec<u32>,
    pub chosen_layer: Option<usize>,
    pub gamma: Option<f64>,
    pub final_logits_argmax: u32,
    pub revised_logits_argmax: u32,
    pub emitted_token: u32,
    /// Set by replay when the recorded token differs from the revised argmax.
    #[serde(default)]
    pub diverged: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub final_logits: Vec<f32>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub revised_logits: Vec<f32>,
}

impl StepRecord {
    /// Copy without the logit vectors.
    pub fn compact(&self) -> StepRecord {
        StepRecord {
            final_logits: Vec::new(),
            revised_logits: Vec::new(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput {
    /// Generated tokens, without a terminating eos.
    pub tokens: Vec<u32>,
    pub records: Vec<StepRecord>,
    pub hit_eos: bool,
}

/// Scoring context shared by every step (and every beam) of one image.
pub(crate) struct Reviser<'a> {
    params: &'a SaverParams,
    scorer: SasScorer<'a>,
    unembedding: &'a Unembedding,
}

impl<'a> Reviser<'a> {
    pub(crate) fn new(table: &'a SasTable, params: &'a SaverParams, unembedding: &'a Unembedding) -> Self {
        Self {
            params,
            scorer: SasScorer::new(table, params.n_image_tokens),
            unembedding,
        }
    }
}

/// Final logits after the repetition penalty, and the revised logits.
pub(crate) struct RevisedStep {
    pub final_logits: Vec<f32>,
    pub revised: Vec<f32>,
    pub candidates: Option<CandidateSet>,
    pub choice: Option<LayerChoice>,
}

impl RevisedStep {
    pub(crate) fn record(&self, step_index: usize, emitted: u32, keep_logits: bool) -> StepRecord {
        StepRecord {
            step_index,
            candidate_ids: self.candidates.as_ref().map(|c| c.token_ids().to_vec()).unwrap_or_default(),
            chosen_layer: self.choice.as_ref().map(|c| c.layer),
            gamma: self.choice.as_ref().map(|c| c.gamma),
            final_logits_argmax: argmax(&self.final_logits).unwrap_or(0) as u32,
            revised_logits_argmax: argmax(&self.revised).unwrap_or(0) as u32,
            emitted_token: emitted,
            diverged: false,
            final_logits: if keep_logits { self.final_logits.clone() } else { Vec::new() },
            revised_logits: if keep_logits { self.revised.clone() } else { Vec::new() },
        }
    }
}

pub(crate) fn apply_repetition_penalty(logits: &mut [f32], history: &[u32], penalty: f64) {
    if penalty == 1.0 {
        return;
    }
    let mut seen = vec![false; logits.len()];
    for &t in history {
        let i = t as usize;
        if i < logits.len() && !seen[i] {
            seen[i] = true;
            let v = f64::from(logits[i]);
            logits[i] = if v > 0.0 { v / penalty } else { v * penalty } as f32;
        }
    }
}

/// One step of the revision pipeline: penalty, candidate filtering, layer
/// selection and logit revision.
pub(crate) fn revise_step(
    reviser: Option<&Reviser<'_>>,
    output: &StepOutput,
    history: &[u32],
    repetition_penalty: f64,
) -> Result<RevisedStep> {
    let mut final_logits = output.final_logits.clone();
    apply_repetition_penalty(&mut final_logits, history, repetition_penalty);
    let Some(rv) = reviser else {
        return Ok(RevisedStep {
            revised: final_logits.clone(),
            final_logits,
            candidates: None,
            choice: None,
        });
    };
    if final_logits.len() != rv.unembedding.vocab_size() {
        return Err(Error::shape(
            format!("{} final logits", rv.unembedding.vocab_size()),
            final_logits.len(),
        ));
    }
    let candidates = filter_candidates(&final_logits, rv.params.top_k, rv.params.top_p)?;
    let choice = rv.scorer.select_layer(&candidates)?;
    let hidden = output
        .early_hidden
        .get(&choice.layer)
        .ok_or_else(|| Error::Backend(format!("step output lacks hidden state for layer {}", choice.layer)))?;
    let early_logits = project_hidden(hidden, rv.unembedding)?;
    let revised = revise_logits(&final_logits, &early_logits, &candidates, rv.params.alpha, choice.gamma)?;
    Ok(RevisedStep {
        final_logits,
        revised,
        candidates: Some(candidates),
        choice: Some(choice),
    })
}

/// Resolves the layer set against the backend and builds the image's table.
pub(crate) fn prepare_table<B: ModelBackend>(
    backend: &B,
    session: &B::Session,
    saver: &SaverParams,
) -> Result<SasTable> {
    let dims = backend.dims();
    let layers = saver.layers.resolve(dims.n_layers)?;
    let recorded = backend.recorded_layers();
    if let Some(missing) = layers.iter().find(|l| !recorded.contains(l)) {
        return Err(Error::Config(format!(
            "layer {missing} is not recorded by the backend (recorded: {recorded:?})"
        )));
    }
    let mut hidden = BTreeMap::new();
    for &l in &layers {
        hidden.insert(l, backend.visual_hidden(session, l)?);
    }
    build_sas_table(&hidden, backend.unembedding(), &layers, dims.n_layers)
}

/// Baseline decoding: argmax of the final-layer logits at every step.
pub fn greedy_decode<B: ModelBackend>(
    backend: &B,
    prompt: &[u32],
    visual: &VisualInput,
    params: &DecodeParams,
) -> Result<DecodeOutput> {
    if params.saver.is_some() {
        return Err(Error::Argument("greedy_decode takes parameters without revision".into()));
    }
    Ok(run_single(backend, prompt, visual, params, false)?.0)
}

/// Single-path decoding from revised logits.
pub fn saver_decode<B: ModelBackend>(
    backend: &B,
    prompt: &[u32],
    visual: &VisualInput,
    params: &DecodeParams,
) -> Result<DecodeOutput> {
    if params.saver.is_none() {
        return Err(Error::Argument("saver_decode needs revision parameters".into()));
    }
    Ok(run_single(backend, prompt, visual, params, false)?.0)
}

/// Dispatches on `beam_width`: single-path for 1, beam search otherwise.
pub fn decode<B: ModelBackend>(
    backend: &B,
    prompt: &[u32],
    visual: &VisualInput,
    params: &DecodeParams,
) -> Result<DecodeOutput> {
    if params.beam_width > 1 {
        Ok(beam_decode(backend, prompt, visual, params)?.best)
    } else {
        Ok(run_single(backend, prompt, visual, params, false)?.0)
    }
}

/// Single-path decoding that also captures every activation needed to replay
/// the run offline.
pub fn decode_with_trace<B: ModelBackend>(
    backend: &B,
    prompt: &[u32],
    visual: &VisualInput,
    params: &DecodeParams,
) -> Result<(DecodeOutput, TraceFile)> {
    let (out, trace) = run_single(backend, prompt, visual, params, true)?;
    Ok((out, trace.expect("trace captured")))
}

fn run_single<B: ModelBackend>(
    backend: &B,
    prompt: &[u32],
    visual: &VisualInput,
    params: &DecodeParams,
    capture: bool,
) -> Result<(DecodeOutput, Option<TraceFile>)> {
    params.validate()?;
    if params.beam_width != 1 {
        return Err(Error::Argument("single-path decoding needs beam_width = 1".into()));
    }
    if prompt.is_empty() {
        return Err(Error::Argument("prompt must be non-empty".into()));
    }
    let (mut session, mut output) = backend.prefill(prompt, visual)?;

    let table = match &params.saver {
        Some(s) => Some(prepare_table(backend, &session, s)?),
        None => None,
    };
    let reviser = match (&table, &params.saver) {
        (Some(t), Some(s)) => Some(Reviser::new(t, s, backend.unembedding())),
        _ => None,
    };

    let mut trace = if capture { Some(start_trace(backend, &session)?) } else { None };

    let mut tokens = Vec::new();
    let mut records = Vec::new();
    let mut hit_eos = false;
    for step in 0..params.max_new_tokens {
        let revised = revise_step(reviser.as_ref(), &output, &tokens, params.repetition_penalty)?;
        let next = argmax(&revised.revised).ok_or_else(|| Error::Backend("empty logits".into()))? as u32;
        records.push(revised.record(step, next, true));
        if let Some(t) = trace.as_mut() {
            t.steps.push(TraceStep {
                token: next,
                final_logits: output.final_logits.clone(),
                early_hidden: output.early_hidden.values().cloned().collect(),
            });
        }
        if Some(next) == params.eos_token {
            hit_eos = true;
            break;
        }
        tokens.push(next);
        if step + 1 < params.max_new_tokens {
            output = backend.step(&mut session, next)?;
        }
    }
    if let Some(t) = trace.as_mut() {
        t.header.n_steps = t.steps.len();
    }
    Ok((DecodeOutput { tokens, records, hit_eos }, trace))
}

fn start_trace<B: ModelBackend>(backend: &B, session: &B::Session) -> Result<TraceFile> {
    let dims = backend.dims();
    let recorded_layers = backend.recorded_layers();
    let mut visual = Vec::with_capacity(recorded_layers.len());
    for &l in &recorded_layers {
        visual.push(backend.visual_hidden(session, l)?);
    }
    let header = TraceHeader::new(dims, recorded_layers, 0, true);
    Ok(TraceFile {
        header,
        unembedding: Some(backend.unembedding().matrix().clone()),
        visual_hidden: visual,
        steps: Vec::new(),
    })
}

/// Visual-position hidden states at every recorded layer, keyed by layer.
pub fn collect_visual_hidden<B: ModelBackend>(
    backend: &B,
    session: &B::Session,
    layers: &[usize],
) -> Result<BTreeMap<usize, Matrix>> {
    layers
        .iter()
        .map(|&l| Ok((l, backend.visual_hidden(session, l)?)))
        .collect()
}
