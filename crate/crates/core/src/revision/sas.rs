use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};

use super::{project_hidden, softmax, CandidateSet, LayerChoice, Unembedding};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Per-layer softmax of the logit-lens projection at every visual position.
///
/// Stored token-major (`[layer][token][position]`) so the per-token scan in
/// [`SasTable::sas`] reads contiguous memory. Visual positions precede all text
/// under causal attention, so the table is built once per image.
#[derive(Debug, Clone, PartialEq)]
pub struct SasTable {
    layer_ids: Vec<usize>,
    n_visual: usize,
    vocab_size: usize,
    probs: Vec<f32>,
}

impl SasTable {
    pub fn layer_ids(&self) -> &[usize] {
        &self.layer_ids
    }

    pub fn n_visual(&self) -> usize {
        self.n_visual
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn layer_slot(&self, layer: usize) -> Result<usize> {
        self.layer_ids
            .binary_search(&layer)
            .map_err(|_| Error::Lookup(format!("layer {layer} is not in the SAS table")))
    }

    /// Probabilities of `token` at every visual position of `layer`.
    pub fn token_probs(&self, layer: usize, token: u32) -> Result<&[f32]> {
        let slot = self.layer_slot(layer)?;
        let t = token as usize;
        if t >= self.vocab_size {
            return Err(Error::Lookup(format!(
                "token {token} out of range for vocabulary of {}",
                self.vocab_size
            )));
        }
        let start = (slot * self.vocab_size + t) * self.n_visual;
        Ok(&self.probs[start..start + self.n_visual])
    }

    /// Full distribution over the vocabulary at one visual position.
    pub fn position_row(&self, layer: usize, position: usize) -> Result<Vec<f32>> {
        let slot = self.layer_slot(layer)?;
        if position >= self.n_visual {
            return Err(Error::Lookup(format!("visual position {position} out of range")));
        }
        let base = slot * self.vocab_size * self.n_visual;
        Ok((0..self.vocab_size)
            .map(|t| self.probs[base + t * self.n_visual + position])
            .collect())
    }

    /// Style-aware score: mean of the `n_image_tokens` largest per-position
    /// probabilities of `token` at `layer`. `n_image_tokens` is clamped to
    /// `[1, n_visual]`.
    pub fn sas(&self, layer: usize, token: u32, n_image_tokens: usize) -> Result<f64> {
        let probs = self.token_probs(layer, token)?;
        let n = n_image_tokens.clamp(1, self.n_visual);
        let mut sorted = probs.to_vec();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let sum: f64 = sorted[..n].iter().map(|&p| f64::from(p)).sum();
        Ok((sum / n as f64).clamp(0.0, 1.0))
    }
}

/// Builds the table from visual-position hidden states (`n_visual x d_model`
/// per layer). Layers must lie in `1..n_layers`; the final layer is excluded.
pub fn build_sas_table(
    visual_hidden: &BTreeMap<usize, Matrix>,
    unembedding: &Unembedding,
    layer_set: &[usize],
    n_layers: usize,
) -> Result<SasTable> {
    let mut layer_ids = layer_set.to_vec();
    layer_ids.sort_unstable();
    layer_ids.dedup();
    if layer_ids.is_empty() {
        return Err(Error::Config("layer set is empty".into()));
    }
    if let Some(&bad) = layer_ids.iter().find(|&&l| l == 0 || l >= n_layers) {
        return Err(Error::Config(format!(
            "layer {bad} outside the early-layer range 1..={}",
            n_layers.saturating_sub(1)
        )));
    }

    let vocab_size = unembedding.vocab_size();
    let mut n_visual = None;
    let mut probs = Vec::new();
    for &layer in &layer_ids {
        let hidden = visual_hidden
            .get(&layer)
            .ok_or_else(|| Error::Config(format!("hidden states for layer {layer} not available")))?;
        let p = *n_visual.get_or_insert(hidden.rows());
        if hidden.rows() != p || p == 0 {
            return Err(Error::shape(
                format!("{p} visual positions"),
                format!("{} at layer {layer}", hidden.rows()),
            ));
        }
        let mut block = vec![0.0f32; vocab_size * p];
        for (pos, h) in hidden.iter_rows().enumerate() {
            let row = softmax(&project_hidden(h, unembedding)?)?;
            for (t, &v) in row.iter().enumerate() {
                block[t * p + pos] = v as f32;
            }
        }
        probs.extend_from_slice(&block);
    }

    Ok(SasTable {
        layer_ids,
        n_visual: n_visual.unwrap_or(0),
        vocab_size,
        probs,
    })
}

/// Memoizing view over a [`SasTable`] for a fixed `n_image_tokens`.
///
/// Scores are filled lazily for the tokens that actually show up in candidate
/// sets. The memo is single-threaded; give each worker its own scorer.
#[derive(Debug)]
pub struct SasScorer<'a> {
    table: &'a SasTable,
    n_image_tokens: usize,
    memo: RefCell<HashMap<(usize, u32), f64>>,
}

impl<'a> SasScorer<'a> {
    pub fn new(table: &'a SasTable, n_image_tokens: usize) -> Self {
        if n_image_tokens > table.n_visual() {
            log::warn!(
                "n_image_tokens = {n_image_tokens} exceeds {} visual positions; clamping",
                table.n_visual()
            );
        }
        Self {
            table,
            n_image_tokens: n_image_tokens.clamp(1, table.n_visual().max(1)),
            memo: RefCell::new(HashMap::new()),
        }
    }

    pub fn table(&self) -> &SasTable {
        self.table
    }

    pub fn n_image_tokens(&self) -> usize {
        self.n_image_tokens
    }

    pub fn score(&self, layer: usize, token: u32) -> Result<f64> {
        if let Some(&v) = self.memo.borrow().get(&(layer, token)) {
            return Ok(v);
        }
        let v = self.table.sas(layer, token, self.n_image_tokens)?;
        self.memo.borrow_mut().insert((layer, token), v);
        Ok(v)
    }

    pub fn select_layer(&self, candidates: &CandidateSet) -> Result<LayerChoice> {
        super::select::select_layer_with(self.table.layer_ids(), candidates, |l, c| self.score(l, c))
    }
}
