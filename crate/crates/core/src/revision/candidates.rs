use super::softmax;
use crate::error::{Error, Result};

/// Tokens kept for revision at one step, in descending probability order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateSet {
    token_ids: Vec<u32>,
    mask: Vec<bool>,
}

impl CandidateSet {
    /// Builds a set directly from token ids (deduplicated, order preserved).
    pub fn from_ids(ids: &[u32], vocab_size: usize) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Argument("candidate set must be non-empty".into()));
        }
        let mut mask = vec![false; vocab_size];
        let mut token_ids = Vec::with_capacity(ids.len());
        for &id in ids {
            let slot = mask
                .get_mut(id as usize)
                .ok_or_else(|| Error::Argument(format!("candidate {id} outside vocabulary")))?;
            if !*slot {
                *slot = true;
                token_ids.push(id);
            }
        }
        Ok(Self { token_ids, mask })
    }

    pub fn token_ids(&self) -> &[u32] {
        &self.token_ids
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn contains(&self, token: u32) -> bool {
        self.mask.get(token as usize).copied().unwrap_or(false)
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// Nucleus filtering followed by a hard cap of `top_k` tokens.
///
/// Tokens are ranked by descending logit (lowest id first on ties); the
/// shortest prefix whose cumulative probability reaches `top_p` is kept and
/// then truncated to `top_k`.
pub fn filter_candidates(final_logits: &[f32], top_k: usize, top_p: f64) -> Result<CandidateSet> {
    if top_k == 0 {
        return Err(Error::Argument("top_k must be at least 1".into()));
    }
    if !(top_p > 0.0 && top_p <= 1.0) {
        return Err(Error::Argument(format!("top_p must lie in (0, 1], got {top_p}")));
    }
    let probs = softmax(final_logits)?;

    let mut order: Vec<u32> = (0..final_logits.len() as u32).collect();
    order.sort_by(|&a, &b| {
        final_logits[b as usize]
            .total_cmp(&final_logits[a as usize])
            .then(a.cmp(&b))
    });

    let mut keep = order.len();
    if top_p < 1.0 {
        let mut cumulative = 0.0f64;
        for (i, &t) in order.iter().enumerate() {
            cumulative += probs[t as usize];
            if cumulative >= top_p {
                keep = i + 1;
                break;
            }
        }
    }
    order.truncate(keep.min(top_k));
    CandidateSet::from_ids(&order, final_logits.len())
}
