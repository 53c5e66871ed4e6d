use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{CandidateSet, SasTable};
use crate::error::{Error, Result};

/// Selected early layer and its confidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerChoice {
    pub layer: usize,
    pub gamma: f64,
    pub per_layer_scores: BTreeMap<usize, f64>,
}

/// `sigma_l = max_{c in C} sas(l, c)`; picks the layer with the largest sigma,
/// lowest layer index on ties.
pub fn select_layer(table: &SasTable, candidates: &CandidateSet, n_image_tokens: usize) -> Result<LayerChoice> {
    select_layer_with(table.layer_ids(), candidates, |l, c| table.sas(l, c, n_image_tokens))
}

pub(crate) fn select_layer_with(
    layer_ids: &[usize],
    candidates: &CandidateSet,
    mut score: impl FnMut(usize, u32) -> Result<f64>,
) -> Result<LayerChoice> {
    if candidates.is_empty() {
        return Err(Error::Argument("empty candidate set".into()));
    }
    if layer_ids.is_empty() {
        return Err(Error::Config("no layers to select from".into()));
    }
    let mut per_layer_scores = BTreeMap::new();
    let mut best: Option<(usize, f64)> = None;
    for &layer in layer_ids {
        let mut sigma = f64::NEG_INFINITY;
        for &c in candidates.token_ids() {
            sigma = sigma.max(score(layer, c)?);
        }
        per_layer_scores.insert(layer, sigma);
        // strict comparison keeps the earliest layer on ties (layer_ids ascending)
        if best.map_or(true, |(_, s)| sigma > s) {
            best = Some((layer, sigma));
        }
    }
    let (layer, gamma) = best.expect("non-empty layer set");
    Ok(LayerChoice {
        layer,
        gamma: gamma.clamp(0.0, 1.0),
        per_layer_scores,
    })
}

/// `z_hat[c] = z_final[c] + alpha * gamma * z_early[c]` for `c` in the
/// candidate set; every other entry is copied unchanged.
pub fn revise_logits(
    final_logits: &[f32],
    early_logits: &[f32],
    candidates: &CandidateSet,
    alpha: f64,
    gamma: f64,
) -> Result<Vec<f32>> {
    if final_logits.len() != early_logits.len() {
        return Err(Error::shape(
            format!("early logits of length {}", final_logits.len()),
            format!("length {}", early_logits.len()),
        ));
    }
    if candidates.mask().len() != final_logits.len() {
        return Err(Error::shape(
            format!("candidate mask of length {}", final_logits.len()),
            format!("length {}", candidates.mask().len()),
        ));
    }
    if !(alpha >= 0.0) || !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Argument(format!(
            "alpha must be >= 0 and gamma in [0, 1] (alpha = {alpha}, gamma = {gamma})"
        )));
    }
    let mut revised = final_logits.to_vec();
    let scale = alpha * gamma;
    if scale == 0.0 {
        return Ok(revised);
    }
    for &c in candidates.token_ids() {
        let i = c as usize;
        revised[i] = (f64::from(final_logits[i]) + scale * f64::from(early_logits[i])) as f32;
    }
    Ok(revised)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixed_scores(scores: &[(usize, f64)]) -> impl FnMut(usize, u32) -> Result<f64> + '_ {
        move |l, _| Ok(scores.iter().find(|(x, _)| *x == l).unwrap().1)
    }

    #[test]
    fn picks_largest_sigma_lowest_on_tie() {
        let c = CandidateSet::from_ids(&[0], 4).unwrap();
        let s = [(20, 0.4), (25, 0.7)];
        let choice = select_layer_with(&[20, 25], &c, fixed_scores(&s)).unwrap();
        assert_eq!((choice.layer, choice.gamma), (25, 0.7));

        let s = [(20, 0.5), (25, 0.5)];
        let choice = select_layer_with(&[20, 25], &c, fixed_scores(&s)).unwrap();
        assert_eq!((choice.layer, choice.gamma), (20, 0.5));

        let s = [(7, 0.3)];
        let choice = select_layer_with(&[7], &c, fixed_scores(&s)).unwrap();
        assert_eq!((choice.layer, choice.gamma), (7, 0.3));
        assert_eq!(choice.per_layer_scores[&7], 0.3);
    }

    #[test]
    fn sigma_is_max_over_candidates() {
        let c = CandidateSet::from_ids(&[1, 2], 4).unwrap();
        let choice = select_layer_with(&[3, 4], &c, |l, t| Ok((l as f64 * 0.1) * if t == 2 { 1.0 } else { 0.5 })).unwrap();
        assert_eq!(choice.layer, 4);
        assert!((choice.gamma - 0.4).abs() < 1e-12);
    }

    #[test]
    fn revise_hand_example() {
        let c = CandidateSet::from_ids(&[0, 2], 3).unwrap();
        let z = revise_logits(&[1., 2., 3.], &[10., 0., -10.], &c, 0.6, 0.5).unwrap();
        assert_eq!(z, vec![4.0, 2.0, 0.0]);
    }

    #[test]
    fn revise_is_identity_when_disabled() {
        let c = CandidateSet::from_ids(&[0, 1, 2], 3).unwrap();
        let z = [-0.0f32, 2.5, -1.0];
        let e = [3.0f32, 4.0, 5.0];
        for (a, g) in [(0.0, 0.9), (0.6, 0.0)] {
            let r = revise_logits(&z, &e, &c, a, g).unwrap();
            let bits: Vec<u32> = r.iter().map(|v| v.to_bits()).collect();
            let expect: Vec<u32> = z.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits, expect);
        }
    }

    #[test]
    fn revise_saturated_mask() {
        let c = CandidateSet::from_ids(&[0, 1, 2], 3).unwrap();
        let r = revise_logits(&[1., 1., 1.], &[2., -2., 0.5], &c, 0.5, 1.0).unwrap();
        assert_eq!(r, vec![2.0, 0.0, 1.25]);
    }

    #[test]
    fn revise_errors() {
        let c = CandidateSet::from_ids(&[0], 2).unwrap();
        assert!(matches!(revise_logits(&[1., 2.], &[1.], &c, 0.5, 0.5), Err(Error::Shape { .. })));
        assert!(revise_logits(&[1., 2.], &[1., 1.], &c, -1.0, 0.5).is_err());
        assert!(revise_logits(&[1., 2.], &[1., 1.], &c, 1.0, 1.5).is_err());
        let empty = CandidateSet::from_ids(&[0], 2).unwrap();
        assert!(select_layer_with(&[], &empty, |_, _| Ok(0.0)).is_err());
    }
}
