use std::cmp::Ordering;

use super::{prepare_table, revise_step, DecodeOutput, DecodeParams, ModelBackend, Reviser, StepOutput, StepRecord, VisualInput};
use crate::error::{Error, Result};
use crate::revision::log_softmax;

/// A finished or in-progress hypothesis.
#[derive(Debug, Clone, PartialEq)]
pub struct Beam {
    /// Generated tokens, including a terminating eos when finished by one.
    pub tokens: Vec<u32>,
    /// Sum of per-step log-softmax scores (no length normalization).
    pub log_prob: f64,
    pub finished: bool,
}

#[derive(Debug, Clone)]
pub struct BeamOutput {
    pub best: DecodeOutput,
    /// Surviving beams, best first.
    pub beams: Vec<Beam>,
}

struct LiveBeam<S> {
    beam: Beam,
    session: Option<S>,
    pending: Option<StepOutput>,
    records: Vec<StepRecord>,
}

struct Expansion {
    parent: usize,
    token: Option<u32>,
    log_prob: f64,
    record: Option<StepRecord>,
}

/// Orders by descending score, then lexicographically smaller sequence.
fn rank(a_lp: f64, a_seq: &[u32], b_lp: f64, b_seq: &[u32]) -> Ordering {
    b_lp.total_cmp(&a_lp).then_with(|| a_seq.cmp(b_seq))
}

/// Beam search over log-softmax of the (revised, when enabled) logits.
///
/// Each live beam proposes its `beam_width` best tokens; the best
/// `beam_width` of all proposals plus the finished beams survive. The image's
/// score table is built once and shared; candidate sets and layer choices are
/// computed per beam.
pub fn beam_decode<B: ModelBackend>(
    backend: &B,
    prompt: &[u32],
    visual: &VisualInput,
    params: &DecodeParams,
) -> Result<BeamOutput> {
    params.validate()?;
    if prompt.is_empty() {
        return Err(Error::Argument("prompt must be non-empty".into()));
    }
    let width = params.beam_width;
    let (session, output) = backend.prefill(prompt, visual)?;
    let table = match &params.saver {
        Some(s) => Some(prepare_table(backend, &session, s)?),
        None => None,
    };
    let reviser = match (&table, &params.saver) {
        (Some(t), Some(s)) => Some(Reviser::new(t, s, backend.unembedding())),
        _ => None,
    };

    let mut beams = vec![LiveBeam {
        beam: Beam { tokens: Vec::new(), log_prob: 0.0, finished: false },
        session: Some(session),
        pending: Some(output),
        records: Vec::new(),
    }];

    for step in 0..params.max_new_tokens {
        if beams.iter().all(|b| b.beam.finished) {
            break;
        }
        let mut expansions = Vec::new();
        for (i, live) in beams.iter().enumerate() {
            if live.beam.finished {
                expansions.push(Expansion { parent: i, token: None, log_prob: live.beam.log_prob, record: None });
                continue;
            }
            let pending = live.pending.as_ref().expect("live beam has pending output");
            let revised = revise_step(reviser.as_ref(), pending, &live.beam.tokens, params.repetition_penalty)?;
            let scores = if params.temperature > 0.0 {
                let t = params.temperature;
                log_softmax(&revised.revised.iter().map(|&v| f64::from(v) / t).collect::<Vec<_>>())?
            } else {
                log_softmax(&revised.revised)?
            };
            let mut order: Vec<u32> = (0..scores.len() as u32).collect();
            order.sort_by(|&a, &b| scores[b as usize].total_cmp(&scores[a as usize]).then(a.cmp(&b)));
            for &t in order.iter().take(width) {
                expansions.push(Expansion {
                    parent: i,
                    token: Some(t),
                    log_prob: live.beam.log_prob + scores[t as usize],
                    record: Some(revised.record(step, t, false)),
                });
            }
        }

        let seq = |e: &Expansion| {
            let mut s = beams[e.parent].beam.tokens.clone();
            s.extend(e.token);
            s
        };
        let mut keyed: Vec<(Vec<u32>, Expansion)> = expansions.into_iter().map(|e| (seq(&e), e)).collect();
        keyed.sort_by(|(sa, a), (sb, b)| rank(a.log_prob, sa, b.log_prob, sb));
        keyed.truncate(width);

        let mut next = Vec::with_capacity(keyed.len());
        for (tokens, e) in keyed {
            let parent = &beams[e.parent];
            let Some(token) = e.token else {
                next.push(LiveBeam {
                    beam: parent.beam.clone(),
                    session: None,
                    pending: None,
                    records: parent.records.clone(),
                });
                continue;
            };
            let finished = Some(token) == params.eos_token;
            let mut records = parent.records.clone();
            records.extend(e.record);
            let (session, pending) = if !finished && step + 1 < params.max_new_tokens {
                let mut s = backend.fork(parent.session.as_ref().expect("live beam has a session"))?;
                let out = backend.step(&mut s, token)?;
                (Some(s), Some(out))
            } else {
                (None, None)
            };
            next.push(LiveBeam {
                beam: Beam { tokens, log_prob: e.log_prob, finished },
                session,
                pending,
                records,
            });
        }
        beams = next;
    }

    beams.sort_by(|a, b| rank(a.beam.log_prob, &a.beam.tokens, b.beam.log_prob, &b.beam.tokens));
    let top = &beams[0];
    let hit_eos = top.beam.finished && params.eos_token.is_some() && top.beam.tokens.last() == params.eos_token.as_ref();
    let mut tokens = top.beam.tokens.clone();
    if hit_eos {
        tokens.pop();
    }
    let best = DecodeOutput { tokens, records: top.records.clone(), hit_eos };
    Ok(BeamOutput {
        best,
        beams: beams.into_iter().map(|b| b.beam).collect(),
    })
}
