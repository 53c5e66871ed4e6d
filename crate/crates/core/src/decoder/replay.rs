use std::collections::BTreeMap;

use super::{revise_step, DecodeParams, Reviser, StepOutput, StepRecord};
use crate::bridge::trace::TraceFile;
use crate::error::{Error, Result};
use crate::revision::{build_sas_table, Unembedding};
use crate::tensor::argmax;

/// Teacher-forced replay: recomputes every step's candidate set, layer choice
/// and revised logits along the trace's recorded trajectory, flagging the
/// steps where the revised argmax differs from the recorded token.
pub fn replay(trace: &TraceFile, params: &DecodeParams) -> Result<Vec<StepRecord>> {
    params.validate()?;
    let header = &trace.header;
    if trace.steps.is_empty() {
        return Ok(Vec::new());
    }

    let unembedding;
    let table;
    let reviser = match &params.saver {
        None => None,
        Some(saver) => {
            let layers = saver.layers.resolve(header.n_layers)?;
            if let Some(missing) = layers.iter().find(|l| !header.recorded_layers.contains(l)) {
                return Err(Error::Config(format!(
                    "layer {missing} is not recorded in the trace (recorded: {:?})",
                    header.recorded_layers
                )));
            }
            let matrix = trace
                .unembedding
                .clone()
                .ok_or_else(|| Error::Config("trace has no unembedding block; cannot project hidden states".into()))?;
            unembedding = Unembedding::new(matrix)?;
            let visual: BTreeMap<_, _> = header
                .recorded_layers
                .iter()
                .copied()
                .zip(trace.visual_hidden.iter().cloned())
                .collect();
            table = build_sas_table(&visual, &unembedding, &layers, header.n_layers)?;
            Some(Reviser::new(&table, saver, &unembedding))
        }
    };

    let mut records = Vec::with_capacity(trace.steps.len());
    let mut history = Vec::with_capacity(trace.steps.len());
    for (i, step) in trace.steps.iter().enumerate() {
        let output = StepOutput {
            final_logits: step.final_logits.clone(),
            early_hidden: header
                .recorded_layers
                .iter()
                .copied()
                .zip(step.early_hidden.iter().cloned())
                .collect(),
        };
        let revised = revise_step(reviser.as_ref(), &output, &history, params.repetition_penalty)?;
        let mut record = revised.record(i, step.token, true);
        record.diverged = argmax(&revised.revised).map(|a| a as u32) != Some(step.token);
        records.push(record);
        history.push(step.token);
    }
    Ok(records)
}
