use anyhow::Result;
use serde::Serialize;

use saver::bridge::read_trace_file;
use saver::decoder::{replay, StepRecord};

use super::echo_config;
use crate::config::RunConfig;
use crate::engine::pin_saver;
use crate::error::usage;
use crate::inputs::require_file;
use crate::output::{ensure_dir, write_json, write_jsonl};

pub const RECORDS: &str = "replay.jsonl";
pub const SUMMARY: &str = "replay_summary.json";

#[derive(Debug, Serialize)]
struct Summary {
    n_steps: usize,
    tokens: Vec<u32>,
    /// Steps where the revised argmax differs from the recorded token.
    diverged_steps: Vec<usize>,
}

pub fn run(config: &RunConfig) -> Result<()> {
    let path = config.trace.as_ref().ok_or_else(|| usage("replay needs --trace"))?;
    require_file("trace", path)?;
    if config.decode.beam_width != 1 {
        return Err(usage("replay follows the recorded path; beam search does not apply"));
    }
    let trace = read_trace_file(path)?;
    let mut params = config.decode.clone();
    pin_saver(&mut params, trace.header.n_layers, trace.header.n_visual)?;
    let records = replay(&trace, &params)?;

    ensure_dir(&config.out)?;
    echo_config(&config.out, config)?;
    let compact: Vec<StepRecord> = records.iter().map(StepRecord::compact).collect();
    write_jsonl(&config.out.join(RECORDS), &compact)?;
    let summary = Summary {
        n_steps: records.len(),
        tokens: trace.steps.iter().map(|s| s.token).collect(),
        diverged_steps: records.iter().filter(|r| r.diverged).map(|r| r.step_index).collect(),
    };
    write_json(&config.out.join(SUMMARY), &summary)
}
