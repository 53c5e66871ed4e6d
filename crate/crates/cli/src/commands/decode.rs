use anyhow::Result;

use super::echo_config;
use crate::config::RunConfig;
use crate::engine::{decode_entries, load_entries};
use crate::output::{ensure_dir, write_jsonl};

pub const GENERATIONS: &str = "generations.jsonl";

pub fn run(config: &RunConfig) -> Result<()> {
    let entries = load_entries(config)?;
    ensure_dir(&config.out)?;
    echo_config(&config.out, config)?;
    let generations = decode_entries(config, &entries)?;
    write_jsonl(&config.out.join(GENERATIONS), &generations)?;
    log::info!("decoded {} images into {}", generations.len(), config.out.display());
    Ok(())
}
