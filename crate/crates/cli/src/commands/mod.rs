pub mod chair;
pub mod decode;
pub mod heatmap;
pub mod pope;
pub mod replay;
pub mod sweep;

use std::path::Path;

use anyhow::Result;
use serde::Serialize;

use crate::output::write_json;

pub const EFFECTIVE_CONFIG: &str = "effective_config.json";

/// Settings of a run plus any subcommand-specific fields, flattened.
#[derive(Serialize)]
pub struct Echo<'a, A: Serialize, B: Serialize> {
    #[serde(flatten)]
    pub base: &'a A,
    #[serde(flatten)]
    pub extra: B,
}

pub fn echo_config<T: Serialize>(dir: &Path, value: &T) -> Result<()> {
    write_json(&dir.join(EFFECTIVE_CONFIG), value)
}
