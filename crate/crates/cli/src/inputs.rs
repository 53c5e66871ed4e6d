//! Input files: image manifests and the JSON-lines records other subcommands
//! consume.

use std::collections::BTreeSet;
use std::path::Path;

use anyhow::Result;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use saver::metrics::Style;
use saver::toy::PlantSpec;

use crate::error::usage;

/// One image to caption.
///
/// Toy images are synthesized from `image_seed` and may carry a planted
/// object; bridge images are passed to the server as `image_ref`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub image_id: String,
    #[serde(default)]
    pub style: Style,
    /// Prompt token ids; the toy default is "picture shows".
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_seed: Option<u64>,
    /// Overrides the run seed for this image's toy model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plant: Option<PlantSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
}

pub fn require_file(kind: &str, path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{kind} not found: {}", path.display())))
    }
}

/// Reads JSON-lines records; a missing file or a malformed line is a usage
/// error naming the file (and line).
pub fn read_records<T: DeserializeOwned>(kind: &str, path: &Path) -> Result<Vec<T>> {
    require_file(kind, path)?;
    Ok(saver::metrics::read_jsonl(path)?)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let entries: Vec<ManifestEntry> = read_records("manifest", path)?;
    if entries.is_empty() {
        return Err(usage(format!("manifest {} lists no images", path.display())));
    }
    let mut seen = BTreeSet::new();
    for e in &entries {
        if !seen.insert(e.image_id.as_str()) {
            return Err(usage(format!("manifest {}: duplicate image_id {:?}", path.display(), e.image_id)));
        }
    }
    Ok(entries)
}
