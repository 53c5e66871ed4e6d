use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Revision hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaverParams {
    /// Revision scale.
    pub alpha: f64,
    /// Nucleus threshold for the candidate set.
    pub top_p: f64,
    /// Hard cap on the candidate set size.
    pub top_k: usize,
    /// Number of visual positions averaged per token score.
    pub n_image_tokens: usize,
    /// Early layers searched for grounding evidence.
    pub layers: LayerSpec,
}

impl Default for SaverParams {
    fn default() -> Self {
        Self {
            alpha: 0.6,
            top_p: 0.9,
            top_k: 20,
            n_image_tokens: 50,
            layers: LayerSpec::Preset(LayerPreset::Standard),
        }
    }
}

impl SaverParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::Argument(format!("alpha must be finite and >= 0, got {}", self.alpha)));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Argument(format!("top_p must lie in (0, 1], got {}", self.top_p)));
        }
        if self.top_k == 0 {
            return Err(Error::Argument("top_k must be at least 1".into()));
        }
        if self.n_image_tokens == 0 {
            return Err(Error::Argument("n_image_tokens must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerPreset {
    /// Ten equally spaced layers within the first 20 of a 32-layer model.
    Low,
    /// Layers 20..=29 of a 32-layer model.
    Standard,
    /// Ten equally spaced layers within the last 20 of a 32-layer model.
    High,
}

/// A set of early layers, either explicit or a depth-relative preset.
///
/// Text syntax: `standard`, `low`, `high`, inclusive ranges such as `20-29`,
/// and comma-separated lists mixing both (`1,3,10-12`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum LayerSpec {
    Preset(LayerPreset),
    Explicit(Vec<usize>),
}

/// Depth the presets are defined for.
const PRESET_REFERENCE_DEPTH: usize = 32;

impl LayerSpec {
    /// Resolves to a sorted, deduplicated list of layers within `1..n_layers`.
    pub fn resolve(&self, n_layers: usize) -> Result<Vec<usize>> {
        if n_layers < 2 {
            return Err(Error::Config(format!("a {n_layers}-layer model has no early layers")));
        }
        let mut layers = match self {
            LayerSpec::Explicit(v) => {
                if let Some(&bad) = v.iter().find(|&&l| l == 0 || l >= n_layers) {
                    return Err(Error::Config(format!(
                        "layer {bad} outside the early-layer range 1..={}",
                        n_layers - 1
                    )));
                }
                v.clone()
            }
            LayerSpec::Preset(p) => {
                if n_layers != PRESET_REFERENCE_DEPTH {
                    log::warn!("layer preset {p:?} scaled from 32 to {n_layers} layers");
                }
                preset_layers(*p, n_layers)
            }
        };
        layers.sort_unstable();
        layers.dedup();
        if layers.is_empty() {
            return Err(Error::Config("layer set is empty".into()));
        }
        Ok(layers)
    }
}

fn preset_layers(preset: LayerPreset, n_layers: usize) -> Vec<usize> {
    let scale = n_layers as f64 / PRESET_REFERENCE_DEPTH as f64;
    let clamp = |l: f64| (l.round().max(1.0) as usize).min(n_layers - 1);
    let span = 20.0 * scale;
    let step = ((span - 2.0) / 9.0).max(0.0);
    match preset {
        LayerPreset::Standard => {
            let lo = clamp(20.0 * scale);
            let hi = clamp(29.0 * scale);
            (lo..=hi).collect()
        }
        LayerPreset::Low => (0..10).map(|i| clamp(1.0 + (i as f64 * step).round())).collect(),
        LayerPreset::High => (0..10)
            .map(|i| clamp((n_layers - 1) as f64 - ((9 - i) as f64 * step).round()))
            .collect(),
    }
}

impl FromStr for LayerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s.to_ascii_lowercase().as_str() {
            "low" => return Ok(LayerSpec::Preset(LayerPreset::Low)),
            "standard" => return Ok(LayerSpec::Preset(LayerPreset::Standard)),
            "high" => return Ok(LayerSpec::Preset(LayerPreset::High)),
            _ => {}
        }
        let bad = || Error::Argument(format!("invalid layer set {s:?}"));
        let mut layers = Vec::new();
        for part in s.split(',').map(str::trim) {
            if let Some((a, b)) = part.split_once('-') {
                let a: usize = a.trim().parse().map_err(|_| bad())?;
                let b: usize = b.trim().parse().map_err(|_| bad())?;
                if a > b {
                    return Err(bad());
                }
                layers.extend(a..=b);
            } else {
                layers.push(part.parse().map_err(|_| bad())?);
            }
        }
        layers.sort_unstable();
        layers.dedup();
        Ok(LayerSpec::Explicit(layers))
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Preset(LayerPreset::Low) => f.write_str("low"),
            LayerSpec::Preset(LayerPreset::Standard) => f.write_str("standard"),
            LayerSpec::Preset(LayerPreset::High) => f.write_str("high"),
            LayerSpec::Explicit(v) => {
                let mut parts = Vec::new();
                let mut i = 0;
                while i < v.len() {
                    let mut j = i;
                    while j + 1 < v.len() && v[j + 1] == v[j] + 1 {
                        j += 1;
                    }
                    parts.push(if j > i { format!("{}-{}", v[i], v[j]) } else { v[i].to_string() });
                    i = j + 1;
                }
                f.write_str(&parts.join(","))
            }
        }
    }
}

impl TryFrom<String> for LayerSpec {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<LayerSpec> for String {
    fn from(l: LayerSpec) -> String {
        l.to_string()
    }
}
