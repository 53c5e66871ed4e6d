//! Run configuration. Each setting comes from, in order of precedence, a
//! command-line flag, the `--config` TOML file, or the built-in default.

use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{Context, Result};
use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use saver::decoder::DecodeParams;
use saver::revision::{LayerSpec, SaverParams};
use saver::toy::{PositionEncoding, ToyConfig};

use crate::error::usage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Toy,
    Trace,
    Bridge,
}

/// Decoding without revision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    Greedy,
    Beam,
}

fn parse_layers(s: &str) -> Result<LayerSpec, String> {
    s.parse().map_err(|e: saver::Error| e.to_string())
}

/// Settings shared by the model-driving subcommands. Doubles as the schema of
/// the TOML config file; every field is optional so the layers can be merged.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, clap::Args)]
#[serde(deny_unknown_fields)]
pub struct RunArgs {
    /// Model backend.
    #[arg(long, value_enum)]
    pub backend: Option<BackendKind>,
    /// Command line of the bridge server process.
    #[arg(long)]
    pub bridge_cmd: Option<String>,
    /// Per-request bridge timeout in seconds.
    #[arg(long)]
    pub bridge_timeout: Option<f64>,
    /// Recorded trace file (trace backend).
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// JSON-lines image manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Toy model seed (also the image seed when no manifest is given).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Decode without revision.
    #[arg(long, value_enum)]
    pub baseline: Option<Baseline>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub top_p: Option<f64>,
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Visual positions averaged per token score.
    #[arg(long = "ni")]
    pub n_image_tokens: Option<usize>,
    /// Early layers: `standard`, `low`, `high`, a range like `20-29`, or a list.
    #[arg(long, value_parser = parse_layers)]
    pub layers: Option<LayerSpec>,
    /// Beam width.
    #[arg(long)]
    pub beam: Option<usize>,
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
    #[arg(long)]
    pub repetition_penalty: Option<f64>,
    /// Divides logits before beam scoring.
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Toy model shape (config file only).
    #[arg(skip)]
    pub toy: Option<ToyArgs>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyArgs {
    pub n_layers: Option<usize>,
    pub d_model: Option<usize>,
    pub n_heads: Option<usize>,
    pub vocab_size: Option<usize>,
    pub n_visual: Option<usize>,
    pub positions: Option<PositionEncoding>,
    pub max_positions: Option<usize>,
}

macro_rules! overlay {
    ($top:expr, $base:expr, $($field:ident),*) => {
        $( if $top.$field.is_none() { $top.$field = $base.$field.clone(); } )*
    };
}

impl RunArgs {
    /// Fields set in `self` win; the rest come from `base`.
    pub fn over(mut self, base: &RunArgs) -> RunArgs {
        overlay!(
            self, base, backend, bridge_cmd, bridge_timeout, trace, manifest, out, seed, baseline, alpha, top_p,
            top_k, n_image_tokens, layers, beam, max_new_tokens, repetition_penalty, temperature
        );
        self.toy = match (self.toy.take(), &base.toy) {
            (Some(mut t), Some(b)) => {
                overlay!(t, b, n_layers, d_model, n_heads, vocab_size, n_visual, positions, max_positions);
                Some(t)
            }
            (t, b) => t.or_else(|| b.clone()),
        };
        self
    }
}

pub fn load_config_file(path: &Path) -> Result<RunArgs> {
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("config file {}: {e}", path.display())))?;
    toml::from_str(&text).with_context(|| format!("parsing config file {}", path.display()))
}

/// Fully resolved settings, echoed into every output directory.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub backend: BackendKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bridge_cmd: Option<String>,
    pub bridge_timeout_secs: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline: Option<Baseline>,
    /// Revision settings as configured, also kept for baselines.
    pub saver: SaverParams,
    pub decode: DecodeParams,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub toy: Option<ToyConfig>,
}

/// Beam width used by `--baseline beam` when `--beam` is not given.
pub const DEFAULT_BASELINE_BEAM: usize = 3;

impl RunConfig {
    pub fn resolve(args: RunArgs) -> Result<RunConfig> {
        let backend = args.backend.unwrap_or(BackendKind::Toy);
        let defaults = SaverParams::default();
        let saver = SaverParams {
            alpha: args.alpha.unwrap_or(defaults.alpha),
            top_p: args.top_p.unwrap_or(defaults.top_p),
            top_k: args.top_k.unwrap_or(defaults.top_k),
            n_image_tokens: args.n_image_tokens.unwrap_or(defaults.n_image_tokens),
            layers: args.layers.clone().unwrap_or(defaults.layers),
        };
        saver.validate()?;
        let beam_width = match (args.baseline, args.beam) {
            (_, Some(b)) => b,
            (Some(Baseline::Beam), None) => DEFAULT_BASELINE_BEAM,
            _ => 1,
        };
        if args.baseline == Some(Baseline::Greedy) && beam_width != 1 {
            return Err(usage("--baseline greedy conflicts with a beam width above 1"));
        }
        if args.baseline == Some(Baseline::Beam) && beam_width < 2 {
            return Err(usage("--baseline beam needs a beam width of at least 2"));
        }
        let base = DecodeParams::default();
        let decode = DecodeParams {
            saver: args.baseline.is_none().then(|| saver.clone()),
            max_new_tokens: args.max_new_tokens.unwrap_or(base.max_new_tokens),
            beam_width,
            temperature: args.temperature.unwrap_or(base.temperature),
            repetition_penalty: args.repetition_penalty.unwrap_or(base.repetition_penalty),
            // Bridge servers announce their own eos token.
            eos_token: (backend == BackendKind::Toy).then_some(saver::toy::EOS),
        };
        decode.validate()?;
        let seed = args.seed.unwrap_or(0);
        let toy = (backend == BackendKind::Toy).then(|| {
            let t = args.toy.clone().unwrap_or_default();
            let d = ToyConfig::default();
            ToyConfig {
                n_layers: t.n_layers.unwrap_or(d.n_layers),
                d_model: t.d_model.unwrap_or(d.d_model),
                n_heads: t.n_heads.unwrap_or(d.n_heads),
                vocab_size: t.vocab_size.unwrap_or(d.vocab_size),
                n_visual: t.n_visual.unwrap_or(d.n_visual),
                seed,
                positions: t.positions.unwrap_or(d.positions),
                max_positions: t.max_positions.unwrap_or(d.max_positions),
            }
        });
        if let Some(t) = &toy {
            t.validate()?;
        }
        match backend {
            BackendKind::Bridge if args.bridge_cmd.is_none() => return Err(usage("the bridge backend needs --bridge-cmd")),
            BackendKind::Trace if args.trace.is_none() => return Err(usage("the trace backend needs --trace")),
            _ => {}
        }
        let timeout = args.bridge_timeout.unwrap_or(saver::bridge::DEFAULT_TIMEOUT.as_secs_f64());
        if !(timeout > 0.0 && timeout.is_finite()) {
            return Err(usage(format!("--bridge-timeout must be positive, got {timeout}")));
        }
        Ok(RunConfig {
            backend,
            bridge_cmd: args.bridge_cmd,
            bridge_timeout_secs: timeout,
            trace: args.trace,
            manifest: args.manifest,
            out: args.out.ok_or_else(|| usage("--out is required"))?,
            seed,
            baseline: args.baseline,
            saver,
            decode,
            toy,
        })
    }

    pub fn bridge_timeout(&self) -> Duration {
        Duration::from_secs_f64(self.bridge_timeout_secs)
    }
}
