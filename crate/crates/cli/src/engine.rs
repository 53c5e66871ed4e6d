//! Builds backends from a [`RunConfig`] and decodes manifest images.

use anyhow::{Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use saver::bridge::{bridge_session, BridgeBackend};
use saver::decoder::{decode, DecodeParams, StepRecord, VisualInput};
use saver::metrics::Style;
use saver::revision::LayerSpec;
use saver::toy::fixture::FIXTURE_PROMPT;
use saver::toy::{build_toy, plant_objects, synth_image, ToyConfig, ToyModel, ToyVocab};

use crate::config::{BackendKind, RunConfig};
use crate::error::usage;
use crate::inputs::{read_manifest, ManifestEntry};

/// One decoded image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub image_id: String,
    pub style: Style,
    pub tokens: Vec<u32>,
    /// Rendered with the toy word table; absent for other backends.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    pub hit_eos: bool,
    pub steps: Vec<StepRecord>,
}

/// Manifest images, or a single synthesized toy image when no manifest is set.
pub fn load_entries(config: &RunConfig) -> Result<Vec<ManifestEntry>> {
    match (&config.manifest, config.backend) {
        (Some(path), _) => read_manifest(path),
        (None, BackendKind::Toy) => Ok(vec![ManifestEntry {
            image_id: format!("toy-{}", config.seed),
            style: Style::Other,
            prompt: None,
            image_seed: Some(config.seed),
            model_seed: None,
            plant: None,
            image_ref: None,
        }]),
        (None, kind) => Err(usage(format!("the {kind:?} backend needs --manifest").to_lowercase())),
    }
}

/// Resolves depth-relative settings once per run: a layer preset becomes its
/// explicit layers and `n_image_tokens` is clamped to the visual positions.
/// Both are no-ops for scoring; they keep warnings to one per run.
pub fn pin_saver(params: &mut DecodeParams, n_layers: usize, n_visual: usize) -> Result<()> {
    if let Some(s) = params.saver.as_mut() {
        s.layers = LayerSpec::Explicit(s.layers.resolve(n_layers)?);
        if s.n_image_tokens > n_visual {
            log::warn!("n_image_tokens = {} exceeds {n_visual} visual positions; clamping", s.n_image_tokens);
            s.n_image_tokens = n_visual;
        }
    }
    Ok(())
}

pub struct ToyImage {
    pub model: ToyModel,
    pub visual: VisualInput,
    pub prompt: Vec<u32>,
    pub vocab: ToyVocab,
}

pub fn toy_image(base: &ToyConfig, run_seed: u64, entry: &ManifestEntry) -> Result<ToyImage> {
    let config = ToyConfig { seed: entry.model_seed.unwrap_or(base.seed), ..base.clone() };
    let mut model = build_toy(config.clone())?;
    if let Some(plant) = &entry.plant {
        model = plant_objects(&model, plant.clone())?;
    }
    Ok(ToyImage {
        visual: VisualInput::Embeddings(synth_image(&config, entry.image_seed.unwrap_or(run_seed))),
        prompt: entry.prompt.clone().unwrap_or_else(|| FIXTURE_PROMPT.to_vec()),
        vocab: ToyVocab::new(config.vocab_size),
        model,
    })
}

pub fn connect_bridge(config: &RunConfig) -> Result<BridgeBackend> {
    let cmd = config.bridge_cmd.as_deref().unwrap_or_default();
    let words = shlex::split(cmd).filter(|w| !w.is_empty()).ok_or_else(|| usage(format!("cannot parse --bridge-cmd {cmd:?}")))?;
    let (program, args) = words.split_first().expect("non-empty by filter");
    bridge_session(program, args, config.bridge_timeout()).with_context(|| format!("starting bridge {cmd:?}"))
}

pub fn bridge_input(entry: &ManifestEntry) -> Result<(Vec<u32>, VisualInput)> {
    let prompt = entry
        .prompt
        .clone()
        .ok_or_else(|| usage(format!("image {:?}: the bridge backend needs prompt token ids", entry.image_id)))?;
    let image = entry
        .image_ref
        .clone()
        .ok_or_else(|| usage(format!("image {:?}: the bridge backend needs image_ref", entry.image_id)))?;
    Ok((prompt, VisualInput::ImageRef(image)))
}

fn generation(entry: &ManifestEntry, out: saver::decoder::DecodeOutput, caption: Option<String>) -> Generation {
    Generation {
        image_id: entry.image_id.clone(),
        style: entry.style,
        tokens: out.tokens,
        caption,
        hit_eos: out.hit_eos,
        steps: out.records.iter().map(StepRecord::compact).collect(),
    }
}

/// Decodes every entry. Toy images run on the worker pool; bridge images run
/// in order over one server process. Output order follows the manifest.
pub fn decode_entries(config: &RunConfig, entries: &[ManifestEntry]) -> Result<Vec<Generation>> {
    match config.backend {
        BackendKind::Toy => {
            let toy = config.toy.as_ref().expect("toy config resolved");
            let mut params = config.decode.clone();
            pin_saver(&mut params, toy.n_layers, toy.n_visual)?;
            entries
                .par_iter()
                .map(|e| {
                    let img = toy_image(toy, config.seed, e).with_context(|| format!("image {:?}", e.image_id))?;
                    let out = decode(&img.model, &img.prompt, &img.visual, &params)
                        .with_context(|| format!("decoding image {:?}", e.image_id))?;
                    let caption = img.vocab.render(&out.tokens);
                    Ok(generation(e, out, Some(caption)))
                })
                .collect()
        }
        BackendKind::Bridge => {
            let backend = connect_bridge(config)?;
            let mut params = config.decode.clone();
            params.eos_token = backend.eos_token();
            pin_saver(&mut params, backend.info().n_layers, backend.info().n_visual)?;
            let mut out = Vec::with_capacity(entries.len());
            for e in entries {
                let (prompt, visual) = bridge_input(e)?;
                let result = decode(&backend, &prompt, &visual, &params)
                    .with_context(|| format!("decoding image {:?}", e.image_id))?;
                out.push(generation(e, result, None));
            }
            Ok(out)
        }
        BackendKind::Trace => Err(usage("the trace backend replays recorded runs; use `saver replay --trace PATH`")),
    }
}

/// Mean candidate-set size over all revised steps, if any.
pub fn mean_candidates(generations: &[Generation]) -> Option<f64> {
    let sizes: Vec<usize> = generations
        .iter()
        .flat_map(|g| &g.steps)
        .filter(|s| s.chosen_layer.is_some())
        .map(|s| s.candidate_ids.len())
        .collect();
    (!sizes.is_empty()).then(|| sizes.iter().sum::<usize>() as f64 / sizes.len() as f64)
}
