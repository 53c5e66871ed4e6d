//! Per-position probability of one token at one early layer, as CSV.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use anyhow::{Context, Result};
use serde::Serialize;

use saver::bridge::read_trace_file;
use saver::decoder::ModelBackend;
use saver::revision::{build_sas_table, Unembedding};
use saver::tensor::Matrix;
use saver::toy::ToyVocab;

use super::{echo_config, Echo};
use crate::config::{BackendKind, RunArgs, RunConfig};
use crate::engine::{bridge_input, connect_bridge, load_entries, toy_image};
use crate::error::usage;
use crate::inputs::{require_file, ManifestEntry};
use crate::output::{ensure_dir, write_atomic};

pub const CSV: &str = "heatmap.csv";

#[derive(Debug, Clone, clap::Args)]
pub struct HeatmapArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Token id, or a word from the toy word table.
    #[arg(long)]
    pub token: String,
    /// Recorded early layer.
    #[arg(long)]
    pub layer: usize,
    /// Manifest image; defaults to the first.
    #[arg(long)]
    pub image_id: Option<String>,
}

#[derive(Serialize)]
struct Extra<'a> {
    token: &'a str,
    token_id: u32,
    layer: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    image_id: Option<&'a str>,
}

struct Source {
    hidden: Matrix,
    unembedding: Unembedding,
    n_layers: usize,
    vocab: Option<ToyVocab>,
}

fn check_layer(layer: usize, recorded: &[usize]) -> Result<()> {
    if recorded.contains(&layer) {
        Ok(())
    } else {
        Err(usage(format!("layer {layer} is not a recorded layer (recorded: {recorded:?})")))
    }
}

fn pick<'a>(entries: &'a [ManifestEntry], id: Option<&str>) -> Result<&'a ManifestEntry> {
    match id {
        None => Ok(&entries[0]),
        Some(id) => entries
            .iter()
            .find(|e| e.image_id == id)
            .ok_or_else(|| usage(format!("image {id:?} is not in the manifest"))),
    }
}

fn load_source(config: &RunConfig, layer: usize, image_id: Option<&str>) -> Result<(Source, Option<String>)> {
    match config.backend {
        BackendKind::Toy => {
            let entries = load_entries(config)?;
            let entry = pick(&entries, image_id)?;
            let img = toy_image(config.toy.as_ref().expect("toy config resolved"), config.seed, entry)?;
            check_layer(layer, &img.model.recorded_layers())?;
            let (session, _) = img.model.prefill(&img.prompt, &img.visual)?;
            let source = Source {
                hidden: img.model.visual_hidden(&session, layer)?,
                unembedding: img.model.unembedding().clone(),
                n_layers: img.model.dims().n_layers,
                vocab: Some(img.vocab),
            };
            Ok((source, Some(entry.image_id.clone())))
        }
        BackendKind::Trace => {
            let path = config.trace.as_ref().expect("trace path resolved");
            require_file("trace", path)?;
            let trace = read_trace_file(path)?;
            let h = &trace.header;
            check_layer(layer, &h.recorded_layers)?;
            let idx = h.recorded_layers.iter().position(|&l| l == layer).expect("checked");
            let matrix = trace.unembedding.clone().ok_or_else(|| usage("trace has no unembedding block"))?;
            let source = Source {
                hidden: trace.visual_hidden[idx].clone(),
                unembedding: Unembedding::new(matrix)?,
                n_layers: h.n_layers,
                vocab: Some(ToyVocab::new(h.vocab_size)),
            };
            Ok((source, None))
        }
        BackendKind::Bridge => {
            let entries = load_entries(config)?;
            let entry = pick(&entries, image_id)?;
            let backend = connect_bridge(config)?;
            check_layer(layer, &backend.recorded_layers())?;
            let (prompt, visual) = bridge_input(entry)?;
            let (session, _) = backend.prefill(&prompt, &visual)?;
            let source = Source {
                hidden: backend.visual_hidden(&session, layer)?,
                unembedding: backend.unembedding().clone(),
                n_layers: backend.dims().n_layers,
                vocab: None,
            };
            Ok((source, Some(entry.image_id.clone())))
        }
    }
}

fn resolve_token(token: &str, vocab_size: usize, vocab: Option<&ToyVocab>) -> Result<u32> {
    let id = match token.parse::<u32>() {
        Ok(id) => Some(id).filter(|&i| (i as usize) < vocab_size),
        Err(_) => vocab.and_then(|v| v.id(token)),
    };
    id.ok_or_else(|| usage(format!("unknown token {token:?}")))
}

pub fn render_csv(probs: &[f32]) -> String {
    let mut out = String::from("position,probability\n");
    for (i, p) in probs.iter().enumerate() {
        let _ = writeln!(out, "{i},{p}");
    }
    out
}

pub fn run(config: &RunConfig, args: &HeatmapArgs) -> Result<()> {
    let (source, image_id) = load_source(config, args.layer, args.image_id.as_deref())?;
    let token_id = resolve_token(&args.token, source.unembedding.vocab_size(), source.vocab.as_ref())?;
    let hidden = BTreeMap::from([(args.layer, source.hidden)]);
    let table = build_sas_table(&hidden, &source.unembedding, &[args.layer], source.n_layers)
        .context("projecting visual hidden states")?;
    let probs = table.token_probs(args.layer, token_id)?;

    ensure_dir(&config.out)?;
    let extra = Extra { token: &args.token, token_id, layer: args.layer, image_id: image_id.as_deref() };
    echo_config(&config.out, &Echo { base: config, extra })?;
    write_atomic(&config.out.join(CSV), render_csv(probs).as_bytes())
}
