//! One decode plus CHAIR evaluation per value of a single revision setting.

use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::ValueEnum;
use serde::Serialize;

use saver::metrics::{chair, CaptionRecord, ChairStats, ImageAnnotation, SynonymLexicon};
use saver::revision::LayerSpec;

use super::chair::load_lexicon;
use super::{echo_config, Echo};
use crate::config::{RunArgs, RunConfig};
use crate::engine::{decode_entries, load_entries, mean_candidates, Generation};
use crate::error::usage;
use crate::inputs::{read_records, ManifestEntry};
use crate::output::{ensure_dir, partial_path, write_atomic, write_jsonl};

pub const ROWS: &str = "sweep.jsonl";
pub const TABLE: &str = "sweep_table.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    #[value(name = "alpha")]
    Alpha,
    #[value(name = "top_p")]
    TopP,
    #[value(name = "top_k")]
    TopK,
    #[value(name = "n_image_tokens", alias = "ni")]
    NImageTokens,
    #[value(name = "layer_set")]
    LayerSet,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Alpha => "alpha",
            SweepParam::TopP => "top_p",
            SweepParam::TopK => "top_k",
            SweepParam::NImageTokens => "n_image_tokens",
            SweepParam::LayerSet => "layer_set",
        }
    }

    pub fn default_values(self) -> Vec<String> {
        let v: &[&str] = match self {
            SweepParam::Alpha => &["0.4", "0.6", "0.8", "1.0"],
            SweepParam::TopP => &["0.6", "0.7", "0.8", "0.9"],
            SweepParam::TopK => &["10", "15", "20", "25"],
            SweepParam::NImageTokens => &["50", "100", "150", "200"],
            SweepParam::LayerSet => &["low", "standard", "high"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }

    /// `config` with this setting replaced by `value`.
    pub fn apply(self, config: &RunConfig, value: &str) -> Result<RunConfig> {
        let bad = |e: &dyn std::fmt::Display| usage(format!("{} value {value:?}: {e}", self.name()));
        let mut saver = config.saver.clone();
        match self {
            SweepParam::Alpha => saver.alpha = value.parse().map_err(|e| bad(&e))?,
            SweepParam::TopP => saver.top_p = value.parse().map_err(|e| bad(&e))?,
            SweepParam::TopK => saver.top_k = value.parse().map_err(|e| bad(&e))?,
            SweepParam::NImageTokens => saver.n_image_tokens = value.parse().map_err(|e| bad(&e))?,
            SweepParam::LayerSet => saver.layers = value.parse::<LayerSpec>().map_err(|e| bad(&e))?,
        }
        saver.validate().map_err(|e| bad(&e))?;
        let mut c = config.clone();
        c.decode.saver = Some(saver.clone());
        c.saver = saver;
        Ok(c)
    }
}

#[derive(Debug, Clone, clap::Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Setting to vary.
    #[arg(long, value_enum)]
    pub param: SweepParam,
    /// Values to try; defaults to the standard grid for the setting.
    #[arg(long, num_args = 1..)]
    pub values: Vec<String>,
    /// JSON-lines image annotations for CHAIR.
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
}

/// One (value, style) cell of the result matrix.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub param: &'static str,
    pub value: String,
    pub style: String,
    pub chair_i: f64,
    pub chair_s: f64,
    pub n_captions: usize,
    /// Mean candidate-set size over all revised steps of the value's run.
    pub mean_candidates: Option<f64>,
}

#[derive(Serialize)]
struct Extra<'a> {
    sweep_param: &'static str,
    sweep_values: &'a [String],
    annotations: &'a PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    lexicon: Option<&'a PathBuf>,
}

fn evaluate(
    param: SweepParam,
    value: &str,
    config: &RunConfig,
    entries: &[ManifestEntry],
    annotations: &[ImageAnnotation],
    lexicon: &SynonymLexicon,
) -> Result<Vec<SweepRow>> {
    let generations: Vec<Generation> = decode_entries(config, entries)?;
    let captions = generations
        .iter()
        .map(|g| {
            let caption = g.caption.clone().ok_or_else(|| usage("sweeps need captions; this backend has no word table"))?;
            Ok(CaptionRecord { image_id: g.image_id.clone(), caption })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = chair(&captions, annotations, lexicon)?;
    let candidates = mean_candidates(&generations);
    let row = |style: &str, s: &ChairStats| SweepRow {
        param: param.name(),
        value: value.to_string(),
        style: style.to_string(),
        chair_i: s.chair_i,
        chair_s: s.chair_s,
        n_captions: s.n_captions,
        mean_candidates: candidates,
    };
    let mut rows: Vec<SweepRow> = report.per_style.iter().map(|(style, s)| row(style.name(), s)).collect();
    rows.push(row("all", &report.overall));
    Ok(rows)
}

pub fn render_table(rows: &[SweepRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<14} {:<10} {:>7} {:>7} {:>9} {:>8}", "value", "style", "C_i", "C_s", "captions", "|C|");
    for r in rows {
        let c = r.mean_candidates.map_or_else(|| "-".to_string(), |c| format!("{c:.2}"));
        let _ = writeln!(
            out,
            "{:<14} {:<10} {:>7.1} {:>7.1} {:>9} {:>8}",
            r.value,
            r.style,
            100.0 * r.chair_i,
            100.0 * r.chair_s,
            r.n_captions,
            c
        );
    }
    out
}

pub fn run(config: &RunConfig, args: &SweepArgs) -> Result<()> {
    if config.baseline.is_some() {
        return Err(usage("sweeps vary revision settings; drop --baseline"));
    }
    let values = if args.values.is_empty() { args.param.default_values() } else { args.values.clone() };
    if values.len() < 2 {
        return Err(usage("a sweep needs at least two values"));
    }
    let configs = values
        .iter()
        .map(|v| args.param.apply(config, v))
        .collect::<Result<Vec<_>>>()?;
    let lexicon = load_lexicon(args.lexicon.as_deref())?;
    let annotations: Vec<ImageAnnotation> = read_records("annotations", &args.annotations)?;
    let entries = load_entries(config)?;

    ensure_dir(&config.out)?;
    let extra = Extra {
        sweep_param: args.param.name(),
        sweep_values: &values,
        annotations: &args.annotations,
        lexicon: args.lexicon.as_ref(),
    };
    echo_config(&config.out, &Echo { base: config, extra })?;

    let path = config.out.join(ROWS);
    let mut rows = Vec::new();
    for (value, c) in values.iter().zip(&configs) {
        match evaluate(args.param, value, c, &entries, &annotations, &lexicon) {
            Ok(r) => rows.extend(r),
            Err(e) => {
                let mut text = saver::metrics::to_jsonl(&rows)?;
                let marker = serde_json::json!({"failed": true, "param": args.param.name(), "value": value, "error": format!("{e:#}")});
                text.push_str(&marker.to_string());
                text.push('\n');
                let partial = partial_path(&path);
                std::fs::write(&partial, text).with_context(|| format!("writing {}", partial.display()))?;
                return Err(e.context(format!("sweep stopped at {} = {value}; completed rows are in {}", args.param.name(), partial.display())));
            }
        }
    }
    write_jsonl(&path, &rows)?;
    write_atomic(&config.out.join(TABLE), render_table(&rows).as_bytes())?;
    print!("{}", render_table(&rows));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grids() {
        assert_eq!(SweepParam::Alpha.default_values(), ["0.4", "0.6", "0.8", "1.0"]);
        assert_eq!(SweepParam::TopP.default_values(), ["0.6", "0.7", "0.8", "0.9"]);
        assert_eq!(SweepParam::TopK.default_values(), ["10", "15", "20", "25"]);
        assert_eq!(SweepParam::NImageTokens.default_values(), ["50", "100", "150", "200"]);
        assert_eq!(SweepParam::LayerSet.default_values(), ["low", "standard", "high"]);
    }

    #[test]
    fn invalid_values_are_usage_errors() {
        let config = RunConfig::resolve(RunArgs { out: Some("o".into()), ..Default::default() }).unwrap();
        let err = SweepParam::TopP.apply(&config, "1.5").unwrap_err();
        assert_eq!(crate::error::exit_code(&err), 2);
        assert!(SweepParam::TopK.apply(&config, "ten").is_err());
        let c = SweepParam::LayerSet.apply(&config, "2-3").unwrap();
        assert_eq!(c.decode.saver.unwrap().layers, LayerSpec::Explicit(vec![2, 3]));
    }
}
