use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use saver::metrics::{chair, CaptionRecord, ImageAnnotation, SynonymLexicon};

use super::echo_config;
use crate::inputs::{read_records, require_file};
use crate::output::{ensure_dir, write_atomic, write_json};

/// COCO object names with plural and synonym surface forms.
const DEFAULT_LEXICON: &str = include_str!("../../../../fixtures/lexicon.json");

pub const REPORT: &str = "chair_report.json";
pub const TABLE: &str = "chair_table.txt";

#[derive(Debug, Clone, Serialize, clap::Args)]
pub struct ChairArgs {
    /// JSON-lines records with `image_id` and `caption` (decode output works).
    #[arg(long)]
    pub captions: PathBuf,
    /// JSON-lines image annotations.
    #[arg(long)]
    pub annotations: PathBuf,
    /// Synonym lexicon JSON; defaults to the built-in COCO table.
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn load_lexicon(path: Option<&Path>) -> Result<SynonymLexicon> {
    match path {
        Some(p) => {
            require_file("lexicon", p)?;
            SynonymLexicon::from_file(p).with_context(|| format!("lexicon {}", p.display()))
        }
        None => Ok(SynonymLexicon::from_json(DEFAULT_LEXICON)?),
    }
}

pub fn run(args: &ChairArgs) -> Result<()> {
    let lexicon = load_lexicon(args.lexicon.as_deref())?;
    let annotations: Vec<ImageAnnotation> = read_records("annotations", &args.annotations)?;
    let captions: Vec<CaptionRecord> = read_records("captions", &args.captions)?;
    let report = chair(&captions, &annotations, &lexicon)?;

    ensure_dir(&args.out)?;
    echo_config(&args.out, args)?;
    write_json(&args.out.join(REPORT), &report)?;
    write_atomic(&args.out.join(TABLE), report.render_table().as_bytes())?;
    print!("{}", report.render_table());
    Ok(())
}
