use std::path::PathBuf;

use anyhow::Result;
use serde::Serialize;

use saver::metrics::{pope_generate, pope_score, AnswerRecord, ImageAnnotation, PopeQuestion, Strategy};

use super::echo_config;
use crate::error::usage;
use crate::inputs::read_records;
use crate::output::{ensure_dir, write_atomic, write_json, write_jsonl};

pub const QUESTIONS: &str = "pope_questions.jsonl";
pub const UNDERFILL: &str = "pope_underfill.json";
pub const REPORT: &str = "pope_report.json";
pub const TABLE: &str = "pope_table.txt";

fn parse_strategies(s: &str) -> Result<Vec<Strategy>> {
    if s == "all" {
        return Ok(Strategy::ALL.to_vec());
    }
    s.split(',')
        .map(|p| p.trim().parse::<Strategy>().map_err(|e| usage(format!("--strategy: {e}"))))
        .collect()
}

#[derive(Debug, Clone, Serialize, clap::Args)]
pub struct GenArgs {
    /// JSON-lines image annotations.
    #[arg(long)]
    pub annotations: PathBuf,
    /// `random`, `popular`, `adversarial`, a comma list, or `all`.
    #[arg(long, default_value = "all")]
    pub strategy: String,
    /// Questions per image, half with a present object.
    #[arg(long, default_value_t = 6)]
    pub per_image: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Serialize, clap::Args)]
pub struct EvalArgs {
    /// Questions written by `pope gen`.
    #[arg(long)]
    pub questions: PathBuf,
    /// JSON-lines answers: `question_id` plus `answer` (yes/no) or free `text`.
    #[arg(long)]
    pub answers: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn generate(args: &GenArgs) -> Result<()> {
    let strategies = parse_strategies(&args.strategy)?;
    let annotations: Vec<ImageAnnotation> = read_records("annotations", &args.annotations)?;
    let mut questions = Vec::new();
    let mut underfilled = Vec::new();
    for strategy in strategies {
        let g = pope_generate(&annotations, strategy, args.per_image, args.seed)?;
        questions.extend(g.questions);
        underfilled.extend(g.underfilled.into_iter().map(|u| (strategy, u)));
    }
    ensure_dir(&args.out)?;
    echo_config(&args.out, args)?;
    write_jsonl(&args.out.join(QUESTIONS), &questions)?;
    if !underfilled.is_empty() {
        log::warn!("{} images have too few objects for a full set of yes questions", underfilled.len());
        let rows: Vec<_> = underfilled
            .iter()
            .map(|(s, u)| serde_json::json!({"strategy": s.name(), "underfill": u}))
            .collect();
        write_json(&args.out.join(UNDERFILL), &rows)?;
    }
    Ok(())
}

pub fn evaluate(args: &EvalArgs) -> Result<()> {
    let questions: Vec<PopeQuestion> = read_records("questions", &args.questions)?;
    let records: Vec<AnswerRecord> = read_records("answers", &args.answers)?;
    if questions.is_empty() {
        return Err(usage(format!("{} holds no questions", args.questions.display())));
    }
    let answers: Vec<_> = records.iter().map(|r| (r.question_id.clone(), r.resolve())).collect();
    let report = pope_score(&answers, &questions)?;
    ensure_dir(&args.out)?;
    echo_config(&args.out, args)?;
    write_json(&args.out.join(REPORT), &report)?;
    write_atomic(&args.out.join(TABLE), report.render_table().as_bytes())?;
    print!("{}", report.render_table());
    Ok(())
}
