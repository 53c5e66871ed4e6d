//! Object-hallucination metrics: CHAIR over free-form captions and POPE
//! yes/no probing, plus the annotation and lexicon types they share.

mod chair;
mod jsonl;
mod lexicon;
mod pope;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

pub use chair::{chair, CaptionChair, CaptionRecord, ChairReport, ChairStats};
pub use jsonl::{parse_jsonl, read_jsonl, to_jsonl};
pub use lexicon::{extract_objects, SynonymLexicon};
pub use pope::{
    parse_answer, pope_generate, pope_score, Answer, AnswerRecord, Label, PopeGeneration, PopeQuestion, PopeReport,
    PopeStats, Strategy, Underfill,
};

/// Rendering style of an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Style {
    Cartoon,
    Game,
    Graffiti,
    Painting,
    Sketch,
    Original,
    Other,
}

impl Style {
    pub const ALL: [Style; 7] = [
        Style::Cartoon,
        Style::Game,
        Style::Graffiti,
        Style::Painting,
        Style::Sketch,
        Style::Original,
        Style::Other,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Style::Cartoon => "cartoon",
            Style::Game => "game",
            Style::Graffiti => "graffiti",
            Style::Painting => "painting",
            Style::Sketch => "sketch",
            Style::Original => "original",
            Style::Other => "other",
        }
    }
}

impl Default for Style {
    fn default() -> Self {
        Style::Other
    }
}

impl fmt::Display for Style {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Style {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Style::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown style {s:?}")))
    }
}

/// Ground truth for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageAnnotation {
    pub image_id: String,
    #[serde(default)]
    pub style: Style,
    pub objects: BTreeSet<String>,
    /// Reference captions; kept for provenance, not used in scoring.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub captions: Vec<String>,
}
