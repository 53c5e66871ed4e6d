use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::lexicon::{extract_objects, SynonymLexicon};
use super::{ImageAnnotation, Style};
use crate::error::{Error, Result};

/// One generated caption. Extra fields in the input are ignored, so decode
/// output can be scored directly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub image_id: String,
    pub caption: String,
}

/// Aggregated counts and rates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ChairStats {
    pub chair_i: f64,
    pub chair_s: f64,
    pub hallucinated_instances: usize,
    pub mentioned_instances: usize,
    pub captions_with_hallucination: usize,
    pub n_captions: usize,
}

impl ChairStats {
    fn add(&mut self, mentioned: usize, hallucinated: usize) {
        self.mentioned_instances += mentioned;
        self.hallucinated_instances += hallucinated;
        self.captions_with_hallucination += usize::from(hallucinated > 0);
        self.n_captions += 1;
    }

    fn finish(mut self) -> Self {
        self.chair_i = ratio(self.hallucinated_instances, self.mentioned_instances);
        self.chair_s = ratio(self.captions_with_hallucination, self.n_captions);
        self
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionChair {
    pub image_id: String,
    pub style: Style,
    pub mentioned: BTreeSet<String>,
    pub hallucinated: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChairReport {
    #[serde(flatten)]
    pub overall: ChairStats,
    pub per_style: BTreeMap<Style, ChairStats>,
    pub captions: Vec<CaptionChair>,
}

impl ChairReport {
    /// Aligned text table: one row per style present plus the total, with
    /// rates in percent.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<10} {:>7} {:>7} {:>9}", "style", "C_i", "C_s", "captions");
        let rows = self
            .per_style
            .iter()
            .map(|(s, st)| (s.name(), st))
            .chain(std::iter::once(("all", &self.overall)));
        for (name, st) in rows {
            let _ = writeln!(
                out,
                "{:<10} {:>7.1} {:>7.1} {:>9}",
                name,
                100.0 * st.chair_i,
                100.0 * st.chair_s,
                st.n_captions
            );
        }
        out
    }
}

/// Scores captions against their annotations. Objects are deduplicated within
/// a caption before counting.
pub fn chair(results: &[CaptionRecord], annotations: &[ImageAnnotation], lexicon: &SynonymLexicon) -> Result<ChairReport> {
    let mut index: HashMap<&str, &ImageAnnotation> = HashMap::new();
    for a in annotations {
        if index.insert(a.image_id.as_str(), a).is_some() {
            return Err(Error::Data(format!("duplicate annotation for image {:?}", a.image_id)));
        }
    }
    let mut overall = ChairStats::default();
    let mut per_style: BTreeMap<Style, ChairStats> = BTreeMap::new();
    let mut captions = Vec::with_capacity(results.len());
    for r in results {
        let ann = index
            .get(r.image_id.as_str())
            .ok_or_else(|| Error::Data(format!("no annotation for image {:?}", r.image_id)))?;
        let mentioned = extract_objects(&r.caption, lexicon);
        let hallucinated: BTreeSet<String> = mentioned.difference(&ann.objects).cloned().collect();
        overall.add(mentioned.len(), hallucinated.len());
        per_style
            .entry(ann.style)
            .or_default()
            .add(mentioned.len(), hallucinated.len());
        captions.push(CaptionChair {
            image_id: r.image_id.clone(),
            style: ann.style,
            mentioned,
            hallucinated,
        });
    }
    Ok(ChairReport {
        overall: overall.finish(),
        per_style: per_style.into_iter().map(|(k, v)| (k, v.finish())).collect(),
        captions,
    })
}
