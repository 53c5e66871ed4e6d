//! Brute-force recounts used as oracles for the metrics module.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use saver::metrics::{
    Answer, CaptionRecord, ImageAnnotation, Label, PopeQuestion, PopeStats, Style, SynonymLexicon,
};

/// Canonical name -> surfaces, with overlapping multi-word forms.
pub const LEXICON: &[(&str, &[&str])] = &[
    ("dog", &["dog", "dogs", "puppy"]),
    ("hot dog", &["hot dog", "hot dogs"]),
    ("bear", &["bear", "bears"]),
    ("teddy bear", &["teddy bear", "teddy bears"]),
    ("cat", &["cat", "cats"]),
    ("car", &["car", "cars"]),
    ("traffic light", &["traffic light", "traffic lights"]),
    ("person", &["person", "people", "man", "woman"]),
    ("tv", &["tv", "television"]),
    ("dining table", &["dining table", "table"]),
    ("cup", &["cup", "cups", "mug"]),
    ("bench", &["bench"]),
];

const FILLER: &[&str] = &["a", "the", "hot", "light", "traffic", "teddy", "with", "near", "big", "is", "dining", "and"];

pub fn lexicon() -> SynonymLexicon {
    SynonymLexicon::new(
        LEXICON
            .iter()
            .map(|(k, v)| (k.to_string(), v.iter().map(|s| s.to_string()).collect()))
            .collect(),
    )
    .unwrap()
}

fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
        } else if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Enumerates every span that matches a surface, then repeatedly claims the
/// longest unclaimed one (leftmost on ties).
pub fn extract(caption: &str) -> BTreeSet<String> {
    let toks = tokenize(caption);
    let mut spans = Vec::new();
    for (canon, surfaces) in LEXICON {
        for s in *surfaces {
            let words: Vec<&str> = s.split(' ').collect();
            for start in 0..toks.len() {
                if start + words.len() <= toks.len() && toks[start..start + words.len()].iter().zip(&words).all(|(a, b)| a == b) {
                    spans.push((start, start + words.len(), canon.to_string()));
                }
            }
        }
    }
    let mut claimed = vec![false; toks.len()];
    let mut found = BTreeSet::new();
    loop {
        let best = spans
            .iter()
            .filter(|(a, b, _)| !claimed[*a..*b].iter().any(|&c| c))
            .max_by(|x, y| (x.1 - x.0).cmp(&(y.1 - y.0)).then(y.0.cmp(&x.0)));
        let Some((a, b, name)) = best.cloned() else { break };
        for c in &mut claimed[a..b] {
            *c = true;
        }
        found.insert(name);
    }
    found
}

pub fn random_caption(rng: &mut impl Rng) -> String {
    let n = rng.gen_range(0..10);
    let mut parts = Vec::new();
    for _ in 0..n {
        if rng.gen_bool(0.45) {
            let (_, surfaces) = LEXICON.choose(rng).unwrap();
            let s = surfaces.choose(rng).unwrap();
            parts.push(if rng.gen_bool(0.2) { s.to_uppercase() } else { s.to_string() });
        } else {
            parts.push(FILLER.choose(rng).unwrap().to_string());
        }
        if rng.gen_bool(0.15) {
            parts.push(",".into());
        }
    }
    parts.join(" ") + "."
}

pub fn random_corpus(rng: &mut impl Rng, n_images: usize, min_objects: usize) -> Vec<ImageAnnotation> {
    let names: Vec<&str> = LEXICON.iter().map(|(k, _)| *k).collect();
    (0..n_images)
        .map(|i| {
            let k = rng.gen_range(min_objects..=6);
            let objects: BTreeSet<String> = names.choose_multiple(rng, k).map(|s| s.to_string()).collect();
            ImageAnnotation {
                image_id: format!("img{i}"),
                style: Style::ALL[rng.gen_range(0..Style::ALL.len())],
                objects,
                captions: vec![],
            }
        })
        .collect()
}

#[derive(Debug, Default, PartialEq)]
pub struct ChairRecount {
    pub hallucinated: usize,
    pub mentioned: usize,
    pub bad_captions: usize,
    pub captions: usize,
}

pub fn chair_recount(results: &[CaptionRecord], annotations: &[ImageAnnotation], style: Option<Style>) -> ChairRecount {
    let mut r = ChairRecount::default();
    for res in results {
        let ann = annotations.iter().find(|a| a.image_id == res.image_id).unwrap();
        if style.is_some_and(|s| s != ann.style) {
            continue;
        }
        let mentioned = extract(&res.caption);
        let mut bad = 0;
        for m in &mentioned {
            if !ann.objects.contains(m) {
                bad += 1;
            }
        }
        r.mentioned += mentioned.len();
        r.hallucinated += bad;
        r.captions += 1;
        if bad > 0 {
            r.bad_captions += 1;
        }
    }
    r
}

pub fn frac(n: usize, d: usize) -> f64 {
    if d == 0 {
        0.0
    } else {
        n as f64 / d as f64
    }
}

/// (tp, fp, tn, fn, accuracy, precision, recall, f1)
pub fn pope_recount(answers: &BTreeMap<String, Answer>, questions: &[&PopeQuestion]) -> PopeStats {
    let (mut tp, mut fp, mut tn, mut fn_, mut unknown) = (0, 0, 0, 0, 0);
    for q in questions {
        let a = answers.get(&q.question_id).copied().unwrap_or(Answer::Unknown);
        if a == Answer::Unknown {
            unknown += 1;
        }
        if q.expected == Label::Yes {
            if a == Answer::Yes {
                tp += 1
            } else {
                fn_ += 1
            }
        } else if a == Answer::No {
            tn += 1
        } else if a == Answer::Yes {
            fp += 1
        }
    }
    let precision = frac(tp, tp + fp);
    let recall = frac(tp, tp + fn_);
    PopeStats {
        accuracy: frac(tp + tn, questions.len()),
        precision,
        recall,
        f1: if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 },
        tp,
        fp,
        tn,
        fn_,
        unknown,
        total: questions.len(),
    }
}

/// Absent objects of `image` sorted by summed pair co-occurrence with its
/// ground truth, ties alphabetical.
pub fn cooccurrence_order(corpus: &[ImageAnnotation], image: &ImageAnnotation) -> Vec<String> {
    let universe: BTreeSet<&String> = corpus.iter().flat_map(|a| a.objects.iter()).collect();
    let mut scored: Vec<(usize, String)> = universe
        .into_iter()
        .filter(|o| !image.objects.contains(*o))
        .map(|o| {
            let score = corpus
                .iter()
                .filter(|a| a.objects.contains(o))
                .map(|a| image.objects.iter().filter(|g| a.objects.contains(*g)).count())
                .sum();
            (score, o.clone())
        })
        .collect();
    scored.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.into_iter().map(|(_, o)| o).collect()
}

pub fn popularity_order(corpus: &[ImageAnnotation], image: &ImageAnnotation) -> Vec<String> {
    let mut counts: BTreeMap<&String, usize> = BTreeMap::new();
    for a in corpus {
        for o in &a.objects {
            *counts.entry(o).or_default() += 1;
        }
    }
    let mut v: Vec<(usize, String)> = counts
        .into_iter()
        .filter(|(o, _)| !image.objects.contains(*o))
        .map(|(o, c)| (c, o.clone()))
        .collect();
    v.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    v.into_iter().map(|(_, o)| o).collect()
}
