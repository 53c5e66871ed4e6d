use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::lexicon::words;
use super::{ImageAnnotation, Style};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Random,
    Popular,
    Adversarial,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Random, Strategy::Popular, Strategy::Adversarial];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::Popular => "popular",
            Strategy::Adversarial => "adversarial",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown POPE strategy {s:?}")))
    }
}

/// Ground-truth label of a question.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Yes,
    No,
}

/// A binarized model answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Answer {
    Yes,
    No,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopeQuestion {
    pub question_id: String,
    pub image_id: String,
    pub style: Style,
    pub object: String,
    pub expected: Label,
    pub strategy: Strategy,
    pub text: String,
}

/// An image that had fewer ground-truth objects than requested yes-questions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Underfill {
    pub image_id: String,
    pub yes_requested: usize,
    pub yes_generated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopeGeneration {
    pub questions: Vec<PopeQuestion>,
    pub underfilled: Vec<Underfill>,
}

pub fn question_text(object: &str) -> String {
    format!("Is there a {object} in the image?")
}

/// FNV-1a, used to give each image its own stable random stream.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn image_rng(seed: u64, strategy: Strategy, image_id: &str) -> ChaCha8Rng {
    let tag = fnv1a(format!("{}/{image_id}", strategy.name()).as_bytes());
    ChaCha8Rng::seed_from_u64(seed ^ tag)
}

fn draw(rng: &mut ChaCha8Rng, pool: &[&str], n: usize) -> Vec<String> {
    sample(rng, pool.len(), n)
        .into_iter()
        .map(|i| pool[i].to_string())
        .collect()
}

/// Sorts by score descending, then name ascending.
fn ranked<'a>(mut items: Vec<(&'a str, usize)>) -> Vec<&'a str> {
    items.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    items.into_iter().map(|(o, _)| o).collect()
}

/// Builds `per_image` questions per image: half asking about ground-truth
/// objects, half about absent objects chosen by `strategy`.
pub fn pope_generate(
    annotations: &[ImageAnnotation],
    strategy: Strategy,
    per_image: usize,
    seed: u64,
) -> Result<PopeGeneration> {
    if per_image == 0 || per_image % 2 != 0 {
        return Err(Error::Argument(format!("per_image must be a positive even number, got {per_image}")));
    }
    if annotations.len() < 2 {
        return Err(Error::Data(format!(
            "POPE generation needs at least 2 images, got {}",
            annotations.len()
        )));
    }
    let mut seen = BTreeSet::new();
    for a in annotations {
        if !seen.insert(a.image_id.as_str()) {
            return Err(Error::Data(format!("duplicate annotation for image {:?}", a.image_id)));
        }
    }

    let mut frequency: BTreeMap<&str, usize> = BTreeMap::new();
    let mut cooccur: HashMap<(&str, &str), usize> = HashMap::new();
    for a in annotations {
        for o in &a.objects {
            *frequency.entry(o).or_default() += 1;
            for p in &a.objects {
                if o != p {
                    *cooccur.entry((o, p)).or_default() += 1;
                }
            }
        }
    }
    let universe: Vec<&str> = frequency.keys().copied().collect();
    let half = per_image / 2;

    let mut questions = Vec::with_capacity(annotations.len() * per_image);
    let mut underfilled = Vec::new();
    for a in annotations {
        let mut rng = image_rng(seed, strategy, &a.image_id);
        let present: Vec<&str> = a.objects.iter().map(String::as_str).collect();
        let absent: Vec<&str> = universe.iter().copied().filter(|o| !a.objects.contains(*o)).collect();
        if absent.len() < half {
            return Err(Error::Data(format!(
                "image {:?} has only {} absent objects, {half} needed",
                a.image_id,
                absent.len()
            )));
        }

        let n_yes = half.min(present.len());
        if n_yes < half {
            underfilled.push(Underfill {
                image_id: a.image_id.clone(),
                yes_requested: half,
                yes_generated: n_yes,
            });
        }
        let yes = draw(&mut rng, &present, n_yes);
        let no: Vec<String> = match strategy {
            Strategy::Random => draw(&mut rng, &absent, half),
            Strategy::Popular => ranked(absent.iter().map(|&o| (o, frequency[o])).collect())
                .into_iter()
                .take(half)
                .map(str::to_string)
                .collect(),
            Strategy::Adversarial => ranked(
                absent
                    .iter()
                    .map(|&o| {
                        let score = present.iter().map(|&g| cooccur.get(&(o, g)).copied().unwrap_or(0)).sum();
                        (o, score)
                    })
                    .collect(),
            )
            .into_iter()
            .take(half)
            .map(str::to_string)
            .collect(),
        };

        let labelled = yes.into_iter().map(|o| (o, Label::Yes)).chain(no.into_iter().map(|o| (o, Label::No)));
        for (j, (object, expected)) in labelled.enumerate() {
            questions.push(PopeQuestion {
                question_id: format!("{}-{}-{j}", strategy.name(), a.image_id),
                image_id: a.image_id.clone(),
                style: a.style,
                text: question_text(&object),
                object,
                expected,
                strategy,
            });
        }
    }
    Ok(PopeGeneration {
        questions,
        underfilled,
    })
}

/// Binarizes free text: a leading yes/no decides, otherwise the first
/// standalone yes/no word, otherwise unknown.
pub fn parse_answer(text: &str) -> Answer {
    words(text)
        .iter()
        .find_map(|w| match w.as_str() {
            "yes" => Some(Answer::Yes),
            "no" => Some(Answer::No),
            _ => None,
        })
        .unwrap_or(Answer::Unknown)
}

/// One answer line: either an already-parsed `answer` or raw `text`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub question_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<Answer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

impl AnswerRecord {
    pub fn resolve(&self) -> Answer {
        match (self.answer, &self.text) {
            (Some(a), _) => a,
            (None, Some(t)) => parse_answer(t),
            (None, None) => Answer::Unknown,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PopeStats {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// Answers that were neither yes nor no (already included in `fn_` when
    /// the expected label is yes).
    pub unknown: usize,
    pub total: usize,
}

impl PopeStats {
    fn add(&mut self, expected: Label, answer: Answer) {
        self.total += 1;
        match (expected, answer) {
            (Label::Yes, Answer::Yes) => self.tp += 1,
            (Label::Yes, Answer::No) => self.fn_ += 1,
            (Label::No, Answer::Yes) => self.fp += 1,
            (Label::No, Answer::No) => self.tn += 1,
            (Label::Yes, Answer::Unknown) => {
                self.fn_ += 1;
                self.unknown += 1;
            }
            (Label::No, Answer::Unknown) => self.unknown += 1,
        }
    }

    fn finish(mut self) -> Self {
        let r = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        self.accuracy = r(self.tp + self.tn, self.total);
        self.precision = r(self.tp, self.tp + self.fp);
        self.recall = r(self.tp, self.tp + self.fn_);
        let denom = self.precision + self.recall;
        self.f1 = if denom > 0.0 {
            2.0 * self.precision * self.recall / denom
        } else {
            0.0
        };
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopeReport {
    #[serde(flatten)]
    pub overall: PopeStats,
    pub per_strategy: BTreeMap<Strategy, PopeStats>,
    pub per_style: BTreeMap<Style, PopeStats>,
    /// Questions with no answer line; scored as unknown.
    pub unanswered: usize,
}

impl PopeReport {
    pub fn render_table(&self) -> String {
        use std::fmt::Write as _;
        let mut out = String::new();
        let _ = writeln!(out, "{:<12} {:>8} {:>9} {:>7} {:>7} {:>6}", "group", "accuracy", "precision", "recall", "f1", "n");
        let rows = self
            .per_strategy
            .iter()
            .map(|(k, v)| (k.name(), v))
            .chain(self.per_style.iter().map(|(k, v)| (k.name(), v)))
            .chain(std::iter::once(("all", &self.overall)));
        for (name, s) in rows {
            let _ = writeln!(
                out,
                "{:<12} {:>8.2} {:>9.2} {:>7.2} {:>7.2} {:>6}",
                name,
                100.0 * s.accuracy,
                100.0 * s.precision,
                100.0 * s.recall,
                100.0 * s.f1,
                s.total
            );
        }
        out
    }
}

/// Scores answers against questions with "yes" as the positive class.
/// Every question is scored; a question without an answer counts as unknown.
pub fn pope_score(answers: &[(String, Answer)], questions: &[PopeQuestion]) -> Result<PopeReport> {
    let mut by_id: HashMap<&str, &PopeQuestion> = HashMap::new();
    for q in questions {
        if by_id.insert(q.question_id.as_str(), q).is_some() {
            return Err(Error::Data(format!("duplicate question id {:?}", q.question_id)));
        }
    }
    let mut given: HashMap<&str, Answer> = HashMap::new();
    for (id, a) in answers {
        if !by_id.contains_key(id.as_str()) {
            return Err(Error::Data(format!("answer for unknown question {id:?}")));
        }
        if given.insert(id.as_str(), *a).is_some() {
            return Err(Error::Data(format!("duplicate answer for question {id:?}")));
        }
    }
    let mut overall = PopeStats::default();
    let mut per_strategy: BTreeMap<Strategy, PopeStats> = BTreeMap::new();
    let mut per_style: BTreeMap<Style, PopeStats> = BTreeMap::new();
    let mut unanswered = 0;
    for q in questions {
        let a = match given.get(q.question_id.as_str()) {
            Some(a) => *a,
            None => {
                unanswered += 1;
                Answer::Unknown
            }
        };
        overall.add(q.expected, a);
        per_strategy.entry(q.strategy).or_default().add(q.expected, a);
        per_style.entry(q.style).or_default().add(q.expected, a);
    }
    Ok(PopeReport {
        overall: overall.finish(),
        per_strategy: per_strategy.into_iter().map(|(k, v)| (k, v.finish())).collect(),
        per_style: per_style.into_iter().map(|(k, v)| (k, v.finish())).collect(),
        unanswered,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ann(id: &str, objects: &[&str]) -> ImageAnnotation {
        ImageAnnotation {
            image_id: id.into(),
            style: Style::Original,
            objects: objects.iter().map(|s| s.to_string()).collect(),
            captions: vec![],
        }
    }

    fn q(id: &str, expected: Label) -> PopeQuestion {
        PopeQuestion {
            question_id: id.into(),
            image_id: "img".into(),
            style: Style::Original,
            object: "dog".into(),
            expected,
            strategy: Strategy::Random,
            text: question_text("dog"),
        }
    }

    #[test]
    fn answers_parse() {
        assert_eq!(parse_answer("Yes, there is a dog."), Answer::Yes);
        assert_eq!(parse_answer("no"), Answer::No);
        assert_eq!(parse_answer("It is unclear."), Answer::Unknown);
        assert_eq!(parse_answer("  ...NO!"), Answer::No);
        assert_eq!(parse_answer("I think yes"), Answer::Yes);
        assert_eq!(parse_answer("There is nobody, yesterday"), Answer::Unknown);
    }

    #[test]
    fn confusion_example() {
        let qs: Vec<_> = ["a", "b", "c", "d", "e", "f"]
            .iter()
            .zip([Label::Yes, Label::Yes, Label::Yes, Label::No, Label::No, Label::No])
            .map(|(id, l)| q(id, l))
            .collect();
        let ans = [("a", Answer::Yes), ("b", Answer::Yes), ("c", Answer::No), ("d", Answer::Yes), ("e", Answer::No), ("f", Answer::No)]
            .map(|(i, a)| (i.to_string(), a));
        let r = pope_score(&ans, &qs).unwrap().overall;
        assert_eq!((r.tp, r.fp, r.fn_, r.tn), (2, 1, 1, 2));
        assert_eq!(r.precision, 2.0 / 3.0);
        assert_eq!(r.recall, 2.0 / 3.0);
        assert!((r.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.accuracy, 4.0 / 6.0);
    }

    #[test]
    fn all_yes_responder() {
        let qs = vec![q("a", Label::Yes), q("b", Label::No)];
        let ans = [("a".to_string(), Answer::Yes), ("b".to_string(), Answer::Yes)];
        let r = pope_score(&ans, &qs).unwrap().overall;
        assert_eq!((r.recall, r.precision, r.accuracy), (1.0, 0.5, 0.5));
    }

    #[test]
    fn unknown_answers_are_never_rewarded() {
        let qs = vec![q("a", Label::Yes), q("b", Label::No)];
        let r = pope_score(&[("a".into(), Answer::Unknown)], &qs).unwrap();
        assert_eq!(r.unanswered, 1);
        let s = r.overall;
        assert_eq!((s.tp, s.fp, s.tn, s.fn_, s.unknown), (0, 0, 0, 1, 2));
        assert_eq!(s.accuracy, 0.0);
    }

    #[test]
    fn duplicate_and_unknown_ids_fail() {
        let qs = vec![q("a", Label::Yes)];
        let dup = [("a".to_string(), Answer::Yes), ("a".to_string(), Answer::No)];
        assert!(pope_score(&dup, &qs).unwrap_err().to_string().contains("duplicate answer"));
        assert!(pope_score(&[("zz".into(), Answer::Yes)], &qs).is_err());
    }

    #[test]
    fn popular_prefers_frequent_objects() {
        let mut corpus: Vec<_> = (0..9).map(|i| ann(&format!("p{i}"), &["person", "car", "bench"])).collect();
        corpus.push(ann("target", &["dog", "cat", "bird"]));
        let g = pope_generate(&corpus, Strategy::Popular, 6, 1).unwrap();
        let first_no = g
            .questions
            .iter()
            .find(|q| q.image_id == "target" && q.expected == Label::No)
            .unwrap();
        // person, car and bench all appear 9 times; ties go alphabetically.
        assert_eq!(first_no.object, "bench");
        let nos: Vec<_> = g.questions.iter().filter(|q| q.image_id == "target" && q.expected == Label::No).map(|q| q.object.as_str()).collect();
        assert_eq!(nos, ["bench", "car", "person"]);
    }

    #[test]
    fn underfill_is_reported() {
        let corpus = vec![
            ann("a", &["dog"]),
            ann("b", &["cat", "car", "bus"]),
            ann("c", &["tree", "bench", "kite"]),
        ];
        let g = pope_generate(&corpus, Strategy::Random, 6, 3).unwrap();
        let a: Vec<_> = g.questions.iter().filter(|q| q.image_id == "a").collect();
        assert_eq!(a.iter().filter(|q| q.expected == Label::Yes).count(), 1);
        assert_eq!(a.iter().filter(|q| q.expected == Label::No).count(), 3);
        assert_eq!(g.underfilled, vec![Underfill { image_id: "a".into(), yes_requested: 3, yes_generated: 1 }]);
    }

    #[test]
    fn generation_preconditions() {
        let two = vec![ann("a", &["dog"]), ann("b", &["cat"])];
        assert!(matches!(pope_generate(&two, Strategy::Random, 5, 0), Err(Error::Argument(_))));
        assert!(matches!(pope_generate(&two[..1], Strategy::Random, 6, 0), Err(Error::Data(_))));
        let err = pope_generate(&two, Strategy::Random, 6, 0).unwrap_err();
        assert!(err.to_string().contains("\"a\""), "{err}");
    }

    #[test]
    fn question_text_format() {
        assert_eq!(question_text("dog"), "Is there a dog in the image?");
    }
}
