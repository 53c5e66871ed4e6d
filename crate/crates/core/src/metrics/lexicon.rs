use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use crate::error::{Error, Result};

/// Lowercased alphanumeric words of `text`.
pub(crate) fn words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

/// Canonical object names and the surface forms that mention them.
#[derive(Debug, Clone, PartialEq)]
pub struct SynonymLexicon {
    canonical: BTreeMap<String, BTreeSet<String>>,
    reverse: HashMap<Vec<String>, String>,
    max_words: usize,
}

impl SynonymLexicon {
    /// Builds the lexicon. Surfaces are lowercased and split into words; a
    /// surface claimed by two canonical names is an error.
    pub fn new(entries: BTreeMap<String, Vec<String>>) -> Result<Self> {
        let mut canonical = BTreeMap::new();
        let mut reverse: HashMap<Vec<String>, String> = HashMap::new();
        let mut max_words = 0;
        for (name, surfaces) in entries {
            if name.trim().is_empty() {
                return Err(Error::Data("empty canonical object name".into()));
            }
            let mut set = BTreeSet::new();
            for surface in surfaces {
                let key = words(&surface);
                if key.is_empty() {
                    return Err(Error::Data(format!("surface {surface:?} of {name:?} has no words")));
                }
                if let Some(prev) = reverse.get(&key) {
                    if prev != &name {
                        return Err(Error::Data(format!(
                            "surface {:?} maps to both {prev:?} and {name:?}",
                            key.join(" ")
                        )));
                    }
                }
                max_words = max_words.max(key.len());
                set.insert(key.join(" "));
                reverse.insert(key, name.clone());
            }
            canonical.insert(name, set);
        }
        Ok(Self {
            canonical,
            reverse,
            max_words,
        })
    }

    /// Parses a JSON object of `canonical -> [surface, ...]`.
    pub fn from_json(text: &str) -> Result<Self> {
        let entries: BTreeMap<String, Vec<String>> =
            serde_json::from_str(text).map_err(|e| Error::Data(format!("lexicon: {e}")))?;
        Self::new(entries)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn canonical_names(&self) -> impl Iterator<Item = &str> {
        self.canonical.keys().map(String::as_str)
    }

    pub fn surfaces(&self, canonical: &str) -> Option<&BTreeSet<String>> {
        self.canonical.get(canonical)
    }

    /// Canonical name for a whole surface phrase, if any.
    pub fn lookup(&self, surface: &str) -> Option<&str> {
        self.reverse.get(&words(surface)).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.canonical.len()
    }

    pub fn is_empty(&self) -> bool {
        self.canonical.is_empty()
    }
}

/// Canonical objects mentioned in `caption`.
///
/// Matches are claimed longest first (leftmost among equal lengths); a word
/// belongs to at most one match, so "hot dog" never also counts as "dog".
pub fn extract_objects(caption: &str, lexicon: &SynonymLexicon) -> BTreeSet<String> {
    let toks = words(caption);
    let mut taken = vec![false; toks.len()];
    let mut found = BTreeSet::new();
    for len in (1..=lexicon.max_words.min(toks.len())).rev() {
        for start in 0..=toks.len() - len {
            if taken[start..start + len].iter().any(|&t| t) {
                continue;
            }
            if let Some(name) = lexicon.reverse.get(&toks[start..start + len]) {
                taken[start..start + len].iter_mut().for_each(|t| *t = true);
                found.insert(name.clone());
            }
        }
    }
    found
}
