/// Word table for the default 64-token toy vocabulary. Token 0 is eos.
const WORDS: [&str; 64] = [
    "<eos>", "a", "the", "is", "on", "in", "with", "and", "of", "there", "sitting", "standing", "next", "to",
    "near", "large", "small", "red", "white", "black", "two", "an", "are", "picture", "shows", "some", "grass",
    "street", "room", "water", "person", "dog", "cat", "horse", "bird", "car", "bus", "bicycle", "boat", "chair",
    "table", "bed", "couch", "tv", "laptop", "cup", "bottle", "bowl", "pizza", "cake", "banana", "apple", "clock",
    "vase", "book", "umbrella", "kite", "train", "truck", "sheep", "cow", "elephant", "giraffe", "zebra",
];

pub const EOS: u32 = 0;

/// Maps abstract token ids to words so toy captions can be scored.
#[derive(Debug, Clone)]
pub struct ToyVocab {
    size: usize,
}

impl ToyVocab {
    pub fn new(size: usize) -> Self {
        Self { size }
    }

    pub fn word(&self, id: u32) -> Option<String> {
        let i = id as usize;
        if i >= self.size {
            return None;
        }
        Some(WORDS.get(i).map_or_else(|| format!("tok{i}"), |w| w.to_string()))
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        if let Some(i) = WORDS.iter().position(|w| *w == word) {
            return (i < self.size).then_some(i as u32);
        }
        let n: usize = word.strip_prefix("tok")?.parse().ok()?;
        (n >= WORDS.len() && n < self.size).then_some(n as u32)
    }

    /// Space-joined words, skipping eos.
    pub fn render(&self, tokens: &[u32]) -> String {
        tokens
            .iter()
            .filter(|&&t| t != EOS)
            .filter_map(|&t| self.word(t))
            .collect::<Vec<_>>()
            .join(" ")
    }
}
