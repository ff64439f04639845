use std::collections::HashMap;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;

pub const COLORS: [&str; 8] = [
    "red", "green", "blue", "yellow", "cyan", "magenta", "orange", "purple",
];
pub const SHAPES: [&str; 3] = ["square", "circle", "triangle"];
pub const ROWS: [&str; 3] = ["top", "middle", "bottom"];
pub const COLUMNS: [&str; 3] = ["left", "center", "right"];

/// The closed template vocabulary, in id order. Reserved tokens first.
const WORDS: [&str; 64] = [
    "[PAD]",
    "[UNK]",
    "[CLS]", //
    "red",
    "green",
    "blue",
    "yellow",
    "cyan",
    "magenta",
    "orange",
    "purple", //
    "square",
    "circle",
    "triangle", //
    "top",
    "middle",
    "bottom",
    "left",
    "center",
    "right", //
    "and",
    "a",
    "an",
    "the",
    "with",
    "on",
    "in",
    "at",
    "of",
    "near",
    "above",
    "below",
    "beside",
    "small",
    "large",
    "big",
    "tiny",
    "shape",
    "shapes",
    "object",
    "objects",
    "image",
    "picture",
    "background",
    "corner",
    "edge",
    "side",
    "one",
    "two",
    "three",
    "is",
    "are",
    "there",
    "bright",
    "dark",
    "light",
    "striped",
    "plain",
    "round",
    "pointed",
    "box",
    "area",
    "region",
    "missing",
];

/// Token ↔ id map with `[PAD]`=0, `[UNK]`=1, `[CLS]`=2.
#[derive(Clone, Debug)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::template()
    }
}

impl Vocab {
    /// The fixed 64-word caption vocabulary.
    pub fn template() -> Self {
        Self::from_words(WORDS.iter().map(|w| w.to_string()).collect())
    }

    fn from_words(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Vocab { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    /// Lower-cases, splits on whitespace, prepends `[CLS]`, maps unknown
    /// words to `[UNK]`, then truncates or pads to exactly `max_len` ids.
    pub fn tokenize(&self, text: &str, max_len: usize) -> Vec<usize> {
        let mut ids = Vec::with_capacity(max_len.max(1));
        ids.push(CLS);
        ids.extend(text.split_whitespace().map(|w| self.id(&w.to_lowercase())));
        ids.truncate(max_len);
        ids.resize(max_len, PAD);
        ids
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i != PAD && i != CLS)
            .map(|&i| self.word(i).unwrap_or("[UNK]"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}
