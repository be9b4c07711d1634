//! Fixed toy vocabulary shared by the corpus, the model and the metrics.

/// Object class names, indexed by object id.
pub const OBJECTS: [&str; 12] = [
    "cat", "dog", "bear", "car", "boat", "bus", "cup", "book", "clock", "tree", "bird", "ball",
];

/// Colour attribute names, indexed by colour id.
pub const COLORS: [&str; 3] = ["red", "green", "blue"];

/// Count words; `COUNTS[k]` means `k + 1` instances.
pub const COUNTS: [&str; 3] = ["one", "two", "three"];

/// Position words for the relative-position questions.
pub const SIDES: [&str; 4] = ["left", "right", "top", "bottom"];

const FUNCTION_WORDS: [&str; 12] = [
    "<pad>", "<eos>", "is", "there", "a", "are", "the", "on", "?", "describe", "yes", "no",
];

/// Token id layout: function words, then objects, colours, counts, sides.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<&'static str>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let tokens = FUNCTION_WORDS
            .iter()
            .chain(&OBJECTS)
            .chain(&COLORS)
            .chain(&COUNTS)
            .chain(&SIDES)
            .copied()
            .collect();
        Self { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.tokens.iter().position(|t| *t == word)
    }

    pub fn word(&self, id: usize) -> Option<&'static str> {
        self.tokens.get(id).copied()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.word(i).unwrap_or("<unk>").to_string())
            .collect()
    }

    pub fn encode(&self, words: &[&str]) -> Option<Vec<usize>> {
        words.iter().map(|w| self.id(w)).collect()
    }

    pub fn eos(&self) -> usize {
        1
    }

    pub fn yes(&self) -> usize {
        10
    }

    pub fn no(&self) -> usize {
        11
    }

    pub fn object(&self, class: usize) -> usize {
        FUNCTION_WORDS.len() + class
    }

    pub fn color(&self, color: usize) -> usize {
        FUNCTION_WORDS.len() + OBJECTS.len() + color
    }

    pub fn count(&self, k: usize) -> usize {
        FUNCTION_WORDS.len() + OBJECTS.len() + COLORS.len() + k
    }

    pub fn side(&self, s: usize) -> usize {
        FUNCTION_WORDS.len() + OBJECTS.len() + COLORS.len() + COUNTS.len() + s
    }

    /// Object class named by a token, if any.
    pub fn object_of(&self, token: usize) -> Option<usize> {
        let start = FUNCTION_WORDS.len();
        (start..start + OBJECTS.len())
            .contains(&token)
            .then(|| token - start)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_ids_line_up() {
        let v = Vocab::new();
        assert_eq!(v.len(), 34);
        assert_eq!(v.id("<eos>"), Some(v.eos()));
        assert_eq!(v.id("yes"), Some(v.yes()));
        assert_eq!(v.id("no"), Some(v.no()));
        assert_eq!(v.word(v.object(2)), Some("bear"));
        assert_eq!(v.word(v.color(1)), Some("green"));
        assert_eq!(v.word(v.count(2)), Some("three"));
        assert_eq!(v.word(v.side(3)), Some("bottom"));
        assert_eq!(v.object_of(v.object(11)), Some(11));
        assert_eq!(v.object_of(v.yes()), None);
    }
}
