//! Fixed caption vocabulary and the deterministic tokenizer.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const MAX_TOKENS: usize = 16;

const SHIPPED: &str = include_str!("../data/vocabulary.json");

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    pub ids: [usize; MAX_TOKENS],
}

impl TokenSequence {
    pub fn blank() -> Self {
        Self {
            ids: [PAD; MAX_TOKENS],
        }
    }

    pub fn mask(&self) -> [bool; MAX_TOKENS] {
        self.ids.map(|id| id != PAD)
    }

    pub fn len(&self) -> usize {
        self.ids.iter().filter(|&&id| id != PAD).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Vocabulary {
    pub fn shipped() -> Self {
        Self::from_json(SHIPPED).expect("shipped vocabulary is valid")
    }

    pub fn shipped_json() -> &'static str {
        SHIPPED
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::InvalidData(msg) => Error::data(path, msg),
            other => other,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let tokens: Vec<String> = serde_json::from_str(text)
            .map_err(|e| Error::InvalidData(format!("vocabulary is not a JSON string array: {e}")))?;
        if tokens.len() < 2 || tokens[PAD] != "<pad>" || tokens[UNK] != "<unk>" {
            return Err(Error::InvalidData(
                "vocabulary must start with <pad>, <unk>".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidData(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Lowercases, splits on whitespace, strips punctuation, looks each word
    /// up (unknown words become UNK) and truncates or pads to 16 ids.
    pub fn tokenize(&self, caption: &str) -> TokenSequence {
        let mut seq = TokenSequence::blank();
        let words = words(caption);
        for (slot, w) in seq.ids.iter_mut().zip(words) {
            *slot = self.id(&w);
        }
        seq
    }
}

/// Normalized words of a caption (empty words after stripping are dropped).
pub fn words(caption: &str) -> impl Iterator<Item = String> + '_ {
    caption.split_whitespace().filter_map(|w| {
        let s: String = w
            .chars()
            .filter(|c| !c.is_ascii_punctuation())
            .flat_map(char::to_lowercase)
            .collect();
        (!s.is_empty()).then_some(s)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blank_caption_is_all_pad() {
        let v = Vocabulary::shipped();
        let t = v.tokenize("");
        assert_eq!(t, TokenSequence::blank());
        assert!(t.mask().iter().all(|&m| !m));
    }

    #[test]
    fn known_words_then_pad() {
        let v = Vocabulary::shipped();
        let t = v.tokenize("the left cube is near");
        let expect = [
            v.id("the"),
            v.id("left"),
            v.id("cube"),
            v.id("is"),
            v.id("near"),
        ];
        assert_eq!(&t.ids[..5], &expect);
        assert!(expect.iter().all(|&i| i > UNK));
        assert!(t.ids[5..].iter().all(|&i| i == PAD));
        assert_eq!(t.len(), 5);
    }

    #[test]
    fn unknown_word_is_unk() {
        let v = Vocabulary::shipped();
        let t = v.tokenize("xyzzy");
        assert_eq!(t.ids[0], UNK);
        assert!(t.ids[1..].iter().all(|&i| i == PAD));
    }

    #[test]
    fn punctuation_and_case_are_normalized() {
        let v = Vocabulary::shipped();
        let a = v.tokenize("A sphere in the center, near.");
        let b = v.tokenize("a sphere in the center near");
        assert_eq!(a, b);
        assert_eq!(a.len(), 6);
    }

    #[test]
    fn long_captions_truncate() {
        let v = Vocabulary::shipped();
        let t = v.tokenize(&"cube ".repeat(40));
        assert!(t.ids.iter().all(|&i| i == v.id("cube")));
    }

    #[test]
    fn shipped_vocabulary_shape() {
        let v = Vocabulary::shipped();
        assert_eq!(v.len(), 64);
        assert_eq!(v.token(PAD), Some("<pad>"));
        assert!(Vocabulary::from_json(r#"["<pad>","<unk>","a","a"]"#).is_err());
    }
}
