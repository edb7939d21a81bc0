//! Byte-level and whitespace tokenizers for the toy models.

use std::collections::HashMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Whitespace-delimited vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordVocab {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

/// Words of the built-in 16-token vocabulary used by the induction model's
/// mini needle-in-a-haystack task.
pub const TOY_WORDS: [&str; 16] = [
    "sun", "sea", "hill", "tree", ".", "the", "magic", "word", "is", "?", "c0", "c1", "c2", "c3",
    "c4", "c5",
];

impl WordVocab {
    pub fn new<S: Into<String>>(words: impl IntoIterator<Item = S>) -> Result<Self> {
        let words: Vec<String> = words.into_iter().map(Into::into).collect();
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!("invalid vocabulary word {w:?}")));
            }
            if index.insert(w.clone(), i as u32).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary word {w:?}")));
            }
        }
        Ok(Self { words, index })
    }

    pub fn toy() -> Self {
        Self::new(TOY_WORDS).expect("built-in vocabulary is valid")
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenizerKind {
    #[default]
    Bytes,
    Words,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Tokenizer {
    Bytes,
    Words(WordVocab),
}

impl Default for Tokenizer {
    fn default() -> Self {
        Tokenizer::Bytes
    }
}

impl Tokenizer {
    pub fn vocab_size(&self) -> usize {
        match self {
            Tokenizer::Bytes => 256,
            Tokenizer::Words(v) => v.len(),
        }
    }

    /// Token ids together with the byte range each covers in `text`.
    pub fn encode_with_offsets(&self, text: &str) -> Result<Vec<(u32, Range<usize>)>> {
        match self {
            Tokenizer::Bytes => Ok(text.bytes().enumerate().map(|(i, b)| (b as u32, i..i + 1)).collect()),
            Tokenizer::Words(vocab) => {
                let mut out = Vec::new();
                let mut start = None;
                for (i, c) in text.char_indices().chain(std::iter::once((text.len(), ' '))) {
                    match (start, c.is_whitespace()) {
                        (None, false) => start = Some(i),
                        (Some(s), true) => {
                            let word = &text[s..i];
                            let id = vocab.id(word).ok_or_else(|| {
                                Error::InvalidInput(format!("word {word:?} not in vocabulary"))
                            })?;
                            out.push((id, s..i));
                            start = None;
                        }
                        _ => {}
                    }
                }
                Ok(out)
            }
        }
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        Ok(self.encode_with_offsets(text)?.into_iter().map(|(t, _)| t).collect())
    }

    /// Raw bytes of the decoded text plus the byte range of every token.
    pub fn render(&self, tokens: &[u32]) -> (Vec<u8>, Vec<Range<usize>>) {
        match self {
            Tokenizer::Bytes => (
                tokens.iter().map(|&t| t as u8).collect(),
                (0..tokens.len()).map(|i| i..i + 1).collect(),
            ),
            Tokenizer::Words(vocab) => {
                let mut text = Vec::new();
                let mut ranges = Vec::with_capacity(tokens.len());
                for (i, &t) in tokens.iter().enumerate() {
                    if i > 0 {
                        text.push(b' ');
                    }
                    let start = text.len();
                    text.extend_from_slice(vocab.word(t).unwrap_or("<unk>").as_bytes());
                    ranges.push(start..text.len());
                }
                (text, ranges)
            }
        }
    }

    pub fn decode(&self, tokens: &[u32]) -> String {
        String::from_utf8_lossy(&self.render(tokens).0).into_owned()
    }

    /// Token indices whose byte ranges fall inside `bytes`.
    pub fn span_of(offsets: &[(u32, Range<usize>)], bytes: Range<usize>) -> Range<usize> {
        let first = offsets
            .iter()
            .position(|(_, r)| r.start >= bytes.start)
            .unwrap_or(offsets.len());
        let end = offsets
            .iter()
            .rposition(|(_, r)| r.end <= bytes.end)
            .map_or(first, |i| i + 1);
        first..end.max(first)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_round_trip() {
        let t = Tokenizer::Bytes;
        let s = "The magic word is 1b4e28ba-2fa1-11d2-883f-0016d3cca427.";
        assert_eq!(t.decode(&t.encode(s).unwrap()), s);
    }

    #[test]
    fn words_round_trip_and_offsets() {
        let t = Tokenizer::Words(WordVocab::toy());
        let s = "the magic word is c3 c1 .";
        let enc = t.encode_with_offsets(s).unwrap();
        assert_eq!(enc.len(), 7);
        assert_eq!(&s[enc[4].1.clone()], "c3");
        assert_eq!(t.decode(&t.encode(s).unwrap()), s);
        assert!(t.encode("banana").is_err());
        let (_, ranges) = t.render(&t.encode(s).unwrap());
        assert_eq!(ranges, enc.iter().map(|(_, r)| r.clone()).collect::<Vec<_>>());
    }

    #[test]
    fn span_of_maps_bytes_to_tokens() {
        let t = Tokenizer::Words(WordVocab::toy());
        let s = "sun sea . the magic word is c0 . hill";
        let enc = t.encode_with_offsets(s).unwrap();
        let start = s.find("the").unwrap();
        let end = s.find(" hill").unwrap();
        assert_eq!(Tokenizer::span_of(&enc, start..end), 3..9);
    }

    #[test]
    fn vocab_rejects_duplicates() {
        assert!(WordVocab::new(["a", "a"]).is_err());
        assert!(WordVocab::new(["a b"]).is_err());
    }
}
