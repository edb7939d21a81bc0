//! Needle-in-a-haystack prompts with UUID needles.

use std::ops::Range;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::tokenizer::Tokenizer;
use crate::{seed, Error, Result};

/// Chat-style prompt layout with `{context}` and `{question}` placeholders.
pub const NIAH_TEMPLATE: &str = include_str!("../../data/niah_template.txt");
/// Bundled filler prose.
pub const DEFAULT_HAYSTACK: &str = include_str!("../../data/haystack.txt");
pub const NIAH_QUESTION: &str = "What is the magic word?";

pub fn needle_text(uuid: &str) -> String {
    format!("The magic word is {uuid}.")
}

/// A prompt template split around its `{context}` placeholder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NiahTemplate {
    pub prefix: String,
    pub suffix: String,
}

impl NiahTemplate {
    /// Parses a template. A single trailing newline of the file is not part of the prompt.
    pub fn parse(template: &str, question: &str) -> Result<Self> {
        let body = template.strip_suffix('\n').unwrap_or(template);
        let mut parts = body.split("{context}");
        let (Some(prefix), Some(suffix), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Task("template must contain exactly one {context}".into()));
        };
        Ok(Self {
            prefix: prefix.replace("{question}", question),
            suffix: suffix.replace("{question}", question),
        })
    }

    pub fn standard() -> Self {
        Self::parse(NIAH_TEMPLATE, NIAH_QUESTION).expect("bundled template is valid")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NiahSample {
    pub prompt: String,
    pub tokens: Vec<u32>,
    pub uuid: String,
    pub needle: String,
    /// Byte range of the needle sentence in `prompt`.
    pub needle_bytes: Range<usize>,
    /// Token range of the needle sentence, trailing period included.
    pub needle_span: Range<usize>,
    pub question: String,
    pub target_len: usize,
    pub depth: f64,
    pub seed: u64,
}

pub fn seeded_uuid(seed: u64) -> String {
    let mut bytes = [0u8; 16];
    seed::rng(seed).fill_bytes(&mut bytes);
    uuid::Builder::from_random_bytes(bytes).into_uuid().to_string()
}

/// True when `text[..p]` ends a sentence: a terminator followed by whitespace or the end.
fn is_boundary(text: &[u8], p: usize) -> bool {
    p > 0 && matches!(text[p - 1], b'.' | b'!' | b'?') && text.get(p).is_none_or(|c| c.is_ascii_whitespace())
}

/// Builds a sample with the bundled template.
pub fn make_niah(corpus: &str, tokenizer: &Tokenizer, target_len: usize, depth: f64, seed: u64) -> Result<NiahSample> {
    make_niah_with(&NiahTemplate::standard(), corpus, tokenizer, target_len, depth, seed)
}

/// Builds a prompt of exactly `target_len` tokens (byte tokenizer) by repeating
/// the corpus, truncating it, and inserting the needle at the sentence end at
/// or before `depth` of the haystack.
pub fn make_niah_with(
    template: &NiahTemplate,
    corpus: &str,
    tokenizer: &Tokenizer,
    target_len: usize,
    depth: f64,
    seed: u64,
) -> Result<NiahSample> {
    if !(0.0..=1.0).contains(&depth) {
        return Err(Error::Task(format!("depth {depth} outside [0, 1]")));
    }
    let corpus = corpus.trim();
    if corpus.is_empty() {
        return Err(Error::Task("empty haystack corpus".into()));
    }
    let uuid = seeded_uuid(seed);
    let needle = needle_text(&uuid);
    let overhead = tokenizer.encode(&template.prefix)?.len()
        + tokenizer.encode(&template.suffix)?.len()
        + tokenizer.encode(&needle)?.len()
        + 1;
    let budget = target_len
        .checked_sub(overhead)
        .filter(|&b| b > 0)
        .ok_or_else(|| Error::Task(format!("target length {target_len} leaves no room for a haystack")))?;

    let mut repeated = String::from(corpus);
    while tokenizer.encode(&repeated)?.len() < budget {
        repeated.push(' ');
        repeated.push_str(corpus);
    }
    let offsets = tokenizer.encode_with_offsets(&repeated)?;
    let mut cut = offsets[budget - 1].1.end;
    while !repeated.is_char_boundary(cut) {
        cut -= 1;
    }
    let haystack = &repeated[..cut];
    let bytes = haystack.as_bytes();

    let target = ((depth * bytes.len() as f64).round() as usize).min(bytes.len());
    let insert = (1..=target)
        .rev()
        .find(|&p| is_boundary(bytes, p))
        .or_else(|| (target + 1..=bytes.len()).find(|&p| is_boundary(bytes, p)))
        .ok_or_else(|| Error::Task("haystack has no sentence boundary".into()))?;

    let mut prompt = String::with_capacity(target_len + 16);
    prompt.push_str(&template.prefix);
    prompt.push_str(&haystack[..insert]);
    prompt.push(' ');
    let start = prompt.len();
    prompt.push_str(&needle);
    let needle_bytes = start..prompt.len();
    prompt.push_str(&haystack[insert..]);
    prompt.push_str(&template.suffix);

    let offsets = tokenizer.encode_with_offsets(&prompt)?;
    let needle_span = Tokenizer::span_of(&offsets, needle_bytes.clone());
    Ok(NiahSample {
        tokens: offsets.iter().map(|(t, _)| *t).collect(),
        prompt,
        uuid,
        needle,
        needle_bytes,
        needle_span,
        question: NIAH_QUESTION.to_string(),
        target_len,
        depth,
        seed,
    })
}
