//! Real-time information-need detection over a draft.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::tokenizer::Tokenizer;
use crate::{Error, Result};

pub const DEFAULT_STOPWORDS: &str = include_str!("../../data/stopwords.txt");

pub fn parse_stopwords(text: &str) -> BTreeSet<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RindConfig {
    pub threshold: f64,
    pub stopwords: BTreeSet<String>,
}

impl Default for RindConfig {
    fn default() -> Self {
        Self {
            threshold: 1.0,
            stopwords: parse_stopwords(DEFAULT_STOPWORDS),
        }
    }
}

impl RindConfig {
    pub fn with_threshold(threshold: f64) -> Self {
        Self {
            threshold,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0) {
            return Err(Error::Config(format!("RIND threshold must be > 0, got {}", self.threshold)));
        }
        Ok(())
    }
}

/// Per draft token: the entropy of the distribution it was drawn from and
/// the mean last-layer attention row of the query at that token.
#[derive(Debug, Clone, PartialEq)]
pub struct RindInput {
    pub entropy: f64,
    pub attention: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RindResult {
    pub scores: Vec<f64>,
    /// First draft index whose score exceeds the threshold.
    pub trigger: Option<usize>,
}

/// Shannon entropy (nats) of softmax(logits).
pub fn logit_entropy(logits: &[f32]) -> f64 {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    if !max.is_finite() {
        return 0.0;
    }
    let exps: Vec<f64> = logits.iter().map(|&l| (l as f64 - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter()
        .filter(|&&e| e > 0.0)
        .map(|&e| {
            let p = e / z;
            -p * p.ln()
        })
        .sum::<f64>()
        .max(0.0)
}

/// Scores `H_i * a_i * s_i` for each draft token, where `a_i` is the largest
/// attention any later draft token pays to position `draft_start + i`.
pub fn rind(inputs: &[RindInput], draft_start: usize, content: &[bool], threshold: f64) -> RindResult {
    let n = inputs.len();
    let scores: Vec<f64> = (0..n)
        .map(|i| {
            if !content.get(i).copied().unwrap_or(false) {
                return 0.0;
            }
            let a = inputs[i + 1..]
                .iter()
                .map(|x| x.attention.get(draft_start + i).copied().unwrap_or(0.0))
                .fold(0.0, f64::max);
            inputs[i].entropy * a
        })
        .collect();
    let trigger = scores.iter().position(|&s| s > threshold);
    RindResult { scores, trigger }
}

/// Marks tokens that belong to a non-stopword word. A word is a maximal run
/// of alphanumeric bytes in the rendered text; tokens with no alphanumeric
/// byte are never content.
pub fn content_flags(tokenizer: &Tokenizer, tokens: &[u32], stopwords: &BTreeSet<String>) -> Vec<bool> {
    let (bytes, offsets) = tokenizer.render(tokens);
    let is_word = |b: u8| b.is_ascii_alphanumeric() || b >= 0x80;
    offsets
        .iter()
        .map(|r| {
            let Some(p) = r.clone().find(|&p| is_word(bytes[p])) else {
                return false;
            };
            let mut s = p;
            while s > 0 && is_word(bytes[s - 1]) {
                s -= 1;
            }
            let mut e = p;
            while e < bytes.len() && is_word(bytes[e]) {
                e += 1;
            }
            let word = String::from_utf8_lossy(&bytes[s..e]).to_lowercase();
            !stopwords.contains(&word)
        })
        .collect()
}
