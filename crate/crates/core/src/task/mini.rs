//! Word-level needle-in-a-haystack for the induction model's toy vocabulary.
//!
//! The haystack is made of filler sentences over `sun sea hill tree`, each
//! ending in `.`. The needle `the magic word is cA cB cC cD .` uses four
//! distinct code words, and the prompt ends with `magic word ? the magic word is`
//! so that the correct continuation is the code sequence.

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tokenizer::{Tokenizer, WordVocab};
use crate::{seed, Error, Result};

pub const MINI_PROMPT_SUFFIX: &str = "magic word ? the magic word is";
const FILLER: [&str; 4] = ["sun", "sea", "hill", "tree"];
const CODES: [&str; 6] = ["c0", "c1", "c2", "c3", "c4", "c5"];
const CODE_LEN: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiniNiahSample {
    pub tokens: Vec<u32>,
    /// Token range of the whole needle sentence.
    pub needle_span: Range<usize>,
    /// The code tokens the model should reproduce.
    pub gold: Vec<u32>,
    pub haystack_len: usize,
    pub depth: f64,
    pub seed: u64,
}

impl MiniNiahSample {
    pub fn gold_text(&self, vocab: &WordVocab) -> String {
        Tokenizer::Words(vocab.clone()).decode(&self.gold)
    }

    /// 1 if the generated tokens contain the gold code sequence contiguously.
    pub fn accuracy(&self, generated: &[u32]) -> f64 {
        let hit = generated.windows(self.gold.len()).any(|w| w == self.gold.as_slice());
        if hit {
            1.0
        } else {
            0.0
        }
    }
}

/// Builds a sample with `haystack_len` filler tokens and the needle inserted
/// after the sentence end at or before `depth` of the haystack.
pub fn make_mini_niah(haystack_len: usize, depth: f64, seed: u64) -> Result<MiniNiahSample> {
    if !(0.0..=1.0).contains(&depth) {
        return Err(Error::Task(format!("depth {depth} outside [0, 1]")));
    }
    if haystack_len < 4 {
        return Err(Error::Task("mini haystack needs at least 4 tokens".into()));
    }
    let vocab = WordVocab::toy();
    let id = |w: &str| vocab.id(w).expect("toy word");
    let mut rng = seed::rng(seed);

    let mut hay = Vec::with_capacity(haystack_len);
    while hay.len() < haystack_len {
        let room = haystack_len - hay.len();
        let words = if room <= 7 { room - 1 } else { rng.random_range(2..=6) };
        for _ in 0..words {
            hay.push(id(FILLER[rng.random_range(0..FILLER.len())]));
        }
        hay.push(id("."));
    }

    let mut codes: Vec<u32> = CODES.iter().map(|c| id(c)).collect();
    codes.shuffle(&mut rng);
    codes.truncate(CODE_LEN);

    let period = id(".");
    let target = (depth * haystack_len as f64).round() as usize;
    // Positions p where hay[..p] ends a sentence.
    let insert = (1..=target.min(haystack_len))
        .rev()
        .find(|&p| hay[p - 1] == period)
        .or_else(|| (1..=haystack_len).find(|&p| hay[p - 1] == period))
        .expect("haystack ends with a period");

    let mut needle = vec![id("the"), id("magic"), id("word"), id("is")];
    needle.extend(&codes);
    needle.push(period);

    let mut tokens = hay[..insert].to_vec();
    let needle_span = tokens.len()..tokens.len() + needle.len();
    tokens.extend(&needle);
    tokens.extend(&hay[insert..]);
    tokens.extend(Tokenizer::Words(vocab.clone()).encode(MINI_PROMPT_SUFFIX)?);
    Ok(MiniNiahSample {
        tokens,
        needle_span,
        gold: codes,
        haystack_len,
        depth,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_and_determinism() {
        let s = make_mini_niah(256, 0.5, 4).unwrap();
        assert_eq!(s, make_mini_niah(256, 0.5, 4).unwrap());
        assert_eq!(s.tokens.len(), 256 + 9 + 7);
        let vocab = WordVocab::toy();
        let t = Tokenizer::Words(vocab.clone());
        let text = t.decode(&s.tokens[s.needle_span.clone()]);
        assert_eq!(text, format!("the magic word is {} .", s.gold_text(&vocab)));
        assert_eq!(s.tokens[s.needle_span.start - 1], vocab.id(".").unwrap());
        let is = vocab.id("is").unwrap();
        assert_eq!(s.tokens.iter().filter(|&&x| x == is).count(), 2);
        assert_eq!(*s.tokens.last().unwrap(), is);
    }

    #[test]
    fn depth_extremes() {
        let s = make_mini_niah(64, 0.0, 1).unwrap();
        let first_period = s.tokens.iter().position(|&x| x == 4).unwrap();
        assert_eq!(s.needle_span.start, first_period + 1);
        let e = make_mini_niah(64, 1.0, 1).unwrap();
        assert_eq!(e.needle_span.start, 64);
    }

    #[test]
    fn accuracy_requires_contiguous_gold() {
        let s = make_mini_niah(32, 0.5, 2).unwrap();
        let mut gen = s.gold.clone();
        gen.push(4);
        assert_eq!(s.accuracy(&gen), 1.0);
        gen.swap(0, 1);
        assert_eq!(s.accuracy(&gen), 0.0);
    }
}
