//! Task construction and answer metrics.

mod hotpot;
mod metrics;
mod mini;
mod multihop;
mod niah;

use std::ops::Range;

use serde::{Deserialize, Serialize};

pub use hotpot::{load_hotpotqa, HotpotLoad};
pub use metrics::{accuracy_contains, em, f1, normalize_answer, rouge_l, score, MetricKind, MetricResult};
pub use mini::{make_mini_niah, MiniNiahSample, MINI_PROMPT_SUFFIX};
pub use multihop::make_multihop;
pub use niah::{
    make_niah, make_niah_with, needle_text, NiahSample, NiahTemplate, DEFAULT_HAYSTACK, NIAH_QUESTION,
    NIAH_TEMPLATE,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Synthetic,
    Hotpotqa,
}

/// A question over a context with two or more supporting facts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiHopSample {
    pub id: String,
    pub context: String,
    pub question: String,
    pub answer: String,
    /// Byte ranges of the supporting sentences in `context`.
    pub fact_bytes: Vec<Range<usize>>,
    /// Token ranges of the supporting sentences under the tokenizer used to build the sample.
    pub fact_tokens: Vec<Range<usize>>,
    pub provenance: Provenance,
}

impl MultiHopSample {
    /// Union of the supporting-fact token indices.
    pub fn needle_indices(&self) -> std::collections::BTreeSet<usize> {
        self.fact_tokens.iter().flat_map(Clone::clone).collect()
    }
}
