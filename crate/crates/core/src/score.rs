//! Per-step retrieval scores.
//!
//! The copy-paste score marks a head as retrieving when its most-attended
//! token lies in the needle and equals the token being predicted. The
//! reasoning score is the share of a head's attention that lands on the
//! supporting facts, measured over the context with attention-sink and
//! local-window positions excluded.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::model::{argmax, HeadId, HeadLayout, StepOutput};
use crate::{Error, Result};

/// Default activation threshold for reasoning scores.
pub const DEFAULT_THRESHOLD: f64 = 0.30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    CopyPaste,
    Reasoning,
}

/// Sizes of the excluded regions around each query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpanParams {
    /// Leading positions treated as attention sinks.
    #[serde(default = "default_sink")]
    pub sink_size: usize,
    /// Positions immediately before the query token treated as local attention.
    #[serde(default = "default_local")]
    pub local_window: usize,
}

fn default_sink() -> usize {
    1
}

fn default_local() -> usize {
    4
}

impl Default for SpanParams {
    fn default() -> Self {
        Self {
            sink_size: default_sink(),
            local_window: default_local(),
        }
    }
}

/// Index sets for one query position.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanSet {
    pub needle: BTreeSet<usize>,
    #[serde(default)]
    pub sink: BTreeSet<usize>,
    #[serde(default)]
    pub local: BTreeSet<usize>,
}

impl SpanSet {
    pub fn new(
        needle: impl IntoIterator<Item = usize>,
        sink: impl IntoIterator<Item = usize>,
        local: impl IntoIterator<Item = usize>,
    ) -> Self {
        Self {
            needle: needle.into_iter().collect(),
            sink: sink.into_iter().collect(),
            local: local.into_iter().collect(),
        }
    }

    pub fn needle_only(needle: impl IntoIterator<Item = usize>) -> Self {
        Self::new(needle, [], [])
    }

    /// Sink and local sets for a query at position `seq_len - 1`.
    pub fn for_query(needle: impl IntoIterator<Item = usize>, seq_len: usize, params: SpanParams) -> Self {
        let query = seq_len.saturating_sub(1);
        Self::new(
            needle,
            0..params.sink_size.min(seq_len),
            query.saturating_sub(params.local_window)..query,
        )
    }

    pub fn is_excluded(&self, i: usize) -> bool {
        self.sink.contains(&i) || self.local.contains(&i)
    }

    /// Needle indices that count toward the reasoning numerator: those
    /// inside the sink or local window are dropped so the ratio stays <= 1.
    pub fn effective_needle(&self) -> impl Iterator<Item = usize> + '_ {
        self.needle.iter().copied().filter(|&i| !self.is_excluded(i))
    }

    pub fn validate(&self, len: usize) -> Result<()> {
        for (name, set) in [("needle", &self.needle), ("sink", &self.sink), ("local", &self.local)] {
            if let Some(&i) = set.iter().next_back().filter(|&&i| i >= len) {
                return Err(Error::InvalidInput(format!(
                    "{name} index {i} outside attention row of length {len}"
                )));
            }
        }
        Ok(())
    }
}

/// Binary copy-paste retrieval score of a single attention row.
pub fn copy_paste_score(row: &[f64], spans: &SpanSet, tokens: &[u32], predicted: u32) -> Result<bool> {
    if row.is_empty() {
        return Err(Error::Empty("attention row"));
    }
    if row.len() != tokens.len() {
        return Err(Error::InvalidInput(format!(
            "attention row has {} entries for {} tokens",
            row.len(),
            tokens.len()
        )));
    }
    spans.validate(row.len())?;
    let top = argmax(row).expect("non-empty row");
    Ok(spans.needle.contains(&top) && tokens[top] == predicted)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReasoningScore {
    pub value: f64,
    /// The effective context carried no attention mass.
    pub degenerate: bool,
}

/// Share of attention on the needle relative to the effective context.
pub fn reasoning_score(row: &[f64], spans: &SpanSet) -> Result<ReasoningScore> {
    if row.is_empty() {
        return Err(Error::Empty("attention row"));
    }
    spans.validate(row.len())?;
    let denom: f64 = row
        .iter()
        .enumerate()
        .filter(|(j, _)| !spans.is_excluded(*j))
        .map(|(_, &a)| a)
        .sum();
    if denom <= 0.0 {
        return Ok(ReasoningScore {
            value: 0.0,
            degenerate: true,
        });
    }
    let num: f64 = spans.effective_needle().map(|i| row[i]).sum();
    Ok(ReasoningScore {
        value: (num / denom).clamp(0.0, 1.0),
        degenerate: false,
    })
}

/// Total attention a row places on the needle.
pub fn needle_mass(row: &[f64], spans: &SpanSet) -> f64 {
    spans.needle.iter().filter_map(|&i| row.get(i)).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadScoreFrame {
    pub step: usize,
    pub kind: ScoreKind,
    pub layout: HeadLayout,
    /// One score per head, in layout order.
    pub scores: Vec<f64>,
}

impl HeadScoreFrame {
    pub fn get(&self, h: HeadId) -> f64 {
        self.scores[self.layout.index(h)]
    }

    pub fn iter(&self) -> impl Iterator<Item = (HeadId, f64)> + '_ {
        self.scores
            .iter()
            .enumerate()
            .map(|(i, &s)| (self.layout.head(i), s))
    }
}

/// Scores every head of one step. `tokens` is the step's input sequence.
pub fn frame_scores(
    step: usize,
    output: &StepOutput,
    tokens: &[u32],
    spans: &SpanSet,
    kind: ScoreKind,
    layout: HeadLayout,
) -> Result<HeadScoreFrame> {
    if output.attn_rows.len() != layout.total() {
        return Err(Error::InvalidInput(format!(
            "step carries {} attention rows, model has {} heads",
            output.attn_rows.len(),
            layout.total()
        )));
    }
    let scores = output
        .attn_rows
        .iter()
        .map(|row| match kind {
            ScoreKind::CopyPaste => {
                copy_paste_score(row, spans, tokens, output.predicted_token).map(|b| b as u8 as f64)
            }
            ScoreKind::Reasoning => reasoning_score(row, spans).map(|s| s.value),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(HeadScoreFrame {
        step,
        kind,
        layout,
        scores,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DynamicHeadSet {
    pub step: usize,
    pub heads: BTreeSet<HeadId>,
}

/// Heads active at this step: score = 1 for copy-paste, score >= `threshold`
/// for reasoning.
pub fn select_dynamic_heads(frame: &HeadScoreFrame, threshold: f64) -> DynamicHeadSet {
    let heads = frame
        .iter()
        .filter(|&(_, s)| match frame.kind {
            ScoreKind::CopyPaste => s == 1.0,
            ScoreKind::Reasoning => s >= threshold,
        })
        .map(|(h, _)| h)
        .collect();
    DynamicHeadSet {
        step: frame.step,
        heads,
    }
}

/// Score kind, activation threshold and exclusion windows used for a study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scoring {
    pub kind: ScoreKind,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default)]
    pub spans: SpanParams,
}

fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}

impl Default for Scoring {
    fn default() -> Self {
        Self {
            kind: ScoreKind::CopyPaste,
            threshold: DEFAULT_THRESHOLD,
            spans: SpanParams::default(),
        }
    }
}

impl Scoring {
    pub fn spans(&self, needle: &BTreeSet<usize>, seq_len: usize) -> SpanSet {
        SpanSet::for_query(needle.iter().copied(), seq_len, self.spans)
    }

    pub fn frame(
        &self,
        step: usize,
        output: &StepOutput,
        tokens: &[u32],
        needle: &BTreeSet<usize>,
        layout: HeadLayout,
    ) -> Result<HeadScoreFrame> {
        frame_scores(step, output, tokens, &self.spans(needle, tokens.len()), self.kind, layout)
    }

    pub fn dynamic_heads(&self, frame: &HeadScoreFrame) -> DynamicHeadSet {
        select_dynamic_heads(frame, self.threshold)
    }
}
