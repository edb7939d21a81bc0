//! Dynamic RAG with in-context retrieval.
//!
//! The model drafts with the context hidden. When RIND flags a draft token,
//! the answer is retracted to the start of that token's sentence, a
//! retrieval pass picks context windows from the attention of the policy's
//! heads, and one sentence is regenerated with only those windows visible.
//! Every draft starts from a fully hidden context again.

mod retrieve;
mod rind;

use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::ops::Range;
use std::path::Path;

use rand::seq::index;
use serde::{Deserialize, Serialize};

pub use retrieve::{
    average_attention, cluster_indices, expand_window, merge_windows, representative, select_windows, top_k_indices,
    Retrieval, RetrievalParams,
};
pub use rind::{content_flags, logit_entropy, parse_stopwords, rind, RindConfig, RindInput, RindResult, DEFAULT_STOPWORDS};

use crate::probe::{predict_heads, ProbeModel};
use crate::tokenizer::Tokenizer;
use crate::{seed, Backend, Error, HeadId, HeadLayout, Intervention, Result, StepOutput};

/// How the heads driving retrieval are chosen.
#[derive(Debug, Clone, PartialEq)]
pub enum HeadPolicy {
    /// The probe's `top_n` heads for the current final hidden state.
    DynamicProbe { probe: Box<ProbeModel>, top_n: usize },
    /// A fixed list, typically the static top heads.
    StaticTop(Vec<HeadId>),
    /// `n` heads drawn afresh at every retrieval.
    DynamicRandom { n: usize, seed: u64 },
    /// `n` heads drawn once.
    FixedRandom(Vec<HeadId>),
    /// Never retrieve.
    NoRag,
}

pub const DEFAULT_POLICY_HEADS: usize = 5;

fn random_heads(layout: HeadLayout, n: usize, seed: u64) -> Vec<HeadId> {
    let mut rng = seed::rng(seed);
    let mut idx = index::sample(&mut rng, layout.total(), n.min(layout.total())).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| layout.head(i)).collect()
}

impl HeadPolicy {
    pub fn fixed_random(layout: HeadLayout, n: usize, seed: u64) -> Self {
        Self::FixedRandom(random_heads(layout, n, seed))
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::DynamicProbe { .. } => "dynamic_probe",
            Self::StaticTop(_) => "static_top",
            Self::DynamicRandom { .. } => "dynamic_random",
            Self::FixedRandom(_) => "fixed_random",
            Self::NoRag => "no_rag",
        }
    }

    fn heads(&self, output: &StepOutput, layout: HeadLayout, retrieval_no: usize) -> Result<Vec<HeadId>> {
        match self {
            Self::DynamicProbe { probe, top_n } => {
                let hidden: Vec<f64> = output.final_hidden.iter().map(|&x| x as f64).collect();
                predict_heads(probe, &hidden, *top_n)
            }
            Self::StaticTop(h) | Self::FixedRandom(h) => Ok(h.clone()),
            Self::DynamicRandom { n, seed } => {
                Ok(random_heads(layout, *n, seed::derive_seed(*seed, &[retrieval_no as u64])))
            }
            Self::NoRag => Err(Error::InvalidInput("the no-RAG policy never retrieves".into())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynRagParams {
    #[serde(default)]
    pub retrieval: RetrievalParams,
    /// Longest draft; drafts also stop at a sentence end.
    #[serde(default = "d_draft")]
    pub draft_len: usize,
    /// Token budget for the whole answer.
    #[serde(default = "d_max_new")]
    pub max_new: usize,
}

fn d_draft() -> usize {
    32
}
fn d_max_new() -> usize {
    64
}

impl Default for DynRagParams {
    fn default() -> Self {
        Self {
            retrieval: RetrievalParams::default(),
            draft_len: d_draft(),
            max_new: d_max_new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    EndOfSequence,
    /// The token budget or the context window ran out.
    Budget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum DynRagEvent {
    Start {
        policy: String,
        context_len: usize,
        question_len: usize,
        threshold: f64,
        params: DynRagParams,
    },
    Draft {
        round: usize,
        tokens: Vec<u32>,
        text: String,
        rind: RindResult,
    },
    Accept {
        round: usize,
        tokens: Vec<u32>,
    },
    /// The answer so far plus the draft, cut to its first `keep` tokens.
    Retract {
        round: usize,
        trigger: usize,
        keep: usize,
    },
    Retrieve {
        round: usize,
        retrieval: Retrieval,
    },
    Regenerate {
        round: usize,
        tokens: Vec<u32>,
        text: String,
        visible_context: Vec<Range<usize>>,
    },
    Finish {
        tokens: Vec<u32>,
        text: String,
        reason: FinishReason,
    },
}

/// Ordered record of one answer.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DynRagLog {
    pub events: Vec<DynRagEvent>,
}

impl DynRagLog {
    pub fn retrieve_count(&self) -> usize {
        self.events.iter().filter(|e| matches!(e, DynRagEvent::Retrieve { .. })).count()
    }

    /// Rebuilds the answer from the draft, accept, retract and regenerate events.
    pub fn replay(&self) -> Result<Vec<u32>> {
        let mut answer: Vec<u32> = Vec::new();
        let mut pending: Vec<u32> = Vec::new();
        for e in &self.events {
            match e {
                DynRagEvent::Draft { tokens, .. } => pending = tokens.clone(),
                DynRagEvent::Accept { tokens, .. } | DynRagEvent::Regenerate { tokens, .. } => {
                    answer.extend_from_slice(tokens)
                }
                DynRagEvent::Retract { keep, .. } => {
                    answer.append(&mut pending);
                    if *keep > answer.len() {
                        return Err(Error::InvalidInput("retraction beyond the answer".into()));
                    }
                    answer.truncate(*keep);
                }
                DynRagEvent::Finish { tokens, .. } if *tokens != answer => {
                    return Err(Error::InvalidInput("replayed answer differs from the logged one".into()));
                }
                _ => {}
            }
        }
        Ok(answer)
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for e in &self.events {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads events; blank lines and `#` comment lines are skipped.
    pub fn read_jsonl<R: BufRead>(r: R, path: &Path) -> Result<Self> {
        let mut events = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            events.push(serde_json::from_str(&line).map_err(|e| Error::Format {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?);
        }
        Ok(Self { events })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Answer {
    pub tokens: Vec<u32>,
    pub text: String,
    pub reason: FinishReason,
    pub log: DynRagLog,
}

/// Byte offset where the sentence containing byte `pos` starts. A sentence
/// ends at `.`, `!` or `?` followed by whitespace; the whitespace run stays
/// with the earlier sentence.
pub fn sentence_start(text: &[u8], pos: usize) -> usize {
    let pos = pos.min(text.len());
    let mut start = 0;
    for b in 0..pos {
        if matches!(text[b], b'.' | b'!' | b'?') && text.get(b + 1).is_some_and(u8::is_ascii_whitespace) {
            let mut s = b + 1;
            while s < text.len() && text[s].is_ascii_whitespace() {
                s += 1;
            }
            if s <= pos {
                start = s;
            }
        }
    }
    start
}

/// Truncates `text` to the start of the sentence containing byte `pos`.
pub fn retract_to_sentence(text: &str, pos: usize) -> String {
    let mut cut = sentence_start(text.as_bytes(), pos);
    while !text.is_char_boundary(cut) {
        cut -= 1;
    }
    text[..cut].to_string()
}

fn ends_sentence(tokenizer: &Tokenizer, token: u32) -> bool {
    tokenizer
        .decode(&[token])
        .trim_end()
        .ends_with(['.', '!', '?'])
}

struct Session<'a, B: Backend + ?Sized> {
    backend: &'a B,
    tokenizer: &'a Tokenizer,
    layout: HeadLayout,
    eos: Option<u32>,
    max_context: usize,
    context_len: usize,
    /// Context followed by the question.
    base: Vec<u32>,
}

impl<B: Backend + ?Sized> Session<'_, B> {
    /// Forward pass with the given context positions visible; the question
    /// and everything generated are always visible.
    fn forward(&self, seq: &[u32], context_visible: &[Range<usize>]) -> Result<StepOutput> {
        let visible = context_visible.iter().flat_map(|r| r.clone()).chain(self.context_len..seq.len());
        self.backend.forward(seq, &Intervention::none().with_visible(visible))
    }

    fn seq(&self, answer: &[u32], extra: &[u32]) -> Vec<u32> {
        let mut s = self.base.clone();
        s.extend_from_slice(answer);
        s.extend_from_slice(extra);
        s
    }

    fn last_layer_mean(&self, out: &StepOutput) -> Vec<f64> {
        let l = self.layout.n_layers - 1;
        let heads: Vec<HeadId> = (0..self.layout.n_heads).map(|h| HeadId::new(l, h)).collect();
        average_attention(out, self.layout, &heads, out.attn_rows.first().map_or(0, Vec::len))
    }

    /// Greedy continuation of `answer` until a sentence end, end of sequence
    /// or `limit` tokens. Returns the tokens, whether EOS was produced, and
    /// the RIND inputs when `with_rind` is set.
    fn continue_greedy(
        &self,
        answer: &[u32],
        context_visible: &[Range<usize>],
        limit: usize,
        with_rind: bool,
    ) -> Result<(Vec<u32>, bool, Vec<RindInput>)> {
        let mut out_tokens = Vec::new();
        let mut entropies = Vec::new();
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut eos = false;
        for t in 0..limit {
            let out = self.forward(&self.seq(answer, &out_tokens), context_visible)?;
            if with_rind && t > 0 {
                rows.push(self.last_layer_mean(&out));
            }
            let tok = out.predicted_token;
            if Some(tok) == self.eos {
                eos = true;
                break;
            }
            entropies.push(logit_entropy(&out.logits));
            out_tokens.push(tok);
            if ends_sentence(self.tokenizer, tok) {
                break;
            }
        }
        let mut inputs = Vec::new();
        if with_rind && !out_tokens.is_empty() {
            if rows.len() < out_tokens.len() {
                let seq = self.seq(answer, &out_tokens);
                if seq.len() <= self.max_context {
                    let out = self.forward(&seq, context_visible)?;
                    rows.push(self.last_layer_mean(&out));
                } else {
                    rows.push(Vec::new());
                }
            }
            inputs = entropies
                .into_iter()
                .zip(rows)
                .map(|(entropy, attention)| RindInput { entropy, attention })
                .collect();
        }
        Ok((out_tokens, eos, inputs))
    }
}

/// Answers `question` about `context` under a head policy.
pub fn answer<B: Backend + ?Sized>(
    backend: &B,
    tokenizer: &Tokenizer,
    context: &[u32],
    question: &[u32],
    policy: &HeadPolicy,
    params: &DynRagParams,
    rind_config: &RindConfig,
) -> Result<Answer> {
    params.retrieval.validate()?;
    rind_config.validate()?;
    if context.is_empty() {
        return Err(Error::Empty("context"));
    }
    if question.is_empty() {
        return Err(Error::Empty("question"));
    }
    let desc = backend.descriptor();
    let base_len = context.len() + question.len();
    if base_len >= desc.max_context {
        return Err(Error::ContextOverflow {
            len: base_len + 1,
            max: desc.max_context,
        });
    }
    let session = Session {
        backend,
        tokenizer,
        layout: desc.layout(),
        eos: desc.eos_token,
        max_context: desc.max_context,
        context_len: context.len(),
        base: [context, question].concat(),
    };
    let mut log = DynRagLog {
        events: vec![DynRagEvent::Start {
            policy: policy.name().into(),
            context_len: context.len(),
            question_len: question.len(),
            threshold: rind_config.threshold,
            params: *params,
        }],
    };
    let mut answer: Vec<u32> = Vec::new();
    let mut retrievals = 0;
    let mut reason = FinishReason::Budget;
    let budget_left = |answer: &[u32]| params.max_new.saturating_sub(answer.len()).min(desc.max_context - base_len - answer.len());
    for round in 0.. {
        let limit = budget_left(&answer).min(params.draft_len);
        if limit == 0 {
            break;
        }
        let (draft, draft_eos, inputs) = session.continue_greedy(&answer, &[], limit, true)?;
        let content = content_flags(tokenizer, &[answer.as_slice(), &draft].concat(), &rind_config.stopwords);
        let result = rind(&inputs, base_len + answer.len(), &content[answer.len()..], rind_config.threshold);
        log.events.push(DynRagEvent::Draft {
            round,
            tokens: draft.clone(),
            text: tokenizer.decode(&draft),
            rind: result.clone(),
        });
        let trigger = match (policy, result.trigger) {
            (HeadPolicy::NoRag, _) | (_, None) => None,
            (_, Some(t)) => Some(t),
        };
        let Some(trigger) = trigger else {
            log.events.push(DynRagEvent::Accept { round, tokens: draft.clone() });
            answer.extend_from_slice(&draft);
            if draft_eos {
                reason = FinishReason::EndOfSequence;
                break;
            }
            if draft.is_empty() {
                break;
            }
            continue;
        };

        let combined = [answer.as_slice(), &draft].concat();
        let (bytes, offsets) = tokenizer.render(&combined);
        let start = sentence_start(&bytes, offsets[answer.len() + trigger].start);
        let keep = offsets.iter().take_while(|r| r.start < start).count().max(answer.len());
        log.events.push(DynRagEvent::Retract { round, trigger, keep });
        answer = combined[..keep].to_vec();

        let full = session.forward(&session.seq(&answer, &[]), &[0..context.len()])?;
        let heads = policy.heads(&full, session.layout, retrievals)?;
        retrievals += 1;
        let retrieval = select_windows(&full, session.layout, heads, context.len(), &params.retrieval)?;
        let windows = retrieval.merged.clone();
        log.events.push(DynRagEvent::Retrieve { round, retrieval });

        let limit = budget_left(&answer);
        let (tokens, eos, _) = session.continue_greedy(&answer, &windows, limit, false)?;
        log.events.push(DynRagEvent::Regenerate {
            round,
            tokens: tokens.clone(),
            text: tokenizer.decode(&tokens),
            visible_context: windows,
        });
        answer.extend_from_slice(&tokens);
        if eos {
            reason = FinishReason::EndOfSequence;
            break;
        }
    }
    let text = tokenizer.decode(&answer);
    log.events.push(DynRagEvent::Finish {
        tokens: answer.clone(),
        text: text.clone(),
        reason,
    });
    Ok(Answer {
        tokens: answer,
        text,
        reason,
        log,
    })
}

/// Context positions visible in a regeneration event.
pub fn visible_positions(windows: &[Range<usize>]) -> BTreeSet<usize> {
    windows.iter().flat_map(|r| r.clone()).collect()
}
