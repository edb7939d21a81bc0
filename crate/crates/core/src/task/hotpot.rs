//! HotpotQA distractor-format ingestion.
//!
//! Accepts either a JSON array of records or one record per line. Each
//! paragraph is rendered as `title: sentences` and paragraphs are separated by
//! blank lines. Supporting facts map to the byte range of the referenced
//! sentence and then to tokens.

use std::ops::Range;
use std::path::Path;

use serde::Deserialize;

use super::{MultiHopSample, Provenance};
use crate::tokenizer::Tokenizer;
use crate::{Error, Result};

#[derive(Debug, Deserialize)]
struct Record {
    #[serde(default, rename = "_id")]
    id: Option<String>,
    question: String,
    answer: String,
    context: Vec<(String, Vec<String>)>,
    supporting_facts: Vec<(String, usize)>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct HotpotLoad {
    pub samples: Vec<MultiHopSample>,
    /// Records dropped because a supporting fact could not be located.
    pub skipped: usize,
}

pub fn load_hotpotqa(path: &Path, tokenizer: &Tokenizer) -> Result<HotpotLoad> {
    let text = std::fs::read_to_string(path)?;
    let format_err = |line: usize, message: String| Error::Format {
        path: path.to_path_buf(),
        line,
        message,
    };
    let records: Vec<(usize, Record)> = if text.trim_start().starts_with('[') {
        let values: Vec<serde_json::Value> =
            serde_json::from_str(&text).map_err(|e| format_err(e.line(), e.to_string()))?;
        values
            .into_iter()
            .enumerate()
            .map(|(i, v)| {
                serde_json::from_value(v).map(|r| (i + 1, r)).map_err(|e| format_err(0, format!("record {}: {e}", i + 1)))
            })
            .collect::<Result<_>>()?
    } else {
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| serde_json::from_str(l).map(|r| (i + 1, r)).map_err(|e| format_err(i + 1, e.to_string())))
            .collect::<Result<_>>()?
    };

    let mut out = HotpotLoad::default();
    for (n, rec) in records {
        match convert(rec, n, tokenizer)? {
            Some(s) => out.samples.push(s),
            None => out.skipped += 1,
        }
    }
    Ok(out)
}

fn convert(rec: Record, n: usize, tokenizer: &Tokenizer) -> Result<Option<MultiHopSample>> {
    let mut context = String::new();
    let mut sentence_bytes: Vec<(String, Vec<Range<usize>>)> = Vec::new();
    for (title, sentences) in &rec.context {
        if !context.is_empty() {
            context.push_str("\n\n");
        }
        context.push_str(title);
        context.push_str(": ");
        let mut ranges = Vec::with_capacity(sentences.len());
        for s in sentences {
            let start = context.len();
            context.push_str(s);
            ranges.push(start..context.len());
        }
        sentence_bytes.push((title.clone(), ranges));
    }
    let mut fact_bytes = Vec::new();
    for (title, sid) in &rec.supporting_facts {
        let Some(range) = sentence_bytes
            .iter()
            .find(|(t, _)| t == title)
            .and_then(|(_, r)| r.get(*sid))
        else {
            log::warn!("record {n}: supporting fact ({title:?}, {sid}) not found; skipped");
            return Ok(None);
        };
        // Leading and trailing whitespace belongs to the layout, not the fact.
        let raw = &context[range.clone()];
        let start = range.start + (raw.len() - raw.trim_start().len());
        let end = range.end - (raw.len() - raw.trim_end().len());
        if start >= end {
            return Ok(None);
        }
        fact_bytes.push(start..end);
    }
    let offsets = tokenizer.encode_with_offsets(&context)?;
    let fact_tokens = fact_bytes.iter().map(|r| Tokenizer::span_of(&offsets, r.clone())).collect();
    Ok(Some(MultiHopSample {
        id: rec.id.unwrap_or_else(|| format!("record-{n}")),
        context,
        question: rec.question,
        answer: rec.answer,
        fact_bytes,
        fact_tokens,
        provenance: Provenance::Hotpotqa,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    const RECORD: &str = r#"{"_id":"q1","question":"Where?","answer":"Paris","context":[["Alpha",["Alpha is a band."," It formed in Paris."]],["Beta",["Beta is a film."]]],"supporting_facts":[["Alpha",1],["Beta",0]]}"#;

    fn write(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn spans_round_trip_to_sentences() {
        let f = write(&format!("[{RECORD}]"));
        let t = Tokenizer::Bytes;
        let load = load_hotpotqa(f.path(), &t).unwrap();
        assert_eq!(load.samples.len(), 1);
        let s = &load.samples[0];
        assert_eq!(s.fact_tokens.len(), 2);
        let toks = t.encode(&s.context).unwrap();
        assert_eq!(t.decode(&toks[s.fact_tokens[0].clone()]), "It formed in Paris.");
        assert_eq!(t.decode(&toks[s.fact_tokens[1].clone()]), "Beta is a film.");
    }

    #[test]
    fn jsonl_and_empty() {
        let f = write(&format!("{RECORD}\n\n{RECORD}\n"));
        assert_eq!(load_hotpotqa(f.path(), &Tokenizer::Bytes).unwrap().samples.len(), 2);
        let empty = write("");
        assert_eq!(load_hotpotqa(empty.path(), &Tokenizer::Bytes).unwrap(), HotpotLoad::default());
    }

    #[test]
    fn malformed_line_is_reported() {
        let f = write(&format!("{RECORD}\n{{\"question\": 3}}\n"));
        match load_hotpotqa(f.path(), &Tokenizer::Bytes) {
            Err(Error::Format { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unmappable_fact_skips_record() {
        let bad = RECORD.replace(r#"["Beta",0]"#, r#"["Gamma",0]"#);
        let f = write(&format!("{RECORD}\n{bad}\n"));
        let load = load_hotpotqa(f.path(), &Tokenizer::Bytes).unwrap();
        assert_eq!((load.samples.len(), load.skipped), (1, 1));
    }
}
