//! `hlt/1` trace files: JSON Lines with one header line, then per sample a
//! `sample` record followed by one `step` record per generated token.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{argmax, GenerationTrace, TraceStep};
use crate::tokenizer::Tokenizer;
use crate::{Error, Intervention, Result, StepOutput};

pub const TRACE_SCHEMA: &str = "hlt/1";

/// How attention rows are written.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowFormat {
    Full,
    /// Keep the `m` largest weights per row.
    Sparse(usize),
}

impl Default for RowFormat {
    fn default() -> Self {
        Self::Sparse(64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub schema: String,
    pub config_hash: String,
    pub seed: u64,
    pub rows: RowFormat,
}

impl TraceHeader {
    pub fn new(config_hash: impl Into<String>, seed: u64, rows: RowFormat) -> Self {
        Self {
            schema: TRACE_SCHEMA.into(),
            config_hash: config_hash.into(),
            seed,
            rows,
        }
    }
}

/// A generation trace plus the needle positions its scores refer to.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredTrace {
    pub trace: GenerationTrace,
    pub needle: BTreeSet<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum Row {
    Full(Vec<f64>),
    Sparse { len: usize, top: Vec<(usize, f64)> },
}

impl Row {
    fn densify(self) -> Result<Vec<f64>, String> {
        match self {
            Row::Full(v) => Ok(v),
            Row::Sparse { len, top } => {
                let mut row = vec![0.0; len];
                for (i, w) in top {
                    *row.get_mut(i).ok_or_else(|| format!("sparse index {i} outside row of length {len}"))? = w;
                }
                Ok(row)
            }
        }
    }
}

/// The `m` largest entries as `(index, weight)`, by descending weight with
/// lower indices first among ties, so the row's argmax is always kept.
pub fn sparsify(row: &[f64], m: usize) -> Vec<(usize, f64)> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(m.max(1).min(row.len()));
    idx.into_iter().map(|i| (i, row[i])).collect()
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
enum Record {
    Sample {
        sample_id: String,
        seed: u64,
        prompt: Vec<u32>,
        overflow: bool,
        needle: BTreeSet<usize>,
    },
    Step {
        sample_id: String,
        step: usize,
        token: u32,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        text: Option<String>,
        logits: Vec<f32>,
        final_hidden: Vec<f32>,
        predicted_token: u32,
        degenerate: bool,
        rows: Vec<Row>,
        intervention: Intervention,
    },
}

fn step_record(sample_id: &str, t: usize, s: &TraceStep, format: RowFormat, tokenizer: Option<&Tokenizer>) -> Record {
    let rows = s
        .output
        .attn_rows
        .iter()
        .map(|r| match format {
            RowFormat::Full => Row::Full(r.clone()),
            RowFormat::Sparse(m) => Row::Sparse {
                len: r.len(),
                top: sparsify(r, m),
            },
        })
        .collect();
    Record::Step {
        sample_id: sample_id.to_string(),
        step: t,
        token: s.token,
        text: tokenizer.map(|tk| tk.decode(&[s.token])),
        logits: s.output.logits.clone(),
        final_hidden: s.output.final_hidden.clone(),
        predicted_token: s.output.predicted_token,
        degenerate: s.output.degenerate,
        rows,
        intervention: s.intervention.clone(),
    }
}

fn write_line<W: Write, T: Serialize>(w: &mut W, value: &T) -> Result<()> {
    serde_json::to_writer(&mut *w, value)?;
    w.write_all(b"\n")?;
    Ok(())
}

/// Writes a complete trace file. `tokenizer`, when given, adds the decoded
/// text of each accepted token.
pub fn write_traces<W: Write>(
    mut w: W,
    header: &TraceHeader,
    traces: &[StoredTrace],
    tokenizer: Option<&Tokenizer>,
) -> Result<()> {
    write_line(&mut w, header)?;
    for st in traces {
        let tr = &st.trace;
        write_line(
            &mut w,
            &Record::Sample {
                sample_id: tr.sample_id.clone(),
                seed: tr.seed,
                prompt: tr.prompt.clone(),
                overflow: tr.overflow,
                needle: st.needle.clone(),
            },
        )?;
        for (t, s) in tr.steps.iter().enumerate() {
            write_line(&mut w, &step_record(&tr.sample_id, t, s, header.rows, tokenizer))?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_trace_file(path: &Path, header: &TraceHeader, traces: &[StoredTrace], tokenizer: Option<&Tokenizer>) -> Result<()> {
    write_traces(BufWriter::new(File::create(path)?), header, traces, tokenizer)
}

/// Reads a trace stream. `path` is used only to label errors.
pub fn read_traces<R: BufRead>(r: R, path: &Path) -> Result<(TraceHeader, Vec<StoredTrace>)> {
    let fail = |line: usize, message: String| Error::Format {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = r.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, first) = lines.next().ok_or_else(|| fail(1, "missing header".into()))?;
    let first: serde_json::Value = serde_json::from_str(&first?).map_err(|e| fail(1, e.to_string()))?;
    let schema = first.get("schema").and_then(|s| s.as_str()).unwrap_or_default();
    if schema != TRACE_SCHEMA {
        return Err(Error::Version {
            found: schema.to_string(),
            expected: TRACE_SCHEMA.into(),
        });
    }
    let header: TraceHeader = serde_json::from_value(first).map_err(|e| fail(1, e.to_string()))?;
    let mut out: Vec<StoredTrace> = Vec::new();
    for (no, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| fail(no, e.to_string()))?;
        match rec {
            Record::Sample {
                sample_id,
                seed,
                prompt,
                overflow,
                needle,
            } => out.push(StoredTrace {
                trace: GenerationTrace {
                    sample_id,
                    seed,
                    prompt,
                    steps: Vec::new(),
                    overflow,
                },
                needle,
            }),
            Record::Step {
                sample_id,
                step,
                token,
                logits,
                final_hidden,
                predicted_token,
                degenerate,
                rows,
                intervention,
                ..
            } => {
                let cur = out.last_mut().ok_or_else(|| fail(no, "step before any sample record".into()))?;
                if cur.trace.sample_id != sample_id {
                    return Err(fail(no, format!("step for {sample_id} inside sample {}", cur.trace.sample_id)));
                }
                if step != cur.trace.steps.len() {
                    return Err(fail(no, format!("expected step {}, found {step}", cur.trace.steps.len())));
                }
                let attn_rows = rows
                    .into_iter()
                    .map(Row::densify)
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|m| fail(no, m))?;
                if attn_rows.iter().flatten().any(|w| !(*w >= 0.0)) {
                    return Err(fail(no, "negative or non-finite attention weight".into()));
                }
                cur.trace.steps.push(TraceStep {
                    output: StepOutput {
                        logits,
                        attn_rows,
                        final_hidden,
                        predicted_token,
                        degenerate,
                    },
                    token,
                    intervention,
                });
            }
        }
    }
    Ok((header, out))
}

pub fn read_trace_file(path: &Path) -> Result<(TraceHeader, Vec<StoredTrace>)> {
    read_traces(BufReader::new(File::open(path)?), path)
}

/// Whether the sparse encoding of `row` keeps the argmax of the full row.
pub fn sparse_preserves_argmax(row: &[f64], m: usize) -> bool {
    let top = sparsify(row, m);
    let len = row.len();
    let dense = Row::Sparse { len, top }.densify().unwrap_or_default();
    argmax(row) == argmax(&dense)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_induction_model, generate};
    use proptest::prelude::*;

    fn sample_trace() -> StoredTrace {
        let m = build_induction_model(16, 3).unwrap();
        let prompt: Vec<u32> = vec![1, 5, 9, 2, 7, 3, 1, 5];
        let trace = generate(&m, &prompt, 10, |t, _| {
            if t == 3 {
                Intervention::mask([crate::HeadId::new(1, 0)])
            } else {
                Intervention::none()
            }
        })
        .unwrap();
        StoredTrace {
            trace,
            needle: [1, 2, 3].into(),
        }
    }

    fn round_trip(st: &StoredTrace, format: RowFormat) -> StoredTrace {
        let mut buf = Vec::new();
        let header = TraceHeader::new("abc", 7, format);
        write_traces(&mut buf, &header, std::slice::from_ref(st), Some(&Tokenizer::Bytes)).unwrap();
        let (h, mut back) = read_traces(&buf[..], Path::new("mem")).unwrap();
        assert_eq!(h, header);
        back.pop().unwrap()
    }

    #[test]
    fn full_round_trip_on_ten_steps() {
        let st = sample_trace();
        assert_eq!(st.trace.len(), 10);
        let back = round_trip(&st, RowFormat::Full);
        assert_eq!(back.trace.steps.len(), 10);
        for (a, b) in st.trace.steps.iter().zip(&back.trace.steps) {
            assert_eq!(a.token, b.token);
            assert_eq!(a.output.logits, b.output.logits);
            assert_eq!(a.output.final_hidden, b.output.final_hidden);
            assert_eq!(a.intervention, b.intervention);
            for (ra, rb) in a.output.attn_rows.iter().zip(&b.output.attn_rows) {
                for (x, y) in ra.iter().zip(rb) {
                    assert_eq!(*x as f32, *y as f32);
                }
            }
        }
        assert_eq!(back.needle, st.needle);
    }

    #[test]
    fn newer_schema_is_rejected() {
        let text = "{\"schema\":\"hlt/2\",\"config_hash\":\"x\",\"seed\":0,\"rows\":\"full\"}\n";
        let err = read_traces(text.as_bytes(), Path::new("t.jsonl")).unwrap_err();
        assert!(matches!(err, Error::Version { ref found, .. } if found == "hlt/2"));
    }

    #[test]
    fn corrupt_line_reports_its_number() {
        let st = sample_trace();
        let mut buf = Vec::new();
        write_traces(&mut buf, &TraceHeader::new("h", 0, RowFormat::Sparse(4)), &[st], None).unwrap();
        let mut lines: Vec<String> = String::from_utf8(buf).unwrap().lines().map(String::from).collect();
        lines[4] = lines[4][..lines[4].len() / 2].to_string();
        let text = lines.join("\n");
        match read_traces(text.as_bytes(), Path::new("t.jsonl")).unwrap_err() {
            Error::Format { line, .. } => assert_eq!(line, 5),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn sparse_rows_keep_argmax() {
        let st = sample_trace();
        let back = round_trip(&st, RowFormat::Sparse(2));
        for (a, b) in st.trace.steps.iter().zip(&back.trace.steps) {
            for (ra, rb) in a.output.attn_rows.iter().zip(&b.output.attn_rows) {
                assert_eq!(argmax(ra), argmax(rb));
            }
        }
    }

    proptest! {
        #[test]
        fn sparsify_keeps_argmax(row in prop::collection::vec(0.0f64..1.0, 1..200), m in 1usize..10) {
            prop_assert!(sparse_preserves_argmax(&row, m));
        }

        #[test]
        fn sparsify_ties_keep_lowest_index(len in 1usize..50, m in 1usize..5) {
            prop_assert!(sparse_preserves_argmax(&vec![0.25; len], m));
        }
    }
}
