//! The `hlb/1` wire protocol: newline-delimited JSON requests and responses
//! for driving a model that lives in another process.
//!
//! A request asks for one forward pass with optional head masking and token
//! visibility; the response carries logits, final-query attention rows and
//! the final hidden state. [`serve_lines`] answers requests with any
//! [`Backend`]; [`BridgeBackend`] is a [`Backend`] that forwards to a server.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::model::argmax;
use crate::{Backend, Error, HeadId, Intervention, ModelDescriptor, Result, StepOutput};

pub const PROTOCOL: &str = "hlb/1";
pub const DEFAULT_TOP_N: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestType {
    Forward,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum HeadSelection {
    /// The string `"all"`.
    All(AllHeads),
    List(Vec<(usize, usize)>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllHeads {
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogitsWant {
    Full,
    Top(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Want {
    pub attn_rows: HeadSelection,
    pub hidden: bool,
    pub logits: LogitsWant,
}

impl Default for Want {
    fn default() -> Self {
        Self {
            attn_rows: HeadSelection::All(AllHeads::All),
            hidden: true,
            logits: LogitsWant::Top(DEFAULT_TOP_N),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BridgeRequest {
    pub protocol: String,
    pub id: u64,
    #[serde(rename = "type")]
    pub kind: RequestType,
    pub tokens: Vec<u32>,
    #[serde(default)]
    pub masked_heads: Vec<(usize, usize)>,
    #[serde(default)]
    pub visible_positions: Option<Vec<usize>>,
    #[serde(default)]
    pub want: Want,
}

impl BridgeRequest {
    pub fn forward(id: u64, tokens: &[u32], intervention: &Intervention, want: Want) -> Self {
        Self {
            protocol: PROTOCOL.into(),
            id,
            kind: RequestType::Forward,
            tokens: tokens.to_vec(),
            masked_heads: intervention.masked_heads.iter().map(|h| (h.layer, h.head)).collect(),
            visible_positions: intervention.visible_positions.as_ref().map(|v| v.iter().copied().collect()),
            want,
        }
    }

    pub fn intervention(&self) -> Intervention {
        Intervention {
            masked_heads: self.masked_heads.iter().map(|&(l, h)| HeadId::new(l, h)).collect(),
            visible_positions: self.visible_positions.as_ref().map(|v| v.iter().copied().collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Logits {
    Full(Vec<f32>),
    Top(Vec<(u32, f32)>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttnRow {
    pub head: (usize, usize),
    pub masked: bool,
    pub row: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardResult {
    pub descriptor: ModelDescriptor,
    pub logits: Logits,
    pub attn_rows: Vec<AttnRow>,
    #[serde(default)]
    pub hidden: Option<Vec<f32>>,
    #[serde(default)]
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorObject {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeResponse {
    pub protocol: String,
    /// `None` when the request could not be parsed far enough to read it.
    pub id: Option<u64>,
    #[serde(flatten)]
    pub body: ResponseBody,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseBody {
    Ok(ForwardResult),
    Error(ErrorObject),
}

fn error_response(id: Option<u64>, code: &str, message: impl Into<String>) -> BridgeResponse {
    BridgeResponse {
        protocol: PROTOCOL.into(),
        id,
        body: ResponseBody::Error(ErrorObject {
            code: code.into(),
            message: message.into(),
        }),
    }
}

fn error_code(e: &Error) -> &'static str {
    match e {
        Error::ContextOverflow { .. } => "context_overflow",
        Error::Intervention(_) => "bad_intervention",
        Error::Empty(_) | Error::InvalidInput(_) => "bad_request",
        _ => "internal",
    }
}

/// Answers one parsed request.
pub fn handle_request<B: Backend + ?Sized>(backend: &B, req: &BridgeRequest) -> BridgeResponse {
    if req.protocol != PROTOCOL {
        return error_response(Some(req.id), "version", format!("unsupported protocol {:?}", req.protocol));
    }
    let desc = backend.descriptor();
    let layout = desc.layout();
    let heads: Vec<HeadId> = match &req.want.attn_rows {
        HeadSelection::All(_) => layout.heads().collect(),
        HeadSelection::List(l) => l.iter().map(|&(a, b)| HeadId::new(a, b)).collect(),
    };
    if let Some(h) = heads.iter().find(|h| !layout.contains(**h)) {
        return error_response(Some(req.id), "bad_request", format!("head {h} outside the model"));
    }
    let intervention = req.intervention();
    let out = match backend.forward(&req.tokens, &intervention) {
        Ok(o) => o,
        Err(e) => return error_response(Some(req.id), error_code(&e), e.to_string()),
    };
    let logits = match req.want.logits {
        LogitsWant::Full => Logits::Full(out.logits.clone()),
        LogitsWant::Top(n) => {
            let mut idx: Vec<usize> = (0..out.logits.len()).collect();
            idx.sort_by(|&a, &b| out.logits[b].total_cmp(&out.logits[a]).then(a.cmp(&b)));
            Logits::Top(idx.into_iter().take(n).map(|i| (i as u32, out.logits[i])).collect())
        }
    };
    let attn_rows = heads
        .iter()
        .map(|&h| AttnRow {
            head: (h.layer, h.head),
            masked: intervention.masked_heads.contains(&h),
            row: out.row(layout, h).to_vec(),
        })
        .collect();
    BridgeResponse {
        protocol: PROTOCOL.into(),
        id: Some(req.id),
        body: ResponseBody::Ok(ForwardResult {
            descriptor: desc,
            logits,
            attn_rows,
            hidden: req.want.hidden.then(|| out.final_hidden.clone()),
            degenerate: out.degenerate,
        }),
    }
}

/// Answers one request line; malformed input yields an error object.
pub fn handle_line<B: Backend + ?Sized>(backend: &B, line: &str) -> String {
    let resp = match serde_json::from_str::<BridgeRequest>(line) {
        Ok(req) => handle_request(backend, &req),
        Err(e) => {
            let id = serde_json::from_str::<serde_json::Value>(line)
                .ok()
                .and_then(|v| v.get("id").and_then(serde_json::Value::as_u64));
            error_response(id, "bad_request", e.to_string())
        }
    };
    serde_json::to_string(&resp).expect("responses serialize")
}

/// Serves requests line by line until end of input.
pub fn serve_lines<B: Backend + ?Sized, R: BufRead, W: Write>(backend: &B, input: R, mut output: W) -> Result<()> {
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        writeln!(output, "{}", handle_line(backend, &line))?;
        output.flush()?;
    }
    Ok(())
}

/// A line-oriented request/response channel.
pub trait Transport: Send {
    fn exchange(&mut self, request: &str) -> Result<String>;
}

/// A server child process spoken to over stdin/stdout.
pub struct ProcessTransport {
    child: Child,
    stdin: BufWriter<ChildStdin>,
    stdout: BufReader<ChildStdout>,
}

impl ProcessTransport {
    pub fn spawn(command: &[String]) -> Result<Self> {
        let (program, args) = command
            .split_first()
            .ok_or_else(|| Error::Config("bridge command is empty".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?;
        let stdin = BufWriter::new(child.stdin.take().expect("piped stdin"));
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(Self { child, stdin, stdout })
    }
}

impl Transport for ProcessTransport {
    fn exchange(&mut self, request: &str) -> Result<String> {
        writeln!(self.stdin, "{request}")?;
        self.stdin.flush()?;
        let mut line = String::new();
        if self.stdout.read_line(&mut line)? == 0 {
            return Err(Error::Bridge {
                code: "closed".into(),
                message: "server closed its output".into(),
            });
        }
        Ok(line)
    }
}

impl Drop for ProcessTransport {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Calls an in-process backend through the wire format.
pub struct Loopback<B>(pub B);

impl<B: Backend> Transport for Loopback<B> {
    fn exchange(&mut self, request: &str) -> Result<String> {
        Ok(handle_line(&self.0, request))
    }
}

struct ClientState {
    transport: Box<dyn Transport>,
    next_id: u64,
}

/// A [`Backend`] whose forward passes run on an `hlb/1` server.
pub struct BridgeBackend {
    state: Mutex<ClientState>,
    descriptor: ModelDescriptor,
    logits: LogitsWant,
}

impl BridgeBackend {
    /// Connects and learns the model descriptor with a one-token probe.
    pub fn new(transport: Box<dyn Transport>, logits: LogitsWant) -> Result<Self> {
        let mut state = ClientState { transport, next_id: 0 };
        let want = Want {
            attn_rows: HeadSelection::List(Vec::new()),
            hidden: false,
            logits: LogitsWant::Top(1),
        };
        let first = call(&mut state, &BridgeRequest::forward(0, &[0], &Intervention::none(), want))?;
        Ok(Self {
            state: Mutex::new(state),
            descriptor: first.descriptor,
            logits,
        })
    }

    pub fn spawn(command: &[String]) -> Result<Self> {
        Self::new(Box::new(ProcessTransport::spawn(command)?), LogitsWant::Full)
    }
}

fn call(state: &mut ClientState, req: &BridgeRequest) -> Result<ForwardResult> {
    let mut req = req.clone();
    req.id = state.next_id;
    state.next_id += 1;
    let line = state.transport.exchange(&serde_json::to_string(&req)?)?;
    let resp: BridgeResponse = serde_json::from_str(line.trim_end()).map_err(|e| Error::Bridge {
        code: "bad_response".into(),
        message: e.to_string(),
    })?;
    if resp.protocol != PROTOCOL {
        return Err(Error::Version {
            found: resp.protocol,
            expected: PROTOCOL.into(),
        });
    }
    if resp.id != Some(req.id) {
        return Err(Error::Bridge {
            code: "bad_response".into(),
            message: format!("response id {:?} for request {}", resp.id, req.id),
        });
    }
    match resp.body {
        ResponseBody::Ok(r) => Ok(r),
        ResponseBody::Error(e) => Err(Error::Bridge {
            code: e.code,
            message: e.message,
        }),
    }
}

impl Backend for BridgeBackend {
    fn descriptor(&self) -> ModelDescriptor {
        self.descriptor
    }

    fn forward(&self, tokens: &[u32], intervention: &Intervention) -> Result<StepOutput> {
        let want = Want {
            attn_rows: HeadSelection::All(AllHeads::All),
            hidden: true,
            logits: self.logits,
        };
        let req = BridgeRequest::forward(0, tokens, intervention, want);
        let r = {
            let mut state = self.state.lock().map_err(|_| Error::Bridge {
                code: "poisoned".into(),
                message: "bridge client lock poisoned".into(),
            })?;
            call(&mut state, &req)?
        };
        let vocab = self.descriptor.vocab_size;
        let logits = match r.logits {
            Logits::Full(v) => v,
            Logits::Top(top) => {
                let mut v = vec![f32::NEG_INFINITY; vocab];
                for (i, x) in top {
                    if let Some(slot) = v.get_mut(i as usize) {
                        *slot = x;
                    }
                }
                v
            }
        };
        let layout = self.descriptor.layout();
        if r.attn_rows.len() != layout.total() {
            return Err(Error::Bridge {
                code: "bad_response".into(),
                message: format!("{} attention rows for {} heads", r.attn_rows.len(), layout.total()),
            });
        }
        let mut attn_rows = vec![Vec::new(); layout.total()];
        for row in r.attn_rows {
            let h = HeadId::new(row.head.0, row.head.1);
            if !layout.contains(h) {
                return Err(Error::Bridge {
                    code: "bad_response".into(),
                    message: format!("row for unknown head {h}"),
                });
            }
            attn_rows[layout.index(h)] = row.row;
        }
        let predicted_token = argmax(&logits).ok_or(Error::Empty("logits"))? as u32;
        Ok(StepOutput {
            logits,
            attn_rows,
            final_hidden: r.hidden.unwrap_or_default(),
            predicted_token,
            degenerate: r.degenerate,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_induction_model;

    fn model() -> crate::Model {
        build_induction_model(16, 2).unwrap()
    }

    #[test]
    fn loopback_matches_in_process() {
        let m = model();
        let bridge = BridgeBackend::new(Box::new(Loopback(m.clone())), LogitsWant::Full).unwrap();
        assert_eq!(bridge.descriptor(), m.descriptor());
        let toks = [3, 9, 4, 3];
        let iv = Intervention::mask([HeadId::new(1, 0)]).with_visible([0, 2, 3]);
        assert_eq!(bridge.forward(&toks, &iv).unwrap(), m.forward(&toks, &iv).unwrap());
    }

    #[test]
    fn masked_rows_are_flagged() {
        let m = model();
        let layer0: Vec<(usize, usize)> = (0..m.config().n_heads_per_layer).map(|h| (0, h)).collect();
        let req = BridgeRequest {
            masked_heads: layer0.clone(),
            ..BridgeRequest::forward(5, &[1, 2, 3], &Intervention::none(), Want::default())
        };
        let resp = handle_request(&m, &req);
        assert_eq!(resp.id, Some(5));
        let ResponseBody::Ok(r) = resp.body else { panic!("error response") };
        for row in &r.attn_rows {
            assert_eq!(row.masked, row.head.0 == 0);
        }
        let Logits::Top(top) = r.logits else { panic!("expected top logits") };
        assert_eq!(top.len(), 16);
    }

    #[test]
    fn errors_are_structured() {
        let m = model();
        let bad = handle_line(&m, "{not json");
        let v: serde_json::Value = serde_json::from_str(&bad).unwrap();
        assert_eq!(v["error"]["code"], "bad_request");
        assert!(v["id"].is_null());
        let req = BridgeRequest::forward(1, &[1, 2], &Intervention::mask([HeadId::new(7, 0)]), Want::default());
        let v: serde_json::Value = serde_json::from_str(&handle_line(&m, &serde_json::to_string(&req).unwrap())).unwrap();
        assert_eq!(v["error"]["code"], "bad_intervention");
        assert_eq!(v["id"], 1);
        let mut old = req.clone();
        old.protocol = "hlb/0".into();
        assert!(matches!(handle_request(&m, &old).body, ResponseBody::Error(ref e) if e.code == "version"));
    }

    #[test]
    fn serve_lines_answers_every_line() {
        let m = model();
        let req = serde_json::to_string(&BridgeRequest::forward(2, &[1], &Intervention::none(), Want::default())).unwrap();
        let input = format!("{req}\n\ngarbage\n{req}\n");
        let mut out = Vec::new();
        serve_lines(&m, input.as_bytes(), &mut out).unwrap();
        let lines: Vec<&str> = std::str::from_utf8(&out).unwrap().lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], lines[2]);
    }

    #[test]
    fn request_wire_shape() {
        let req = BridgeRequest::forward(3, &[1, 2], &Intervention::mask([HeadId::new(0, 1)]).with_visible([1]), Want::default());
        let v = serde_json::to_value(&req).unwrap();
        assert_eq!(
            v,
            serde_json::json!({
                "protocol": "hlb/1", "id": 3, "type": "forward", "tokens": [1, 2],
                "masked_heads": [[0, 1]], "visible_positions": [1],
                "want": {"attn_rows": "all", "hidden": true, "logits": {"top": 32}}
            })
        );
    }
}
