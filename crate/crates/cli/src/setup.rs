//! Shared setup: config, backend, task and trace corpus for every subcommand.

use std::path::{Path, PathBuf};

use anyhow::{Context as _, Result};
use headlamp::ablation::{AblationTask, MiniNiahTask, TaskInstance, TextNiahTask};
use headlamp::bridge::BridgeBackend;
use headlamp::dynamism::{rank_static, StaticRanking};
use headlamp::model::generate;
use headlamp::score::HeadScoreFrame;
use headlamp::store::{
    read_trace_file, resolve_out_dir, write_trace_file, ExportMeta, ModelSource, RowFormat, RunConfig, StoredTrace,
    TaskKind, TraceHeader,
};
use headlamp::task::{self, MetricKind, MultiHopSample, MINI_PROMPT_SUFFIX};
use headlamp::tokenizer::{Tokenizer, WordVocab};
use headlamp::{seed, Backend, Error, Intervention};

pub const TRACES_FILE: &str = "traces.jsonl";

pub struct Ctx {
    pub cfg: RunConfig,
    pub hash: String,
    pub out: PathBuf,
    pub backend: Box<dyn Backend>,
    pub tokenizer: Tokenizer,
    pub task: Box<dyn AblationTask>,
    in_process: bool,
}

impl Ctx {
    pub fn new(config: &Path, seed_override: Option<u64>, out: Option<PathBuf>) -> Result<Self> {
        let mut cfg = RunConfig::load(config)?;
        if let Some(s) = seed_override {
            cfg.seed = s;
        }
        let hash = cfg.hash();
        let out = resolve_out_dir(out);
        std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        let (backend, in_process): (Box<dyn Backend>, bool) = match cfg.model.in_process(cfg.seed)? {
            Some(m) => (Box::new(m), true),
            None => {
                let ModelSource::Bridge(b) = &cfg.model else { unreachable!("only the bridge is out of process") };
                (Box::new(BridgeBackend::spawn(&b.command)?), false)
            }
        };
        let tokenizer = match cfg.task.kind {
            TaskKind::MiniNiah => Tokenizer::Words(WordVocab::toy()),
            _ => Tokenizer::Bytes,
        };
        let vocab = backend.descriptor().vocab_size;
        if tokenizer.vocab_size() > vocab {
            return Err(Error::Config(format!(
                "task needs a vocabulary of {} tokens, the model has {vocab}",
                tokenizer.vocab_size()
            ))
            .into());
        }
        let task = build_task(&cfg, &tokenizer)?;
        Ok(Self {
            cfg,
            hash,
            out,
            backend,
            tokenizer,
            task,
            in_process,
        })
    }

    pub fn meta(&self) -> ExportMeta {
        ExportMeta::new(self.hash.clone(), self.cfg.seed)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    pub fn model_name(&self) -> &'static str {
        match self.cfg.model {
            ModelSource::Induction { .. } => "induction",
            ModelSource::Random { .. } => "random",
            ModelSource::Weights { .. } => "weights",
            ModelSource::Bridge(_) => "bridge",
        }
    }

    /// Seed of sample `run` in cell (`li`, `di`); shared with the ablation grid.
    pub fn sample_seed(&self, li: usize, di: usize, run: usize) -> u64 {
        seed::derive_seed(self.cfg.seed, &[li as u64, di as u64, run as u64])
    }

    /// Unablated generations for every (length, depth, sample) cell.
    pub fn generate_traces(&self) -> Result<Vec<StoredTrace>> {
        let t = &self.cfg.task;
        let max_context = self.backend.descriptor().max_context;
        let mut out = Vec::new();
        for (li, &len) in t.lengths.iter().enumerate() {
            for (di, &depth) in t.depths.iter().enumerate() {
                for run in 0..t.samples {
                    let s = self.sample_seed(li, di, run);
                    let inst = self.task.instance(len, depth, s)?;
                    if inst.prompt.len() >= max_context {
                        log::warn!("skipping length {len}: prompt of {} tokens does not fit", inst.prompt.len());
                        continue;
                    }
                    let mut trace = generate(self.backend.as_ref(), &inst.prompt, inst.max_new, |_, _| Intervention::none())?;
                    trace.sample_id = format!("len{len}-depth{depth}-run{run}");
                    trace.seed = s;
                    out.push(StoredTrace {
                        trace,
                        needle: inst.needle,
                    });
                }
            }
        }
        if out.is_empty() {
            return Err(Error::Config("no task prompt fits the model's context window".into()).into());
        }
        Ok(out)
    }

    pub fn write_traces(&self, traces: &[StoredTrace]) -> Result<PathBuf> {
        let rows = if self.in_process { RowFormat::Full } else { RowFormat::default() };
        let path = self.path(TRACES_FILE);
        write_trace_file(&path, &TraceHeader::new(self.hash.clone(), self.cfg.seed, rows), traces, Some(&self.tokenizer))?;
        Ok(path)
    }

    /// Reuses `traces.jsonl` when it was written under the same config and
    /// seed, otherwise generates and writes a fresh corpus.
    pub fn traces(&self) -> Result<Vec<StoredTrace>> {
        let path = self.path(TRACES_FILE);
        if path.exists() {
            let (header, traces) = read_trace_file(&path)?;
            if header.config_hash == self.hash && header.seed == self.cfg.seed {
                log::info!("reusing {}", path.display());
                return Ok(traces);
            }
        }
        let traces = self.generate_traces()?;
        self.write_traces(&traces)?;
        Ok(traces)
    }

    pub fn frames(&self, traces: &[StoredTrace]) -> Result<Vec<Vec<HeadScoreFrame>>> {
        let layout = self.backend.layout();
        traces
            .iter()
            .map(|st| {
                st.trace
                    .steps
                    .iter()
                    .enumerate()
                    .map(|(t, step)| {
                        self.cfg
                            .scoring
                            .frame(t, &step.output, &st.trace.input_at(t), &st.needle, layout)
                            .map_err(Into::into)
                    })
                    .collect()
            })
            .collect()
    }

    pub fn static_ranking(&self, frames: &[Vec<HeadScoreFrame>]) -> Result<StaticRanking> {
        Ok(rank_static(frames.iter().flatten(), format!("{:?}", self.cfg.task.kind))?)
    }
}

fn build_task(cfg: &RunConfig, tokenizer: &Tokenizer) -> Result<Box<dyn AblationTask>> {
    let t = &cfg.task;
    Ok(match t.kind {
        TaskKind::MiniNiah => Box::new(MiniNiahTask::new(t.max_new)),
        TaskKind::TextNiah => {
            let corpus = match &t.corpus {
                Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
                None => task::DEFAULT_HAYSTACK.to_string(),
            };
            Box::new(TextNiahTask {
                tokenizer: tokenizer.clone(),
                corpus,
                metric: t.metric.unwrap_or(MetricKind::AccuracyContains),
                max_new: t.max_new,
            })
        }
        TaskKind::Multihop => Box::new(QaTask {
            samples: None,
            tokenizer: tokenizer.clone(),
            metric: t.metric.unwrap_or(MetricKind::F1),
            max_new: t.max_new,
        }),
        TaskKind::Hotpotqa => {
            let path = t.hotpotqa.as_ref().expect("validated");
            let load = task::load_hotpotqa(path, tokenizer)?;
            if load.skipped > 0 {
                log::warn!("skipped {} HotpotQA records with unmappable facts", load.skipped);
            }
            if load.samples.is_empty() {
                return Err(Error::Config(format!("{} holds no usable records", path.display())).into());
            }
            Box::new(QaTask {
                samples: Some(load.samples),
                tokenizer: tokenizer.clone(),
                metric: t.metric.unwrap_or(MetricKind::F1),
                max_new: t.max_new,
            })
        }
    })
}

const QA_QUESTION_PREFIX: &str = "\n\nQuestion: ";
const QA_ANSWER_PREFIX: &str = "\nAnswer:";

/// Multi-hop QA: the context comes first, so its fact spans are prompt indices.
struct QaTask {
    /// Fixed records; `None` generates synthetic samples from the seed.
    samples: Option<Vec<MultiHopSample>>,
    tokenizer: Tokenizer,
    metric: MetricKind,
    max_new: usize,
}

impl QaTask {
    fn sample(&self, seed: u64) -> headlamp::Result<MultiHopSample> {
        match &self.samples {
            Some(s) => Ok(s[(seed % s.len() as u64) as usize].clone()),
            None => task::make_multihop(&self.tokenizer, seed),
        }
    }
}

impl AblationTask for QaTask {
    fn metric(&self) -> MetricKind {
        self.metric
    }

    fn instance(&self, _length: usize, _depth: f64, seed: u64) -> headlamp::Result<TaskInstance> {
        let s = self.sample(seed)?;
        let mut prompt = self.tokenizer.encode(&s.context)?;
        prompt.extend(self.tokenizer.encode(&format!("{QA_QUESTION_PREFIX}{}{QA_ANSWER_PREFIX}", s.question))?);
        Ok(TaskInstance {
            needle: s.needle_indices(),
            prompt,
            max_new: self.max_new,
            gold: s.answer,
        })
    }

    fn evaluate(&self, instance: &TaskInstance, generated: &[u32]) -> f64 {
        task::score(&self.tokenizer.decode(generated), &instance.gold, self.metric).value
    }
}

/// A question split into the maskable context and the always-visible question.
pub struct QaItem {
    pub context: Vec<u32>,
    pub question: Vec<u32>,
    pub gold: String,
}

/// Splits a task prompt at the start of its question part.
pub fn qa_item(ctx: &Ctx, inst: TaskInstance) -> Result<QaItem> {
    let split = match ctx.cfg.task.kind {
        TaskKind::MiniNiah => inst.prompt.len() - MINI_PROMPT_SUFFIX.split_whitespace().count(),
        TaskKind::TextNiah => {
            let text = ctx.tokenizer.decode(&inst.prompt);
            text.rfind("\n\nQuestion:")
                .ok_or_else(|| Error::Task("prompt has no question section".into()))?
        }
        TaskKind::Multihop | TaskKind::Hotpotqa => {
            let text = ctx.tokenizer.decode(&inst.prompt);
            text.rfind(QA_QUESTION_PREFIX)
                .ok_or_else(|| Error::Task("prompt has no question section".into()))?
        }
    };
    Ok(QaItem {
        context: inst.prompt[..split].to_vec(),
        question: inst.prompt[split..].to_vec(),
        gold: inst.gold,
    })
}
