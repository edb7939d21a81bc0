//! Causal head-ablation studies.
//!
//! Every generation step runs twice. Pass 1 is unintervened and only serves
//! to identify the step's dynamic head set H_t; its token is discarded. Pass 2
//! masks a condition-dependent head set and its greedy token is accepted.
//! Static and random conditions mask as many heads as the causal running mean
//! of |H_t| within the sample.
//!
//! The progressive study masks the k strongest members of H_t, recomputes the
//! dynamic set under the mask (H'_t), and tracks the compensated heads
//! E_t = H'_t \ H_t against the static top-20.

use std::collections::BTreeSet;
use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dynamism::STATIC_TOP;
use crate::model::{Backend, HeadId, Intervention, StepOutput};
use crate::score::{needle_mass, DynamicHeadSet, HeadScoreFrame, Scoring, SpanSet};
use crate::task::{self, MetricKind, MiniNiahSample};
use crate::tokenizer::{Tokenizer, WordVocab};
use crate::{seed, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationCondition {
    /// Unintervened reference: pass 2 is never run.
    None,
    Dynamic,
    StaticTop,
    Random,
}

impl AblationCondition {
    pub const ALL: [AblationCondition; 4] = [Self::None, Self::Dynamic, Self::StaticTop, Self::Random];

    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Dynamic => "dynamic",
            Self::StaticTop => "static_top",
            Self::Random => "random",
        }
    }
}

/// Causal running mean of dynamic-set sizes within one sample.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CountMatcher {
    total: usize,
    steps: usize,
    any_active: bool,
}

impl CountMatcher {
    /// Records this step's |H_t| and returns the matched mask size.
    pub fn observe(&mut self, size: usize) -> usize {
        self.total += size;
        self.steps += 1;
        self.any_active |= size > 0;
        let n = (self.total as f64 / self.steps as f64).round() as usize;
        if self.any_active {
            n.max(1)
        } else {
            n
        }
    }
}

/// Per-sample state carried across steps.
#[derive(Debug, Clone)]
pub struct SampleState {
    pub matcher: CountMatcher,
    /// Random condition: a fixed permutation of all heads; the first n are masked.
    pub random_order: Vec<HeadId>,
}

impl SampleState {
    pub fn new(backend: &dyn Backend, seed: u64) -> Self {
        let mut random_order: Vec<HeadId> = backend.layout().heads().collect();
        random_order.shuffle(&mut seed::rng(seed));
        Self {
            matcher: CountMatcher::default(),
            random_order,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationStep {
    pub step: usize,
    pub pass1: StepOutput,
    pub frame: HeadScoreFrame,
    pub dynamic: DynamicHeadSet,
    /// Mask size the running mean called for (static and random conditions).
    pub matched_count: usize,
    pub masked: BTreeSet<HeadId>,
    /// Absent when nothing was masked.
    pub pass2: Option<StepOutput>,
    pub token: u32,
}

impl AblationStep {
    pub fn accepted_output(&self) -> &StepOutput {
        self.pass2.as_ref().unwrap_or(&self.pass1)
    }
}

/// One two-pass step on `prefix`.
#[allow(clippy::too_many_arguments)]
pub fn ablate_step(
    backend: &dyn Backend,
    step: usize,
    prefix: &[u32],
    needle: &BTreeSet<usize>,
    scoring: &Scoring,
    condition: AblationCondition,
    static_order: &[HeadId],
    state: &mut SampleState,
) -> Result<AblationStep> {
    let layout = backend.layout();
    let pass1 = backend.forward(prefix, &Intervention::none())?;
    let frame = scoring.frame(step, &pass1, prefix, needle, layout)?;
    let dynamic = scoring.dynamic_heads(&frame);
    let matched_count = state.matcher.observe(dynamic.heads.len());
    let masked: BTreeSet<HeadId> = match condition {
        AblationCondition::None => BTreeSet::new(),
        AblationCondition::Dynamic => dynamic.heads.clone(),
        AblationCondition::StaticTop => static_order.iter().take(matched_count).copied().collect(),
        AblationCondition::Random => state.random_order.iter().take(matched_count).copied().collect(),
    };
    let pass2 = if masked.is_empty() {
        None
    } else {
        Some(backend.forward(prefix, &Intervention::mask(masked.iter().copied()))?)
    };
    let token = pass2.as_ref().unwrap_or(&pass1).predicted_token;
    Ok(AblationStep {
        step,
        pass1,
        frame,
        dynamic,
        matched_count,
        masked,
        pass2,
        token,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSample {
    pub condition: AblationCondition,
    pub seed: u64,
    pub steps: Vec<AblationStep>,
    pub generated: Vec<u32>,
    /// Generation stopped because the context window was full.
    pub overflow: bool,
}

/// Generates up to `max_new` tokens under the two-pass protocol.
#[allow(clippy::too_many_arguments)]
pub fn run_sample(
    backend: &dyn Backend,
    prompt: &[u32],
    needle: &BTreeSet<usize>,
    max_new: usize,
    scoring: &Scoring,
    condition: AblationCondition,
    static_order: &[HeadId],
    seed: u64,
) -> Result<AblationSample> {
    let desc = backend.descriptor();
    if prompt.is_empty() || prompt.len() > desc.max_context {
        return Err(Error::ContextOverflow {
            len: prompt.len(),
            max: desc.max_context,
        });
    }
    let mut state = SampleState::new(backend, seed);
    let mut tokens = prompt.to_vec();
    let mut out = AblationSample {
        condition,
        seed,
        steps: Vec::with_capacity(max_new),
        generated: Vec::with_capacity(max_new),
        overflow: false,
    };
    for t in 0..max_new {
        if tokens.len() > desc.max_context {
            out.overflow = true;
            break;
        }
        let step = ablate_step(backend, t, &tokens, needle, scoring, condition, static_order, &mut state)?;
        let token = step.token;
        out.steps.push(step);
        out.generated.push(token);
        tokens.push(token);
        if desc.eos_token == Some(token) {
            break;
        }
    }
    Ok(out)
}

/// A task instance fed to the ablation runners.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskInstance {
    pub prompt: Vec<u32>,
    pub needle: BTreeSet<usize>,
    pub max_new: usize,
    pub gold: String,
}

/// Builds prompts for grid cells and scores generations.
pub trait AblationTask {
    fn metric(&self) -> MetricKind;
    fn instance(&self, length: usize, depth: f64, seed: u64) -> Result<TaskInstance>;
    fn evaluate(&self, instance: &TaskInstance, generated: &[u32]) -> f64;
}

/// The toy-vocabulary needle task for the induction model. `length` is the
/// haystack length in tokens.
#[derive(Debug, Clone)]
pub struct MiniNiahTask {
    pub max_new: usize,
    vocab: WordVocab,
}

impl MiniNiahTask {
    pub fn new(max_new: usize) -> Self {
        Self {
            max_new,
            vocab: WordVocab::toy(),
        }
    }
}

impl Default for MiniNiahTask {
    fn default() -> Self {
        Self::new(6)
    }
}

impl AblationTask for MiniNiahTask {
    fn metric(&self) -> MetricKind {
        MetricKind::AccuracyContains
    }

    fn instance(&self, length: usize, depth: f64, seed: u64) -> Result<TaskInstance> {
        let s: MiniNiahSample = task::make_mini_niah(length, depth, seed)?;
        Ok(TaskInstance {
            needle: s.needle_span.clone().collect(),
            gold: s.gold_text(&self.vocab),
            prompt: s.tokens,
            max_new: self.max_new,
        })
    }

    fn evaluate(&self, instance: &TaskInstance, generated: &[u32]) -> f64 {
        let text = Tokenizer::Words(self.vocab.clone()).decode(generated);
        task::score(&text, &instance.gold, self.metric()).value
    }
}

/// UUID needle task on a text model. `length` is the prompt length in tokens.
#[derive(Debug, Clone)]
pub struct TextNiahTask {
    pub tokenizer: Tokenizer,
    pub corpus: String,
    pub metric: MetricKind,
    pub max_new: usize,
}

impl AblationTask for TextNiahTask {
    fn metric(&self) -> MetricKind {
        self.metric
    }

    fn instance(&self, length: usize, depth: f64, seed: u64) -> Result<TaskInstance> {
        let s = task::make_niah(&self.corpus, &self.tokenizer, length, depth, seed)?;
        Ok(TaskInstance {
            needle: s.needle_span.clone().collect(),
            gold: s.uuid,
            prompt: s.tokens,
            max_new: self.max_new,
        })
    }

    fn evaluate(&self, instance: &TaskInstance, generated: &[u32]) -> f64 {
        task::score(&self.tokenizer.decode(generated), &instance.gold, self.metric).value
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lengths: Vec<usize>,
    pub depths: Vec<f64>,
    pub runs_per_cell: usize,
    pub master_seed: u64,
}

impl GridSpec {
    /// Seed of run `run` in cell (`li`, `di`).
    pub fn run_seed(&self, li: usize, di: usize, run: usize) -> u64 {
        seed::derive_seed(self.master_seed, &[li as u64, di as u64, run as u64])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub length: usize,
    pub depth: f64,
    /// `None` when the cell could not be built.
    pub mean: Option<f64>,
    pub runs: usize,
    /// Mean number of heads masked per step.
    pub mean_masked: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationGridResult {
    pub condition: AblationCondition,
    pub metric: MetricKind,
    pub lengths: Vec<usize>,
    pub depths: Vec<f64>,
    /// Row-major over (length, depth).
    pub cells: Vec<GridCell>,
}

impl AblationGridResult {
    pub fn cell(&self, li: usize, di: usize) -> &GridCell {
        &self.cells[li * self.depths.len() + di]
    }

    /// Mean over all feasible cells, weighted by run count.
    pub fn overall_mean(&self) -> Option<f64> {
        let (sum, n) = self
            .cells
            .iter()
            .filter_map(|c| c.mean.map(|m| (m * c.runs as f64, c.runs)))
            .fold((0.0, 0), |(s, n), (m, r)| (s + m, n + r));
        (n > 0).then(|| sum / n as f64)
    }

    /// lengths × depths matrix of cell means; empty fields mark infeasible cells.
    pub fn write_matrix<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["length".to_string()];
        header.extend(self.depths.iter().map(|d| d.to_string()));
        w.write_record(&header)?;
        for (li, len) in self.lengths.iter().enumerate() {
            let mut row = vec![len.to_string()];
            row.extend((0..self.depths.len()).map(|di| self.cell(li, di).mean.map(|m| m.to_string()).unwrap_or_default()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// One row per cell with run counts, for sample-weighted rendering.
    pub fn write_cells<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["condition", "metric", "length", "depth", "mean", "runs", "mean_masked", "error"])?;
        let metric = serde_json::to_value(self.metric)?;
        for c in &self.cells {
            w.write_record([
                self.condition.name().to_string(),
                metric.as_str().unwrap_or_default().to_string(),
                c.length.to_string(),
                c.depth.to_string(),
                c.mean.map(|m| m.to_string()).unwrap_or_default(),
                c.runs.to_string(),
                c.mean_masked.to_string(),
                c.error.clone().unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Mean task metric per (length, depth) cell under `condition`.
pub fn run_grid(
    backend: &dyn Backend,
    task: &dyn AblationTask,
    spec: &GridSpec,
    scoring: &Scoring,
    condition: AblationCondition,
    static_order: &[HeadId],
) -> Result<AblationGridResult> {
    if spec.runs_per_cell == 0 {
        return Err(Error::Config("runs_per_cell must be positive".into()));
    }
    let mut cells = Vec::with_capacity(spec.lengths.len() * spec.depths.len());
    for (li, &length) in spec.lengths.iter().enumerate() {
        for (di, &depth) in spec.depths.iter().enumerate() {
            let mut total = 0.0;
            let mut masked = 0usize;
            let mut steps = 0usize;
            let mut error = None;
            for run in 0..spec.runs_per_cell {
                let seed = spec.run_seed(li, di, run);
                let inst = match task.instance(length, depth, seed) {
                    Ok(i) if i.prompt.len() <= backend.descriptor().max_context => i,
                    Ok(i) => {
                        error = Some(format!("prompt of {} tokens exceeds the context window", i.prompt.len()));
                        break;
                    }
                    Err(e) => {
                        error = Some(e.to_string());
                        break;
                    }
                };
                let sample = run_sample(backend, &inst.prompt, &inst.needle, inst.max_new, scoring, condition, static_order, seed)?;
                total += task.evaluate(&inst, &sample.generated);
                masked += sample.steps.iter().map(|s| s.masked.len()).sum::<usize>();
                steps += sample.steps.len();
            }
            cells.push(GridCell {
                length,
                depth,
                mean: error.is_none().then(|| total / spec.runs_per_cell as f64),
                runs: if error.is_none() { spec.runs_per_cell } else { 0 },
                mean_masked: if steps > 0 { masked as f64 / steps as f64 } else { 0.0 },
                error,
            });
        }
    }
    Ok(AblationGridResult {
        condition,
        metric: task.metric(),
        lengths: spec.lengths.clone(),
        depths: spec.depths.clone(),
        cells,
    })
}

/// Orders a dynamic set by attention mass on the needle, strongest first;
/// ties by (layer, head).
pub fn rank_dynamic(
    heads: &BTreeSet<HeadId>,
    output: &StepOutput,
    needle: &BTreeSet<usize>,
    layout: crate::HeadLayout,
) -> Vec<HeadId> {
    let spans = SpanSet::needle_only(needle.iter().copied());
    let mut ranked: Vec<(HeadId, f64)> = heads
        .iter()
        .map(|&h| (h, needle_mass(output.row(layout, h), &spans)))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.into_iter().map(|(h, _)| h).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressiveStep {
    pub step: usize,
    pub dynamic: BTreeSet<HeadId>,
    pub masked: BTreeSet<HeadId>,
    /// Dynamic set recomputed under the mask.
    pub dynamic_after: BTreeSet<HeadId>,
    pub compensated: BTreeSet<HeadId>,
    pub token: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressiveSample {
    pub k: usize,
    pub run: usize,
    pub seed: u64,
    pub steps: Vec<ProgressiveStep>,
    pub generated: Vec<u32>,
    pub metric: f64,
    /// max over steps of |E_t ∩ static top|.
    pub m: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressiveRow {
    pub k: usize,
    pub mean_metric: f64,
    pub mean_m: f64,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressiveResult {
    pub metric: MetricKind,
    pub static_top: BTreeSet<HeadId>,
    pub rows: Vec<ProgressiveRow>,
    pub samples: Vec<ProgressiveSample>,
}

impl ProgressiveResult {
    /// k, mean metric and mean m, for a dual-axis curve.
    pub fn write_curve<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["k", "mean_metric", "mean_m", "runs"])?;
        for r in &self.rows {
            w.write_record([r.k.to_string(), r.mean_metric.to_string(), r.mean_m.to_string(), r.runs.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressiveSpec {
    pub k_values: Vec<usize>,
    pub runs: usize,
    pub length: usize,
    pub depths: Vec<f64>,
    pub master_seed: u64,
}

/// |E ∩ top| maximised over the steps of a sample.
pub fn max_compensated(steps: &[ProgressiveStep], static_top: &BTreeSet<HeadId>) -> usize {
    steps
        .iter()
        .map(|s| s.compensated.intersection(static_top).count())
        .max()
        .unwrap_or(0)
}

/// Masks the top-k members of each step's dynamic set and records compensation.
pub fn progressive_run(
    backend: &dyn Backend,
    task: &dyn AblationTask,
    spec: &ProgressiveSpec,
    scoring: &Scoring,
    static_ranking: &[HeadId],
) -> Result<ProgressiveResult> {
    let total = backend.layout().total();
    if spec.k_values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("k values must be strictly ascending".into()));
    }
    if spec.k_values.last().is_some_and(|&k| k > total) {
        return Err(Error::Config(format!("k exceeds the {total} heads of the model")));
    }
    if spec.runs == 0 || spec.depths.is_empty() {
        return Err(Error::Config("progressive study needs runs and depths".into()));
    }
    let static_top: BTreeSet<HeadId> = static_ranking.iter().take(STATIC_TOP).copied().collect();
    let mut rows = Vec::new();
    let mut samples = Vec::new();
    for &k in &spec.k_values {
        let (mut metric_sum, mut m_sum) = (0.0, 0usize);
        for run in 0..spec.runs {
            let seed = seed::derive_seed(spec.master_seed, &[run as u64]);
            let depth = spec.depths[run % spec.depths.len()];
            let inst = task.instance(spec.length, depth, seed)?;
            let (steps, generated) = progressive_sample(backend, &inst, k, scoring)?;
            let metric = task.evaluate(&inst, &generated);
            let m = max_compensated(&steps, &static_top);
            metric_sum += metric;
            m_sum += m;
            samples.push(ProgressiveSample { k, run, seed, steps, generated, metric, m });
        }
        rows.push(ProgressiveRow {
            k,
            mean_metric: metric_sum / spec.runs as f64,
            mean_m: m_sum as f64 / spec.runs as f64,
            runs: spec.runs,
        });
    }
    Ok(ProgressiveResult {
        metric: task.metric(),
        static_top,
        rows,
        samples,
    })
}

fn progressive_sample(
    backend: &dyn Backend,
    inst: &TaskInstance,
    k: usize,
    scoring: &Scoring,
) -> Result<(Vec<ProgressiveStep>, Vec<u32>)> {
    let desc = backend.descriptor();
    let layout = backend.layout();
    let mut tokens = inst.prompt.clone();
    let mut steps = Vec::with_capacity(inst.max_new);
    let mut generated = Vec::with_capacity(inst.max_new);
    for t in 0..inst.max_new {
        if tokens.len() > desc.max_context {
            break;
        }
        let pass1 = backend.forward(&tokens, &Intervention::none())?;
        let frame = scoring.frame(t, &pass1, &tokens, &inst.needle, layout)?;
        let dynamic = scoring.dynamic_heads(&frame).heads;
        let masked: BTreeSet<HeadId> = rank_dynamic(&dynamic, &pass1, &inst.needle, layout).into_iter().take(k).collect();
        let (token, dynamic_after) = if masked.is_empty() {
            (pass1.predicted_token, dynamic.clone())
        } else {
            let pass2 = backend.forward(&tokens, &Intervention::mask(masked.iter().copied()))?;
            let frame2 = scoring.frame(t, &pass2, &tokens, &inst.needle, layout)?;
            (pass2.predicted_token, scoring.dynamic_heads(&frame2).heads)
        };
        let compensated = dynamic_after.difference(&dynamic).copied().collect();
        steps.push(ProgressiveStep {
            step: t,
            dynamic,
            masked,
            dynamic_after,
            compensated,
            token,
        });
        generated.push(token);
        tokens.push(token);
        if desc.eos_token == Some(token) {
            break;
        }
    }
    Ok((steps, generated))
}
