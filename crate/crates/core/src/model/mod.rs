//! Instrumented decoder-only transformer.
//!
//! Two builders are provided: [`build_model`] produces a seeded random model
//! (optionally with MLP blocks), and [`build_induction_model`] produces a
//! two-layer attention-only model whose weights are set analytically so that
//! one layer-1 head performs induction copying.
//!
//! Every forward pass reports the final query row of attention for every head,
//! the final hidden state and the logits. Interventions can zero a head's
//! output before the output projection and hide token positions from all
//! heads.

mod generate;
mod induction;
mod transformer;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use generate::{generate, GenerationTrace, TraceStep};
pub use induction::{build_induction_model, build_induction_model_with, InductionSpec};
pub use transformer::{build_model, LayerWeights, MlpWeights, Model, ModelMeta};

/// Positional encoding scheme. Only fixed sinusoidal absolute encodings are supported.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositionalScheme {
    #[default]
    SinusoidalAbsolute,
}

fn default_positional_base() -> f64 {
    10_000.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads_per_layer: usize,
    pub head_dim: usize,
    pub max_context: usize,
    #[serde(default)]
    pub positional_scheme: PositionalScheme,
    /// Width of the sinusoidal band, placed at the tail of the residual
    /// stream. `None` spans the whole residual stream.
    #[serde(default)]
    pub positional_dims: Option<usize>,
    #[serde(default = "default_positional_base")]
    pub positional_base: f64,
    /// Hidden width of the per-layer MLP; 0 means attention-only.
    #[serde(default)]
    pub mlp_dim: usize,
    #[serde(default)]
    pub eos_token: Option<u32>,
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.vocab_size < 2 {
            return fail(format!("vocab_size must be >= 2, got {}", self.vocab_size));
        }
        if self.max_context < 2 {
            return fail(format!("max_context must be >= 2, got {}", self.max_context));
        }
        if self.n_layers == 0 || self.n_heads_per_layer == 0 || self.head_dim == 0 {
            return fail("n_layers, n_heads_per_layer and head_dim must be positive".into());
        }
        if self.d_model != self.n_heads_per_layer * self.head_dim {
            return fail(format!(
                "d_model ({}) must equal n_heads_per_layer ({}) x head_dim ({})",
                self.d_model, self.n_heads_per_layer, self.head_dim
            ));
        }
        if let Some(w) = self.positional_dims {
            if w == 0 || w > self.d_model {
                return fail(format!("positional_dims {w} must be in 1..={}", self.d_model));
            }
        }
        if !(self.positional_base > 1.0) {
            return fail("positional_base must be > 1".into());
        }
        if let Some(eos) = self.eos_token {
            if eos as usize >= self.vocab_size {
                return fail(format!("eos_token {eos} outside vocabulary"));
            }
        }
        Ok(())
    }

    pub fn layout(&self) -> HeadLayout {
        HeadLayout {
            n_layers: self.n_layers,
            n_heads: self.n_heads_per_layer,
        }
    }

    pub fn positional_width(&self) -> usize {
        self.positional_dims.unwrap_or(self.d_model)
    }
}

/// An attention head, addressed as `L{layer}-H{head}` (both from 0).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
}

impl HeadId {
    pub const fn new(layer: usize, head: usize) -> Self {
        Self { layer, head }
    }
}

impl fmt::Display for HeadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}-H{}", self.layer, self.head)
    }
}

/// Shape of the head grid. Heads are flattened layer-major, which is also
/// the `(layer, head)` ascending order used for every tie-break.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadLayout {
    pub n_layers: usize,
    pub n_heads: usize,
}

impl HeadLayout {
    pub fn total(&self) -> usize {
        self.n_layers * self.n_heads
    }

    pub fn index(&self, h: HeadId) -> usize {
        h.layer * self.n_heads + h.head
    }

    pub fn head(&self, index: usize) -> HeadId {
        HeadId::new(index / self.n_heads, index % self.n_heads)
    }

    pub fn contains(&self, h: HeadId) -> bool {
        h.layer < self.n_layers && h.head < self.n_heads
    }

    pub fn heads(&self) -> impl Iterator<Item = HeadId> + '_ {
        (0..self.total()).map(|i| self.head(i))
    }
}

/// What a forward pass is allowed to use: masked heads contribute nothing to
/// the residual stream, hidden positions receive no attention from any head.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Intervention {
    #[serde(default)]
    pub masked_heads: BTreeSet<HeadId>,
    /// `None` means every position is visible.
    #[serde(default)]
    pub visible_positions: Option<BTreeSet<usize>>,
}

impl Intervention {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn mask<I: IntoIterator<Item = HeadId>>(heads: I) -> Self {
        Self {
            masked_heads: heads.into_iter().collect(),
            visible_positions: None,
        }
    }

    pub fn with_visible<I: IntoIterator<Item = usize>>(mut self, positions: I) -> Self {
        self.visible_positions = Some(positions.into_iter().collect());
        self
    }

    pub fn is_empty(&self) -> bool {
        self.masked_heads.is_empty() && self.visible_positions.is_none()
    }

    /// Checks the intervention against a head grid and sequence length and
    /// returns the per-position visibility vector.
    pub fn resolve(&self, layout: HeadLayout, seq_len: usize) -> Result<Vec<bool>> {
        if let Some(h) = self.masked_heads.iter().find(|h| !layout.contains(**h)) {
            return Err(Error::Intervention(format!(
                "masked head {h} outside {}x{} grid",
                layout.n_layers, layout.n_heads
            )));
        }
        match &self.visible_positions {
            None => Ok(vec![true; seq_len]),
            Some(set) => {
                if let Some(&p) = set.iter().next_back().filter(|&&p| p >= seq_len) {
                    return Err(Error::Intervention(format!(
                        "visible position {p} outside sequence of length {seq_len}"
                    )));
                }
                let mut vis = vec![false; seq_len];
                for &p in set {
                    vis[p] = true;
                }
                Ok(vis)
            }
        }
    }
}

/// Everything captured from one forward pass at the final query position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutput {
    pub logits: Vec<f32>,
    /// Final-query attention rows, one per head in layout order.
    pub attn_rows: Vec<Vec<f64>>,
    pub final_hidden: Vec<f32>,
    pub predicted_token: u32,
    /// Set when the final query could not see any position; rows are all zero.
    #[serde(default)]
    pub degenerate: bool,
}

impl StepOutput {
    pub fn row(&self, layout: HeadLayout, h: HeadId) -> &[f64] {
        &self.attn_rows[layout.index(h)]
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> Option<usize> {
    let mut best: Option<(usize, T)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((_, b)) if !(v > b) => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

/// Static description of whatever sits behind a [`Backend`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDescriptor {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    pub max_context: usize,
    #[serde(default)]
    pub eos_token: Option<u32>,
}

impl ModelDescriptor {
    pub fn layout(&self) -> HeadLayout {
        HeadLayout {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
        }
    }
}

/// Anything that can run an instrumented forward pass: the in-process toy
/// model or a remote model behind the bridge protocol.
pub trait Backend: Send + Sync {
    fn descriptor(&self) -> ModelDescriptor;

    fn forward(&self, tokens: &[u32], intervention: &Intervention) -> Result<StepOutput>;

    fn layout(&self) -> HeadLayout {
        self.descriptor().layout()
    }
}
