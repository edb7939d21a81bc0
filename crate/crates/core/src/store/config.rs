//! Run configuration files (TOML).

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ablation::AblationCondition;
use crate::dynrag::{DynRagParams, RindConfig, DEFAULT_STOPWORDS};
use crate::model::{build_induction_model_with, build_model, InductionSpec};
use crate::probe::{CcaConfig, ProbeConfig, ProbeLoss};
use crate::score::Scoring;
use crate::task::MetricKind;
use crate::{Error, HeadId, Model, ModelConfig, Result};

/// Default output root when `--out` is not given.
pub const OUT_ENV: &str = "HEADLAMP_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSource {
    /// The hand-wired two-layer induction circuit.
    Induction {
        #[serde(default = "d_vocab")]
        vocab_size: usize,
        #[serde(default = "d_heads")]
        n_heads_per_layer: usize,
        #[serde(default = "d_context")]
        max_context: usize,
        #[serde(default = "d_pos")]
        positional_dims: usize,
    },
    /// Randomly initialised weights.
    Random { config: ModelConfig },
    /// An HLMP1 weight file.
    Weights { path: PathBuf },
    /// An external model behind the `hlb/1` protocol over stdio.
    Bridge(BridgeSection),
}

fn d_vocab() -> usize {
    InductionSpec::default().vocab_size
}
fn d_heads() -> usize {
    InductionSpec::default().n_heads_per_layer
}
fn d_context() -> usize {
    InductionSpec::default().max_context
}
fn d_pos() -> usize {
    InductionSpec::default().positional_dims
}

impl Default for ModelSource {
    fn default() -> Self {
        Self::Induction {
            vocab_size: d_vocab(),
            n_heads_per_layer: d_heads(),
            max_context: d_context(),
            positional_dims: d_pos(),
        }
    }
}

impl ModelSource {
    /// Builds or loads an in-process model; `None` for the bridge.
    pub fn in_process(&self, seed: u64) -> Result<Option<Model>> {
        Ok(Some(match self {
            Self::Induction {
                vocab_size,
                n_heads_per_layer,
                max_context,
                positional_dims,
            } => build_induction_model_with(&InductionSpec {
                vocab_size: *vocab_size,
                n_heads_per_layer: *n_heads_per_layer,
                max_context: *max_context,
                positional_dims: *positional_dims,
                seed,
            })?,
            Self::Random { config } => build_model(config)?,
            Self::Weights { path } => super::load_model(path)?,
            Self::Bridge(_) => return Ok(None),
        }))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BridgeSection {
    /// Program and arguments of the server, speaking over stdin/stdout.
    pub command: Vec<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Toy-vocabulary needle retrieval for the induction model.
    #[default]
    MiniNiah,
    /// Byte-level needle-in-a-haystack prompts.
    TextNiah,
    /// Synthetic two-hop questions.
    Multihop,
    /// HotpotQA distractor records from `hotpotqa`.
    Hotpotqa,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSection {
    pub kind: TaskKind,
    /// Haystack lengths in tokens.
    pub lengths: Vec<usize>,
    pub depths: Vec<f64>,
    /// Samples per (length, depth) cell.
    pub samples: usize,
    pub max_new: usize,
    pub metric: Option<MetricKind>,
    pub corpus: Option<PathBuf>,
    pub hotpotqa: Option<PathBuf>,
}

impl Default for TaskSection {
    fn default() -> Self {
        Self {
            kind: TaskKind::MiniNiah,
            lengths: vec![128, 256],
            depths: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            samples: 4,
            max_new: 6,
            metric: None,
            corpus: None,
            hotpotqa: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub conditions: Vec<AblationCondition>,
    pub static_top: usize,
    pub k_values: Vec<usize>,
    pub progressive_length: usize,
    pub progressive_runs: usize,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            conditions: vec![
                AblationCondition::None,
                AblationCondition::Dynamic,
                AblationCondition::StaticTop,
                AblationCondition::Random,
            ],
            static_top: crate::dynamism::STATIC_TOP,
            k_values: vec![0, 1, 2, 4, 8],
            progressive_length: 128,
            progressive_runs: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    /// Temporal offset between hidden state and target scores.
    pub offset: usize,
    /// Offsets 0..=max_offset for the CCA sweep.
    pub max_offset: usize,
    pub classifier: ProbeConfig,
    pub regressor: ProbeConfig,
}

impl Default for ProbeSection {
    fn default() -> Self {
        Self {
            offset: 0,
            max_offset: 10,
            classifier: ProbeConfig::new(ProbeLoss::Asymmetric),
            regressor: ProbeConfig::new(ProbeLoss::SquaredError),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    DynamicProbe,
    #[default]
    StaticTop,
    DynamicRandom,
    FixedRandom,
    NoRag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynRagSection {
    pub policies: Vec<PolicyKind>,
    /// Heads per policy.
    pub heads: usize,
    pub threshold: f64,
    /// One word per line; the bundled list when unset.
    pub stopwords: Option<PathBuf>,
    /// HLMP1 probe for the dynamic-probe policy.
    pub probe: Option<PathBuf>,
    /// Static heads; the top of the static ranking when unset.
    pub static_heads: Option<Vec<HeadId>>,
    pub questions: usize,
    pub params: DynRagParams,
}

impl Default for DynRagSection {
    fn default() -> Self {
        Self {
            policies: vec![PolicyKind::StaticTop, PolicyKind::DynamicRandom, PolicyKind::FixedRandom, PolicyKind::NoRag],
            heads: crate::dynrag::DEFAULT_POLICY_HEADS,
            threshold: 1.0,
            stopwords: None,
            probe: None,
            static_heads: None,
            questions: 10,
            params: DynRagParams::default(),
        }
    }
}

impl DynRagSection {
    pub fn rind(&self) -> Result<RindConfig> {
        let text = match &self.stopwords {
            Some(p) => std::fs::read_to_string(p)?,
            None => DEFAULT_STOPWORDS.to_string(),
        };
        let cfg = RindConfig {
            threshold: self.threshold,
            stopwords: crate::dynrag::parse_stopwords(&text),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelSource,
    pub task: TaskSection,
    pub scoring: Scoring,
    pub ablation: AblationSection,
    pub cca: CcaConfig,
    pub probe: ProbeSection,
    pub dynrag: DynRagSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.task.lengths.is_empty() || self.task.depths.is_empty() {
            return fail("task.lengths and task.depths must be non-empty");
        }
        if self.task.depths.iter().any(|d| !(0.0..=1.0).contains(d)) {
            return fail("task.depths must lie in [0, 1]");
        }
        if self.task.samples == 0 {
            return fail("task.samples must be positive");
        }
        if !(self.scoring.threshold > 0.0 && self.scoring.threshold <= 1.0) {
            return fail("scoring.threshold must lie in (0, 1]");
        }
        if self.task.kind == TaskKind::Hotpotqa && self.task.hotpotqa.is_none() {
            return fail("task.hotpotqa must name a file for the hotpotqa task");
        }
        if let ModelSource::Bridge(b) = &self.model {
            if b.command.is_empty() {
                return fail("model.command must name a program");
            }
        }
        if let ModelSource::Random { config } = &self.model {
            config.validate()?;
        }
        self.probe.classifier.validate()?;
        self.probe.regressor.validate()?;
        self.dynrag.params.retrieval.validate()?;
        if !(self.dynrag.threshold > 0.0) {
            return fail("dynrag.threshold must be > 0");
        }
        if self.dynrag.policies.contains(&PolicyKind::DynamicProbe) && self.dynrag.probe.is_none() {
            return fail("dynrag.probe is required by the dynamic_probe policy");
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("run config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn static_heads(&self) -> Option<BTreeSet<HeadId>> {
        self.dynrag.static_heads.as_ref().map(|h| h.iter().copied().collect())
    }
}

/// `--out` if given, else `$HEADLAMP_OUT`, else `./headlamp-out`.
pub fn resolve_out_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("headlamp-out"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::parse("sead = 3"), Err(Error::Config(_))));
        assert!(RunConfig::parse("[task]\nlenghts = [4]").is_err());
        assert!(RunConfig::parse("[model]\nsource = \"induction\"\nwidth = 3").is_err());
    }

    #[test]
    fn sections_parse() {
        let text = r#"
seed = 9
[model]
source = "induction"
n_heads_per_layer = 8
[task]
lengths = [64]
depths = [0.5]
[scoring]
kind = "reasoning"
threshold = 0.4
[cca]
n_components = 5
[probe.classifier]
loss = "asymmetric"
epochs = 3
[dynrag]
threshold = inf
policies = ["no_rag"]
[dynrag.params.retrieval]
top_k = 4
"#;
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.cca.n_components, 5);
        assert_eq!(cfg.cca.ridge, 1e-6);
        assert_eq!(cfg.probe.classifier.epochs, 3);
        assert_eq!(cfg.dynrag.params.retrieval.top_k, 4);
        assert!(cfg.dynrag.threshold.is_infinite());
        assert!(matches!(cfg.model, ModelSource::Induction { n_heads_per_layer: 8, .. }));
        let bridge = RunConfig::parse("[model]\nsource = \"bridge\"\ncommand = [\"python\", \"serve.py\"]").unwrap();
        assert!(matches!(bridge.model, ModelSource::Bridge(_)));
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        assert!(RunConfig::parse("[task]\ndepths = [1.5]").is_err());
        assert!(RunConfig::parse("[scoring]\nkind = \"copy_paste\"\nthreshold = 0.0").is_err());
        assert!(RunConfig::parse("[dynrag]\npolicies = [\"dynamic_probe\"]").is_err());
    }
}
