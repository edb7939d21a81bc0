use serde::{Deserialize, Serialize};

use super::{Backend, Intervention, StepOutput};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub output: StepOutput,
    pub token: u32,
    pub intervention: Intervention,
}

/// A greedy decoding run. Step `t` consumed `prompt ++ tokens[..t]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub sample_id: String,
    pub seed: u64,
    pub prompt: Vec<u32>,
    pub steps: Vec<TraceStep>,
    /// Generation stopped because the context window filled up.
    #[serde(default)]
    pub overflow: bool,
}

impl GenerationTrace {
    pub fn tokens(&self) -> Vec<u32> {
        self.steps.iter().map(|s| s.token).collect()
    }

    /// Input sequence seen at step `t`.
    pub fn input_at(&self, t: usize) -> Vec<u32> {
        let mut seq = self.prompt.clone();
        seq.extend(self.steps[..t].iter().map(|s| s.token));
        seq
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Greedy decoding. `provider` supplies the intervention for each step given
/// the step index and the current input.
pub fn generate<B, F>(
    backend: &B,
    prompt: &[u32],
    max_new: usize,
    mut provider: F,
) -> Result<GenerationTrace>
where
    B: Backend + ?Sized,
    F: FnMut(usize, &[u32]) -> Intervention,
{
    let desc = backend.descriptor();
    if prompt.is_empty() {
        return Err(Error::Empty("prompt"));
    }
    if prompt.len() > desc.max_context {
        return Err(Error::ContextOverflow {
            len: prompt.len(),
            max: desc.max_context,
        });
    }
    let mut seq = prompt.to_vec();
    let mut trace = GenerationTrace {
        sample_id: String::new(),
        seed: 0,
        prompt: prompt.to_vec(),
        steps: Vec::with_capacity(max_new),
        overflow: false,
    };
    for step in 0..max_new {
        if seq.len() > desc.max_context {
            trace.overflow = true;
            break;
        }
        let intervention = provider(step, &seq);
        let output = backend.forward(&seq, &intervention)?;
        let token = output.predicted_token;
        trace.steps.push(TraceStep {
            output,
            token,
            intervention,
        });
        seq.push(token);
        if desc.eos_token == Some(token) {
            break;
        }
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_induction_model, build_model, ModelConfig, PositionalScheme};

    #[test]
    fn zero_budget_gives_empty_trace() {
        let m = build_induction_model(16, 0).unwrap();
        let tr = generate(&m, &[1, 2, 3], 0, |_, _| Intervention::none()).unwrap();
        assert!(tr.is_empty());
    }

    #[test]
    fn induction_prompt_emits_copied_token() {
        let m = build_induction_model(16, 0).unwrap();
        let tr = generate(&m, &[7, 3, 9, 7], 1, |_, _| Intervention::none()).unwrap();
        assert_eq!(tr.tokens(), vec![3]);
    }

    fn small_config(eos: Option<u32>) -> ModelConfig {
        ModelConfig {
            vocab_size: 9,
            d_model: 8,
            n_layers: 2,
            n_heads_per_layer: 2,
            head_dim: 4,
            max_context: 12,
            positional_scheme: PositionalScheme::SinusoidalAbsolute,
            positional_dims: None,
            positional_base: 10_000.0,
            mlp_dim: 6,
            eos_token: eos,
            init_seed: 3,
        }
    }

    #[test]
    fn trace_is_autoregressively_consistent_and_deterministic() {
        let m = build_model(&small_config(None)).unwrap();
        let run = || {
            generate(&m, &[1, 2], 20, |t, _| {
                if t % 2 == 0 {
                    Intervention::none()
                } else {
                    Intervention::mask([crate::HeadId::new(0, 1)])
                }
            })
            .unwrap()
        };
        let a = run();
        assert_eq!(a, run());
        // A 12-token window admits inputs of length 2..=12, then overflows.
        assert_eq!(a.len(), 11);
        assert!(a.overflow);
        for t in 0..a.len() {
            let input = a.input_at(t);
            let again = m.forward(&input, &a.steps[t].intervention).unwrap();
            assert_eq!(again.predicted_token, a.steps[t].token);
        }
    }

    #[test]
    fn stops_at_end_of_sequence() {
        let m = build_model(&small_config(None)).unwrap();
        let first = generate(&m, &[1, 2], 1, |_, _| Intervention::none()).unwrap().tokens()[0];
        let with_eos = build_model(&small_config(Some(first))).unwrap();
        let tr = generate(&with_eos, &[1, 2], 8, |_, _| Intervention::none()).unwrap();
        assert_eq!(tr.tokens(), vec![first]);
        assert!(!tr.overflow);
    }

    #[test]
    fn rejects_prompt_longer_than_context() {
        let m = build_model(&small_config(None)).unwrap();
        assert!(generate(&m, &[0; 13], 1, |_, _| Intervention::none()).is_err());
    }
}
