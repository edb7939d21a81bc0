//! Hand-wired two-layer induction circuit.
//!
//! Residual stream layout (`V` = vocabulary size, `P` = positional width):
//!
//! ```text
//! [0, V)        current token, one-hot
//! [V, 2V)       previous token, written by the layer-0 previous-token head
//! [2V, 3V)      induction output, read by the unembedding
//! [d-P, d)      sinusoidal positions
//! ```
//!
//! The previous-token head rotates each position's sinusoid back by one
//! step, so its query at `i` matches the key at `i-1`. The induction head
//! queries with the current token and keys on `previous - current`: a
//! position whose predecessor equals the current token scores +1, the
//! position-0 self-match scores 0, and occurrences of the current token
//! itself score -1. Its value copies the attended token into the output band.
//!
//! All remaining heads are observers: random query/key/value maps with a
//! near-zero output projection, so they produce realistic attention rows
//! without carrying the copy.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use super::transformer::positional_frequencies;
use super::{HeadId, LayerWeights, Model, ModelConfig, ModelMeta, PositionalScheme};
use crate::{seed, Error, Result};

const UNEMBED_GAIN: f32 = 10.0;
/// Weight of the embedding -> unembedding path relative to the copy path.
const DIRECT_PATH: f32 = 0.25;
const OBSERVER_QKV_STD: f32 = 0.5;
const OBSERVER_OUT_STD: f32 = 1e-4;
/// Softmax logit margin (beyond ln context) between the intended key and the rest.
const SHARPNESS_MARGIN: f64 = 30.0;

#[derive(Debug, Clone, PartialEq)]
pub struct InductionSpec {
    pub vocab_size: usize,
    pub n_heads_per_layer: usize,
    pub max_context: usize,
    pub positional_dims: usize,
    pub seed: u64,
}

impl Default for InductionSpec {
    fn default() -> Self {
        Self {
            vocab_size: 16,
            n_heads_per_layer: 32,
            max_context: 512,
            positional_dims: 16,
            seed: 0,
        }
    }
}

pub fn build_induction_model(vocab_size: usize, seed: u64) -> Result<Model> {
    build_induction_model_with(&InductionSpec {
        vocab_size,
        seed,
        ..Default::default()
    })
}

/// Smallest total phase gap `sum_k (1 - cos(w_k * d))` over every offset a
/// previous-token query can see other than the intended one.
fn min_phase_gap(freqs: &[f64], max_context: usize) -> f64 {
    std::iter::once(-1i64)
        .chain(1..max_context as i64)
        .map(|d| freqs.iter().map(|w| 1.0 - (w * d as f64).cos()).sum::<f64>())
        .fold(f64::INFINITY, f64::min)
}

pub fn build_induction_model_with(spec: &InductionSpec) -> Result<Model> {
    let v = spec.vocab_size;
    let p = spec.positional_dims;
    if v < 4 {
        return Err(Error::Config(format!("induction model needs vocab_size >= 4, got {v}")));
    }
    if p < 2 || p % 2 != 0 {
        return Err(Error::Config("positional_dims must be even and >= 2".into()));
    }
    let hd = v.max(p);
    let n_heads = spec.n_heads_per_layer;
    let d = n_heads * hd;
    if 3 * v + p > d {
        return Err(Error::Config(format!(
            "{n_heads} heads of width {hd} leave no room for the circuit bands"
        )));
    }
    let config = ModelConfig {
        vocab_size: v,
        d_model: d,
        n_layers: 2,
        n_heads_per_layer: n_heads,
        head_dim: hd,
        max_context: spec.max_context,
        positional_scheme: PositionalScheme::SinusoidalAbsolute,
        positional_dims: Some(p),
        positional_base: 10_000.0,
        mlp_dim: 0,
        eos_token: None,
        init_seed: spec.seed,
    };
    config.validate()?;

    let tok = 0;
    let prev = v;
    let out = 2 * v;
    let pos = d - p;

    let mut rng = seed::rng(spec.seed);
    let prev_head = rng.random_range(0..n_heads);
    let induction_head = rng.random_range(0..n_heads);

    let mut layers = Vec::with_capacity(2);
    for layer in 0..2 {
        let wired = if layer == 0 { prev_head } else { induction_head };
        let mut w = LayerWeights {
            w_q: DMatrix::zeros(d, d),
            w_k: DMatrix::zeros(d, d),
            w_v: DMatrix::zeros(d, d),
            w_o: DMatrix::zeros(d, d),
            mlp: None,
        };
        for h in (0..n_heads).filter(|&h| h != wired) {
            let cols = h * hd..(h + 1) * hd;
            for r in 0..d {
                for c in cols.clone() {
                    w.w_q[(r, c)] = OBSERVER_QKV_STD * rng.sample::<f32, _>(StandardNormal);
                    w.w_k[(r, c)] = OBSERVER_QKV_STD * rng.sample::<f32, _>(StandardNormal);
                    w.w_v[(r, c)] = OBSERVER_QKV_STD * rng.sample::<f32, _>(StandardNormal);
                }
            }
            for r in cols {
                for c in 0..d {
                    w.w_o[(r, c)] = OBSERVER_OUT_STD * rng.sample::<f32, _>(StandardNormal);
                }
            }
        }
        layers.push(w);
    }

    let score_scale = (hd as f64).sqrt();
    let ln_ctx = (spec.max_context as f64).ln();

    // Layer 0: previous-token head.
    {
        let freqs = positional_frequencies(&config);
        let gap = min_phase_gap(&freqs, spec.max_context);
        let beta = (ln_ctx + SHARPNESS_MARGIN) / gap * score_scale;
        let base = prev_head * hd;
        let w = &mut layers[0];
        for (k, &omega) in freqs.iter().enumerate() {
            let (s, c) = (pos + 2 * k, pos + 2 * k + 1);
            let (hs, hc) = (base + 2 * k, base + 2 * k + 1);
            let (sin, cos) = omega.sin_cos();
            // q = R(-omega) * [sin(i w), cos(i w)] = [sin((i-1) w), cos((i-1) w)]
            w.w_q[(s, hs)] = (beta * cos) as f32;
            w.w_q[(c, hs)] = (-beta * sin) as f32;
            w.w_q[(s, hc)] = (beta * sin) as f32;
            w.w_q[(c, hc)] = (beta * cos) as f32;
            w.w_k[(s, hs)] = 1.0;
            w.w_k[(c, hc)] = 1.0;
        }
        for t in 0..v {
            w.w_v[(tok + t, base + t)] = 1.0;
            w.w_o[(base + t, prev + t)] = 1.0;
        }
    }

    // Layer 1: induction head.
    {
        let beta = (ln_ctx + SHARPNESS_MARGIN) * score_scale;
        let base = induction_head * hd;
        let w = &mut layers[1];
        for t in 0..v {
            w.w_q[(tok + t, base + t)] = beta as f32;
            w.w_k[(prev + t, base + t)] = 1.0;
            w.w_k[(tok + t, base + t)] = -1.0;
            w.w_v[(tok + t, base + t)] = 1.0;
            w.w_o[(base + t, out + t)] = 1.0;
        }
    }

    let mut embed = DMatrix::zeros(v, d);
    let mut unembed = DMatrix::zeros(d, v);
    for t in 0..v {
        embed[(t, tok + t)] = 1.0;
        unembed[(out + t, t)] = UNEMBED_GAIN;
        unembed[(tok + t, t)] = DIRECT_PATH * UNEMBED_GAIN;
    }

    let induction = HeadId::new(1, induction_head);
    let previous = HeadId::new(0, prev_head);
    let meta = ModelMeta {
        kind: "induction".into(),
        induction_head: Some(induction),
        previous_token_head: Some(previous),
        description: format!(
            "two-layer attention-only induction circuit: {previous} previous-token head, \
             {induction} induction head, {} observer heads",
            2 * n_heads - 2
        ),
    };
    Model::from_parts(config, meta, embed, unembed, layers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Intervention;

    fn next(model: &Model, tokens: &[u32], iv: &Intervention) -> u32 {
        model.forward(tokens, iv).unwrap().predicted_token
    }

    /// Hand evaluation of the wired circuit on [7, 3, 9, 7]. With exact
    /// one-hot bands the induction key score at position j is
    /// [tok(j-1) == 7] - [tok(j) == 7]; position 0 attends to itself, so its
    /// "previous" is 7 and it scores 1 - 1 = 0:
    ///
    ///   j=0: 0, j=1: +1 (prev 7, tok 3), j=2: 0, j=3: -1
    ///
    /// so the head copies token 3: logit(3) = 10 versus the direct path's
    /// logit(7) = 2.5. For [5, 5] both positions score 0, the head averages
    /// e5 with itself, and logit(5) = 12.5 dominates.
    #[test]
    fn hand_evaluated_circuit_examples() {
        let m = build_induction_model(16, 0).unwrap();
        assert_eq!(next(&m, &[7, 3, 9, 7], &Intervention::none()), 3);
        assert_eq!(next(&m, &[5, 5], &Intervention::none()), 5);

        let out = m.forward(&[7, 3, 9, 7], &Intervention::none()).unwrap();
        assert!((out.logits[3] - 10.0).abs() < 0.2, "{}", out.logits[3]);
        assert!((out.logits[7] - 2.5).abs() < 0.2, "{}", out.logits[7]);
        let ind = m.meta().induction_head.unwrap();
        let row = out.row(m.config().layout(), ind);
        assert!(row[1] > 0.999_999);
        let prev = m.meta().previous_token_head.unwrap();
        let row = out.row(m.config().layout(), prev);
        assert!(row[2] > 0.999_999);
    }

    #[test]
    fn phase_gap_supports_sharp_previous_token_attention() {
        let m = build_induction_model(16, 3).unwrap();
        let freqs = positional_frequencies(m.config());
        let gap = min_phase_gap(&freqs, 512);
        assert!(gap > 0.4, "{gap}");
        // Every query in a long sequence attends to its predecessor.
        let toks: Vec<u32> = (0..300u32).map(|i| (i * 7 + 3) % 16).collect();
        let prev = m.meta().previous_token_head.unwrap();
        let layout = m.config().layout();
        for len in [2usize, 50, 299] {
            let out = m.forward(&toks[..len], &Intervention::none()).unwrap();
            assert!(out.row(layout, prev)[len - 2] > 0.999_999);
        }
    }

    #[test]
    fn ablating_documented_head_breaks_copy_across_instantiations() {
        let mut broken = 0;
        let seeds = 100u64;
        for s in 0..seeds {
            let m = build_induction_model(16, s).unwrap();
            let mut rng = seed::rng(1000 + s);
            // Random distinct triple A, B, C.
            let mut picks = Vec::new();
            while picks.len() < 3 {
                let t: u32 = rng.random_range(0..16);
                if !picks.contains(&t) {
                    picks.push(t);
                }
            }
            let (a, b, c) = (picks[0], picks[1], picks[2]);
            let seq = [a, b, c, a];
            assert_eq!(next(&m, &seq, &Intervention::none()), b);
            let iv = Intervention::mask([m.meta().induction_head.unwrap()]);
            if next(&m, &seq, &iv) != b {
                broken += 1;
            }
            if s < 20 {
                assert_ne!(next(&m, &[7, 3, 9, 7], &iv), 3);
            }
        }
        assert!(broken as f64 >= 0.95 * seeds as f64, "{broken}/{seeds}");
    }

    #[test]
    fn copies_a_pattern_embedded_in_noise() {
        let m = build_induction_model(16, 11).unwrap();
        let mut rng = seed::rng(5);
        // Filler from tokens 0..8, the pattern from 8..16.
        let mut toks: Vec<u32> = (0..200).map(|_| rng.random_range(0..8)).collect();
        toks.splice(60..60, [9u32, 12, 14]);
        toks.push(9);
        assert_eq!(next(&m, &toks, &Intervention::none()), 12);
        toks.push(12);
        assert_eq!(next(&m, &toks, &Intervention::none()), 14);
    }

    #[test]
    fn rejects_tiny_vocab() {
        assert!(build_induction_model(3, 0).is_err());
    }
}
