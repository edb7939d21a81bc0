use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, RowDVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{argmax, Backend, HeadId, HeadLayout, Intervention, ModelConfig, ModelDescriptor, StepOutput};
use crate::{seed, Error, Result};

/// Free-form provenance attached to a model and persisted with its weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub kind: String,
    /// The layer-1 head that performs induction copying, for hand-wired models.
    #[serde(default)]
    pub induction_head: Option<HeadId>,
    #[serde(default)]
    pub previous_token_head: Option<HeadId>,
    #[serde(default)]
    pub description: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpWeights {
    pub w_in: DMatrix<f32>,
    pub b_in: RowDVector<f32>,
    pub w_out: DMatrix<f32>,
    pub b_out: RowDVector<f32>,
}

/// Per-layer projections. Head `h` owns columns `h*head_dim..(h+1)*head_dim`
/// of `w_q`, `w_k`, `w_v` and the same rows of `w_o`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub w_q: DMatrix<f32>,
    pub w_k: DMatrix<f32>,
    pub w_v: DMatrix<f32>,
    pub w_o: DMatrix<f32>,
    pub mlp: Option<MlpWeights>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    meta: ModelMeta,
    /// vocab x d_model
    embed: DMatrix<f32>,
    /// d_model x vocab
    unembed: DMatrix<f32>,
    layers: Vec<LayerWeights>,
    /// max_context x d_model, zero outside the positional band.
    positional: DMatrix<f32>,
}

fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize, std: f32) -> DMatrix<f32> {
    DMatrix::from_fn(rows, cols, |_, _| std * rng.sample::<f32, _>(StandardNormal))
}

/// Builds a seeded random model. Equal configs give bit-identical weights.
pub fn build_model(config: &ModelConfig) -> Result<Model> {
    config.validate()?;
    let mut rng = seed::rng(config.init_seed);
    let d = config.d_model;
    let proj_std = 1.0 / (d as f32).sqrt();
    let embed = random_matrix(&mut rng, config.vocab_size, d, 1.0);
    let mut layers = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        let w_q = random_matrix(&mut rng, d, d, proj_std);
        let w_k = random_matrix(&mut rng, d, d, proj_std);
        let w_v = random_matrix(&mut rng, d, d, proj_std);
        let w_o = random_matrix(&mut rng, d, d, proj_std);
        let mlp = (config.mlp_dim > 0).then(|| {
            let m = config.mlp_dim;
            MlpWeights {
                w_in: random_matrix(&mut rng, d, m, proj_std),
                b_in: RowDVector::zeros(m),
                w_out: random_matrix(&mut rng, m, d, 1.0 / (m as f32).sqrt()),
                b_out: RowDVector::zeros(d),
            }
        });
        layers.push(LayerWeights { w_q, w_k, w_v, w_o, mlp });
    }
    let unembed = random_matrix(&mut rng, d, config.vocab_size, proj_std);
    Model::from_parts(
        config.clone(),
        ModelMeta {
            kind: "random".into(),
            ..Default::default()
        },
        embed,
        unembed,
        layers,
    )
}

/// Sinusoidal absolute encodings written into the last `width` residual dims.
fn positional_table(config: &ModelConfig) -> DMatrix<f32> {
    let d = config.d_model;
    let width = config.positional_width();
    let offset = d - width;
    let mut table = DMatrix::zeros(config.max_context, d);
    for pos in 0..config.max_context {
        for k in 0..width {
            let pair = (k / 2) as f64;
            let freq = config.positional_base.powf(-2.0 * pair / width as f64);
            let angle = pos as f64 * freq;
            table[(pos, offset + k)] = if k % 2 == 0 { angle.sin() } else { angle.cos() } as f32;
        }
    }
    table
}

/// Angular frequencies of the positional band, one per (sin, cos) pair.
pub(crate) fn positional_frequencies(config: &ModelConfig) -> Vec<f64> {
    let width = config.positional_width();
    (0..width / 2)
        .map(|pair| config.positional_base.powf(-2.0 * pair as f64 / width as f64))
        .collect()
}

impl Model {
    pub(crate) fn from_parts(
        config: ModelConfig,
        meta: ModelMeta,
        embed: DMatrix<f32>,
        unembed: DMatrix<f32>,
        layers: Vec<LayerWeights>,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let shape_err = |what: &str| Err(Error::Config(format!("weight shape mismatch: {what}")));
        if embed.shape() != (config.vocab_size, d) {
            return shape_err("embed");
        }
        if unembed.shape() != (d, config.vocab_size) {
            return shape_err("unembed");
        }
        if layers.len() != config.n_layers {
            return shape_err("layer count");
        }
        for l in &layers {
            for m in [&l.w_q, &l.w_k, &l.w_v, &l.w_o] {
                if m.shape() != (d, d) {
                    return shape_err("attention projection");
                }
            }
            match (&l.mlp, config.mlp_dim) {
                (None, 0) => {}
                (Some(m), k) if k > 0 => {
                    if m.w_in.shape() != (d, k)
                        || m.w_out.shape() != (k, d)
                        || m.b_in.len() != k
                        || m.b_out.len() != d
                    {
                        return shape_err("mlp");
                    }
                }
                _ => return shape_err("mlp presence"),
            }
        }
        let positional = positional_table(&config);
        Ok(Self {
            config,
            meta,
            embed,
            unembed,
            layers,
            positional,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn meta(&self) -> &ModelMeta {
        &self.meta
    }

    pub fn layers(&self) -> &[LayerWeights] {
        &self.layers
    }

    pub fn embed(&self) -> &DMatrix<f32> {
        &self.embed
    }

    pub fn unembed(&self) -> &DMatrix<f32> {
        &self.unembed
    }

    /// Named row-major tensors, in a stable order, for serialization.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, Vec<f32>)> {
        fn dump(name: String, m: &DMatrix<f32>) -> (String, Vec<usize>, Vec<f32>) {
            let data = m.transpose().as_slice().to_vec();
            (name, vec![m.nrows(), m.ncols()], data)
        }
        fn dump_row(name: String, v: &RowDVector<f32>) -> (String, Vec<usize>, Vec<f32>) {
            (name, vec![v.len()], v.iter().copied().collect())
        }
        let mut out = vec![dump("embed".into(), &self.embed)];
        for (i, l) in self.layers.iter().enumerate() {
            out.push(dump(format!("layers.{i}.w_q"), &l.w_q));
            out.push(dump(format!("layers.{i}.w_k"), &l.w_k));
            out.push(dump(format!("layers.{i}.w_v"), &l.w_v));
            out.push(dump(format!("layers.{i}.w_o"), &l.w_o));
            if let Some(m) = &l.mlp {
                out.push(dump(format!("layers.{i}.mlp.w_in"), &m.w_in));
                out.push(dump_row(format!("layers.{i}.mlp.b_in"), &m.b_in));
                out.push(dump(format!("layers.{i}.mlp.w_out"), &m.w_out));
                out.push(dump_row(format!("layers.{i}.mlp.b_out"), &m.b_out));
            }
        }
        out.push(dump("unembed".into(), &self.unembed));
        out
    }

    /// Inverse of [`Model::tensors`].
    pub fn from_tensors(
        config: ModelConfig,
        meta: ModelMeta,
        tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
    ) -> Result<Self> {
        config.validate()?;
        let mut map: BTreeMap<String, (Vec<usize>, Vec<f32>)> = tensors
            .into_iter()
            .map(|(n, s, d)| (n, (s, d)))
            .collect();
        let mut take = |name: &str| -> Result<(Vec<usize>, Vec<f32>)> {
            let (shape, data) = map
                .remove(name)
                .ok_or_else(|| Error::Config(format!("missing tensor {name}")))?;
            if shape.iter().product::<usize>() != data.len() {
                return Err(Error::Config(format!("tensor {name} shape/data mismatch")));
            }
            Ok((shape, data))
        };
        fn matrix(name: &str, (shape, data): (Vec<usize>, Vec<f32>)) -> Result<DMatrix<f32>> {
            match shape[..] {
                [r, c] => Ok(DMatrix::from_row_slice(r, c, &data)),
                _ => Err(Error::Config(format!("tensor {name} is not 2-d"))),
            }
        }
        let embed = matrix("embed", take("embed")?)?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let get = |take: &mut dyn FnMut(&str) -> Result<(Vec<usize>, Vec<f32>)>, s: &str| {
                let name = format!("layers.{i}.{s}");
                matrix(&name, take(&name)?)
            };
            let w_q = get(&mut take, "w_q")?;
            let w_k = get(&mut take, "w_k")?;
            let w_v = get(&mut take, "w_v")?;
            let w_o = get(&mut take, "w_o")?;
            let mlp = if config.mlp_dim > 0 {
                let w_in = get(&mut take, "mlp.w_in")?;
                let w_out = get(&mut take, "mlp.w_out")?;
                let (_, b_in) = take(&format!("layers.{i}.mlp.b_in"))?;
                let (_, b_out) = take(&format!("layers.{i}.mlp.b_out"))?;
                Some(MlpWeights {
                    w_in,
                    b_in: RowDVector::from_vec(b_in),
                    w_out,
                    b_out: RowDVector::from_vec(b_out),
                })
            } else {
                None
            };
            layers.push(LayerWeights { w_q, w_k, w_v, w_o, mlp });
        }
        let unembed = matrix("unembed", take("unembed")?)?;
        if let Some(extra) = map.keys().next() {
            return Err(Error::Config(format!("unexpected tensor {extra}")));
        }
        Self::from_parts(config, meta, embed, unembed, layers)
    }

    /// Runs one instrumented forward pass and reports the final query position.
    pub fn forward(&self, tokens: &[u32], intervention: &Intervention) -> Result<StepOutput> {
        let cfg = &self.config;
        let t = tokens.len();
        if t == 0 {
            return Err(Error::Empty("token sequence"));
        }
        if t > cfg.max_context {
            return Err(Error::ContextOverflow {
                len: t,
                max: cfg.max_context,
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&tok| tok as usize >= cfg.vocab_size) {
            return Err(Error::InvalidInput(format!(
                "token {bad} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
        let layout = cfg.layout();
        let visible = intervention.resolve(layout, t)?;
        let masked: Vec<bool> = layout
            .heads()
            .map(|h| intervention.masked_heads.contains(&h))
            .collect();

        let d = cfg.d_model;
        let hd = cfg.head_dim;
        let scale = 1.0 / (hd as f32).sqrt();
        let last = t - 1;

        let mut x = DMatrix::<f32>::zeros(t, d);
        for (i, &tok) in tokens.iter().enumerate() {
            let mut row = x.row_mut(i);
            row.copy_from(&self.embed.row(tok as usize));
            row += self.positional.row(i);
        }

        let mut attn_rows = vec![Vec::new(); layout.total()];
        let mut degenerate = false;

        for (l, layer) in self.layers.iter().enumerate() {
            let final_layer = l + 1 == self.layers.len();
            let k = &x * &layer.w_k;
            let v = &x * &layer.w_v;
            if final_layer {
                // Only the final position feeds the output, so queries are
                // needed for that row alone.
                let x_last = x.row(last).into_owned();
                let q = &x_last * &layer.w_q;
                let mut concat = RowDVector::<f32>::zeros(d);
                for h in 0..cfg.n_heads_per_layer {
                    let flat = layout.index(HeadId::new(l, h));
                    let kh = k.columns(h * hd, hd);
                    let qh = q.columns(h * hd, hd);
                    let raw: DVector<f32> = (kh * qh.transpose()) * scale;
                    let (row, deg) = final_row(raw.as_slice(), &visible);
                    degenerate |= deg;
                    if !masked[flat] {
                        let vh = v.columns(h * hd, hd);
                        let mut out = RowDVector::<f32>::zeros(hd);
                        for (j, &w) in row.iter().enumerate() {
                            if w != 0.0 {
                                out += vh.row(j) * (w as f32);
                            }
                        }
                        concat.columns_mut(h * hd, hd).copy_from(&out);
                    }
                    attn_rows[flat] = row;
                }
                let mut x_last = x_last + concat * &layer.w_o;
                if let Some(mlp) = &layer.mlp {
                    let hidden = (&x_last * &mlp.w_in + &mlp.b_in).map(|a| a.max(0.0));
                    x_last += hidden * &mlp.w_out + &mlp.b_out;
                }
                x.row_mut(last).copy_from(&x_last);
            } else {
                let q = &x * &layer.w_q;
                let mut concat = DMatrix::<f32>::zeros(t, d);
                for h in 0..cfg.n_heads_per_layer {
                    let flat = layout.index(HeadId::new(l, h));
                    let kh = k.columns(h * hd, hd);
                    let qh = q.columns(h * hd, hd);
                    if masked[flat] {
                        // Output is discarded; only the reported row is needed.
                        let raw: DVector<f32> = (kh * qh.row(last).transpose()) * scale;
                        let (row, deg) = final_row(raw.as_slice(), &visible);
                        degenerate |= deg;
                        attn_rows[flat] = row;
                        continue;
                    }
                    // Column i of `scores` holds query i's logits over keys.
                    let mut scores: DMatrix<f32> = (kh * qh.transpose()) * scale;
                    let (row, deg) = final_row(&scores.as_slice()[last * t..], &visible);
                    degenerate |= deg;
                    attn_rows[flat] = row;
                    softmax_columns(scores.as_mut_slice(), t, &visible);
                    let vh = v.columns(h * hd, hd);
                    let out = scores.tr_mul(&vh);
                    concat.columns_mut(h * hd, hd).copy_from(&out);
                }
                x += concat * &layer.w_o;
                if let Some(mlp) = &layer.mlp {
                    let mut hidden = &x * &mlp.w_in;
                    for mut row in hidden.row_iter_mut() {
                        row += &mlp.b_in;
                    }
                    hidden.apply(|a| *a = a.max(0.0));
                    let mut out = hidden * &mlp.w_out;
                    for mut row in out.row_iter_mut() {
                        row += &mlp.b_out;
                    }
                    x += out;
                }
            }
        }

        let final_hidden: RowDVector<f32> = x.row(last).into_owned();
        let logits: Vec<f32> = (&final_hidden * &self.unembed).iter().copied().collect();
        let predicted_token = argmax(&logits).expect("non-empty vocabulary") as u32;
        Ok(StepOutput {
            logits,
            attn_rows,
            final_hidden: final_hidden.iter().copied().collect(),
            predicted_token,
            degenerate,
        })
    }
}

/// f64 softmax of the final query's raw scores under causal + visibility masking.
/// Returns a zero row and `true` when no position is visible.
fn final_row(raw: &[f32], visible: &[bool]) -> (Vec<f64>, bool) {
    let mut row = vec![0.0f64; raw.len()];
    let max = raw
        .iter()
        .zip(visible)
        .filter(|(_, &v)| v)
        .map(|(&s, _)| s as f64)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return (row, true);
    }
    let mut sum = 0.0;
    for (j, (&s, &v)) in raw.iter().zip(visible).enumerate() {
        if v {
            let e = (s as f64 - max).exp();
            row[j] = e;
            sum += e;
        }
    }
    for w in &mut row {
        *w /= sum;
    }
    (row, false)
}

/// In-place causal softmax over each column of a column-major `t x t` matrix.
fn softmax_columns(data: &mut [f32], t: usize, visible: &[bool]) {
    for i in 0..t {
        let col = &mut data[i * t..(i + 1) * t];
        let mut max = f32::NEG_INFINITY;
        for j in 0..=i {
            if visible[j] && col[j] > max {
                max = col[j];
            }
        }
        if max == f32::NEG_INFINITY {
            col.fill(0.0);
            continue;
        }
        let mut sum = 0.0f32;
        for j in 0..t {
            if j <= i && visible[j] {
                let e = (col[j] - max).exp();
                col[j] = e;
                sum += e;
            } else {
                col[j] = 0.0;
            }
        }
        let inv = 1.0 / sum;
        for w in col[..=i].iter_mut() {
            *w *= inv;
        }
    }
}

impl Backend for Model {
    fn descriptor(&self) -> ModelDescriptor {
        ModelDescriptor {
            n_layers: self.config.n_layers,
            n_heads: self.config.n_heads_per_layer,
            d_model: self.config.d_model,
            vocab_size: self.config.vocab_size,
            max_context: self.config.max_context,
            eos_token: self.config.eos_token,
        }
    }

    fn forward(&self, tokens: &[u32], intervention: &Intervention) -> Result<StepOutput> {
        Model::forward(self, tokens, intervention)
    }

    fn layout(&self) -> HeadLayout {
        self.config.layout()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PositionalScheme;

    fn config(layers: usize, mlp: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: 11,
            d_model: 12,
            n_layers: layers,
            n_heads_per_layer: 3,
            head_dim: 4,
            max_context: 24,
            positional_scheme: PositionalScheme::SinusoidalAbsolute,
            positional_dims: None,
            positional_base: 10_000.0,
            mlp_dim: mlp,
            eos_token: None,
            init_seed: 42,
        }
    }

    fn tokens() -> Vec<u32> {
        vec![1, 4, 2, 9, 9, 0, 7, 3]
    }

    #[test]
    fn same_config_gives_identical_outputs() {
        let a = build_model(&config(2, 8)).unwrap();
        let b = build_model(&config(2, 8)).unwrap();
        assert_eq!(a, b);
        let oa = a.forward(&tokens(), &Intervention::none()).unwrap();
        let ob = b.forward(&tokens(), &Intervention::none()).unwrap();
        assert_eq!(oa, ob);
    }

    #[test]
    fn attention_rows_are_normalised_and_causal() {
        let m = build_model(&config(3, 8)).unwrap();
        for len in 1..=tokens().len() {
            let out = m.forward(&tokens()[..len], &Intervention::none()).unwrap();
            assert_eq!(out.attn_rows.len(), 9);
            for row in &out.attn_rows {
                assert_eq!(row.len(), len);
                assert!(row.iter().all(|&w| w >= 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn hidden_positions_get_zero_weight() {
        let m = build_model(&config(2, 0)).unwrap();
        let iv = Intervention::none().with_visible([0, 1, 3, 5, 6, 7]);
        let out = m.forward(&tokens(), &iv).unwrap();
        for row in &out.attn_rows {
            assert_eq!(row[2], 0.0);
            assert_eq!(row[4], 0.0);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn fully_hidden_query_yields_degenerate_zero_rows() {
        let m = build_model(&config(1, 0)).unwrap();
        let iv = Intervention::none().with_visible(std::iter::empty());
        let out = m.forward(&tokens(), &iv).unwrap();
        assert!(out.degenerate);
        assert!(out.attn_rows.iter().all(|r| r.iter().all(|&w| w == 0.0)));
        assert!(out.logits.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn masking_every_head_of_attention_only_model_leaves_direct_path() {
        let m = build_model(&config(1, 0)).unwrap();
        let toks = tokens();
        let all = Intervention::mask(m.config().layout().heads());
        let out = m.forward(&toks, &all).unwrap();
        let last = *toks.last().unwrap() as usize;
        let direct = (m.embed().row(last) + m.positional.row(toks.len() - 1)) * m.unembed();
        for (a, b) in out.logits.iter().zip(direct.iter()) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn masking_is_idempotent() {
        let m = build_model(&config(2, 8)).unwrap();
        let heads = [HeadId::new(0, 1), HeadId::new(1, 2)];
        let once = m.forward(&tokens(), &Intervention::mask(heads)).unwrap();
        let twice_set: Vec<HeadId> = heads.iter().chain(heads.iter()).copied().collect();
        let twice = m.forward(&tokens(), &Intervention::mask(twice_set)).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn masking_changes_only_through_zeroed_heads() {
        // Masking a head in the final layer cannot change any reported row.
        let m = build_model(&config(2, 0)).unwrap();
        let base = m.forward(&tokens(), &Intervention::none()).unwrap();
        let masked = m
            .forward(&tokens(), &Intervention::mask([HeadId::new(1, 0)]))
            .unwrap();
        assert_eq!(base.attn_rows, masked.attn_rows);
        assert_ne!(base.logits, masked.logits);
    }

    #[test]
    fn rejects_overlong_and_out_of_vocab_input() {
        let m = build_model(&config(1, 0)).unwrap();
        let long = vec![0u32; 25];
        assert!(matches!(
            m.forward(&long, &Intervention::none()),
            Err(Error::ContextOverflow { len: 25, max: 24 })
        ));
        assert!(m.forward(&[11], &Intervention::none()).is_err());
        assert!(m.forward(&[], &Intervention::none()).is_err());
    }

    #[test]
    fn tensors_round_trip() {
        let m = build_model(&config(2, 8)).unwrap();
        let back = Model::from_tensors(m.config().clone(), m.meta().clone(), m.tensors()).unwrap();
        assert_eq!(m, back);
    }
}
