//! Feed-forward network with ReLU hidden layers, inverted dropout and
//! manual backpropagation, plus the asymmetric and squared-error losses.

use nalgebra::{DMatrix, RowDVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

const LOG_EPS: f64 = 1e-8;

/// Asymmetric loss parameters: focusing exponents and the negative-probability margin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AslParams {
    pub gamma_pos: f64,
    pub gamma_neg: f64,
    pub margin: f64,
}

impl Default for AslParams {
    fn default() -> Self {
        Self {
            gamma_pos: 0.0,
            gamma_neg: 4.0,
            margin: 0.05,
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Element loss and its derivative with respect to the logit.
fn asl_element(z: f64, y: f64, p: &AslParams) -> (f64, f64) {
    let s = sigmoid(z);
    let ds = s * (1.0 - s);
    let mut loss = 0.0;
    let mut grad = 0.0;
    if y > 0.0 {
        let q = 1.0 - s;
        let log_s = s.max(LOG_EPS).ln();
        let w = q.powf(p.gamma_pos);
        loss -= y * w * log_s;
        let dlog = if s > LOG_EPS { 1.0 / s } else { 0.0 };
        let dw = if p.gamma_pos > 0.0 { -p.gamma_pos * q.powf(p.gamma_pos - 1.0) } else { 0.0 };
        grad -= y * (dw * log_s + w * dlog) * ds;
    }
    if y < 1.0 {
        let pm = (s - p.margin).max(0.0);
        if pm > 0.0 {
            let r = 1.0 - pm;
            let log_r = r.max(LOG_EPS).ln();
            let w = pm.powf(p.gamma_neg);
            loss -= (1.0 - y) * w * log_r;
            let dlog = if r > LOG_EPS { -1.0 / r } else { 0.0 };
            let dw = if p.gamma_neg > 0.0 { p.gamma_neg * pm.powf(p.gamma_neg - 1.0) } else { 0.0 };
            grad -= (1.0 - y) * (dw * log_r + w * dlog) * ds;
        }
    }
    (loss, grad)
}

/// Asymmetric loss summed over labels and averaged over rows.
pub fn asl_loss(logits: &DMatrix<f64>, targets: &DMatrix<f64>, p: &AslParams) -> f64 {
    let n = logits.nrows().max(1) as f64;
    logits.iter().zip(targets.iter()).map(|(&z, &y)| asl_element(z, y, p).0).sum::<f64>() / n
}

pub fn asl_grad(logits: &DMatrix<f64>, targets: &DMatrix<f64>, p: &AslParams) -> DMatrix<f64> {
    let n = logits.nrows().max(1) as f64;
    DMatrix::from_iterator(
        logits.nrows(),
        logits.ncols(),
        logits.iter().zip(targets.iter()).map(|(&z, &y)| asl_element(z, y, p).1 / n),
    )
}

/// Squared error summed over outputs and averaged over rows.
pub fn mse_loss(pred: &DMatrix<f64>, targets: &DMatrix<f64>) -> f64 {
    (pred - targets).norm_squared() / pred.nrows().max(1) as f64
}

pub fn mse_grad(pred: &DMatrix<f64>, targets: &DMatrix<f64>) -> DMatrix<f64> {
    (pred - targets) * (2.0 / pred.nrows().max(1) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    /// `weights[i]` maps layer i to layer i + 1 (in × out).
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<RowDVector<f64>>,
}

/// Activations kept for the backward pass.
pub(crate) struct Tape {
    inputs: Vec<DMatrix<f64>>,
    masks: Vec<Option<DMatrix<f64>>>,
}

impl Mlp {
    /// He-initialised network with the given layer widths.
    pub fn new(dims: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in dims.windows(2) {
            let std = (2.0 / w[0] as f64).sqrt();
            weights.push(DMatrix::from_fn(w[0], w[1], |_, _| std * rng.sample::<f64, _>(StandardNormal)));
            biases.push(RowDVector::zeros(w[1]));
        }
        Self { weights, biases }
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.last().map_or(0, |w| w.ncols())
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.forward_tape(x, 0.0, None).0
    }

    /// Forward pass; dropout is applied after each hidden layer when `rng` is given.
    pub(crate) fn forward_tape(&self, x: &DMatrix<f64>, dropout: f64, mut rng: Option<&mut ChaCha8Rng>) -> (DMatrix<f64>, Tape) {
        let last = self.weights.len() - 1;
        let mut tape = Tape {
            inputs: Vec::with_capacity(self.weights.len()),
            masks: Vec::with_capacity(self.weights.len()),
        };
        let mut h = x.clone();
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = &h * w;
            for mut row in z.row_iter_mut() {
                row += b;
            }
            tape.inputs.push(h);
            if i < last {
                z.apply(|v| *v = v.max(0.0));
                let mask = match rng.as_deref_mut() {
                    Some(r) if dropout > 0.0 => {
                        let keep = 1.0 / (1.0 - dropout);
                        let m = DMatrix::from_fn(z.nrows(), z.ncols(), |_, _| if r.random::<f64>() < dropout { 0.0 } else { keep });
                        z.component_mul_assign(&m);
                        Some(m)
                    }
                    _ => None,
                };
                tape.masks.push(mask);
            } else {
                tape.masks.push(None);
            }
            h = z;
        }
        (h, tape)
    }

    /// Gradients of the loss with respect to every weight and bias, given dL/d(output).
    pub(crate) fn backward(&self, tape: &Tape, grad_out: DMatrix<f64>) -> (Vec<DMatrix<f64>>, Vec<RowDVector<f64>>) {
        let n = self.weights.len();
        let mut gw = vec![DMatrix::zeros(0, 0); n];
        let mut gb = vec![RowDVector::zeros(0); n];
        let mut g = grad_out;
        for i in (0..n).rev() {
            if i < n - 1 {
                if let Some(m) = &tape.masks[i] {
                    g.component_mul_assign(m);
                }
                // ReLU derivative: the layer output (input to layer i + 1) is zero where inactive.
                let out = &tape.inputs[i + 1];
                g.zip_apply(out, |gv, a| {
                    if a <= 0.0 {
                        *gv = 0.0
                    }
                });
            }
            gw[i] = tape.inputs[i].tr_mul(&g);
            gb[i] = g.row_sum();
            if i > 0 {
                g = &g * self.weights[i].transpose();
            }
        }
        (gw, gb)
    }

    /// Parameter gradients without dropout; `loss_grad` maps the output to dL/d(output).
    pub fn gradients(
        &self,
        x: &DMatrix<f64>,
        loss_grad: impl FnOnce(&DMatrix<f64>) -> DMatrix<f64>,
    ) -> (Vec<DMatrix<f64>>, Vec<RowDVector<f64>>) {
        let (out, tape) = self.forward_tape(x, 0.0, None);
        self.backward(&tape, loss_grad(&out))
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }
}

/// Adam state for an [`Mlp`].
#[derive(Debug, Clone)]
pub(crate) struct Adam {
    m_w: Vec<DMatrix<f64>>,
    v_w: Vec<DMatrix<f64>>,
    m_b: Vec<RowDVector<f64>>,
    v_b: Vec<RowDVector<f64>>,
    t: i32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Adam {
    pub(crate) fn new(mlp: &Mlp) -> Self {
        Self {
            m_w: mlp.weights.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect(),
            v_w: mlp.weights.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect(),
            m_b: mlp.biases.iter().map(|b| RowDVector::zeros(b.len())).collect(),
            v_b: mlp.biases.iter().map(|b| RowDVector::zeros(b.len())).collect(),
            t: 0,
        }
    }

    pub(crate) fn step(&mut self, mlp: &mut Mlp, gw: &[DMatrix<f64>], gb: &[RowDVector<f64>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
        };
        for i in 0..mlp.weights.len() {
            for (((p, &g), m), v) in mlp.weights[i].iter_mut().zip(gw[i].iter()).zip(self.m_w[i].iter_mut()).zip(self.v_w[i].iter_mut()) {
                update(p, g, m, v);
            }
            for (((p, &g), m), v) in mlp.biases[i].iter_mut().zip(gb[i].iter()).zip(self.m_b[i].iter_mut()).zip(self.v_b[i].iter_mut()) {
                update(p, g, m, v);
            }
        }
    }
}

/// Scales gradients in place so their global L2 norm is at most `max_norm`.
pub(crate) fn clip_gradients(gw: &mut [DMatrix<f64>], gb: &mut [RowDVector<f64>], max_norm: f64) -> f64 {
    let norm = (gw.iter().map(|g| g.norm_squared()).sum::<f64>() + gb.iter().map(|g| g.norm_squared()).sum::<f64>()).sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        gw.iter_mut().for_each(|g| *g *= s);
        gb.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn asl_gradient_matches_finite_differences() {
        let p = AslParams::default();
        let mut rng = seed::rng(1);
        let z = DMatrix::from_fn(6, 5, |_, _| rng.random_range(-4.0..4.0));
        let y = DMatrix::from_fn(6, 5, |_, _| if rng.random::<f64>() < 0.3 { 1.0 } else { 0.0 });
        let g = asl_grad(&z, &y, &p);
        let h = 1e-4;
        for i in 0..z.len() {
            let mut zp = z.clone();
            zp[i] += h;
            let mut zm = z.clone();
            zm[i] -= h;
            let num = (asl_loss(&zp, &y, &p) - asl_loss(&zm, &y, &p)) / (2.0 * h);
            if num.abs() > 1e-7 || g[i].abs() > 1e-7 {
                assert!(rel_err(g[i], num) <= 1e-3, "index {i}: {} vs {num}", g[i]);
            }
        }
    }

    #[test]
    fn asl_ignores_easy_negatives() {
        let p = AslParams::default();
        // sigmoid(-4) < margin, so the negative contributes nothing.
        let (l, g) = asl_element(-4.0, 0.0, &p);
        assert_eq!((l, g), (0.0, 0.0));
        let (l, _) = asl_element(2.0, 1.0, &p);
        assert!((l - (-sigmoid(2.0).ln())).abs() < 1e-12);
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let mut rng = seed::rng(2);
        let mlp = Mlp::new(&[4, 7, 5, 3], &mut rng);
        let x = DMatrix::from_fn(5, 4, |_, _| rng.random_range(-1.0..1.0));
        let y = DMatrix::from_fn(5, 3, |_, _| rng.random_range(0.0..1.0));
        let (out, tape) = mlp.forward_tape(&x, 0.0, None);
        let (gw, gb) = mlp.backward(&tape, mse_grad(&out, &y));
        let h = 1e-5;
        for l in 0..mlp.weights.len() {
            for i in 0..mlp.weights[l].len() {
                let mut a = mlp.clone();
                a.weights[l][i] += h;
                let mut b = mlp.clone();
                b.weights[l][i] -= h;
                let num = (mse_loss(&a.predict(&x), &y) - mse_loss(&b.predict(&x), &y)) / (2.0 * h);
                assert!(rel_err(gw[l][i], num) <= 1e-3 || (gw[l][i] - num).abs() < 1e-8);
            }
            for i in 0..mlp.biases[l].len() {
                let mut a = mlp.clone();
                a.biases[l][i] += h;
                let mut b = mlp.clone();
                b.biases[l][i] -= h;
                let num = (mse_loss(&a.predict(&x), &y) - mse_loss(&b.predict(&x), &y)) / (2.0 * h);
                assert!(rel_err(gb[l][i], num) <= 1e-3 || (gb[l][i] - num).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut gw = vec![DMatrix::from_element(2, 2, 3.0)];
        let mut gb = vec![RowDVector::from_element(2, 4.0)];
        let before = clip_gradients(&mut gw, &mut gb, 1.0);
        assert!((before - (36.0f64 + 32.0).sqrt()).abs() < 1e-12);
        let after = (gw[0].norm_squared() + gb[0].norm_squared()).sqrt();
        assert!((after - 1.0).abs() < 1e-12);
    }
}
