//! Probe training, evaluation and head prediction.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::dataset::{PairDataset, Split};
use super::metrics::{best_f1_threshold, classifier_metrics, regressor_metrics, ProbeMetrics};
use super::mlp::{asl_grad, asl_loss, clip_gradients, mse_grad, mse_loss, Adam, AslParams, Mlp};
use crate::model::{HeadId, HeadLayout};
use crate::{seed, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeLoss {
    /// Multi-label classifier on binary scores.
    Asymmetric,
    /// Regressor on real-valued scores.
    SquaredError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    /// Hidden widths; `None` means [8d, 4d, 4d] for input width d.
    #[serde(default)]
    pub hidden_dims: Option<Vec<usize>>,
    #[serde(default = "d_dropout")]
    pub dropout: f64,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_patience")]
    pub patience: usize,
    #[serde(default = "d_factor")]
    pub plateau_factor: f64,
    #[serde(default = "d_plateau_eps")]
    pub plateau_threshold: f64,
    #[serde(default = "d_clip")]
    pub clip_norm: f64,
    pub loss: ProbeLoss,
    #[serde(default)]
    pub asl: AslParams,
    #[serde(default)]
    pub seed: u64,
}

fn d_dropout() -> f64 {
    0.1
}
fn d_epochs() -> usize {
    100
}
fn d_batch() -> usize {
    128
}
fn d_lr() -> f64 {
    3e-4
}
fn d_patience() -> usize {
    3
}
fn d_factor() -> f64 {
    0.5
}
fn d_plateau_eps() -> f64 {
    1e-4
}
fn d_clip() -> f64 {
    1.0
}

impl ProbeConfig {
    pub fn new(loss: ProbeLoss) -> Self {
        Self {
            hidden_dims: None,
            dropout: d_dropout(),
            epochs: d_epochs(),
            batch_size: d_batch(),
            learning_rate: d_lr(),
            patience: d_patience(),
            plateau_factor: d_factor(),
            plateau_threshold: d_plateau_eps(),
            clip_norm: d_clip(),
            loss,
            asl: AslParams::default(),
            seed: 0,
        }
    }

    pub fn dims(&self, input: usize) -> Vec<usize> {
        self.hidden_dims.clone().unwrap_or_else(|| vec![8 * input, 4 * input, 4 * input])
    }

    pub fn validate(&self) -> Result<()> {
        let positive = self.epochs > 0
            && self.batch_size > 0
            && self.learning_rate > 0.0
            && self.clip_norm > 0.0
            && self.hidden_dims.as_ref().is_none_or(|d| !d.is_empty() && d.iter().all(|&x| x > 0));
        if !positive || !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.plateau_factor) {
            return Err(Error::Config(format!("invalid probe configuration {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeModel {
    pub mlp: Mlp,
    pub loss: ProbeLoss,
    pub layout: HeadLayout,
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    /// Decision threshold on sigmoid outputs (classifiers only).
    pub threshold: Option<f64>,
}

impl ProbeModel {
    fn standardize(&self, rows: &[&[f64]]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), self.input_mean.len(), |i, j| (rows[i][j] - self.input_mean[j]) / self.input_std[j])
    }

    /// Per-head scores: probabilities for classifiers, raw values for regressors.
    pub fn predict_rows(&self, rows: &[&[f64]]) -> Result<DMatrix<f64>> {
        if let Some(r) = rows.iter().find(|r| r.len() != self.input_mean.len()) {
            return Err(Error::InvalidInput(format!(
                "probe expects {}-dimensional input, got {}",
                self.input_mean.len(),
                r.len()
            )));
        }
        let out = self.mlp.predict(&self.standardize(rows));
        Ok(match self.loss {
            ProbeLoss::Asymmetric => out.map(sigmoid),
            ProbeLoss::SquaredError => out,
        })
    }

    pub fn predict(&self, hidden: &[f64]) -> Result<Vec<f64>> {
        Ok(self.predict_rows(&[hidden])?.row(0).iter().copied().collect())
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Heads ordered by predicted score, descending; ties by (layer, head).
pub fn predict_heads(probe: &ProbeModel, hidden: &[f64], top_n: usize) -> Result<Vec<HeadId>> {
    let scores = probe.predict(hidden)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    Ok(order.into_iter().take(top_n).map(|i| probe.layout.head(i)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub metrics: ProbeMetrics,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub learning_rates: Vec<f64>,
    pub test_rows: usize,
}

fn gather<'a>(rows: &'a [Vec<f64>], idx: &[usize]) -> Vec<&'a [f64]> {
    idx.iter().map(|&i| rows[i].as_slice()).collect()
}

fn target_matrix(rows: &[Vec<f64>], idx: &[usize], width: usize) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), width, |i, j| rows[idx[i]][j])
}

fn loss_of(loss: ProbeLoss, asl: &AslParams, out: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    match loss {
        ProbeLoss::Asymmetric => asl_loss(out, y, asl),
        ProbeLoss::SquaredError => mse_loss(out, y),
    }
}

/// Trains a probe on the training split, schedules the learning rate on the
/// validation loss, picks the classifier threshold on validation, and reports
/// metrics on the test split.
pub fn train_probe(dataset: &PairDataset, layout: HeadLayout, config: &ProbeConfig) -> Result<(ProbeModel, TrainReport)> {
    config.validate()?;
    let train = dataset.rows(Split::Train);
    let val = dataset.rows(Split::Validation);
    let test = dataset.rows(Split::Test);
    for (name, rows) in [("training split", &train), ("validation split", &val), ("test split", &test)] {
        if rows.is_empty() {
            return Err(Error::Empty(name));
        }
    }
    let width = layout.total();
    if dataset.targets.iter().any(|t| t.len() != width) {
        return Err(Error::InvalidInput(format!("targets must have {width} entries, one per head")));
    }
    if config.loss == ProbeLoss::Asymmetric && dataset.targets.iter().flatten().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::InvalidInput("asymmetric loss needs binary targets".into()));
    }
    let d = dataset.hidden[0].len();
    let n = train.len() as f64;
    let mut mean = vec![0.0; d];
    for &i in &train {
        for (m, &x) in mean.iter_mut().zip(&dataset.hidden[i]) {
            *m += x / n;
        }
    }
    let mut std = vec![0.0; d];
    for &i in &train {
        for j in 0..d {
            std[j] += (dataset.hidden[i][j] - mean[j]).powi(2) / n;
        }
    }
    let std: Vec<f64> = std.into_iter().map(|v| if v > 0.0 { v.sqrt() } else { 1.0 }).collect();

    let mut rng = seed::rng(config.seed);
    let mut dims = vec![d];
    dims.extend(config.dims(d));
    dims.push(width);
    let mut probe = ProbeModel {
        mlp: Mlp::new(&dims, &mut rng),
        loss: config.loss,
        layout,
        input_mean: mean,
        input_std: std,
        threshold: None,
    };
    let x_val = probe.standardize(&gather(&dataset.hidden, &val));
    let y_val = target_matrix(&dataset.targets, &val, width);

    let mut adam = Adam::new(&probe.mlp);
    let mut lr = config.learning_rate;
    let mut best = f64::INFINITY;
    let mut bad_epochs = 0;
    let mut order = train.clone();
    let mut report = TrainReport {
        metrics: ProbeMetrics::Regressor(super::metrics::RegressorMetrics { mse: 0.0, mae: 0.0, r2: 0.0 }),
        train_loss: Vec::with_capacity(config.epochs),
        val_loss: Vec::with_capacity(config.epochs),
        learning_rates: Vec::with_capacity(config.epochs),
        test_rows: test.len(),
    };
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let x = probe.standardize(&gather(&dataset.hidden, batch));
            let y = target_matrix(&dataset.targets, batch, width);
            let (out, tape) = probe.mlp.forward_tape(&x, config.dropout, Some(&mut rng));
            let loss = loss_of(config.loss, &config.asl, &out, &y);
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss {loss} at epoch {epoch}, batch {b}, lr {lr}")));
            }
            epoch_loss += loss * batch.len() as f64;
            let grad = match config.loss {
                ProbeLoss::Asymmetric => asl_grad(&out, &y, &config.asl),
                ProbeLoss::SquaredError => mse_grad(&out, &y),
            };
            let (mut gw, mut gb) = probe.mlp.backward(&tape, grad);
            clip_gradients(&mut gw, &mut gb, config.clip_norm);
            adam.step(&mut probe.mlp, &gw, &gb, lr);
        }
        let val_loss = loss_of(config.loss, &config.asl, &probe.mlp.predict(&x_val), &y_val);
        report.train_loss.push(epoch_loss / n);
        report.val_loss.push(val_loss);
        report.learning_rates.push(lr);
        if val_loss < best - config.plateau_threshold {
            best = val_loss;
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs > config.patience {
                lr *= config.plateau_factor;
                bad_epochs = 0;
            }
        }
    }

    let test_pred = probe.predict_rows(&gather(&dataset.hidden, &test))?;
    report.metrics = match config.loss {
        ProbeLoss::Asymmetric => {
            let val_pred = probe.predict_rows(&gather(&dataset.hidden, &val))?;
            let labels: Vec<bool> = y_val.iter().map(|&y| y == 1.0).collect();
            let threshold = best_f1_threshold(val_pred.as_slice(), &labels);
            probe.threshold = Some(threshold);
            let y_test = target_matrix(&dataset.targets, &test, width);
            let labels: Vec<bool> = y_test.iter().map(|&y| y == 1.0).collect();
            ProbeMetrics::Classifier(classifier_metrics(test_pred.as_slice(), &labels, threshold))
        }
        ProbeLoss::SquaredError => {
            let pred: Vec<Vec<f64>> = test_pred.row_iter().map(|r| r.iter().copied().collect()).collect();
            let truth: Vec<Vec<f64>> = test.iter().map(|&i| dataset.targets[i].clone()).collect();
            ProbeMetrics::Regressor(regressor_metrics(&pred, &truth))
        }
    };
    Ok((probe, report))
}

/// Metrics of a trained probe on one split of a dataset. Classifiers use
/// their stored threshold.
pub fn evaluate_probe(probe: &ProbeModel, dataset: &PairDataset, split: Split) -> Result<ProbeMetrics> {
    let idx = dataset.rows(split);
    if idx.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    let width = probe.layout.total();
    if dataset.targets.iter().any(|t| t.len() != width) {
        return Err(Error::InvalidInput(format!("targets must have {width} entries, one per head")));
    }
    let pred = probe.predict_rows(&gather(&dataset.hidden, &idx))?;
    Ok(match probe.loss {
        ProbeLoss::Asymmetric => {
            let threshold = probe.threshold.unwrap_or(0.5);
            let labels: Vec<bool> = target_matrix(&dataset.targets, &idx, width).iter().map(|&y| y == 1.0).collect();
            ProbeMetrics::Classifier(classifier_metrics(pred.as_slice(), &labels, threshold))
        }
        ProbeLoss::SquaredError => {
            let pred: Vec<Vec<f64>> = pred.row_iter().map(|r| r.iter().copied().collect()).collect();
            let truth: Vec<Vec<f64>> = idx.iter().map(|&i| dataset.targets[i].clone()).collect();
            ProbeMetrics::Regressor(regressor_metrics(&pred, &truth))
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny(loss: ProbeLoss) -> (PairDataset, HeadLayout, ProbeConfig) {
        let mut rng = seed::rng(3);
        let hidden: Vec<Vec<f64>> = (0..200).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let targets = hidden
            .iter()
            .map(|h| vec![(h[0] > 0.0) as u8 as f64, (h[1] > 0.0) as u8 as f64])
            .collect();
        let mut cfg = ProbeConfig::new(loss);
        cfg.hidden_dims = Some(vec![8]);
        cfg.epochs = 3;
        (PairDataset::from_rows(0, hidden, targets, 1).unwrap(), HeadLayout { n_layers: 1, n_heads: 2 }, cfg)
    }

    #[test]
    fn evaluation_reproduces_reported_test_metrics() {
        let (d, layout, cfg) = tiny(ProbeLoss::Asymmetric);
        let (probe, report) = train_probe(&d, layout, &cfg).unwrap();
        assert_eq!(evaluate_probe(&probe, &d, Split::Test).unwrap(), report.metrics);
    }

    #[test]
    fn deterministic_under_seed() {
        let (d, layout, cfg) = tiny(ProbeLoss::Asymmetric);
        let (a, ra) = train_probe(&d, layout, &cfg).unwrap();
        let (b, rb) = train_probe(&d, layout, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
    }

    #[test]
    fn rejects_bad_inputs() {
        let (mut d, layout, cfg) = tiny(ProbeLoss::Asymmetric);
        assert!(train_probe(&d, HeadLayout { n_layers: 1, n_heads: 3 }, &cfg).is_err());
        d.targets[0][0] = 0.5;
        assert!(train_probe(&d, layout, &cfg).is_err());
        let (mut d, layout, cfg) = tiny(ProbeLoss::SquaredError);
        d.split.iter_mut().for_each(|s| *s = Split::Train);
        assert!(matches!(train_probe(&d, layout, &cfg), Err(Error::Empty(_))));
    }

    #[test]
    fn predict_heads_orders_and_checks_dims() {
        let (d, layout, cfg) = tiny(ProbeLoss::SquaredError);
        let (mut probe, _) = train_probe(&d, layout, &cfg).unwrap();
        let all = predict_heads(&probe, &[0.1, 0.2, 0.3], 2).unwrap();
        assert_eq!(all.len(), 2);
        assert_ne!(all[0], all[1]);
        assert!(predict_heads(&probe, &[0.1], 1).is_err());
        // Force head 1 to dominate through the output bias.
        let last = probe.mlp.biases.len() - 1;
        probe.mlp.biases[last][1] = 1e6;
        assert_eq!(predict_heads(&probe, &[5.0, -5.0, 0.0], 1).unwrap(), vec![HeadId::new(0, 1)]);
    }
}
