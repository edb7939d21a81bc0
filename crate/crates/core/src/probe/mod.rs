//! Hidden-state analyses: temporal-offset CCA and MLP probes that predict
//! per-head retrieval scores from the final hidden state.

mod cca;
mod dataset;
mod metrics;
mod mlp;
mod train;

pub use cca::{cca, min_max_columns, temporal_sweep, z_score_columns, CcaConfig, CcaResult, Pca};
pub use dataset::{collect_pairs, features_from_trace, PairDataset, Split, TraceFeatures};
pub use metrics::{average_precision, best_f1_threshold, classifier_metrics, regressor_metrics, ClassifierMetrics, ProbeMetrics, RegressorMetrics};
pub use mlp::{asl_grad, asl_loss, mse_grad, mse_loss, AslParams, Mlp};
pub use train::{evaluate_probe, predict_heads, train_probe, ProbeConfig, ProbeLoss, ProbeModel, TrainReport};
