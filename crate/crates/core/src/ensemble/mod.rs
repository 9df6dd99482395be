//! Score aggregation, metrics, and analyses.

pub mod analysis;
pub mod logistic;
pub mod metrics;
pub mod scores;

pub use analysis::{contingency, per_layer_auroc, Contingency, LayerAuroc};
pub use logistic::{
    classify, fit_logistic, fit_logistic_fixed, posterior, sigmoid, LogisticModel, LogisticOptions,
};
pub use metrics::{accuracy, aupr, auroc, Confusion};
pub use scores::{concat_scores, Combination, Detector, DetectorScores, LabeledScoreSet};
