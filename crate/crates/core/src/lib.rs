//! Layer-wise adversarial example detection.
//!
//! Three detectors score each hidden layer of a classifier:
//! a one-class SVM on whitened activations ([`ocsvm`]), the Mahalanobis
//! distance to the class means ([`maha`]), and the local intrinsic
//! dimensionality against clean references ([`lid`]). Logistic regression
//! over the concatenated layer scores ([`ensemble`]) yields the posterior
//! probability that an input is adversarial. [`refnet`] provides a small
//! differentiable classifier to attack ([`attacks`]) and extract features
//! from; [`pipeline`] runs the whole experiment from a JSON [`config`].

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attacks;
pub mod config;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod features;
pub mod hyperopt;
pub mod lid;
pub mod linalg;
pub mod maha;
pub mod ocsvm;
pub mod pipeline;
pub mod refnet;
pub mod rng;
pub mod whitening;

pub use attacks::{AttackKind, AttackOutcome, AttackSpec, TargetMode};
pub use data::{Example, LabeledSet, Provenance, SplitSpec, SyntheticSpec};
pub use ensemble::{Combination, Detector, LabeledScoreSet, LogisticModel};
pub use error::{Error, FormatError, Result};
pub use features::FeatureBundle;
pub use hyperopt::{SearchSpace, TrialLog};
pub use lid::LidReference;
pub use linalg::Matrix;
pub use maha::{GaussianLayerModel, ScoreHead};
pub use ocsvm::{OcsvmModel, OcsvmParams};
pub use refnet::{InputBox, TinyNet};
pub use whitening::LayerWhitener;
