//! Desk-scale laboratory for concept bottleneck models.
//!
//! The crate is organized bottom-up:
//!
//! * [`scalar`], [`tensor`], [`graph`] — a scalar-generic dense array type
//!   and a reverse-mode value graph with a fixed primitive set;
//! * [`datagen`] — synthetic concept tasks with exact Bayes posteriors and
//!   distribution shifts;
//! * [`models`] — MixCEM and its baseline family (vanilla CBM, hybrid CBM,
//!   CEM) expressed as value graphs;
//! * [`training`] — SGD with momentum, RandInt, residual dropout, plateau
//!   learning-rate decay and early stopping;
//! * [`calibration`] — per-concept Platt scaling and calibration error;
//! * [`interventions`] — concept intervention curves and Bayes reference
//!   predictors;
//! * [`metrics`] — ROC-AUC, bottleneck shift, entropy summaries and the
//!   combined evaluation report.
//!
//! The numeric core is generic over [`scalar::Scalar`] (`f32` or `f64`); the
//! laboratory itself runs in `f64`, via the aliases below.

pub mod calibration;
pub mod datagen;
pub mod graph;
pub mod interventions;
pub mod metrics;
pub mod models;
pub mod scalar;
pub mod seeding;
pub mod tensor;
pub mod training;

/// Default array type for the lab: 64-bit elements.
pub type Array = tensor::DenseArray<f64>;
/// Single-precision variant of [`Array`].
pub type Array32 = tensor::DenseArray<f32>;
/// Default value graph type for the lab: 64-bit elements.
pub type ValueGraph = graph::Graph<f64>;
/// Single-precision variant of [`ValueGraph`].
pub type ValueGraph32 = graph::Graph<f32>;
