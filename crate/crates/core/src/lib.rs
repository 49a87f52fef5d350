//! Long-tail aware feature learning and cascaded hierarchical classification.
//!
//! The crate works on labeled feature-vector datasets (class 0 is background,
//! positive classes are `1..=C`). It covers the whole pipeline:
//!
//! - [`dataset`]: the `LTFV1` text format, splits and long-tail profiling.
//! - [`datagen`]: synthetic Zipf-distributed datasets with a planted group structure.
//! - [`sampling`]: `rand-pos`, `rand-all`, `pseudo-uniform` subsets and class-uniform mini-batches.
//! - [`models`]: a small MLP with per-layer freeze flags, softmax cross-entropy training
//!   and one-vs-rest linear SVMs on its last hidden layer.
//! - [`clustering`]: class similarity measures and nested group hierarchies.
//! - [`hier_train`]: parent-initialized training of one model per hierarchy node with
//!   cascaded negative mining.
//! - [`cascade`]: threshold-gated inference, threshold calibration and cost accounting.
//! - [`eval`]: ranking AP / mAP and experiment sweeps.
//! - [`cli`]: the `ltcascade` command line.
//!
//! Data-parallel loops go through [`exec`], which uses rayon when the `parallel`
//! feature is on and falls back to plain iteration otherwise (or when
//! [`exec::set_sequential`] is set).

pub mod cascade;
pub mod cli;
pub mod clustering;
pub mod config;
pub mod datagen;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod exec;
pub mod hier_train;
pub mod models;
pub mod sampling;
pub mod seed;

pub use error::{Error, Result};

/// Score assigned to classes whose cascade path was rejected, and to classes an
/// SVM bank could not be trained for. Serialized as `-inf`.
pub const SENTINEL: f64 = f64::MIN;
