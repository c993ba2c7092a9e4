//! # kvmargin-core
//!
//! Margin-based generalization predictors whose margins are normalized by the
//! Wasserstein-1 k-variance of per-class feature distributions.
//!
//! The crate is `no_std` (it only needs `alloc`) and contains the numerical
//! pieces:
//!
//! | Module | Contents |
//! |--------|----------|
//! | [`transport`] | exact W1 between discrete measures (network simplex, Jonker–Volgenant, 1-D fast path) |
//! | [`kvariance`] | split-sampling estimator of the W1 k-variance |
//! | [`ingest`] | in-memory model dump, validation, class partitioning, subsampling |
//! | [`margins`] | raw, GN, kV, kV-GN, SN and TV-GN margin distributions |
//! | [`bounds`] | empirical margin bound and Wasserstein separation checks |
//! | [`scoring`] | conditional mutual information and Kendall's tau over model collections |
//! | [`synthgen`] | synthetic measures and fixtures with closed-form margins |
//!
//! File formats, reports and the command-line interface live in the `kvmargin`
//! crate.

#![cfg_attr(not(test), no_std)]
// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod bounds;
pub mod error;
pub mod ingest;
pub mod kvariance;
pub mod margins;
pub mod matrix;
pub mod rng;
pub mod scoring;
pub mod synthgen;
pub mod transport;

pub use error::{Error, Result};
pub use ingest::{FeatureLayer, GradientReference, ModelDump};
pub use kvariance::{KVarianceConfig, KVarianceEstimate, SplitSampling};
pub use margins::{MarginDistribution, MarginKind, NormalizerReport, Statistic};
pub use matrix::Matrix;
pub use transport::{PointCloud, TransportPlan};
