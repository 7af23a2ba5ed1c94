//! Structured channel-wise transformer for multivariate time series
//! forecasting, with a HiPPO-LegS summary of all history preceding the
//! look-back window.
//!
//! Module map:
//! - [`numerics`]: dense tensors and a reverse-mode tape.
//! - [`hippo`]: the LegS recurrence, prefix scans and a least-squares oracle.
//! - [`structured`]: upper-triangular masked maps and convolution stacks.
//! - [`attention`]: the channel-wise encoder block.
//! - [`model`]: end-to-end assembly, normalization, checkpoints.
//! - [`data`]: CSV ingestion, splits, scaling, windowing and metrics.
//! - [`trainer`]: Adam with frozen masks, early stopping.
//! - [`verify`]: seeded property suites behind `scformer verify`.

pub mod attention;
pub mod data;
pub mod hippo;
pub mod model;
pub mod numerics;
pub mod structured;
pub mod trainer;
pub mod verify;
