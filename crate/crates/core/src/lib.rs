//! Next-day performance prediction from facial-landmark movement and
//! athlete meta-data.
//!
//! The pipeline:
//!
//! 1. [`dataset`] parses the landmark, meta-data and score CSVs, derives the
//!    binary relative-score label and partitions the videos.
//! 2. [`features`] turns each landmark series into per-channel deltas scaled
//!    to `[-1, 1]`.
//! 3. [`model`] is the late-fusion network: one LSTM per landmark channel, a
//!    ReLU network for meta-data, and a shared two-class head.
//! 4. [`training`] fits it with a class-weighted loss; [`evaluation`] scores
//!    it and runs the facial / meta / merged ablation.
//! 5. [`synthgen`] produces datasets with a controllable signal in each
//!    modality.
//!
//! Per-sample work (feature extraction, per-sample gradients, evaluation,
//! synthetic generation) goes through [`exec`], which uses rayon when the
//! `parallel` feature is on. Reductions always run in a fixed order, so
//! results are bit-identical with or without it.

pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod exec;
pub mod features;
pub mod gradcheck;
pub mod model;
pub mod pipeline;
pub mod synthgen;
pub mod training;

pub use error::{Error, Result};
pub use exec::ExecPolicy;
