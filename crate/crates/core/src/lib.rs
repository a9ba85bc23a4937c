//! Pose-based isolated sign recognition: pose data, transforms, corpus
//! storage, sequence and graph classifiers, self-supervised pretraining and
//! windowed streaming inference.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod corpus;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod infer;
pub mod models;
pub mod params;
pub mod pose;
pub mod pretrain;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod transforms;

pub use error::{Error, Result};
