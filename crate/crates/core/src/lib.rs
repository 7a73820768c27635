//! Hierarchical graph-convolutional skeleton transformer (HGCT).
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] is a dense tensor type with a tape-based reverse-mode
//!   autodiff graph and a finite-difference gradient oracle.
//! * [`nn`] holds the parameter store, the forward [`nn::Session`] and the
//!   handful of primitive layers (convolutions, norms, affine maps).
//! * [`skeleton`] covers skeleton sequences: ingestion, preprocessing,
//!   modality derivation and a synthetic dataset generator.
//! * [`topology`] builds the partitioned body-graph adjacencies.
//! * [`stgc`] and [`dstt`] are the two block types; [`model`] assembles
//!   them into the three-stage network and provides cost counters,
//!   checkpoints and feature dumps.
//! * [`train`] is the optimisation loop, evaluation, score fusion and the
//!   ablation runner; [`config`] parses the flat key=value configuration.

pub mod config;
pub mod dstt;
pub mod error;
pub mod nn;
pub mod skeleton;
pub mod stgc;
pub mod tensor;
pub mod topology;
pub mod train;
pub mod model;
pub mod verify;

pub use error::{Error, Result};
pub use model::{Hgct, ModelConfig};
pub use skeleton::{DatasetSplit, SkeletonGraph, SkeletonSequence};
pub use tensor::{DType, Graph, Scalar, Tensor, Var};
pub use topology::TopologyMode;
pub use train::TrainConfig;
