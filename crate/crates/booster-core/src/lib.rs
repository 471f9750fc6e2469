//! Adversarial training with a trainable frame signal.
//!
//! The library provides a reverse-mode tape over f32 tensors, a small
//! convolutional classifier, L-inf and L2 white-box attacks, and a training
//! loop that co-optimizes the classifier with a universal pixel frame
//! injected around every image. Everything is deterministic given a seed:
//! randomness comes from named streams, reductions have a fixed order, and
//! checkpoints round-trip bit-exactly.

pub mod analysis;
pub mod attack;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod graph;
pub mod harness;
pub mod model;
pub mod ops;
pub mod optim;
pub mod rng;
pub mod signal;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use model::Model;
pub use signal::BoosterSignal;
pub use tensor::Tensor;
pub use train::{Defense, TrainPlan, Trainer};
